"""Command-line entry point: ``run``, ``replay``, ``inspect`` and ``eval``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

from . import coordinator, simworld
from .posegraph import GraphConfig

LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}

log = logging.getLogger("sim3fuse")


def _setup_logging():
    name = os.environ.get("MAGS_LOG_LEVEL", "warn").strip().lower()
    level = LOG_LEVELS.get(name)
    if level is None:
        print(f"unknown MAGS_LOG_LEVEL {name!r}; using warn", file=sys.stderr)
        level = logging.WARNING
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def _graph_config(cfg):
    """Threshold overrides: any ``GraphConfig`` or verification field given in the scenario file."""
    from dataclasses import fields, replace

    gc = GraphConfig()
    th = gc.thresholds
    top = {f.name: f for f in fields(gc)}
    sub = {f.name: f for f in fields(th)}
    over_top, over_sub = {}, {}
    for k, v in cfg.items():
        if k in simworld.CONFIG_DEFAULTS:
            continue
        if k in top and k != "thresholds":
            over_top[k] = type(getattr(gc, k))(v)
        elif k in sub:
            over_sub[k] = type(getattr(th, k))(v)
        else:
            raise ValueError(f"unknown config key {k!r}")
    if over_sub:
        over_top["thresholds"] = replace(th, **over_sub)
    return replace(gc, **over_top)


def _summary_line(report):
    ev = report.get("evaluation", {})
    parts = [f"nodes={report['nodes']}", f"verified={report['verification']['accepted']}/{report['verification']['pairs']}"]
    for a, e in sorted(ev.get("agents", {}).items()):
        if "ate_rmse_cm" in e:
            parts.append(f"agent{a}: ate={e['ate_rmse_cm']:.3f}cm scale_err={e.get('relative_scale_error', float('nan')):.4f}")
    return "  ".join(parts)


def cmd_run(args):
    text = Path(args.scenario).read_text()
    cfg = simworld.parse_config(text)
    if args.seed is not None:
        cfg["seed"] = str(args.seed)
    gconf = _graph_config(cfg)
    t0 = time.perf_counter()
    scenario = simworld.scenario_from_config(cfg)
    items, _ = simworld.simulate(scenario)
    data = coordinator.encode_stream(coordinator.messages_from_items(items))
    t1 = time.perf_counter()
    result = coordinator.run(data, gconf, threads=args.threads, strict=args.strict)
    t2 = time.perf_counter()
    written = coordinator.write_outputs(result, args.out, stream_bytes=data)
    (Path(args.out) / "scenario.cfg").write_text(simworld.dump_config(cfg))
    log.info("simulation %.2fs, coordinator %.2fs", t1 - t0, t2 - t1)
    print(_summary_line(result.report))
    print(f"wrote {len(written) + 1} files to {args.out}")
    return 0


def cmd_replay(args):
    data = Path(args.stream).read_bytes()
    result = coordinator.run(data, GraphConfig(), threads=args.threads, strict=args.strict)
    if args.out:
        coordinator.write_outputs(result, args.out)
        print(_summary_line(result.report))
    else:
        sys.stdout.write(coordinator.report_json(result.report))
    return 0


def cmd_inspect(args):
    g = json.loads(Path(args.graph).read_text())
    nodes, edges = g.get("nodes", []), g.get("edges", [])
    print(f"gauge: {g.get('gauge')}")
    print(f"nodes: {len(nodes)}")
    kinds = {}
    for e in edges:
        k = kinds.setdefault(e["kind"], [0, 0])
        k[0] += 1
        k[1] += int(e["valid"])
    for kind, (n, valid) in sorted(kinds.items()):
        print(f"{kind} edges: {n} ({valid} valid)")
    for n in nodes:
        s = n["correction"][0]
        print(f"  node ({n['agent']},{n['index']}) scale={s:.6f}{' gauge' if n['gauge'] else ''}")
    return 0


def cmd_eval(args):
    est = coordinator.read_tum(Path(args.est).read_text())
    gt = coordinator.read_tum(Path(args.gt).read_text())
    ate = coordinator.ate_rmse(est, gt, args.mode)
    print(f"ate_rmse_cm {ate:.6f}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="sim3fuse", description="Multi-agent Sim(3) submap alignment and map fusion.")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="simulate a scenario and run the coordinator")
    r.add_argument("--scenario", required=True, help="key=value scenario file")
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--strict", action="store_true", help="abort on malformed messages")
    r.add_argument("--threads", type=int, default=1)
    r.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    r.set_defaults(func=cmd_run)

    rp = sub.add_parser("replay", help="run the coordinator on a serialized message stream")
    rp.add_argument("--stream", required=True)
    rp.add_argument("--out", default=None, help="write artifacts here instead of printing the report")
    rp.add_argument("--strict", action="store_true")
    rp.add_argument("--threads", type=int, default=1)
    rp.set_defaults(func=cmd_replay)

    i = sub.add_parser("inspect", help="summarise a graph.json export")
    i.add_argument("--graph", required=True)
    i.set_defaults(func=cmd_inspect)

    e = sub.add_parser("eval", help="ATE RMSE between two TUM trajectories")
    e.add_argument("--est", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--mode", choices=("sim3", "se3"), default="sim3")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None):
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
