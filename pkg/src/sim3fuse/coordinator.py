"""Message channel, graph driver, fusion scheduling, evaluation and exports.

A run consumes an ordered stream of framed messages.  Summaries and PGBA
reports drive the submap graph; map payloads and ground truth are stored for
fusion and evaluation.  Whenever the fusable set changes a fusion job is
triggered on an immutable snapshot; the final fusion at stream end produces
the exported maps.
"""

from __future__ import annotations

import json
import logging
import os
import struct
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np

from .fusion import VOXEL, CarveFrame, Gaussians, coverage_stats, fuse, ply_bytes
from .liegroup import Sim3
from .posegraph import GraphConfig, PgbaMessage, SubmapGraph, decode_pgba, encode_pgba
from .registration import GridNCCMatcher, umeyama
from .simworld import GroundTruth, MapPayload
from .summary import SubmapSummary, SummaryFormatError, decode_summary, encode_summary

log = logging.getLogger(__name__)

STREAM_MAGIC = b"MAGSTRM1"
MESSAGE_MAGIC = b"MAGM"
_HEADER = struct.Struct("<4sBiII")
ASSOC_TOLERANCE = 0.02
REPORT_VERSION = 1


class Kind(IntEnum):
    SUMMARY = 1
    PGBA = 2
    MAP = 3
    TRUTH = 4


class StreamFormatError(ValueError):
    """Malformed stream; ``offset`` is the byte position of the bad frame."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


@dataclass(frozen=True)
class Message:
    kind: Kind
    agent_id: int
    seq: int
    payload: bytes


def encode_message(m):
    return _HEADER.pack(MESSAGE_MAGIC, int(m.kind), m.agent_id, m.seq, len(m.payload)) + m.payload


def encode_stream(messages):
    return STREAM_MAGIC + b"".join(encode_message(m) for m in messages)


def iter_frames(data):
    """Yield ``(offset, Message)``; framing errors raise :class:`StreamFormatError`.

    Payload contents are not decoded here.
    """
    data = bytes(data)
    if data[: len(STREAM_MAGIC)] != STREAM_MAGIC:
        raise StreamFormatError("missing stream magic", 0)
    pos = len(STREAM_MAGIC)
    while pos < len(data):
        if pos + _HEADER.size > len(data):
            raise StreamFormatError("truncated message header", pos)
        magic, kind, agent, seq, n = _HEADER.unpack_from(data, pos)
        if magic != MESSAGE_MAGIC:
            raise StreamFormatError("bad message magic", pos)
        end = pos + _HEADER.size + n
        if end > len(data):
            raise StreamFormatError("truncated message payload", pos)
        try:
            k = Kind(kind)
        except ValueError:
            raise StreamFormatError(f"unknown message kind {kind}", pos) from None
        yield pos, Message(k, agent, seq, data[pos + _HEADER.size : end])
        pos = end


# --------------------------------------------------------------------------
# named-array container used by map and ground-truth payloads


def pack_arrays(arrays):
    """Deterministic binary container for a name -> ndarray mapping."""
    out = [struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        nb = name.encode()
        dt = a.dtype.str.encode()
        out.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", len(dt)) + dt)
        out.append(struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape))
        raw = a.tobytes()
        out.append(struct.pack("<Q", len(raw)) + raw)
    return b"".join(out)


def unpack_arrays(buf):
    buf = bytes(buf)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise ValueError(f"array container truncated at byte {pos}")
        b = buf[pos : pos + n]
        pos += n
        return b

    (count,) = struct.unpack("<I", take(4))
    out = {}
    for _ in range(count):
        (ln,) = struct.unpack("<H", take(2))
        name = take(ln).decode()
        (ld,) = struct.unpack("<B", take(1))
        dt = np.dtype(take(ld).decode())
        (nd,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{nd}I", take(4 * nd))
        (nraw,) = struct.unpack("<Q", take(8))
        if nraw != dt.itemsize * int(np.prod(shape, dtype=np.int64)):
            raise ValueError(f"array {name!r} size mismatch")
        out[name] = np.frombuffer(take(nraw), dtype=dt).reshape(shape).copy()
    if pos != len(buf):
        raise ValueError(f"{len(buf) - pos} trailing bytes in array container")
    return out


def encode_map(p):
    g = p.gaussians
    arrays = {
        "id": np.array([p.agent_id, p.index], dtype="<i8"),
        "timestamps": p.timestamps.astype("<f8"),
        "poses": np.array([x.to_array() for x in p.poses], dtype="<f8").reshape(-1, 8),
        "intrinsics": np.asarray(p.intrinsics, dtype="<f8"),
        "depths": p.depths.astype("<f4"),
        "rendered": p.rendered.astype("<f4"),
        "captured": p.captured.astype("<f4"),
        "g_means": g.means.astype("<f8"),
        "g_scales": g.scales.astype("<f8"),
        "g_rotations": g.rotations.astype("<f8"),
        "g_opacities": g.opacities.astype("<f8"),
        "g_colors": g.colors.astype("<f8"),
        "g_provenance": g.provenance.astype("<i8"),
    }
    if g.gt_means is not None:
        arrays["g_gt_means"] = g.gt_means.astype("<f8")
    return pack_arrays(arrays)


def decode_map(buf):
    a = unpack_arrays(buf)
    g = Gaussians(
        a["g_means"], a["g_scales"], a["g_rotations"], a["g_opacities"], a["g_colors"], a["g_provenance"], a.get("g_gt_means")
    )
    return MapPayload(
        int(a["id"][0]),
        int(a["id"][1]),
        a["timestamps"],
        [Sim3.from_array(x) for x in a["poses"]],
        g,
        a["intrinsics"],
        a["depths"].astype(np.float64),
        a["rendered"].astype(np.float64),
        a["captured"].astype(np.float64),
    )


def encode_truth(t):
    arrays = {"scene_diagonal": np.array([t.scene_diagonal])}
    for a in sorted(t.timestamps):
        arrays[f"a{a}_timestamps"] = t.timestamps[a]
        arrays[f"a{a}_positions"] = t.positions[a]
        arrays[f"a{a}_quats"] = t.quats[a]
        arrays[f"a{a}_scale"] = np.array([t.scale_errors[a]])
    nodes = sorted(t.frames)
    arrays["frame_nodes"] = np.array(nodes, dtype="<i8").reshape(-1, 2)
    arrays["frames"] = np.array([t.frames[k].to_array() for k in nodes]).reshape(-1, 8)
    return pack_arrays(arrays)


def decode_truth(buf):
    a = unpack_arrays(buf)
    agents = sorted(int(k[1:].split("_")[0]) for k in a if k.startswith("a") and k.endswith("_scale"))
    frames = {(int(n[0]), int(n[1])): Sim3.from_array(f) for n, f in zip(a["frame_nodes"], a["frames"])}
    return GroundTruth(
        {x: a[f"a{x}_timestamps"] for x in agents},
        {x: a[f"a{x}_positions"] for x in agents},
        {x: a[f"a{x}_quats"] for x in agents},
        {x: float(a[f"a{x}_scale"][0]) for x in agents},
        frames,
        float(a["scene_diagonal"][0]),
    )


_ENCODERS = {
    "summary": (Kind.SUMMARY, encode_summary),
    "pgba": (Kind.PGBA, encode_pgba),
    "map": (Kind.MAP, encode_map),
    "truth": (Kind.TRUTH, encode_truth),
}


def messages_from_items(items):
    """Frame simulator outputs, numbering each agent's messages from 0."""
    seq = {}
    out = []
    for it in items:
        kind, enc = _ENCODERS[it.kind]
        n = seq.get(it.agent_id, 0)
        seq[it.agent_id] = n + 1
        out.append(Message(kind, it.agent_id, n, enc(it.obj)))
    return out


def decode_payload(m):
    if m.kind == Kind.SUMMARY:
        s = decode_summary(m.payload)
        if s.agent_id != m.agent_id:
            raise ValueError(f"summary agent {s.agent_id} sent on channel of agent {m.agent_id}")
        return s
    if m.kind == Kind.PGBA:
        return decode_pgba(m.payload)
    if m.kind == Kind.MAP:
        return decode_map(m.payload)
    return decode_truth(m.payload)


# --------------------------------------------------------------------------
# evaluation


def read_tum(path_or_text):
    """Parse ``timestamp tx ty tz qx qy qz qw`` lines into an (N, 8) array."""
    text = path_or_text
    if isinstance(path_or_text, (str, os.PathLike)) and "\n" not in str(path_or_text) and Path(path_or_text).exists():
        text = Path(path_or_text).read_text()
    rows = []
    for n, line in enumerate(str(text).splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        vals = line.split()
        if len(vals) != 8:
            raise ValueError(f"TUM line {n}: expected 8 fields, got {len(vals)}")
        rows.append([float(v) for v in vals])
    return np.array(rows, dtype=np.float64).reshape(-1, 8)


def tum_text(timestamps, positions, quats_wxyz):
    lines = []
    for t, p, q in zip(timestamps, positions, quats_wxyz):
        vals = [t, *p, q[1], q[2], q[3], q[0]]
        lines.append(" ".join(f"{v:.9f}" for v in vals))
    return "".join(x + "\n" for x in lines)


def associate(est_t, gt_t, tol=ASSOC_TOLERANCE):
    """Nearest-timestamp pairs ``(i_est, i_gt)`` with ``|dt| <= tol``."""
    est_t = np.asarray(est_t, dtype=np.float64)
    gt_t = np.asarray(gt_t, dtype=np.float64)
    if len(est_t) == 0 or len(gt_t) == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    order = np.argsort(gt_t, kind="stable")
    gs = gt_t[order]
    j = np.clip(np.searchsorted(gs, est_t), 1, max(len(gs) - 1, 1))
    lo = np.clip(j - 1, 0, len(gs) - 1)
    hi = np.clip(j, 0, len(gs) - 1)
    pick = np.where(np.abs(gs[lo] - est_t) <= np.abs(gs[hi] - est_t), lo, hi)
    ok = np.abs(gs[pick] - est_t) <= tol
    return np.flatnonzero(ok), order[pick[ok]]


def ate_rmse(est, gt, mode="sim3", tol=ASSOC_TOLERANCE):
    """Position RMSE in centimetres after Sim3 or SE3 alignment of ``est`` onto ``gt``.

    ``est`` and ``gt`` are TUM arrays ``(N, 8)`` or ``(timestamps, positions)``
    pairs.
    """
    if mode not in ("sim3", "se3"):
        raise ValueError(f"mode must be sim3 or se3, got {mode!r}")
    et, ep = _split(est)
    gt_t, gp = _split(gt)
    i, j = associate(et, gt_t, tol)
    if len(i) < 3:
        raise ValueError(f"need at least 3 matched poses, got {len(i)}")
    T = umeyama(ep[i], gp[j], with_scale=(mode == "sim3"), min_rank=1)
    r = T.act(ep[i]) - gp[j]
    return 100.0 * float(np.sqrt(np.mean(np.sum(r * r, axis=1))))


def _split(x):
    if isinstance(x, tuple):
        return np.asarray(x[0], dtype=np.float64), np.asarray(x[1], dtype=np.float64).reshape(-1, 3)
    a = np.asarray(x, dtype=np.float64)
    return a[:, 0], a[:, 1:4]


# --------------------------------------------------------------------------
# fusion jobs


@dataclass(frozen=True, eq=False)
class FusionSnapshot:
    """Immutable inputs of one fusion job."""

    corrections: dict
    fusable: frozenset
    maps: dict
    rewrites: dict

    def to_global(self, node):
        return self.corrections[node] @ self.rewrites.get(node, Sim3.identity())

    def agent_nodes(self, agent):
        return [k for k in sorted(self.maps) if k[0] == agent and k in self.corrections]


def _own_map(snap, agent):
    parts = [snap.maps[k].gaussians.transformed(snap.to_global(k)) for k in snap.agent_nodes(agent)]
    return Gaussians.concat(parts) if parts else Gaussians.empty()


def _carve_frames(snap, agent):
    out = []
    for k in snap.agent_nodes(agent):
        p = snap.maps[k]
        C = snap.to_global(k)
        for L, d in zip(p.poses, p.depths):
            out.append(CarveFrame(C @ L, d, p.intrinsics))
    return out


def _exposure_pairs(snap, agent):
    pairs = {}
    for k in snap.agent_nodes(agent):
        p = snap.maps[k]
        for i, (r, c) in enumerate(zip(p.rendered, p.captured)):
            pairs[(k[0], k[1], i)] = (r, c, r > 0)
    return pairs


def fuse_agent(snap, agent):
    """Fuse every fusable foreign submap into ``agent``'s map."""
    target = _own_map(snap, agent)
    borrowed = [(snap.maps[k].gaussians, snap.to_global(k)) for k in sorted(snap.fusable) if k[0] != agent and k in snap.maps]
    return fuse(target, borrowed, _carve_frames(snap, agent), carve_stride=1, exposure_pairs=_exposure_pairs(snap, agent))


def fuse_global(snap, agents):
    """Sequential fusion: agents are folded in ascending id order."""
    agents = sorted(agents)
    if not agents:
        return None
    first = agents[0]
    acc = _own_map(snap, first)
    frames = _carve_frames(snap, first)
    res = None
    for b in agents[1:]:
        borrowed = [(snap.maps[k].gaussians, snap.to_global(k)) for k in snap.agent_nodes(b) if k in snap.fusable]
        res = fuse(acc, borrowed, frames, carve_stride=1)
        acc = res.gaussians
        frames = frames + _carve_frames(snap, b)
    return acc


class FusionScheduler:
    """Runs fusion jobs on snapshots.

    With ``threads > 1`` triggered jobs run on background workers; otherwise
    they coalesce and only the final job at stream end is executed.
    """

    def __init__(self, threads=1):
        self.threads = max(1, int(threads))
        self.triggers = 0
        self._pool = ThreadPoolExecutor(self.threads - 1) if self.threads > 1 else None
        self._futures = []
        self._lock = threading.Lock()

    def trigger(self, snap, agents):
        with self._lock:
            self.triggers += 1
            if self._pool is not None:
                self._futures.append(self._pool.submit(lambda: [fuse_agent(snap, a) for a in agents]))

    def finish(self, snap, agents):
        if self._pool is not None:
            for f in self._futures:
                f.result()
            self._pool.shutdown()
        per_agent = {a: fuse_agent(snap, a) for a in sorted(agents)}
        return per_agent, fuse_global(snap, agents)


# --------------------------------------------------------------------------
# coordinator


@dataclass(eq=False)
class RunResult:
    report: dict
    per_agent: dict = field(default_factory=dict)
    global_map: Gaussians = None
    trajectories: dict = field(default_factory=dict)
    truth: GroundTruth = None
    graph: SubmapGraph = None


class Coordinator:
    """Single owner of the submap graph; consumes messages in channel order."""

    def __init__(self, config=GraphConfig(), threads=1, strict=False):
        self.graph = SubmapGraph(config, GridNCCMatcher(), threads)
        self.strict = strict
        self.maps = {}
        self.rewrites = {}
        self.truth = None
        self.fusable = frozenset()
        self.scheduler = FusionScheduler(threads)
        self.warnings = []
        self.n_messages = 0
        self._seq = {}
        self._pgba_seen = 0

    def snapshot(self):
        return FusionSnapshot(self.graph.corrections(), self.fusable, dict(self.maps), dict(self.rewrites))

    def _fail(self, msg, offset):
        if self.strict:
            raise StreamFormatError(msg, offset)
        log.warning("skipping message at byte %d: %s", offset, msg)
        self.warnings.append({"offset": offset, "error": msg})

    def feed(self, message, offset=0):
        """Process one framed message."""
        last = self._seq.get(message.agent_id)
        if last is not None and message.seq <= last:
            return self._fail(f"sequence {message.seq} not increasing for agent {message.agent_id}", offset)
        try:
            obj = decode_payload(message)
        except (SummaryFormatError, ValueError, KeyError, struct.error) as exc:
            return self._fail(f"undecodable {message.kind.name.lower()} payload: {exc}", offset)
        self._seq[message.agent_id] = message.seq
        self.n_messages += 1
        if isinstance(obj, (SubmapSummary, PgbaMessage)):
            if isinstance(obj, PgbaMessage) and obj.node_id not in self.graph.nodes:
                return self._fail(f"PGBA report for unknown submap {obj.node_id}", offset)
            self.graph.handle(obj)
            self._track_rewrites()
            fusable = frozenset(self.graph.fusable_set())
            if fusable != self.fusable:
                self.fusable = fusable
                self.scheduler.trigger(self.snapshot(), self._agents())
        elif isinstance(obj, MapPayload):
            self.maps[obj.node_id] = obj
            self.rewrites[obj.node_id] = Sim3.identity()
        else:
            self.truth = obj

    def _track_rewrites(self):
        for node, _, branch, delta, _ in self.graph.pgba_log[self._pgba_seen :]:
            if branch == "rigid" and node in self.rewrites:
                self.rewrites[node] = delta @ self.rewrites[node]
        self._pgba_seen = len(self.graph.pgba_log)

    def _agents(self):
        return sorted({k[0] for k in self.graph.nodes})

    def run_bytes(self, data):
        try:
            for off, m in iter_frames(data):
                self.feed(m, off)
        except StreamFormatError as exc:
            if self.strict:
                raise
            log.warning("stream truncated: %s", exc)
            self.warnings.append({"offset": exc.offset, "error": str(exc)})
        return self.finish()

    def run_messages(self, messages):
        for m in messages:
            self.feed(m)
        return self.finish()

    # -- results --------------------------------------------------------------
    def trajectories(self, snap):
        """Estimated keyframe poses in the global frame per agent."""
        out = {}
        for a in self._agents():
            ts, pos, quats = [], [], []
            for k in snap.agent_nodes(a):
                p = snap.maps[k]
                C = snap.to_global(k)
                for t, L in zip(p.timestamps, p.poses):
                    P = C @ L
                    ts.append(t)
                    pos.append(P.translation)
                    quats.append(P.quat)
            if ts:
                order = np.argsort(ts, kind="stable")
                out[a] = (np.asarray(ts)[order], np.asarray(pos)[order], np.asarray(quats)[order])
        return out

    def finish(self):
        snap = self.snapshot()
        agents = [a for a in self._agents() if snap.agent_nodes(a)]
        per_agent, global_map = self.scheduler.finish(snap, agents) if agents else ({}, None)
        traj = self.trajectories(snap)
        report = self._report(snap, per_agent, global_map, traj)
        return RunResult(report, per_agent, global_map, traj, self.truth, self.graph)

    def _report(self, snap, per_agent, global_map, traj):
        g = self.graph
        kinds = {}
        for e in g.edges:
            kinds.setdefault(e.kind, {"total": 0, "valid": 0})
            kinds[e.kind]["total"] += 1
            kinds[e.kind]["valid"] += int(e.valid)
        rep = {
            "version": REPORT_VERSION,
            "messages": self.n_messages,
            "nodes": len(g.nodes),
            "edges": kinds,
            "verification": {
                "pairs": len(g.audit),
                "accepted": sum(r.accepted for r in g.audit),
            },
            "gauge": list(g.gauge) if g.gauge else None,
            "corrections": [
                {"agent": k[0], "index": k[1], "correction": c.to_array().tolist()} for k, c in sorted(snap.corrections.items())
            ],
            "fusable": [list(k) for k in sorted(snap.fusable)],
            "pgba": [
                {"node": list(n), "rho_rig": rho, "branch": br, "edges_touched": m} for n, rho, br, _, m in g.pgba_log
            ],
            "solve": None,
            "fusion_triggers": self.scheduler.triggers,
            "agents": {},
            "warnings": self.warnings,
        }
        if g.last_solve is not None:
            rep["solve"] = {
                "evaluations": g.last_solve.evaluations,
                "reason": g.last_solve.reason,
                "final_cost": g.last_solve.final_cost,
            }
        union = Gaussians.concat([snap.maps[k].gaussians for k in sorted(snap.maps)]) if snap.maps else None
        have_gt = union is not None and union.gt_means is not None and len(union)
        # the fusion voxel measured in world units: the global frame is the
        # gauge submap's local frame
        v_world, to_world = VOXEL, None
        if self.truth is not None and g.gauge in self.truth.frames:
            v_world = VOXEL / self.truth.frames[g.gauge].scale
            to_world = self.truth.frames[g.gauge].inverse()
        for a in sorted(per_agent):
            res = per_agent[a]
            entry = {
                "target": res.n_target,
                "borrowed": res.n_borrowed,
                "retained": res.n_retained,
                "pruned": res.n_pruned,
                "total": len(res.gaussians),
                "exposure_fits": len(res.exposures),
            }
            if have_gt:
                entry.update(coverage_stats(res.gaussians, union, v_world, to_world))
            rep["agents"][str(a)] = {"fusion": entry}
        if global_map is not None:
            rep["global_map"] = {"total": len(global_map)}
            if have_gt:
                rep["global_map"].update(coverage_stats(global_map, union, v_world, to_world))
            rep["global_map"]["coverage_voxel_m"] = v_world
        if self.truth is not None:
            rep["evaluation"] = self._evaluate(snap, traj)
        return rep

    def _evaluate(self, snap, traj):
        t = self.truth
        out = {"scene_diagonal_m": t.scene_diagonal, "agents": {}}
        gauge = self.graph.gauge
        all_est, all_gt = [], []
        for a, (ts, pos, _) in sorted(traj.items()):
            if a not in t.timestamps:
                continue
            e = {"poses": int(len(ts))}
            try:
                e["ate_rmse_cm"] = ate_rmse((ts, pos), (t.timestamps[a], t.positions[a]), "sim3")
                e["ate_rmse_se3_cm"] = ate_rmse((ts, pos), (t.timestamps[a], t.positions[a]), "se3")
            except ValueError as exc:
                e["ate_error"] = str(exc)
            ratios = []
            for k in snap.agent_nodes(a):
                if k in t.frames and gauge in t.frames:
                    ratios.append(snap.to_global(k).scale / t.correction(k, gauge).scale)
            if ratios:
                e["relative_scale"] = float(np.median(ratios))
                e["relative_scale_error"] = abs(e["relative_scale"] - 1.0)
            out["agents"][str(a)] = e
            i, j = associate(ts, t.timestamps[a])
            all_est.append(pos[i])
            all_gt.append(t.positions[a][j])
        if all_est and sum(len(x) for x in all_est) >= 3:
            ep, gp = np.concatenate(all_est), np.concatenate(all_gt)
            T = umeyama(ep, gp, min_rank=1)
            r = T.act(ep) - gp
            out["joint_ate_rmse_cm"] = 100.0 * float(np.sqrt(np.mean(np.sum(r * r, axis=1))))
        return out


def report_json(report):
    return json.dumps(report, indent=2, sort_keys=True, allow_nan=False, default=_jsonable) + "\n"


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


def write_outputs(result, out_dir, stream_bytes=None):
    """Write report, audit, graph, trajectories and PLY maps to ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    def put(name, data):
        p = out / name
        if isinstance(data, str):
            p.write_text(data)
        else:
            p.write_bytes(data)
        written.append(name)

    put("report.json", report_json(result.report))
    if result.graph is not None and result.graph.nodes:
        put("audit.jsonl", "".join(r.to_json() + "\n" for r in result.graph.audit))
        put("graph.json", result.graph.to_json())
    for a, (ts, pos, quats) in sorted(result.trajectories.items()):
        put(f"est_agent{a}.tum", tum_text(ts, pos, quats))
    if result.truth is not None:
        t = result.truth
        for a in sorted(t.timestamps):
            put(f"gt_agent{a}.tum", tum_text(t.timestamps[a], t.positions[a], t.quats[a]))
    for a, res in sorted(result.per_agent.items()):
        put(f"map_agent{a}.ply", ply_bytes(res.gaussians))
    if result.global_map is not None:
        put("map_global.ply", ply_bytes(result.global_map))
    if stream_bytes is not None:
        put("stream.bin", stream_bytes)
    return written


def run(stream, config=GraphConfig(), threads=1, strict=False):
    """Run the coordinator over stream bytes or a list of :class:`Message`."""
    c = Coordinator(config, threads, strict)
    if isinstance(stream, (bytes, bytearray, memoryview)):
        return c.run_bytes(stream)
    return c.run_messages(stream)
