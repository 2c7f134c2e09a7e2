"""Deterministic synthetic multi-agent world.

Scenes are axis-aligned boxes with smooth procedural textures, rendered by
exact ray casting.  Each agent sees the world through a private similarity
``E_a`` (world -> agent-local) that carries its monocular scale error; its
keyframes are frozen into submaps, summarised and streamed together with
ground truth.

Camera convention: x right, y down, z forward; pixel centres at integer
coordinates; poses map camera to world.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .fusion import Gaussians
from .liegroup import Sim3, exp, matrix_to_quat
from .posegraph import PgbaMessage, rewrite_summary
from .spatialhash import _zigzag, mix64, point_keys
from .summary import FeatureFrame, SummaryConfig, build_summary

log = logging.getLogger(__name__)

# PGBA events with noise at or below this are treated as rigid rewrites
RIGID_SIGMA = 0.05
GAUSSIAN_STRIDE = 4


# --------------------------------------------------------------------------
# scene


@dataclass(frozen=True)
class Box:
    lo: tuple
    hi: tuple
    textured: bool = True
    cell: float = 0.1
    base: float = 0.5
    contrast: float = 0.7
    tint: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if any(h - l <= 0 for l, h in zip(self.lo, self.hi)):
            raise ValueError(f"degenerate box {self.lo} {self.hi}")


@dataclass(frozen=True, eq=False)
class SceneModel:
    boxes: tuple
    seed: int = 0

    def __post_init__(self):
        b = self.boxes
        object.__setattr__(self, "lo", np.array([x.lo for x in b], dtype=np.float64).reshape(-1, 3))
        object.__setattr__(self, "hi", np.array([x.hi for x in b], dtype=np.float64).reshape(-1, 3))
        object.__setattr__(self, "cell", np.array([x.cell for x in b], dtype=np.float64))
        object.__setattr__(self, "base", np.array([x.base for x in b], dtype=np.float64))
        object.__setattr__(self, "contrast", np.array([x.contrast for x in b], dtype=np.float64))
        object.__setattr__(self, "textured", np.array([x.textured for x in b], dtype=bool))
        object.__setattr__(self, "tint", np.array([x.tint for x in b], dtype=np.float64).reshape(-1, 3))

    @property
    def bounds(self):
        return self.lo.min(axis=0), self.hi.max(axis=0)

    @property
    def diagonal(self):
        lo, hi = self.bounds
        return float(np.linalg.norm(hi - lo))


# face f = 2 * axis + side; surface id = 6 * box + f
_TANGENT_AXES = {0: (1, 2), 1: (0, 2), 2: (0, 1)}


def _u64(x):
    return np.atleast_1d(np.asarray(x)).astype(np.int64).astype(np.uint64)


def _hash(seed, salt, surf, i, j):
    k = _u64(surf) * np.uint64(0x9E3779B97F4A7C15) + np.uint64((salt * 0xD6E8FEB86659FD93) & 0xFFFFFFFFFFFFFFFF)
    k = k ^ (_zigzag(np.atleast_1d(i)) * np.uint64(0xBF58476D1CE4E5B9))
    k = k ^ (_zigzag(np.atleast_1d(j)) * np.uint64(0x94D049BB133111EB))
    return mix64(mix64(k) ^ np.uint64(seed))


def _unit(h):
    return (h >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)


def _smooth(f):
    return f * f * (3.0 - 2.0 * f)


def _value_noise(seed, salt, surf, x, y):
    i = np.floor(x).astype(np.int64)
    j = np.floor(y).astype(np.int64)
    fx, fy = _smooth(x - i), _smooth(y - j)
    h00 = _unit(_hash(seed, salt, surf, i, j))
    h10 = _unit(_hash(seed, salt, surf, i + 1, j))
    h01 = _unit(_hash(seed, salt, surf, i, j + 1))
    h11 = _unit(_hash(seed, salt, surf, i + 1, j + 1))
    return (1 - fx) * (1 - fy) * h00 + fx * (1 - fy) * h10 + (1 - fx) * fy * h01 + fx * fy * h11


def texture(scene, surf, s1, s2):
    """Grey value of surface ``surf`` at tangent coordinates ``(s1, s2)``."""
    surf = np.asarray(surf, dtype=np.int64)
    box = surf // 6
    c = scene.cell[box]
    n = _value_noise(scene.seed, 1, surf, s1 / c, s2 / c)
    n = (n + 0.5 * _value_noise(scene.seed, 2, surf, 2.0 * s1 / c, 2.0 * s2 / c)) / 1.5
    val = scene.base[box] + scene.contrast[box] * (n - 0.5)
    val = np.where(scene.textured[box], val, scene.base[box])
    return np.clip(val, 0.0, 1.0)


def _surface_frame(surf):
    """Tangent axes and normal axis of each surface id."""
    face = np.asarray(surf) % 6
    return face // 2, face % 2


# --------------------------------------------------------------------------
# rendering


@dataclass(eq=False)
class RenderResult:
    depth: np.ndarray
    surface: np.ndarray
    s1: np.ndarray
    s2: np.ndarray
    points: np.ndarray
    image: np.ndarray


def intrinsics_for(width, height, hfov_deg=90.0):
    fx = (width / 2.0) / math.tan(math.radians(hfov_deg) / 2.0)
    return np.array([fx, fx, (width - 1) / 2.0, (height - 1) / 2.0])


def cast_rays(scene, origin, dirs):
    """First hit of rays ``origin + t dirs`` (t > 0) against the scene boxes."""
    o = np.asarray(origin, dtype=np.float64)
    d = np.asarray(dirs, dtype=np.float64).T
    d = np.where(np.abs(d) < 1e-15, 1e-15, d)
    inv = 1.0 / d
    n = d.shape[1]
    best = np.full(n, np.inf)
    surf = np.full(n, -1, dtype=np.int64)
    for b in range(len(scene.lo)):
        lo = (scene.lo[b] - o)[:, None] * inv
        hi = (scene.hi[b] - o)[:, None] * inv
        tmin = np.minimum(lo, hi)
        tmax = np.maximum(lo, hi)
        tnear = np.maximum(np.maximum(tmin[0], tmin[1]), tmin[2])
        tfar = np.minimum(np.minimum(tmax[0], tmax[1]), tmax[2])
        hit = (tnear <= tfar) & (tnear > 1e-9) & (tnear < best)
        if hit.any():
            best[hit] = tnear[hit]
            th = tmin[:, hit]
            axis = np.where(th[0] >= th[1], 0, 1)
            axis = np.where(th[2] > th[axis, np.arange(th.shape[1])], 2, axis)
            side = d[axis, np.flatnonzero(hit)] < 0
            surf[hit] = 6 * b + 2 * axis + side
    ok = surf >= 0
    return np.where(ok, best, 0.0), surf


def render(scene, pose, intrinsics, width, height):
    """Ray-cast a unit-scale camera; depth 0 marks misses."""
    if width < 8 or height < 8:
        raise ValueError("resolution must be at least 8x8")
    fx, fy, cx, cy = intrinsics
    v, u = np.mgrid[0:height, 0:width]
    rays = np.stack([(u.ravel() - cx) / fx, (v.ravel() - cy) / fy, np.ones(u.size)], axis=1)
    dirs = rays @ pose.rotation.T
    t, surf = cast_rays(scene, pose.translation, dirs)
    pts = pose.translation + t[:, None] * dirs
    axis, _ = _surface_frame(np.maximum(surf, 0))
    ta = np.array([_TANGENT_AXES[k] for k in range(3)])
    rows = np.arange(len(t))
    s1 = pts[rows, ta[axis, 0]]
    s2 = pts[rows, ta[axis, 1]]
    hit = surf >= 0
    img = np.zeros(len(t))
    if hit.any():
        img[hit] = texture(scene, surf[hit], s1[hit], s2[hit])
    shape = (height, width)
    return RenderResult(
        t.reshape(shape),
        surf.reshape(shape),
        s1.reshape(shape),
        s2.reshape(shape),
        pts.reshape(height, width, 3),
        img.reshape(shape),
    )


def render_anchor(scene, pose, intrinsics, resolution):
    """World-frame anchor keyframe: grey image and exact disparity."""
    from .summary import AnchorKeyframe

    W, H = resolution
    r = render(scene, pose, intrinsics, W, H)
    with np.errstate(divide="ignore"):
        disp = np.where(r.depth > 0, 1.0 / np.where(r.depth > 0, r.depth, 1.0), 0.0)
    return AnchorKeyframe(pose, r.image, disp, intrinsics)


# --------------------------------------------------------------------------
# keypoints and descriptors


def _vertex_ids(scene, surf, i, j):
    return (_hash(scene.seed, 7, surf, i, j) >> np.uint64(2)).astype(np.int64)


def vertex_positions(surf, i, j, scene):
    """World position of texture-lattice vertex (i, j) on each surface."""
    surf = np.asarray(surf, dtype=np.int64)
    box = surf // 6
    axis, side = _surface_frame(surf)
    c = scene.cell[box]
    plane = np.where(side == 0, scene.lo[box, axis], scene.hi[box, axis])
    ta = np.array([_TANGENT_AXES[k] for k in range(3)])
    out = np.empty((len(surf), 3))
    rows = np.arange(len(surf))
    out[rows, axis] = plane
    out[rows, ta[axis, 0]] = i * c
    out[rows, ta[axis, 1]] = j * c
    return out


_PATCH_U = (np.arange(8) - 3.5) * 0.4
_PATCH_V = (np.arange(4) - 1.5) * 0.4


def vertex_descriptors(scene, surf, i, j):
    """8x4 texture patch around each vertex, mean-removed and L2-normalised."""
    surf = np.asarray(surf, dtype=np.int64)
    c = scene.cell[surf // 6]
    du, dv = np.meshgrid(_PATCH_U, _PATCH_V, indexing="xy")
    du, dv = du.ravel(), dv.ravel()
    s1 = (i[:, None] + du[None]) * c[:, None]
    s2 = (j[:, None] + dv[None]) * c[:, None]
    P = texture(scene, np.repeat(surf, len(du)), s1.ravel(), s2.ravel()).reshape(len(surf), -1)
    P = P - P.mean(axis=1, keepdims=True)
    n = np.linalg.norm(P, axis=1, keepdims=True)
    return np.where(n > 1e-9, P / np.maximum(n, 1e-300), 0.0)


def _cached_descriptors(scene, ids, surf, i, j):
    cache = scene.__dict__.setdefault("_desc_cache", {})
    miss = np.array([k not in cache for k in ids.tolist()], dtype=bool)
    if miss.any():
        fresh = vertex_descriptors(scene, surf[miss], i[miss], j[miss])
        cache.update(zip(ids[miss].tolist(), fresh))
    if len(ids) == 0:
        return np.zeros((0, len(_PATCH_U) * len(_PATCH_V)))
    return np.stack([cache[k] for k in ids.tolist()])


# --------------------------------------------------------------------------
# agents and submaps


@dataclass(eq=False)
class PgbaEvent:
    submap_index: int
    emit_after: int
    delta: Sim3
    sigma: float

    @property
    def rigid(self):
        return self.sigma <= RIGID_SIGMA


@dataclass(eq=False)
class AgentScript:
    agent_id: int
    timestamps: np.ndarray
    poses: list
    scale_error: float = 1.0
    drift_sigma: float = 0.0
    pgba_events: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.poses) < 2:
            raise ValueError("an agent needs at least 2 keyframes")
        if not 0.33 <= self.scale_error <= 3.0:
            raise ValueError(f"scale error {self.scale_error} outside [0.33, 3.0]")


@dataclass(frozen=True)
class WorldConfig:
    width: int = 128
    height: int = 96
    hfov: float = 90.0
    k_max: int = 8
    tau_move: float = 2.0
    point_noise: float = 0.01
    exposure_jitter: float = 0.0
    descriptor_noise: float = 0.02

    @property
    def intrinsics(self):
        return intrinsics_for(self.width, self.height, self.hfov)


@dataclass(eq=False)
class KeyframeRecord:
    """Everything the simulator knows about one keyframe."""

    timestamp: float
    world_pose: Sim3
    render: RenderResult
    captured: np.ndarray
    exposure: tuple


@dataclass(eq=False)
class FrozenSubmap:
    agent_id: int
    index: int
    keyframes: list
    frame: Sim3  # world -> submap-local
    summary: object = None
    gaussians: Gaussians = None
    odometry: Sim3 = field(default_factory=Sim3.identity)
    rewrite: Sim3 = field(default_factory=Sim3.identity)

    @property
    def node_id(self):
        return (self.agent_id, self.index)

    def local_pose(self, kf):
        """Unit-scale camera -> local pose of a keyframe."""
        s = self.frame.scale
        return self.frame @ kf.world_pose @ Sim3(1.0 / s, np.array([1.0, 0, 0, 0]), np.zeros(3))

    def local_centers(self):
        return np.array([self.frame.act(k.world_pose.translation) for k in self.keyframes])


@dataclass(eq=False)
class MapPayload:
    """Submap content shipped for fusion and evaluation.

    Poses are unit-scale camera -> local; depths are in local units at
    ``GAUSSIAN_STRIDE`` decimation with matching intrinsics.
    """

    agent_id: int
    index: int
    timestamps: np.ndarray
    poses: list
    gaussians: Gaussians
    intrinsics: np.ndarray
    depths: np.ndarray
    rendered: np.ndarray
    captured: np.ndarray

    @property
    def node_id(self):
        return (self.agent_id, self.index)


@dataclass(eq=False)
class GroundTruth:
    """World trajectories, scale errors and final submap frames."""

    timestamps: dict
    positions: dict
    quats: dict
    scale_errors: dict
    frames: dict
    scene_diagonal: float

    def correction(self, node, gauge):
        return self.frames[gauge] @ self.frames[node].inverse()


def partition_keyframes(centers, k_max=8, tau_move=2.0):
    """Greedy freeze: add a keyframe, then freeze at ``k_max`` or once the spread exceeds ``tau_move``."""
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    groups, cur = [], []
    for i, c in enumerate(centers):
        cur.append(i)
        pts = centers[cur]
        spread = 0.0
        if len(cur) > 1:
            d = pts[:, None, :] - pts[None, :, :]
            spread = float(np.sqrt(np.max(np.sum(d * d, axis=2))))
        if len(cur) >= k_max or spread > tau_move:
            groups.append(cur)
            cur = []
    if cur:
        groups.append(cur)
    return groups


def _face_rotation(surf):
    """Rotation whose columns are (tangent u, tangent v, normal) of each surface."""
    axis, _ = _surface_frame(surf)
    R = np.zeros((len(surf), 3, 3))
    ta = np.array([_TANGENT_AXES[k] for k in range(3)])
    rows = np.arange(len(surf))
    R[rows, ta[axis, 0], 0] = 1.0
    R[rows, ta[axis, 1], 1] = 1.0
    R[:, :, 2] = np.cross(R[:, :, 0], R[:, :, 1])
    return R


def _labels(scene, r):
    ok = r.surface >= 0
    lab = np.full(r.surface.shape, -1, dtype=np.int64)
    if ok.any():
        h = _hash(scene.seed, 11, r.surface[ok], np.floor(r.s1[ok]), np.floor(r.s2[ok]))
        lab[ok] = (h >> np.uint64(2)).astype(np.int64)
    return lab


def _feature_frame(scene, sub, kf, cfg, rng):
    r = kf.render
    s = sub.frame.scale
    pose = sub.local_pose(kf)
    disp = np.where(r.depth > 0, 1.0 / (s * np.where(r.depth > 0, r.depth, 1.0)), 0.0)
    ok = (r.surface >= 0) & scene.textured[np.maximum(r.surface, 0) // 6]
    cells = np.full(r.surface.shape, -1, dtype=np.int64)
    if ok.any():
        surf = r.surface[ok]
        c = scene.cell[surf // 6]
        i = np.round(r.s1[ok] / c).astype(np.int64)
        j = np.round(r.s2[ok] / c).astype(np.int64)
        ids = _vertex_ids(scene, surf, i, j)
        cells[ok] = ids
        uid, first = np.unique(ids, return_index=True)
        pos = sub.frame.act(vertex_positions(surf[first], i[first], j[first], scene))
        desc = _cached_descriptors(scene, uid, surf[first], i[first], j[first])
        if cfg.descriptor_noise > 0:
            desc = desc + rng.normal(scale=cfg.descriptor_noise, size=desc.shape) * (np.linalg.norm(desc, axis=1, keepdims=True) > 0)
            n = np.linalg.norm(desc, axis=1, keepdims=True)
            desc = np.where(n > 0, desc / np.maximum(n, 1e-300), 0.0)
    else:
        uid = np.zeros(0, dtype=np.int64)
        pos = np.zeros((0, 3))
        desc = np.zeros((0, 32))
    return FeatureFrame(
        kf.timestamp,
        pose,
        r.image.astype(np.float32),
        disp.astype(np.float32),
        cfg.intrinsics,
        _labels(scene, r),
        cells,
        uid,
        pos,
        desc,
    )


def _seed_gaussians(scene, sub, cfg):
    """Back-project every 4th pixel of each keyframe; one Gaussian per 0.05 m voxel."""
    parts = []
    fx = cfg.intrinsics[0]
    st = GAUSSIAN_STRIDE
    for kf in sub.keyframes:
        r = kf.render
        surf = r.surface[::st, ::st].ravel()
        ok = surf >= 0
        if not ok.any():
            continue
        surf = surf[ok]
        pts = r.points[::st, ::st].reshape(-1, 3)[ok]
        z = r.depth[::st, ::st].ravel()[ok]
        img = r.image[::st, ::st].ravel()[ok]
        parts.append((pts, surf, z, img))
    if not parts:
        return Gaussians.empty()
    pts = np.concatenate([p[0] for p in parts])
    surf = np.concatenate([p[1] for p in parts])
    z = np.concatenate([p[2] for p in parts])
    img = np.concatenate([p[3] for p in parts])
    keys = point_keys(pts, 0.05)
    _, first = np.unique(keys, return_index=True)
    first = np.sort(first)
    pts, surf, z, img = pts[first], surf[first], z[first], img[first]
    s = sub.frame.scale
    sig = 0.5 * st * z / fx
    scales = np.stack([sig, sig, 0.1 * sig], axis=1) * s
    axis, _ = _surface_frame(surf)
    per_axis = np.array([matrix_to_quat(sub.frame.rotation @ _face_rotation(np.array([2 * k]))[0]) for k in range(3)])
    quats = per_axis[axis]
    colors = img[:, None] * scene.tint[surf // 6]
    n = len(pts)
    prov = np.stack([np.full(n, sub.agent_id), np.full(n, sub.index), np.arange(n)], axis=1)
    return Gaussians(sub.frame.act(pts), scales, quats, np.full(n, 0.9), np.clip(colors, 0, 1), prov, pts)


def _decimated(cfg):
    K = cfg.intrinsics.copy()
    K /= GAUSSIAN_STRIDE
    return K


def map_payload(sub, cfg):
    st = GAUSSIAN_STRIDE
    s = sub.frame.scale
    return MapPayload(
        sub.agent_id,
        sub.index,
        np.array([k.timestamp for k in sub.keyframes]),
        [sub.local_pose(k) for k in sub.keyframes],
        sub.gaussians,
        _decimated(cfg),
        np.stack([k.render.depth[::st, ::st] * s for k in sub.keyframes]),
        np.stack([k.render.image[::st, ::st] for k in sub.keyframes]),
        np.stack([k.captured[::st, ::st] for k in sub.keyframes]),
    )


def render_keyframes(scene, script, cfg, rng):
    K = cfg.intrinsics
    out = []
    for ts, P in zip(script.timestamps, script.poses):
        r = render(scene, P, K, cfg.width, cfg.height)
        a = b = 0.0
        if cfg.exposure_jitter > 0:
            a = float(rng.normal(scale=cfg.exposure_jitter))
            b = float(rng.normal(scale=0.5 * cfg.exposure_jitter))
        out.append(KeyframeRecord(float(ts), P, r, np.exp(a) * r.image + b, (a, b)))
    return out


def agent_frame(script):
    """world -> agent-local: origin at the first camera, scaled by the scale error."""
    s = script.scale_error
    return Sim3(s, np.array([1.0, 0, 0, 0]), np.zeros(3)) @ script.poses[0].inverse()


def build_submaps(script, scene, cfg=WorldConfig(), seed=0, summary_config=SummaryConfig()):
    """Freeze, summarise and seed Gaussians for one agent's keyframes."""
    rng = np.random.default_rng([seed, script.agent_id, 17])
    kfs = render_keyframes(scene, script, cfg, rng)
    E = agent_frame(script)
    centers = np.array([E.act(k.world_pose.translation) for k in kfs])
    groups = partition_keyframes(centers, cfg.k_max, cfg.tau_move)
    subs = []
    prev_frame = None
    for idx, g in enumerate(groups):
        frame = E
        if script.drift_sigma > 0 and idx > 0:
            frame = exp(rng.normal(scale=script.drift_sigma, size=7)) @ E
        sub = FrozenSubmap(script.agent_id, idx, [kfs[i] for i in g], frame)
        if prev_frame is not None:
            sub.odometry = frame @ prev_frame.inverse()
        prev_frame = frame
        summarise(sub, scene, cfg, seed, summary_config)
        sub.gaussians = _seed_gaussians(scene, sub, cfg)
        subs.append(sub)
    return subs


def summarise(sub, scene, cfg, seed=0, summary_config=SummaryConfig()):
    rng = np.random.default_rng([seed, sub.agent_id, sub.index, 3])
    frames = [_feature_frame(scene, sub, k, cfg, rng) for k in sub.keyframes]
    anchor = len(frames) // 2
    sub.summary = build_summary(
        sub.agent_id,
        sub.index,
        frames,
        anchor,
        summary_config,
        noise_sigma=cfg.point_noise * sub.frame.scale,
        rng=rng,
        odometry=sub.odometry,
    )
    return sub.summary


def emit_pgba_event(sub, event, rng):
    """Report pre/post keyframe centres; rigid events rewrite the submap frame."""
    pre = sub.local_centers()
    post = event.delta.act(pre)
    if event.sigma > 0:
        post = post + rng.normal(scale=event.sigma, size=post.shape)
    msg = PgbaMessage(sub.agent_id, sub.index, pre, post)
    if event.rigid:
        sub.frame = event.delta @ sub.frame
        sub.rewrite = event.delta @ sub.rewrite
    return msg


def current_summary(sub, prev=None):
    """The submap's summary re-expressed in its current local frame."""
    s = rewrite_summary(sub.summary, sub.rewrite)
    if prev is not None:
        s = replace(s, odometry=sub.frame @ prev.frame.inverse())
    return s


# --------------------------------------------------------------------------
# scenarios


def _room(x0, y0, size, height, rng, textured=True, furniture=6, cell=(0.08, 0.15)):
    sx, sy = size
    th = 0.2
    boxes = []

    def tex():
        return dict(
            textured=textured,
            cell=float(rng.uniform(*cell)),
            base=float(rng.uniform(0.35, 0.65)),
            contrast=float(rng.uniform(0.6, 0.9)),
            tint=tuple(rng.uniform(0.6, 1.0, 3)),
        )

    boxes.append(Box((x0 - th, y0 - th, -th), (x0 + sx + th, y0 + sy + th, 0.0), **tex()))
    boxes.append(Box((x0 - th, y0 - th, height), (x0 + sx + th, y0 + sy + th, height + th), **tex()))
    boxes.append(Box((x0 - th, y0, 0.0), (x0, y0 + sy, height), **tex()))
    boxes.append(Box((x0 + sx, y0, 0.0), (x0 + sx + th, y0 + sy, height), **tex()))
    boxes.append(Box((x0, y0 - th, 0.0), (x0 + sx, y0, height), **tex()))
    boxes.append(Box((x0, y0 + sy, 0.0), (x0 + sx, y0 + sy + th, height), **tex()))
    for k in range(furniture):
        ang = 2 * math.pi * (k + rng.uniform(0.2, 0.8)) / furniture
        w, d, h = rng.uniform(0.4, 1.0), rng.uniform(0.4, 0.9), rng.uniform(0.5, 2.0)
        r = min(sx, sy) / 2 - 0.6 - rng.uniform(0.0, 0.5)
        cxy = np.array([x0 + sx / 2 + r * math.cos(ang), y0 + sy / 2 + r * math.sin(ang)])
        boxes.append(Box((cxy[0] - w / 2, cxy[1] - d / 2, 0.0), (cxy[0] + w / 2, cxy[1] + d / 2, h), **tex()))
    return boxes


def look_pose(center, yaw, pitch=-0.15):
    """Unit-scale camera at ``center`` looking along ``yaw`` (z up world), pitched by ``pitch``."""
    f = np.array([math.cos(yaw) * math.cos(pitch), math.sin(yaw) * math.cos(pitch), math.sin(pitch)])
    x = np.cross(f, [0.0, 0.0, 1.0])
    x /= np.linalg.norm(x)
    y = np.cross(f, x)
    R = np.stack([x, y, f], axis=1)
    return Sim3.from_rotation_matrix(R, center)


def _circle(center, radius, height, yaw0, sweep, n, outward=True, pitch=-0.15):
    poses = []
    for k in range(n):
        a = yaw0 + sweep * k / n
        c = np.array([center[0] + radius * math.cos(a), center[1] + radius * math.sin(a), height])
        poses.append(look_pose(c, a if outward else a + math.pi, pitch))
    return poses


def _delta(rng, rot=0.03, trans=0.05, lam=0.01):
    return exp(np.concatenate([rng.normal(scale=trans, size=3), rng.normal(scale=rot, size=3), [rng.normal(scale=lam)]]))


@dataclass(eq=False)
class Scenario:
    seed: int
    plan: str
    scene: SceneModel
    scripts: list
    world: WorldConfig
    expected_edges: set = None


def parse_pgba_plan(text):
    """``agent:submap:emit_after:sigma`` entries separated by ``;``."""
    out = []
    for part in (text or "").replace(",", ";").split(";"):
        part = part.strip()
        if not part:
            continue
        a, l, when, sigma = part.split(":")
        out.append((int(a), int(l), int(when), float(sigma)))
    return out


def generate_scenario(seed=42, n_agents=3, plan="ring", keyframes=96, scales=None, world=WorldConfig(), pgba=(), drift=0.0):
    """Build a deterministic scene plus agent scripts.

    Plans: ``ring`` (agents orbit one furnished room facing the walls),
    ``pair`` (two agents, one submap each, same view sector), ``disjoint``
    (two agents in separate rooms), ``corridor`` (untextured corridor with a
    single small poster, the degenerate-loop case).
    """
    if not 1 <= n_agents <= 8:
        raise ValueError("n_agents must lie in [1, 8]")
    rng = np.random.default_rng([seed, 1])
    if scales is None:
        base = (0.6, 1.0, 1.7)
        scales = [base[a % 3] for a in range(n_agents)]
    scales = [float(s) for s in scales][:n_agents]
    if len(scales) < n_agents:
        raise ValueError("need one scale error per agent")
    dt = 0.1
    expected = None
    if plan == "ring":
        boxes = _room(0.0, 0.0, (8.0, 8.0), 3.0, rng)
        scripts = []
        for a in range(n_agents):
            poses = _circle((4.0, 4.0), 1.2 + 0.3 * (a % 3), 1.4 + 0.1 * (a % 3), 2 * math.pi * a / n_agents + 0.1, 2 * math.pi, keyframes)
            scripts.append(AgentScript(a, 100.0 * a + dt * np.arange(keyframes), poses, scales[a], drift))
    elif plan == "pair":
        boxes = _room(0.0, 0.0, (8.0, 8.0), 3.0, rng)
        n_agents = 2
        scripts = [
            AgentScript(0, dt * np.arange(8), _circle((4.0, 4.0), 1.2, 1.4, 0.0, 0.35, 8), scales[0]),
            AgentScript(1, 100 + dt * np.arange(8), _circle((4.0, 4.0), 1.6, 1.5, 0.1, 0.35, 8), scales[1 % len(scales)]),
        ]
        expected = {((1, 0), (0, 0))}
    elif plan == "disjoint":
        boxes = _room(0.0, 0.0, (8.0, 8.0), 3.0, rng) + _room(30.0, 0.0, (6.0, 7.0), 2.6, rng)
        n_agents = 2
        scripts = [
            AgentScript(0, dt * np.arange(8), _circle((4.0, 4.0), 1.2, 1.4, 0.0, 0.35, 8), scales[0]),
            AgentScript(1, 100 + dt * np.arange(8), _circle((33.0, 3.5), 1.2, 1.4, 0.0, 0.35, 8), scales[1 % len(scales)]),
        ]
        expected = set()
    elif plan == "corridor":
        boxes = _room(0.0, 0.0, (10.0, 2.0), 2.5, rng, textured=False, furniture=0)
        # a thin horizontal strip: the only texture, so inliers are nearly collinear
        boxes.append(Box((4.7, 1.97, 1.24), (5.3, 2.0, 1.36), textured=True, cell=0.04, base=0.5, contrast=0.9))
        n_agents = 2
        mk = lambda x0: [look_pose(np.array([x0 + 0.08 * k, 0.4, 1.3]), math.pi / 2, 0.0) for k in range(8)]
        scripts = [
            AgentScript(0, dt * np.arange(8), mk(4.2), scales[0]),
            AgentScript(1, 100 + dt * np.arange(8), mk(5.0), scales[1 % len(scales)]),
        ]
        expected = set()
    else:
        raise ValueError(f"unknown plan {plan!r}")
    ev_rng = np.random.default_rng([seed, 2])
    for a, l, when, sigma in pgba:
        if a < len(scripts):
            scripts[a].pgba_events.append(PgbaEvent(l, when, _delta(ev_rng), sigma))
    scene = SceneModel(tuple(boxes), seed)
    return Scenario(seed, plan, scene, scripts, world, expected)


@dataclass(eq=False)
class StreamItem:
    """One simulator output in canonical order: kind is summary, map, pgba or truth."""

    kind: str
    agent_id: int
    obj: object


def simulate(scenario, summary_config=SummaryConfig()):
    """Run every agent and interleave their outputs round-robin by submap index."""
    cfg = scenario.world
    per_agent = [build_submaps(s, scenario.scene, cfg, scenario.seed, summary_config) for s in scenario.scripts]
    rng = np.random.default_rng([scenario.seed, 5])
    items = []
    longest = max((len(p) for p in per_agent), default=0)
    for l in range(longest):
        for script, subs in zip(scenario.scripts, per_agent):
            if l < len(subs):
                items.append(StreamItem("summary", script.agent_id, subs[l].summary))
                items.append(StreamItem("map", script.agent_id, map_payload(subs[l], cfg)))
            for ev in script.pgba_events:
                if ev.emit_after == l and ev.submap_index < len(subs) and ev.submap_index <= l:
                    sub = subs[ev.submap_index]
                    items.append(StreamItem("pgba", script.agent_id, emit_pgba_event(sub, ev, rng)))
                    if not ev.rigid:
                        prev = subs[ev.submap_index - 1] if ev.submap_index > 0 else None
                        items.append(StreamItem("summary", script.agent_id, current_summary(sub, prev)))
    truth = ground_truth(scenario, per_agent)
    return [StreamItem("truth", -1, truth)] + items, per_agent


def ground_truth(scenario, per_agent):
    ts, pos, quats, scales, frames = {}, {}, {}, {}, {}
    for script, subs in zip(scenario.scripts, per_agent):
        a = script.agent_id
        ts[a] = np.asarray(script.timestamps, dtype=np.float64)
        pos[a] = np.array([p.translation for p in script.poses])
        quats[a] = np.array([p.quat for p in script.poses])
        scales[a] = script.scale_error
        for s in subs:
            frames[s.node_id] = s.frame
    return GroundTruth(ts, pos, quats, scales, frames, scenario.scene.diagonal)


# --------------------------------------------------------------------------
# config files


CONFIG_DEFAULTS = {
    "seed": "42",
    "n_agents": "3",
    "plan": "ring",
    "keyframes": "96",
    "scales": "0.6,1.0,1.7",
    "point_noise": "0.01",
    "drift": "0.0",
    "exposure_jitter": "0.0",
    "width": "128",
    "height": "96",
    "hfov": "90",
    "k_max": "8",
    "tau_move": "2.0",
    "pgba": "",
}


def parse_config(text):
    """``key = value`` lines; ``#`` starts a comment.  Unknown keys are kept for overrides."""
    out = dict(CONFIG_DEFAULTS)
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {n}: expected key=value, got {raw!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def dump_config(cfg):
    return "".join(f"{k} = {cfg[k]}\n" for k in sorted(cfg))


def scenario_from_config(cfg):
    world = WorldConfig(
        width=int(cfg["width"]),
        height=int(cfg["height"]),
        hfov=float(cfg["hfov"]),
        k_max=int(cfg["k_max"]),
        tau_move=float(cfg["tau_move"]),
        point_noise=float(cfg["point_noise"]),
        exposure_jitter=float(cfg["exposure_jitter"]),
    )
    scales = [float(x) for x in cfg["scales"].split(",") if x.strip()]
    n = int(cfg["n_agents"])
    scales = [scales[a % len(scales)] for a in range(n)]
    return generate_scenario(
        seed=int(cfg["seed"]),
        n_agents=n,
        plan=cfg["plan"],
        keyframes=int(cfg["keyframes"]),
        scales=scales,
        world=world,
        pgba=parse_pgba_plan(cfg["pgba"]),
        drift=float(cfg["drift"]),
    )
