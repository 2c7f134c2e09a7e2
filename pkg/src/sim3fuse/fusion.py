"""Occupancy-aware fusion of borrowed Gaussians.

Borrowed Gaussians are moved into the global frame by their submap
correction, then kept only if their mean falls in a voxel the target agent
has neither occupied nor observed as free.  Lengths are in global-frame
units.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from .liegroup import Sim3, canonical_quat, quat_multiply, quats_to_matrices
from .spatialhash import pack_indices, point_keys, voxel_indices

log = logging.getLogger(__name__)

VOXEL = 0.10
ENVELOPE = 1.0
RAY_STRIDE = 4  # 4x4 pixel blocks: one ray per 16 pixels
MAX_RAY = 8.0
MIN_OPACITY = 0.005


@dataclass(frozen=True, eq=False)
class GaussianPrimitive:
    mean: np.ndarray
    scales: np.ndarray
    rotation: np.ndarray
    opacity: float
    color: np.ndarray

    def __post_init__(self):
        for name, n in (("mean", 3), ("scales", 3), ("rotation", 4), ("color", 3)):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64).reshape(n))
        if np.any(self.scales <= 0):
            raise ValueError("Gaussian scales must be positive")
        if not 0.0 <= self.opacity <= 1.0:
            raise ValueError("opacity must lie in [0, 1]")
        if abs(np.linalg.norm(self.rotation) - 1.0) > 1e-9:
            raise ValueError("rotation must be a unit quaternion")

    def covariance(self):
        R = quats_to_matrices(self.rotation[None])[0]
        return R @ np.diag(self.scales**2) @ R.T


def transform_gaussian(g, c):
    """Move one Gaussian by a similarity; opacity and colour are untouched."""
    q = quat_multiply(c.quat, g.rotation)
    return GaussianPrimitive(
        c.act(g.mean), c.scale * g.scales, canonical_quat(q), g.opacity, g.color.copy()
    )


@dataclass(eq=False)
class Gaussians:
    """Struct-of-arrays Gaussian set.

    ``provenance`` rows are ``(agent, submap, index)``; ``gt_means`` optionally
    holds ground-truth world positions used only for evaluation.
    """

    means: np.ndarray
    scales: np.ndarray
    rotations: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray
    provenance: np.ndarray = None
    gt_means: np.ndarray = None

    def __post_init__(self):
        n = len(self.means)
        self.means = np.asarray(self.means, dtype=np.float64).reshape(n, 3)
        self.scales = np.asarray(self.scales, dtype=np.float64).reshape(n, 3)
        self.rotations = np.asarray(self.rotations, dtype=np.float64).reshape(n, 4)
        self.opacities = np.asarray(self.opacities, dtype=np.float64).reshape(n)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(n, 3)
        if self.provenance is None:
            self.provenance = np.full((n, 3), -1, dtype=np.int64)
        self.provenance = np.asarray(self.provenance, dtype=np.int64).reshape(n, 3)
        if self.gt_means is not None:
            self.gt_means = np.asarray(self.gt_means, dtype=np.float64).reshape(n, 3)
        if n and np.any(self.scales <= 0):
            raise ValueError("Gaussian scales must be positive")
        if n and (np.any(self.opacities < 0) or np.any(self.opacities > 1)):
            raise ValueError("opacities must lie in [0, 1]")

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0), np.zeros((0, 3)), gt_means=np.zeros((0, 3)))

    def __len__(self):
        return len(self.means)

    def __getitem__(self, idx):
        return Gaussians(
            self.means[idx],
            self.scales[idx],
            self.rotations[idx],
            self.opacities[idx],
            self.colors[idx],
            self.provenance[idx],
            None if self.gt_means is None else self.gt_means[idx],
        )

    def primitive(self, i):
        return GaussianPrimitive(self.means[i], self.scales[i], self.rotations[i], float(self.opacities[i]), self.colors[i])

    @classmethod
    def concat(cls, parts):
        parts = [p for p in parts if len(p)]
        if not parts:
            return cls.empty()
        gt = None
        if all(p.gt_means is not None for p in parts):
            gt = np.concatenate([p.gt_means for p in parts])
        return cls(
            np.concatenate([p.means for p in parts]),
            np.concatenate([p.scales for p in parts]),
            np.concatenate([p.rotations for p in parts]),
            np.concatenate([p.opacities for p in parts]),
            np.concatenate([p.colors for p in parts]),
            np.concatenate([p.provenance for p in parts]),
            gt,
        )

    def transformed(self, c):
        """Vectorised :func:`transform_gaussian`."""
        if len(self) == 0:
            return self[:]
        q = _quat_left(c.quat, self.rotations)
        q /= np.linalg.norm(q, axis=1, keepdims=True)
        q = _canonical_rows(q)
        return Gaussians(
            c.act(self.means), c.scale * self.scales, q, self.opacities.copy(), self.colors.copy(), self.provenance.copy(), self.gt_means
        )

    def covariances(self):
        R = quats_to_matrices(self.rotations)
        return np.einsum("nij,nj,nkj->nik", R, self.scales**2, R)


def _quat_left(a, B):
    aw, ax, ay, az = a
    bw, bx, by, bz = B.T
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=1,
    )


def _canonical_rows(q):
    flip = q[:, 0] < 0
    zero = q[:, 0] == 0
    if zero.any():
        for i in np.flatnonzero(zero):
            q[i] = canonical_quat(q[i])
    q[flip] = -q[flip]
    return q


# --------------------------------------------------------------------------
# occupancy


def voxel_key(p, v=VOXEL):
    """64-bit key of the voxel holding ``p`` (floor convention)."""
    return int(point_keys(np.asarray(p, dtype=np.float64).reshape(1, 3), v)[0])


@dataclass(eq=False)
class OccupancyGrid:
    voxel: float = VOXEL
    occupied: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.uint64))
    free: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.uint64))

    def __post_init__(self):
        self.occupied = np.unique(np.asarray(self.occupied, dtype=np.uint64))
        self.free = np.unique(np.asarray(self.free, dtype=np.uint64))

    @staticmethod
    def _member(sorted_keys, keys):
        if len(sorted_keys) == 0:
            return np.zeros(len(keys), dtype=bool)
        pos = np.searchsorted(sorted_keys, keys)
        pos = np.minimum(pos, len(sorted_keys) - 1)
        return sorted_keys[pos] == keys

    def is_occupied(self, keys):
        return self._member(self.occupied, np.asarray(keys, dtype=np.uint64))

    def is_free(self, keys):
        return self._member(self.free, np.asarray(keys, dtype=np.uint64))


def build_occupied(gaussians, v=VOXEL, k=ENVELOPE):
    """Keys of every voxel meeting a Gaussian's world-axis envelope box.

    The box half-extent along world axis j is ``k * sum_i |R_ji| s_i``, the
    AABB of the rotated per-axis extents.  Returns sorted unique keys.
    """
    if len(gaussians) == 0:
        return np.zeros(0, dtype=np.uint64)
    R = quats_to_matrices(gaussians.rotations)
    half = k * np.einsum("nji,ni->nj", np.abs(R), gaussians.scales)
    lo = voxel_indices(gaussians.means - half, v)
    hi = voxel_indices(gaussians.means + half, v)
    n = hi - lo + 1
    total = np.prod(n, axis=1)
    owner = np.repeat(np.arange(len(n)), total)
    start = np.repeat(np.cumsum(total) - total, total)
    r = np.arange(int(total.sum())) - start
    nx, ny = n[owner, 0], n[owner, 1]
    dx = r % nx
    dy = (r // nx) % ny
    dz = r // (nx * ny)
    idx = lo[owner] + np.stack([dx, dy, dz], axis=1)
    return np.unique(pack_indices(idx))


@dataclass(eq=False)
class CarveFrame:
    """A keyframe for free-space carving: camera-to-frame pose and depth (camera units)."""

    pose: Sim3
    depth: np.ndarray
    intrinsics: np.ndarray


def carve_free(frames, v=VOXEL, step=None, stride=RAY_STRIDE, max_range=MAX_RAY):
    """Voxels crossed by camera rays before their surface hit.

    One ray per ``stride x stride`` pixel block.  Samples sit at
    ``t = i * step / L`` for ``t < 1`` along the (range-clipped) ray of length
    ``L``; the voxel holding the ray's endpoint is never emitted by that ray.
    """
    step = v / 2.0 if step is None else step
    out = []
    for f in frames:
        depth = np.asarray(f.depth, dtype=np.float64)
        d = depth[::stride, ::stride]
        vv, uu = np.mgrid[0 : depth.shape[0] : stride, 0 : depth.shape[1] : stride]
        ok = d > 0
        if not ok.any():
            continue
        fx, fy, cx, cy = f.intrinsics
        z = d[ok]
        cam = np.stack([(uu[ok] - cx) / fx * z, (vv[ok] - cy) / fy * z, z], axis=1)
        c = f.pose.translation
        end = f.pose.act(cam)
        ray = end - c
        L = np.linalg.norm(ray, axis=1)
        clip = L > max_range
        end = np.where(clip[:, None], c + ray * (max_range / np.maximum(L, 1e-300))[:, None], end)
        L = np.minimum(L, max_range)
        nsteps = np.ceil(L / step - 1e-9).astype(np.int64)
        nmax = int(nsteps.max()) if len(nsteps) else 0
        if nmax <= 0:
            continue
        end_keys = point_keys(end, v)
        for s0 in range(0, nmax, 64):
            i = np.arange(s0, min(nmax, s0 + 64))
            t = i[None, :] * step / np.maximum(L, 1e-300)[:, None]
            live = i[None, :] < nsteps[:, None]
            pts = c + t[..., None] * (end - c)[:, None, :]
            keys = point_keys(pts[live], v)
            ek = np.broadcast_to(end_keys[:, None], live.shape)[live]
            out.append(np.unique(keys[keys != ek]))
    if not out:
        return np.zeros(0, dtype=np.uint64)
    return np.unique(np.concatenate(out))


def dedup(borrowed, grid):
    """Keep borrowed Gaussians whose mean voxel is neither occupied nor free (order kept)."""
    if len(borrowed) == 0:
        return borrowed[:]
    keys = point_keys(borrowed.means, grid.voxel)
    keep = ~grid.is_occupied(keys) & ~grid.is_free(keys)
    return borrowed[keep]


# --------------------------------------------------------------------------
# exposure


@dataclass(frozen=True)
class ExposureModel:
    a: float
    b: float

    def apply(self, img):
        return np.exp(self.a) * np.asarray(img, dtype=np.float64) + self.b


def fit_exposure(rendered, reference, mask=None):
    """Least-squares ``reference ~ e^a * rendered + b`` with gain kept positive.

    A non-positive unconstrained gain is clamped to 1e-3 and the bias refit.
    A constant render leaves the gain at 1 and fits the mean difference.
    """
    x = np.asarray(rendered, dtype=np.float64)
    y = np.asarray(reference, dtype=np.float64)
    m = np.ones(x.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    x, y = x[m].ravel(), y[m].ravel()
    if len(x) < 2:
        raise ValueError("exposure fit needs at least 2 valid pixels")
    xm, ym = x.mean(), y.mean()
    sxx = np.sum((x - xm) ** 2)
    if sxx <= 1e-24 * max(1.0, np.sum(x * x)):
        return ExposureModel(0.0, float(ym - xm))
    g = np.sum((x - xm) * (y - ym)) / sxx
    if g <= 0:
        g = 1e-3
    b = ym - g * xm
    return ExposureModel(float(np.log(g)), float(b))


# --------------------------------------------------------------------------
# fusion pipeline


@dataclass(eq=False)
class FusionResult:
    gaussians: Gaussians
    exposures: dict
    n_target: int
    n_borrowed: int
    n_retained: int
    n_pruned: int
    grid: OccupancyGrid


def fuse(target, borrowed, carve_frames, v=VOXEL, exposure_pairs=None, min_opacity=MIN_OPACITY, carve_stride=RAY_STRIDE):
    """Fuse borrowed submaps into a target map.

    Parameters
    ----------
    target : Gaussians
        Target agent's map, already in the global frame.
    borrowed : list of (Gaussians, Sim3)
        Submap-local Gaussians with their corrections.
    carve_frames : list of CarveFrame
        Target keyframes in the global frame.
    carve_stride : int
        Pixel block size per carved ray; 1 for depth maps that are already
        decimated.
    exposure_pairs : dict, optional
        ``key -> (rendered, reference, mask)`` per target keyframe.
    """
    moved = Gaussians.concat([g.transformed(c) for g, c in borrowed])
    grid = OccupancyGrid(v, build_occupied(target, v), carve_free(carve_frames, v, stride=carve_stride))
    kept = dedup(moved, grid)
    fused = Gaussians.concat([target, kept])
    alive = fused.opacities >= min_opacity
    pruned = int((~alive).sum())
    fused = fused[alive]
    exposures = {}
    for key, (rend, ref, mask) in sorted((exposure_pairs or {}).items()):
        try:
            exposures[key] = fit_exposure(rend, ref, mask)
        except ValueError as exc:
            log.debug("exposure fit skipped for %s: %s", key, exc)
    return FusionResult(fused, exposures, len(target), len(moved), len(kept), pruned, grid)


def coverage_stats(fused, union, v=VOXEL, to_world=None, k=ENVELOPE):
    """Ground-truth surface coverage and duplicate fraction of a fused map.

    The surface set is the voxels holding ground-truth positions of ``union``
    (all agents' Gaussians).  ``coverage`` is the share of those voxels met by
    the ``k``-sigma envelope of some fused Gaussian placed at its ground-truth
    position, the same support the occupancy test uses; ``coverage_centers``
    counts only voxels holding a fused ground-truth mean.  ``to_world`` maps
    the fused frame to the ground-truth frame and is used for the envelope
    extents.  A fused Gaussian is a duplicate when an earlier agent's fused
    Gaussian already sits in its ground-truth voxel.
    """
    if fused.gt_means is None or union.gt_means is None:
        raise ValueError("coverage needs ground-truth positions")
    uk = np.unique(point_keys(union.gt_means, v)) if len(union) else np.zeros(0, np.uint64)
    fk_all = point_keys(fused.gt_means, v) if len(fused) else np.zeros(0, np.uint64)
    fk = np.unique(fk_all)
    world = fused.transformed(to_world) if to_world is not None else fused[:]
    world.means = fused.gt_means
    env = build_occupied(world, v, k)
    coverage = float(np.isin(uk, env).mean()) if len(uk) else 1.0
    centers = float(np.isin(uk, fk).mean()) if len(uk) else 1.0
    dup = 0
    if len(fused):
        agents = fused.provenance[:, 0]
        order = np.lexsort((agents, fk_all))
        ukeys, first = np.unique(fk_all[order], return_index=True)
        owner = agents[order][first][np.searchsorted(ukeys, fk_all)]
        dup = int(np.sum(agents != owner))
    return {
        "coverage": coverage,
        "coverage_centers": centers,
        "duplicate_fraction": dup / len(fused) if len(fused) else 0.0,
        "n_gaussians": len(fused),
        "n_surface_voxels": int(len(uk)),
    }


# --------------------------------------------------------------------------
# export


def ply_bytes(g):
    """Binary little-endian PLY: xyz, scale_0..2, rot_0..3 (wxyz), opacity, rgb u8."""
    n = len(g)
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {n}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property float scale_0\nproperty float scale_1\nproperty float scale_2\n"
        "property float rot_0\nproperty float rot_1\nproperty float rot_2\nproperty float rot_3\n"
        "property float opacity\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        "end_header\n"
    ).encode("ascii")
    dt = np.dtype(
        [("pos", "<f4", 3), ("scale", "<f4", 3), ("rot", "<f4", 4), ("opacity", "<f4"), ("rgb", "u1", 3)]
    )
    rec = np.zeros(n, dtype=dt)
    rec["pos"] = g.means
    rec["scale"] = g.scales
    rec["rot"] = g.rotations
    rec["opacity"] = g.opacities
    rec["rgb"] = np.clip(np.round(g.colors * 255.0), 0, 255).astype(np.uint8)
    return header + rec.tobytes()


def write_ply(path, g):
    with open(path, "wb") as fh:
        fh.write(ply_bytes(g))


def read_ply(data):
    """Parse bytes written by :func:`ply_bytes` (no provenance or ground truth)."""
    end = data.index(b"end_header\n") + len(b"end_header\n")
    head = data[:end].decode("ascii").splitlines()
    n = next(int(line.split()[2]) for line in head if line.startswith("element vertex"))
    dt = np.dtype(
        [("pos", "<f4", 3), ("scale", "<f4", 3), ("rot", "<f4", 4), ("opacity", "<f4"), ("rgb", "u1", 3)]
    )
    rec = np.frombuffer(data, dtype=dt, count=n, offset=end)
    return Gaussians(
        rec["pos"].astype(np.float64),
        rec["scale"].astype(np.float64),
        rec["rot"].astype(np.float64),
        rec["opacity"].astype(np.float64),
        rec["rgb"].astype(np.float64) / 255.0,
    )


def key_list_bytes(keys):
    """Occupancy keys as sorted little-endian u64, prefixed by a u64 count."""
    k = np.unique(np.asarray(keys, dtype=np.uint64))
    return struct.pack("<Q", len(k)) + k.astype("<u8").tobytes()
