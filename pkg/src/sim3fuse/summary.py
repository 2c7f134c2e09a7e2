"""Compact submap summaries: encoding, retrieval and the binary wire format."""

from __future__ import annotations

import logging
import struct
import threading
from dataclasses import dataclass, field

import numpy as np

from .liegroup import Sim3
from .spatialhash import mix64, point_keys

log = logging.getLogger(__name__)

DESCRIPTOR_DIM = 128
LOCAL_DESCRIPTOR_DIM = 32
MAX_SALIENT = 512
MAX_REGISTRATION = 4096
REGISTRATION_VOXEL = 0.05
LABEL_BINS = 96
INTENSITY_BINS = DESCRIPTOR_DIM - LABEL_BINS
INTENSITY_WEIGHT = 0.35

MAGIC = b"MAGS"
VERSION = 1


@dataclass(frozen=True)
class SaliencyWeights:
    lambda_d: float = 0.35
    lambda_F: float = 0.10

    def __post_init__(self):
        if self.lambda_d < 0 or self.lambda_F < 0:
            raise ValueError("saliency weights must be nonnegative")


@dataclass(frozen=True, eq=False)
class AnchorKeyframe:
    """Pose (camera -> submap-local, unit scale), image, disparity, intrinsics."""

    pose: Sim3
    image: np.ndarray
    disparity: np.ndarray
    intrinsics: np.ndarray

    def __post_init__(self):
        img = np.ascontiguousarray(self.image, dtype=np.float32)
        disp = np.ascontiguousarray(self.disparity, dtype=np.float32)
        K = np.asarray(self.intrinsics, dtype=np.float64).reshape(4)
        if img.ndim not in (2, 3) or (img.ndim == 3 and img.shape[2] not in (1, 3)):
            raise ValueError(f"anchor image must be HxW or HxWx3, got {img.shape}")
        if disp.shape != img.shape[:2]:
            raise ValueError(f"disparity shape {disp.shape} != image shape {img.shape[:2]}")
        if np.any(disp < 0) or not np.all(np.isfinite(disp)):
            raise ValueError("disparity must be finite and nonnegative (0 marks invalid)")
        H, W = disp.shape
        if np.any(K <= 0) or K[2] >= W or K[3] >= H:
            raise ValueError(f"invalid intrinsics {K.tolist()} for {W}x{H} image")
        object.__setattr__(self, "image", img)
        object.__setattr__(self, "disparity", disp)
        object.__setattr__(self, "intrinsics", K)

    @property
    def shape(self):
        return self.disparity.shape

    def gray(self):
        if self.image.ndim == 2:
            return self.image.astype(np.float64)
        return to_gray(self.image)


@dataclass(frozen=True, eq=False)
class SubmapSummary:
    agent_id: int
    submap_index: int
    descriptor: np.ndarray
    salient_points: np.ndarray
    salient_descriptors: np.ndarray
    registration_cloud: np.ndarray
    aabb_min: np.ndarray
    aabb_max: np.ndarray
    anchor: AnchorKeyframe
    # predecessor-local -> this-local, as reported by the agent's odometry
    odometry: Sim3 = field(default_factory=Sim3.identity)

    def __post_init__(self):
        for name, shape in (
            ("descriptor", (-1,)),
            ("salient_points", (-1, 3)),
            ("salient_descriptors", (-1, LOCAL_DESCRIPTOR_DIM)),
            ("registration_cloud", (-1, 3)),
            ("aabb_min", (3,)),
            ("aabb_max", (3,)),
        ):
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.float64).reshape(shape)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "agent_id", int(self.agent_id))
        object.__setattr__(self, "submap_index", int(self.submap_index))
        self.validate()

    @property
    def node_id(self):
        return (self.agent_id, self.submap_index)

    def validate(self):
        d = self.descriptor
        if d.shape != (DESCRIPTOR_DIM,):
            raise ValueError(f"descriptor must have {DESCRIPTOR_DIM} entries, got {d.shape}")
        if abs(np.linalg.norm(d) - 1.0) > 1e-6:
            raise ValueError("descriptor must be L2-normalised")
        if len(self.salient_points) != len(self.salient_descriptors):
            raise ValueError("salient points and descriptors differ in length")
        if len(self.salient_points) > MAX_SALIENT:
            raise ValueError(f"more than {MAX_SALIENT} salient points")
        if len(self.registration_cloud) > MAX_REGISTRATION:
            raise ValueError(f"more than {MAX_REGISTRATION} registration points")
        if np.any(self.aabb_min > self.aabb_max):
            raise ValueError("aabb_min exceeds aabb_max")
        lo, hi = self.aabb_min - 1e-6, self.aabb_max + 1e-6
        for name in ("salient_points", "registration_cloud"):
            pts = getattr(self, name)
            if len(pts) and (np.any(pts < lo) or np.any(pts > hi)):
                raise ValueError(f"{name} leaves the AABB")

    @property
    def diagonal(self):
        return float(np.linalg.norm(self.aabb_max - self.aabb_min))


def to_gray(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    if img.shape[2] == 1:
        return img[..., 0]
    return img @ np.array([0.299, 0.587, 0.114])


# --------------------------------------------------------------------------
# saliency


def _grad_norm(a):
    """Per-pixel gradient norm; central differences inside, one-sided at borders."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 2:
        a = a[..., None]
    total = np.zeros(a.shape[:2])
    for c in range(a.shape[2]):
        ch = a[..., c]
        gy = np.gradient(ch, axis=0) if ch.shape[0] > 1 else np.zeros_like(ch)
        gx = np.gradient(ch, axis=1) if ch.shape[1] > 1 else np.zeros_like(ch)
        total += gx * gx + gy * gy
    return np.sqrt(total)


def score_saliency(feature_map, disparity, weights=SaliencyWeights()):
    """sigma(u) = |grad F| + lambda_d |grad d| + lambda_F |F|."""
    F = np.asarray(feature_map, dtype=np.float64)
    d = np.asarray(disparity, dtype=np.float64)
    if F.shape[:2] != d.shape or d.ndim != 2:
        raise ValueError(f"feature map {F.shape} and disparity {d.shape} do not match")
    Fn = np.abs(F) if F.ndim == 2 else np.linalg.norm(F, axis=2)
    return _grad_norm(F) + weights.lambda_d * _grad_norm(d) + weights.lambda_F * Fn


def select_salient(score, positions, k):
    """Top-``k`` pixels by score among those with finite positions.

    Ties go to the lower row-major index.  Returns ``(pixel_index, points,
    scores)`` sorted by descending score.
    """
    score = np.asarray(score, dtype=np.float64)
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    flat = score.reshape(-1)
    if k > flat.size:
        raise ValueError(f"k={k} exceeds pixel count {flat.size}")
    valid = np.flatnonzero(np.all(np.isfinite(pos), axis=1))
    if k <= 0 or valid.size == 0:
        return np.zeros(0, dtype=np.int64), np.zeros((0, 3)), np.zeros(0)
    order = np.lexsort((valid, -flat[valid]))
    chosen = valid[order[:k]]
    return chosen, pos[chosen], flat[chosen]


# --------------------------------------------------------------------------
# registration cloud


def voxel_downsample(points, voxel=REGISTRATION_VOXEL, cap=MAX_REGISTRATION):
    """One centroid per occupied voxel.

    When more than ``cap`` voxels are occupied, the kept subset is the one with
    the smallest ``mix64(key)``; the output is ordered by ascending key.
    """
    if voxel <= 0:
        raise ValueError("voxel size must be positive")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        return np.zeros((0, 3))
    keys = point_keys(pts, voxel)
    uniq, inv = np.unique(keys, return_inverse=True)
    counts = np.bincount(inv, minlength=len(uniq)).astype(np.float64)
    cent = np.empty((len(uniq), 3))
    for a in range(3):
        cent[:, a] = np.bincount(inv, weights=pts[:, a], minlength=len(uniq)) / counts
    if cap is not None and len(uniq) > cap:
        keep = np.sort(np.argsort(mix64(uniq), kind="stable")[:cap])
        cent = cent[keep]
    return cent


# --------------------------------------------------------------------------
# descriptors


def keyframe_descriptor(image, labels):
    """Pooled label/intensity histogram standing in for a learned place descriptor.

    ``labels`` holds a nonnegative region id per pixel (-1 for no surface).
    """
    labels = np.asarray(labels, dtype=np.int64)
    gray = to_gray(image)
    d = np.zeros(DESCRIPTOR_DIM)
    ok = labels >= 0
    if ok.any():
        bins = (mix64(labels[ok].astype(np.uint64)) % np.uint64(LABEL_BINS)).astype(np.int64)
        h = np.bincount(bins, minlength=LABEL_BINS).astype(np.float64)
        d[:LABEL_BINS] = h / np.linalg.norm(h)
        ib = np.clip((gray[ok] * INTENSITY_BINS).astype(np.int64), 0, INTENSITY_BINS - 1)
        hi = np.bincount(ib, minlength=INTENSITY_BINS).astype(np.float64)
        d[LABEL_BINS:] = INTENSITY_WEIGHT * hi / np.linalg.norm(hi)
    n = np.linalg.norm(d)
    if n == 0:
        d[0] = 1.0
        return d
    return d / n


def pool_descriptors(descs):
    d = np.mean(np.asarray(descs, dtype=np.float64), axis=0)
    return d / np.linalg.norm(d)


def farthest_first(descs, start, k):
    """Greedy farthest-first selection in cosine distance, seeded at ``start``."""
    descs = np.asarray(descs, dtype=np.float64)
    chosen = [start]
    mind = 1.0 - descs @ descs[start]
    while len(chosen) < min(k, len(descs)):
        mind[chosen] = -np.inf
        nxt = int(np.argmax(mind))
        chosen.append(nxt)
        mind = np.minimum(mind, 1.0 - descs @ descs[nxt])
    return chosen


# --------------------------------------------------------------------------
# building summaries from keyframes


@dataclass(eq=False)
class FeatureFrame:
    """One keyframe as seen by the summary encoder.

    ``cell_ids`` maps every pixel to a surface keypoint id (-1: none);
    ``cells`` holds the keypoint table ``(ids, positions, descriptors)`` with
    positions in submap-local coordinates.
    """

    timestamp: float
    pose: Sim3
    image: np.ndarray
    disparity: np.ndarray
    intrinsics: np.ndarray
    labels: np.ndarray
    cell_ids: np.ndarray
    cell_table_ids: np.ndarray
    cell_positions: np.ndarray
    cell_descriptors: np.ndarray

    def backproject(self, stride=1):
        """Local-frame points of valid pixels (row-major, strided)."""
        return backproject(self.pose, self.disparity, self.intrinsics, stride)

    @property
    def center(self):
        return self.pose.translation


def backproject(pose, disparity, intrinsics, stride=1, return_pixels=False):
    disp = np.asarray(disparity, dtype=np.float64)[::stride, ::stride]
    H, W = disp.shape
    fx, fy, cx, cy = intrinsics
    v, u = np.mgrid[0:H, 0:W]
    u = u * stride
    v = v * stride
    ok = disp > 0
    z = 1.0 / disp[ok]
    cam = np.stack([(u[ok] - cx) / fx * z, (v[ok] - cy) / fy * z, z], axis=1)
    pts = pose.act(cam)
    if return_pixels:
        return pts, np.stack([u[ok], v[ok]], axis=1)
    return pts


@dataclass(frozen=True)
class SummaryConfig:
    max_salient: int = MAX_SALIENT
    registration_voxel: float = REGISTRATION_VOXEL
    max_registration: int = MAX_REGISTRATION
    summary_keyframes: int = 3
    saliency: SaliencyWeights = SaliencyWeights()


def build_summary(
    agent_id,
    submap_index,
    frames,
    anchor_index,
    config=SummaryConfig(),
    noise_sigma=0.0,
    rng=None,
    odometry=None,
):
    """Encode a frozen submap's keyframes into a :class:`SubmapSummary`."""
    frames = list(frames)
    kf_desc = np.array([keyframe_descriptor(f.image, f.labels) for f in frames])
    picks = farthest_first(kf_desc, anchor_index, config.summary_keyframes)
    descriptor = pool_descriptors(kf_desc[picks])

    # stack the summary keyframes vertically and keep one pixel per keypoint
    scores, ids = [], []
    for i in picks:
        f = frames[i]
        scores.append(score_saliency(to_gray(f.image), f.disparity, config.saliency))
        ids.append(np.where(f.disparity > 0, f.cell_ids, -1))
    score = np.concatenate(scores, axis=0)
    cell = np.concatenate(ids, axis=0).reshape(-1)
    flat = score.reshape(-1)
    positions = np.full((flat.size, 3), np.nan)
    has = np.flatnonzero(cell >= 0)
    if has.size:
        # best pixel per keypoint: sort by (cell, -score, pixel) and take firsts
        order = np.lexsort((has, -flat[has], cell[has]))
        ordered = has[order]
        first = np.ones(len(ordered), dtype=bool)
        first[1:] = cell[ordered][1:] != cell[ordered][:-1]
        best = ordered[first]
        table_ids = np.concatenate([frames[i].cell_table_ids for i in picks])
        table_pos = np.concatenate([frames[i].cell_positions for i in picks])
        table_desc = np.concatenate([frames[i].cell_descriptors for i in picks])
        tid, tfirst = np.unique(table_ids, return_index=True)
        row = tfirst[np.searchsorted(tid, cell[best])]
        positions[best] = table_pos[row]
    sal_idx, sal_pos, _ = select_salient(score, positions, min(config.max_salient, flat.size))
    if len(sal_pos):
        sel_cells = cell[sal_idx]
        row = tfirst[np.searchsorted(tid, sel_cells)]
        sal_desc = table_desc[row]
    else:
        sal_desc = np.zeros((0, LOCAL_DESCRIPTOR_DIM))

    dense = np.concatenate([f.backproject() for f in frames], axis=0)
    if rng is None:
        rng = np.random.default_rng(0)
    if noise_sigma > 0:
        sal_pos = sal_pos + rng.normal(scale=noise_sigma, size=sal_pos.shape)
        dense = dense + rng.normal(scale=noise_sigma, size=dense.shape)
    cloud = voxel_downsample(dense, config.registration_voxel, config.max_registration)

    allpts = [p for p in (dense, sal_pos, cloud) if len(p)]
    if allpts:
        stacked = np.concatenate(allpts, axis=0)
        lo, hi = stacked.min(axis=0), stacked.max(axis=0)
    else:
        lo = hi = frames[anchor_index].center.copy()

    a = frames[anchor_index]
    anchor = AnchorKeyframe(a.pose, a.image, a.disparity, a.intrinsics)
    return SubmapSummary(
        agent_id,
        submap_index,
        descriptor,
        sal_pos,
        sal_desc,
        cloud,
        lo,
        hi,
        anchor,
        odometry if odometry is not None else Sim3.identity(),
    )


# --------------------------------------------------------------------------
# retrieval


class Catalog:
    """Summaries keyed by node id; concurrent reads, serialised inserts."""

    def __init__(self, summaries=()):
        self._lock = threading.Lock()
        self._items = {}
        for s in summaries:
            self.insert(s)

    def insert(self, s):
        with self._lock:
            items = dict(self._items)
            items[s.node_id] = s
            self._items = items

    def snapshot(self):
        return list(self._items.values())

    def get(self, node_id):
        return self._items.get(node_id)

    def __len__(self):
        return len(self._items)

    def __iter__(self):
        return iter(self.snapshot())


def retrieve(query, catalog, k=3, tau_sim=0.30):
    """Top-``k`` summaries by descriptor cosine similarity above ``tau_sim``.

    Same-agent summaries within one submap index of the query are skipped.
    Returns ``[(similarity, summary), ...]``; ties are broken by
    ``(agent_id, submap_index)``.
    """
    cands = []
    for s in catalog:
        if s.agent_id == query.agent_id and abs(s.submap_index - query.submap_index) <= 1:
            continue
        sim = float(np.dot(query.descriptor, s.descriptor))
        if sim >= tau_sim:
            cands.append((-sim, s.agent_id, s.submap_index, s))
    cands.sort(key=lambda c: c[:3])
    return [(-c[0], c[3]) for c in cands[:k]]


# --------------------------------------------------------------------------
# wire format


class SummaryFormatError(ValueError):
    """Malformed summary bytes; ``offset`` points at the failing field."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def _section(payload):
    return struct.pack("<I", len(payload)) + payload


def encode_summary(s):
    """Serialise a summary: ``MAGS``, u16 version, then length-prefixed sections.

    Section order is header, descriptor, salient points, registration cloud,
    AABB, anchor, odometry.  Everything is little-endian; images are raw f32.
    """
    out = [MAGIC, struct.pack("<H", VERSION)]
    out.append(_section(struct.pack("<ii", s.agent_id, s.submap_index)))
    out.append(_section(struct.pack("<I", len(s.descriptor)) + s.descriptor.astype("<f8").tobytes()))
    q = struct.pack("<II", len(s.salient_points), LOCAL_DESCRIPTOR_DIM)
    q += s.salient_points.astype("<f8").tobytes() + s.salient_descriptors.astype("<f8").tobytes()
    out.append(_section(q))
    out.append(
        _section(
            struct.pack("<I", len(s.registration_cloud))
            + s.registration_cloud.astype("<f8").tobytes()
        )
    )
    out.append(_section(s.aabb_min.astype("<f8").tobytes() + s.aabb_max.astype("<f8").tobytes()))
    a = s.anchor
    H, W = a.disparity.shape
    C = 1 if a.image.ndim == 2 else a.image.shape[2]
    anc = a.pose.to_bytes() + a.intrinsics.astype("<f8").tobytes()
    anc += struct.pack("<III", H, W, C)
    anc += a.image.astype("<f4").tobytes() + a.disparity.astype("<f4").tobytes()
    out.append(_section(anc))
    out.append(_section(s.odometry.to_bytes()))
    return b"".join(out)


class _Reader:
    def __init__(self, buf, offset=0, end=None):
        self.buf = buf
        self.pos = offset
        self.end = len(buf) if end is None else end

    def take(self, n, what):
        if self.pos + n > self.end:
            raise SummaryFormatError(
                f"truncated {what}: need {n} bytes, {self.end - self.pos} left", self.pos
            )
        b = self.buf[self.pos : self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def array(self, dtype, count, what):
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(dt.itemsize * count, what), dtype=dt).astype(
            dt.newbyteorder("=")
        )

    def section(self, what):
        (n,) = self.unpack("<I", f"{what} length")
        start = self.pos
        self.take(n, what)
        return _Reader(self.buf, start, start + n)

    def done(self, what):
        if self.pos != self.end:
            raise SummaryFormatError(f"{self.end - self.pos} trailing bytes in {what}", self.pos)


def decode_summary(data):
    data = bytes(data)
    r = _Reader(data)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise SummaryFormatError(f"bad magic {magic!r}", 0)
    (version,) = r.unpack("<H", "version")
    if version != VERSION:
        raise SummaryFormatError(f"unsupported version {version}", 4)

    sec = r.section("header")
    agent_id, submap_index = sec.unpack("<ii", "header")
    sec.done("header")

    sec = r.section("descriptor")
    (n,) = sec.unpack("<I", "descriptor dim")
    desc = sec.array("<f8", n, "descriptor")
    sec.done("descriptor")

    sec = r.section("salient points")
    n, dim = sec.unpack("<II", "salient header")
    if dim != LOCAL_DESCRIPTOR_DIM:
        raise SummaryFormatError(f"local descriptor dim {dim} != {LOCAL_DESCRIPTOR_DIM}", sec.pos - 4)
    qpos = sec.array("<f8", 3 * n, "salient positions").reshape(n, 3)
    qdesc = sec.array("<f8", dim * n, "salient descriptors").reshape(n, dim)
    sec.done("salient points")

    sec = r.section("registration cloud")
    (m,) = sec.unpack("<I", "registration count")
    cloud = sec.array("<f8", 3 * m, "registration cloud").reshape(m, 3)
    sec.done("registration cloud")

    sec = r.section("aabb")
    box = sec.array("<f8", 6, "aabb")
    sec.done("aabb")

    sec = r.section("anchor")
    start = sec.pos
    try:
        pose = Sim3.from_bytes(sec.take(64, "anchor pose"))
    except ValueError as exc:
        raise SummaryFormatError(f"invalid anchor pose: {exc}", start) from None
    K = sec.array("<f8", 4, "intrinsics")
    H, W, C = sec.unpack("<III", "anchor dims")
    img = sec.array("<f4", H * W * C, "anchor image")
    img = img.reshape(H, W) if C == 1 else img.reshape(H, W, C)
    disp = sec.array("<f4", H * W, "anchor disparity").reshape(H, W)
    sec.done("anchor")

    sec = r.section("odometry")
    start = sec.pos
    try:
        odo = Sim3.from_bytes(sec.take(64, "odometry"))
    except ValueError as exc:
        raise SummaryFormatError(f"invalid odometry: {exc}", start) from None
    sec.done("odometry")
    r.done("summary")

    try:
        anchor = AnchorKeyframe(pose, img, disp, K)
        return SubmapSummary(
            agent_id, submap_index, desc, qpos, qdesc, cloud, box[:3], box[3:], anchor, odo
        )
    except ValueError as exc:
        raise SummaryFormatError(f"invariant violation: {exc}", r.pos) from None
