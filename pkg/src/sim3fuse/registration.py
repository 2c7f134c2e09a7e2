"""Pairwise Sim(3) registration between submap summaries.

Pipeline: descriptor matching (with a dense fallback), RANSAC over 4-point
Umeyama fits, point-to-point ICP on the registration clouds, then a joint
verification predicate.  The estimated transform maps source-local points
into target-local coordinates.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .liegroup import Sim3

log = logging.getLogger(__name__)


class DegenerateGeometryError(ValueError):
    """Point configuration cannot determine a similarity."""


class EstimationError(RuntimeError):
    """RANSAC found no model with at least three inliers."""


@dataclass(frozen=True)
class MatchParams:
    min_similarity: float = 0.55
    max_ratio: float = 0.90
    min_margin: float = 0.02


@dataclass(frozen=True)
class VerificationThresholds:
    scale_band: tuple = (0.33, 3.0)
    min_inliers: int = 12
    min_overlap_ratio: float = 0.25
    max_residual: float = 0.20
    min_fitness: float = 0.25
    max_rmse: float = 0.20
    tau_ext: float = 0.15
    ransac_iters: int = 256
    ransac_inlier_dist: float = 0.15
    n_min: int = 20
    icp_iters: int = 64
    icp_max_corr: float = 0.20

    def __post_init__(self):
        lo, hi = self.scale_band
        if not 0 < lo < 1 < hi:
            raise ValueError(f"scale band must straddle 1, got {self.scale_band}")
        for name in (
            "min_inliers",
            "min_overlap_ratio",
            "max_residual",
            "min_fitness",
            "max_rmse",
            "tau_ext",
            "ransac_iters",
            "ransac_inlier_dist",
            "n_min",
            "icp_iters",
            "icp_max_corr",
        ):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


@dataclass(eq=False)
class CorrespondenceSet:
    src: np.ndarray
    tgt: np.ndarray
    score: np.ndarray
    src_index: np.ndarray | None = None
    tgt_index: np.ndarray | None = None
    dense: bool = False

    def __post_init__(self):
        self.src = np.asarray(self.src, dtype=np.float64).reshape(-1, 3)
        self.tgt = np.asarray(self.tgt, dtype=np.float64).reshape(-1, 3)
        self.score = np.asarray(self.score, dtype=np.float64).reshape(-1)
        if not len(self.src) == len(self.tgt) == len(self.score):
            raise ValueError("correspondence arrays differ in length")
        if not (np.all(np.isfinite(self.src)) and np.all(np.isfinite(self.tgt))):
            raise ValueError("correspondences must be finite")
        if self.src_index is not None and len(np.unique(self.src_index)) != len(self.src_index):
            raise ValueError("duplicate source indices")

    def __len__(self):
        return len(self.src)


@dataclass(eq=False)
class Sim3Estimate:
    transform: Sim3
    src_inliers: np.ndarray
    tgt_inliers: np.ndarray
    n_correspondences: int
    icp_fitness: float = 0.0
    icp_rmse: float = float("inf")
    extent_ratio: float = 0.0

    @property
    def scale(self):
        return self.transform.scale

    @property
    def n_inliers(self):
        return len(self.src_inliers)

    @property
    def overlap_ratio(self):
        return self.n_inliers / self.n_correspondences if self.n_correspondences else 0.0

    @property
    def inlier_rmse(self):
        if self.n_inliers == 0:
            return float("inf")
        d = self.transform.act(self.src_inliers) - self.tgt_inliers
        return float(np.sqrt(np.mean(np.sum(d * d, axis=1))))


@dataclass
class Verdict:
    """Outcome of the joint gate; truthy iff every gate passes."""

    gates: dict = field(default_factory=dict)
    values: dict = field(default_factory=dict)

    @property
    def passed(self):
        return all(self.gates.values())

    @property
    def failed_gates(self):
        return [k for k, v in self.gates.items() if not v]

    def __bool__(self):
        return self.passed


# --------------------------------------------------------------------------
# matching


def match(src, tgt, params=MatchParams()):
    """Mutual nearest neighbours in local-descriptor cosine similarity.

    A pair survives when its similarity is at least ``min_similarity``, the
    Lowe ratio of L2 descriptor distances (best / second best) is at most
    ``max_ratio`` and the similarity margin over the runner-up is at least
    ``min_margin``.  Ordered by source index.
    """
    Ds, Dt = src.salient_descriptors, tgt.salient_descriptors
    empty = CorrespondenceSet(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0), np.zeros(0, int), np.zeros(0, int))
    if len(Ds) == 0 or len(Dt) == 0:
        return empty
    S = Ds @ Dt.T
    best_t = np.argmax(S, axis=1)
    best_s = np.argmax(S, axis=0)
    rows = np.arange(len(Ds))
    s1 = S[rows, best_t]
    if S.shape[1] > 1:
        part = np.partition(S, S.shape[1] - 2, axis=1)
        s2 = part[:, -2]
    else:
        s2 = np.full(len(Ds), -1.0)
    d1 = np.sqrt(np.maximum(2.0 - 2.0 * s1, 0.0))
    d2 = np.sqrt(np.maximum(2.0 - 2.0 * s2, 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(d2 > 0, d1 / d2, np.where(d1 > 0, np.inf, 0.0))
    ok = (
        (best_s[best_t] == rows)
        & (s1 >= params.min_similarity)
        & (ratio <= params.max_ratio)
        & (s1 - s2 >= params.min_margin)
    )
    i = rows[ok]
    j = best_t[ok]
    return CorrespondenceSet(src.salient_points[i], tgt.salient_points[j], s1[ok], i, j)


class GridNCCMatcher:
    """Dense fallback: NCC of anchor-image patches on a coarse pixel grid.

    Source patches on a ``step`` grid are compared against target patches
    on a ``step // 2`` grid; mutual best pairs above ``min_ncc`` are lifted to
    submap-local 3D points through the anchor disparity and pose.
    """

    def __init__(self, step=8, radius=3, min_ncc=0.9):
        self.step = step
        self.radius = radius
        self.min_ncc = min_ncc

    def _patches(self, anchor, step):
        img = anchor.gray()
        disp = anchor.disparity
        r = self.radius
        H, W = disp.shape
        vs, us = np.mgrid[r : H - r : step, r : W - r : step]
        vs, us = vs.ravel(), us.ravel()
        keep = disp[vs, us] > 0
        vs, us = vs[keep], us[keep]
        if len(vs) == 0:
            return vs, us, np.zeros((0, (2 * r + 1) ** 2))
        off = np.arange(-r, r + 1)
        P = img[vs[:, None, None] + off[None, :, None], us[:, None, None] + off[None, None, :]]
        P = P.reshape(len(vs), -1)
        P = P - P.mean(axis=1, keepdims=True)
        n = np.linalg.norm(P, axis=1, keepdims=True)
        good = n[:, 0] > 1e-6
        return vs[good], us[good], P[good] / n[good]

    @staticmethod
    def _lift(anchor, vs, us):
        fx, fy, cx, cy = anchor.intrinsics
        z = 1.0 / anchor.disparity[vs, us].astype(np.float64)
        cam = np.stack([(us - cx) / fx * z, (vs - cy) / fy * z, z], axis=1)
        return anchor.pose.act(cam)

    def __call__(self, src, tgt):
        vs, us, Ps = self._patches(src.anchor, self.step)
        vt, ut, Pt = self._patches(tgt.anchor, max(1, self.step // 2))
        if len(Ps) == 0 or len(Pt) == 0:
            return CorrespondenceSet(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0), dense=True)
        S = Ps @ Pt.T
        bt = np.argmax(S, axis=1)
        bs = np.argmax(S, axis=0)
        rows = np.arange(len(Ps))
        ok = (bs[bt] == rows) & (S[rows, bt] >= self.min_ncc)
        i, j = rows[ok], bt[ok]
        return CorrespondenceSet(
            self._lift(src.anchor, vs[i], us[i]),
            self._lift(tgt.anchor, vt[j], ut[j]),
            S[i, j],
            i,
            j,
            dense=True,
        )


def find_correspondences(src, tgt, thresholds=VerificationThresholds(), params=MatchParams(), dense_matcher=None):
    """Sparse matches, or the dense matcher's output when fewer than ``n_min`` survive."""
    m = match(src, tgt, params)
    if len(m) >= thresholds.n_min:
        return m
    dense = dense_matcher if dense_matcher is not None else GridNCCMatcher()
    log.debug("%s->%s: %d sparse matches, using dense fallback", src.node_id, tgt.node_id, len(m))
    md = dense(src, tgt)
    return md if len(md) > len(m) else m


# --------------------------------------------------------------------------
# closed-form alignment


def umeyama(src, tgt, with_scale=True, min_rank=2):
    """Least-squares similarity with ``tgt ~ s R src + t``.

    ``min_rank=1`` accepts collinear sets (the roll about the line is then
    arbitrary but the fitted residual is not).

    Raises
    ------
    DegenerateGeometryError
        Fewer than three pairs, zero source variance, or rank(cov) < min_rank.
    """
    src = np.asarray(src, dtype=np.float64).reshape(-1, 3)
    tgt = np.asarray(tgt, dtype=np.float64).reshape(-1, 3)
    if len(src) != len(tgt):
        raise ValueError("point sets differ in length")
    if len(src) < 3:
        raise DegenerateGeometryError(f"need at least 3 pairs, got {len(src)}")
    ms, mt = src.mean(axis=0), tgt.mean(axis=0)
    xs, xt = src - ms, tgt - mt
    var_s = np.mean(np.sum(xs * xs, axis=1))
    scale_ref = max(var_s, np.mean(np.sum(xt * xt, axis=1)), 1e-300)
    if var_s <= 1e-24 * max(1.0, np.mean(np.sum(src * src, axis=1))):
        raise DegenerateGeometryError("source points have zero variance")
    cov = xt.T @ xs / len(src)
    U, S, Vt = np.linalg.svd(cov)
    if min_rank >= 2 and S[1] <= 1e-12 * max(S[0], np.sqrt(scale_ref)):
        raise DegenerateGeometryError("covariance has rank < 2 (collinear points)")
    d = np.ones(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        d[2] = -1.0
    R = (U * d) @ Vt
    s = float(np.dot(S, d) / var_s) if with_scale else 1.0
    t = mt - s * (R @ ms)
    return Sim3.from_rotation_matrix(R, t, s)


def _batched_umeyama(src, tgt):
    """Vectorised fits over (B, n, 3) batches; returns (s, R, t, ok)."""
    ms, mt = src.mean(axis=1), tgt.mean(axis=1)
    xs, xt = src - ms[:, None], tgt - mt[:, None]
    var_s = np.mean(np.sum(xs * xs, axis=2), axis=1)
    cov = np.einsum("bni,bnj->bij", xt, xs) / src.shape[1]
    U, S, Vt = np.linalg.svd(cov)
    det = np.linalg.det(U) * np.linalg.det(Vt)
    d = np.ones((len(src), 3))
    d[det < 0, 2] = -1.0
    R = np.einsum("bij,bj,bjk->bik", U, d, Vt)
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.sum(S * d, axis=1) / var_s
    ok = (var_s > 1e-18) & (S[:, 1] > 1e-9 * np.maximum(S[:, 0], 1e-300)) & (s > 0) & np.isfinite(s)
    t = mt - s[:, None] * np.einsum("bij,bj->bi", R, ms)
    return s, R, t, ok


def _rng_for(seed):
    if seed is None:
        return np.random.default_rng(0)
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def ransac_umeyama(m, iters=256, inlier_dist=0.15, seed=None, sample_size=4):
    """Hypothesise from random 4-point samples, keep the model with most inliers.

    Ties go to the lower inlier RMSE.  The winning inlier set is refit with
    :func:`umeyama`; the refit is repeated while it changes the inlier set
    (at most three times).  ``seed`` may be an int, a sequence of ints or a
    ``numpy.random.Generator``.
    """
    n = len(m)
    if n < 3:
        raise EstimationError(f"need at least 3 correspondences, got {n}")
    k = min(sample_size, n)
    rng = _rng_for(seed)
    samples = np.argsort(rng.random((iters, n)), axis=1)[:, :k]
    s, R, t, ok = _batched_umeyama(m.src[samples], m.tgt[samples])
    pred = s[:, None, None] * np.einsum("bij,nj->bni", R, m.src) + t[:, None, :]
    err2 = np.sum((pred - m.tgt[None]) ** 2, axis=2)
    inl = err2 <= inlier_dist**2
    count = np.where(ok, inl.sum(axis=1), -1)
    with np.errstate(invalid="ignore", divide="ignore"):
        rmse = np.sqrt(np.where(inl, err2, 0.0).sum(axis=1) / np.maximum(count, 1))
    order = np.lexsort((rmse, -count))
    best = order[0]
    if count[best] < 3:
        raise EstimationError("no hypothesis reached 3 inliers")
    mask = inl[best]
    T = None
    for _ in range(3):
        try:
            T_new = umeyama(m.src[mask], m.tgt[mask])
        except DegenerateGeometryError:
            if T is None:
                T_new = Sim3.from_rotation_matrix(R[best], t[best], s[best])
            else:
                break
        T = T_new
        e2 = np.sum((T.act(m.src) - m.tgt) ** 2, axis=1)
        new_mask = e2 <= inlier_dist**2
        if np.array_equal(new_mask, mask) or new_mask.sum() < 3:
            break
        mask = new_mask
    return Sim3Estimate(T, m.src[mask], m.tgt[mask], n)


# --------------------------------------------------------------------------
# ICP


def icp_refine(T0, src_cloud, tgt_cloud, iters=64, max_corr=0.20, tol=1e-8, tree=None):
    """Point-to-point ICP with a full Sim(3) refit per iteration.

    An iteration whose correspondence RMSE exceeds the previous one is
    rejected and ends the loop.

    Returns
    -------
    (T, fitness, rmse)
        Fitness is the fraction of source points with a target neighbour
        within ``max_corr`` under ``T``; rmse is over those pairs.
    """
    src = np.asarray(src_cloud, dtype=np.float64).reshape(-1, 3)
    tgt = np.asarray(tgt_cloud, dtype=np.float64).reshape(-1, 3)
    if len(src) == 0 or len(tgt) == 0:
        raise ValueError("ICP needs non-empty clouds")
    tree = tree if tree is not None else cKDTree(tgt)

    def associate(T):
        d, j = tree.query(T.act(src), distance_upper_bound=max_corr)
        hit = np.isfinite(d)
        rmse = float(np.sqrt(np.mean(d[hit] ** 2))) if hit.any() else float("inf")
        return hit, j, rmse

    T = T0
    hit, j, rmse = associate(T)
    if not hit.any():
        return T0, 0.0, float("inf")
    for _ in range(iters):
        try:
            T_new = umeyama(src[hit], tgt[j[hit]])
        except DegenerateGeometryError:
            break
        hit_n, j_n, rmse_n = associate(T_new)
        if not hit_n.any() or rmse_n > rmse:
            break
        step = np.linalg.norm((T_new @ T.inverse()).log())
        T, hit, j, rmse = T_new, hit_n, j_n, rmse_n
        if step < tol:
            break
    return T, float(hit.mean()), rmse


# --------------------------------------------------------------------------
# verification


def _diag(points):
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        return 0.0
    return float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))


def extent_ratio(src_inliers, tgt_inliers, src_aabb, tgt_aabb):
    """min over both sides of inlier-spread diagonal / submap AABB diagonal."""
    ds = float(np.linalg.norm(np.subtract(src_aabb[1], src_aabb[0])))
    dt = float(np.linalg.norm(np.subtract(tgt_aabb[1], tgt_aabb[0])))
    if ds <= 0 or dt <= 0:
        raise DegenerateGeometryError("AABB diagonal is zero")
    if len(src_inliers) == 0:
        raise ValueError("extent ratio needs at least one inlier")
    return min(_diag(src_inliers) / ds, _diag(tgt_inliers) / dt)


def verify(e, thresholds=VerificationThresholds()):
    """Evaluate every gate; the verdict carries per-gate values and outcomes."""
    th = thresholds
    lo, hi = th.scale_band
    values = {
        "scale": e.scale,
        "inliers": e.n_inliers,
        "overlap_ratio": e.overlap_ratio,
        "inlier_rmse": e.inlier_rmse,
        "icp_fitness": e.icp_fitness,
        "icp_rmse": e.icp_rmse,
        "extent_ratio": e.extent_ratio,
    }
    gates = {
        "scale_band": lo < e.scale < hi,
        "min_inliers": e.n_inliers >= th.min_inliers,
        "overlap_ratio": e.overlap_ratio >= th.min_overlap_ratio,
        "inlier_rmse": e.inlier_rmse <= th.max_residual,
        "icp_fitness": e.icp_fitness >= th.min_fitness,
        "icp_rmse": e.icp_rmse <= th.max_rmse,
        "extent": e.extent_ratio >= th.tau_ext,
    }
    return Verdict(gates, values)


@dataclass
class PairResult:
    src_id: tuple
    tgt_id: tuple
    estimate: Sim3Estimate | None
    verdict: Verdict | None
    error: str | None = None
    n_matches: int = 0
    dense: bool = False

    @property
    def accepted(self):
        return self.verdict is not None and self.verdict.passed

    def to_json(self):
        rec = {
            "src": list(self.src_id),
            "tgt": list(self.tgt_id),
            "accepted": self.accepted,
            "matches": self.n_matches,
            "dense_fallback": self.dense,
        }
        if self.verdict is not None:
            rec["gates"] = dict(self.verdict.gates)
            rec["values"] = {k: _finite(v) for k, v in self.verdict.values.items()}
        if self.error is not None:
            rec["error"] = self.error
        return json.dumps(rec, sort_keys=False)


def _finite(v):
    v = float(v)
    return v if np.isfinite(v) else None


def pair_seed(src_id, tgt_id):
    return [int(src_id[0]), int(src_id[1]), int(tgt_id[0]), int(tgt_id[1])]


def register_pair(src, tgt, thresholds=VerificationThresholds(), params=MatchParams(), dense_matcher=None):
    """Full cascade for one candidate pair; never raises on geometric failure."""
    th = thresholds
    m = find_correspondences(src, tgt, th, params, dense_matcher)
    res = PairResult(src.node_id, tgt.node_id, None, None, n_matches=len(m), dense=m.dense)
    try:
        est = ransac_umeyama(m, th.ransac_iters, th.ransac_inlier_dist, seed=pair_seed(src.node_id, tgt.node_id))
    except (EstimationError, DegenerateGeometryError) as exc:
        res.error = str(exc)
        return res
    if len(src.registration_cloud) and len(tgt.registration_cloud):
        T, fit, rmse = icp_refine(
            est.transform, src.registration_cloud, tgt.registration_cloud, th.icp_iters, th.icp_max_corr
        )
        est.transform, est.icp_fitness, est.icp_rmse = T, fit, rmse
    try:
        est.extent_ratio = extent_ratio(
            est.src_inliers,
            est.tgt_inliers,
            (src.aabb_min, src.aabb_max),
            (tgt.aabb_min, tgt.aabb_max),
        )
    except (DegenerateGeometryError, ValueError) as exc:
        res.error = str(exc)
    res.estimate = est
    res.verdict = verify(est, th)
    return res
