"""Global Sim(3) submap graph.

Nodes carry corrections ``C`` (submap-local -> global).  An edge with
measurement ``M`` (source-local -> target-local) has geometric residual
``log(M^-1 o C_tgt^-1 o C_src)``; verified edges add an anchor-image
photometric residual.  Corrections are perturbed on the right,
``C <- C o exp(delta)``, and solved with Levenberg-Marquardt on an IRLS
(Huber) linearisation.
"""

from __future__ import annotations

import json
import logging
import struct
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .liegroup import Sim3, Sim3Batch, adjoint_matrix, exp, right_jacobian, right_jacobians
from .registration import (
    DegenerateGeometryError,
    MatchParams,
    VerificationThresholds,
    register_pair,
    umeyama,
)
from .summary import AnchorKeyframe, Catalog, SubmapSummary, retrieve

log = logging.getLogger(__name__)

TEMPORAL = "temporal"
VERIFIED = "verified"


@dataclass(frozen=True)
class GraphConfig:
    w_temporal: float = 5.0
    w_verified: float = 1.0
    w_photometric: float = 1.0
    huber_geo: float = 0.5
    huber_pho: float = 0.1
    pho_stride: int = 2
    pho_min_pixels: int = 64
    # relative inverse-depth tolerance for the occlusion test when picking pixels
    pho_depth_tol: float = 0.1
    tau_res: float = 0.2
    tau_rig: float = 0.1
    retrieval_k: int = 3
    tau_sim: float = 0.30
    max_evals: int = 200
    init_damping: float = 1e-4
    max_damping: float = 1e12
    thresholds: VerificationThresholds = VerificationThresholds()
    match_params: MatchParams = MatchParams()


# --------------------------------------------------------------------------
# robust kernel


def huber(s2, delta):
    """Huber on a squared norm: ``s^2`` inside the knee, ``2 delta s - delta^2`` outside."""
    s2 = np.asarray(s2, dtype=np.float64)
    s = np.sqrt(s2)
    return np.where(s <= delta, s2, 2.0 * delta * s - delta * delta)


def huber_weight(s2, delta):
    """d rho / d(s^2); the IRLS weight."""
    s = np.sqrt(np.asarray(s2, dtype=np.float64))
    with np.errstate(divide="ignore"):
        return np.where(s <= delta, 1.0, delta / np.maximum(s, 1e-300))


# --------------------------------------------------------------------------
# graph elements


@dataclass(eq=False)
class SubmapNode:
    id: tuple
    correction: Sim3
    summary: SubmapSummary | None = None
    gauge: bool = False
    anchor_cache_valid: bool = False
    # maps the stored summary's local frame to the submap's current local frame
    frame_rewrite: Sim3 = field(default_factory=Sim3.identity)


@dataclass(eq=False)
class GraphEdge:
    kind: str
    src: tuple
    tgt: tuple
    measurement: Sim3
    weight: float
    photometric_weight: float = 0.0
    valid: bool = True
    pixels: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in (TEMPORAL, VERIFIED):
            raise ValueError(f"unknown edge kind {self.kind!r}")
        if self.kind == TEMPORAL and (self.src[0] != self.tgt[0] or self.tgt[1] != self.src[1] + 1):
            raise ValueError("temporal edges join consecutive submaps of one agent")
        if self.kind == VERIFIED and self.src[0] == self.tgt[0]:
            raise ValueError("verified edges join distinct agents")

    @property
    def key(self):
        return (self.kind, self.src, self.tgt)


@dataclass(frozen=True)
class RigidityReport:
    node: tuple
    delta: Sim3
    rho_rig: float

    def __post_init__(self):
        if not self.rho_rig >= 0:
            raise ValueError("rho_rig must be nonnegative")


@dataclass(frozen=True, eq=False)
class PgbaMessage:
    """Pre/post keyframe camera centres of one submap, as reported by its agent."""

    agent_id: int
    submap_index: int
    pre_centers: np.ndarray
    post_centers: np.ndarray

    @property
    def node_id(self):
        return (int(self.agent_id), int(self.submap_index))


PGBA_MAGIC = b"MAGP"


def encode_pgba(msg):
    pre = np.asarray(msg.pre_centers, dtype="<f8").reshape(-1, 3)
    post = np.asarray(msg.post_centers, dtype="<f8").reshape(-1, 3)
    if pre.shape != post.shape:
        raise ValueError("pre and post centre lists differ in shape")
    head = PGBA_MAGIC + struct.pack("<HiiI", 1, msg.agent_id, msg.submap_index, len(pre))
    return head + pre.tobytes() + post.tobytes()


def decode_pgba(data):
    data = bytes(data)
    if len(data) < 18 or data[:4] != PGBA_MAGIC:
        raise ValueError("bad PGBA message magic (at byte offset 0)")
    version, a, l, n = struct.unpack_from("<HiiI", data, 4)
    if version != 1:
        raise ValueError(f"unsupported PGBA message version {version} (at byte offset 4)")
    need = 18 + 48 * n
    if len(data) != need:
        raise ValueError(f"PGBA message length {len(data)} != {need} (at byte offset 18)")
    arr = np.frombuffer(data, dtype="<f8", offset=18).astype(np.float64)
    return PgbaMessage(a, l, arr[: 3 * n].reshape(n, 3), arr[3 * n :].reshape(n, 3))


def fit_rigidity(pre_centers, post_centers, node=None):
    """Closed-form Sim(3) between keyframe centres and its RMSE."""
    pre = np.asarray(pre_centers, dtype=np.float64).reshape(-1, 3)
    post = np.asarray(post_centers, dtype=np.float64).reshape(-1, 3)
    if len(pre) < 3:
        raise DegenerateGeometryError(f"rigidity fit needs 3 centres, got {len(pre)}")
    if np.array_equal(pre, post):
        return RigidityReport(node, Sim3.identity(), 0.0)
    delta = umeyama(pre, post)
    d = post - delta.act(pre)
    return RigidityReport(node, delta, float(np.sqrt(np.mean(np.sum(d * d, axis=1)))))


# --------------------------------------------------------------------------
# geometric residual


def geo_residual(edge, C_src, C_tgt):
    return (edge.measurement.inverse() @ C_tgt.inverse() @ C_src).log()


def geo_residual_jacobians(edge, C_src, C_tgt):
    """Residual and its derivatives for right perturbations of both corrections."""
    r = geo_residual(edge, C_src, C_tgt)
    Jinv = np.linalg.inv(right_jacobian(r))
    Js = Jinv
    Jt = -Jinv @ adjoint_matrix(C_src.inverse() @ C_tgt)
    return r, Js, Jt


# --------------------------------------------------------------------------
# photometric residual


@dataclass(eq=False)
class PhotometricAnchor:
    """Anchor data in the submap's current local frame (``pose`` may carry scale)."""

    pose: Sim3
    gray: np.ndarray
    disparity: np.ndarray
    intrinsics: np.ndarray

    @classmethod
    def from_keyframe(cls, a: AnchorKeyframe, frame=None):
        pose = a.pose if frame is None else frame @ a.pose
        return cls(pose, a.gray(), a.disparity.astype(np.float64), a.intrinsics)

    def backproject(self, pixels):
        fx, fy, cx, cy = self.intrinsics
        u, v = pixels[:, 0], pixels[:, 1]
        z = 1.0 / self.disparity[v, u]
        cam = np.stack([(u - cx) / fx * z, (v - cy) / fy * z, z], axis=1)
        return self.pose.act(cam)


def _bilinear(img, u, v):
    """Value and analytic gradient; coordinates clamped to the image."""
    H, W = img.shape
    uc = np.clip(u, 0.0, W - 1.0)
    vc = np.clip(v, 0.0, H - 1.0)
    i0 = np.minimum(np.floor(uc).astype(np.int64), W - 2)
    j0 = np.minimum(np.floor(vc).astype(np.int64), H - 2)
    a = uc - i0
    b = vc - j0
    I00 = img[j0, i0]
    I10 = img[j0, i0 + 1]
    I01 = img[j0 + 1, i0]
    I11 = img[j0 + 1, i0 + 1]
    val = (1 - a) * (1 - b) * I00 + a * (1 - b) * I10 + (1 - a) * b * I01 + a * b * I11
    gu = (1 - b) * (I10 - I00) + b * (I11 - I01)
    gv = (1 - a) * (I01 - I00) + a * (I11 - I10)
    gu = np.where((u < 0) | (u > W - 1), 0.0, gu)
    gv = np.where((v < 0) | (v > H - 1), 0.0, gv)
    return val, gu, gv


def _project(anchor, q):
    """Target-camera coordinates and pixel positions of local points ``q``."""
    inv = anchor.pose.inverse()
    pc = inv.act(q)
    fx, fy, cx, cy = anchor.intrinsics
    z = pc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = fx * pc[:, 0] / z + cx
        v = fy * pc[:, 1] / z + cy
    return pc, u, v


def select_photometric_pixels(src, tgt, X, stride=2, depth_tol=0.1):
    """Source pixels whose transfer into the target anchor is usable.

    A pixel qualifies when its source disparity is valid, it lands in front of
    the target camera, its bilinear footprint lies in-frame on valid target
    disparity and the transferred inverse depth agrees with the target's
    within ``depth_tol`` (occlusion test).  ``X`` maps source-local to
    target-local coordinates.
    """
    H, W = src.disparity.shape
    v, u = np.mgrid[0:H:stride, 0:W:stride]
    u, v = u.ravel(), v.ravel()
    ok = src.disparity[v, u] > 0
    pix = np.stack([u[ok], v[ok]], axis=1)
    if len(pix) == 0:
        return pix
    q = X.act(src.backproject(pix))
    pc, uu, vv = _project(tgt, q)
    Ht, Wt = tgt.disparity.shape
    good = (pc[:, 2] > 0) & (uu >= 0) & (uu <= Wt - 1) & (vv >= 0) & (vv <= Ht - 1)
    good &= np.isfinite(uu) & np.isfinite(vv)
    uu, vv = np.where(good, uu, 0.0), np.where(good, vv, 0.0)
    i0 = np.minimum(np.floor(uu).astype(np.int64), Wt - 2)
    j0 = np.minimum(np.floor(vv).astype(np.int64), Ht - 2)
    D = tgt.disparity
    good &= (D[j0, i0] > 0) & (D[j0, i0 + 1] > 0) & (D[j0 + 1, i0] > 0) & (D[j0 + 1, i0 + 1] > 0)
    dt, _, _ = _bilinear(D, uu, vv)
    # inverse depth in target-camera units; pose scale converts local to camera
    with np.errstate(divide="ignore", invalid="ignore"):
        dz = 1.0 / pc[:, 2]
    good &= np.abs(dz - dt) <= depth_tol * np.maximum(dt, 1e-12)
    return pix[good]


@dataclass(eq=False)
class PhotometricTerm:
    """Cached per-edge data: source pixels, their local points and intensities."""

    pixels: np.ndarray
    points: np.ndarray
    intensity: np.ndarray


def make_photometric_term(src, pixels):
    pixels = np.asarray(pixels, dtype=np.int64).reshape(-1, 2)
    return PhotometricTerm(pixels, src.backproject(pixels), src.gray[pixels[:, 1], pixels[:, 0]])


def pho_residual_terms(term, tgt, C_src, C_tgt, jacobians=False):
    """``I_src(u) - I_tgt(pi(C_tgt^-1 C_src p(u)))`` over the cached pixels."""
    X = C_tgt.inverse() @ C_src
    q = X.act(term.points)
    pc, u, v = _project(tgt, q)
    val, gu, gv = _bilinear(tgt.gray, u, v)
    r = term.intensity - val
    if not jacobians:
        return r
    fx, fy = tgt.intrinsics[0], tgt.intrinsics[1]
    x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]
    # dI/dpc (N,3)
    g = np.stack(
        [gu * fx / z, gv * fy / z, -(gu * fx * x + gv * fy * y) / (z * z)],
        axis=1,
    )
    G = tgt.pose
    # dpc/dq = R_G^T / s_G
    gq = (g @ G.rotation.T) / G.scale
    # source: dq/ddelta = sR_X [I, -[p]x, p]
    p = term.points
    sRX = X.scale * X.rotation
    a = gq @ sRX  # (N,3) = dI/dp
    Js = np.empty((len(p), 7))
    Js[:, 0:3] = a
    Js[:, 3:6] = np.cross(p, a)
    Js[:, 6] = np.sum(a * p, axis=1)
    # target: dq/ddelta = -[I, -[q]x, q]
    Jt = np.empty((len(p), 7))
    Jt[:, 0:3] = -gq
    Jt[:, 3:6] = -np.cross(q, gq)
    Jt[:, 6] = -np.sum(gq * q, axis=1)
    # r = I_src - I_tgt
    return r, -Js, -Jt


# --------------------------------------------------------------------------
# batched evaluation


def _cross_into(a, b, out):
    """Row-wise ``a x b`` written into ``out``."""
    ax, ay, az = a[:, 0], a[:, 1], a[:, 2]
    bx, by, bz = b[:, 0], b[:, 1], b[:, 2]
    out[:, 0] = ay * bz - az * by
    out[:, 1] = az * bx - ax * bz
    out[:, 2] = ax * by - ay * bx


class _Problem:
    """All valid edges and cached photometric terms of one solve, as arrays.

    Evaluates the same cost and normal equations as the per-edge functions
    above, vectorised over edges and pixels.
    """

    def __init__(self, graph):
        cfg = graph.config
        self.keys = sorted(graph.nodes)
        index = {k: i for i, k in enumerate(self.keys)}
        self.edges = [e for e in graph.edges if e.valid]
        E = self.edges
        self.src = np.array([index[e.src] for e in E], dtype=np.int64)
        self.tgt = np.array([index[e.tgt] for e in E], dtype=np.int64)
        self.m_inv = Sim3Batch.stack(e.measurement.inverse() for e in E)
        self.w = np.array([e.weight for e in E])
        self.huber_geo = cfg.huber_geo
        self.huber_pho = cfg.huber_pho
        self._last = None

        pts, inten, owner, pe, imgs = [], [], [], [], []
        anchors, offsets, shapes, scale = [], [], [], []
        off = 0
        img_slot = {}
        for j, e in enumerate(E):
            term = graph._pho_term(e)
            if term is None:
                continue
            k = len(pe)
            pe.append(j)
            tgt = graph._anchor(e.tgt)
            if e.tgt not in img_slot:
                img_slot[e.tgt] = (off, tgt.gray.shape)
                imgs.append(tgt.gray.ravel())
                off += tgt.gray.size
            o, shp = img_slot[e.tgt]
            anchors.append(tgt)
            offsets.append(o)
            shapes.append(shp)
            scale.append(e.photometric_weight / len(term.pixels))
            pts.append(term.points)
            inten.append(term.intensity)
            owner.append(np.full(len(term.points), k))
        self.pho_edges = np.array(pe, dtype=np.int64)
        if pe:
            self.points = np.concatenate(pts)
            self.intensity = np.concatenate(inten)
            self.owner = np.concatenate(owner)
            self.image = np.concatenate(imgs)
            self.counts = np.bincount(self.owner, minlength=len(pe))
            self.starts = np.concatenate([[0], np.cumsum(self.counts)[:-1]])
            o = self.owner
            Ginv = Sim3Batch.stack(a.pose for a in anchors).inverse()
            self.ginv_A = Ginv.scale[:, None, None] * Ginv.rotation
            self.ginv_t = Ginv.translation
            K = np.array([a.intrinsics for a in anchors])[o]
            self.fx, self.fy, self.cx, self.cy = K.T
            hw = np.array(shapes)
            if np.all(hw == hw[0]):
                hw = hw[0]
            else:
                hw = hw[o].T
            self.W = hw[1]
            self.Wm1 = hw[1] - 1.0
            self.Hm1 = hw[0] - 1.0
            self.last_col, self.last_row = hw[1] - 2, hw[0] - 2
            self.img_off = np.array(offsets)[o]
            self.pho_scale = np.array(scale)
            self.bounds = np.concatenate([self.starts, [len(self.points)]])
            # the four bilinear taps of every image pixel, so a sample is one row gather
            quad = np.zeros((len(self.image), 4))
            for o0, (H, W) in img_slot.values():
                im = self.image[o0 : o0 + H * W].reshape(H, W)
                q = quad[o0 : o0 + H * W].reshape(H, W, 4)
                q[:, :, 0] = im
                q[:, :-1, 1] = im[:, 1:]
                q[:-1, :, 2] = im[1:, :]
                q[:-1, :-1, 3] = im[1:, 1:]
            self.quad = quad

    def _batch(self, corrections):
        return Sim3Batch.stack(corrections[k] for k in self.keys)

    def geo(self, C):
        Cs, Ct = C[self.src], C[self.tgt]
        return (self.m_inv @ (Ct.inverse() @ Cs)).log(), Cs, Ct

    def _slices(self):
        b = self.bounds
        return [slice(b[k], b[k + 1]) for k in range(len(self.pho_edges))]

    def _sample(self, u, v):
        Wm1, Hm1 = self.Wm1, self.Hm1
        uc = np.clip(u, 0.0, Wm1)
        vc = np.clip(v, 0.0, Hm1)
        # clipped coordinates are nonnegative, so truncation is floor
        iu = np.minimum(uc.astype(np.int64), self.last_col)
        iv = np.minimum(vc.astype(np.int64), self.last_row)
        a = uc - iu
        b = vc - iv
        base = iv * self.W
        base += iu
        base += self.img_off
        Q = np.take(self.quad, base, axis=0)
        I00, I10, I01, I11 = Q[:, 0], Q[:, 1], Q[:, 2], Q[:, 3]
        d0 = I10 - I00
        d1 = I11 - I01
        top = I00 + a * d0
        bot = I01 + a * d1
        val = top + b * (bot - top)
        gu = d0 + b * (d1 - d0)
        gv = bot - top
        # zero gradient where the sample was clamped (NaN compares unequal too)
        gu[uc != u] = 0.0
        gv[vc != v] = 0.0
        return val, gu, gv

    def _evaluate(self, corrections):
        """Residual state at ``corrections``; the last one is reused by identity."""
        objs = tuple(corrections[k] for k in self.keys)
        hit = self._last
        if hit is not None and len(hit[0]) == len(objs) and all(a is b for a, b in zip(hit[0], objs)):
            return hit[1]
        C = Sim3Batch.stack(objs)
        state = {"C": C, "geo": self.geo(C)}
        if len(self.pho_edges):
            state["pho"] = self._pho_project(C)
        self._last = (objs, state)
        return state

    def _pho_project(self, C):
        """Residuals and image gradients of all photometric pixels."""
        ei = self.pho_edges
        X = C[self.tgt[ei]].inverse() @ C[self.src[ei]]
        AX = X.scale[:, None, None] * X.rotation
        # source-local point -> target camera in one affine map per edge
        M = self.ginv_A @ AX
        t = np.einsum("kij,kj->ki", self.ginv_A, X.translation) + self.ginv_t
        p = self.points
        pc = np.empty_like(p)
        for k, s in enumerate(self._slices()):
            np.matmul(p[s], M[k].T, out=pc[s])
            pc[s] += t[k]
        x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            iz = 1.0 / z
            xn = x * iz
            yn = y * iz
        val, gu, gv = self._sample(self.fx * xn + self.cx, self.fy * yn + self.cy)
        return {"r": self.intensity - val, "gu": gu, "gv": gv, "xn": xn, "yn": yn, "iz": iz, "M": M, "X": X}

    def _pho_source(self, C, jacobians):
        """Residuals, source Jacobians and the per-edge source-to-target transforms."""
        st = self._pho_project(C)
        if not jacobians:
            return st["r"], None, st["X"]
        return st["r"], self._pho_jacobian(st), st["X"]

    def _pho_jacobian(self, st):
        p = self.points
        iz, xn, yn, M = st["iz"], st["xn"], st["yn"], st["M"]
        g = np.empty_like(p)
        g[:, 0] = st["gu"] * self.fx * iz
        g[:, 1] = st["gv"] * self.fy * iz
        g[:, 2] = -(g[:, 0] * xn + g[:, 1] * yn)
        # a = dI/dp; r = I_src - I_tgt flips the sign
        a = np.empty_like(p)
        for k, s in enumerate(self._slices()):
            np.matmul(g[s], M[k], out=a[s])
        Js = np.empty((len(p), 7))
        Js[:, 0:3] = -a
        _cross_into(a, p, Js[:, 3:6])
        Js[:, 6] = -np.einsum("ij,ij->i", a, p)
        return Js

    def pho(self, C, jacobians=False):
        """Per-pixel residuals (and Jacobians) of all photometric terms."""
        r, Js, X = self._pho_source(C, jacobians)
        if not jacobians:
            return r
        # C_tgt -> C_tgt exp(d) moves X by exp(-d) on the left, i.e. by
        # exp(-Ad(X^-1) d) on the right
        Ad = X.inverse().adjoint_matrices()
        Jt = np.empty_like(Js)
        for k, s in enumerate(self._slices()):
            np.matmul(Js[s], -Ad[k], out=Jt[s])
        return r, Js, Jt

    def cost(self, corrections):
        if not self.edges:
            return 0.0
        st = self._evaluate(corrections)
        r = st["geo"][0]
        total = np.sum(self.w * huber(np.sum(r * r, axis=1), self.huber_geo))
        if len(self.pho_edges):
            rp = st["pho"]["r"]
            per = np.bincount(self.owner, huber(rp * rp, self.huber_pho), minlength=len(self.pho_edges))
            total += np.sum(self.pho_scale * per)
        return float(total)

    def linearize(self, free_index, corrections):
        n = 7 * len(free_index)
        H = np.zeros((n, n))
        g = np.zeros(n)
        if not self.edges:
            return H, g
        st = self._evaluate(corrections)
        r, Cs, Ct = st["geo"]
        Jinv = np.linalg.inv(right_jacobians(r))
        # both sides share one source-side block: J_tgt = -J_src Ad
        w = self.w * huber_weight(np.sum(r * r, axis=1), self.huber_geo)
        A = np.einsum("kji,k,kjl->kil", Jinv, w, Jinv)
        b = np.einsum("kji,k,kj->ki", Jinv, w, r)
        Ad = (Cs.inverse() @ Ct).adjoint_matrices()
        src, tgt = self.src, self.tgt
        if len(self.pho_edges):
            ps = st["pho"]
            rp, X = ps["r"], ps["X"]
            Ps = self._pho_jacobian(ps)
            wp = self.pho_scale[self.owner] * huber_weight(rp * rp, self.huber_pho)
            WP = Ps * wp[:, None]
            Ap, bp = [], []
            for s in self._slices():
                Ap.append(WP[s].T @ Ps[s])
                bp.append(WP[s].T @ rp[s])
            A = np.concatenate([A, Ap])
            b = np.concatenate([b, bp])
            Ad = np.concatenate([Ad, X.inverse().adjoint_matrices()])
            src = np.concatenate([src, self.src[self.pho_edges]])
            tgt = np.concatenate([tgt, self.tgt[self.pho_edges]])
        fi = np.array([free_index.get(k, -1) for k in self.keys])
        i_s, i_t = fi[src], fi[tgt]
        AAd = A @ Ad
        AdT = np.transpose(Ad, (0, 2, 1))
        for k in range(len(A)):
            a, c = i_s[k], i_t[k]
            if a >= 0:
                H[7 * a : 7 * a + 7, 7 * a : 7 * a + 7] += A[k]
                g[7 * a : 7 * a + 7] += b[k]
            if c >= 0:
                H[7 * c : 7 * c + 7, 7 * c : 7 * c + 7] += AdT[k] @ AAd[k]
                g[7 * c : 7 * c + 7] -= AdT[k] @ b[k]
            if a >= 0 and c >= 0:
                H[7 * a : 7 * a + 7, 7 * c : 7 * c + 7] -= AAd[k]
                H[7 * c : 7 * c + 7, 7 * a : 7 * a + 7] -= AAd[k].T
        return H, g


# --------------------------------------------------------------------------
# the graph


@dataclass
class SolveResult:
    costs: list
    evaluations: int
    reason: str
    ok: bool = True

    @property
    def final_cost(self):
        return self.costs[-1] if self.costs else 0.0


class SubmapGraph:
    """Nodes, edges and the Alg.-style update loop.

    Mutating methods take an internal lock; :meth:`snapshot` may be called
    from other threads.
    """

    def __init__(self, config=GraphConfig(), dense_matcher=None, threads=1):
        self.config = config
        self.nodes = {}
        self.edges = []
        self.catalog = Catalog()
        self.dense_matcher = dense_matcher
        self.threads = max(1, int(threads))
        self.audit = []
        self.reverify_queue = []
        self.pgba_log = []
        self.last_solve = None
        self._lock = threading.RLock()
        self._pho_cache = {}

    # -- structure ----------------------------------------------------------
    @property
    def gauge(self):
        for n in self.nodes.values():
            if n.gauge:
                return n.id
        return None

    def add_node(self, node_id, correction=None, summary=None):
        with self._lock:
            if node_id in self.nodes:
                raise KeyError(f"node {node_id} already exists")
            gauge = not self.nodes
            C = Sim3.identity() if gauge or correction is None else correction
            self.nodes[node_id] = SubmapNode(tuple(node_id), C, summary, gauge)
            return self.nodes[node_id]

    def add_edge(self, edge):
        with self._lock:
            for end in (edge.src, edge.tgt):
                if end not in self.nodes:
                    raise KeyError(f"edge endpoint {end} is not a node")
            self.edges.append(edge)
            return edge

    def incident(self, node_id, kind=None, valid_only=False):
        return [
            e
            for e in self.edges
            if node_id in (e.src, e.tgt)
            and (kind is None or e.kind == kind)
            and (e.valid or not valid_only)
        ]

    def corrections(self):
        return {k: n.correction for k, n in sorted(self.nodes.items())}

    def snapshot(self):
        """Immutable view: (corrections, fusable set)."""
        with self._lock:
            return dict(self.corrections()), frozenset(self.fusable_set())

    # -- residuals ------------------------------------------------------------
    def _anchor(self, node_id):
        n = self.nodes[node_id]
        if n.summary is None:
            return None
        key = ("anchor", node_id)
        a = self._pho_cache.get(key)
        if a is None or not n.anchor_cache_valid:
            a = PhotometricAnchor.from_keyframe(n.summary.anchor, n.frame_rewrite)
            self._pho_cache[key] = a
            n.anchor_cache_valid = True
        return a

    def _pho_term(self, e, refresh=False):
        """Cached photometric term of a verified edge, or None when skipped."""
        cfg = self.config
        if e.kind != VERIFIED or e.photometric_weight <= 0 or not e.valid:
            return None
        src, tgt = self._anchor(e.src), self._anchor(e.tgt)
        if src is None or tgt is None:
            return None
        key = ("term", id(e))
        if refresh or e.pixels is None or key not in self._pho_cache:
            X = self.nodes[e.tgt].correction.inverse() @ self.nodes[e.src].correction
            e.pixels = select_photometric_pixels(src, tgt, X, cfg.pho_stride, cfg.pho_depth_tol)
            self._pho_cache[key] = make_photometric_term(src, e.pixels) if len(e.pixels) else None
        term = self._pho_cache[key]
        if term is None or len(term.pixels) < cfg.pho_min_pixels:
            return None
        return term

    def pho_residual(self, e, C_src=None, C_tgt=None):
        """Photometric residual vector of a verified edge (None when skipped)."""
        term = self._pho_term(e)
        if term is None:
            return None
        C_src = self.nodes[e.src].correction if C_src is None else C_src
        C_tgt = self.nodes[e.tgt].correction if C_tgt is None else C_tgt
        return pho_residual_terms(term, self._anchor(e.tgt), C_src, C_tgt)

    def edge_cost(self, e, corrections=None):
        if not e.valid:
            return 0.0
        cfg = self.config
        C = corrections if corrections is not None else {k: n.correction for k, n in self.nodes.items()}
        r = geo_residual(e, C[e.src], C[e.tgt])
        cost = e.weight * float(huber(r @ r, cfg.huber_geo))
        term = self._pho_term(e)
        if term is not None:
            rp = pho_residual_terms(term, self._anchor(e.tgt), C[e.src], C[e.tgt])
            cost += e.photometric_weight / len(rp) * float(np.sum(huber(rp * rp, cfg.huber_pho)))
        return cost

    def total_cost(self, corrections=None):
        return float(sum(self.edge_cost(e, corrections) for e in self.edges))

    def edge_robust_residual(self, e):
        r = geo_residual(e, self.nodes[e.src].correction, self.nodes[e.tgt].correction)
        return float(np.sqrt(huber(r @ r, self.config.huber_geo)))

    # -- solver ---------------------------------------------------------------
    def _components(self):
        parent = {k: k for k in self.nodes}

        def find(x):
            while parent[x] != x:
                parent[x] = parent[parent[x]]
                x = parent[x]
            return x

        for e in self.edges:
            if e.valid:
                a, b = find(e.src), find(e.tgt)
                if a != b:
                    parent[max(a, b)] = min(a, b)
        comps = {}
        for k in sorted(self.nodes):
            comps.setdefault(find(k), []).append(k)
        return list(comps.values())

    def fixed_nodes(self):
        """Gauge node, plus the lowest id of every component without it."""
        fixed = set()
        g = self.gauge
        for comp in self._components():
            fixed.add(g if g in comp else comp[0])
        return fixed

    def _linearize(self, free_index, corrections):
        cfg = self.config
        n = 7 * len(free_index)
        H = np.zeros((n, n))
        g = np.zeros(n)
        for e in self.edges:
            if not e.valid:
                continue
            Cs, Ct = corrections[e.src], corrections[e.tgt]
            blocks = []
            r, Js, Jt = geo_residual_jacobians(e, Cs, Ct)
            w = e.weight * float(huber_weight(r @ r, cfg.huber_geo))
            blocks.append((r, Js, Jt, np.full(7, w)))
            term = self._pho_term(e)
            if term is not None:
                rp, Ps, Pt = pho_residual_terms(term, self._anchor(e.tgt), Cs, Ct, jacobians=True)
                wp = e.photometric_weight / len(rp) * huber_weight(rp * rp, cfg.huber_pho)
                blocks.append((rp, Ps, Pt, wp))
            for r, Js, Jt, w in blocks:
                parts = []
                if e.src in free_index:
                    parts.append((free_index[e.src], Js))
                if e.tgt in free_index:
                    parts.append((free_index[e.tgt], Jt))
                for i, Ji in parts:
                    WJi = Ji * w[:, None]
                    g[7 * i : 7 * i + 7] += WJi.T @ r
                    for j, Jj in parts:
                        H[7 * i : 7 * i + 7, 7 * j : 7 * j + 7] += WJi.T @ Jj
        return H, g

    def solve(self, max_evals=None):
        """Levenberg-Marquardt over all non-fixed corrections.

        Accepted steps never increase the cost.  On failure at maximum
        damping the corrections are left unchanged.
        """
        with self._lock:
            cfg = self.config
            max_evals = cfg.max_evals if max_evals is None else max_evals
            for e in self.edges:
                self._pho_term(e, refresh=True)
            fixed = self.fixed_nodes()
            free = [k for k in sorted(self.nodes) if k not in fixed]
            free_index = {k: i for i, k in enumerate(free)}
            start = {k: n.correction for k, n in self.nodes.items()}
            current = dict(start)
            problem = _Problem(self)
            cost = problem.cost(current)
            costs = [cost]
            evals = 1
            reason = "max_evals"
            ok = True
            if cost == 0.0 or not free:
                reason = "zero_cost" if cost == 0.0 else "no_free_nodes"
                self.last_solve = SolveResult(costs, evals, reason)
                return self.last_solve
            mu = cfg.init_damping
            done = False
            while evals < max_evals and not done:
                H, g = problem.linearize(free_index, current)
                while True:
                    try:
                        step = np.linalg.solve(H + mu * np.eye(len(g)), -g)
                    except np.linalg.LinAlgError:
                        step = None
                    if step is None or not np.all(np.isfinite(step)):
                        mu *= 10.0
                        if mu > cfg.max_damping:
                            reason, ok, done = "singular", False, True
                            break
                        continue
                    if np.linalg.norm(step) < 1e-10:
                        reason, done = "small_step", True
                        break
                    # model reduction of the undamped quadratic along the step
                    predicted = -(g @ step + 0.5 * step @ (H @ step))
                    if predicted < 1e-12 * cost:
                        reason, done = "small_reduction", True
                        break
                    trial = dict(current)
                    for k, i in free_index.items():
                        trial[k] = current[k] @ exp(step[7 * i : 7 * i + 7])
                    new_cost = problem.cost(trial)
                    evals += 1
                    if new_cost <= cost:
                        rel = (cost - new_cost) / cost if cost > 0 else 0.0
                        current, cost = trial, new_cost
                        costs.append(cost)
                        mu = max(mu * 0.5, 1e-12)
                        if cost == 0.0:
                            reason, done = "zero_cost", True
                        elif rel < 1e-12:
                            reason, done = "small_reduction", True
                        break
                    mu *= 10.0
                    if mu > cfg.max_damping:
                        reason, done = "max_damping", True
                        break
                    if evals >= max_evals:
                        done = True
                        break
            if not ok:
                log.warning("solve aborted: normal equations singular at maximum damping")
                current = start
            for k, C in current.items():
                self.nodes[k].correction = C
            self.last_solve = SolveResult(costs, evals, reason, ok)
            return self.last_solve

    # -- gating ---------------------------------------------------------------
    def fusable_set(self, tau_res=None):
        tau = self.config.tau_res if tau_res is None else tau_res
        out = set()
        for k in self.nodes:
            inc = self.incident(k, valid_only=True)
            if not any(e.kind == VERIFIED for e in inc):
                continue
            mean = np.mean([self.edge_robust_residual(e) for e in inc])
            if mean <= tau:
                out.add(k)
        return out

    # -- PGBA rewrites --------------------------------------------------------
    def apply_pgba_rewrite(self, report, tau_rig=None):
        """Analytic edge update for rigid rewrites, invalidation otherwise.

        Returns a list of ``(edge, action)`` pairs.
        """
        with self._lock:
            tau = self.config.tau_rig if tau_rig is None else tau_rig
            k = report.node
            if k not in self.nodes:
                raise KeyError(f"unknown node {k}")
            node = self.nodes[k]
            node.anchor_cache_valid = False
            mutations = []
            D = report.delta
            Dinv = D.inverse()
            if report.rho_rig > tau:
                for e in self.incident(k, VERIFIED):
                    if e.valid:
                        e.valid = False
                        e.pixels = None
                        self.reverify_queue.append(e)
                        mutations.append((e, "invalidated"))
                self._drop_terms(k)
                return mutations
            for e in self.incident(k):
                if e.src == k:
                    e.measurement = e.measurement @ Dinv
                    mutations.append((e, "rewrite_source"))
                if e.tgt == k:
                    e.measurement = D @ e.measurement
                    mutations.append((e, "rewrite_target"))
                e.pixels = None
            node.frame_rewrite = D @ node.frame_rewrite
            if node.gauge:
                # keep the gauge at identity by moving the global frame with it
                for other in self.nodes.values():
                    if other.id != k:
                        other.correction = D @ other.correction
            else:
                node.correction = node.correction @ Dinv
            self._drop_terms(k)
            return mutations

    def _drop_terms(self, node_id):
        self._pho_cache.pop(("anchor", node_id), None)
        for e in self.incident(node_id):
            self._pho_cache.pop(("term", id(e)), None)

    # -- message handling -----------------------------------------------------
    def _view(self, node_id):
        """The node's summary expressed in its current local frame."""
        n = self.nodes[node_id]
        return rewrite_summary(n.summary, n.frame_rewrite)

    def _verify_pairs(self, pairs):
        cfg = self.config

        def run(p):
            return register_pair(self._view(p[0]), self._view(p[1]), cfg.thresholds, cfg.match_params, self.dense_matcher)

        if self.threads > 1 and len(pairs) > 1:
            with ThreadPoolExecutor(self.threads) as ex:
                return list(ex.map(run, pairs))
        return [run(p) for p in pairs]

    def _has_verified(self, a, b):
        return any(
            e.kind == VERIFIED and e.valid and {e.src, e.tgt} == {a, b} for e in self.edges
        )

    def _align_components(self, e):
        """Move the endpoint component not holding the fixed node onto the edge."""
        comps = self._components()
        cs = next(c for c in comps if e.src in c)
        ct = next(c for c in comps if e.tgt in c)
        if cs is ct:
            return
        g = self.gauge
        move_src = not (g in cs or (g not in ct and cs[0] < ct[0]))
        Cs, Ct = self.nodes[e.src].correction, self.nodes[e.tgt].correction
        if move_src:
            G = Ct @ e.measurement @ Cs.inverse()
            moved = cs
        else:
            G = Cs @ e.measurement.inverse() @ Ct.inverse()
            moved = ct
        for k in moved:
            self.nodes[k].correction = G @ self.nodes[k].correction

    def add_verified(self, src_id, tgt_id, T):
        e = GraphEdge(VERIFIED, src_id, tgt_id, T, self.config.w_verified, self.config.w_photometric)
        self._align_components(e)
        return self.add_edge(e)

    def handle(self, msg):
        """Dispatch a summary or PGBA message; returns (corrections, fusable set)."""
        if isinstance(msg, SubmapSummary):
            return self.handle_summary(msg)
        if isinstance(msg, PgbaMessage):
            report = fit_rigidity(msg.pre_centers, msg.post_centers, msg.node_id)
            return self.handle_report(report)
        if isinstance(msg, RigidityReport):
            return self.handle_report(msg)
        raise TypeError(f"cannot handle {type(msg).__name__}")

    def handle_report(self, report):
        with self._lock:
            muts = self.apply_pgba_rewrite(report)
            rigid = report.rho_rig <= self.config.tau_rig
            self.pgba_log.append((report.node, report.rho_rig, "rigid" if rigid else "invalidate", report.delta, len(muts)))
            self.solve()
            return self.corrections(), self.fusable_set()

    def handle_summary(self, s):
        with self._lock:
            cfg = self.config
            k = s.node_id
            touched = {k}
            if k in self.nodes:
                node = self.nodes[k]
                node.summary = s
                node.frame_rewrite = Sim3.identity()
                node.anchor_cache_valid = False
                self._drop_terms(k)
                prev = (k[0], k[1] - 1)
                for e in self.incident(k, TEMPORAL):
                    if e.tgt == k and e.src == prev:
                        e.measurement = s.odometry
            else:
                prev = (k[0], k[1] - 1)
                init = None
                if prev in self.nodes:
                    init = self.nodes[prev].correction @ s.odometry.inverse()
                self.add_node(k, init, s)
                if prev in self.nodes:
                    self.add_edge(GraphEdge(TEMPORAL, prev, k, s.odometry, cfg.w_temporal, 0.0))
            self.catalog.insert(s)

            others = Catalog(x for x in self.catalog if x.agent_id != s.agent_id)
            cands = retrieve(s, others, cfg.retrieval_k, cfg.tau_sim)
            touched.update(c.node_id for _, c in cands)
            pairs = [(k, c.node_id) for _, c in cands if not self._has_verified(k, c.node_id)]

            requeue = [e for e in self.reverify_queue if e.src in touched or e.tgt in touched]
            self.reverify_queue = [e for e in self.reverify_queue if e not in requeue]
            pairs += [(e.src, e.tgt) for e in requeue if (e.src, e.tgt) not in pairs]

            for (a, b), res in zip(pairs, self._verify_pairs(pairs)):
                self.audit.append(res)
                if res.accepted:
                    old = [e for e in requeue if (e.src, e.tgt) == (a, b)]
                    if old:
                        old[0].measurement = res.estimate.transform
                        old[0].valid = True
                        old[0].pixels = None
                        self._align_components(old[0])
                    elif not self._has_verified(a, b):
                        self.add_verified(a, b, res.estimate.transform)
                    log.info("verified edge %s -> %s (scale %.4f)", a, b, res.estimate.scale)
                else:
                    why = res.error or ",".join(res.verdict.failed_gates)
                    log.debug("rejected %s -> %s: %s", a, b, why)
                    for e in requeue:
                        if (e.src, e.tgt) == (a, b):
                            self.reverify_queue.append(e)
            self.solve()
            return self.corrections(), self.fusable_set()

    # -- export ---------------------------------------------------------------
    def to_dict(self):
        return {
            "gauge": list(self.gauge) if self.gauge else None,
            "nodes": [
                {
                    "agent": k[0],
                    "index": k[1],
                    "gauge": n.gauge,
                    "correction": n.correction.to_array().tolist(),
                }
                for k, n in sorted(self.nodes.items())
            ],
            "edges": [
                {
                    "kind": e.kind,
                    "src": list(e.src),
                    "tgt": list(e.tgt),
                    "measurement": e.measurement.to_array().tolist(),
                    "weight": e.weight,
                    "photometric_weight": e.photometric_weight,
                    "valid": e.valid,
                }
                for e in self.edges
            ],
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)


def rewrite_summary(s, F):
    """Express a summary's geometry in a rewritten local frame ``F``."""
    if F.allclose(Sim3.identity(), 0.0):
        return s
    corners = np.array(
        [[x, y, z] for x in (s.aabb_min[0], s.aabb_max[0]) for y in (s.aabb_min[1], s.aabb_max[1]) for z in (s.aabb_min[2], s.aabb_max[2])]
    )
    c = F.act(corners)
    q = F.act(s.salient_points) if len(s.salient_points) else s.salient_points
    r = F.act(s.registration_cloud) if len(s.registration_cloud) else s.registration_cloud
    a = s.anchor
    anchor = AnchorKeyframe(F @ a.pose, a.image, a.disparity, a.intrinsics)
    return replace(
        s,
        salient_points=q,
        registration_cloud=r,
        aabb_min=c.min(axis=0),
        aabb_max=c.max(axis=0),
        anchor=anchor,
    )
