"""Constructions shared by the unit tests and the acceptance suite."""

import numpy as np

from sim3fuse import liegroup as lg
from sim3fuse import simworld as sw
from sim3fuse.liegroup import Sim3
from sim3fuse.posegraph import (
    TEMPORAL,
    VERIFIED,
    GraphConfig,
    GraphEdge,
    PhotometricAnchor,
    SubmapGraph,
    geo_residual,
    geo_residual_jacobians,
    make_photometric_term,
    pho_residual_terms,
    select_photometric_pixels,
)
from sim3fuse.registration import CorrespondenceSet

from conftest import random_sim3


def chain_graph(truth, temporal_pairs, verified_pairs, config=GraphConfig()):
    g = SubmapGraph(config)
    for k in sorted(truth):
        g.add_node(k, truth[k])
    for s, t in temporal_pairs:
        g.add_edge(GraphEdge(TEMPORAL, s, t, truth[t].inverse() @ truth[s], config.w_temporal))
    for s, t in verified_pairs:
        g.add_edge(GraphEdge(VERIFIED, s, t, truth[t].inverse() @ truth[s], config.w_verified, 0.0))
    return g


def two_agent_truth(rng, n_per_agent):
    truth = {(0, 0): Sim3.identity()}
    for a in range(2):
        for l in range(n_per_agent):
            if (a, l) not in truth:
                truth[(a, l)] = random_sim3(rng, t_scale=3.0, log_s=0.5)
    temporal = [((a, l), (a, l + 1)) for a in range(2) for l in range(n_per_agent - 1)]
    verified = [((1, l), (0, l)) for l in range(0, n_per_agent, 3)]
    return truth, temporal, verified


def perturbed_chain(rng, n, sigma):
    truth, temporal, verified = two_agent_truth(rng, n)
    g = chain_graph(truth, temporal, verified)
    for k, node in g.nodes.items():
        if not node.gauge:
            node.correction = node.correction @ lg.exp(rng.normal(scale=sigma, size=7))
    return g, truth


def fd_jacobian(f, C, h=1e-6):
    cols = []
    for k in range(7):
        d = np.zeros(7)
        d[k] = h
        cols.append((f(C @ lg.exp(d)) - f(C @ lg.exp(-d))) / (2 * h))
    return np.stack(cols, axis=-1)


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12)


def plane_anchor(pose, cell=2.0, res=(64, 48)):
    scene = sw.SceneModel((sw.Box((-4, -4, 2.0), (4, 4, 2.3), cell=cell),), seed=3)
    K = sw.intrinsics_for(res[0], res[1], 70.0)
    return PhotometricAnchor.from_keyframe(sw.render_anchor(scene, pose, K, res))


def rewrite_setup(rng, residual_scale=0.0):
    C = {(0, 0): Sim3.identity(), (1, 0): random_sim3(rng), (1, 1): random_sim3(rng), (0, 1): random_sim3(rng)}
    g = SubmapGraph()
    for k in sorted(C):
        g.add_node(k, C[k])
    noise = lambda: lg.exp(rng.normal(scale=residual_scale, size=7)) if residual_scale else Sim3.identity()
    g.add_edge(GraphEdge(VERIFIED, (1, 0), (0, 1), C[(0, 1)].inverse() @ C[(1, 0)] @ noise(), 1.0))
    g.add_edge(GraphEdge(VERIFIED, (1, 1), (0, 1), C[(0, 1)].inverse() @ C[(1, 1)] @ noise(), 1.0))
    g.add_edge(GraphEdge(TEMPORAL, (0, 0), (0, 1), C[(0, 1)].inverse() @ C[(0, 0)] @ noise(), 5.0))
    return g


def residuals(g):
    C = g.corrections()
    return [geo_residual(e, C[e.src], C[e.tgt]) for e in g.edges]


def corrupted_set(rng, T, n=200, outlier_frac=0.3):
    src = rng.uniform(-2, 2, size=(n, 3))
    tgt = T.act(src)
    n_out = int(round(outlier_frac * n))
    bad = rng.choice(n, n_out, replace=False)
    tgt[bad] = rng.uniform(-10, 10, size=(n_out, 3))
    return CorrespondenceSet(src, tgt, np.ones(n)), bad


def geo_jacobian_error(rng):
    """Worst relative error of the analytic geometric Jacobians against central differences."""
    Cs, Ct = random_sim3(rng), random_sim3(rng)
    M = Ct.inverse() @ Cs @ lg.exp(rng.normal(scale=0.4, size=7))
    e = GraphEdge(VERIFIED, (0, 0), (1, 0), M, 1.0)
    _, Js, Jt = geo_residual_jacobians(e, Cs, Ct)
    return max(
        rel_err(Js, fd_jacobian(lambda C: geo_residual(e, C, Ct), Cs)),
        rel_err(Jt, fd_jacobian(lambda C: geo_residual(e, Cs, C), Ct)),
    )


def pho_jacobian_error(seed, h=1e-6):
    """Same check for the photometric residual of two textured plane views."""
    rng = np.random.default_rng(seed)
    rigid = np.array([1, 1, 1, 1, 1, 1, 0])
    A = plane_anchor(lg.exp(rng.normal(scale=0.05, size=7) * rigid), cell=0.4, res=(40, 30))
    B = plane_anchor(lg.exp(rng.normal(scale=0.05, size=7) * rigid), cell=0.4, res=(40, 30))
    G = random_sim3(rng)
    Cs = G @ lg.exp(rng.normal(scale=0.01, size=7))
    Ct = G @ lg.exp(rng.normal(scale=0.01, size=7))
    pix = select_photometric_pixels(A, B, Ct.inverse() @ Cs)
    term = make_photometric_term(A, pix)
    r, Js, Jt = pho_residual_terms(term, B, Cs, Ct, jacobians=True)
    # bilinear interpolation is not differentiable on cell boundaries
    pc = B.pose.inverse().act((Ct.inverse() @ Cs).act(term.points))
    fx, fy, cx, cy = B.intrinsics
    u = fx * pc[:, 0] / pc[:, 2] + cx
    v = fy * pc[:, 1] / pc[:, 2] + cy
    keep = (np.abs(u - np.round(u)) > 1e-3) & (np.abs(v - np.round(v)) > 1e-3)
    assert keep.sum() > 50
    fs = fd_jacobian(lambda C: pho_residual_terms(term, B, C, Ct), Cs, h)
    ft = fd_jacobian(lambda C: pho_residual_terms(term, B, Cs, C), Ct, h)
    return max(rel_err(Js[keep], fs[keep]), rel_err(Jt[keep], ft[keep]))
