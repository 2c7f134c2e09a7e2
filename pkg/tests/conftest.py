import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from sim3fuse.liegroup import Sim3
from sim3fuse.summary import AnchorKeyframe, SubmapSummary


def random_sim3(rng, t_scale=2.0, log_s=1.0):
    """Random similarity with a uniformly distributed rotation (scipy sampler)."""
    R = Rotation.random(random_state=rng).as_matrix()
    s = float(np.exp(rng.uniform(-log_s, log_s)))
    return Sim3.from_rotation_matrix(R, rng.normal(scale=t_scale, size=3), s)


def random_tangent(rng, max_angle=np.pi - 1e-3, max_lam=3.0, nu_scale=2.0):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    omega = axis * rng.uniform(0.0, max_angle)
    return np.concatenate([rng.normal(scale=nu_scale, size=3), omega, [rng.uniform(-max_lam, max_lam)]])


def sim3_error(a, b):
    """(translation, rotation angle, relative scale) discrepancies."""
    dR = a.rotation.T @ b.rotation
    ang = Rotation.from_matrix(dR).magnitude()
    return np.linalg.norm(a.translation - b.translation), ang, abs(a.scale / b.scale - 1.0)


def unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


def make_summary(rng, agent=0, index=0, n_q=20, n_r=50, hw=(6, 8), rgb=False, descriptor=None):
    H, W = hw
    pts = rng.uniform(-1, 1, size=(n_q, 3))
    cloud = rng.uniform(-1, 1, size=(n_r, 3))
    both = np.concatenate([pts, cloud, np.zeros((1, 3))])
    img = rng.uniform(0, 1, size=(H, W, 3) if rgb else (H, W))
    disp = np.where(rng.uniform(size=(H, W)) < 0.2, 0.0, rng.uniform(0.1, 2.0, size=(H, W)))
    K = (W * 0.9, W * 0.9, (W - 1) / 2, (H - 1) / 2)
    anchor = AnchorKeyframe(random_sim3(rng, log_s=0.0), img, disp, K)
    d = unit(rng.normal(size=128)) if descriptor is None else descriptor
    return SubmapSummary(
        agent, index, d, pts, rng.normal(size=(n_q, 32)), cloud, both.min(0), both.max(0), anchor,
        random_sim3(rng),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def run_plan(plan, seed=42, scales=(1.0, 1.3), keyframes=8, pgba=()):
    from sim3fuse import coordinator, simworld

    sc = simworld.generate_scenario(seed, 2, plan, keyframes, scales=list(scales), pgba=pgba)
    items, per_agent = simworld.simulate(sc)
    result = coordinator.run(coordinator.messages_from_items(items))
    return sc, items, per_agent, result


@pytest.fixture(scope="session")
def pair_run():
    return run_plan("pair")


def _outside_frusta(points, frames, margin=2.0):
    out = np.ones(len(points), dtype=bool)
    for f in frames:
        H, W = f.depth.shape
        fx, fy, cx, cy = f.intrinsics
        pc = f.pose.inverse().act(points)
        z = pc[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = fx * pc[:, 0] / z + cx
            v = fy * pc[:, 1] / z + cy
        inside = (z > 0) & (u > -margin) & (u < W - 1 + margin) & (v > -margin) & (v < H - 1 + margin)
        out &= ~inside
    return out


@pytest.fixture(scope="session")
def overlap_case():
    """Two agents viewing one room sector, in world coordinates (exact corrections).

    Borrowed set = the second agent's real map, plus exact copies of target
    Gaussians, plus floaters placed halfway along target rays, plus surface
    Gaussians from views facing away from every target camera.
    """
    from scipy.spatial import cKDTree

    from sim3fuse import coordinator as co
    from sim3fuse import simworld as sw
    from sim3fuse.fusion import Gaussians

    sc = sw.generate_scenario(42, 2, "pair", 8, scales=[1.0, 1.3])
    cfg = sc.world
    maps, corr = {}, {}
    for script in sc.scripts:
        for sub in sw.build_submaps(script, sc.scene, cfg, seed=42):
            maps[sub.node_id] = sw.map_payload(sub, cfg)
            corr[sub.node_id] = sub.frame.inverse()
    snap = co.FusionSnapshot(corr, frozenset(corr), maps, {})
    target = co._own_map(snap, 0)
    frames = co._carve_frames(snap, 0)
    rng = np.random.default_rng(0)

    dup_idx = rng.choice(len(target), 200, replace=False)
    dups = target[dup_idx]

    floaters = []
    for f in frames[::2]:
        d = f.depth
        vv, uu = np.nonzero(d > 0)
        pick = rng.choice(len(vv), 10, replace=False)
        fx, fy, cx, cy = f.intrinsics
        z = 0.5 * d[vv[pick], uu[pick]]
        cam = np.stack([(uu[pick] - cx) / fx * z, (vv[pick] - cy) / fy * z, z], axis=1)
        floaters.append(f.pose.act(cam))
    fpts = np.concatenate(floaters)
    n = len(fpts)
    floats = Gaussians(fpts, np.full((n, 3), 0.01), np.tile([1.0, 0, 0, 0], (n, 1)), np.full(n, 0.9),
                       np.full((n, 3), 0.5), np.tile([1, 99, 0], (n, 1)), fpts)

    K = sw.intrinsics_for(64, 48, 90.0)
    back = []
    for f in frames:
        pose = f.pose @ Sim3.from_rotation_matrix(np.diag([-1.0, 1.0, -1.0]))
        r = sw.render(sc.scene, pose, K, 64, 48)
        back.append(r.points[r.depth > 0])
    bpts = np.concatenate(back)
    keep = _outside_frusta(bpts, frames)
    d, _ = cKDTree(target.gt_means).query(bpts)
    keep &= d > 0.3
    bpts = bpts[keep][:: max(1, keep.sum() // 400)]
    m = len(bpts)
    unseen = Gaussians(bpts, np.full((m, 3), 0.01), np.tile([1.0, 0, 0, 0], (m, 1)), np.full(m, 0.9),
                       np.full((m, 3), 0.5), np.tile([1, 98, 0], (m, 1)), bpts)
    real = co._own_map(snap, 1)
    return {
        "snap": snap,
        "target": target,
        "frames": frames,
        "duplicates": dups,
        "floaters": floats,
        "unseen": unseen,
        "real": real,
        "union": Gaussians.concat([target, real]),
    }
