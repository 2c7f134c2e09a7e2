import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.linalg import expm, logm
from scipy.spatial.transform import Rotation

from sim3fuse import liegroup as lg
from sim3fuse.liegroup import Sim3, Sim3Batch

from conftest import random_sim3, random_tangent


def hat7(x):
    """4x4 matrix generator; the oracle for exp is scipy's matrix exponential."""
    nu, omega, lam = x[:3], x[3:6], x[6]
    A = np.zeros((4, 4))
    A[:3, :3] = lg.hat3(omega) + lam * np.eye(3)
    A[:3, 3] = nu
    return A


def vee7(A):
    lam = np.trace(A[:3, :3]) / 3.0
    W = A[:3, :3] - lam * np.eye(3)
    return np.array([A[0, 3], A[1, 3], A[2, 3], W[2, 1], W[0, 2], W[1, 0], lam])


# -- compose / inverse / act ------------------------------------------------


def test_compose_identity_and_inverse(rng):
    T = random_sim3(rng)
    assert lg.compose(Sim3.identity(), T).allclose(T, 1e-12)
    assert lg.compose(T, lg.inverse(T)).allclose(Sim3.identity(), 1e-9)


def test_compose_pure_scales():
    a = Sim3(2.0, [1, 0, 0, 0], [1, 0, 0])
    b = Sim3(3.0, [1, 0, 0, 0], [0, 1, 0])
    c = a @ b
    assert c.scale == 6.0
    np.testing.assert_allclose(c.translation, [1, 2, 0], atol=0)


def test_inverse_closed_form():
    t = lg.inverse(Sim3(2.0, [1, 0, 0, 0], [4, 0, 0]))
    assert t.scale == 0.5
    np.testing.assert_allclose(t.translation, [-2, 0, 0], atol=0)
    assert lg.inverse(Sim3.identity()).allclose(Sim3.identity(), 0)


def test_inverse_involution(rng):
    for _ in range(200):
        T = random_sim3(rng)
        assert lg.inverse(lg.inverse(T)).allclose(T, 1e-12)


def test_act_examples():
    np.testing.assert_array_equal(lg.act(Sim3.identity(), [1, 2, 3]), [1, 2, 3])
    np.testing.assert_array_equal(lg.act(Sim3(2.0, [1, 0, 0, 0], [1, 0, 0]), [1, 1, 1]), [3, 2, 2])
    h = math.sqrt(0.5)
    np.testing.assert_allclose(lg.act(Sim3(1.0, [h, 0, 0, h], [0, 0, 0]), [1, 0, 0]), [0, 1, 0], atol=1e-12)


def test_compose_acts_sequentially(rng):
    for _ in range(100):
        a, b = random_sim3(rng, log_s=0.0), random_sim3(rng, log_s=0.0)
        p = rng.normal(size=(5, 3))
        np.testing.assert_allclose(lg.act(a @ b, p), lg.act(a, lg.act(b, p)), atol=1e-9)


def test_matrix_round_trip_and_bytes(rng):
    T = random_sim3(rng)
    assert Sim3.from_matrix(T.matrix()).allclose(T, 1e-12)
    assert len(T.to_bytes()) == 64
    assert Sim3.from_bytes(T.to_bytes()).allclose(T, 0)


def test_invalid_inputs_rejected():
    with pytest.raises(ValueError):
        Sim3(0.0, [1, 0, 0, 0], [0, 0, 0])
    with pytest.raises(ValueError):
        Sim3(1.0, [1, 1, 0, 0], [0, 0, 0])
    with pytest.raises(ValueError):
        Sim3.from_rotation_matrix(np.diag([1.0, 1.0, -1.0]))


# -- exp / log ----------------------------------------------------------------


def test_exp_log_trivial():
    assert lg.exp(np.zeros(7)).allclose(Sim3.identity(), 0)
    T = lg.exp(lg.tangent(lam=math.log(2.0)))
    assert abs(T.scale - 2.0) < 1e-15 and np.allclose(T.translation, 0) and np.allclose(T.quat, [1, 0, 0, 0])
    np.testing.assert_array_equal(lg.log(Sim3.identity()), np.zeros(7))
    x = lg.log(Sim3(math.e, [1, 0, 0, 0], [0, 0, 0]))
    np.testing.assert_allclose(x, [0, 0, 0, 0, 0, 0, 1], atol=1e-15)


def test_exp_matches_matrix_exponential(rng):
    for _ in range(100):
        x = random_tangent(rng, max_lam=1.0)
        np.testing.assert_allclose(lg.exp(x).matrix(), expm(hat7(x)), atol=1e-10)


def test_log_matches_matrix_logarithm(rng):
    for _ in range(50):
        x = random_tangent(rng, max_angle=2.5, max_lam=1.0)
        T = lg.exp(x)
        np.testing.assert_allclose(lg.log(T), vee7(np.real(logm(T.matrix()))), atol=1e-8)


def test_exp_log_round_trip_1000(rng):
    worst = 0.0
    for _ in range(1000):
        x = random_tangent(rng)
        worst = max(worst, np.abs(lg.log(lg.exp(x)) - x).max())
        T = random_sim3(rng)
        back = lg.exp(lg.log(T))
        assert back.allclose(T, 1e-9)
    assert worst < 1e-9


@pytest.mark.parametrize("scale", [1e-9, 1e-7, 1e-5, 1e-3])
def test_small_angle_and_scale_branches(rng, scale):
    for _ in range(20):
        x = rng.normal(size=7) * scale
        np.testing.assert_allclose(lg.log(lg.exp(x)), x, atol=1e-14, rtol=1e-9)
        np.testing.assert_allclose(lg.exp(x).matrix(), expm(hat7(x)), atol=1e-14)


def test_mixed_branches_continuity():
    # small rotation with large scale, and the reverse, straddling the series thresholds
    for lam, ang in [(2.0, 1e-8), (1e-8, 2.0), (1e-7, 1e-7), (0.5, 5e-4)]:
        x = np.array([0.3, -0.2, 0.7, ang, 0.0, 0.0, lam])
        np.testing.assert_allclose(lg.exp(x).matrix(), expm(hat7(x)), atol=1e-12)
        np.testing.assert_allclose(lg.log(lg.exp(x)), x, atol=1e-12)


def test_log_at_pi_is_deterministic():
    for axis in ([1, 0, 0], [0, 1, 0], [0, 0, 1], [-1, 1, 0]):
        axis = np.asarray(axis, float) / np.linalg.norm(axis)
        R = Rotation.from_rotvec(np.pi * axis).as_matrix()
        w = lg.log(Sim3.from_rotation_matrix(R))[3:6]
        assert abs(np.linalg.norm(w) - np.pi) < 1e-9
        lead = w[np.flatnonzero(np.abs(w) > 1e-12)[0]]
        assert lead > 0
        np.testing.assert_allclose(lg.exp(lg.tangent(omega=w)).rotation, R, atol=1e-9)


# -- adjoint ---------------------------------------------------------------------


def test_adjoint_trivial(rng):
    x = random_tangent(rng)
    np.testing.assert_allclose(lg.adjoint(Sim3.identity(), x), x, atol=0)
    np.testing.assert_array_equal(lg.adjoint(random_sim3(rng), np.zeros(7)), np.zeros(7))


def test_adjoint_conjugation_1000(rng):
    for _ in range(1000):
        T = random_sim3(rng, log_s=0.5)
        x = random_tangent(rng, max_angle=1.0, max_lam=0.5, nu_scale=0.5)
        y = lg.adjoint(T, x)
        if np.linalg.norm(y[3:6]) > np.pi - 1e-3:
            continue
        np.testing.assert_allclose(lg.log(T @ lg.exp(x) @ lg.inverse(T)), y, atol=1e-9)


def test_adjoint_linear(rng):
    for _ in range(100):
        T = random_sim3(rng)
        x, y = rng.normal(size=7), rng.normal(size=7)
        a, b = rng.normal(size=2)
        np.testing.assert_allclose(
            lg.adjoint(T, a * x + b * y), a * lg.adjoint(T, x) + b * lg.adjoint(T, y), atol=1e-9
        )


def test_adjoint_is_homomorphism(rng):
    a, b = random_sim3(rng), random_sim3(rng)
    np.testing.assert_allclose(lg.adjoint_matrix(a @ b), lg.adjoint_matrix(a) @ lg.adjoint_matrix(b), atol=1e-9)


def test_right_jacobian_first_order(rng):
    # exp(x + d) ~= exp(x) exp(J_r(x) d)
    for _ in range(30):
        x = random_tangent(rng, max_angle=2.0, max_lam=1.0)
        d = rng.normal(size=7) * 1e-6
        lhs = lg.log(lg.inverse(lg.exp(x)) @ lg.exp(x + d))
        np.testing.assert_allclose(lhs, lg.right_jacobian(x) @ d, atol=1e-11)


# -- algebraic laws -----------------------------------------------------------


def test_associativity_1000(rng):
    for _ in range(1000):
        a, b, c = (random_sim3(rng) for _ in range(3))
        assert ((a @ b) @ c).allclose(a @ (b @ c), 1e-9)


def test_scale_multiplies(rng):
    for _ in range(100):
        a, b = random_sim3(rng), random_sim3(rng)
        assert math.isclose((a @ b).scale, a.scale * b.scale, rel_tol=1e-15)


def test_long_chain_stays_normalized(rng):
    T = Sim3.identity()
    step = random_sim3(rng, t_scale=0.01, log_s=0.0)
    for _ in range(10000):
        T = T @ step
    assert abs(np.linalg.norm(T.quat) - 1.0) < 1e-12
    R = T.rotation
    assert np.abs(R.T @ R - np.eye(3)).max() < 1e-9


finite = st.floats(-2.0, 2.0, allow_nan=False)


@settings(max_examples=200, deadline=None)
@given(st.lists(finite, min_size=7, max_size=7))
def test_exp_composition_of_commuting_tangents(x):
    # exp(a x) exp(b x) = exp((a + b) x) for any tangent x
    x = np.asarray(x) * 0.5
    lhs = lg.exp(0.3 * x) @ lg.exp(0.7 * x)
    assert lhs.allclose(lg.exp(x), 1e-9)


# -- batched forms ---------------------------------------------------------------


def test_batch_matches_scalar(rng):
    A = [random_sim3(rng) for _ in range(40)]
    B = [random_sim3(rng) for _ in range(40)]
    bA, bB = Sim3Batch.stack(A), Sim3Batch.stack(B)
    C = bA @ bB
    inv = bA.inverse()
    logs = bA.log()
    ads = bA.adjoint_matrices()
    p = rng.normal(size=(40, 3))
    acted = bA.act(p)
    for i in range(40):
        assert C.item(i).allclose(A[i] @ B[i], 1e-12)
        assert inv.item(i).allclose(lg.inverse(A[i]), 1e-12)
        np.testing.assert_allclose(logs[i], lg.log(A[i]), atol=1e-12)
        np.testing.assert_allclose(ads[i], lg.adjoint_matrix(A[i]), atol=1e-12)
        np.testing.assert_allclose(acted[i], lg.act(A[i], p[i]), atol=1e-12)


def test_batched_jacobians_match_scalar(rng):
    X = np.stack([random_tangent(rng, max_angle=2.5, max_lam=1.0) for _ in range(30)])
    X[0] = 0.0
    X[1] *= 1e-8
    Jr = lg.right_jacobians(X)
    ad = lg.ad_matrices(X)
    for i in range(len(X)):
        np.testing.assert_allclose(Jr[i], lg.right_jacobian(X[i]), atol=1e-12)
        np.testing.assert_allclose(ad[i], lg.ad_matrix(X[i]), atol=0)
