import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coopisac.geometry import WaveformConfig
from coopisac.tensor import (DegeneracyError, RankDeficiencyError, UniquenessError, als_recover,
                             cp_reconstruct, estimate_factors, generators_from_columns, khatri_rao,
                             plan_smoothing, randomized_svd, recover_factors, smooth,
                             smoothing_operator)
from coopisac.waveform import NoiseConfig, cp_tensor, design_region_beamformer, simulate_received_tensor

from conftest import facing_pair, target


def crandn(rng, *shape):
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2)


def synthetic(rng, R=6, N=5, M=24, P=3, z=None):
    if z is None:
        z = np.exp(-1j * np.linspace(0.4, 2.6, P))
    A, B = crandn(rng, R, P), crandn(rng, N, P)
    C = z[None, :] ** np.arange(M)[:, None]
    return cp_tensor(A, B, C), (A, B, C, z)


def match_columns(z_true, z_est):
    return [int(np.argmin(np.abs(z_est - z))) for z in z_true]


def test_plan_examples():
    p = plan_smoothing(612, 7, 64, 10)
    assert (p.l1, p.l2) == (307, 306)
    p = plan_smoothing(96, 7, 64, 3)
    assert (p.l1, p.l2) == (49, 48)
    # balanced split violates l2*R >= K+1; fall back to a feasible one
    p = plan_smoothing(5, 7, 1, 3)
    assert (p.l1 - 1) * 7 >= 4 and p.l2 * 1 >= 4
    with pytest.raises(UniquenessError):
        plan_smoothing(3, 1, 1, 3)
    with pytest.raises(UniquenessError):
        plan_smoothing(2, 1, 1, 1)


def test_smoothed_layout_and_rank(rng):
    Y, _ = synthetic(rng)
    plan = plan_smoothing(24, 5, 6, 2)
    Ys = smooth(Y, plan)
    assert Ys.shape == (plan.l1 * 5, plan.l2 * 6)
    i, n, l, r = 3, 2, 4, 1
    assert Ys[i * 5 + n, l * 6 + r] == Y[r, n, i + l]
    s = np.linalg.svd(Ys, compute_uv=False)
    assert s[2] / s[0] > 1e-6 and s[3] / s[0] < 1e-12


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(4, 20), st.integers(0, 2 ** 32 - 1))
def test_operator_matches_dense(R, N, M, seed):
    rng = np.random.default_rng(seed)
    Y = crandn(rng, R, N, M)
    K = 0
    plan = plan_smoothing(M, N, R, K)
    D = smooth(Y, plan)
    op = smoothing_operator(Y, plan)
    X = crandn(rng, D.shape[1], 3)
    W = crandn(rng, D.shape[0], 2)
    np.testing.assert_allclose(op.matmat(X), D @ X, atol=1e-10)
    np.testing.assert_allclose(op.rmatmat(W), D.conj().T @ W, atol=1e-10)


def test_noiseless_generators_exact(rng):
    Y, (A, B, C, z) = synthetic(rng)
    est = estimate_factors(Y, K=2)
    idx = match_columns(z, est.generators)
    np.testing.assert_allclose(est.generators[idx], z, atol=1e-8)
    np.testing.assert_allclose(cp_reconstruct(est), Y, atol=1e-8 * np.abs(Y).max())


def test_operator_path_matches_dense_path(rng):
    Y, (_, _, _, z) = synthetic(rng, M=40)
    d = estimate_factors(Y, 2, dense=True)
    o = estimate_factors(Y, 2, dense=False)
    np.testing.assert_allclose(np.sort_complex(d.generators), np.sort_complex(o.generators), atol=1e-9)


def test_randomized_svd_matches_dense(rng):
    Y, _ = synthetic(rng, M=40)
    plan = plan_smoothing(40, 5, 6, 2)
    s_dense = np.linalg.svd(smooth(Y, plan), compute_uv=False)[:3]
    _, s, _ = randomized_svd(smoothing_operator(Y, plan), 3)
    np.testing.assert_allclose(s, s_dense, rtol=1e-10)


def test_twin_targets_are_degenerate():
    # mirror-image targets share the bistatic range; distinct velocities keep full rank
    sc = facing_pair(targets=[target((0, 100, 100), (5, 0, 0)), target((0, -100, 100), (0, 0, -8))],
                     wf=WaveformConfig(n_subcarriers=32))
    bf = design_region_beamformer(sc.array, (40, 90), (40, 140))
    T = simulate_received_tensor(sc, (0, 1), (bf, bf), NoiseConfig(enabled=False))
    with pytest.raises(DegeneracyError):
        estimate_factors(T, K=2, dense=True)


def test_rank_deficiency(rng):
    Y, _ = synthetic(rng, P=2)
    with pytest.raises(RankDeficiencyError):
        estimate_factors(Y, K=2)


def test_shift_invariance(rng):
    Y, (A, B, C, z) = synthetic(rng)
    est = estimate_factors(Y, 2)
    Ch = est.c_hat
    np.testing.assert_allclose(Ch[1:], Ch[:-1] * est.generators[None, :], atol=1e-10)


def test_khatri_rao_identity(rng):
    Y, (A, B, C, z) = synthetic(rng)
    est = estimate_factors(Y, 2)
    # mode-1 unfolding: rows m*N + n, columns r
    unf = Y.transpose(2, 1, 0).reshape(-1, Y.shape[0])
    rec = khatri_rao(est.c_hat, est.b_hat) @ est.a_hat.T
    assert np.linalg.norm(unf - rec) / np.linalg.norm(unf) <= 1e-8


def test_scaling_ambiguity_cancels(rng):
    Y, (A, B, C, z) = synthetic(rng)
    est = estimate_factors(Y, 2)
    idx = match_columns(z, est.generators)
    for k, j in enumerate(idx):
        d1 = np.vdot(A[:, k], est.a_hat[:, j]) / np.vdot(A[:, k], A[:, k])
        d2 = np.vdot(B[:, k], est.b_hat[:, j]) / np.vdot(B[:, k], B[:, k])
        d3 = np.vdot(C[:, k], est.c_hat[:, j]) / np.vdot(C[:, k], C[:, k])
        assert abs(d1 * d2 * d3 - 1) < 1e-6
        assert abs(d3 - 1) < 1e-8  # delay columns start at 1


def test_column_shuffle_invariance(rng):
    Y, (A, B, C, z) = synthetic(rng)
    perm = [2, 0, 1]
    Y2 = cp_tensor(A[:, perm], B[:, perm], C[:, perm])
    np.testing.assert_allclose(Y, Y2, atol=1e-12)
    g1 = np.sort_complex(estimate_factors(Y, 2).generators)
    g2 = np.sort_complex(estimate_factors(Y2, 2).generators)
    np.testing.assert_allclose(g1, g2, atol=1e-10)


def test_generators_from_columns():
    z = np.exp(1j * np.array([0.3, -1.2]))
    C = 2.0 * z[None, :] ** np.arange(10)[:, None]
    np.testing.assert_allclose(generators_from_columns(C), z, atol=1e-14)


def test_als_rank_one_converges(rng):
    Y, (_, _, _, z) = synthetic(rng, P=1)
    est = als_recover(Y, K=0, seed=3)
    assert est.converged and est.n_iters <= 100
    assert est.fit_history[-1] < 1e-6
    assert est.generators[0] == pytest.approx(z[0], abs=1e-6)
    h = np.array(est.fit_history)
    assert np.all(np.diff(h) <= 1e-12 * h[:-1] + 1e-15)


def test_als_history_is_monotone(rng):
    Y, _ = synthetic(rng)
    Y = Y + 0.01 * crandn(rng, *Y.shape)
    est = als_recover(Y, K=2, max_iters=80, seed=1)
    h = np.array(est.fit_history)
    assert len(h) == est.n_iters
    assert np.all(np.diff(h) <= 1e-9)


def test_als_rank_checks(rng):
    with pytest.raises(ValueError):
        als_recover(crandn(rng, 1, 2, 3), K=5)


def test_recover_direct_call(rng):
    Y, (_, _, _, z) = synthetic(rng)
    plan = plan_smoothing(24, 5, 6, 2)
    est = recover_factors(smooth(Y, plan), plan)
    assert est.n_paths == 3
    assert est.singular_values.shape == (3,)
