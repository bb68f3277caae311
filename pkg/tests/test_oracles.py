import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dyngen.diffcore import SeededRng
from dyngen.inference import latent_gradients, log_joint
from dyngen.model import LatentTrajectory, rollout
from dyngen.oracles import (
    LinearSSM,
    dense_posterior,
    fd_gradcheck,
    kalman_smoother,
    lds_fit,
    lds_reconstruct,
    lds_synthesize,
    linear_generator,
    random_stable_ssm,
    scalar_linear_target,
    stationary_check,
)


# Kalman smoother


def test_uninformative_observations_give_prior():
    ssm = random_stable_ssm(2, 2, 3, 1.0, SeededRng(0))
    ssm.C[:] = 0
    X = SeededRng(1).standard_normal((4, 3))
    res = kalman_smoother(ssm, X)
    np.testing.assert_allclose(res.mean, 0, atol=1e-12)
    np.testing.assert_allclose(res.s0_cov, np.eye(2), atol=1e-12)
    for c in res.xi_cov:
        np.testing.assert_allclose(c, np.eye(2), atol=1e-12)


def test_scalar_hand_formula():
    a, b, c, sigma, x = 0.7, 0.4, 1.3, 0.6, 0.9
    ssm = LinearSSM([[a]], [[b]], [[c]], sigma)
    res = kalman_smoother(ssm, [[x]])
    # z = (s0, xi) ~ N(0, I), x = j.z + noise with j = c (a, b)
    j = c * np.array([a, b])
    s = j @ j + sigma**2
    np.testing.assert_allclose(res.mean, j * x / s, rtol=1e-12)
    np.testing.assert_allclose(res.marginal_variances, 1 - j**2 / s, rtol=1e-12)


def test_smoother_matches_dense_solve_d2_T5():
    ssm = random_stable_ssm(2, 2, 3, 0.5, SeededRng(4))
    X, _, _ = ssm.sample(5, SeededRng(5))
    res = kalman_smoother(ssm, X)
    mean, cov = dense_posterior(ssm, X)
    np.testing.assert_allclose(res.mean, mean, rtol=1e-8, atol=1e-12)
    np.testing.assert_allclose(res.marginal_variances, np.diag(cov), rtol=1e-8)
    np.testing.assert_allclose(res.s0_cov, cov[:2, :2], rtol=1e-8, atol=1e-12)
    for t in range(5):
        blk = cov[2 + 2 * t : 4 + 2 * t, 2 + 2 * t : 4 + 2 * t]
        np.testing.assert_allclose(res.xi_cov[t], blk, rtol=1e-8, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(
    st.integers(1, 3), st.integers(1, 3), st.integers(1, 4), st.integers(1, 8),
    st.floats(0.2, 2.0), st.integers(0, 10**6),
)
def test_smoother_matches_dense_everywhere(d, dn, D, T, sigma, seed):
    if d + T * dn > 60:
        return
    ssm = random_stable_ssm(d, dn, D, sigma, SeededRng(seed))
    X, _, _ = ssm.sample(T, SeededRng(seed, (1,)))
    res = kalman_smoother(ssm, X)
    mean, cov = dense_posterior(ssm, X)
    scale = max(1.0, np.abs(mean).max())
    assert np.max(np.abs(res.mean - mean)) <= 1e-8 * scale
    np.testing.assert_allclose(res.marginal_variances, np.diag(cov), rtol=1e-8)


def test_dense_solve_size_cap():
    ssm = random_stable_ssm(2, 3, 2, 1.0, SeededRng(0))
    with pytest.raises(ValueError):
        dense_posterior(ssm, np.zeros((20, 2)))


def test_linear_generator_reproduces_ssm():
    ssm = random_stable_ssm(3, 2, 5, 0.3, SeededRng(8))
    model = linear_generator(ssm)
    rng = SeededRng(9)
    s0, xi = rng.standard_normal(3), rng.standard_normal((7, 2))
    got = rollout(LatentTrajectory(s0, xi), model).reshape(7, 5)
    np.testing.assert_allclose(got, ssm.mean_frames(s0, xi), rtol=1e-13, atol=1e-14)


def test_log_joint_posterior_mode_is_smoother_mean():
    ssm = random_stable_ssm(2, 2, 3, 0.5, SeededRng(2))
    X, _, _ = ssm.sample(6, SeededRng(3))
    model = linear_generator(ssm)
    res = kalman_smoother(ssm, X)
    lat = LatentTrajectory(res.s0_mean, res.xi_mean)
    g = latent_gradients(lat, X.reshape(6, 1, 3, 1), None, model, ssm.sigma)
    assert max(np.abs(v).max() for v in g.values() if v is not None) < 1e-9


def test_stationary_check_on_scalar_target():
    ssm, X, mu, var = scalar_linear_target()
    assert var == pytest.approx(1 / (1 + 1.5**2 / 0.5**2))
    r = stationary_check(chains=4000, steps=200)
    assert r.acceptance_rate > 0.99
    assert r.variance_rel_error < 0.05
    assert r.mean == pytest.approx(r.exact_mean, abs=0.02)


# LDS baseline


def test_lds_exact_model_class_has_zero_residuals():
    # a rotation over whole periods has zero mean, so centering keeps it exactly AR(1)
    C, _ = np.linalg.qr(SeededRng(3).standard_normal((6, 2)))
    theta = 2 * np.pi / 20
    R = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    S = [np.array([1.0, 0.0])]
    for _ in range(39):
        S.append(R @ S[-1])
    fit = lds_fit(np.array(S) @ C.T + 0.3, 2)
    assert np.abs(fit.residuals).max() < 1e-10
    np.testing.assert_allclose(fit.C.T @ fit.C, np.eye(2), atol=1e-12)


def test_lds_constant_sequence_warns():
    X = np.full((10, 3, 3, 1), 0.25)
    with pytest.warns(RuntimeWarning):
        fit = lds_fit(X, 2)
    assert np.array_equal(fit.A, np.zeros((2, 2)))
    np.testing.assert_allclose(fit.states, 0, atol=1e-15)


def test_lds_reconstruction_energy_equals_svd_tail():
    X = SeededRng(6).standard_normal((25, 4, 3, 1))
    fit = lds_fit(X, 3)
    err = np.sum((lds_reconstruct(fit, X) - X) ** 2)
    np.testing.assert_allclose(err, np.sum(fit.singular_values[3:] ** 2), rtol=1e-10)


def test_lds_needs_more_frames_than_states():
    with pytest.raises(ValueError):
        lds_fit(np.zeros((3, 4)), 3)


def test_lds_residual_replay_reproduces_projection():
    X = SeededRng(7).standard_normal((30, 5))
    fit = lds_fit(X, 3)
    out = lds_synthesize(fit, 30, SeededRng(0), innovations=fit.residuals)
    np.testing.assert_allclose(out, lds_reconstruct(fit, X), atol=1e-8)


def test_lds_zero_innovation_from_origin_is_mean_frame():
    fit = lds_fit(SeededRng(1).standard_normal((20, 4)), 2)
    fit.Q[:] = 0
    out = lds_synthesize(fit, 50, SeededRng(0), s0=np.zeros(2))
    np.testing.assert_array_equal(out, np.broadcast_to(fit.mean_frame, out.shape))


def test_lds_synthesis_seeded():
    fit = lds_fit(SeededRng(1).standard_normal((20, 4)), 2)
    assert np.array_equal(lds_synthesize(fit, 30, SeededRng(5)), lds_synthesize(fit, 30, SeededRng(5)))
    assert not np.array_equal(lds_synthesize(fit, 30, SeededRng(5)), lds_synthesize(fit, 30, SeededRng(6)))


def test_lds_stable_synthesis_stays_bounded():
    fit = lds_fit(SeededRng(2).standard_normal((40, 6)), 3)
    rho = np.abs(np.linalg.eigvals(fit.A)).max()
    assert rho < 1
    out = lds_synthesize(fit, 10_000, SeededRng(3)).reshape(10_000, -1)
    states = (out - fit.mean_frame) @ fit.C
    bound = 20 * np.sqrt(np.trace(fit.Q) / (1 - rho**2))
    assert np.linalg.norm(states, axis=1).max() < bound


# finite differences


def test_fd_quadratic_exact():
    rng = SeededRng(0)
    M = rng.standard_normal((5, 5))
    Q = M @ M.T
    x = rng.standard_normal(5)
    rep = fd_gradcheck(lambda z: 0.5 * z @ Q @ z, x, Q @ x)
    assert rep.max_rel_error < 1e-10


def test_fd_tanh_at_zero():
    rep = fd_gradcheck(lambda z: float(np.tanh(z[0])), [0.0], [1.0])
    assert abs(rep.numeric - 1.0) < 1e-8 and rep.max_rel_error < 1e-8


def test_fd_reports_worst_coordinate():
    rep = fd_gradcheck(lambda z: float(z @ z), [1.0, 2.0, 3.0], [2.0, 4.0, 7.0])
    assert rep.worst_index == 2
    assert rep.max_rel_error == pytest.approx(1 / 7, rel=1e-6)
    assert not rep.ok(1e-3)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_fd_non_finite_raises():
    with pytest.raises(FloatingPointError):
        fd_gradcheck(lambda z: float(np.log(z[0])), [0.0], [1.0])


def test_fd_on_log_joint_latents():
    ssm = random_stable_ssm(2, 2, 3, 0.7, SeededRng(11))
    model = linear_generator(ssm)
    X, _, _ = ssm.sample(4, SeededRng(12))
    X = X.reshape(4, 1, 3, 1)
    rng = SeededRng(13)
    s0, xi = rng.standard_normal(2), rng.standard_normal((4, 2))
    g = latent_gradients(LatentTrajectory(s0, xi), X, None, model, 0.7)

    def f(z):
        return log_joint(LatentTrajectory(z[:2], z[2:].reshape(4, 2)), X, None, model, 0.7)

    rep = fd_gradcheck(f, np.concatenate([s0, xi.ravel()]), np.concatenate([g["s0"], g["xi"].ravel()]))
    assert rep.max_rel_error < 1e-6
