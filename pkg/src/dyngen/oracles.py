"""Reference computations used to check the learned model and its sampler.

* exact posterior of a linear-Gaussian state-space model, by Kalman
  filtering plus Rauch-Tung-Striebel smoothing, and by a dense solve;
* the classical linear dynamic-texture baseline (PCA + AR(1));
* a central finite-difference gradient checker.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .diffcore import SeededRng
from .model import DynamicGenerator, ModelConfig


@dataclass
class LinearSSM:
    """``s_t = A s_{t-1} + B xi_t``, ``x_t = C s_t + sigma * eps_t``, ``s0, xi_t ~ N(0, I)``."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    sigma: float = 1.0

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=np.float64))
        self.B = np.atleast_2d(np.asarray(self.B, dtype=np.float64))
        self.C = np.atleast_2d(np.asarray(self.C, dtype=np.float64))
        d = self.A.shape[0]
        if self.A.shape != (d, d) or self.B.shape[0] != d or self.C.shape[1] != d:
            raise ValueError(f"inconsistent shapes A {self.A.shape}, B {self.B.shape}, C {self.C.shape}")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        for name in ("A", "B", "C"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} has non-finite entries")

    @property
    def d(self) -> int:
        return self.A.shape[0]

    @property
    def d_noise(self) -> int:
        return self.B.shape[1]

    @property
    def D(self) -> int:
        return self.C.shape[0]

    def states(self, s0, xi) -> np.ndarray:
        s = np.asarray(s0, dtype=np.float64)
        out = []
        for x in np.asarray(xi, dtype=np.float64):
            s = self.A @ s + self.B @ x
            out.append(s)
        return np.array(out).reshape(len(out), self.d)

    def mean_frames(self, s0, xi) -> np.ndarray:
        return self.states(s0, xi) @ self.C.T

    def sample(self, T: int, rng: SeededRng):
        """``(X, s0, xi)`` with ``X`` of shape ``[T, D]``."""
        s0 = rng.standard_normal(self.d)
        xi = rng.standard_normal((T, self.d_noise))
        X = self.mean_frames(s0, xi) + self.sigma * rng.standard_normal((T, self.D))
        return X, s0, xi


def random_stable_ssm(d, d_noise, D, sigma, rng: SeededRng, radius: float = 0.9) -> LinearSSM:
    """Random model whose transition matrix has spectral radius ``radius``."""
    A = rng.standard_normal((d, d))
    A *= radius / max(np.abs(np.linalg.eigvals(A)).max(), 1e-12)
    B = 0.5 * rng.standard_normal((d, d_noise))
    C = rng.standard_normal((D, d))
    return LinearSSM(A, B, C, sigma)


def linear_generator(ssm: LinearSSM) -> DynamicGenerator:
    """A ``linear_mode`` dynamic generator that reproduces ``ssm`` exactly.

    Frames are laid out as ``1 x D x 1`` images.
    """
    cfg = ModelConfig(
        d=ssm.d,
        d_noise=ssm.d_noise,
        frame_shape=(1, ssm.D, 1),
        decoder="mlp",
        transition_hidden=(),
        emission_hidden=(),
        linear_mode=True,
    )
    model = DynamicGenerator(cfg)
    (W, b), = model.transition.layers
    W.data = np.hstack([ssm.A, ssm.B])
    b.data = np.zeros(ssm.d)
    (Wc, bc), = model.emission.layers
    Wc.data = ssm.C.copy()
    bc.data = np.zeros(ssm.D)
    return model


@dataclass
class SmootherResult:
    s0_mean: np.ndarray
    s0_cov: np.ndarray
    xi_mean: np.ndarray  # [T, d_noise]
    xi_cov: np.ndarray  # [T, d_noise, d_noise]
    state_mean: np.ndarray  # [T + 1, d], index 0 is s0
    state_cov: np.ndarray

    @property
    def mean(self) -> np.ndarray:
        """Posterior mean of the stacked vector ``(s0, xi_1, ..., xi_T)``."""
        return np.concatenate([self.s0_mean, self.xi_mean.ravel()])

    @property
    def marginal_variances(self) -> np.ndarray:
        return np.concatenate([np.diag(self.s0_cov), np.diagonal(self.xi_cov, axis1=1, axis2=2).ravel()])


def kalman_smoother(model: LinearSSM, X) -> SmootherResult:
    """Exact posterior of ``(s0, xi_1..T)`` given fully observed ``X`` (``[T, D]``).

    Forward filter and RTS backward pass over the states ``s_0..s_T``, with
    lag-one smoothed cross-covariances.  The innovations follow from the
    smoothed pairs: ``B xi_t = s_t - A s_{t-1} =: delta_t``, and with
    ``xi_t ~ N(0, I)`` a priori, ``xi_t | delta_t`` has mean ``B^+ delta_t`` and
    covariance ``I - B^+ B``.
    """
    X = np.asarray(X, dtype=np.float64).reshape(len(X), -1)
    T = X.shape[0]
    if T < 1:
        raise ValueError("need at least one observation")
    if X.shape[1] != model.D:
        raise ValueError(f"observation width {X.shape[1]} != D={model.D}")
    A, B, C = model.A, model.B, model.C
    d = model.d
    Q = B @ B.T
    R = model.sigma**2 * np.eye(model.D)

    mf = np.zeros((T + 1, d))  # filtered
    Pf = np.zeros((T + 1, d, d))
    mp = np.zeros((T + 1, d))  # predicted
    Pp = np.zeros((T + 1, d, d))
    Pf[0] = np.eye(d)
    for t in range(1, T + 1):
        mp[t] = A @ mf[t - 1]
        Pp[t] = A @ Pf[t - 1] @ A.T + Q
        S = C @ Pp[t] @ C.T + R
        K = np.linalg.solve(S, C @ Pp[t]).T
        mf[t] = mp[t] + K @ (X[t - 1] - C @ mp[t])
        Pf[t] = Pp[t] - K @ S @ K.T
        Pf[t] = 0.5 * (Pf[t] + Pf[t].T)

    ms = mf.copy()
    Ps = Pf.copy()
    cross = np.zeros((T + 1, d, d))  # cross[t] = Cov(s_t, s_{t-1} | X)
    for t in range(T - 1, -1, -1):
        try:
            J = np.linalg.solve(Pp[t + 1], A @ Pf[t]).T
        except np.linalg.LinAlgError as exc:
            raise np.linalg.LinAlgError(f"singular predicted covariance at t={t + 1}: {exc}") from None
        ms[t] = mf[t] + J @ (ms[t + 1] - mp[t + 1])
        Ps[t] = Pf[t] + J @ (Ps[t + 1] - Pp[t + 1]) @ J.T
        Ps[t] = 0.5 * (Ps[t] + Ps[t].T)
        cross[t + 1] = Ps[t + 1] @ J.T

    Bp = np.linalg.pinv(B)
    resid_cov = np.eye(model.d_noise) - Bp @ B
    xi_mean = np.zeros((T, model.d_noise))
    xi_cov = np.zeros((T, model.d_noise, model.d_noise))
    for t in range(1, T + 1):
        dm = ms[t] - A @ ms[t - 1]
        dP = Ps[t] - cross[t] @ A.T - A @ cross[t].T + A @ Ps[t - 1] @ A.T
        xi_mean[t - 1] = Bp @ dm
        xi_cov[t - 1] = Bp @ dP @ Bp.T + resid_cov
    return SmootherResult(ms[0], Ps[0], xi_mean, xi_cov, ms, Ps)


def dense_posterior(model: LinearSSM, X, max_dim: int = 60):
    """Brute-force Gaussian posterior of ``z = (s0, xi_1..T)``.

    Builds the linear map ``X_mean = J z`` by stacking the generative
    equations and solves ``(I + J^T J / sigma^2) mu = J^T x / sigma^2``.
    Returns ``(mean, covariance)``.
    """
    X = np.asarray(X, dtype=np.float64).reshape(len(X), -1)
    T = X.shape[0]
    d, dn, D = model.d, model.d_noise, model.D
    n = d + T * dn
    if n > max_dim:
        raise ValueError(f"dense oracle limited to {max_dim} latent dimensions, got {n}")
    # state map: s_t = M_t z
    M = np.zeros((d, n))
    M[:, :d] = np.eye(d)
    J = np.zeros((T * D, n))
    for t in range(T):
        M = model.A @ M
        M[:, d + t * dn : d + (t + 1) * dn] += model.B
        J[t * D : (t + 1) * D] = model.C @ M
    prec = np.eye(n) + J.T @ J / model.sigma**2
    cov = np.linalg.inv(prec)
    mean = cov @ (J.T @ X.ravel()) / model.sigma**2
    return mean, cov


# ---------------------------------------------------------------------------
# linear dynamic texture baseline


@dataclass
class LdsModel:
    C: np.ndarray  # [D, d], orthonormal columns
    A: np.ndarray  # [d, d]
    Q: np.ndarray  # innovation covariance [d, d]
    mean_frame: np.ndarray  # [D]
    frame_shape: tuple
    states: np.ndarray  # fitted states [T, d]
    residuals: np.ndarray  # AR(1) residuals [T - 1, d]
    singular_values: np.ndarray

    @property
    def d(self) -> int:
        return self.C.shape[1]


def lds_fit(X, d: int) -> LdsModel:
    """Fit the PCA + first-order autoregressive dynamic texture model.

    ``X`` is ``[T, ...]``; each frame is flattened.  ``C`` is the top-``d``
    left singular vectors of the centred frame matrix, the states are the
    projections onto them and ``A`` is the least-squares AR(1) fit.
    """
    X = np.asarray(X, dtype=np.float64)
    T = X.shape[0]
    if T <= d:
        raise ValueError(f"need more frames than state dimensions (T={T}, d={d})")
    Y = X.reshape(T, -1).T  # [D, T]
    if d > Y.shape[0]:
        raise ValueError(f"state dimension {d} exceeds frame size {Y.shape[0]}")
    mean = Y.mean(axis=1)
    Yc = Y - mean[:, None]
    U, S, _ = np.linalg.svd(Yc, full_matrices=False)
    C = U[:, :d]
    states = (C.T @ Yc).T  # [T, d]
    S0, S1 = states[:-1], states[1:]
    if np.allclose(S0, 0.0, atol=1e-12 * max(1.0, np.abs(Y).max())):
        warnings.warn("sequence is constant after centering; using A = 0", RuntimeWarning, stacklevel=2)
        A = np.zeros((d, d))
    else:
        At, *_ = np.linalg.lstsq(S0, S1, rcond=None)
        A = At.T
    V = S1 - S0 @ A.T
    Q = V.T @ V / max(T - 1, 1)
    return LdsModel(C, A, Q, mean, X.shape[1:], states, V, S)


def lds_reconstruct(model: LdsModel, X) -> np.ndarray:
    """Project frames onto the fitted subspace and map back."""
    X = np.asarray(X, dtype=np.float64)
    Y = X.reshape(len(X), -1) - model.mean_frame
    return (Y @ model.C @ model.C.T + model.mean_frame).reshape(X.shape)


def _cov_sqrt(Q):
    w, V = np.linalg.eigh(0.5 * (Q + Q.T))
    return V * np.sqrt(np.clip(w, 0.0, None))


def lds_synthesize(model: LdsModel, T: int, rng: SeededRng, s0=None, innovations=None) -> np.ndarray:
    """Run the AR(1) state forward and emit ``C s_t + mean``.

    Frame 0 is emitted from ``s0`` (default: the first fitted state); later
    states add an innovation, drawn from ``N(0, Q)`` unless supplied.
    """
    s = model.states[0].copy() if s0 is None else np.asarray(s0, dtype=np.float64).copy()
    if innovations is None:
        L = _cov_sqrt(model.Q)
        innovations = rng.standard_normal((max(T - 1, 0), model.d)) @ L.T
    innovations = np.asarray(innovations, dtype=np.float64)
    if T > 1 and innovations.shape != (T - 1, model.d):
        raise ValueError(f"need {T - 1} innovations of width {model.d}, got {innovations.shape}")
    frames = np.empty((T, model.C.shape[0]))
    for t in range(T):
        if t > 0:
            s = model.A @ s + innovations[t - 1]
        frames[t] = model.C @ s + model.mean_frame
    return frames.reshape((T,) + tuple(model.frame_shape))


# ---------------------------------------------------------------------------
# finite differences


@dataclass
class GradcheckReport:
    max_rel_error: float
    worst_index: int
    analytic: float
    numeric: float
    numeric_grad: np.ndarray

    def ok(self, tol: float) -> bool:
        return self.max_rel_error < tol


def fd_gradcheck(f, point, analytic_grad, h: float = 1e-5, floor: float = 1e-3) -> GradcheckReport:
    """Compare ``analytic_grad`` with central differences of ``f`` at ``point``.

    The error of coordinate ``i`` is ``|a_i - n_i| / max(|a_i|, |n_i|, floor)``:
    relative for ordinary entries, absolute below ``floor`` where round-off
    in the difference quotient dominates any relative measure.
    """
    x = np.array(point, dtype=np.float64).ravel()
    a = np.asarray(analytic_grad, dtype=np.float64).ravel()
    if a.shape != x.shape:
        raise ValueError(f"gradient has {a.size} entries, point has {x.size}")
    num = np.empty_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        fp, fm = f(xp), f(xm)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"f is not finite near coordinate {i}")
        num[i] = (fp - fm) / (2 * h)
    if x.size == 0:
        return GradcheckReport(0.0, -1, 0.0, 0.0, num)
    err = np.abs(a - num) / np.maximum(np.maximum(np.abs(a), np.abs(num)), floor)
    i = int(np.argmax(err))
    return GradcheckReport(float(err[i]), i, float(a[i]), float(num[i]), num)


@dataclass
class OracleComparison:
    rmse: float
    max_var_rel_error: float
    sample_mean: np.ndarray
    sample_var: np.ndarray
    exact: SmootherResult
    acceptance_rate: float = float("nan")


def compare_langevin_to_smoother(
    ssm: LinearSSM,
    X,
    step_size: float = 0.01,
    steps: int = 20000,
    burn_in: int = 5000,
    chains: int = 500,
    seed: int = 0,
    mh_correct: bool = False,
) -> OracleComparison:
    """Long-run Langevin statistics of ``(s0, xi)`` versus the exact posterior.

    ``chains`` independent chains (a batch of copies of ``X``) start from
    prior draws; after ``burn_in`` steps the running mean and variance are
    pooled over chains and the following ``steps`` iterations.
    """
    from .inference import LangevinConfig, iterate_langevin
    from .model import LatentTrajectory

    model = linear_generator(ssm)
    X = np.asarray(X, dtype=np.float64).reshape(len(X), -1)
    T = X.shape[0]
    frames = np.broadcast_to(X.reshape((1, T) + model.cfg.frame_shape), (chains, T) + model.cfg.frame_shape)
    rng = SeededRng(seed, (0x0AC,))
    lat = LatentTrajectory.from_prior(model.cfg, T, rng, batch=(chains,))
    cfg = LangevinConfig(step_size=step_size, steps=burn_in + steps, sigma=ssm.sigma, mh_correct=mh_correct)
    n = ssm.d + T * ssm.d_noise
    total = np.zeros(n)
    total_sq = np.zeros(n)
    accepted = 0
    exact = kalman_smoother(ssm, X)
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            for it, cur, _, acc in iterate_langevin(lat, frames, None, model, cfg, rng):
                accepted += acc
                if it <= burn_in:
                    continue
                z = np.concatenate([cur.s0, cur.xi.reshape(chains, -1)], axis=1)
                total += z.sum(axis=0)
                total_sq += (z * z).sum(axis=0)
    except FloatingPointError:
        nan = np.full(n, np.nan)
        return OracleComparison(float("inf"), float("inf"), nan, nan, exact)
    count = steps * chains
    mean = total / count
    var = total_sq / count - mean**2
    rmse = float(np.sqrt(np.mean((mean - exact.mean) ** 2)))
    var_err = float(np.max(np.abs(var - exact.marginal_variances) / exact.marginal_variances))
    rate = accepted / ((burn_in + steps) * chains) if mh_correct else float("nan")
    return OracleComparison(rmse, var_err, mean, var, exact, rate)


@dataclass
class ScalarCheck:
    acceptance_rate: float
    variance: float
    exact_variance: float
    mean: float
    exact_mean: float

    @property
    def variance_rel_error(self) -> float:
        return abs(self.variance - self.exact_variance) / self.exact_variance


def scalar_linear_target(gain: float = 1.5, sigma: float = 0.5, x: float = 0.8):
    """One-frame, one-pixel linear model ``x = gain * xi + sigma * eps``.

    ``s0`` is held at zero (frozen), so the only free latent is the scalar
    ``xi_1``; its posterior is Gaussian with precision ``1 + gain^2 / sigma^2``.
    Returns ``(ssm, X, exact_mean, exact_variance)``.
    """
    ssm = LinearSSM(np.zeros((1, 1)), np.ones((1, 1)), np.full((1, 1), gain), sigma)
    prec = 1.0 + gain**2 / sigma**2
    return ssm, np.array([[x]]), gain * x / sigma**2 / prec, 1.0 / prec


def stationary_check(
    step_size: float = 0.001,
    steps: int = 1000,
    chains: int = 20000,
    mh_correct: bool = True,
    seed: int = 0,
    **target,
) -> ScalarCheck:
    """Does the (optionally Metropolis-adjusted) Langevin kernel keep the scalar posterior?

    At small step sizes a chain moves very slowly, so rather than waiting
    for it to forget its start, the chains start from exact posterior draws
    and the question is whether ``steps`` kernel applications leave the
    distribution in place.  Mean and variance pool all chains and steps.
    """
    from .inference import LangevinConfig, iterate_langevin
    from .model import LatentTrajectory

    ssm, X, mu, var = scalar_linear_target(**target)
    model = linear_generator(ssm)
    rng = SeededRng(seed, (0x5CA,))
    lat = LatentTrajectory(
        s0=np.zeros((chains, 1)),
        xi=mu + np.sqrt(var) * rng.standard_normal((chains, 1, 1)),
    )
    frames = np.broadcast_to(X.reshape(1, 1, 1, 1, 1), (chains, 1, 1, 1, 1))
    cfg = LangevinConfig(step_size=step_size, steps=steps, sigma=ssm.sigma, mh_correct=mh_correct)
    total = total_sq = 0.0
    accepted = 0
    for _, cur, _, acc in iterate_langevin(lat, frames, None, model, cfg, rng, frozen=("s0",)):
        accepted += acc
        total += cur.xi.sum()
        total_sq += (cur.xi**2).sum()
    n = steps * chains
    m = total / n
    rate = accepted / n if mh_correct else float("nan")
    return ScalarCheck(rate, total_sq / n - m * m, var, m, mu)
