"""Posterior sampling of latents by Langevin dynamics, with gradients from BPTT.

The target is the complete-data log density (constants dropped)::

    L = -1/(2 sigma^2) sum_t ||mask_t * (x_t - G(s_t, a))||^2
        - 1/2 (||xi||^2 + ||s0||^2 + ||a||^2 + ||m||^2)

Prior terms appear only for blocks that are actually sampled.  A block is
*frozen* when its value is supplied from outside (a carried chunk-boundary
state, or the encoder output in the conditional model); frozen blocks are
held fixed and contribute no prior term.

All functions accept a leading batch axis on every latent block.  Sequences
in a batch are independent, so one backward pass of the summed objective
yields every sequence's own gradient.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .diffcore import DimensionError, SeededRng
from .model import DynamicGenerator, LatentTrajectory, unroll

BLOCKS = LatentTrajectory.BLOCKS


class InferenceError(FloatingPointError):
    """Raised when the log density stops being finite during a Langevin run."""

    def __init__(self, message, iteration):
        super().__init__(f"{message} (Langevin iteration {iteration})")
        self.iteration = iteration


@dataclass
class LangevinConfig:
    step_size: float = 0.03
    steps: int = 15
    sigma: float = 1.0
    mh_correct: bool = False
    block_step: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.step_size >= 0:
            raise ValueError(f"step_size must be >= 0, got {self.step_size}")
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if not self.sigma > 0:
            raise ValueError(f"sigma must be > 0, got {self.sigma}")
        unknown = set(self.block_step) - set(BLOCKS)
        if unknown:
            raise ValueError(f"unknown latent blocks in block_step: {sorted(unknown)}")

    def delta(self, block: str) -> float:
        return float(self.block_step.get(block, self.step_size))


@dataclass
class PosteriorSample:
    latents: LatentTrajectory
    log_joint: float
    per_sequence: np.ndarray = None
    accept_count: int = 0
    proposals: int = 0

    @property
    def acceptance_rate(self) -> float:
        return self.accept_count / self.proposals if self.proposals else float("nan")


def _check_data(latents: LatentTrajectory, X, mask, model: DynamicGenerator):
    latents.check(model.cfg)
    X = np.asarray(X, dtype=np.float64)
    lead = latents.s0.shape[:-1]
    want = lead + (latents.T,) + model.cfg.frame_shape
    if X.shape != want:
        raise DimensionError(f"data shape {X.shape} does not match latents/model shape {want}")
    if mask is None:
        return X, None
    mask = np.asarray(mask)
    if mask.shape != X.shape:
        raise DimensionError(f"mask shape {mask.shape} != data shape {X.shape}")
    mask = mask.astype(bool)
    return np.where(mask, X, 0.0), mask.astype(np.float64)


def build_objective(
    model: DynamicGenerator,
    latents: LatentTrajectory,
    X: np.ndarray,
    mask: np.ndarray | None,
    sigma: float,
    frozen=(),
    overrides: dict | None = None,
):
    """Build the graph of the per-sequence log joint.

    ``X`` and ``mask`` must already be validated (see :func:`_check_data`).
    ``overrides`` maps block names to graph tensors (e.g. encoder outputs)
    used in place of the stored values; overridden blocks are not free.

    Returns ``(per_sequence, frames, last_state, leaves)``.
    """
    overrides = overrides or {}
    leaves = {}
    ins = {}
    for name in BLOCKS:
        if name in overrides:
            ins[name] = overrides[name]
            continue
        value = getattr(latents, name)
        if value is None:
            ins[name] = None
        elif name in frozen:
            ins[name] = dc.tensor(value)
        else:
            leaves[name] = ins[name] = dc.leaf(value)
    frames, last = unroll(model, ins["s0"], ins["xi"], ins["a"], ins["m"])
    nb = latents.s0.ndim - 1
    resid = dc.sub(dc.tensor(X), frames)
    if mask is not None:
        resid = dc.mul(resid, dc.tensor(mask))
    terms = [dc.mul(dc.sum_squares(resid, keep=nb), -0.5 / sigma**2)]
    for name, t in leaves.items():
        terms.append(dc.mul(dc.sum_squares(t, keep=nb), -0.5))
    per_seq = terms[0]
    for t in terms[1:]:
        per_seq = dc.add(per_seq, t)
    return per_seq, frames, last, leaves


def _evaluate(model, latents, X, mask, sigma, frozen, need_grad=True):
    with dc.frozen_params():
        per_seq, _, _, leaves = build_objective(model, latents, X, mask, sigma, frozen)
        grads = None
        if need_grad:
            dc.backward(dc.total(per_seq))
            grads = {
                k: (t.grad if t.grad is not None else np.zeros(t.shape)) for k, t in leaves.items()
            }
    return np.asarray(per_seq.data, dtype=np.float64), grads


def log_joint(latents, X, mask, model, sigma: float = 1.0, frozen=()) -> float:
    """Complete-data log density summed over the batch (constants dropped)."""
    X, mask = _check_data(latents, X, mask, model)
    per_seq, _ = _evaluate(model, latents, X, mask, sigma, frozen, need_grad=False)
    return float(per_seq.sum())


def latent_gradients(latents, X, mask, model, sigma: float = 1.0, frozen=()) -> dict:
    """Exact gradients of :func:`log_joint` w.r.t. every free latent block.

    Each ``xi_t`` receives contributions from frames ``t, t+1, ..., T``:
    ``xi_t`` enters ``s_t`` directly, so frame ``t`` itself counts.
    """
    X, mask = _check_data(latents, X, mask, model)
    _, grads = _evaluate(model, latents, X, mask, sigma, frozen)
    return grads


def langevin_step(latents: LatentTrajectory, grads: dict, cfg: LangevinConfig, rng: SeededRng) -> LatentTrajectory:
    """``z <- z + delta^2/2 * grad + delta * noise`` on every block in ``grads``.

    Noise is drawn block by block in the fixed order ``s0, xi, a, m``.
    """
    new = latents.copy()
    for name in BLOCKS:
        if name not in grads:
            continue
        old = getattr(latents, name)
        delta = cfg.delta(name)
        z = rng.standard_normal(old.shape)
        setattr(new, name, old + 0.5 * delta * delta * grads[name] + delta * z)
    return new


def _sq_norm_per_seq(v, nb):
    return np.sum(v * v, axis=tuple(range(nb, v.ndim))) if v.ndim > nb else v * v


def iterate_langevin(
    latents: LatentTrajectory,
    X,
    mask,
    model: DynamicGenerator,
    cfg: LangevinConfig,
    rng: SeededRng,
    frozen=(),
    steps: int | None = None,
):
    """Generator over Langevin iterations; yields ``(iteration, latents, per_sequence_log_joint, n_accepted)``.

    ``steps`` defaults to ``cfg.steps``.  With ``cfg.mh_correct`` each move
    is a Metropolis-adjusted proposal accepted per sequence, using the
    exact Gaussian proposal densities in both directions.
    """
    X, mask = _check_data(latents, X, mask, model)
    steps = cfg.steps if steps is None else steps
    sigma = cfg.sigma
    nb = latents.s0.ndim - 1
    cur = latents.copy()
    lp, g = _evaluate(model, cur, X, mask, sigma, frozen, need_grad=steps > 0)
    _check_finite(lp, 0)
    for it in range(steps):
        if not cfg.mh_correct:
            cur = langevin_step(cur, g, cfg, rng)
            lp, g = _evaluate(model, cur, X, mask, sigma, frozen, need_grad=it + 1 < steps)
            _check_finite(lp, it + 1)
            yield it + 1, cur, lp, lp.size
            continue
        prop = langevin_step(cur, g, cfg, rng)
        lp_new, g_new = _evaluate(model, prop, X, mask, sigma, frozen)
        log_q_fwd = np.zeros_like(lp)
        log_q_rev = np.zeros_like(lp)
        for name in g:
            d2 = cfg.delta(name) ** 2
            if d2 == 0:
                continue
            x, y = getattr(cur, name), getattr(prop, name)
            log_q_fwd -= _sq_norm_per_seq(y - x - 0.5 * d2 * g[name], nb) / (2 * d2)
            log_q_rev -= _sq_norm_per_seq(x - y - 0.5 * d2 * g_new[name], nb) / (2 * d2)
        with np.errstate(over="ignore", invalid="ignore"):
            log_alpha = np.where(np.isfinite(lp_new), lp_new - lp + log_q_rev - log_q_fwd, -np.inf)
        u = rng.uniform(max(1, lp.size)).reshape(lp.shape)
        acc = np.log(u) < log_alpha
        cur = cur.copy()
        for name in g:
            keep = acc.reshape(acc.shape + (1,) * (getattr(cur, name).ndim - nb))
            setattr(cur, name, np.where(keep, getattr(prop, name), getattr(cur, name)))
            g[name] = np.where(keep, g_new[name], g[name])
        lp = np.where(acc, lp_new, lp)
        _check_finite(lp, it + 1)
        yield it + 1, cur, lp, int(np.count_nonzero(acc))
    if steps == 0:
        yield 0, cur, lp, 0


def langevin_run(
    latents: LatentTrajectory,
    X,
    mask,
    model: DynamicGenerator,
    cfg: LangevinConfig,
    rng: SeededRng,
    frozen=(),
) -> PosteriorSample:
    """Run ``cfg.steps`` Langevin iterations starting from ``latents`` (warm start)."""
    accepted = 0
    cur, lp = latents.copy(), None
    for _, cur, lp, acc in iterate_langevin(latents, X, mask, model, cfg, rng, frozen):
        accepted += acc
    proposals = cfg.steps * lp.size if cfg.mh_correct else 0
    return PosteriorSample(cur, float(lp.sum()), lp, accepted if cfg.mh_correct else 0, proposals)


def _check_finite(per_seq, iteration):
    if not np.all(np.isfinite(per_seq)):
        raise InferenceError("log joint is not finite", iteration)


# ---------------------------------------------------------------------------
# latent store: b"DGLT", u32 version, u32 n, u32 T, d, d_noise, d_a, d_m,
# then per sequence s0, xi, a, m as float64 little-endian

LATENT_MAGIC = b"DGLT"
LATENT_VERSION = 1


def save_latents(latents: LatentTrajectory, path) -> None:
    """Write a batch of latents (leading axis = sequence) to a DGLT file."""
    s0 = np.atleast_2d(latents.s0)
    xi = latents.xi if latents.xi.ndim == 3 else latents.xi[None]
    n, T, dn = xi.shape
    a = None if latents.a is None else np.atleast_2d(latents.a)
    m = None if latents.m is None else np.atleast_2d(latents.m)
    da = 0 if a is None else a.shape[1]
    dm = 0 if m is None else m.shape[1]
    with open(path, "wb") as f:
        f.write(LATENT_MAGIC)
        f.write(struct.pack("<7I", LATENT_VERSION, n, T, s0.shape[1], dn, da, dm))
        for i in range(n):
            parts = [s0[i], xi[i].ravel()]
            if a is not None:
                parts.append(a[i])
            if m is not None:
                parts.append(m[i])
            f.write(np.concatenate(parts).astype("<f8").tobytes())


def load_latents(path) -> LatentTrajectory:
    raw = Path(path).read_bytes()
    if raw[:4] != LATENT_MAGIC:
        raise ValueError(f"{path}: not a DGLT latent file")
    version, n, T, d, dn, da, dm = struct.unpack_from("<7I", raw, 4)
    if version != LATENT_VERSION:
        raise ValueError(f"{path}: unsupported latent file version {version}")
    per = d + T * dn + da + dm
    body = np.frombuffer(raw, dtype="<f8", offset=32)
    if body.size != n * per:
        raise ValueError(f"{path}: expected {n * per} values, found {body.size}")
    body = body.astype(np.float64).reshape(n, per)
    cut = np.cumsum([d, T * dn, da])
    return LatentTrajectory(
        s0=body[:, : cut[0]].copy(),
        xi=body[:, cut[0] : cut[1]].reshape(n, T, dn).copy(),
        a=body[:, cut[1] : cut[2]].copy() if da else None,
        m=body[:, cut[2] :].copy() if dm else None,
    )
