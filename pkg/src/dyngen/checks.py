"""Finite-difference check of every gradient the learner relies on.

A random tiny instance (model, latents, data, mask) is drawn; the log joint
is viewed as one scalar function of all free latent blocks and all
parameters, and the analytic gradients (the Langevin gradient for the
latents, the learning gradient for the parameters) are compared with
central differences.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffcore import SeededRng
from .inference import latent_gradients, log_joint
from .model import DynamicGenerator, LatentTrajectory, ModelConfig, encode
from .oracles import fd_gradcheck
from .synthetic import planted_model
from .trainer import VARIANTS, _variant_blocks, param_gradients


@dataclass
class Instance:
    model: DynamicGenerator
    latents: LatentTrajectory
    X: np.ndarray
    mask: np.ndarray
    sigma: float
    variant: str
    frozen: set
    x0: np.ndarray | None = None
    enc_blocks: set = field(default_factory=set)


@dataclass
class GradcheckResult:
    worst: float
    worst_block: str
    per_block: dict  # block or parameter name -> max relative error
    variant: str

    def ok(self, tol: float = 1e-5) -> bool:
        return self.worst < tol


def random_instance(seed: int, variant: str | None = None) -> Instance:
    """Draw a tiny problem: d <= 4, d_noise <= 3, T <= 6, frames <= 4x4x1, two sequences."""
    rng = SeededRng(seed, (0x6C,))
    u = rng.uniform(12)
    pick = lambda k, lo, hi: lo + int(u[k] * (hi - lo + 1))  # noqa: E731
    if variant is None:
        variant = VARIANTS[pick(0, 0, len(VARIANTS) - 1)]
    d, dn, T = pick(1, 1, 4), pick(2, 1, 3), pick(3, 1, 6)
    decoder = "deconv" if u[4] < 0.5 else "mlp"
    side = 4 if decoder == "deconv" else pick(5, 1, 4)
    da = pick(6, 1, 3) if variant != "plain" else 0
    dm = pick(7, 1, 2) if variant == "appearance+motion" else 0
    encoder = "none"
    if variant == "conditional-encoder":
        encoder = "conv" if u[8] < 0.5 and side == 4 else "mlp"
        da = pick(6, 0, 3)
    cfg = ModelConfig(
        d=d,
        d_noise=dn,
        d_appearance=da,
        d_motion=dm,
        frame_shape=(side, side, 1),
        decoder=decoder,
        transition_hidden=(5,),
        emission_hidden=(6,) if decoder == "mlp" else (3,),
        encoder=encoder,
        encoder_hidden=(5,),
        encoder_channels=(2, 3),
        encoder_kernels=(3, 3),
        encoder_strides=(2, 1),
    )
    model = planted_model(cfg, seed=seed, gain=1.0)
    for p in model.parameters():
        p.data = p.data + 0.1 * rng.standard_normal(p.shape)
    n = 2
    lat = LatentTrajectory.from_prior(cfg, T, rng, batch=(n,))
    X = np.tanh(rng.standard_normal((n, T) + cfg.frame_shape))
    mask = rng.uniform(X.size).reshape(X.shape) < 0.7
    sigma = 0.5 + u[9]
    zero, enc = _variant_blocks(variant, cfg)
    frozen = set(zero)
    x0 = None
    if variant == "conditional-encoder":
        x0 = np.tanh(rng.standard_normal((n,) + cfg.frame_shape))
    elif u[10] < 0.3:
        frozen.add("s0")  # as for a chunk after the first
    for name in zero:
        if getattr(lat, name) is not None:
            setattr(lat, name, np.zeros_like(getattr(lat, name)))
    return Instance(model, lat, X, mask, sigma, variant, frozen, x0, enc)


def _with_encoder(inst: Instance, model: DynamicGenerator, lat: LatentTrajectory) -> LatentTrajectory:
    if inst.x0 is None:
        return lat
    s0, a = encode(inst.x0, model.encoder)
    lat = lat.copy()
    lat.s0 = s0
    if lat.a is not None:
        lat.a = a
    return lat


def check_instance(inst: Instance, h: float = 1e-5, corrupt: float = 0.0) -> GradcheckResult:
    """Compare analytic and numeric gradients on ``inst``.

    ``corrupt`` is added to one analytic parameter-gradient entry; it exists
    to exercise the failure path.
    """
    model = inst.model
    frozen = inst.frozen | inst.enc_blocks
    free = [b for b in LatentTrajectory.BLOCKS if getattr(inst.latents, b) is not None and b not in frozen]
    params = model.parameters()

    lat = _with_encoder(inst, model, inst.latents)
    lg = latent_gradients(lat, inst.X, inst.mask, model, inst.sigma, frozen)
    pg = param_gradients(lat, inst.X, inst.mask, model, inst.sigma, inst.frozen, inst.x0, inst.enc_blocks)
    analytic = [lg[b].ravel() for b in free] + [pg[p.name].ravel() for p in params]
    names = free + [p.name for p in params]
    sizes = [a.size for a in analytic]
    grad = np.concatenate(analytic)
    if corrupt and grad.size:
        grad = grad.copy()
        grad[len(grad) - 1] += corrupt

    point = np.concatenate([getattr(inst.latents, b).ravel() for b in free] + [model.flat_values()])
    n_lat = sum(sizes[: len(free)])
    probe = model.copy()

    def f(v):
        cur = inst.latents.copy()
        off = 0
        for b in free:
            arr = getattr(cur, b)
            setattr(cur, b, v[off : off + arr.size].reshape(arr.shape))
            off += arr.size
        probe.set_flat_values(v[n_lat:])
        cur = _with_encoder(inst, probe, cur)
        return log_joint(cur, inst.X, inst.mask, probe, inst.sigma, frozen)

    report = fd_gradcheck(f, point, grad, h=h)
    err = np.abs(grad - report.numeric_grad) / np.maximum(
        np.maximum(np.abs(grad), np.abs(report.numeric_grad)), 1e-3
    )
    per_block, off = {}, 0
    for name, k in zip(names, sizes):
        per_block[name] = float(err[off : off + k].max()) if k else 0.0
        off += k
    worst = max(per_block, key=per_block.get) if per_block else ""
    return GradcheckResult(per_block.get(worst, 0.0), worst, per_block, inst.variant)


def gradcheck_suite(n: int = 50, seed: int = 0, corrupt: float = 0.0) -> list[GradcheckResult]:
    """Run :func:`check_instance` on ``n`` instances cycling through every variant."""
    out = []
    for i in range(n):
        inst = random_instance(seed * 100003 + i, VARIANTS[i % len(VARIANTS)])
        out.append(check_instance(inst, corrupt=corrupt))
    return out
