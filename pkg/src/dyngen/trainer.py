"""Alternating back-propagation through time.

Each learning iteration walks the (non-overlapping) time chunks in order.
For every chunk it first samples the chunk's latents by warm-started
Langevin dynamics with the parameters held fixed, then takes one Adam
ascent step on the parameters with the sampled latents held fixed.  The
state reached at the end of a chunk seeds the next chunk as a constant, so
gradients never cross a chunk boundary.

Sequences are split into fixed blocks.  Inference runs block by block
(optionally on a thread pool); every block owns its random stream and the
parameter gradient is reduced in block order, so results do not depend on
the number of threads.
"""
from __future__ import annotations

import csv
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import DimensionError, SeededRng
from .inference import LangevinConfig, build_objective, langevin_run, save_latents
from .model import (
    DynamicGenerator,
    LatentTrajectory,
    ModelConfig,
    encode,
    rollout,
    save_model,
    split_encoding,
)

VARIANTS = ("plain", "appearance", "appearance+motion", "conditional-encoder")
METRICS_HEADER = ("iter", "log_joint", "recon_err_visible", "recon_err_occluded", "wallclock_ms")

# [-1, 1] -> [0, 255]
PIXEL_SCALE = 127.5


@dataclass
class TrainConfig:
    iterations: int = 1000
    langevin: LangevinConfig = field(default_factory=LangevinConfig)
    learning_rate: float = 0.002
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    chunk_length: int | None = 30
    seed: int = 0
    checkpoint_every: int = 0
    variant: str = "plain"
    block_size: int = 0  # sequences per inference block; 0 = one block
    threads: int = 1
    record_wallclock: bool = False

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.chunk_length is not None and self.chunk_length < 1:
            raise ValueError("chunk_length must be >= 1")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.block_size < 0 or self.threads < 1:
            raise ValueError("block_size must be >= 0 and threads >= 1")


@dataclass
class MetricsRow:
    iter: int
    log_joint: float
    recon_err_visible: float
    recon_err_occluded: float | None = None
    wallclock_ms: float | None = None

    def as_csv(self) -> list[str]:
        def fmt(v):
            return "" if v is None else repr(float(v))

        return [str(self.iter), fmt(self.log_joint), fmt(self.recon_err_visible),
                fmt(self.recon_err_occluded), fmt(self.wallclock_ms)]


@dataclass
class TrainState:
    model: DynamicGenerator
    cfg: TrainConfig
    latents: LatentTrajectory
    adam_m: dict
    adam_v: dict
    adam_steps: int = 0
    k: int = 0
    carried: list = field(default_factory=list)
    rngs: list = field(default_factory=list)
    blocks: list = field(default_factory=list)

    @property
    def variant(self) -> str:
        return self.cfg.variant


def write_metrics_csv(rows, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for r in rows:
            w.writerow(r.as_csv())


def per_pixel_error(a, b, mask=None) -> float:
    """Mean absolute difference on the [0, 255] intensity scale."""
    diff = np.abs(np.asarray(a) - np.asarray(b))
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            return float("nan")
        diff = diff[mask]
    return float(diff.mean() * PIXEL_SCALE)


# ---------------------------------------------------------------------------
# learning step pieces


def _variant_blocks(variant: str, mcfg: ModelConfig) -> tuple[set, set]:
    """(blocks pinned at zero, blocks produced by the encoder)."""
    zero, enc = set(), set()
    if variant == "conditional-encoder":
        if mcfg.encoder == "none":
            raise ValueError("conditional-encoder variant needs a model with an encoder")
        enc = {"s0", "a"}
    if variant in ("plain",):
        zero |= {"a", "m"}
    if variant == "appearance":
        if not mcfg.d_appearance:
            raise ValueError("appearance variant needs d_appearance > 0")
        zero |= {"m"}
    if variant == "appearance+motion" and not (mcfg.d_appearance and mcfg.d_motion):
        raise ValueError("appearance+motion variant needs d_appearance > 0 and d_motion > 0")
    return zero, enc


def _learning_pass(model, latents, X, mask, sigma, frozen, x0=None, encoder_blocks=()):
    """Build the objective with live parameters and back-propagate into them.

    Returns ``(per_sequence_log_joint, frames, last_state)``; parameter
    gradients are accumulated into ``Param.grad``.
    """
    overrides = {}
    if x0 is not None and encoder_blocks:
        s0_enc, a_enc = split_encoding(model.encoder(dc.tensor(x0)), model.cfg.d)
        if "s0" in encoder_blocks:
            overrides["s0"] = s0_enc
        if "a" in encoder_blocks and model.cfg.d_appearance:
            overrides["a"] = a_enc
    per_seq, frames, last, _ = build_objective(model, latents, X, mask, sigma, frozen, overrides)
    # latent leaves get gradients too; they are discarded here
    dc.backward(dc.total(per_seq))
    return np.asarray(per_seq.data), frames.data, last.data


def param_gradients(latents, X, mask, model: DynamicGenerator, sigma: float = 1.0, frozen=(),
                    x0=None, encoder_blocks=("s0", "a")) -> dict:
    """Gradient of the summed log joint w.r.t. every parameter, by name.

    ``latents`` may carry a leading sequence axis; the result is the sum of
    the per-sequence gradients.  With ``x0`` the blocks in ``encoder_blocks``
    are computed by the encoder, and the gradient reaches its parameters.
    """
    X = np.asarray(X, dtype=np.float64)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        X = np.where(mask, X, 0.0)
        mask = mask.astype(np.float64)
    model.zero_grad()
    _learning_pass(model, latents, X, mask, sigma, frozen, x0, encoder_blocks if x0 is not None else ())
    return {p.name: p.grad.copy() for p in model.parameters()}


def adam_update(state: TrainState, grads: dict) -> TrainState:
    """One bias-corrected Adam ascent step on the log joint."""
    cfg = state.cfg
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in parameter block {name!r}")
    state.adam_steps += 1
    t = state.adam_steps
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    for p in state.model.parameters():
        g = grads[p.name]
        m = state.adam_m[p.name]
        v = state.adam_v[p.name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        p.data = p.data + cfg.learning_rate * mhat / (np.sqrt(vhat) + cfg.adam_eps)
    return state


# ---------------------------------------------------------------------------
# dataset handling


def _prepare(dataset, mcfg: ModelConfig, conditional: bool):
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    Xs, Ms = [], []
    for i, item in enumerate(dataset):
        X, M = item if isinstance(item, tuple) else (item, None)
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 4 or X.shape[1:] != mcfg.frame_shape:
            raise DimensionError(f"sequence {i}: frames {X.shape[1:]} do not match model frame shape {mcfg.frame_shape}")
        M = np.ones(X.shape, dtype=bool) if M is None else np.asarray(M).astype(bool)
        if M.shape != X.shape:
            raise DimensionError(f"sequence {i}: mask shape {M.shape} != data shape {X.shape}")
        if not M.any():
            raise ValueError(f"sequence {i} has no visible pixels")
        if conditional and not M[0].all():
            raise ValueError(f"sequence {i}: the conditioning frame must be fully visible")
        Xs.append(X)
        Ms.append(M)
    lengths = {x.shape[0] for x in Xs}
    if len(lengths) != 1:
        raise DimensionError(f"all sequences must share one length, got {sorted(lengths)}")
    X = np.stack(Xs)
    M = np.stack(Ms)
    return np.where(M, X, 0.0), M


def _chunks(T: int, length: int | None):
    if length is None or length >= T:
        return [(0, T)]
    return [(t0, min(t0 + length, T)) for t0 in range(0, T, length)]


def _blocks(n: int, size: int):
    size = n if size <= 0 else size
    return [np.arange(i, min(i + size, n)) for i in range(0, n, size)]


def _subset(lat: LatentTrajectory, idx, t0=None, t1=None) -> LatentTrajectory:
    xi = lat.xi[idx] if t0 is None else lat.xi[idx, t0:t1]
    return LatentTrajectory(
        s0=lat.s0[idx],
        xi=xi,
        a=None if lat.a is None else lat.a[idx],
        m=None if lat.m is None else lat.m[idx],
    )


def init_state(dataset_size: int, T: int, model: DynamicGenerator, cfg: TrainConfig) -> TrainState:
    zero, _ = _variant_blocks(cfg.variant, model.cfg)
    root = SeededRng(cfg.seed)
    lat = LatentTrajectory.from_prior(model.cfg, T, root.spawn(1), batch=(dataset_size,))
    for name in zero:
        if getattr(lat, name) is not None:
            setattr(lat, name, np.zeros_like(getattr(lat, name)))
    blocks = _blocks(dataset_size, cfg.block_size)
    return TrainState(
        model=model,
        cfg=cfg,
        latents=lat,
        adam_m={p.name: np.zeros(p.shape) for p in model.parameters()},
        adam_v={p.name: np.zeros(p.shape) for p in model.parameters()},
        rngs=[root.spawn(2, b) for b in range(len(blocks))],
        blocks=blocks,
    )


def train(
    dataset,
    cfg: TrainConfig,
    model: DynamicGenerator | ModelConfig | None = None,
    *,
    ground_truth=None,
    state: TrainState | None = None,
    checkpoint_dir=None,
    callback=None,
):
    """Fit the model by alternating Langevin inference and Adam learning.

    Parameters
    ----------
    dataset : list of ``X`` or ``(X, mask)`` pairs
        ``X`` is ``[T, H, W, C]`` in ``[-1, 1]``; ``mask`` is boolean, True
        where the pixel is observed.  Occluded pixels are never read.  In
        the conditional-encoder variant frame 0 is the conditioning image
        and frames ``1..T`` are the targets.
    cfg : TrainConfig
    model : DynamicGenerator or ModelConfig, optional
        A config builds a fresh model seeded from ``cfg.seed``.
    ground_truth : array ``[n, T, H, W, C]``, optional
        Used only to report the occluded-pixel error.
    state : TrainState, optional
        Resume from an earlier run (warm-start latents, moments, streams).

    Returns
    -------
    (TrainState, list[MetricsRow])
    """
    if state is not None:
        model = state.model
    elif model is None:
        model = DynamicGenerator(ModelConfig(), seed=cfg.seed)
    elif isinstance(model, ModelConfig):
        model = DynamicGenerator(model, seed=cfg.seed)
    mcfg = model.cfg
    conditional = cfg.variant == "conditional-encoder"
    zero, enc = _variant_blocks(cfg.variant, mcfg)
    X, M = _prepare(dataset, mcfg, conditional)
    if conditional:
        x0 = X[:, 0]
        X, M = X[:, 1:], M[:, 1:]
    else:
        x0 = None
    n, T = X.shape[:2]
    Mf = M.astype(np.float64)
    if ground_truth is not None:
        gt = np.asarray(ground_truth, dtype=np.float64)
        gt = gt[:, 1:] if conditional else gt
        if gt.shape != X.shape:
            raise DimensionError(f"ground truth shape {gt.shape} != data shape {X.shape}")
    else:
        gt = None

    if state is None:
        state = init_state(n, T, model, cfg)
    else:
        state.cfg = cfg
    lat = state.latents
    if lat.xi.shape[:2] != (n, T):
        raise DimensionError("resumed latents do not match the dataset")
    chunks = _chunks(T, cfg.chunk_length)
    sigma = cfg.langevin.sigma
    pool = ThreadPoolExecutor(cfg.threads) if cfg.threads > 1 and len(state.blocks) > 1 else None
    rows = []
    start = time.perf_counter()
    try:
        for _ in range(cfg.iterations):
            lj_total = 0.0
            recon = np.zeros(X.shape)
            carried = None
            state.carried = []
            for c, (t0, t1) in enumerate(chunks):
                frozen = set(zero) | enc
                if c > 0:
                    frozen.add("s0")
                base = _subset(lat, slice(None), t0, t1)
                if c > 0:
                    base.s0 = carried
                if conditional:
                    s0_e, a_e = encode(x0, model.encoder)
                    if c == 0:
                        base.s0 = s0_e
                    if base.a is not None:
                        base.a = a_e
                Xc, Mc = X[:, t0:t1], Mf[:, t0:t1]

                def infer(b):
                    idx = state.blocks[b]
                    return langevin_run(
                        _subset(base, idx), Xc[idx], Mc[idx], model, cfg.langevin, state.rngs[b], frozen
                    )

                if pool is not None:
                    samples = list(pool.map(infer, range(len(state.blocks))))
                else:
                    samples = [infer(b) for b in range(len(state.blocks))]
                for idx, smp in zip(state.blocks, samples):
                    lat.xi[idx, t0:t1] = smp.latents.xi
                    base.xi[idx] = smp.latents.xi
                    for name in ("s0", "a", "m"):
                        if name not in frozen and getattr(lat, name) is not None:
                            getattr(lat, name)[idx] = getattr(smp.latents, name)
                            getattr(base, name)[idx] = getattr(smp.latents, name)

                model.zero_grad()
                ends = np.empty((n, mcfg.d))
                for idx in state.blocks:
                    per_seq, frames, last = _learning_pass(
                        model,
                        _subset(base, idx),
                        Xc[idx],
                        Mc[idx],
                        sigma,
                        frozen,
                        None if x0 is None else x0[idx],
                        (enc if c == 0 else enc - {"s0"}) if conditional else (),
                    )
                    lj_total += float(per_seq.sum())
                    recon[idx, t0:t1] = frames
                    ends[idx] = last
                grads = {p.name: p.grad for p in model.parameters()}
                adam_update(state, grads)
                carried = ends
                state.carried.append(ends.copy())

            state.k += 1
            err_vis = per_pixel_error(recon, X, M)
            err_occ = None
            if gt is not None and not M.all():
                err_occ = per_pixel_error(recon, gt, ~M)
            wall = (time.perf_counter() - start) * 1e3 if cfg.record_wallclock else None
            row = MetricsRow(state.k, lj_total, err_vis, err_occ, wall)
            rows.append(row)
            if callback is not None:
                callback(state, row)
            if checkpoint_dir is not None and cfg.checkpoint_every and state.k % cfg.checkpoint_every == 0:
                save_checkpoint(state, checkpoint_dir, tag=f"{state.k:06d}")
    finally:
        if pool is not None:
            pool.shutdown()
    return state, rows


def save_checkpoint(state: TrainState, directory, tag: str = "final") -> tuple:
    from pathlib import Path

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    mpath = directory / f"model_{tag}.dgmd"
    lpath = directory / f"latents_{tag}.dglt"
    save_model(state.model, mpath)
    save_latents(state.latents, lpath)
    return mpath, lpath


# ---------------------------------------------------------------------------
# uses of a trained model


def reconstruct(state: TrainState, x0=None) -> np.ndarray:
    """``G(s_t)`` for every training sequence under the current latents and parameters."""
    lat = state.latents.copy()
    if state.variant == "conditional-encoder":
        if x0 is None:
            raise ValueError("conditional reconstruction needs the conditioning frames")
        s0, a = encode(x0, state.model.encoder)
        lat.s0 = s0
        if lat.a is not None:
            lat.a = a
    return rollout(lat, state.model)


def recover(X_masked, mask, model, cfg: TrainConfig, ground_truth=None, composite: bool = False):
    """Fill occluded pixels by learning the model on the masked data alone.

    ``model`` is a :class:`ModelConfig` (fresh model) or a trained
    :class:`DynamicGenerator` (copied, then fine-tuned).  ``X_masked`` is a
    single ``[T, H, W, C]`` sequence or a stack ``[n, T, H, W, C]``.
    Returns the reconstruction ``G(s_t)``; with ``composite`` the visible
    pixels are copied from the input instead.
    """
    X = np.asarray(X_masked, dtype=np.float64)
    mask = np.asarray(mask).astype(bool)
    single = X.ndim == 4
    if single:
        X, mask = X[None], mask[None]
    if mask.shape != X.shape:
        raise DimensionError(f"mask shape {mask.shape} != data shape {X.shape}")
    for i in range(X.shape[0]):
        if not mask[i].any():
            raise ValueError(f"sequence {i} is entirely occluded")
    if isinstance(model, DynamicGenerator):
        model = model.copy()
    gt = None if ground_truth is None else np.asarray(ground_truth).reshape(X.shape)
    state, _ = train(list(zip(X, mask)), cfg, model, ground_truth=gt)
    out = reconstruct(state)
    if composite:
        out = np.where(mask, X, out)
    return out[0] if single else out


def animate(x0, model_or_state, T: int, rng: SeededRng) -> np.ndarray:
    """Predict ``T`` frames from a still image with a conditionally trained model."""
    if isinstance(model_or_state, TrainState):
        if model_or_state.variant != "conditional-encoder":
            raise ValueError("animate needs a model trained with the conditional-encoder variant")
        model = model_or_state.model
    else:
        model = model_or_state
    if model.encoder is None:
        raise ValueError("animate needs a model with an encoder (conditional-encoder training)")
    s0, a = encode(np.asarray(x0, dtype=np.float64), model.encoder)
    cfg = model.cfg
    xi = rng.standard_normal((T, cfg.d_noise))
    lat = LatentTrajectory(
        s0=s0,
        xi=xi,
        a=a if cfg.d_appearance else None,
        m=np.zeros(cfg.d_motion) if cfg.d_motion else None,
    )
    return rollout(lat, model)


def interpolate_appearance(a1, a2, steps: int, model: DynamicGenerator, xi, s0, m=None) -> list:
    """Videos for ``a = (1 - lam) a1 + lam a2`` on a uniform grid, sharing ``xi`` and ``s0``."""
    a1 = np.asarray(a1, dtype=np.float64)
    a2 = np.asarray(a2, dtype=np.float64)
    if a1.shape != a2.shape:
        raise DimensionError(f"appearance vectors differ in shape: {a1.shape} vs {a2.shape}")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if model.cfg.d_motion and m is None:
        m = np.zeros(model.cfg.d_motion)
    out = []
    for k, lam in enumerate(np.linspace(0.0, 1.0, steps)):
        # this form keeps a1 == a2 and the midpoint of (a, -a) exact
        a = a2.copy() if k == steps - 1 and steps > 1 else a1 + lam * (a2 - a1)
        out.append(rollout(LatentTrajectory(s0=np.asarray(s0, float), xi=np.asarray(xi, float), a=a, m=m), model))
    return out
