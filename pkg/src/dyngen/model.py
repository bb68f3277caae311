"""Transition, emission and encoder networks of the dynamic generator.

State update::

    r_t = MLP(concat(s_{t-1}, xi_t, m))
    s_t = tanh(s_{t-1} + r_t)

Emission: ``x_t = G(concat(s_t, a))`` with a final ``tanh`` so frames live
in ``[-1, 1]``.  ``linear_mode`` drops every nonlinearity and the residual
wrapper (``s_t = r_t``); it exists only to compare against exact
linear-Gaussian oracles.
"""
from __future__ import annotations

import dataclasses
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .diffcore import DimensionError, Param, SeededRng, Tensor

DECODERS = ("mlp", "deconv")
ENCODERS = ("none", "mlp", "conv")


@dataclass
class ModelConfig:
    d: int = 10
    d_noise: int = 5
    d_appearance: int = 0
    d_motion: int = 0
    frame_shape: tuple = (16, 16, 1)
    decoder: str = "mlp"
    transition_hidden: tuple = (20, 20)
    transition_activation: str = "tanh"
    # mlp: hidden widths; deconv: channels of every layer but the last
    emission_hidden: tuple | None = None
    encoder: str = "none"
    encoder_hidden: tuple = (64,)
    encoder_channels: tuple = (64, 128, 256)
    encoder_kernels: tuple = (5, 3, 3)
    encoder_strides: tuple = (2, 2, 1)
    linear_mode: bool = False
    init_std: float = 0.02

    def __post_init__(self):
        self.frame_shape = tuple(int(v) for v in self.frame_shape)
        self.transition_hidden = tuple(self.transition_hidden)
        if self.emission_hidden is not None:
            self.emission_hidden = tuple(self.emission_hidden)
        for name in ("encoder_hidden", "encoder_channels", "encoder_kernels", "encoder_strides"):
            setattr(self, name, tuple(getattr(self, name)))
        if len(self.frame_shape) != 3 or min(self.frame_shape) < 1:
            raise ValueError(f"frame_shape must be (H, W, C) with positive entries, got {self.frame_shape}")
        if self.decoder not in DECODERS:
            raise ValueError(f"decoder must be one of {DECODERS}, got {self.decoder!r}")
        if self.encoder not in ENCODERS:
            raise ValueError(f"encoder must be one of {ENCODERS}, got {self.encoder!r}")
        if self.d < 1 or self.d_noise < 0 or self.d_appearance < 0 or self.d_motion < 0:
            raise ValueError("latent dimensions must be non-negative (d >= 1)")
        if self.decoder == "deconv":
            h, w, _ = self.frame_shape
            n = int(round(math.log2(h))) if h > 1 else 0
            if h != w or 2**n != h or n < 1:
                raise ValueError(f"deconv decoder needs square power-of-two frames, got {self.frame_shape}")
            if self.emission_hidden is not None and len(self.emission_hidden) != n - 1:
                raise ValueError(f"deconv decoder for {h}x{w} frames needs {n - 1} hidden channel counts")

    @property
    def frame_size(self) -> int:
        h, w, c = self.frame_shape
        return h * w * c

    @property
    def emission_widths(self) -> tuple:
        if self.emission_hidden is not None:
            return self.emission_hidden
        if self.decoder == "mlp":
            return (64,)
        n = int(round(math.log2(self.frame_shape[0])))
        return tuple(max(8, 2 ** (4 + n - 1 - i)) for i in range(n - 1))

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items() if k in names})


def desk_config(**overrides) -> ModelConfig:
    """Small configuration that trains in seconds on a laptop CPU."""
    return ModelConfig(**overrides)


def paper_config(**overrides) -> ModelConfig:
    """The 100-dim state / 64x64x3 deconvolution setup used for dynamic textures."""
    base = dict(
        d=100,
        d_noise=100,
        frame_shape=(64, 64, 3),
        decoder="deconv",
        transition_hidden=(20, 20),
        emission_hidden=(512, 512, 256, 128, 64),
    )
    base.update(overrides)
    return ModelConfig(**base)


PRESETS = {"desk": desk_config, "paper": paper_config}


class _Net:
    def __init__(self, prefix: str):
        self.prefix = prefix
        self._params: list[Param] = []

    def _param(self, name, value) -> Param:
        p = Param(value, f"{self.prefix}.{name}")
        self._params.append(p)
        return p

    def _affine_params(self, name, n_in, n_out, rng, std):
        W = self._param(f"{name}.W", std * rng.standard_normal((n_out, n_in)))
        b = self._param(f"{name}.b", np.zeros(n_out))
        return W, b

    def parameters(self) -> list[Param]:
        return list(self._params)


class TransitionNet(_Net):
    """Residual MLP ``s_t = tanh(s_{t-1} + MLP(s_{t-1}, xi_t, m))``."""

    def __init__(self, cfg: ModelConfig, rng: SeededRng):
        super().__init__("transition")
        self.d_state, self.d_noise, self.d_motion = cfg.d, cfg.d_noise, cfg.d_motion
        self.linear = cfg.linear_mode
        self.hidden_activation = "identity" if cfg.linear_mode else cfg.transition_activation
        widths = [cfg.d + cfg.d_noise + cfg.d_motion, *cfg.transition_hidden, cfg.d]
        self.layers = [
            self._affine_params(f"l{i}", n_in, n_out, rng, cfg.init_std)
            for i, (n_in, n_out) in enumerate(zip(widths[:-1], widths[1:]))
        ]

    @property
    def widths(self) -> list[int]:
        return [self.layers[0][0].shape[1]] + [W.shape[0] for W, _ in self.layers]

    def residual(self, s_prev: Tensor, xi_t: Tensor, m: Tensor | None = None) -> Tensor:
        parts = [s_prev, xi_t] + ([m] if m is not None else [])
        h = dc.concat(parts, axis=-1)
        if h.shape[-1] != self.layers[0][0].shape[1]:
            raise DimensionError(
                f"transition input width {h.shape[-1]} != expected {self.layers[0][0].shape[1]} "
                f"(s {s_prev.shape}, xi {xi_t.shape}, m {None if m is None else m.shape})"
            )
        last = len(self.layers) - 1
        for i, (W, b) in enumerate(self.layers):
            h = dc.affine(h, W, b)
            if i < last:
                h = dc.activation(h, self.hidden_activation)
        return h

    def __call__(self, s_prev, xi_t, m=None) -> Tensor:
        r = self.residual(s_prev, xi_t, m)
        if self.linear:
            return r
        return dc.activation(dc.add(s_prev, r), "tanh")


class EmissionNet(_Net):
    """Decoder from ``concat(s_t, a)`` to an ``H x W x C`` frame."""

    def __init__(self, cfg: ModelConfig, rng: SeededRng):
        super().__init__("emission")
        self.kind = cfg.decoder
        self.frame_shape = cfg.frame_shape
        self.d_in = cfg.d + cfg.d_appearance
        self.hidden_activation = "identity" if cfg.linear_mode else "relu"
        self.out_activation = "identity" if cfg.linear_mode else "tanh"
        std = cfg.init_std
        widths = cfg.emission_widths
        if self.kind == "mlp":
            dims = [self.d_in, *widths, cfg.frame_size]
            self.layers = [
                self._affine_params(f"l{i}", a, b, rng, std)
                for i, (a, b) in enumerate(zip(dims[:-1], dims[1:]))
            ]
            self.norms = []
        else:
            chans = [self.d_in, *widths, cfg.frame_shape[2]]
            self.layers = []
            self.norms = []
            for i, (cin, cout) in enumerate(zip(chans[:-1], chans[1:])):
                K = self._param(f"l{i}.K", std * rng.standard_normal((4, 4, cin, cout)))
                b = self._param(f"l{i}.b", np.zeros(cout))
                self.layers.append((K, b))
                if i < len(chans) - 2:
                    self.norms.append(
                        (self._param(f"l{i}.scale", np.ones(cout)), self._param(f"l{i}.shift", np.zeros(cout)))
                    )

    def __call__(self, s: Tensor, a: Tensor | None = None) -> Tensor:
        h = s if a is None else dc.concat([s, a], axis=-1)
        if h.shape[-1] != self.d_in:
            raise DimensionError(f"emission input width {h.shape[-1]} != expected {self.d_in}")
        lead = h.shape[:-1]
        last = len(self.layers) - 1
        if self.kind == "mlp":
            for i, (W, b) in enumerate(self.layers):
                h = dc.affine(h, W, b)
                if i < last:
                    h = dc.activation(h, self.hidden_activation)
            h = dc.activation(h, self.out_activation)
            return dc.reshape(h, lead + self.frame_shape)
        h = dc.reshape(h, lead + (1, 1, self.d_in))
        for i, (K, b) in enumerate(self.layers):
            h = dc.conv_transpose2d(h, K, b, stride=2, padding=1)
            if i < last:
                scale, shift = self.norms[i]
                h = dc.activation(dc.scale_shift(h, scale, shift), self.hidden_activation)
        return dc.activation(h, self.out_activation)


class EncoderNet(_Net):
    """Maps a conditioning frame to ``[s0, a]``."""

    def __init__(self, cfg: ModelConfig, rng: SeededRng):
        super().__init__("encoder")
        self.kind = cfg.encoder
        self.frame_shape = cfg.frame_shape
        self.d_state, self.d_appearance = cfg.d, cfg.d_appearance
        self.out_dim = cfg.d + cfg.d_appearance
        self.activation = "identity" if cfg.linear_mode else ("tanh" if cfg.encoder == "mlp" else "relu")
        std = cfg.init_std
        self.convs = []
        if self.kind == "conv":
            h, w, c = cfg.frame_shape
            for i, (cout, k, s) in enumerate(zip(cfg.encoder_channels, cfg.encoder_kernels, cfg.encoder_strides)):
                K = self._param(f"c{i}.K", std * rng.standard_normal((k, k, c, cout)))
                b = self._param(f"c{i}.b", np.zeros(cout))
                self.convs.append((K, b, s, k // 2))
                h = (h + 2 * (k // 2) - k) // s + 1
                w = (w + 2 * (k // 2) - k) // s + 1
                c = cout
            dims = [h * w * c, self.out_dim]
        else:
            dims = [cfg.frame_size, *cfg.encoder_hidden, self.out_dim]
        self.layers = [
            self._affine_params(f"l{i}", a, b, rng, std) for i, (a, b) in enumerate(zip(dims[:-1], dims[1:]))
        ]

    def __call__(self, x0: Tensor) -> Tensor:
        if tuple(x0.shape[-3:]) != self.frame_shape:
            raise DimensionError(f"encoder expects frames of shape {self.frame_shape}, got {x0.shape}")
        lead = x0.shape[:-3]
        h = x0
        for K, b, s, p in self.convs:
            h = dc.activation(dc.conv2d(h, K, b, stride=s, padding=p), self.activation)
        h = dc.reshape(h, lead + (-1,))
        last = len(self.layers) - 1
        for i, (W, b) in enumerate(self.layers):
            h = dc.affine(h, W, b)
            if i < last:
                h = dc.activation(h, self.activation)
        return h


class DynamicGenerator:
    """Bundle of transition, emission and (optionally) encoder networks."""

    def __init__(self, cfg: ModelConfig | None = None, seed: int = 0):
        self.cfg = cfg if cfg is not None else ModelConfig()
        rng = SeededRng(seed, (0xD6,))
        self.transition = TransitionNet(self.cfg, rng)
        self.emission = EmissionNet(self.cfg, rng)
        self.encoder = EncoderNet(self.cfg, rng) if self.cfg.encoder != "none" else None

    def parameters(self) -> list[Param]:
        ps = self.transition.parameters() + self.emission.parameters()
        if self.encoder is not None:
            ps += self.encoder.parameters()
        return ps

    def named_parameters(self) -> dict[str, Param]:
        return {p.name: p for p in self.parameters()}

    def zero_grad(self):
        dc.reset_grads(self.parameters())

    def copy(self) -> "DynamicGenerator":
        other = DynamicGenerator(self.cfg)
        for dst, src in zip(other.parameters(), self.parameters()):
            dst.data = src.data.copy()
        return other

    def flat_values(self) -> np.ndarray:
        return np.concatenate([p.data.ravel() for p in self.parameters()])

    def set_flat_values(self, flat):
        flat = np.asarray(flat, dtype=np.float64)
        i = 0
        for p in self.parameters():
            n = p.data.size
            p.data = flat[i : i + n].reshape(p.shape).copy()
            i += n
        if i != flat.size:
            raise DimensionError(f"expected {i} parameter values, got {flat.size}")

    def flat_grads(self) -> np.ndarray:
        return np.concatenate([p.grad.ravel() for p in self.parameters()])


@dataclass
class LatentTrajectory:
    """Latents of one sequence, or of a batch when arrays carry a leading axis.

    ``s0``: ``[..., d]``; ``xi``: ``[..., T, d_noise]``; ``a``: ``[..., d_a]``;
    ``m``: ``[..., d_m]``.
    """

    s0: np.ndarray
    xi: np.ndarray
    a: np.ndarray | None = None
    m: np.ndarray | None = None

    BLOCKS = ("s0", "xi", "a", "m")

    @property
    def T(self) -> int:
        return self.xi.shape[-2]

    def blocks(self) -> dict:
        return {k: getattr(self, k) for k in self.BLOCKS if getattr(self, k) is not None}

    def copy(self) -> "LatentTrajectory":
        return LatentTrajectory(**{k: None if v is None else np.array(v, copy=True) for k, v in self._items()})

    def _items(self):
        return [(k, getattr(self, k)) for k in self.BLOCKS]

    def replace(self, **kw) -> "LatentTrajectory":
        return dataclasses.replace(self, **kw)

    @classmethod
    def zeros(cls, cfg: ModelConfig, T: int, batch: tuple = ()) -> "LatentTrajectory":
        batch = tuple(batch)
        return cls(
            s0=np.zeros(batch + (cfg.d,)),
            xi=np.zeros(batch + (T, cfg.d_noise)),
            a=np.zeros(batch + (cfg.d_appearance,)) if cfg.d_appearance else None,
            m=np.zeros(batch + (cfg.d_motion,)) if cfg.d_motion else None,
        )

    @classmethod
    def from_prior(cls, cfg: ModelConfig, T: int, rng: SeededRng, batch: tuple = ()) -> "LatentTrajectory":
        batch = tuple(batch)
        return cls(
            s0=rng.standard_normal(batch + (cfg.d,)),
            xi=rng.standard_normal(batch + (T, cfg.d_noise)),
            a=rng.standard_normal(batch + (cfg.d_appearance,)) if cfg.d_appearance else None,
            m=rng.standard_normal(batch + (cfg.d_motion,)) if cfg.d_motion else None,
        )

    def check(self, cfg: ModelConfig):
        if self.s0.shape[-1] != cfg.d or self.xi.shape[-1] != cfg.d_noise:
            raise DimensionError(f"latents (s0 {self.s0.shape}, xi {self.xi.shape}) do not match d={cfg.d}, d_noise={cfg.d_noise}")
        if self.xi.shape[:-2] != self.s0.shape[:-1]:
            raise DimensionError(f"batch shape of xi {self.xi.shape} and s0 {self.s0.shape} differ")
        for name, dim in (("a", cfg.d_appearance), ("m", cfg.d_motion)):
            v = getattr(self, name)
            if dim and (v is None or v.shape[-1] != dim):
                raise DimensionError(f"latent {name} must have width {dim}")
            if not dim and v is not None:
                raise DimensionError(f"model has no {name} vector but latents carry one")


# ---------------------------------------------------------------------------
# differentiable building blocks


def transition_step(s_prev, xi_t, m, net: TransitionNet) -> Tensor:
    return net(dc.tensor(s_prev), dc.tensor(xi_t), None if m is None else dc.tensor(m))


def emit(s_t, a, net: EmissionNet) -> Tensor:
    return net(dc.tensor(s_t), None if a is None else dc.tensor(a))


def unroll(model: DynamicGenerator, s0: Tensor, xi: Tensor, a: Tensor | None = None, m: Tensor | None = None):
    """Graph-building rollout.

    Returns ``(frames, last_state)`` where frames has shape
    ``[..., T, H, W, C]``.  Gradients flow to whichever inputs require them.
    """
    T = xi.shape[-2]
    s = s0
    states = []
    for t in range(T):
        s = model.transition(s, dc.take(xi, (Ellipsis, t, slice(None))), m)
        states.append(s)
    lead = s0.shape[:-1]
    if T == 0:
        return dc.Tensor(np.zeros(lead + (0,) + model.cfg.frame_shape)), s0
    S = dc.stack(states, axis=-2)
    a_t = None
    if a is not None:
        a_t = dc.broadcast_to(dc.reshape(a, a.shape[:-1] + (1, a.shape[-1])), S.shape[:-1] + (a.shape[-1],))
    return model.emission(S, a_t), s


def rollout(latents: LatentTrajectory, model: DynamicGenerator) -> np.ndarray:
    """Deterministic frames ``H_theta(s0, xi, a, m)`` as a numpy array."""
    latents.check(model.cfg)
    frames, _ = unroll(
        model,
        dc.tensor(latents.s0),
        dc.tensor(latents.xi),
        None if latents.a is None else dc.tensor(latents.a),
        None if latents.m is None else dc.tensor(latents.m),
    )
    return frames.data


def encode(x0, net: EncoderNet) -> tuple[np.ndarray, np.ndarray]:
    """``(s0, a)`` for a conditioning frame (or a batch of them)."""
    out = net(dc.tensor(x0)).data
    return out[..., : net.d_state], out[..., net.d_state :]


def split_encoding(out: Tensor, d_state: int) -> tuple[Tensor, Tensor]:
    return dc.take(out, (Ellipsis, slice(0, d_state))), dc.take(out, (Ellipsis, slice(d_state, None)))


def synthesize(
    model: DynamicGenerator,
    rng: SeededRng,
    T: int,
    burn_in: int = 0,
    a=None,
    m=None,
    s0=None,
) -> np.ndarray:
    """Sample a fresh ``T``-frame sequence, discarding ``burn_in`` leading steps.

    Draw order is fixed: ``s0`` (unless given) then all ``burn_in + T``
    innovations in one call.
    """
    cfg = model.cfg
    if T < 0 or burn_in < 0:
        raise ValueError("T and burn_in must be non-negative")
    if s0 is None:
        s0 = rng.standard_normal(cfg.d)
    xi = rng.standard_normal((burn_in + T, cfg.d_noise))
    if cfg.d_appearance and a is None:
        a = np.zeros(cfg.d_appearance)
    if cfg.d_motion and m is None:
        m = np.zeros(cfg.d_motion)
    s = dc.tensor(s0)
    mt = None if m is None else dc.tensor(m)
    for t in range(burn_in):
        s = model.transition(s, dc.tensor(xi[t]), mt)
    lat = LatentTrajectory(s0=s.data, xi=xi[burn_in:], a=a, m=m)
    return rollout(lat, model)


# ---------------------------------------------------------------------------
# checkpoint file: b"DGMD", u32 version, u32 descriptor length, JSON
# descriptor, then every Param as float64 little-endian in declaration order

MODEL_MAGIC = b"DGMD"
MODEL_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_model(model: DynamicGenerator, path) -> None:
    desc = {
        "config": model.cfg.to_dict(),
        "params": [[p.name, list(p.shape)] for p in model.parameters()],
    }
    blob = json.dumps(desc, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MODEL_MAGIC)
        f.write(struct.pack("<II", MODEL_VERSION, len(blob)))
        f.write(blob)
        for p in model.parameters():
            f.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def load_model(path) -> DynamicGenerator:
    raw = Path(path).read_bytes()
    if raw[:4] != MODEL_MAGIC:
        raise CheckpointError(f"{path}: not a DGMD model file")
    version, n = struct.unpack_from("<II", raw, 4)
    if version != MODEL_VERSION:
        raise CheckpointError(f"{path}: unsupported model version {version}")
    desc = json.loads(raw[12 : 12 + n].decode("utf-8"))
    model = DynamicGenerator(ModelConfig.from_dict(desc["config"]))
    offset = 12 + n
    expected = [[p.name, list(p.shape)] for p in model.parameters()]
    if desc["params"] != expected:
        raise CheckpointError(f"{path}: parameter layout does not match its architecture descriptor")
    for p in model.parameters():
        size = p.data.size * 8
        if offset + size > len(raw):
            raise CheckpointError(f"{path}: truncated parameter payload")
        p.data = np.frombuffer(raw, dtype="<f8", count=p.data.size, offset=offset).astype(np.float64).reshape(p.shape)
        offset += size
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    return model
