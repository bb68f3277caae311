"""On-disk formats and run configuration.

Binary layouts (all integers little-endian ``u32``):

* sequence file: ``b"DGSQ"``, version 1, ``T, H, W, C``, then ``T*H*W*C``
  float32 values in ``[-1, 1]``, frame-major then row-major;
* mask file: ``b"DGMK"``, version 1, ``T, H, W, C``, then one byte per value,
  1 = visible, 0 = occluded;
* frame dumps: binary PGM (``P5``, one channel) or PPM (``P6``, three
  channels), maxval 255.
"""
from __future__ import annotations

import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .inference import LangevinConfig
from .model import PRESETS, ModelConfig
from .trainer import VARIANTS, TrainConfig

SEQ_MAGIC = b"DGSQ"
MASK_MAGIC = b"DGMK"
FORMAT_VERSION = 1


class FormatError(ValueError):
    pass


class ConfigError(ValueError):
    def __init__(self, message, line=None, key=None):
        where = f"line {line}: " if line is not None else ""
        super().__init__(where + message)
        self.line = line
        self.key = key


def _write_header(f, magic, shape):
    f.write(magic)
    f.write(struct.pack("<5I", FORMAT_VERSION, *shape))


def _read_header(raw, magic, path):
    if len(raw) < 24 or raw[:4] != magic:
        raise FormatError(f"{path}: missing {magic.decode()} header")
    version, *shape = struct.unpack_from("<5I", raw, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    return tuple(shape)


def write_sequence(X, path) -> None:
    X = np.asarray(X)
    if X.ndim != 4:
        raise FormatError(f"sequence must be [T, H, W, C], got shape {X.shape}")
    data = X.astype("<f4")
    if not np.all(np.isfinite(data)) or np.abs(data).max(initial=0.0) > 1.0:
        raise FormatError("sequence values must be finite and lie in [-1, 1]")
    with open(path, "wb") as f:
        _write_header(f, SEQ_MAGIC, X.shape)
        f.write(data.tobytes())


def read_sequence(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    shape = _read_header(raw, SEQ_MAGIC, path)
    n = int(np.prod(shape))
    if len(raw) != 24 + 4 * n:
        raise FormatError(f"{path}: payload has {len(raw) - 24} bytes, header implies {4 * n}")
    X = np.frombuffer(raw, dtype="<f4", offset=24).reshape(shape).astype(np.float64)
    if not np.all(np.isfinite(X)) or np.abs(X).max(initial=0.0) > 1.0:
        raise FormatError(f"{path}: values outside [-1, 1]")
    return X


def write_mask(mask, path) -> None:
    mask = np.asarray(mask)
    if mask.ndim != 4:
        raise FormatError(f"mask must be [T, H, W, C], got shape {mask.shape}")
    with open(path, "wb") as f:
        _write_header(f, MASK_MAGIC, mask.shape)
        f.write(mask.astype(bool).astype(np.uint8).tobytes())


def read_mask(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    shape = _read_header(raw, MASK_MAGIC, path)
    n = int(np.prod(shape))
    if len(raw) != 24 + n:
        raise FormatError(f"{path}: payload has {len(raw) - 24} bytes, header implies {n}")
    body = np.frombuffer(raw, dtype=np.uint8, offset=24)
    if np.any(body > 1):
        raise FormatError(f"{path}: mask bytes must be 0 or 1")
    return body.reshape(shape).astype(bool)


# ---------------------------------------------------------------------------
# PGM / PPM


def to_bytes(frame) -> np.ndarray:
    """[-1, 1] -> {0..255}, rounding half to even."""
    v = np.rint((np.asarray(frame, dtype=np.float64) + 1.0) * 127.5)
    return np.clip(v, 0, 255).astype(np.uint8)


def from_bytes(img) -> np.ndarray:
    return np.asarray(img, dtype=np.float64) / 127.5 - 1.0


def write_pnm(img, path) -> None:
    img = np.asarray(img, dtype=np.uint8)
    if img.ndim == 2:
        img = img[..., None]
    h, w, c = img.shape
    if c not in (1, 3):
        raise FormatError(f"PGM/PPM needs 1 or 3 channels, got {c}")
    magic = b"P5" if c == 1 else b"P6"
    with open(path, "wb") as f:
        f.write(magic + f"\n{w} {h}\n255\n".encode("ascii"))
        f.write(img.tobytes())


_TOKEN = re.compile(rb"(?:\s+|#[^\n]*\n?)*([0-9]+)")


def read_pnm(path) -> np.ndarray:
    """Read a binary PGM/PPM (maxval 255) as ``[H, W, C]`` uint8."""
    raw = Path(path).read_bytes()
    magic = raw[:2]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"{path}: only binary PGM (P5) and PPM (P6) are supported")
    pos = 2
    vals = []
    for _ in range(3):
        m = _TOKEN.match(raw, pos)
        if not m:
            raise FormatError(f"{path}: malformed header")
        vals.append(int(m.group(1)))
        pos = m.end()
    w, h, maxval = vals
    if maxval != 255:
        raise FormatError(f"{path}: maxval must be 255, got {maxval}")
    pos += 1  # single whitespace byte before the raster
    c = 1 if magic == b"P5" else 3
    body = raw[pos : pos + w * h * c]
    if len(body) != w * h * c:
        raise FormatError(f"{path}: truncated raster")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, c)


def export_frames(X, directory) -> list[Path]:
    """One PGM/PPM per frame, named ``frame_00000.pgm`` etc."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    X = np.asarray(X)
    ext = "pgm" if X.shape[-1] == 1 else "ppm"
    paths = []
    for t, frame in enumerate(X):
        p = directory / f"frame_{t:05d}.{ext}"
        write_pnm(to_bytes(frame), p)
        paths.append(p)
    return paths


def import_frames(directory) -> np.ndarray:
    """Read every ``.pgm``/``.ppm`` in ``directory`` (sorted by name) as a sequence."""
    files = sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in (".pgm", ".ppm"))
    if not files:
        raise FormatError(f"{directory}: no PGM/PPM files")
    frames = [read_pnm(p) for p in files]
    shapes = {f.shape for f in frames}
    if len(shapes) != 1:
        raise FormatError(f"{directory}: frames have mixed dimensions {sorted(shapes)}")
    return from_bytes(np.stack(frames))


# ---------------------------------------------------------------------------
# run configuration


@dataclass
class SynthConfig:
    burn_in: int = 60
    length: int = 60


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    preset: str = "desk"
    explicit: frozenset = frozenset()  # keys present in the file

    @property
    def model_explicit(self) -> bool:
        return any(k.startswith("model.") for k in self.explicit)


def _shape(text):
    parts = [p for p in re.split(r"[x,\s]+", text.strip()) if p]
    if len(parts) != 3:
        raise ValueError("expected H x W x C")
    return tuple(int(p) for p in parts)


def _int_list(text):
    return tuple(int(p) for p in re.split(r"[,\s]+", text.strip()) if p)


def _bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError("expected a boolean")


def _choice(options):
    def parse(text):
        t = text.strip()
        if t not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return t

    return parse


# key -> (section, field, parser)
KEYS = {
    "model.d": ("model", "d", int),
    "model.d_noise": ("model", "d_noise", int),
    "model.d_appearance": ("model", "d_appearance", int),
    "model.d_motion": ("model", "d_motion", int),
    "model.decoder": ("model", "decoder", _choice(("mlp", "deconv"))),
    "model.frame_shape": ("model", "frame_shape", _shape),
    "model.preset": (None, "preset", _choice(tuple(PRESETS))),
    "model.encoder": ("model", "encoder", _choice(("none", "mlp", "conv"))),
    "model.transition_hidden": ("model", "transition_hidden", _int_list),
    "model.emission_hidden": ("model", "emission_hidden", _int_list),
    "model.linear_mode": ("model", "linear_mode", _bool),
    "langevin.delta": ("langevin", "step_size", float),
    "langevin.steps": ("langevin", "steps", int),
    "langevin.sigma": ("langevin", "sigma", float),
    "langevin.mh": ("langevin", "mh_correct", _bool),
    "train.iterations": ("train", "iterations", int),
    "train.lr": ("train", "learning_rate", float),
    "train.beta1": ("train", "adam_beta1", float),
    "train.beta2": ("train", "adam_beta2", float),
    "train.chunk": ("train", "chunk_length", int),
    "train.seed": ("train", "seed", int),
    "train.variant": ("train", "variant", _choice(VARIANTS)),
    "train.checkpoint_every": ("train", "checkpoint_every", int),
    "train.block_size": ("train", "block_size", int),
    "synth.burn_in": ("synth", "burn_in", int),
    "synth.length": ("synth", "length", int),
}


def parse_config(text: str) -> RunConfig:
    """Parse ``key = value`` lines (``#`` starts a comment).

    Keys may appear in any order; the model preset is applied first and the
    remaining keys override it.  Every problem is reported as a
    :class:`ConfigError` carrying the line number.
    """
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"expected 'key = value', got {body!r}", lineno)
        key, _, raw = body.partition("=")
        key, raw = key.strip(), raw.strip()
        if key not in KEYS:
            raise ConfigError(f"unknown key {key!r}", lineno, key)
        if key in values:
            raise ConfigError(f"duplicate key {key!r}", lineno, key)
        if not raw:
            raise ConfigError(f"missing value for {key!r}", lineno, key)
        try:
            values[key] = (KEYS[key][2](raw), lineno)
        except ValueError as exc:
            raise ConfigError(f"bad value {raw!r} for {key!r}: {exc}", lineno, key) from None

    explicit = frozenset(values)
    preset = values.pop("model.preset", ("desk", None))[0]
    sections = {"model": {}, "langevin": {}, "train": {}, "synth": {}}
    lines = {}
    for key, (val, lineno) in values.items():
        section, name, _ = KEYS[key]
        sections[section][name] = val
        lines[(section, name)] = (lineno, key)

    def build(section, factory, kw):
        try:
            return factory(**kw)
        except (TypeError, ValueError) as exc:
            found = sorted(lines[(section, k)] for k in kw if (section, k) in lines)
            lineno, key = found[0] if found else (None, None)
            raise ConfigError(f"invalid {section} settings{f' (near {key!r})' if key else ''}: {exc}", lineno, key) from None

    model = build("model", PRESETS[preset], sections["model"])
    langevin = build("langevin", LangevinConfig, sections["langevin"])
    # one sequence per inference block, so --threads has work to share
    sections["train"].setdefault("block_size", 1)
    train = build("train", lambda **kw: TrainConfig(langevin=langevin, **kw), sections["train"])
    synth = build("synth", SynthConfig, sections["synth"])
    if synth.burn_in < 0 or synth.length < 0:
        raise ConfigError("synth.burn_in and synth.length must be >= 0")
    return RunConfig(model=model, train=train, synth=synth, preset=preset, explicit=explicit)


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise ConfigError(f"{path} is not UTF-8 text: {exc}") from None
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror or exc}") from None
    return parse_config(text)


def dump_config(cfg: RunConfig) -> str:
    """Inverse of :func:`parse_config` for the keys it understands."""
    out = [f"model.preset = {cfg.preset}"]
    for key, (section, name, _) in KEYS.items():
        if section is None:
            continue
        obj = {"model": cfg.model, "langevin": cfg.train.langevin, "train": cfg.train, "synth": cfg.synth}[section]
        val = getattr(obj, name)
        if val is None:
            continue
        if isinstance(val, tuple):
            val = "x".join(map(str, val)) if name == "frame_shape" else ",".join(map(str, val))
        elif isinstance(val, bool):
            val = "true" if val else "false"
        if name == "emission_hidden" and not val:
            continue
        out.append(f"{key} = {val}")
    return "\n".join(out) + "\n"


__all__ = [n for n in dir() if not n.startswith("_") and n not in ("annotations", "dataclasses", "re", "struct")]
