"""Command-line entry points.

Exit codes: 0 success, 1 a check failed (or the run diverged), 2 malformed
configuration, 3 unreadable or mismatched data/checkpoint.
"""
from __future__ import annotations

import argparse
import glob
import os
import sys
from pathlib import Path

import numpy as np

from . import io
from .checks import gradcheck_suite
from .diffcore import DimensionError, SeededRng
from .inference import InferenceError, load_latents, save_latents
from .model import CheckpointError, DynamicGenerator, load_model, save_model, synthesize
from .oracles import compare_langevin_to_smoother, random_stable_ssm
from .trainer import animate, interpolate_appearance, recover, train, write_metrics_csv

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_DATA = 0, 1, 2, 3


class DataError(Exception):
    pass


def _threads(args) -> int:
    if args.threads is not None:
        return args.threads
    env = os.environ.get("DGEN_THREADS", "").strip()
    if not env:
        return 1
    try:
        n = int(env)
    except ValueError:
        raise io.ConfigError(f"DGEN_THREADS must be a positive integer, got {env!r}") from None
    if n < 1:
        raise io.ConfigError(f"DGEN_THREADS must be a positive integer, got {env!r}")
    return n


def _config(args) -> io.RunConfig:
    cfg = io.load_config(args.config) if getattr(args, "config", None) else io.parse_config("")
    cfg.train.threads = _threads(args)
    return cfg


def _seed(args, cfg) -> int:
    return cfg.train.seed if getattr(args, "seed", None) is None else args.seed


def _write_output(X, out: Path, stem: str) -> None:
    io.write_sequence(np.clip(X, -1.0, 1.0), out / f"{stem}.dgsq")
    io.export_frames(np.clip(X, -1.0, 1.0), out / stem)


def _load_checkpoint(path, cfg: io.RunConfig | None = None) -> DynamicGenerator:
    model = load_model(path)
    if cfg is not None and cfg.model_explicit:
        want, have = cfg.model, model.cfg
        for name in ("d", "d_noise", "d_appearance", "d_motion", "frame_shape", "decoder"):
            if getattr(want, name) != getattr(have, name):
                raise DataError(
                    f"checkpoint {path} has {name}={getattr(have, name)!r}, config says {getattr(want, name)!r}"
                )
    return model


def _read_seq(path) -> np.ndarray:
    try:
        return io.read_sequence(path)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror or exc}") from None


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    cfg = _config(args)
    files = sorted(glob.glob(args.data))
    if not files:
        raise DataError(f"no data files match {args.data!r}")
    masks = {}
    if args.mask:
        mfiles = sorted(glob.glob(args.mask))
        masks = {Path(p).stem: p for p in mfiles}
        stems = [Path(p).stem for p in files]
        if sorted(masks) != sorted(stems) or len(mfiles) != len(files):
            raise DataError("mask files must pair one-to-one with data files by filename stem")
    dataset = []
    for p in files:
        X = _read_seq(p)
        if p and Path(p).stem in masks:
            M = io.read_mask(masks[Path(p).stem])
            if M.shape != X.shape:
                raise DataError(f"mask {masks[Path(p).stem]} has shape {M.shape}, data {p} has {X.shape}")
            dataset.append((X, M))
        else:
            dataset.append(X)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "checkpoints" if cfg.train.checkpoint_every else None
    state, rows = train(dataset, cfg.train, cfg.model, checkpoint_dir=ckpt)
    save_model(state.model, out / "model.dgmd")
    save_latents(state.latents, out / "latents.dglt")
    write_metrics_csv(rows, out / "metrics.csv")
    if rows:
        print(f"trained {len(rows)} iterations; final visible error {rows[-1].recon_err_visible:.3f}")
    return EXIT_OK


def cmd_synthesize(args) -> int:
    cfg = _config(args)
    model = _load_checkpoint(args.checkpoint, cfg if args.config else None)
    rng = SeededRng(_seed(args, cfg), (0x5E,))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for k in range(args.count):
        r = rng.spawn(k)
        mc = model.cfg
        a = r.standard_normal(mc.d_appearance) if mc.d_appearance else None
        m = r.standard_normal(mc.d_motion) if mc.d_motion else None
        X = synthesize(model, r, cfg.synth.length, burn_in=cfg.synth.burn_in, a=a, m=m)
        _write_output(X, out, f"synth_{k:03d}")
    print(f"wrote {args.count} sequence(s) to {out}")
    return EXIT_OK


def cmd_recover(args) -> int:
    cfg = _config(args)
    cfg.train.seed = _seed(args, cfg)
    X = _read_seq(args.data)
    M = io.read_mask(args.mask)
    if M.shape != X.shape:
        raise DataError(f"mask shape {M.shape} != data shape {X.shape}")
    if args.checkpoint:
        model = _load_checkpoint(args.checkpoint, cfg if args.config else None)
        if model.cfg.frame_shape != X.shape[1:]:
            raise DataError(f"checkpoint frames {model.cfg.frame_shape} != data frames {X.shape[1:]}")
    else:
        model = cfg.model
        if model.frame_shape != X.shape[1:]:
            raise DataError(f"config frames {model.frame_shape} != data frames {X.shape[1:]}")
    if not M.any():
        raise DataError("mask hides every pixel")
    rec = recover(X, M, model, cfg.train)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_output(np.where(M, X, rec), out, "recovered")
    _write_output(rec, out, "reconstruction")
    print(f"recovered {int((~M).sum())} occluded values into {out}")
    return EXIT_OK


def _first_frame(path) -> np.ndarray:
    p = Path(path)
    if p.suffix.lower() in (".pgm", ".ppm"):
        try:
            return io.from_bytes(io.read_pnm(p))
        except OSError as exc:
            raise DataError(f"cannot read {p}: {exc}") from None
    return _read_seq(p)[0]


def cmd_animate(args) -> int:
    cfg = _config(args)
    model = _load_checkpoint(args.checkpoint, cfg if args.config else None)
    x0 = _first_frame(args.frame)
    if x0.shape != model.cfg.frame_shape:
        raise DataError(f"frame shape {x0.shape} != model frame shape {model.cfg.frame_shape}")
    if model.encoder is None:
        raise DataError(f"checkpoint {args.checkpoint} has no encoder; train with the conditional-encoder variant")
    T = cfg.synth.length if args.length is None else args.length
    X = animate(x0, model, T, SeededRng(_seed(args, cfg), (0xA1,)))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_output(np.concatenate([x0[None], X]), out, "animated")
    print(f"wrote {T} predicted frames after the input frame to {out}")
    return EXIT_OK


def cmd_interpolate(args) -> int:
    model = _load_checkpoint(args.checkpoint)
    try:
        lat = load_latents(args.latents)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read latents {args.latents}: {exc}") from None
    n = lat.s0.shape[0]
    if lat.a is None or not model.cfg.d_appearance:
        raise DataError("interpolation needs appearance vectors (d_appearance > 0)")
    if lat.s0.shape[1] != model.cfg.d or lat.a.shape[1] != model.cfg.d_appearance:
        raise DataError("latents do not match the checkpoint dimensions")
    for k in (args.i, args.j):
        if not 0 <= k < n:
            raise DataError(f"sequence index {k} out of range (have {n})")
    if args.steps < 1:
        raise io.ConfigError("--steps must be >= 1")
    m = None if lat.m is None else lat.m[args.i]
    videos = interpolate_appearance(lat.a[args.i], lat.a[args.j], args.steps, model, lat.xi[args.i], lat.s0[args.i], m)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for k, X in enumerate(videos):
        _write_output(X, out, f"interp_{k:03d}")
    print(f"wrote {len(videos)} interpolated sequence(s) to {out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.config:
        _config(args)  # validate only; the instances are random tiny models
    results = gradcheck_suite(args.instances, seed=args.seed or 0, corrupt=args.corrupt_gradient)
    worst = max(results, key=lambda r: r.worst)
    print(f"gradcheck: {len(results)} instance(s), worst relative error {worst.worst:.3e} "
          f"in {worst.worst_block} ({worst.variant})")
    return EXIT_OK if worst.ok(1e-5) else EXIT_CHECK


def cmd_oracle_compare(args) -> int:
    cfg = _config(args)
    seed = _seed(args, cfg)
    delta = cfg.train.langevin.step_size if "langevin.delta" in cfg.explicit else 0.01
    if args.delta is not None:
        delta = args.delta
    rng = SeededRng(seed, (0x0C,))
    ssm = random_stable_ssm(2, 2, 3, 0.5, rng)
    X, _, _ = ssm.sample(10, rng)
    res = compare_langevin_to_smoother(
        ssm, X, step_size=delta, steps=args.steps, burn_in=args.burn_in, chains=args.chains, seed=seed,
        mh_correct=cfg.train.langevin.mh_correct,
    )
    print(f"oracle-compare: delta={delta} posterior-mean RMSE {res.rmse:.4g}, "
          f"max marginal-variance relative error {res.max_var_rel_error:.4g}")
    return EXIT_OK if res.rmse < 0.1 else EXIT_CHECK


def cmd_convert_frames(args) -> int:
    try:
        X = io.import_frames(args.directory)
    except OSError as exc:
        raise DataError(f"cannot read {args.directory}: {exc}") from None
    io.write_sequence(X, args.out)
    print(f"wrote {X.shape[0]} frame(s) of {X.shape[1]}x{X.shape[2]}x{X.shape[3]} to {args.out}")
    return EXIT_OK


def cmd_export_frames(args) -> int:
    X = _read_seq(args.sequence)
    io.export_frames(X, args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dyngen", description="Dynamic generator trained by alternating back-propagation.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True, seed=True):
        if config:
            sp.add_argument("--config", help="key=value run configuration")
        if seed:
            sp.add_argument("--seed", type=int, help="overrides train.seed")
        sp.add_argument("--threads", type=int, help="worker threads (default: $DGEN_THREADS or 1)")

    sp = sub.add_parser("train", help="learn a model from DGSQ sequences")
    common(sp, seed=False)
    sp.add_argument("--data", required=True, help="glob of DGSQ files")
    sp.add_argument("--mask", help="glob of DGMK files, paired with --data by filename stem")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("synthesize", help="sample new sequences from a checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--count", type=int, default=1)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_synthesize)

    sp = sub.add_parser("recover", help="fill occluded pixels of one sequence")
    common(sp)
    sp.add_argument("--checkpoint", help="start from a trained model instead of a fresh one")
    sp.add_argument("--data", required=True)
    sp.add_argument("--mask", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_recover)

    sp = sub.add_parser("animate", help="predict frames from a still image")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--frame", required=True, help="DGSQ (first frame used) or PGM/PPM image")
    sp.add_argument("--length", type=int, help="frames to predict (default synth.length)")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_animate)

    sp = sub.add_parser("interpolate", help="blend the appearance vectors of two training sequences")
    common(sp, config=False, seed=False)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--latents", required=True)
    sp.add_argument("--i", type=int, required=True)
    sp.add_argument("--j", type=int, required=True)
    sp.add_argument("--steps", type=int, default=5)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_interpolate)

    sp = sub.add_parser("gradcheck", help="finite-difference check on random tiny instances")
    common(sp)
    sp.add_argument("--instances", type=int, default=8)
    sp.add_argument("--corrupt-gradient", type=float, default=0.0, help=argparse.SUPPRESS)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("oracle-compare", help="Langevin posterior versus the exact Kalman smoother")
    common(sp)
    sp.add_argument("--delta", type=float, help="Langevin step size (default 0.01)")
    sp.add_argument("--steps", type=int, default=20000)
    sp.add_argument("--burn-in", type=int, default=5000)
    sp.add_argument("--chains", type=int, default=500)
    sp.set_defaults(func=cmd_oracle_compare)

    sp = sub.add_parser("convert-frames", help="PGM/PPM directory -> DGSQ")
    sp.add_argument("directory")
    sp.add_argument("out")
    sp.set_defaults(func=cmd_convert_frames)

    sp = sub.add_parser("export-frames", help="DGSQ -> PGM/PPM directory")
    sp.add_argument("sequence")
    sp.add_argument("out")
    sp.set_defaults(func=cmd_export_frames)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except io.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, io.FormatError, CheckpointError, DimensionError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (InferenceError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_CHECK
    except ValueError as exc:
        # remaining validation failures concern the inputs' content
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
