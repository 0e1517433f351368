"""Command-line front end: ``tempo4d <command> [options]``.

Volumes are ``name.raw`` + ``name.meta.json`` pairs; checkpoints are
``name.raw`` + ``name.manifest.json`` pairs. Either file of a pair, or the
bare stem, is accepted wherever a path is expected.

Exit codes: 0 success, 2 usage or invalid config, 3 I/O (missing, unreadable
or corrupt files), 4 numeric failure (non-finite values, out-of-range data).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import engine
from .checkpoint import checkpoint_paths
from .config import EngineConfig, load_config, replace
from .metrics import MetricReport
from .ssm import enhance_volume
from .synthetic import make_synthetic
from .volume import (
    Slice2Dt,
    Volume4D,
    denormalize_volume,
    load_volume4d,
    normalize_volume,
    reassemble_4d,
    save_volume4d,
    slice_to_2dt,
    volume_paths,
)

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
PREVIEW_FRAMES = 6

log = logging.getLogger("tempo4d")


class UsageError(Exception):
    pass


class IOFailure(Exception):
    pass


# ------------------------------------------------------------------ parsing
COMMANDS = {
    "make-synthetic": "write synthetic 4D cases (--out DIR)",
    "slice": "split a 4D volume into per-z 2Dt sequences (--in VOL --out DIR)",
    "reassemble": "stack per-z 2Dt sequences back into a 4D volume (--in DIR --out VOL)",
    "train-tsr": "train the stage-1 denoiser (--in DIR|VOL --out CKPT)",
    "sample": "generate the intermediate frames of a case (--in VOL --stage1 CKPT --out VOL)",
    "train-sc": "train the stage-2 consistency network (--in DIR --stage1 CKPT --out CKPT)",
    "enhance": "apply the consistency network to a volume (--in VOL --stage2 CKPT --out VOL)",
    "evaluate": "compare predictions with references (--in DIR|VOL --ref DIR|VOL --out CSV)",
    "pipeline": "two boundary frames in, enhanced full sequence out (--in VOL --out VOL)",
}

NEEDS_IN = {"slice", "reassemble", "train-tsr", "sample", "train-sc", "enhance", "evaluate", "pipeline"}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tempo4d",
        description="Temporal super-resolution and volumetric consistency for 4D volumes.",
        epilog="exit codes: 0 success, 2 usage/config error, 3 I/O error, 4 numeric failure. "
               "TSSC_LOG=DEBUG|INFO|WARNING|ERROR overrides --verbose.",
    )
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True
    for name, help_text in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", type=Path, help="JSON engine config (defaults used when omitted)")
        p.add_argument("--in", dest="inp", type=Path, help="input file or directory")
        p.add_argument("--out", type=Path, required=True, help="output file or directory")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--deterministic", action="store_true",
                       help="force deterministic mode (fixed batch layout across workers)")
        p.add_argument("--jobs", type=int, default=1, help="worker threads for per-slice sampling")
        p.add_argument("--verbose", "-v", action="count", default=0, help="more logging (repeatable)")
        if name in ("sample", "train-sc", "pipeline"):
            p.add_argument("--stage1", type=Path, help="stage-1 checkpoint (default: config paths)")
        if name in ("enhance", "pipeline"):
            p.add_argument("--stage2", type=Path, help="stage-2 checkpoint (default: config paths)")
        if name == "evaluate":
            p.add_argument("--ref", type=Path, required=True, help="reference file or directory")
            p.add_argument("--max-val", type=float, default=2.0, help="PSNR/SSIM dynamic range")
        if name == "train-tsr":
            p.add_argument("--steps", type=int, help="override train.stage1_steps")
            p.add_argument("--resume", type=Path, help="stage-1 checkpoint to continue from")
        if name == "train-sc":
            p.add_argument("--epochs", type=int, help="override train.stage2_epochs")
        if name in ("train-tsr", "train-sc"):
            p.add_argument("--log", type=Path, help="training log CSV (default: next to --out)")
    return parser


def parse_args(argv=None) -> argparse.Namespace:
    """Parse and check per-command requirements; exits with code 2 on misuse."""
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command in NEEDS_IN and args.inp is None:
        parser.error(f"{args.command} requires --in")
    if args.jobs < 1:
        parser.error("--jobs must be >= 1")
    if getattr(args, "steps", None) is not None and args.steps < 0:
        parser.error("--steps must be >= 0")
    if getattr(args, "epochs", None) is not None and args.epochs < 0:
        parser.error("--epochs must be >= 0")
    return args


# ------------------------------------------------------------------ helpers
def _setup_logging(verbose: int) -> None:
    level = {0: logging.WARNING, 1: logging.INFO}.get(verbose, logging.DEBUG)
    env = os.environ.get("TSSC_LOG")
    if env:
        level = logging.getLevelName(env.upper())
        if not isinstance(level, int):
            level = logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    logging.getLogger("tempo4d").setLevel(level)


def _config(args) -> EngineConfig:
    try:
        cfg = load_config(args.config) if args.config else EngineConfig().validate()
        changes = {}
        if args.seed is not None:
            changes["seed"] = args.seed
        if args.deterministic:
            changes["deterministic"] = True
        return replace(cfg, **changes) if changes else cfg
    except FileNotFoundError as exc:
        raise IOFailure(str(exc)) from exc
    except (ValueError, TypeError) as exc:
        raise UsageError(f"invalid config: {exc}") from exc


def _read_volume(path: Path) -> Volume4D:
    try:
        return load_volume4d(path)
    except ValueError as exc:
        raise IOFailure(str(exc)) from exc


def _volume_files(path: Path) -> list[Path]:
    """Volume stems in a directory (sorted), or the single volume at ``path``."""
    if path.is_dir():
        stems = sorted(p.with_name(p.name[: -len(".meta.json")]) for p in path.glob("*.meta.json"))
        if not stems:
            raise IOFailure(f"no volumes (*.meta.json) found in {path}")
        return stems
    raw, meta = volume_paths(path)
    if not meta.is_file():
        raise IOFailure(f"missing metadata sidecar {meta}")
    return [raw.with_name(raw.name[: -len(".raw")])]


def _ckpt(path: Path | None, default: str) -> Path:
    p = Path(path) if path is not None else Path(default)
    if not checkpoint_paths(p)[1].is_file():
        raise IOFailure(f"checkpoint not found: {checkpoint_paths(p)[1]}")
    return p


def _prepare_out(path: Path, is_dir: bool = False) -> None:
    target = path if is_dir else path.parent
    try:
        target.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IOFailure(f"cannot create {target}: {exc}") from exc


def _normalized(v: Volume4D) -> Volume4D:
    return v if v.normalized else normalize_volume(v)


def write_preview(path: Path, volume: np.ndarray, normalized: bool = True) -> Path:
    """8-bit PGM strip of six evenly spaced frames of the middle z-slice."""
    vol = np.asarray(volume, dtype=np.float64)
    T, Z = vol.shape[:2]
    idx = np.unique(np.linspace(0, T - 1, min(PREVIEW_FRAMES, T)).round().astype(int))
    strip = np.concatenate([vol[t, Z // 2] for t in idx], axis=1)
    if normalized:
        lo, hi = -1.0, 1.0
    else:
        lo, hi = float(strip.min()), float(strip.max())
    scaled = np.zeros_like(strip) if hi <= lo else (np.clip(strip, lo, hi) - lo) / (hi - lo)
    img = np.round(scaled * 255).astype(np.uint8)
    out = Path(path).with_suffix(".pgm") if Path(path).suffix != ".pgm" else Path(path)
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii")
    out.write_bytes(header + img.tobytes())
    return out


def _stem(path: Path) -> Path:
    raw, _ = volume_paths(path)
    return raw.with_name(raw.name[: -len(".raw")])


# ----------------------------------------------------------------- commands
def cmd_make_synthetic(args, cfg: EngineConfig) -> None:
    _prepare_out(args.out, is_dir=True)
    rng = np.random.default_rng([cfg.seed, 99])
    for case in make_synthetic(cfg.synthetic, rng):
        save_volume4d(case.volume, args.out / case.name)
    log.info("wrote %d cases to %s", cfg.synthetic.cases, args.out)


def cmd_slice(args, cfg: EngineConfig) -> None:
    v = _read_volume(args.inp)
    _prepare_out(args.out, is_dir=True)
    stem = _stem(args.inp).name
    for z in range(v.shape[1]):
        s = slice_to_2dt(v, z)
        save_volume4d(v.with_data(s.data[:, None]), args.out / f"{stem}_z{z:04d}")


def cmd_reassemble(args, cfg: EngineConfig) -> None:
    stems = _volume_files(args.inp)
    vols = [_read_volume(s) for s in stems]
    if any(v.shape[1] != 1 for v in vols):
        raise UsageError("reassemble expects single-slice (T, 1, Y, X) inputs as written by 'slice'")
    Z = len(vols)
    slices = [Slice2Dt(v.data[:, 0], z, (v.shape[0], Z) + v.shape[2:]) for z, v in enumerate(vols)]
    _prepare_out(args.out)
    save_volume4d(vols[0].with_data(reassemble_4d(slices)), args.out)


def _training_cases(path: Path) -> list[Volume4D]:
    return [_normalized(_read_volume(s)) for s in _volume_files(path)]


def cmd_train_tsr(args, cfg: EngineConfig) -> None:
    cases = _training_cases(args.inp)
    _prepare_out(args.out)
    resume = _ckpt(args.resume, "") if args.resume is not None else None
    log_path = args.log or Path(str(_stem(args.out)) + ".log.csv")
    engine.train_stage1(cfg, engine.stage1_sequences(cases), resume=resume,
                        checkpoint_path=_stem(args.out), log_path=log_path, steps=args.steps)


def cmd_train_sc(args, cfg: EngineConfig) -> None:
    cases = _training_cases(args.inp)
    params, _, _ = engine.load_stage1(_ckpt(args.stage1, cfg.paths.stage1_checkpoint))
    n_val = min(cfg.train.val_cases, len(cases) - 1)
    train, val = cases[: len(cases) - n_val], cases[len(cases) - n_val:]
    _prepare_out(args.out)
    stem = _stem(args.out)
    log_path = args.log or Path(str(stem) + ".log.csv")
    _, _, history = engine.train_stage2(cfg, params, train, val, checkpoint_path=stem,
                                        log_path=log_path, epochs=args.epochs)
    history.write_csv(Path(str(stem) + ".val.csv"))


def cmd_sample(args, cfg: EngineConfig) -> None:
    v = _normalized(_read_volume(args.inp))
    params, _, _ = engine.load_stage1(_ckpt(args.stage1, cfg.paths.stage1_checkpoint))
    out = engine.run_stage1(cfg, params, v.data, jobs=args.jobs)
    _prepare_out(args.out)
    save_volume4d(v.with_data(out), args.out)
    write_preview(_stem(args.out), out)


def cmd_enhance(args, cfg: EngineConfig) -> None:
    v = _read_volume(args.inp)
    params = engine.load_stage2(_ckpt(args.stage2, cfg.paths.stage2_checkpoint))
    norm = _normalized(v)
    out = norm.with_data(enhance_volume(params, norm.data))
    if not v.normalized:
        out = denormalize_volume(out)
    _prepare_out(args.out)
    save_volume4d(out, args.out)


def cmd_pipeline(args, cfg: EngineConfig) -> None:
    case = _read_volume(args.inp)
    d = engine.load_stage1(_ckpt(args.stage1, cfg.paths.stage1_checkpoint))[0]
    t = engine.load_stage2(_ckpt(args.stage2, cfg.paths.stage2_checkpoint))
    res = engine.run_pipeline(cfg, case, d, t, jobs=args.jobs)
    _prepare_out(args.out)
    save_volume4d(res.volume, args.out)
    write_preview(_stem(args.out), res.enhanced)


def cmd_evaluate(args, cfg: EngineConfig) -> None:
    preds = _volume_files(args.inp)
    refs = _volume_files(args.ref)
    if args.inp.is_dir() != args.ref.is_dir():
        raise UsageError("--in and --ref must both be files or both be directories")
    if args.inp.is_dir():
        ref_by_name = {r.name: r for r in refs}
        missing = [p.name for p in preds if p.name not in ref_by_name]
        if missing:
            raise IOFailure(f"no reference for: {', '.join(missing)}")
        pairs = [(p.name, p, ref_by_name[p.name]) for p in preds]
    else:
        pairs = [(preds[0].name, preds[0], refs[0])]
    report = MetricReport()
    for name, p, r in pairs:
        a, b = _read_volume(p), _read_volume(r)
        if a.shape != b.shape:
            raise UsageError(f"{name}: prediction shape {a.shape} != reference shape {b.shape}")
        report.add(name, a.data, b.data, args.max_val)
    _prepare_out(args.out)
    args.out.write_text(report.to_csv())
    print(report.to_csv().splitlines()[-1])


DISPATCH = {
    "make-synthetic": cmd_make_synthetic,
    "slice": cmd_slice,
    "reassemble": cmd_reassemble,
    "train-tsr": cmd_train_tsr,
    "train-sc": cmd_train_sc,
    "sample": cmd_sample,
    "enhance": cmd_enhance,
    "evaluate": cmd_evaluate,
    "pipeline": cmd_pipeline,
}


def dispatch(args: argparse.Namespace) -> int:
    """Run one parsed command; map failures onto the documented exit codes."""
    try:
        cfg = _config(args)
        DISPATCH[args.command](args, cfg)
    except UsageError as exc:
        print(f"tempo4d {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (IOFailure, OSError) as exc:
        print(f"tempo4d {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (FloatingPointError, ValueError, IndexError) as exc:
        print(f"tempo4d {args.command}: numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    _setup_logging(args.verbose)
    return dispatch(args)


if __name__ == "__main__":
    sys.exit(main())
