"""``flowrenderer`` command line: synth, train, reenact, evaluate.

Exit codes: 0 success, 1 I/O error, 2 validation error, 3 numerical failure.
Seeds default to ``$FLOWRENDERER_SEED`` (or 0) when neither a flag nor the
config file sets one. Every command writes ``run.json`` next to its output.
"""

import argparse
import json
import logging
import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import tomli

from .datamodel.dataset import (
    load_dataset,
    load_frame_png,
    load_mask_png,
    load_sequence,
    save_frame_png,
    save_sequence,
)
from .datamodel.synthetic import make_synthetic_dataset
from .estimator import parse_phases
from .evaluation import evaluate, write_report
from .exceptions import NumericalError, PipelineStageError, ValidationError
from .pipeline import ModelConfig, load_checkpoint, reenact_sequence
from .training import TrainConfig, run_training
from .validation import check_resolution

log = logging.getLogger("flowrenderer")

EXIT_OK, EXIT_IO, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 1, 2, 3
SEED_ENV = "FLOWRENDERER_SEED"


def default_seed():
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise ValidationError(f"{SEED_ENV}={raw!r} is not an integer") from None


def git_describe():
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=10,
        )
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() if out.returncode == 0 and out.stdout.strip() else "unknown"


def write_run_json(directory, command, config, seed):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    record = {"command": command, "seed": seed, "config": config, "git_describe": git_describe()}
    path = directory / "run.json"
    path.write_text(json.dumps(record, indent=2, sort_keys=True, default=str) + "\n")
    return path


def load_train_config(path, overrides=None):
    """Read a TOML training config. Relative paths resolve against the file's directory.

    Top-level keys are :class:`TrainConfig` fields; ``[model]`` and
    ``[weights]`` tables fill the nested configs.
    """
    path = Path(path)
    with open(path, "rb") as fh:
        try:
            raw = tomli.load(fh)
        except tomli.TOMLDecodeError as exc:
            raise ValidationError(f"{path}: {exc}") from exc
    raw.update({k: v for k, v in (overrides or {}).items() if v is not None})
    base = path.resolve().parent
    for key in ("dataset_root", "output_dir"):
        if key in raw and raw[key] is not None and not Path(raw[key]).is_absolute():
            raw[key] = str(base / raw[key])
    if "seed" not in raw:
        raw["seed"] = default_seed()
    try:
        return TrainConfig.from_dict(raw)
    except TypeError as exc:
        raise ValidationError(f"{path}: {exc}") from exc


def cmd_synth(args):
    seed = default_seed() if args.seed is None else args.seed
    check_resolution(args.resolution, ModelConfig().downsample)
    if args.sequences < 1:
        raise ValidationError("--sequences must be positive")
    if args.frames < 2:
        raise ValidationError("--frames must be at least 2")
    out = Path(args.out)
    for seq in make_synthetic_dataset(seed, args.sequences, args.frames, args.resolution):
        save_sequence(seq, out)
    write_run_json(
        out, "synth", {"sequences": args.sequences, "frames": args.frames, "resolution": args.resolution}, seed
    )
    return EXIT_OK


def cmd_train(args):
    overrides = {"seed": args.seed, "output_dir": args.out, "dataset_root": args.data}
    if args.config is not None:
        cfg = load_train_config(args.config, overrides)
    else:
        overrides["seed"] = default_seed() if args.seed is None else args.seed
        cfg = TrainConfig.from_dict({k: v for k, v in overrides.items() if v is not None})
    phases = parse_phases(args.phase)
    write_run_json(cfg.output_dir, "train", {**cfg.to_dict(), "phases": list(phases), "resume": args.resume}, cfg.seed)
    final = run_training(cfg, phases=phases, resume=args.resume)
    print(final)
    return EXIT_OK


def _triptych(*frames):
    return np.concatenate(frames, axis=-1)


def cmd_reenact(args):
    model, _ = load_checkpoint(args.ckpt)
    src = load_frame_png(args.source)
    mask = load_mask_png(args.source_mask)
    driving = load_sequence(args.driving)
    res = model.config.resolution
    for what, shape in (("source", src.shape), ("driving", driving.frames.shape)):
        if shape[-1] != res or shape[-2] != res:
            raise ValidationError(f"{what} resolution {shape[-2]}x{shape[-1]} does not match checkpoint ({res})")
    outs = reenact_sequence(src, mask, driving, model.config.window_radius, model)
    out = Path(args.out)
    (out / "triptych" if args.triptych else out).mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(outs):
        save_frame_png(frame.numpy(), out / f"{i:06d}.png")
        if args.triptych:
            save_frame_png(_triptych(src, driving.frames[i], frame.numpy()), out / "triptych" / f"{i:06d}.png")
    write_run_json(
        out,
        "reenact",
        {"ckpt": args.ckpt, "source": args.source, "source_mask": args.source_mask, "driving": args.driving,
         "model": model.config.to_dict()},
        None,
    )
    return EXIT_OK


def cmd_evaluate(args):
    seed = default_seed() if args.seed is None else args.seed
    model, _ = load_checkpoint(args.ckpt)
    seqs = load_dataset(args.data)
    rows, pairs = evaluate(model, seqs, mode=args.mode, seed=seed)
    report = Path(args.report)
    report.parent.mkdir(parents=True, exist_ok=True)
    write_report(rows, report)
    for src_id, frame, drv_id in pairs:
        log.info("pair: source %s[%d] driving %s", src_id, frame, drv_id)
    write_run_json(
        report.parent,
        "evaluate",
        {"ckpt": args.ckpt, "data": args.data, "mode": args.mode, "report": str(report),
         "pairs": [list(p) for p in pairs], "model": model.config.to_dict()},
        seed,
    )
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(
        prog="flowrenderer", description="Synthetic data, training, re-enactment and evaluation."
    )
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--sequences", type=int, default=2)
    s.add_argument("--frames", type=int, default=64)
    s.add_argument("--resolution", type=int, default=64)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="two-phase training")
    t.add_argument("--config")
    t.add_argument("--phase", choices=("1", "2", "both"), default="both")
    t.add_argument("--resume")
    t.add_argument("--out", help="output directory (overrides the config)")
    t.add_argument("--data", help="dataset root (overrides the config)")
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("reenact", help="animate a source frame with a driving sequence")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--source", required=True)
    r.add_argument("--source-mask", required=True)
    r.add_argument("--driving", required=True, help="sequence directory (params.jsonl + frames/)")
    r.add_argument("--out", required=True)
    r.add_argument("--triptych", action="store_true", help="also write source | driving | output strips")
    r.set_defaults(func=cmd_reenact)

    e = sub.add_parser("evaluate", help="self- or cross-identity metric report")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--mode", choices=("self", "cross"), default="self")
    e.add_argument("--report", required=True)
    e.add_argument("--seed", type=int)
    e.set_defaults(func=cmd_evaluate)
    return p


def _exit_code(exc):
    if isinstance(exc, PipelineStageError):
        return _exit_code(exc.cause)
    if isinstance(exc, NumericalError):
        return EXIT_NUMERICAL
    if isinstance(exc, ValidationError):
        return EXIT_VALIDATION
    if isinstance(exc, OSError):
        return EXIT_IO
    return None


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except Exception as exc:
        code = _exit_code(exc)
        if code is None:
            raise
        print(f"flowrenderer {args.command}: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
