"""Command-line entry point: ``pansr <subcommand> ...``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error
(missing files, corrupt checkpoints, architecture mismatch), 3 numeric
failure (non-finite loss, failed gradient check).
"""
from __future__ import annotations

import argparse
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import cost_report, emit_reproduction_ledger
from .checkpoint import Checkpoint
from .config import load_config
from .data import DatasetManifest, degrade
from .exceptions import (
    ConfigError,
    DataError,
    NonFiniteError,
    ShapeError,
    StateDictMismatchError,
    UnsupportedConfigError,
)
from .gradcheck import gradcheck_model, tiny_config
from .imaging import evaluate_pair, quantize, read_png, to_float, write_png
from .nn import BLOCK_TYPES, PAN, ModelConfig, build_pan, summary
from .training import LogRow, Trainer, format_loss_csv, super_resolve
from .utils import atomic_write_text

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for data errors here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _resolution(text: str) -> tuple[int, int]:
    try:
        w, h = text.lower().split("x")
        return int(w), int(h)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected WIDTHxHEIGHT, got {text!r}") from None


def _load_model(path) -> PAN:
    ckpt = Checkpoint.load(path)
    model = build_pan(ModelConfig.from_dict(ckpt.model_config))
    model.load_state_dict(ckpt.params)
    return model


def _images(directory: Path) -> dict[str, Path]:
    if not directory.is_dir():
        raise DataError(f"directory not found: {directory}")
    return {p.stem: p for p in sorted(directory.glob("*.png"))}


def _fmt_db(v: float) -> str:
    return "inf" if math.isinf(v) else f"{v:.4f}"


# -- subcommands -------------------------------------------------------------

def cmd_analyze(args) -> int:
    config = ModelConfig(scale=args.scale, block_type=args.block_type,
                         num_blocks=args.blocks, nf=args.nf, unf=args.unf,
                         pa_in_blocks=not args.no_pa_blocks,
                         pa_in_upsampler=not args.no_pa_upsampler)
    model = build_pan(config)
    report = cost_report(model, args.hr_res)
    if args.out:
        atomic_write_text(args.out, report.to_csv())
    if args.layers:
        print(summary(model))
    print(report.summary())
    return EXIT_OK


def cmd_ledger(args) -> int:
    for name, path in emit_reproduction_ledger(args.out_dir).items():
        print(f"{name}: {path}")
    return EXIT_OK


def cmd_degrade(args) -> int:
    manifest = degrade(args.hr_dir, args.scale, args.out_dir)
    print(f"wrote {len(manifest)} pairs to {Path(args.out_dir) / 'manifest.tsv'}")
    return EXIT_OK


def _read_loss_log(path: Path, before: int) -> list[LogRow]:
    """Rows of an existing loss log with iteration < ``before``."""
    if not path.exists():
        return []
    rows = []
    for line in path.read_text(encoding="utf-8").splitlines()[1:]:
        it, lr, loss = line.split(",")
        if int(it) < before:
            rows.append(LogRow(int(it), float(lr), float(loss)))
    return rows


def cmd_train(args) -> int:
    manifest = DatasetManifest.load(args.data)
    out_dir = Path(args.out_dir)
    if args.resume:
        ckpt = Checkpoint.load(args.resume)
        train_cfg = load_config(args.config)[1] if args.config else None
        trainer = Trainer.from_checkpoint(ckpt, manifest, train_cfg)
        history = _read_loss_log(out_dir / "loss.csv", trainer.iteration)
    else:
        if not args.config:
            raise ConfigError("--config is required unless --resume is given")
        model_cfg, train_cfg = load_config(args.config)
        trainer = Trainer(build_pan(model_cfg, seed=train_cfg.seed), manifest, train_cfg)
        history = []
    if trainer.model.scale != manifest.scale:
        raise ConfigError(
            f"model scale {trainer.model.scale} does not match manifest scale {manifest.scale}"
        )
    until = args.iters if args.iters is not None else trainer.config.total_iters
    for ckpt in trainer.run(until):
        ckpt.save(out_dir / f"ckpt_{ckpt.iteration:08d}.pan")
        ckpt.save(out_dir / "last.pan")
        atomic_write_text(out_dir / "loss.csv", format_loss_csv(history + trainer.history))
    last = trainer.history[-1] if trainer.history else None
    msg = f"iteration {trainer.iteration}"
    if last is not None:
        msg += f" loss {last.loss:.6f} lr {last.lr:.3g}"
    print(msg)
    return EXIT_OK


def cmd_infer(args) -> int:
    model = _load_model(args.ckpt)
    if args.scale is not None and args.scale != model.scale:
        raise ConfigError(f"--scale {args.scale} does not match checkpoint scale {model.scale}")
    img = read_png(args.input)
    sr = quantize(super_resolve(model, img.pixels))
    write_png(args.out, sr)
    print(f"{args.input} {img.width}x{img.height} -> {args.out} {sr.shape[1]}x{sr.shape[0]}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if (args.ckpt is None) == (args.sr_dir is None):
        raise ConfigError("give exactly one of --ckpt (with --lr-dir) or --sr-dir")
    hr = _images(Path(args.hr_dir))
    if args.ckpt:
        if not args.lr_dir:
            raise ConfigError("--ckpt needs --lr-dir")
        model = _load_model(args.ckpt)
        scale = model.scale
        sources = _images(Path(args.lr_dir))
    else:
        if args.scale is None:
            raise ConfigError("--sr-dir needs --scale for the shave width")
        model, scale = None, args.scale
        sources = _images(Path(args.sr_dir))
    names = sorted(hr)
    missing = [n for n in names if n not in sources]
    if not names:
        raise DataError(f"no PNG images in {args.hr_dir}")
    if missing:
        raise DataError(f"no counterpart for: {', '.join(missing)}")
    results = []
    print("image,psnr,ssim")
    for name in names:
        src = read_png(sources[name]).pixels
        sr = quantize(super_resolve(model, src)) if model is not None else to_float(src)
        p, s = evaluate_pair(sr, read_png(hr[name]).pixels, shave=scale)
        results.append((p, s))
        print(f"{name},{_fmt_db(p)},{s:.6f}")
    mean_p = float(np.mean([r[0] for r in results]))
    mean_s = float(np.mean([r[1] for r in results]))
    print(f"mean,{_fmt_db(mean_p)},{mean_s:.6f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    kinds = BLOCK_TYPES if args.block_type == "all" else (args.block_type,)
    dtypes = [np.float32, np.float64]
    if args.f32:
        dtypes = [np.float32]
    elif args.f64:
        dtypes = [np.float64]
    ok = True
    worst = {}
    for dtype in dtypes:
        for kind in kinds:
            cfg = tiny_config(kind, width=args.width, blocks=args.blocks)
            res = gradcheck_model(cfg, seed=args.seed, dtype=dtype, samples=args.samples)
            ok &= res.passed
            worst[res.dtype] = max(worst.get(res.dtype, 0.0), res.max_rel_error)
            status = "ok" if res.passed else "FAIL"
            print(f"{kind:<6} {res.dtype:<8} max_rel_error={res.max_rel_error:.3e} "
                  f"tol={res.tolerance:g} checked={res.checked} "
                  f"kinks_skipped={res.skipped_kinks} {status}")
            if not res.passed:
                print(f"  worst: {res.worst}")
    for name, err in worst.items():
        print(f"max relative error ({name}): {err:.3e}")
    return EXIT_OK if ok else EXIT_NUMERIC


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pansr", description="Pixel-attention super-resolution toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("analyze", help="parameter and mult-add accounting")
    p.add_argument("--scale", type=int, default=4)
    p.add_argument("--block-type", default="SCPA", help="one of " + ", ".join(BLOCK_TYPES))
    p.add_argument("--blocks", type=int, default=None, help="default 16 (SCPA) or 8")
    p.add_argument("--nf", type=int, default=40)
    p.add_argument("--unf", type=int, default=24)
    p.add_argument("--hr-res", type=_resolution, default=(1280, 720), metavar="WxH")
    p.add_argument("--no-pa-blocks", action="store_true")
    p.add_argument("--no-pa-upsampler", action="store_true")
    p.add_argument("--layers", action="store_true", help="also print the per-layer summary")
    p.add_argument("--out", help="write the per-layer cost CSV here")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("ledger", help="write the cost reproduction CSVs")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_ledger)

    p = sub.add_parser("degrade", help="bicubic-downscale HR images and write a manifest")
    p.add_argument("--hr-dir", required=True)
    p.add_argument("--scale", type=int, required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_degrade)

    p = sub.add_parser("train", help="train from a key=value config and a manifest")
    p.add_argument("--config")
    p.add_argument("--data", required=True, help="manifest.tsv")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--out-dir", default="run")
    p.add_argument("--iters", type=int, default=None, help="stop at this iteration")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="super-resolve one PNG")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--scale", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="Y-channel PSNR/SSIM against HR images")
    p.add_argument("--hr-dir", required=True)
    p.add_argument("--ckpt")
    p.add_argument("--lr-dir")
    p.add_argument("--sr-dir", help="evaluate precomputed SR images instead of a checkpoint")
    p.add_argument("--scale", type=int, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check on a tiny model")
    p.add_argument("--width", type=int, default=8)
    p.add_argument("--blocks", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=int, default=200)
    p.add_argument("--block-type", default="all")
    precision = p.add_mutually_exclusive_group()
    precision.add_argument("--f32", action="store_true", help="single precision only")
    precision.add_argument("--f64", action="store_true", help="double precision only")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (UnsupportedConfigError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except StateDictMismatchError as exc:
        print(f"error: {exc.describe()}", file=sys.stderr)
        return EXIT_DATA
    except (DataError, ShapeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NonFiniteError as exc:
        extra = f" (batch {exc.batch_indices})" if exc.batch_indices else ""
        print(f"error: {exc}{extra}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
