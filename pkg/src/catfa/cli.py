"""Command-line entry point: train, infer, eval, gradcheck and bench.

Exit codes: 0 success, 1 a check failed (gradcheck), 2 bad input or
configuration, 3 runtime failure such as a diverged (NaN) training run.
"""

from __future__ import annotations

import argparse
import csv
import io as _io
import logging
import statistics
import sys
from pathlib import Path

import numpy as np

from . import io as cio
from . import metrics
from .model import ConfigError, build
from .tensor import ShapeError

log = logging.getLogger("catfa")

EXIT_OK, EXIT_CHECK_FAILED, EXIT_INPUT, EXIT_RUNTIME = 0, 1, 2, 3

HISTORY_FIELDS = ("epoch", "train_loss", "val_loss", "val_dice", "seed")


class InputError(Exception):
    """Bad user input; reported with exit code 2."""


def _fail(code: int, msg: str) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return code


def _load_config(path) -> cio.RunConfig:
    p = Path(path)
    if not p.is_file():
        raise InputError(f"config file not found: {p}")
    return cio.RunConfig.load(p)


def load_dataset(rc: cio.RunConfig):
    """Samples named by ``data_dir``: the synthetic generator or an image/mask directory."""
    from .training import SynthSample, make_synth_dataset

    synth = rc.synth_spec()
    if synth is not None:
        n, hw, task = synth
        return make_synth_dataset(n, hw, seed=rc.seed, task=task)
    root = Path(rc.data_dir)
    img_dir, mask_dir = root / "images", root / "masks"
    if not img_dir.is_dir() or not mask_dir.is_dir():
        raise InputError(f"data_dir {root} needs images/ and masks/ subdirectories")
    samples = []
    for img_path in sorted(img_dir.iterdir()):
        mask_path = mask_dir / (img_path.stem + ".pgm")
        if not mask_path.is_file():
            raise InputError(f"no mask {mask_path} for image {img_path}")
        image = cio.read_image(img_path)
        mask = (cio.read_pgm(mask_path) > 127).astype(np.float32)[None]
        samples.append(SynthSample(image, mask))
    if not samples:
        raise InputError(f"no images in {img_dir}")
    return samples


def _history_csv(history) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HISTORY_FIELDS)
    for r in history:
        w.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), repr(r.val_dice), r.seed])
    return buf.getvalue()


# ---------------------------------------------------------------- commands

def cmd_train(args) -> int:
    from .training import TrainConfig, TrainingDivergedError, train

    rc = _load_config(args.config)
    if args.seed is not None:
        rc.seed = args.seed
    if args.out is not None:
        rc.out_dir = args.out
    dataset = load_dataset(rc)
    hw = dataset[0].image.shape[1:]
    model = build(rc.model_config(input_hw=hw), seed=rc.seed)
    cfg = TrainConfig(epochs=rc.epochs, batch=rc.batch, lr=rc.lr, eps_loss=rc.eps_loss, seed=rc.seed)
    try:
        history = train(model, dataset, cfg)
    except TrainingDivergedError as e:
        return _fail(EXIT_RUNTIME, str(e))
    out = Path(rc.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cio.save_checkpoint(out / "checkpoint.ctfa", model, rc)
    (out / "history.csv").write_text(_history_csv(history))
    print(f"wrote {out / 'checkpoint.ctfa'} and {out / 'history.csv'}; "
          f"final val_dice {history[-1].val_dice:.4f}" if history else f"wrote {out}")
    return EXIT_OK


def cmd_infer(args) -> int:
    from .model import forward
    from .training import make_synth_dataset, standardize

    if args.checkpoint is None or args.input is None:
        raise InputError("infer needs --checkpoint and --input")
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise InputError(f"checkpoint not found: {ckpt}")
    model, rc = cio.load_checkpoint(ckpt)
    out_dir = Path(args.out or ".")
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.input == "synth":
        synth = rc.synth_spec()
        hw = synth[1] if synth else model.config.input_hw[0]
        task = synth[2] if synth else "shapes"
        sample = make_synth_dataset(1, hw, seed=args.seed or 0, task=task)[0]
        image, stem = sample.image, "synth"
        cio.write_pgm(out_dir / "synth_gt.pgm", sample.mask[0] > 0.5)
    else:
        path = Path(args.input)
        if not path.is_file():
            raise InputError(f"input image not found: {path}")
        image, stem = cio.read_image(path), path.stem
    H, W = image.shape[1:]
    if H % 32 or W % 32:
        raise InputError(f"input is {H}x{W}; height and width must be multiples of 32")
    if image.shape[0] != model.config.in_channels:
        raise InputError(f"model expects {model.config.in_channels} channels, image has {image.shape[0]}")
    probs = forward(model, standardize(image[None]).astype(model.store.dtype))[0, 0]
    cio.save_tensor(out_dir / f"{stem}.ctfa", probs)
    cio.write_pgm(out_dir / f"{stem}.pgm", metrics.binarize(probs))
    print(f"wrote {out_dir / (stem + '.ctfa')} and {out_dir / (stem + '.pgm')}")
    return EXIT_OK


def _pgm_names(d: Path) -> list[str]:
    if not d.is_dir():
        raise InputError(f"not a directory: {d}")
    return sorted(p.name for p in d.iterdir() if p.suffix.lower() == ".pgm")


def _matched(pred_dir: Path, gt_dir: Path) -> list[str]:
    pred, gt = _pgm_names(pred_dir), _pgm_names(gt_dir)
    unmatched = sorted(set(pred) ^ set(gt))
    if unmatched:
        raise InputError("unmatched files: " + ", ".join(unmatched))
    if not pred:
        raise InputError(f"no .pgm masks in {pred_dir}")
    return pred


def _evaluate_dir(pred_dir: Path, gt_dir: Path, names) -> list[metrics.MetricsReport]:
    out = []
    for n in names:
        p, g = cio.read_pgm(pred_dir / n) > 127, cio.read_pgm(gt_dir / n) > 127
        if p.shape != g.shape:
            raise InputError(f"{n}: prediction {p.shape} and ground truth {g.shape} differ in size")
        out.append(metrics.evaluate_pair(p, g))
    return out


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


def eval_report(pred_dir, gt_dir, compare_dir=None) -> str:
    """CSV text: per-image rows, a mean±sd row, and optional Wilcoxon p-values."""
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    names = _matched(pred_dir, gt_dir)
    reports = _evaluate_dir(pred_dir, gt_dir, names)
    cols = list(metrics.METRIC_NAMES) + ["tp", "tn", "fp", "fn"]
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["image"] + cols)
    for n, r in zip(names, reports):
        d = r.as_dict()
        w.writerow([n] + [_fmt(d[c]) for c in cols])
    summary = ["mean±sd"]
    for c in metrics.METRIC_NAMES:
        vals = [getattr(r, c) for r in reports]
        sd = statistics.stdev(vals) if len(vals) > 1 else 0.0
        summary.append(f"{statistics.fmean(vals):.6f}±{sd:.6f}")
    w.writerow(summary + [""] * 4)
    if compare_dir is not None:
        compare_dir = Path(compare_dir)
        other = _evaluate_dir(compare_dir, gt_dir, _matched(compare_dir, gt_dir))
        row = ["wilcoxon_p"]
        for c in metrics.METRIC_NAMES:
            a = [getattr(r, c) for r in reports]
            b = [getattr(r, c) for r in other]
            if c == "hd":  # lower is better: test whether the compared run is larger
                a, b = b, a
            try:
                row.append(repr(metrics.wilcoxon_one_tailed(a, b).pvalue))
            except ValueError as e:
                row.append(f"error: {e}")
        w.writerow(row + [""] * 4)
    return buf.getvalue()


def _emit(text: str, out) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_eval(args) -> int:
    if args.pred_dir is None or args.gt_dir is None:
        raise InputError("eval needs --pred-dir and --gt-dir")
    _emit(eval_report(args.pred_dir, args.gt_dir, args.compare), args.out)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from . import gradcheck

    scopes = ["primitives", "blocks", "model"] if args.scope == "all" else [args.scope]
    for s in scopes:
        if s not in gradcheck.THRESHOLDS:
            raise InputError(f"--scope must be primitives, blocks, model or all; got {s!r}")
    results = [r for s in scopes for r in gradcheck.run_scope(s, seed=args.seed or 0)]
    print(gradcheck.format_table(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_CHECK_FAILED


def cmd_bench(args) -> int:
    from .bench import rows_to_csv, run_bench

    try:
        reductions = [int(r) for r in args.reduction.replace(",", " ").split()]
    except ValueError:
        raise InputError(f"--reduction must be a comma-separated list of ints, got {args.reduction!r}") from None
    try:
        rows = run_bench(args.tokens, args.channels, reductions, reps=args.reps, seed=args.seed or 0)
    except ValueError as e:
        raise InputError(str(e)) from None
    _emit(rows_to_csv(rows), args.out)
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="catfa", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train from a key=value config; writes checkpoint + history CSV")
    t.add_argument("--config", required=True, metavar="PATH")
    t.add_argument("--seed", type=int, metavar="INT", help="override the config seed")
    t.add_argument("--out", metavar="PATH", help="override the config out_dir")
    t.set_defaults(fn=cmd_train)

    i = sub.add_parser("infer", help="predict a mask; writes a probability TensorFile and a PGM")
    i.add_argument("--checkpoint", required=True, metavar="PATH")
    i.add_argument("--input", required=True, metavar="PATH", help="PGM/PPM/TensorFile image or 'synth'")
    i.add_argument("--out", metavar="PATH", help="output directory (default: .)")
    i.add_argument("--seed", type=int, metavar="INT", help="synthetic sample seed for --input synth")
    i.set_defaults(fn=cmd_infer)

    e = sub.add_parser("eval", help="per-image metrics CSV for matching PGM masks")
    e.add_argument("--pred-dir", required=True, metavar="PATH")
    e.add_argument("--gt-dir", required=True, metavar="PATH")
    e.add_argument("--compare", metavar="PATH", help="second prediction dir; adds Wilcoxon p-values")
    e.add_argument("--out", metavar="PATH", help="CSV path (default: stdout)")
    e.set_defaults(fn=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference gradient checks; exit 1 on failure")
    g.add_argument("--scope", default="all", metavar="STR", help="primitives, blocks, model or all")
    g.add_argument("--seed", type=int, metavar="INT")
    g.set_defaults(fn=cmd_gradcheck)

    b = sub.add_parser("bench", help="attention kernel multiply-adds and median wall time per R")
    b.add_argument("--tokens", type=int, default=4096, metavar="INT")
    b.add_argument("--channels", type=int, default=64, metavar="INT")
    b.add_argument("--reduction", default="1,2,4,8", metavar="LIST")
    b.add_argument("--reps", type=int, default=20, metavar="INT")
    b.add_argument("--seed", type=int, metavar="INT")
    b.add_argument("--out", metavar="PATH", help="CSV path (default: stdout)")
    b.set_defaults(fn=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # argparse usage errors are input errors
        return EXIT_INPUT if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (InputError, cio.FormatError, ConfigError, ShapeError) as e:
        return _fail(EXIT_INPUT, str(e))
    except (FloatingPointError, RuntimeError) as e:
        return _fail(EXIT_RUNTIME, f"{type(e).__name__}: {e}")


if __name__ == "__main__":
    sys.exit(main())
