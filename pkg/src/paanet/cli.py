"""``paanet`` command line: synth, train, eval, predict, gradcheck.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import contextlib
import dataclasses
import logging
import os
import sys
from pathlib import Path

import numpy as np

from paanet import data as D
from paanet.model import ModelConfig, forward
from paanet.tensor import Tensor, no_grad

logger = logging.getLogger("paanet")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ----------------------------------------------------------------------------
# run configuration: "key = value" file, flags win

_MODEL_KEYS = ("in_channels", "encoder_channels", "dense_layers", "growth", "num_blocks", "input_size")
_TRAIN_KEYS = ("learning_rate", "epochs", "batch_size", "adam_beta1", "adam_beta2", "adam_eps", "seed", "threshold")
RUN_KEYS = _MODEL_KEYS + _TRAIN_KEYS + ("data",)


def _int_tuple(text: str) -> tuple:
    return tuple(int(t) for t in text.replace("x", ",").split(",") if t.strip())


def parse_config_text(text: str, origin: str = "<config>") -> dict:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{origin}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in RUN_KEYS:
            raise UsageError(f"{origin}:{lineno}: unknown key {key!r}")
        values[key] = value
    return values


def resolve_run_config(values: dict) -> tuple:
    """String values -> (ModelConfig, TrainConfig, data path or None)."""
    from paanet.training import TrainConfig

    model_kw, train_kw = {}, {}
    try:
        for key, value in values.items():
            if key in ("encoder_channels", "input_size"):
                model_kw[key] = _int_tuple(value)
            elif key in _MODEL_KEYS:
                model_kw[key] = int(value)
            elif key in ("epochs", "batch_size", "seed"):
                train_kw[key] = int(value)
            elif key in _TRAIN_KEYS:
                train_kw[key] = float(value)
        if "input_size" in model_kw and len(model_kw["input_size"]) == 1:
            model_kw["input_size"] = model_kw["input_size"] * 2
        return ModelConfig(**model_kw), TrainConfig(**train_kw), values.get("data")
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from exc


def format_run_config(model_cfg, train_cfg, data_path) -> str:
    lines = []
    for key in _MODEL_KEYS:
        v = getattr(model_cfg, key)
        lines.append(f"{key} = {','.join(map(str, v)) if isinstance(v, tuple) else v}")
    for key in _TRAIN_KEYS:
        v = getattr(train_cfg, key)
        lines.append(f"{key} = {v!r}")
    if data_path is not None:
        lines.append(f"data = {data_path}")
    return "\n".join(lines) + "\n"


# ----------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    values = {}
    if args.spec:
        for lineno, raw in enumerate(Path(args.spec).read_text().splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if line:
                key, _, value = (s.strip() for s in line.partition("="))
                values[key] = value
    for key in ("style", "count", "size", "seed", "fg_min", "fg_max", "noise"):
        flag = getattr(args, key)
        if flag is not None:
            values[key] = str(flag)
    known = {f.name for f in dataclasses.fields(D.SynthSpec)}
    unknown = set(values) - known
    if unknown:
        raise UsageError(f"unknown synth keys: {sorted(unknown)}")
    try:
        kw = {}
        for key, value in values.items():
            if key == "size":
                size = _int_tuple(value)
                kw[key] = size * 2 if len(size) == 1 else size
            elif key in ("count", "seed"):
                kw[key] = int(value)
            elif key in ("fg_min", "fg_max", "noise"):
                kw[key] = float(value)
            else:
                kw[key] = value
        spec = D.SynthSpec(**kw)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    if spec.count < 10:
        raise UsageError(f"count={spec.count}: the 80/10/10 split needs at least 10 samples")
    root = D.generate(spec, args.out)
    print(f"wrote {spec.count} {spec.style} samples to {root}")
    return EXIT_OK


def cmd_train(args) -> int:
    from paanet.training import load_checkpoint, train

    values = parse_config_text(Path(args.config).read_text(), args.config) if args.config else {}
    overrides = {
        "learning_rate": args.lr,
        "epochs": args.epochs,
        "batch_size": args.batch,
        "seed": args.seed,
        "num_blocks": args.blocks,
        "dense_layers": args.dense_layers,
        "growth": args.growth,
        "encoder_channels": args.encoder_channels,
        "input_size": args.input_size,
        "data": args.data,
    }
    values.update({k: str(v) for k, v in overrides.items() if v is not None})
    model_cfg, train_cfg, data_path = resolve_run_config(values)
    if data_path is None:
        raise UsageError("no dataset given (--data or 'data =' in the config)")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    resolved = format_run_config(model_cfg, train_cfg, data_path)
    (out / "resolved.cfg").write_text(resolved)
    logger.info("resolved config:\n%s", resolved)

    train_set = D.load_dataset(data_path, "train")
    val_set = D.load_dataset(data_path, "val")
    for s in train_set[:1]:
        if s.image.shape[1:] != model_cfg.input_size:
            raise UsageError(f"dataset images are {s.image.shape[1:]}, config input_size is {model_cfg.input_size}")
    resume = load_checkpoint(args.resume) if args.resume else None
    ckpt, _ = train(model_cfg, train_cfg, train_set, val_set, out_dir=out, resume=resume)
    print(f"trained {ckpt.epoch} epochs; best val DSC {ckpt.best_dsc:.4f}; outputs in {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from paanet.training import evaluate_samples, load_checkpoint

    ckpt = load_checkpoint(args.ckpt)
    samples = D.load_dataset(args.data, args.split)
    if not samples:
        raise RuntimeError(f"split {args.split!r} of {args.data} is empty")
    report = evaluate_samples(ckpt.params, ckpt.model_config, samples, args.threshold)
    tsv = f"{args.split}\t{report.tsv()}"
    print(tsv)
    print(report.text(), end="")
    report_path = Path(args.report) if args.report else Path(args.ckpt).with_name(f"eval_{args.split}.txt")
    report_path.write_text(tsv + "\n" + report.text())
    return EXIT_OK


def cmd_predict(args) -> int:
    from paanet.metrics import binarize
    from paanet.training import load_checkpoint

    # everything is computed before the output directory is touched
    ckpt = load_checkpoint(args.ckpt)
    rgb = D.read_pnm(args.image)
    if rgb.ndim != 3:
        raise RuntimeError(f"{args.image}: expected an RGB (P6) image")
    h, w = rgb.shape[:2]
    if h % 16 or w % 16:
        raise RuntimeError(f"{args.image}: size {h}x{w} is not divisible by 16")
    image = Tensor(rgb.transpose(2, 0, 1)[None].astype(np.float32) / 255.0)
    with no_grad():
        out = forward(image, ckpt.params, ckpt.model_config)
    files = {f"{Path(args.image).stem}_mask.pgm": binarize(out.prediction.data[0, 0], args.threshold) * 255}
    if args.dump_gams:
        for i, gam in enumerate(out.gams):
            files[f"{Path(args.image).stem}_gam{i:02d}.pgm"] = np.round(255.0 * gam.data[0, 0])

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, arr in files.items():
        D.write_pnm(out_dir / name, arr.astype(np.uint8))
    print(f"wrote {len(files)} file(s) to {out_dir}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from paanet.gradcheck import run_suite

    results = run_suite(args.seed)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}\t{r.name}\t{r.error:.3e}\t< {r.tolerance:g}")
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} gradient checks passed")
    return EXIT_OK if not failed else EXIT_RUNTIME


# ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="paanet", description="PAANet segmentation: synth, train, eval, predict, gradcheck.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--spec", help="key = value file with SynthSpec fields")
    s.add_argument("--style", choices=D.STYLES)
    s.add_argument("--count", type=int)
    s.add_argument("--size", help="N or HxW")
    s.add_argument("--seed", type=int)
    s.add_argument("--fg-min", dest="fg_min", type=float)
    s.add_argument("--fg-max", dest="fg_max", type=float)
    s.add_argument("--noise", type=float)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config")
    t.add_argument("--data")
    t.add_argument("--out", required=True)
    t.add_argument("--resume", help="continue from a last.ckpt")
    t.add_argument("--lr", type=float)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--blocks", type=int)
    t.add_argument("--dense-layers", dest="dense_layers", type=int)
    t.add_argument("--growth", type=int)
    t.add_argument("--encoder-channels", dest="encoder_channels")
    t.add_argument("--input-size", dest="input_size")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on a split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test", choices=D.SPLIT_NAMES)
    e.add_argument("--threshold", type=float, default=0.5)
    e.add_argument("--report")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("predict", help="segment one image")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--image", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--threshold", type=float, default=0.5)
    r.add_argument("--dump-gams", dest="dump_gams", action="store_true")
    r.set_defaults(func=cmd_predict)

    g = sub.add_parser("gradcheck", help="finite-difference check of every op and a tiny model")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)
    return p


def _thread_limit():
    # one BLAS thread by default: a forward/backward pass stays single-threaded and bitwise reproducible
    cap = os.environ.get("PAANET_THREADS", "1")
    if cap == "0":
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(cap))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except UsageError as exc:
        print(f"paanet {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit code 2
        print(f"paanet {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
