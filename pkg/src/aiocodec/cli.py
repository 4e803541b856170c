"""Command-line entry point: ``aiocodec <command> ...``.

Exit codes:
    0  success
    1  usage error (bad or unknown flags, invalid values)
    2  unreadable input image or corpus
    3  checkpoint invalid, or stream/checkpoint model-hash mismatch
    4  corrupted or truncated bitstream
    5  training diverged (non-finite loss or gradient)

Environment: ``AIOCODEC_SEED`` overrides the default seed,
``AIOCODEC_THREADS`` sets the torch intra-op thread count.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_CHECKPOINT, EXIT_STREAM, EXIT_DIVERGED = range(6)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _default_seed() -> int:
    return int(os.environ.get("AIOCODEC_SEED", "0"))


def _quality(text):
    try:
        q = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"quality must be an integer 0..3, got {text!r}")
    if not 0 <= q <= 3:
        raise argparse.ArgumentTypeError(f"quality must be in 0..3, got {q}")
    return q


def _print_config(**items):
    for k, v in items.items():
        print(f"# {k} = {v}")


def _fail(code, message):
    print(f"error: {message}", file=sys.stderr)
    return code


def _load_model(path):
    from .checkpoint import CheckpointError, load_checkpoint

    try:
        return load_checkpoint(path)
    except CheckpointError as e:
        raise _Exit(EXIT_CHECKPOINT, f"checkpoint {path}: {e}")


class _Exit(Exception):
    def __init__(self, code, message):
        self.code = code
        self.message = message


def _read_image(path):
    from .imageio import ImageReadError, read_image

    try:
        return read_image(path)
    except ImageReadError as e:
        raise _Exit(EXIT_INPUT, str(e))


def _load_corpus(args):
    from .data import synthetic_corpus

    if args.corpus:
        root = Path(args.corpus)
        if not root.is_dir():
            raise _Exit(EXIT_INPUT, f"corpus directory {root} not found")
        files = sorted(p for p in root.iterdir() if p.suffix.lower() in (".ppm", ".png"))
        if not files:
            raise _Exit(EXIT_INPUT, f"no .ppm/.png images in {root}")
        return [_read_image(p) for p in files]
    return synthetic_corpus(args.synthetic, args.size, seed=args.corpus_seed)


# ---------------------------------------------------------------------------
# commands


def cmd_compress(args):
    from .imageio import read_image  # noqa: F401
    from .metrics import psnr
    from .model import compress
    from .checkpoint import atomic_write

    x = _read_image(args.input)
    model, h, _ = _load_model(args.checkpoint)
    _print_config(command="compress", input=args.input, checkpoint=args.checkpoint,
                  quality=args.quality, model_hash=f"{h:08x}")
    try:
        res = compress(model, x, args.quality, h)
    except ValueError as e:
        raise _Exit(EXIT_INPUT, str(e))
    atomic_write(args.output, res.data)
    print(f"bytes {len(res.data)}")
    print(f"bpp {res.bpp!r}")
    if args.reference:
        ref = _read_image(args.reference)
        print(f"psnr {psnr(res.x_hat, ref)!r}")
    return EXIT_OK


def exit_code_for(exc: BaseException):
    """Documented exit code for an error raised while reading inputs, or None if unexpected."""
    from .checkpoint import CheckpointError
    from .container import ContainerError
    from .imageio import ImageReadError
    from .rangecoder import DecodeError
    from .train import TrainingDiverged

    if isinstance(exc, ContainerError):
        return EXIT_CHECKPOINT if exc.field == "model_hash" else EXIT_STREAM
    if isinstance(exc, DecodeError):
        return EXIT_STREAM
    if isinstance(exc, CheckpointError):
        return EXIT_CHECKPOINT
    if isinstance(exc, ImageReadError):
        return EXIT_INPUT
    if isinstance(exc, TrainingDiverged):
        return EXIT_DIVERGED
    return None


def cmd_decompress(args):
    from .container import ContainerError
    from .imageio import write_image
    from .model import decompress
    from .rangecoder import DecodeError

    try:
        data = Path(args.input).read_bytes()
    except OSError as e:
        raise _Exit(EXIT_INPUT, f"cannot read {args.input}: {e}")
    model, h, _ = _load_model(args.checkpoint)
    try:
        x = decompress(model, data, h)
    except ContainerError as e:
        raise _Exit(exit_code_for(e), f"container {e}")
    except DecodeError as e:
        raise _Exit(exit_code_for(e), f"payload: {e}")
    write_image(args.output, x)
    print(f"width {x.shape[2]}")
    print(f"height {x.shape[1]}")
    return EXIT_OK


_DEGRADE_FLAGS = {
    "gaussian_noise": ("sigma",),
    "rain": ("angle", "length", "density", "brightness"),
    "snow": ("density", "r_min", "r_max", "opacity"),
    "haze": ("t", "airlight"),
}


def cmd_degrade(args):
    from .degrade import DegradationSpec, apply_degradation, load_policy, sample_degradation
    from .evaluate import _DEFAULT_PARAMS
    from .imageio import write_image

    x = _read_image(args.input)
    if args.policy:
        try:
            spec = sample_degradation(load_policy(args.policy), args.seed)
        except (OSError, ValueError) as e:
            raise UsageError(f"policy: {e}")
    else:
        if not args.kind:
            raise UsageError("either --kind or --policy is required")
        params = {}
        if args.kind != "clean":
            defaults = dict(_DEFAULT_PARAMS.get(args.kind, {"sigma": 25.0}))
            for name in _DEGRADE_FLAGS[args.kind]:
                v = getattr(args, name)
                params[name] = float(v) if v is not None else defaults[name]
        spec = DegradationSpec(args.kind, params, args.seed)
    try:
        degraded, _ = apply_degradation(x, spec)
    except ValueError as e:
        raise UsageError(str(e))
    _print_config(command="degrade", input=args.input, kind=spec.kind,
                  params=json.dumps(dict(spec.params), sort_keys=True), seed=spec.seed)
    write_image(args.output, degraded)
    return EXIT_OK


def cmd_train(args):
    from .network import get_profile
    from .train import TrainConfig, TrainingDiverged, load_config, parse_config, train_loop

    try:
        cfg = load_config(args.config) if args.config else TrainConfig()
        overrides = []
        if args.profile:
            get_profile(args.profile)
            overrides.append(f"profile = {args.profile}")
        if args.seed is not None:
            overrides.append(f"seed = {args.seed}")
        if args.iters:
            overrides.append(f"patch_schedule = {args.iters}")
        if overrides:
            cfg = parse_config("\n".join(overrides), base=cfg)
    except (OSError, ValueError) as e:
        raise UsageError(str(e))
    corpus = _load_corpus(args)
    print("# effective config")
    for line in cfg.describe().splitlines():
        print(f"# {line}")
    try:
        res = train_loop(cfg, corpus, args.out, progress_every=args.progress)
    except TrainingDiverged as e:
        raise _Exit(EXIT_DIVERGED, str(e))
    print(f"checkpoint {res.checkpoint}")
    print(f"log {res.log_path}")
    print(f"model_hash {res.model_hash:08x}")
    return EXIT_OK


def cmd_eval(args):
    from .evaluate import eval_run, parse_degradation

    model, h, _ = _load_model(args.checkpoint)
    corpus = _load_corpus(args)
    try:
        degs = [parse_degradation(tok.strip(), args.seed) for tok in args.degradations.split(",")]
        qualities = [_quality(q) for q in args.qualities.split(",")]
    except (ValueError, argparse.ArgumentTypeError) as e:
        raise UsageError(str(e))
    _print_config(command="eval", checkpoint=args.checkpoint, model_hash=f"{h:08x}",
                  degradations=args.degradations, qualities=args.qualities,
                  images=len(corpus), seed=args.seed)
    rows = eval_run(model, h, corpus, degs, qualities, args.out)
    print(f"rows {len(rows)}")
    print(f"csv {Path(args.out) / 'eval.csv'}")
    return EXIT_OK


def cmd_rd_report(args):
    from .evaluate import rd_report, read_eval_csv

    try:
        a, b = read_eval_csv(args.a), read_eval_csv(args.b)
    except OSError as e:
        raise _Exit(EXIT_INPUT, str(e))
    try:
        report = rd_report(a, b)
    except ValueError as e:
        raise UsageError(str(e))
    print("degradation,bd_psnr_db,bd_rate_pct")
    for label, vals in report.items():
        print(f"{label},{vals['bd_psnr_db']!r},{vals['bd_rate_pct']!r}")
    return EXIT_OK


def build_parser():
    p = _Parser(prog="aiocodec", description="All-in-one learned image compression and restoration.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    c = sub.add_parser("compress", help="image -> bitstream")
    c.add_argument("input")
    c.add_argument("-c", "--checkpoint", required=True)
    c.add_argument("-q", "--quality", type=_quality, default=3)
    c.add_argument("-o", "--output", required=True)
    c.add_argument("--reference", help="clean image for reporting PSNR")
    c.set_defaults(func=cmd_compress)

    d = sub.add_parser("decompress", help="bitstream -> image")
    d.add_argument("input")
    d.add_argument("-c", "--checkpoint", required=True)
    d.add_argument("-o", "--output", required=True)
    d.set_defaults(func=cmd_decompress)

    g = sub.add_parser("degrade", help="synthesize a degraded image")
    g.add_argument("input")
    g.add_argument("-o", "--output", required=True)
    g.add_argument("--kind", choices=["clean", "gaussian_noise", "rain", "snow", "haze"])
    g.add_argument("--policy", help="sample the kind and parameters from a policy file")
    g.add_argument("--seed", type=int, default=_default_seed())
    for name in ("sigma", "angle", "length", "density", "brightness", "r_min", "r_max", "opacity", "t", "airlight"):
        g.add_argument(f"--{name.replace('_', '-')}", dest=name, type=float)
    g.set_defaults(func=cmd_degrade)

    for name, func, helptext in (("train", cmd_train, "train a model"), ("eval", cmd_eval, "RD evaluation")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--corpus", help="directory of clean .ppm/.png images")
        s.add_argument("--synthetic", type=int, default=20, help="synthetic images when no --corpus")
        s.add_argument("--size", type=int, default=64)
        s.add_argument("--corpus-seed", type=int, default=0)
        s.add_argument("-o", "--out", required=True, help="output directory")
        s.set_defaults(func=func)
    t = sub.choices["train"]
    t.add_argument("--config")
    t.add_argument("--profile", choices=["tiny", "ours-s", "ours-l"])
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--iters", help="patch schedule override, e.g. '32:300,48:100,64:100'")
    t.add_argument("--progress", type=int, default=0, help="log every N iterations")
    e = sub.choices["eval"]
    e.add_argument("-c", "--checkpoint", required=True)
    e.add_argument("--degradations", default="clean,gaussian_noise:25")
    e.add_argument("--qualities", default="0,1,2,3")
    e.add_argument("--seed", type=int, default=_default_seed())

    r = sub.add_parser("rd-report", help="BD-PSNR / BD-rate between two eval CSVs")
    r.add_argument("a")
    r.add_argument("b")
    r.set_defaults(func=cmd_rd_report)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    threads = os.environ.get("AIOCODEC_THREADS")
    if threads:
        import torch

        torch.set_num_threads(int(threads))
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        return _fail(EXIT_USAGE, str(e))
    except _Exit as e:
        return _fail(e.code, e.message)


if __name__ == "__main__":
    sys.exit(main())
