"""Command-line entry point.

Exit codes: 0 success, 1 runtime/IO error, 2 usage error, 3 numeric abort.
"""
from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

from .errors import UsageError
from .imageio import read_image, write_image
from .network import ModelConfig, init_model, load_checkpoint, parameter_count
from .text import DEFAULT_PROMPTS, embed_prompts, load_embeddings, read_prompts
from .training import NumericAbort, enhance, evaluate, load_paired_dataset, make_synthetic, train

logger = logging.getLogger("nalsuper")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _non_negative_int(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {value}")
    return value


def _positive_float(text: str) -> float:
    value = float(text)
    if not value > 0:
        raise argparse.ArgumentTypeError(f"must be > 0, got {value}")
    return value


def _model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--channels", type=_positive_int, default=8, help="feature width C (default 8)")
    p.add_argument("--blocks", type=_positive_int, default=3, help="number of residual blocks N (default 3)")
    p.add_argument("--attention-dim", type=_positive_int, default=16, help="cross-attention width d (default 16)")
    p.add_argument("--d-tau", type=_positive_int, default=32, help="text embedding width for the test embedder (default 32)")
    p.add_argument("--reduction", type=_positive_int, default=1, help="channel/pixel attention reduction r (default 1)")
    p.add_argument("--delta-mode", choices=("fixed", "learnable"), default="fixed")
    p.add_argument("--ssim-window", choices=("gaussian11", "global"), default="gaussian11")
    p.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    p.add_argument("--prompts", type=Path, help="prompt file, one per line (default: two built-in prompts)")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--embeddings", type=Path, help="NLSE embedding file from an offline text encoder")
    src.add_argument("--test-embedder", action="store_true", help="derive embeddings deterministically (default)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nalsuper", description="Text-conditioned low-light image enhancement.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    data = p.add_argument_group("data")
    data.add_argument("--synthetic", type=_positive_int, metavar="COUNT", help="train on COUNT synthetic pairs")
    data.add_argument("--size", type=_positive_int, default=32, help="synthetic image size (default 32)")
    data.add_argument("--low-dir", type=Path)
    data.add_argument("--gt-dir", type=Path)
    _model_flags(p)
    p.add_argument("--loss", choices=("l1", "ssim", "l1+ssim"), default="l1+ssim")
    p.add_argument("--steps", type=_non_negative_int, default=1500)
    p.add_argument("--lr", type=_positive_float, default=1e-4, help="Adam learning rate (default 1e-4)")
    p.add_argument("--batch-size", type=_positive_int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True, help="checkpoint path (.nlsc)")
    p.add_argument("--trace", type=Path, help="loss trace CSV (default: <out>.trace.csv)")
    p.add_argument("--log-every", type=_non_negative_int, default=100)

    p = sub.add_parser("enhance", help="enhance one image with a checkpoint")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--output", type=Path, required=True)

    p = sub.add_parser("eval", help="PSNR/SSIM/MAE of a checkpoint on a paired set")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--low-dir", type=Path, required=True)
    p.add_argument("--gt-dir", type=Path, required=True)
    p.add_argument("--csv", type=Path)

    p = sub.add_parser("gradcheck", help="finite-difference checks of every op and the full model")
    p.add_argument("--channels", type=_positive_int, default=4)
    p.add_argument("--blocks", type=_positive_int, default=2)
    p.add_argument("--size", type=_positive_int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--op-seeds", type=_positive_int, default=3, help="random instances per op (default 3)")
    p.add_argument("--threshold", type=_positive_float, default=1e-3, help="full-model limit (default 1e-3)")
    p.add_argument("--op-threshold", type=_positive_float, help="override every per-op limit")
    p.add_argument("--max-coords", type=_positive_int, help="probe at most this many coordinates per parameter")

    p = sub.add_parser("make-synthetic", help="write synthetic low/gt image pairs")
    p.add_argument("--count", type=_positive_int, default=4)
    p.add_argument("--size", type=_positive_int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", type=Path, required=True)
    p.add_argument("--format", choices=("png", "ppm"), default="png")
    return parser


def _embeddings(args, d_tau: int, seed: int):
    if args.embeddings is not None:
        return load_embeddings(args.embeddings)
    prompts = read_prompts(args.prompts) if args.prompts else list(DEFAULT_PROMPTS)
    return embed_prompts(prompts, d_tau, seed)


def cmd_train(args, parser) -> int:
    if args.synthetic is None and (args.low_dir is None or args.gt_dir is None):
        parser.error("train needs --synthetic COUNT or both --low-dir and --gt-dir")
    if args.synthetic is not None and args.size < 16:
        parser.error("--size must be >= 16 for synthetic data")
    embeddings = _embeddings(args, args.d_tau, args.seed)
    try:
        config = ModelConfig(
            channels=args.channels, num_blocks=args.blocks, attention_dim=args.attention_dim,
            d_tau=embeddings.d_tau, reduction=args.reduction, delta_mode=args.delta_mode,
            ssim_window=args.ssim_window, seed=args.seed, dtype=args.dtype,
        )
    except UsageError as exc:
        parser.error(str(exc))
    if args.synthetic is not None:
        pairs = make_synthetic(args.synthetic, args.size, seed=args.seed)
    else:
        pairs = load_paired_dataset(args.low_dir, args.gt_dir)
    model = init_model(config, embeddings)
    n_params = model.num_parameters()
    logger.info("training %d parameters on %d pairs for %d steps", n_params, len(pairs), args.steps)
    start = time.perf_counter()
    run = train(model, pairs, args.loss, steps=args.steps, seed=args.seed, lr=args.lr,
                batch_size=args.batch_size, checkpoint_path=args.out, log_every=args.log_every)
    trace_path = args.trace or args.out.with_name(args.out.name + ".trace.csv")
    run.write_trace(trace_path)
    last = run.trace[-1] if run.trace else (0, float("nan"), float("nan"), float("nan"))
    print(f"parameters: {n_params} (closed form {parameter_count(config.channels, config.num_blocks, config.attention_dim, config.d_tau, len(embeddings), config.reduction, config.delta_mode == 'learnable')})")
    print(f"initial loss: {run.initial_loss:.6f}")
    print(f"final loss:   {run.final_loss:.6f}")
    print(f"last step:    total={last[1]:.6f} l1={last[2]:.6f} ssim={last[3]:.6f}")
    print(f"checkpoint:   {args.out}  trace: {trace_path}  ({time.perf_counter() - start:.1f}s)")
    return EXIT_OK


def cmd_enhance(args, parser) -> int:
    model = load_checkpoint(args.ckpt)
    write_image(args.output, enhance(model, read_image(args.input)))
    return EXIT_OK


def cmd_eval(args, parser) -> int:
    model = load_checkpoint(args.ckpt)
    report = evaluate(model, load_paired_dataset(args.low_dir, args.gt_dir))
    print(report.to_table())
    if args.csv is not None:
        args.csv.write_text(report.to_csv())
    return EXIT_OK


def cmd_gradcheck(args, parser) -> int:
    from .verify import OP_CASES, model_gradcheck, op_gradcheck, op_tolerance

    ok = True
    print(f"{'case':<24} {'max rel err':>12} {'limit':>8}  result")
    for name in OP_CASES:
        err = max(op_gradcheck(name, args.seed + s) for s in range(args.op_seeds))
        limit = args.op_threshold if args.op_threshold is not None else op_tolerance(name)
        passed = err < limit
        ok &= passed
        print(f"{name:<24} {err:12.3e} {limit:8.0e}  {'PASS' if passed else 'FAIL'}")
    start = time.perf_counter()
    err = model_gradcheck(args.channels, args.blocks, args.size, args.seed, max_coords=args.max_coords)
    passed = err < args.threshold
    ok &= passed
    label = f"model C={args.channels} N={args.blocks}"
    print(f"{label:<24} {err:12.3e} {args.threshold:8.0e}  {'PASS' if passed else 'FAIL'}"
          f"  ({time.perf_counter() - start:.1f}s)")
    return EXIT_OK if ok else EXIT_RUNTIME


def cmd_make_synthetic(args, parser) -> int:
    if args.size < 16:
        parser.error("--size must be >= 16")
    low_dir, gt_dir = args.out_dir / "low", args.out_dir / "gt"
    low_dir.mkdir(parents=True, exist_ok=True)
    gt_dir.mkdir(parents=True, exist_ok=True)
    for pair in make_synthetic(args.count, args.size, seed=args.seed):
        write_image(low_dir / f"{pair.id}.{args.format}", pair.low)
        write_image(gt_dir / f"{pair.id}.{args.format}", pair.gt)
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "enhance": cmd_enhance,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "make-synthetic": cmd_make_synthetic,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args, parser)
    except SystemExit as exc:
        return int(exc.code or 0)
    except NumericAbort as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
