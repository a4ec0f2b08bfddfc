"""``ylg`` command line.

Exit codes:
    0  success (``check``: full information holds)
    1  ``check`` only: full information fails
    2  bad arguments, unknown pattern/format, malformed mask file
    3  I/O failure
    4  numerical failure (fully masked row, diverged inversion)

Standard output carries only JSON or CSV; diagnostics go to standard error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import formats
from .attention import AttentionWeights, gradient_check, masked_attention, multihead_attention
from .grid import apply_esa_to_factorization, esa_enumeration
from .ifg import blockwise_full_information, build_ifg, edge_stats
from .inversion import (
    DivergenceError,
    EmbeddingFunction,
    InversionConfig,
    SaliencyMap,
    invert,
    truncated_normal,
)
from .patterns import PATTERN_NAMES, PatternFactorization, expand_nonsquare, make_pattern

EXIT_OK, EXIT_FALSE, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3, 4


class CommandError(Exception):
    def __init__(self, message: str, code: int) -> None:
        super().__init__(message)
        self.code = code


def default_seed() -> int:
    value = os.environ.get("YLG_SEED")
    if value is None:
        return 0
    try:
        return int(value)
    except ValueError:
        raise CommandError(f"YLG_SEED must be an integer, got {value!r}", EXIT_USAGE) from None


def _grid(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None
    return h, w


def _load(path: str, empty_row_code: int = EXIT_USAGE) -> PatternFactorization:
    try:
        return formats.read_maskfile(path)
    except formats.FullyMaskedRowError as exc:
        raise CommandError(f"{path}: {exc}", empty_row_code) from None
    except formats.MaskFileError as exc:
        raise CommandError(f"{path}: {exc}", EXIT_USAGE) from None
    except OSError as exc:
        raise CommandError(f"{path}: {exc.strerror or exc}", EXIT_IO) from None


def _write(path: str | Path, text: str) -> None:
    try:
        Path(path).write_text(text, encoding="ascii")
    except OSError as exc:
        raise CommandError(f"{path}: {exc.strerror or exc}", EXIT_IO) from None


def build_factorization(
    pattern: str,
    n: int,
    stride: int | None = None,
    esa: tuple[int, int] | None = None,
    query_count: int | None = None,
) -> PatternFactorization:
    f = make_pattern(pattern, n, stride)
    if esa is not None:
        h, w = esa
        if h * w != n:
            raise ValueError(f"--esa {h}x{w} holds {h * w} cells, but n={n}")
        f = apply_esa_to_factorization(f, esa_enumeration(h, w))
    if query_count is not None:
        f = expand_nonsquare(f, query_count)
    return f


def cmd_gen(args: argparse.Namespace) -> int:
    try:
        f = build_factorization(args.pattern, args.n, args.stride, args.esa, args.queries)
    except ValueError as exc:
        raise CommandError(str(exc), EXIT_USAGE) from None
    _write(args.out, formats.dumps_maskfile(f))
    return EXIT_OK


def stats_report(f: PatternFactorization) -> dict:
    verdict = blockwise_full_information(f)
    stats = edge_stats(build_ifg(f, expanded=True))
    return {
        "pattern": f.name,
        "n": f.n,
        "n_query": f.n_query,
        "stride": f.stride,
        "esa": None if f.grid is None else f"{f.grid[0]}x{f.grid[1]}",
        "step_counts": stats.edges_per_step,
        "total": stats.total_edges,
        "density": stats.density,
        "full_information": bool(verdict.full_information),
        "witness": None if verdict.witness is None else list(verdict.witness),
        "budget_ratio": stats.total_edges / (f.n * math.sqrt(f.n)),
    }


def cmd_check(args: argparse.Namespace) -> int:
    f = _load(args.input)
    report = stats_report(f)
    print(json.dumps(report))
    return EXIT_OK if report["full_information"] else EXIT_FALSE


def cmd_viz(args: argparse.Namespace) -> int:
    f = _load(args.input)
    out = Path(args.out)
    if args.format == "dot":
        _write(out, formats.factorization_dot(f))
        written = [str(out)]
    else:
        written = []
        for i, step in enumerate(f.steps):
            path = out.with_name(f"{out.stem}.step{i}.pbm") if len(f.steps) > 1 else out
            _write(path, formats.to_pbm(step))
            written.append(str(path))
    print(json.dumps({"written": written}))
    return EXIT_OK


def attend_report(f: PatternFactorization, seed: int, embed_dim: int) -> dict:
    """Masked attention smoke run: one head per step, seeded random inputs."""
    rng = np.random.default_rng(seed)
    n_query = max(step.n_query for step in f.steps)
    x = rng.standard_normal((n_query, embed_dim))
    y = rng.standard_normal((f.n, embed_dim))
    heads = [
        (AttentionWeights.random(rng, embed_dim, embed_dim, embed_dim, embed_dim, 1 / math.sqrt(embed_dim)), step)
        for step in f.steps
    ]
    if all(step.n_query == n_query for step in f.steps):
        outputs, combined = multihead_attention(x, y, heads)
    else:
        outputs = [masked_attention(x[: m.n_query], y, w, m) for w, m in heads]
        combined = np.concatenate([o.output.reshape(-1) for o in outputs])
    row_dev = max(float(np.max(np.abs(o.attention_map.sum(axis=1) - 1.0))) for o in outputs)
    masked_leak = max(float(np.max(np.abs(np.where(m.bits, 0.0, o.attention_map)))) for (_, m), o in zip(heads, outputs))

    grad_err = 0.0
    for w, m in heads:
        xq = x[: m.n_query]
        upstream = rng.standard_normal((m.n_query, embed_dim))
        errors = gradient_check(xq, y, w, m, upstream, max_coords=16, rng=rng)
        grad_err = max(grad_err, *errors.values())
    return {
        "checksum": hashlib.sha256(np.ascontiguousarray(combined).tobytes()).hexdigest(),
        "output_sum": float(combined.sum()),
        "row_sum_max_deviation": row_dev,
        "masked_max_probability": masked_leak,
        "grad_check_max_rel_error": grad_err,
        "heads": len(heads),
    }


def cmd_attend(args: argparse.Namespace) -> int:
    f = _load(args.input, empty_row_code=EXIT_NUMERIC)
    if args.tokens is not None and args.tokens != f.n:
        raise CommandError(f"--tokens {args.tokens} does not match mask with {f.n} keys", EXIT_USAGE)
    if f.n_query > 1024 or f.n > 256:
        raise CommandError("attend is a smoke test; use at most 256 key tokens", EXIT_USAGE)
    seed = default_seed() if args.seed is None else args.seed
    try:
        report = attend_report(f, seed, args.embed_dim)
    except ValueError as exc:
        raise CommandError(str(exc), EXIT_NUMERIC) from None
    print(json.dumps(report))
    return EXIT_OK


def linear_demo_problem(dim: int, seed: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Well-conditioned ``A`` (singular values in [1, 2]), true latent and its image ``A z``."""
    rng = np.random.default_rng([seed, 1])
    u, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    v, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    a = u @ np.diag(np.linspace(1.0, 2.0, dim)) @ v.T
    z_true = truncated_normal(dim, 2.0, rng)
    return a, z_true, a @ z_true


def run_linear_demo(dim: int, seed: int, cfg: InversionConfig):
    """Invert ``x = A z`` with a 1x1 embedding grid carrying ``dim`` channels."""
    a, z_true, x = linear_demo_problem(dim, seed)
    generator = EmbeddingFunction.linear(a, (1, 1, dim))
    embed = EmbeddingFunction.identity((1, 1, dim))
    result = invert(generator, embed, x, [SaliencyMap.uniform(1, 1)], cfg, dim=dim)
    z_star = np.linalg.solve(a, x)
    return result, z_star, z_true


def cmd_invert_demo(args: argparse.Namespace) -> int:
    if not 1 <= args.dim <= 64:
        raise CommandError("--dim must be between 1 and 64", EXIT_USAGE)
    seed = default_seed() if args.seed is None else args.seed
    try:
        cfg = InversionConfig(learning_rate=args.lr, max_steps=args.steps, seed=seed)
    except ValueError as exc:
        raise CommandError(str(exc), EXIT_USAGE) from None
    try:
        result, z_star, _ = run_linear_demo(args.dim, seed, cfg)
    except DivergenceError as exc:
        raise CommandError(f"inversion diverged at step {exc.step}", EXIT_NUMERIC) from None
    if args.trace is not None:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(["step", "loss"])
        writer.writerows((i, repr(loss)) for i, loss in enumerate(result.trace))
        _write(args.trace, buffer.getvalue())
    print(
        json.dumps(
            {
                "dim": args.dim,
                "seed": seed,
                "steps_run": result.steps_run,
                "final_loss": result.final_loss,
                "final_error": float(np.linalg.norm(result.z - z_star)),
            }
        )
    )
    return EXIT_OK


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ylg", description="Two-dimensional local sparse attention tools.")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="construct a pattern and write a mask file")
    gen.add_argument("pattern", choices=PATTERN_NAMES)
    gen.add_argument("n", type=int)
    gen.add_argument("stride", type=int, nargs="?", default=None)
    gen.add_argument("--esa", type=_grid, metavar="HxW", help="re-index on an HxW grid")
    gen.add_argument("--queries", type=int, help="tile the final step over this many query rows")
    gen.add_argument("-o", "--out", required=True)
    gen.set_defaults(func=cmd_gen)

    check = sub.add_parser("check", help="print stats and the full-information verdict")
    check.add_argument("input")
    check.set_defaults(func=cmd_check)

    viz = sub.add_parser("viz", help="export PBM bitmaps or a DOT graph")
    viz.add_argument("input")
    viz.add_argument("-o", "--out", required=True)
    viz.add_argument("--format", choices=("pbm", "dot"), default="pbm")
    viz.set_defaults(func=cmd_viz)

    attend = sub.add_parser("attend", help="masked attention smoke test")
    attend.add_argument("input")
    attend.add_argument("--seed", type=int)
    attend.add_argument("--tokens", type=int)
    attend.add_argument("--embed-dim", type=int, default=8)
    attend.set_defaults(func=cmd_attend)

    demo = sub.add_parser("invert-demo", help="saliency-weighted inversion of a linear toy generator")
    demo.add_argument("--dim", type=int, default=8)
    demo.add_argument("--seed", type=int)
    demo.add_argument("--steps", type=int, default=1500)
    demo.add_argument("--lr", type=float, default=0.05)
    demo.add_argument("--trace", help="write the per-step best loss as CSV")
    demo.set_defaults(func=cmd_invert_demo)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = make_parser().parse_args(argv)
    except SystemExit as exc:  # argparse usage errors and --help
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        return args.func(args)
    except CommandError as exc:
        print(f"ylg {args.command}: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
