"""Text formats: mask files, PBM bitmaps, DOT graphs and adjacency lists.

Mask file layout::

    YLGM1
    name=ltr n_query=9 n_key=9 steps=2 stride=3 esa=none
    111000000
    ...                      <- one line of 0/1 per query row
                             <- blank line between steps
    100100100
    ...

``esa`` is ``none`` or ``HxW``.  Every step except the last is square
(``n_key`` rows); the last step has ``n_query`` rows.
"""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np

from .ifg import InformationFlowGraph, build_ifg
from .patterns import PATTERN_NAMES, AttentionMask, PatternFactorization

MAGIC = "YLGM1"
# hand-made masks that do not come from a pattern constructor
EXTRA_NAMES = ("custom", "dense")
_HEADER = re.compile(
    r"name=(?P<name>\S+) n_query=(?P<n_query>\d+) n_key=(?P<n_key>\d+) "
    r"steps=(?P<steps>\d+) stride=(?P<stride>\d+) esa=(?P<esa>none|\d+x\d+)"
)


class MaskFileError(ValueError):
    """Malformed mask file."""


class FullyMaskedRowError(MaskFileError):
    """A mask row attends to nothing."""


def dumps_maskfile(f: PatternFactorization) -> str:
    esa = "none" if f.grid is None else f"{f.grid[0]}x{f.grid[1]}"
    lines = [
        MAGIC,
        f"name={f.name} n_query={f.n_query} n_key={f.n} steps={len(f.steps)} "
        f"stride={f.stride} esa={esa}",
    ]
    for i, step in enumerate(f.steps):
        if i:
            lines.append("")
        lines.extend("".join("1" if b else "0" for b in row) for row in step.bits)
    return "\n".join(lines) + "\n"


def loads_maskfile(text: str) -> PatternFactorization:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if len(lines) < 3 or lines[0] != MAGIC:
        raise MaskFileError(f"missing {MAGIC} magic line")
    header = _HEADER.fullmatch(lines[1])
    if header is None:
        raise MaskFileError(f"bad header line: {lines[1]!r}")
    name = header["name"]
    if name not in PATTERN_NAMES and name not in EXTRA_NAMES:
        raise MaskFileError(f"unknown pattern name {name!r}")
    n_query, n_key = int(header["n_query"]), int(header["n_key"])
    step_count, stride = int(header["steps"]), int(header["stride"])

    blocks: list[list[str]] = [[]]
    for line in lines[2:]:
        if line == "":
            blocks.append([])
        else:
            blocks[-1].append(line)
    if len(blocks) != step_count:
        raise MaskFileError(f"header announces {step_count} steps, found {len(blocks)}")

    steps = []
    for i, rows in enumerate(blocks):
        expected = n_query if i == step_count - 1 else n_key
        if len(rows) != expected:
            raise MaskFileError(f"step {i} has {len(rows)} rows, expected {expected}")
        for r, row in enumerate(rows):
            if len(row) != n_key or set(row) - {"0", "1"}:
                raise MaskFileError(f"step {i} row {r} is not {n_key} characters of 0/1")
        bits = np.array([[c == "1" for c in row] for row in rows], dtype=bool)
        empty = np.flatnonzero(~bits.any(axis=1))
        if empty.size:
            raise FullyMaskedRowError(f"step {i} row {int(empty[0])} attends to nothing")
        try:
            steps.append(AttentionMask(bits))
        except ValueError as exc:
            raise MaskFileError(f"step {i}: {exc}") from None

    grid = None
    if header["esa"] != "none":
        h, w = (int(v) for v in header["esa"].split("x"))
        if h * w != n_key:
            raise MaskFileError(f"esa grid {h}x{w} does not hold {n_key} tokens")
        grid = (h, w)
    try:
        return PatternFactorization(name, n_key, stride, tuple(steps), grid)
    except ValueError as exc:
        raise MaskFileError(str(exc)) from None


def write_maskfile(path: str | Path, f: PatternFactorization) -> None:
    Path(path).write_text(dumps_maskfile(f), encoding="ascii")


def read_maskfile(path: str | Path) -> PatternFactorization:
    try:
        text = Path(path).read_text(encoding="ascii")
    except UnicodeDecodeError:
        raise MaskFileError("mask file is not ASCII") from None
    return loads_maskfile(text)


def to_pbm(mask: AttentionMask) -> str:
    """Plain (P1) bitmap, attended cells black."""
    rows = [" ".join("1" if b else "0" for b in row) for row in mask.bits]
    return f"P1\n{mask.n_key} {mask.n_query}\n" + "\n".join(rows) + "\n"


def to_dot(g: InformationFlowGraph, name: str = "ifg") -> str:
    lines = [f"digraph {name} {{", "  rankdir=LR;", "  node [shape=circle];"]
    for layer, size in enumerate(g.layer_sizes):
        nodes = " ".join(f'"{layer}:{i}" [label="{i}"];' for i in range(size))
        lines.append(f"  subgraph layer{layer} {{ rank=same; {nodes} }}")
    for step in range(g.steps):
        for u, v in g.edges(step):
            lines.append(f'  "{step}:{u}" -> "{step + 1}:{v}";')
    lines.append("}")
    return "\n".join(lines) + "\n"


def to_adjacency(g: InformationFlowGraph) -> str:
    """One line per node: ``layer:node -> successors``."""
    lines = []
    for step in range(g.steps):
        for u in range(g.layer_sizes[step]):
            succ = " ".join(str(int(v)) for v in g.successors(step, u))
            lines.append(f"{step}:{u} -> {succ}")
    return "\n".join(lines) + "\n"


def factorization_dot(f: PatternFactorization) -> str:
    return to_dot(build_ifg(f, expanded=True), name=f.name.replace("-", "_"))
