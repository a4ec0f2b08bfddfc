"""Two-step sparse attention masks and their multi-head / non-square deployments.

Mask convention: ``bits[a, b]`` is True when query token ``a`` may attend to
key token ``b``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

PATTERN_NAMES = ("fixed", "ltr", "rtl", "strided", "strided-full")


@dataclass(frozen=True, eq=False)
class AttentionMask:
    """Boolean ``n_query x n_key`` matrix for one attention step."""

    bits: np.ndarray

    def __post_init__(self) -> None:
        bits = self.bits
        # read-only bool arrays are adopted as is; anything else is copied
        if not (isinstance(bits, np.ndarray) and bits.dtype == bool and not bits.flags.writeable):
            bits = np.array(bits, dtype=bool, copy=True)
        if bits.ndim != 2 or 0 in bits.shape:
            raise ValueError(f"mask must be a non-empty 2-D matrix, got shape {bits.shape}")
        empty = np.flatnonzero(~bits.any(axis=1))
        if empty.size:
            raise ValueError(f"mask row {int(empty[0])} attends to nothing")
        if bits.shape[0] == bits.shape[1] and not bits.diagonal().all():
            raise ValueError("square mask must have an all-true diagonal")
        bits.flags.writeable = False
        object.__setattr__(self, "bits", bits)

    @property
    def n_query(self) -> int:
        return self.bits.shape[0]

    @property
    def n_key(self) -> int:
        return self.bits.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.bits.shape

    def count(self) -> int:
        return int(np.count_nonzero(self.bits))

    def transpose(self) -> AttentionMask:
        return AttentionMask(self.bits.T)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, AttentionMask):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self.bits, other.bits))

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True, eq=False)
class PatternFactorization:
    """Ordered step masks plus the metadata needed to rebuild or serialize them.

    ``grid`` is ``(height, width)`` once the factorization has been re-indexed
    by a grid enumeration, otherwise ``None``.
    """

    name: str
    n: int
    stride: int
    steps: tuple[AttentionMask, ...]
    grid: tuple[int, int] | None = field(default=None)

    def __post_init__(self) -> None:
        object.__setattr__(self, "steps", tuple(self.steps))
        if not self.steps:
            raise ValueError("factorization needs at least one step")
        for i, step in enumerate(self.steps):
            if step.n_key != self.n:
                raise ValueError(f"step {i} has {step.n_key} keys, expected {self.n}")
            if i < len(self.steps) - 1 and step.n_query != self.n:
                raise ValueError(f"non-final step {i} must be square")

    @property
    def n_query(self) -> int:
        return self.steps[-1].n_query

    @property
    def is_square(self) -> bool:
        return all(s.n_query == s.n_key for s in self.steps)

    def counts(self) -> list[int]:
        return [s.count() for s in self.steps]

    def total(self) -> int:
        return sum(self.counts())

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PatternFactorization):
            return NotImplemented
        return (
            (self.name, self.n, self.stride, self.grid)
            == (other.name, other.n, other.stride, other.grid)
            and len(self.steps) == len(other.steps)
            and all(a == b for a, b in zip(self.steps, other.steps))
        )

    __hash__ = None  # type: ignore[assignment]


def default_stride(n: int) -> int:
    return math.isqrt(n - 1) + 1 if n > 1 else 1


def _check_stride(n: int, stride: int | None) -> int:
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if stride is None:
        stride = default_stride(n)
    if not 1 <= stride <= n:
        raise ValueError(f"stride must satisfy 1 <= stride <= n, got stride={stride}, n={n}")
    return stride


def _same(values: np.ndarray) -> np.ndarray:
    """``out[a, b] = values[a] == values[b]``.

    Div/mod stay on 1-D vectors and the outer comparison runs in the
    narrowest integer type, which is several times faster at n ~ 1000.
    """
    values = values.astype(np.min_scalar_type(int(values.max())))
    return values[:, None] == values[None, :]


def _owned(*steps: np.ndarray) -> tuple[AttentionMask, ...]:
    """Wrap freshly built arrays without the defensive copy."""
    for bits in steps:
        bits.flags.writeable = False
    return tuple(AttentionMask(bits) for bits in steps)


# np.tri(n, k=k)[a, b] is b <= a + k
def make_fixed(n: int, stride: int | None = None) -> PatternFactorization:
    """Causal fixed pattern: intra-block attention, then the block summaries."""
    s = _check_stride(n, stride)
    idx = np.arange(n)
    causal = np.tri(n, dtype=bool)
    step1 = _same(idx // s) & causal
    step2 = ((idx % s == s - 1)[None, :] & causal) | np.eye(n, dtype=bool)
    return PatternFactorization("fixed", n, s, _owned(step1, step2))


def make_ltr(n: int, stride: int | None = None) -> PatternFactorization:
    """Bidirectional fixed pattern (left to right), which has full information.

    The last token of every block, including a trailing partial block, is a
    summary that everyone attends to in the second step.
    """
    s = _check_stride(n, stride)
    idx = np.arange(n)
    step1 = _same(idx // s)
    step2 = ((idx % s == s - 1) | (idx == n - 1))[None, :] | np.eye(n, dtype=bool)
    return PatternFactorization("ltr", n, s, _owned(step1, step2))


def make_rtl(n: int, stride: int | None = None) -> PatternFactorization:
    """Right-to-left pattern: LTR with each step transposed and the order swapped.

    Reversing the order is what makes the reachability relation (and not just
    the individual masks) the transpose of LTR's.
    """
    s = _check_stride(n, stride)
    idx = np.arange(n)
    # built directly: ltr's summary columns become rows, its block step is symmetric
    step1 = ((idx % s == s - 1) | (idx == n - 1))[:, None] | np.eye(n, dtype=bool)
    step2 = _same(idx // s)
    return PatternFactorization("rtl", n, s, _owned(step1, step2))


def make_strided(n: int, stride: int | None = None) -> PatternFactorization:
    s = _check_stride(n, stride)
    causal = np.tri(n, dtype=bool)
    step1 = causal & ~np.tri(n, k=-s, dtype=bool)
    step2 = causal & _same(np.arange(n) % s)
    return PatternFactorization("strided", n, s, _owned(step1, step2))


def make_strided_full(n: int, stride: int | None = None) -> PatternFactorization:
    """Strided pattern made bidirectional so that it has full information."""
    s = _check_stride(n, stride)
    step1 = np.tri(n, k=s - 1, dtype=bool) & ~np.tri(n, k=-s, dtype=bool)
    step2 = _same(np.arange(n) % s)
    return PatternFactorization(
        "strided-full", n, s, _owned(step1, step2)
    )


CONSTRUCTORS = {
    "fixed": make_fixed,
    "ltr": make_ltr,
    "rtl": make_rtl,
    "strided": make_strided,
    "strided-full": make_strided_full,
}


def make_pattern(name: str, n: int, stride: int | None = None) -> PatternFactorization:
    try:
        build = CONSTRUCTORS[name]
    except KeyError:
        raise ValueError(
            f"unknown pattern {name!r}; expected one of {', '.join(PATTERN_NAMES)}"
        ) from None
    return build(n, stride)


def expand_nonsquare(f: PatternFactorization, query_count: int) -> PatternFactorization:
    """Tile the final (key-reading) step over ``query_count`` query rows.

    Query row ``q`` of the expanded step copies row ``q mod n`` of the square
    step, so every consecutive block of ``n`` queries sees the full pattern.
    """
    if not f.is_square:
        raise ValueError("factorization is already expanded")
    if query_count < 1 or query_count % f.n:
        raise ValueError(f"query_count {query_count} is not a positive multiple of n={f.n}")
    rows = np.arange(query_count) % f.n
    last = AttentionMask(f.steps[-1].bits[rows])
    return PatternFactorization(f.name, f.n, f.stride, f.steps[:-1] + (last,), f.grid)


def split_query_blocks(f: PatternFactorization) -> list[PatternFactorization]:
    """Inverse view of :func:`expand_nonsquare`: one square factorization per query block."""
    blocks = []
    for start in range(0, f.n_query, f.n):
        last = AttentionMask(f.steps[-1].bits[start : start + f.n])
        blocks.append(PatternFactorization(f.name, f.n, f.stride, f.steps[:-1] + (last,), f.grid))
    return blocks


def head_assignment(n: int, stride: int | None = None) -> list[tuple[int, AttentionMask]]:
    """Eight heads: every LTR and RTL step on its own head, each used twice."""
    ltr = make_ltr(n, stride)
    rtl = make_rtl(n, stride)
    masks = [*ltr.steps, *rtl.steps] * 2
    return list(enumerate(masks))
