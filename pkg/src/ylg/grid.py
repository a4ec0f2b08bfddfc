"""Grid enumerations and the enumerate/shift/apply (ESA) re-indexing of 1-D masks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .patterns import AttentionMask, PatternFactorization


@dataclass(frozen=True, eq=False)
class GridEnumeration:
    """Bijection between the cells of a ``height x width`` grid and ranks.

    ``ranks`` holds, for every row-major token index ``i = row * width + col``,
    the rank of that cell; ``cells`` is the inverse permutation.
    """

    height: int
    width: int
    ranks: np.ndarray

    def __post_init__(self) -> None:
        ranks = np.asarray(self.ranks, dtype=np.int64).reshape(-1)
        size = self.height * self.width
        if ranks.size != size or not np.array_equal(np.sort(ranks), np.arange(size)):
            raise ValueError("ranks must be a permutation of range(height * width)")
        ranks = ranks.copy()
        ranks.flags.writeable = False
        object.__setattr__(self, "ranks", ranks)
        cells = np.empty_like(ranks)
        cells[ranks] = np.arange(size)
        cells.flags.writeable = False
        object.__setattr__(self, "cells", cells)

    @property
    def size(self) -> int:
        return self.height * self.width

    def rank_of(self, row: int, col: int) -> int:
        if not (0 <= row < self.height and 0 <= col < self.width):
            raise IndexError(f"cell ({row}, {col}) outside {self.height}x{self.width} grid")
        return int(self.ranks[row * self.width + col])

    def cell_of(self, rank: int) -> tuple[int, int]:
        index = int(self.cells[rank])
        return divmod(index, self.width)

    def table(self) -> np.ndarray:
        """Ranks laid out on the grid."""
        return self.ranks.reshape(self.height, self.width).copy()

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, GridEnumeration):
            return NotImplemented
        return (self.height, self.width) == (other.height, other.width) and bool(
            np.array_equal(self.ranks, other.ranks)
        )

    __hash__ = None  # type: ignore[assignment]


def _check_dims(height: int, width: int) -> None:
    if height < 1 or width < 1:
        raise ValueError(f"grid dimensions must be >= 1, got {height}x{width}")


def row_major(height: int, width: int) -> GridEnumeration:
    _check_dims(height, width)
    return GridEnumeration(height, width, np.arange(height * width))


def esa_enumeration(height: int, width: int) -> GridEnumeration:
    """Rank cells by Manhattan distance from (0, 0), ties broken by row then column."""
    _check_dims(height, width)
    rows, cols = np.divmod(np.arange(height * width), width)
    # lexsort uses the last key as primary
    order = np.lexsort((cols, rows, rows + cols))
    ranks = np.empty(height * width, dtype=np.int64)
    ranks[order] = np.arange(height * width)
    return GridEnumeration(height, width, ranks)


def apply_enumeration(mask: AttentionMask, e: GridEnumeration) -> AttentionMask:
    """Re-index a square 1-D mask so rank ``r`` lands on the cell holding rank ``r``.

    ``out[i, j] = mask[rank(i), rank(j)]`` for row-major token indices ``i, j``.
    """
    if mask.n_query != mask.n_key or mask.n_key != e.size:
        raise ValueError(
            f"mask of shape {mask.shape} does not match a {e.height}x{e.width} grid"
        )
    r = e.ranks
    return AttentionMask(mask.bits[np.ix_(r, r)])


def apply_esa_to_factorization(f: PatternFactorization, e: GridEnumeration) -> PatternFactorization:
    if not f.is_square:
        raise ValueError("apply the grid enumeration before non-square expansion")
    steps = tuple(apply_enumeration(step, e) for step in f.steps)
    return PatternFactorization(f.name, f.n, f.stride, steps, (e.height, e.width))
