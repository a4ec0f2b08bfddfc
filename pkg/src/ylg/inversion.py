"""Saliency-weighted latent inversion.

A saliency map is the average attention each key pixel receives over all
query pixels.  Inversion minimises the squared embedding distance between
``embed(generator(z))`` and ``embed(target)``, elementwise-weighted by the
saliency map projected onto the embedding grid, summed over heads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


@dataclass(frozen=True, eq=False)
class SaliencyMap:
    weights: np.ndarray

    def __post_init__(self) -> None:
        w = np.array(self.weights, dtype=np.float64)
        if w.ndim != 2 or 0 in w.shape:
            raise ValueError(f"saliency must be a non-empty 2-D grid, got shape {w.shape}")
        if not np.all(np.isfinite(w)) or np.any(w < 0):
            raise ValueError("saliency weights must be finite and non-negative")
        if abs(w.sum() - 1.0) > 1e-6:
            raise ValueError(f"saliency weights sum to {w.sum()!r}, expected 1")
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)

    @property
    def height(self) -> int:
        return self.weights.shape[0]

    @property
    def width(self) -> int:
        return self.weights.shape[1]

    @classmethod
    def uniform(cls, height: int, width: int) -> SaliencyMap:
        return cls(np.full((height, width), 1.0 / (height * width)))


def saliency_from_map(attention_map: np.ndarray, key_height: int, key_width: int) -> SaliencyMap:
    p = np.asarray(attention_map, dtype=np.float64)
    if p.ndim != 2 or p.shape[1] != key_height * key_width:
        raise ValueError(
            f"attention map of shape {p.shape} does not cover a {key_height}x{key_width} key grid"
        )
    if not np.allclose(p.sum(axis=1), 1.0, atol=1e-6):
        raise ValueError("attention map rows must sum to 1")
    s = p.mean(axis=0)
    return SaliencyMap((s / s.sum()).reshape(key_height, key_width))


def project_saliency(s: SaliencyMap, target_height: int, target_width: int) -> SaliencyMap:
    """Nearest-neighbour resample onto a new grid, then renormalise."""
    if target_height < 1 or target_width < 1:
        raise ValueError(f"target grid must be at least 1x1, got {target_height}x{target_width}")
    if (target_height, target_width) == s.weights.shape:
        return s
    rows = (np.arange(target_height) * s.height) // target_height
    cols = (np.arange(target_width) * s.width) // target_width
    w = s.weights[np.ix_(rows, cols)]
    total = w.sum()
    if total == 0:
        raise ValueError("projection dropped all saliency mass")
    return SaliencyMap(w / total)


def _grid_weights(e: np.ndarray, s: SaliencyMap) -> np.ndarray:
    if e.ndim not in (2, 3):
        raise ValueError(f"embedding must be (H, W) or (H, W, C), got shape {e.shape}")
    if e.shape[:2] != s.weights.shape:
        raise ValueError(f"saliency grid {s.weights.shape} does not match embedding grid {e.shape[:2]}")
    return s.weights if e.ndim == 2 else s.weights[:, :, None]


def weighted_embedding_loss(
    e_gen: np.ndarray, e_real: np.ndarray, s_proj: SaliencyMap
) -> tuple[float, np.ndarray]:
    """``||(e_gen - e_real) * S||^2`` and its gradient with respect to ``e_gen``.

    The weight broadcasts over channels and is squared along with the difference.
    """
    e_gen = np.asarray(e_gen, dtype=np.float64)
    e_real = np.asarray(e_real, dtype=np.float64)
    if e_gen.shape != e_real.shape:
        raise ValueError(f"embedding shapes differ: {e_gen.shape} vs {e_real.shape}")
    s = _grid_weights(e_gen, s_proj)
    diff = e_gen - e_real
    weighted = diff * s
    return float(np.sum(weighted * weighted)), 2.0 * weighted * s


def multihead_weighted_loss(
    e_gen: np.ndarray,
    e_real: np.ndarray,
    saliencies: Sequence[SaliencyMap],
    heads: Sequence[int] | None = None,
) -> tuple[float, np.ndarray]:
    """Sum of per-head weighted losses.

    ``heads`` keeps only the listed head indices (manual head pruning).
    """
    if heads is not None:
        saliencies = [saliencies[i] for i in heads]
    if not saliencies:
        raise ValueError("need at least one saliency map")
    e_gen = np.asarray(e_gen, dtype=np.float64)
    if e_gen.ndim not in (2, 3):
        raise ValueError(f"embedding must be (H, W) or (H, W, C), got shape {e_gen.shape}")
    height, width = e_gen.shape[:2]
    total = 0.0
    grad = np.zeros_like(e_gen)
    for s in saliencies:
        loss, g = weighted_embedding_loss(e_gen, e_real, project_saliency(s, height, width))
        total += loss
        grad += g
    return total, grad


def truncated_normal(dim: int, threshold: float = 2.0, seed: int | np.random.Generator | None = None) -> np.ndarray:
    """Standard normal draws, each coordinate redrawn until ``|value| <= threshold``."""
    if not threshold > 0:
        raise ValueError(f"threshold must be positive, got {threshold}")
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(dim)
    bad = np.abs(z) > threshold
    while bad.any():
        z[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(z) > threshold
    return z


@dataclass(frozen=True)
class InversionConfig:
    learning_rate: float = 0.05
    max_steps: int = 1500
    truncation_threshold: float = 2.0
    lookahead_k: int = 5
    lookahead_alpha: float = 0.5
    seed: int = 0
    tolerance: float = 0.0

    def __post_init__(self) -> None:
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.max_steps < 0:  # 0 evaluates the initial latent only
            raise ValueError("max_steps must be non-negative")
        if self.lookahead_k < 1:
            raise ValueError("lookahead_k must be >= 1")
        if not 0 < self.lookahead_alpha <= 1:
            raise ValueError("lookahead_alpha must be in (0, 1]")
        if not self.truncation_threshold > 0:
            raise ValueError("truncation_threshold must be positive")


def lookahead_step(
    slow: np.ndarray,
    fast: np.ndarray,
    step: int,
    gradient: np.ndarray,
    cfg: InversionConfig,
) -> tuple[np.ndarray, np.ndarray]:
    """One inner gradient step on the fast weights; on every ``k``-th step
    (``step`` counts from 1) the slow weights move ``alpha`` of the way to the
    fast weights and the fast weights restart from there."""
    slow = np.asarray(slow, dtype=np.float64)
    fast = np.asarray(fast, dtype=np.float64)
    gradient = np.asarray(gradient, dtype=np.float64)
    if not slow.shape == fast.shape == gradient.shape:
        raise ValueError(
            f"shape mismatch: slow {slow.shape}, fast {fast.shape}, gradient {gradient.shape}"
        )
    fast = fast - cfg.learning_rate * gradient
    if step % cfg.lookahead_k == 0:
        slow = slow + cfg.lookahead_alpha * (fast - slow)
        fast = slow.copy()
    return slow, fast


@dataclass
class EmbeddingFunction:
    """A differentiable map given by ``forward`` and an optional vector-Jacobian product.

    Without ``vjp`` the pullback falls back to central finite differences.
    """

    forward: Callable[[np.ndarray], np.ndarray]
    vjp: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None
    fd_epsilon: float = 1e-6

    def __call__(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(self.forward(z), dtype=np.float64)

    def pullback(self, z: np.ndarray, upstream: np.ndarray) -> np.ndarray:
        if self.vjp is not None:
            return np.asarray(self.vjp(z, upstream), dtype=np.float64)
        z = np.asarray(z, dtype=np.float64)
        grad = np.empty(z.size)
        flat = z.reshape(-1)
        for i in range(flat.size):
            step = np.zeros_like(flat)
            step[i] = self.fd_epsilon
            hi = self((flat + step).reshape(z.shape))
            lo = self((flat - step).reshape(z.shape))
            grad[i] = np.sum(upstream * (hi - lo)) / (2 * self.fd_epsilon)
        return grad.reshape(z.shape)

    @classmethod
    def identity(cls, shape: tuple[int, ...] | None = None) -> EmbeddingFunction:
        if shape is None:
            return cls(lambda z: np.asarray(z, dtype=np.float64), lambda z, g: g)
        return cls(
            lambda z: np.asarray(z, dtype=np.float64).reshape(shape),
            lambda z, g: np.asarray(g).reshape(np.shape(z)),
        )

    @classmethod
    def linear(cls, a: np.ndarray, shape: tuple[int, ...] | None = None) -> EmbeddingFunction:
        """``z -> a @ z`` (optionally reshaped)."""
        a = np.asarray(a, dtype=np.float64)
        out_shape = shape or (a.shape[0],)
        return cls(
            lambda z: (a @ np.asarray(z, dtype=np.float64)).reshape(out_shape),
            lambda z, g: a.T @ np.asarray(g).reshape(-1),
        )


def compose(outer: EmbeddingFunction, inner: EmbeddingFunction) -> EmbeddingFunction:
    def vjp(z, g):
        return inner.pullback(z, outer.pullback(inner(z), g))

    return EmbeddingFunction(lambda z: outer(inner(z)), vjp)


class DivergenceError(ArithmeticError):
    def __init__(self, step: int, loss: float) -> None:
        super().__init__(f"loss became non-finite ({loss!r}) at step {step}")
        self.step = step
        self.loss = loss


@dataclass
class InversionResult:
    z: np.ndarray
    trace: list[float]
    steps_run: int
    final_loss: float = field(init=False)

    def __post_init__(self) -> None:
        self.final_loss = self.trace[-1]


def invert(
    generator: EmbeddingFunction,
    discriminator_embed: EmbeddingFunction,
    target: np.ndarray,
    saliencies: Sequence[SaliencyMap],
    cfg: InversionConfig = InversionConfig(),
    *,
    dim: int | None = None,
    z0: np.ndarray | None = None,
    heads: Sequence[int] | None = None,
    space: str = "discriminator",
) -> InversionResult:
    """Find a latent whose generated image matches ``target`` in embedding space.

    ``trace[i]`` is the best loss seen after ``i`` optimisation steps (entry 0
    is the initial loss) and never increases.  ``space="generator"`` weights
    the raw generator output instead of the discriminator embedding; it is
    kept only as a comparison mode.
    """
    if space not in ("discriminator", "generator"):
        raise ValueError(f"unknown loss space {space!r}")
    if z0 is None:
        if dim is None:
            raise ValueError("pass either dim or z0")
        z0 = truncated_normal(dim, cfg.truncation_threshold, cfg.seed)
    embed = discriminator_embed if space == "discriminator" else EmbeddingFunction.identity()
    pipeline = compose(embed, generator)
    e_real = embed(np.asarray(target, dtype=np.float64))

    def loss_and_grad(z: np.ndarray) -> tuple[float, np.ndarray]:
        # overflow is reported as DivergenceError below
        with np.errstate(over="ignore", invalid="ignore"):
            loss, g_embed = multihead_weighted_loss(pipeline(z), e_real, saliencies, heads)
            return loss, pipeline.pullback(z, g_embed)

    slow = np.array(z0, dtype=np.float64)
    fast = slow.copy()
    loss, grad = loss_and_grad(fast)
    if not math.isfinite(loss):
        raise DivergenceError(0, loss)
    best_z, best = fast.copy(), loss
    trace = [best]
    steps_run = 0
    for step in range(1, cfg.max_steps + 1):
        if best <= cfg.tolerance:
            break
        slow, fast = lookahead_step(slow, fast, step, grad, cfg)
        steps_run = step
        loss, grad = loss_and_grad(fast)
        if not math.isfinite(loss) or not np.all(np.isfinite(grad)):
            raise DivergenceError(step, loss)
        if loss < best:
            best_z, best = fast.copy(), loss
        trace.append(best)
    return InversionResult(best_z, trace, steps_run)
