"""Reference dense / masked multi-head attention in float64 with analytic gradients.

Queries come from ``x``, keys and values from ``y``:

    out = softmax(x W_q (y W_k)^T) y W_v

Logits are not scaled by ``1/sqrt(E)`` unless ``scale=True`` is passed.
Masked positions are left out of the softmax normalisation, so their
probabilities are exactly zero.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .patterns import AttentionMask, PatternFactorization


@dataclass(frozen=True)
class AttentionWeights:
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray

    def __post_init__(self) -> None:
        for name in ("w_q", "w_k", "w_v"):
            value = np.asarray(getattr(self, name), dtype=np.float64)
            if value.ndim != 2:
                raise ValueError(f"{name} must be a matrix, got shape {value.shape}")
            if not np.all(np.isfinite(value)):
                raise ValueError(f"{name} has non-finite entries")
            object.__setattr__(self, name, value)
        if self.w_q.shape[1] != self.w_k.shape[1]:
            raise ValueError(
                f"query and key projections disagree on width: {self.w_q.shape} vs {self.w_k.shape}"
            )
        if self.w_k.shape[0] != self.w_v.shape[0]:
            raise ValueError("w_k and w_v must read the same input width")

    @classmethod
    def random(
        cls,
        rng: np.random.Generator,
        e_x: int,
        e_y: int,
        e: int,
        e_v: int,
        scale: float = 1.0,
    ) -> AttentionWeights:
        return cls(
            scale * rng.standard_normal((e_x, e)),
            scale * rng.standard_normal((e_y, e)),
            scale * rng.standard_normal((e_y, e_v)),
        )


class AttentionOutput(NamedTuple):
    output: np.ndarray
    attention_map: np.ndarray


class AttentionGradients(NamedTuple):
    x: np.ndarray
    y: np.ndarray
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray


def _tokens(name: str, a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or 0 in a.shape:
        raise ValueError(f"{name} must be a non-empty token matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} has non-finite entries")
    return a


def _mask_bits(mask: AttentionMask | np.ndarray | None, shape: tuple[int, int]) -> np.ndarray:
    if mask is None:
        return np.ones(shape, dtype=bool)
    bits = mask.bits if isinstance(mask, AttentionMask) else np.asarray(mask, dtype=bool)
    if bits.shape != shape:
        raise ValueError(f"mask shape {bits.shape} does not match logits shape {shape}")
    empty = np.flatnonzero(~bits.any(axis=1))
    if empty.size:
        raise ValueError(f"mask row {int(empty[0])} is fully masked")
    return bits


def _check_shapes(x: np.ndarray, y: np.ndarray, w: AttentionWeights) -> None:
    if x.shape[1] != w.w_q.shape[0]:
        raise ValueError(f"x has width {x.shape[1]} but w_q expects {w.w_q.shape[0]}")
    if y.shape[1] != w.w_k.shape[0]:
        raise ValueError(f"y has width {y.shape[1]} but w_k expects {w.w_k.shape[0]}")


def masked_softmax(logits: np.ndarray, bits: np.ndarray) -> np.ndarray:
    """Row softmax over the allowed entries only; disallowed entries are 0."""
    shifted = np.where(bits, logits, -np.inf)
    shifted = shifted - shifted.max(axis=1, keepdims=True)
    weights = np.where(bits, np.exp(shifted), 0.0)
    return weights / weights.sum(axis=1, keepdims=True)


def _forward(x, y, w, bits, scale):
    q = x @ w.w_q
    k = y @ w.w_k
    v = y @ w.w_v
    c = 1.0 / np.sqrt(w.w_q.shape[1]) if scale else 1.0
    probs = masked_softmax(c * (q @ k.T), bits)
    return q, k, v, c, probs


def masked_attention(
    x: np.ndarray,
    y: np.ndarray,
    w: AttentionWeights,
    mask: AttentionMask | np.ndarray | None = None,
    *,
    scale: bool = False,
) -> AttentionOutput:
    x = _tokens("x", x)
    y = _tokens("y", y)
    _check_shapes(x, y, w)
    bits = _mask_bits(mask, (x.shape[0], y.shape[0]))
    _, _, v, _, probs = _forward(x, y, w, bits, scale)
    return AttentionOutput(probs @ v, probs)


def dense_attention(
    x: np.ndarray, y: np.ndarray, w: AttentionWeights, *, scale: bool = False
) -> AttentionOutput:
    return masked_attention(x, y, w, None, scale=scale)


def attention_backward(
    x: np.ndarray,
    y: np.ndarray,
    w: AttentionWeights,
    mask: AttentionMask | np.ndarray | None,
    upstream: np.ndarray,
    *,
    scale: bool = False,
) -> AttentionGradients:
    """Reverse-mode gradients of ``sum(upstream * masked_attention(...).output)``.

    For self-attention (``x is y``) the gradient of the shared input is
    ``grads.x + grads.y``.
    """
    x = _tokens("x", x)
    y = _tokens("y", y)
    _check_shapes(x, y, w)
    bits = _mask_bits(mask, (x.shape[0], y.shape[0]))
    q, k, v, c, probs = _forward(x, y, w, bits, scale)
    g = np.asarray(upstream, dtype=np.float64)
    if g.shape != (x.shape[0], w.w_v.shape[1]):
        raise ValueError(f"upstream gradient shape {g.shape} does not match output")

    d_v = probs.T @ g
    d_probs = g @ v.T
    # softmax Jacobian; rows of probs are zero where masked, so those logits get no gradient
    d_logits = probs * (d_probs - (d_probs * probs).sum(axis=1, keepdims=True))
    d_q = c * (d_logits @ k)
    d_k = c * (d_logits.T @ q)
    return AttentionGradients(
        x=d_q @ w.w_q.T,
        y=d_k @ w.w_k.T + d_v @ w.w_v.T,
        w_q=x.T @ d_q,
        w_k=y.T @ d_k,
        w_v=y.T @ d_v,
    )


def multihead_attention(
    x: np.ndarray,
    y: np.ndarray,
    heads: Sequence[tuple[AttentionWeights, AttentionMask | np.ndarray | None]],
    *,
    scale: bool = False,
) -> tuple[list[AttentionOutput], np.ndarray]:
    """Run every head independently and concatenate outputs along features in head order."""
    if not heads:
        raise ValueError("need at least one head")
    widths = {w.w_v.shape[1] for w, _ in heads}
    if len(widths) != 1:
        raise ValueError(f"heads disagree on value width: {sorted(widths)}")
    outputs = [masked_attention(x, y, w, m, scale=scale) for w, m in heads]
    return outputs, np.concatenate([o.output for o in outputs], axis=1)


def two_step_attention(
    x: np.ndarray,
    f: PatternFactorization,
    w1: AttentionWeights,
    w2: AttentionWeights,
    *,
    scale: bool = False,
) -> np.ndarray:
    """Masked self-attention with ``f.steps[0]``, then again on the result with ``f.steps[1]``."""
    if len(f.steps) != 2 or not f.is_square:
        raise ValueError("two_step_attention needs a square two-step factorization")
    h = masked_attention(x, x, w1, f.steps[0], scale=scale).output
    return masked_attention(h, h, w2, f.steps[1], scale=scale).output


def gradient_check(
    x: np.ndarray,
    y: np.ndarray,
    w: AttentionWeights,
    mask: AttentionMask | np.ndarray | None,
    upstream: np.ndarray,
    *,
    eps: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
    scale: bool = False,
) -> dict[str, float]:
    """Relative error of each analytic gradient against central differences.

    The error of a tensor is ``||analytic - numeric|| / max(||analytic||, ||numeric||)``
    over the probed coordinates (all of them, or ``max_coords`` sampled ones).
    """
    grads = attention_backward(x, y, w, mask, upstream, scale=scale)
    params = {
        "x": np.array(x, dtype=np.float64),
        "y": np.array(y, dtype=np.float64),
        "w_q": w.w_q.copy(),
        "w_k": w.w_k.copy(),
        "w_v": w.w_v.copy(),
    }

    def objective(p: dict[str, np.ndarray]) -> float:
        weights = AttentionWeights(p["w_q"], p["w_k"], p["w_v"])
        out = masked_attention(p["x"], p["y"], weights, mask, scale=scale).output
        return float(np.sum(upstream * out))

    rng = rng or np.random.default_rng(0)
    errors = {}
    for name, value in params.items():
        coords = np.arange(value.size)
        if max_coords is not None and value.size > max_coords:
            coords = np.sort(rng.choice(value.size, max_coords, replace=False))
        analytic = getattr(grads, name).reshape(-1)[coords]
        numeric = np.empty(coords.size)
        flat = value.reshape(-1)
        for j, c in enumerate(coords):
            original = flat[c]
            flat[c] = original + eps
            hi = objective(params)
            flat[c] = original - eps
            lo = objective(params)
            flat[c] = original
            numeric[j] = (hi - lo) / (2 * eps)
        denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
        errors[name] = 0.0 if denom == 0 else float(np.linalg.norm(analytic - numeric) / denom)
    return errors
