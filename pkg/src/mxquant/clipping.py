"""Block-wise learnable clipping with sigmoid-parameterized dynamic bounds.

Each quantization block i carries two logits (alpha_min, alpha_max). The
clip bounds are sigmoid(alpha) times the block's own extrema:

    lo_i = sigmoid(alpha_min_i) * min(block i)
    hi_i = sigmoid(alpha_max_i) * max(block i)

Extrema are taken over all rows of the tensor for each block index, so a
(rows, N) tensor yields k = N/g bound pairs. Elements exactly on a bound
count as interior (the pass-through gradient branch).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid_grad(z):
    s = sigmoid(z)
    return s * (1.0 - s)


@dataclass
class ClipParams:
    """Per-block clip logits; one (min, max) pair per quantization block."""

    alpha_min: np.ndarray  # (k,)
    alpha_max: np.ndarray  # (k,)

    def __post_init__(self):
        self.alpha_min = np.asarray(self.alpha_min, dtype=np.float64)
        self.alpha_max = np.asarray(self.alpha_max, dtype=np.float64)
        if self.alpha_min.shape != self.alpha_max.shape or self.alpha_min.ndim != 1:
            raise ShapeError("clip logits must be two equal-length vectors")

    @property
    def k(self) -> int:
        return self.alpha_min.shape[0]

    @classmethod
    def init(cls, k: int, value: float = 4.0) -> "ClipParams":
        # sigmoid(4) ~ 0.982: near-identity at the start of training
        return cls(np.full(k, value), np.full(k, value))


@dataclass
class ClipBounds:
    beta_min: np.ndarray  # (k,)
    beta_max: np.ndarray  # (k,)


@dataclass
class ClipCtx:
    """Saved forward state for the backward pass."""

    shape: tuple
    g: int
    upper: np.ndarray  # bool (rows, k, g): clamped at beta_max
    lower: np.ndarray  # bool (rows, k, g): clamped at beta_min
    x_min: np.ndarray  # (k,)
    x_max: np.ndarray  # (k,)
    argmin: np.ndarray  # (k,) flat index into the (rows*g) slab of block i
    argmax: np.ndarray
    params: ClipParams


def _blocked(x, g):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] % g != 0:
        raise ShapeError(f"trailing dimension {x.shape[-1]} is not a multiple of g = {g}")
    return x.reshape(-1, x.shape[-1] // g, g)


def compute_bounds(x, params: ClipParams, g: int = 32) -> ClipBounds:
    """Bounds from the tensor's own per-block extrema (over all rows)."""
    xb = _blocked(x, g)
    if xb.shape[1] != params.k:
        raise ShapeError(f"{xb.shape[1]} blocks but {params.k} clip logit pairs")
    return ClipBounds(
        sigmoid(params.alpha_min) * xb.min(axis=(0, 2)),
        sigmoid(params.alpha_max) * xb.max(axis=(0, 2)),
    )


def clip(x, params: ClipParams, g: int = 32) -> np.ndarray:
    """Element-wise clamp of each block to its dynamic bounds."""
    y, _ = clip_with_ctx(x, params, g)
    return y


def clip_with_ctx(x, params: ClipParams, g: int = 32):
    x = np.asarray(x, dtype=np.float64)
    xb = _blocked(x, g)
    if xb.shape[1] != params.k:
        raise ShapeError(f"{xb.shape[1]} blocks but {params.k} clip logit pairs")
    x_min = xb.min(axis=(0, 2))
    x_max = xb.max(axis=(0, 2))
    lo = sigmoid(params.alpha_min) * x_min
    hi = sigmoid(params.alpha_max) * x_max

    y1 = np.maximum(xb, lo[None, :, None])
    upper = y1 > hi[None, :, None]
    lower = (xb < lo[None, :, None]) & ~upper
    y = np.where(upper, hi[None, :, None], y1)

    slabs = xb.transpose(1, 0, 2).reshape(params.k, -1)
    ctx = ClipCtx(
        shape=x.shape,
        g=g,
        upper=upper,
        lower=lower,
        x_min=x_min,
        x_max=x_max,
        argmin=slabs.argmin(axis=1),
        argmax=slabs.argmax(axis=1),
        params=params,
    )
    return y.reshape(x.shape), ctx


def clip_backward(ctx: ClipCtx, grad):
    """Exact reverse pass of clip_with_ctx.

    Returns (d_x, d_alpha_min, d_alpha_max). Interior elements pass their
    gradient through; clamped elements route gradient to the logits and,
    because the bound is built from the block's own extremum, to the
    extremal element itself (bound ratio times the summed clamped grad).
    """
    p = ctx.params
    gb = _blocked(np.asarray(grad, dtype=np.float64), ctx.g)
    interior = ~(ctx.upper | ctx.lower)
    dxb = np.where(interior, gb, 0.0)

    g_up = np.where(ctx.upper, gb, 0.0).sum(axis=(0, 2))  # (k,)
    g_lo = np.where(ctx.lower, gb, 0.0).sum(axis=(0, 2))

    d_alpha_max = g_up * sigmoid_grad(p.alpha_max) * ctx.x_max
    d_alpha_min = g_lo * sigmoid_grad(p.alpha_min) * ctx.x_min

    # extremum path: d hi / d x[argmax] = sigmoid(alpha_max), same for min
    dslabs = dxb.transpose(1, 0, 2).reshape(p.k, -1)
    karange = np.arange(p.k)
    dslabs[karange, ctx.argmax] += g_up * sigmoid(p.alpha_max)
    dslabs[karange, ctx.argmin] += g_lo * sigmoid(p.alpha_min)
    rows = gb.shape[0]
    dx = dslabs.reshape(p.k, rows, ctx.g).transpose(1, 0, 2).reshape(ctx.shape)
    return dx, d_alpha_min, d_alpha_max


def clip_gradients(x, params: ClipParams, g: int = 32, upstream=None):
    """Gradients of clip() w.r.t. x and both logit vectors.

    upstream defaults to all-ones, i.e. the gradient of sum(clip(x)).
    """
    y, ctx = clip_with_ctx(x, params, g)
    if upstream is None:
        upstream = np.ones_like(y)
    return clip_backward(ctx, upstream)
