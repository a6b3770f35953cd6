"""Left/right asymmetry signature via bidirectional half-face cross-attention.

The grid is split down the vertical midline, the right half is flipped so
columns correspond, and one shared projection set drives attention in both
directions.  The signature is the token-mean of the absolute difference of
the two attention outputs, so a perfectly mirror-symmetric input produces an
exactly zero signature.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import AttnTrace, scaled_attention
from .embedding import TokenSeq
from .tensor import ShapeError, Tensor, matmul, mean_pool, sub, tabs, take_rows


@dataclass
class HalfTokens:
    """Patch tokens of one face half, on a rows x (cols/2) grid."""

    tokens: Tensor
    side: str                  # "left" or "right"
    grid: tuple[int, int]


@dataclass
class AsymParams:
    """One shared q/k/v projection set used by both attention directions."""

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor


def split_halves(x: TokenSeq) -> tuple[HalfTokens, HalfTokens]:
    """Split the patch grid at the vertical midline; class token excluded."""
    rows, cols = x.grid
    if cols % 2:
        raise ShapeError(f"cannot split grid {rows}x{cols}: column count is odd")
    half = cols // 2
    patches = x.patch_tokens()
    left_idx = [r * cols + c for r in range(rows) for c in range(half)]
    right_idx = [r * cols + c for r in range(rows) for c in range(half, cols)]
    return (
        HalfTokens(take_rows(patches, np.asarray(left_idx)), "left", (rows, half)),
        HalfTokens(take_rows(patches, np.asarray(right_idx)), "right", (rows, half)),
    )


def hflip(h: HalfTokens) -> HalfTokens:
    """Reverse column order within each grid row; the side label is kept."""
    rows, cols = h.grid
    idx = [r * cols + (cols - 1 - c) for r in range(rows) for c in range(cols)]
    return HalfTokens(take_rows(h.tokens, np.asarray(idx)), h.side, h.grid)


def asym_cross_attention(
    left: HalfTokens,
    right_flipped: HalfTokens,
    params: AsymParams,
    trace: AttnTrace | None = None,
) -> tuple[Tensor, Tensor]:
    """Both attention directions between the halves, sharing projections."""
    if left.tokens.shape != right_flipped.tokens.shape:
        raise ShapeError(
            f"half shapes differ: {left.tokens.shape} vs {right_flipped.tokens.shape}"
        )
    lq = matmul(left.tokens, params.w_q)
    lk = matmul(left.tokens, params.w_k)
    lv = matmul(left.tokens, params.w_v)
    rq = matmul(right_flipped.tokens, params.w_q)
    rk = matmul(right_flipped.tokens, params.w_k)
    rv = matmul(right_flipped.tokens, params.w_v)
    a_lr = scaled_attention(lq, rk, rv, trace, "asym.lr" if trace is not None else None)
    a_rl = scaled_attention(rq, lk, lv, trace, "asym.rl" if trace is not None else None)
    return a_lr, a_rl


def asymmetry_signature(a_lr: Tensor, a_rl: Tensor) -> Tensor:
    """Token-axis mean of |a_lr - a_rl|; nonnegative, zero for symmetric faces."""
    if a_lr.shape != a_rl.shape:
        raise ShapeError(f"signature inputs differ: {a_lr.shape} vs {a_rl.shape}")
    return mean_pool(tabs(sub(a_lr, a_rl)), axis=0)


def asymmetry_forward(
    x: TokenSeq, params: AsymParams, trace: AttnTrace | None = None
) -> Tensor:
    left, right = split_halves(x)
    a_lr, a_rl = asym_cross_attention(left, hflip(right), params, trace)
    return asymmetry_signature(a_lr, a_rl)


def init_asym_params(rng: np.random.Generator, dim: int, std: float = 0.02) -> AsymParams:
    from .tensor import randn_param

    return AsymParams(
        w_q=randn_param(rng, (dim, dim), std),
        w_k=randn_param(rng, (dim, dim), std),
        w_v=randn_param(rng, (dim, dim), std),
    )
