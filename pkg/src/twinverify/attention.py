"""Scaled dot-product attention, multi-head self-attention and the
pre-norm transformer block used by the backbone stack.

Attention weight matrices can be captured through an optional trace dict,
which feeds both the normalization checks and heatmap export.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .embedding import TokenSeq
from .tensor import (
    ShapeError,
    Tensor,
    add_bias,
    concat,
    gelu,
    layer_norm,
    matmul,
    scale,
    softmax,
)

# trace keys -> attention weight matrices (plain arrays, detached)
AttnTrace = dict


def scaled_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    trace: AttnTrace | None = None,
    trace_key: str | None = None,
) -> Tensor:
    """softmax(q kT / sqrt(d)) v with the scale taken from q's width.

    Each output row is a convex combination of the rows of ``v``.
    """
    if k.shape[0] != v.shape[0]:
        raise ShapeError(
            f"scaled_attention: key rows {k.shape[0]} != value rows {v.shape[0]}"
        )
    if q.shape[1] != k.shape[1]:
        raise ShapeError(
            f"scaled_attention: query width {q.shape[1]} != key width {k.shape[1]}"
        )
    scores = scale(matmul(q, k.T), 1.0 / math.sqrt(q.shape[1]))
    weights = softmax(scores, axis=1)
    if trace is not None:
        trace[trace_key] = weights.data.copy()
    return matmul(weights, v)


@dataclass
class AttnParams:
    """Per-head projections plus the output projection of one attention layer."""

    w_q: list[Tensor]   # h matrices, each d x (d/h)
    w_k: list[Tensor]
    w_v: list[Tensor]
    w_o: Tensor         # d x d

    @property
    def heads(self) -> int:
        return len(self.w_q)


def mhsa(
    x: Tensor,
    params: AttnParams,
    trace: AttnTrace | None = None,
    trace_prefix: str = "self",
    kv_extra: list[tuple[Tensor, Tensor]] | None = None,
) -> Tensor:
    """Multi-head self-attention over a token matrix.

    ``kv_extra`` optionally appends per-head (K, V) rows from another token
    set after this layer's own keys and values; queries are unchanged.  That
    is the hook the twin-distraction regularizer uses.
    """
    d = x.shape[1]
    h = params.heads
    if params.w_q[0].shape[0] != d:
        raise ShapeError(
            f"mhsa: token width {d} does not match projection {params.w_q[0].shape}"
        )
    head_outs = []
    for i in range(h):
        q = matmul(x, params.w_q[i])
        k = matmul(x, params.w_k[i])
        v = matmul(x, params.w_v[i])
        if kv_extra is not None:
            k = concat([k, kv_extra[i][0]], axis=0)
            v = concat([v, kv_extra[i][1]], axis=0)
        key = f"{trace_prefix}.h{i}" if trace is not None else None
        head_outs.append(scaled_attention(q, k, v, trace, key))
    merged = head_outs[0] if h == 1 else concat(head_outs, axis=1)
    return matmul(merged, params.w_o)


def head_kv(x: Tensor, params: AttnParams) -> list[tuple[Tensor, Tensor]]:
    """Per-head key/value projections of a token matrix."""
    return [
        (matmul(x, params.w_k[i]), matmul(x, params.w_v[i]))
        for i in range(params.heads)
    ]


@dataclass
class BlockParams:
    """One pre-norm transformer block: attention plus a two-layer MLP."""

    attn: AttnParams
    norm1_gamma: Tensor
    norm1_beta: Tensor
    norm2_gamma: Tensor
    norm2_beta: Tensor
    w_ff1: Tensor   # d x (r*d)
    b_ff1: Tensor
    w_ff2: Tensor   # (r*d) x d
    b_ff2: Tensor


def feed_forward(x: Tensor, params: BlockParams) -> Tensor:
    hidden = gelu(add_bias(matmul(x, params.w_ff1), params.b_ff1))
    return add_bias(matmul(hidden, params.w_ff2), params.b_ff2)


def transformer_block(
    x: TokenSeq,
    params: BlockParams,
    trace: AttnTrace | None = None,
    trace_prefix: str = "self",
    kv_extra: list[tuple[Tensor, Tensor]] | None = None,
) -> TokenSeq:
    """x + attn(norm(x)), then + mlp(norm(.)); token count is preserved."""
    t = x.tokens
    attended = mhsa(
        layer_norm(t, params.norm1_gamma, params.norm1_beta),
        params.attn,
        trace,
        trace_prefix,
        kv_extra,
    )
    t = t + attended
    t = t + feed_forward(layer_norm(t, params.norm2_gamma, params.norm2_beta), params)
    return TokenSeq(tokens=t, grid=x.grid, has_cls=x.has_cls)


def block_norm1(x: TokenSeq, params: BlockParams) -> Tensor:
    """The normalized tokens this block's attention actually sees."""
    return layer_norm(x.tokens, params.norm1_gamma, params.norm1_beta)


def init_attn_params(rng: np.random.Generator, dim: int, heads: int, std: float = 0.02) -> AttnParams:
    from .tensor import randn_param

    if dim % heads:
        raise ShapeError(f"width {dim} not divisible by {heads} heads")
    dh = dim // heads
    return AttnParams(
        w_q=[randn_param(rng, (dim, dh), std) for _ in range(heads)],
        w_k=[randn_param(rng, (dim, dh), std) for _ in range(heads)],
        w_v=[randn_param(rng, (dim, dh), std) for _ in range(heads)],
        w_o=randn_param(rng, (dim, dim), std),
    )


def init_block_params(
    rng: np.random.Generator, dim: int, heads: int, ff_ratio: int = 4, std: float = 0.02
) -> BlockParams:
    from .tensor import ones_param, randn_param, zeros_param

    return BlockParams(
        attn=init_attn_params(rng, dim, heads, std),
        norm1_gamma=ones_param(dim),
        norm1_beta=zeros_param(dim),
        norm2_gamma=ones_param(dim),
        norm2_beta=zeros_param(dim),
        w_ff1=randn_param(rng, (dim, ff_ratio * dim), std),
        b_ff1=zeros_param(ff_ratio * dim),
        w_ff2=randn_param(rng, (ff_ratio * dim, dim), std),
        b_ff2=zeros_param(dim),
    )
