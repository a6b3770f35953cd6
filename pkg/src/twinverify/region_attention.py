"""Hierarchical cross-attention over semantic face regions.

Region queries are taken from the base-resolution patch tokens; keys and
values come from average-pooled copies of the whole grid at each scale.
Per-region scale weights are softmax-normalized logits, so the aggregated
feature is always a convex combination across scales.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import AttnTrace, scaled_attention
from .embedding import TokenSeq
from .tensor import (
    ShapeError,
    Tensor,
    concat,
    matmul,
    mean_pool,
    reshape,
    softmax,
    take_rows,
)

REGION_NAMES = ("eyes", "nose", "mouth", "jaw")


@dataclass(frozen=True)
class RegionSpec:
    """A named set of patch indices standing in for a facial region."""

    name: str
    patch_indices: tuple[int, ...]

    def __post_init__(self):
        if self.name not in REGION_NAMES:
            raise ValueError(
                f"region name must be one of {REGION_NAMES}, got {self.name!r}"
            )
        if not self.patch_indices:
            raise ValueError(f"region {self.name!r} has no patch indices")
        object.__setattr__(self, "patch_indices", tuple(sorted(set(self.patch_indices))))

    def validate(self, n_patches: int) -> None:
        lo, hi = self.patch_indices[0], self.patch_indices[-1]
        if lo < 0 or hi >= n_patches:
            raise IndexError(
                f"region {self.name!r}: index {hi if hi >= n_patches else lo} "
                f"outside [0, {n_patches})"
            )


def default_regions(rows: int, cols: int) -> list[RegionSpec]:
    """Deterministic rectangle masks: eye band on top, nose and mouth in the
    center column, jaw along the bottom and sides."""

    def rect(r0, r1, c0, c1):
        return [
            r * cols + c
            for r in range(max(r0, 0), min(r1, rows))
            for c in range(max(c0, 0), min(c1, cols))
        ]

    third = max(1, -(-rows // 3))          # ceil(rows/3)
    c_lo, c_hi = cols // 4, cols - cols // 4
    eyes = rect(0, third, 0, cols)
    nose = rect(rows // 3, max(rows // 3 + 1, (2 * rows) // 3), c_lo, c_hi)
    mouth = rect((2 * rows) // 3, rows, c_lo, c_hi)
    jaw = sorted(
        set(rect(rows - 1, rows, 0, cols))
        | set(rect(rows // 2, rows, 0, 1))
        | set(rect(rows // 2, rows, cols - 1, cols))
    )
    return [
        RegionSpec("eyes", tuple(eyes)),
        RegionSpec("nose", tuple(nose)),
        RegionSpec("mouth", tuple(mouth)),
        RegionSpec("jaw", tuple(jaw)),
    ]


@dataclass
class RegionAttnParams:
    """Per-region, per-scale q/k/v projections and per-region scale logits."""

    proj: dict[tuple[str, int], tuple[Tensor, Tensor, Tensor]]
    scale_logits: Tensor    # 4 x S, rows follow REGION_NAMES order


_POOL_CACHE: dict[tuple[int, int, int], np.ndarray] = {}


def _pool_matrix(rows: int, cols: int, s: int) -> np.ndarray:
    """Constant matrix averaging non-overlapping s x s blocks of the grid."""
    key = (rows, cols, s)
    if key not in _POOL_CACHE:
        out_rows, out_cols = rows // s, cols // s
        m = np.zeros((out_rows * out_cols, rows * cols))
        w = 1.0 / (s * s)
        for r in range(out_rows):
            for c in range(out_cols):
                for dr in range(s):
                    for dc in range(s):
                        m[r * out_cols + c, (r * s + dr) * cols + (c * s + dc)] = w
        _POOL_CACHE[key] = m
    return _POOL_CACHE[key]


def downsample_tokens(x: TokenSeq, s: int) -> TokenSeq:
    """Average-pool the patch grid by s per side; the class token is excluded."""
    rows, cols = x.grid
    if s < 1:
        raise ValueError(f"downsample scale must be >= 1, got {s}")
    if rows % s or cols % s:
        raise ShapeError(f"grid {rows}x{cols} is not divisible by scale {s}")
    patches = x.patch_tokens()
    if s == 1:
        return TokenSeq(tokens=patches, grid=(rows, cols), has_cls=False)
    pool = Tensor(_pool_matrix(rows, cols, s))
    return TokenSeq(tokens=matmul(pool, patches), grid=(rows // s, cols // s), has_cls=False)


def region_cross_attention(
    x: TokenSeq,
    region: RegionSpec,
    s: int,
    params: RegionAttnParams,
    trace: AttnTrace | None = None,
) -> Tensor:
    """Region queries at base resolution attending to scale-s key/values."""
    region.validate(x.n_patches)
    w_q, w_k, w_v = params.proj[(region.name, s)]
    q = matmul(take_rows(x.patch_tokens(), np.asarray(region.patch_indices)), w_q)
    kv = downsample_tokens(x, s).tokens
    key = f"region.{region.name}.s{s}" if trace is not None else None
    return scaled_attention(q, matmul(kv, w_k), matmul(kv, w_v), trace, key)


def aggregate_scales(per_scale: list[Tensor], logits_row: Tensor) -> Tensor:
    """Convex combination over scales of token-axis mean-pooled features."""
    if not per_scale:
        raise ShapeError("aggregate_scales: empty scale list")
    d = per_scale[0].shape[1]
    weights = reshape(softmax(logits_row, axis=0), (1, len(per_scale)))
    pooled = concat([reshape(mean_pool(a, axis=0), (1, d)) for a in per_scale], axis=0)
    return reshape(matmul(weights, pooled), (d,))


def region_attention_forward(
    x: TokenSeq,
    regions: list[RegionSpec],
    scales: list[int],
    params: RegionAttnParams,
    trace: AttnTrace | None = None,
) -> Tensor:
    """Per-region multi-scale features concatenated in the fixed region order."""
    by_name = {r.name: r for r in regions}
    feats = []
    for k, name in enumerate(REGION_NAMES):
        region = by_name[name]
        per_scale = [
            region_cross_attention(x, region, s, params, trace) for s in scales
        ]
        logits_row = reshape(
            take_rows(params.scale_logits, np.asarray([k])), (len(scales),)
        )
        feats.append(reshape(aggregate_scales(per_scale, logits_row), (1, -1)))
    return reshape(concat(feats, axis=1), (-1,))


def init_region_attn_params(
    rng: np.random.Generator, dim: int, scales: list[int], std: float = 0.02
) -> RegionAttnParams:
    from .tensor import randn_param, zeros_param

    proj = {}
    for name in REGION_NAMES:
        for s in scales:
            proj[(name, s)] = (
                randn_param(rng, (dim, dim), std),
                randn_param(rng, (dim, dim), std),
                randn_param(rng, (dim, dim), std),
            )
    # zero logits start every region at uniform scale weights
    return RegionAttnParams(proj=proj, scale_logits=zeros_param((len(REGION_NAMES), len(scales))))
