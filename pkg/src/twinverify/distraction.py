"""Twin-distraction attention: a training-only regularizer that makes the
anchor's queries compete over keys and values pooled from the anchor and its
twin.  Applied stochastically per batch inside a configurable layer range
and compiled out entirely at inference.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import (
    AttnTrace,
    BlockParams,
    block_norm1,
    head_kv,
    scaled_attention,
    transformer_block,
)
from .embedding import TokenSeq
from .tensor import ShapeError, Tensor, concat


@dataclass(frozen=True)
class DistractionConfig:
    """Gate probability, 1-based inclusive block range, and the gate seed."""

    probability: float
    layer_range: tuple[int, int]
    rng_seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.probability <= 1.0:
            raise ValueError(f"probability must be in [0, 1], got {self.probability}")
        lo, hi = self.layer_range
        if lo < 1 or hi < lo:
            raise ValueError(f"invalid layer range {self.layer_range}")

    def applies_to(self, layer_idx: int) -> bool:
        return self.layer_range[0] <= layer_idx <= self.layer_range[1]


def combine_kv(
    k_a: Tensor, k_t: Tensor, v_a: Tensor, v_t: Tensor
) -> tuple[Tensor, Tensor]:
    """Stack twin keys/values below the anchor's, anchor rows first."""
    for name, a, t in (("K", k_a, k_t), ("V", v_a, v_t)):
        if a.shape[1] != t.shape[1]:
            raise ShapeError(
                f"combine_kv: {name} widths differ, {a.shape} vs {t.shape}"
            )
    if k_t.shape[0] == 0:
        return k_a, v_a
    return concat([k_a, k_t], axis=0), concat([v_a, v_t], axis=0)


def ta_attention(
    q_a: Tensor,
    k_combined: Tensor,
    v_combined: Tensor,
    trace: AttnTrace | None = None,
    trace_key: str | None = None,
) -> Tensor:
    """Anchor queries over the doubled key set; output shape matches plain
    self-attention, so the op is a drop-in replacement."""
    return scaled_attention(q_a, k_combined, v_combined, trace, trace_key)


def draw_gate(config: DistractionConfig, rng: np.random.Generator) -> bool:
    """One Bernoulli(p) draw; the training loop calls this once per batch."""
    return bool(rng.random() < config.probability)


def gated_layer_forward(
    layer_idx: int,
    x_anchor: TokenSeq,
    x_twin: TokenSeq | None,
    block: BlockParams,
    config: DistractionConfig,
    mode: str,
    gate_on: bool,
    trace: AttnTrace | None = None,
) -> TokenSeq:
    """One backbone block for the anchor branch.

    Inference, layers outside the range, and failed gate draws all take the
    plain self-attention path.  A gated training layer appends the twin's
    per-head keys/values (computed through the same pre-norm and weights)
    to the anchor's before attending.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be train or infer, got {mode!r}")
    distracted = (
        mode == "train" and gate_on and config is not None and config.applies_to(layer_idx)
    )
    if not distracted:
        prefix = f"self.L{layer_idx}" if trace is not None else "self"
        return transformer_block(x_anchor, block, trace, prefix)
    if x_twin is None:
        raise ValueError(
            f"layer {layer_idx} is gated for twin distraction but no twin batch "
            "was provided"
        )
    kv_extra = head_kv(block_norm1(x_twin, block), block.attn)
    prefix = f"twin_distract.L{layer_idx}" if trace is not None else "twin_distract"
    return transformer_block(x_anchor, block, trace, prefix, kv_extra)
