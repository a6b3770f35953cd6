"""Image-to-token-sequence conversion: patchify, project, prepend class token.

The token sequence is the substrate every attention stream operates on:
index 0 is the class token, indices 1..N are patch tokens in row-major
grid order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor, as_tensor, concat, gather_flat, matmul


@dataclass
class TokenSeq:
    """Token embeddings plus the patch-grid geometry they came from."""

    tokens: Tensor            # (N+1) x d with class token, N x d without
    grid: tuple[int, int]     # (rows, cols) of the patch grid
    has_cls: bool = True

    @property
    def n_patches(self) -> int:
        return self.grid[0] * self.grid[1]

    @property
    def dim(self) -> int:
        return self.tokens.shape[1]

    def patch_tokens(self) -> Tensor:
        """The N patch tokens, class token stripped when present."""
        from .tensor import take_rows

        if not self.has_cls:
            return self.tokens
        return take_rows(self.tokens, np.arange(1, self.n_patches + 1))


@dataclass
class EmbedParams:
    """Learned pieces of the embedding layer."""

    projection: Tensor   # (P*P*C) x d
    cls_token: Tensor    # 1 x d
    pos_embed: Tensor    # (N+1) x d


def patch_index_map(h: int, w: int, c: int, patch: int) -> np.ndarray:
    """Flat indices that pull each patch, row-major, out of an H x W x C image."""
    rows, cols = h // patch, w // patch
    idx = np.arange(h * w * c).reshape(h, w, c)
    out = np.empty((rows * cols, patch * patch * c), dtype=np.int64)
    k = 0
    for r in range(rows):
        for col in range(cols):
            block = idx[r * patch:(r + 1) * patch, col * patch:(col + 1) * patch, :]
            out[k] = block.reshape(-1)
            k += 1
    return out


def patchify(image, patch: int) -> Tensor:
    """Split an H x W x C image into non-overlapping flattened patches.

    Patch order is row-major, top-left to bottom-right; each output row is
    one patch flattened in (row, col, channel) order.
    """
    image = as_tensor(image)
    if image.ndim != 3:
        raise ShapeError(f"patchify expects an H x W x C image, got {image.shape}")
    h, w, c = image.shape
    if h % patch or w % patch:
        raise ShapeError(
            f"patchify: image {h}x{w} is not divisible by patch size {patch}"
        )
    return gather_flat(image, patch_index_map(h, w, c, patch))


def embed(patches: Tensor, params: EmbedParams, grid: tuple[int, int]) -> TokenSeq:
    """Project patches, prepend the class token and add positional embeddings."""
    n = patches.shape[0]
    if grid[0] * grid[1] != n:
        raise ShapeError(f"embed: grid {grid} does not match {n} patches")
    if params.pos_embed.shape[0] != n + 1:
        raise ShapeError(
            f"embed: pos_embed has {params.pos_embed.shape[0]} rows, need {n + 1}"
        )
    projected = matmul(patches, params.projection)
    tokens = concat([params.cls_token, projected], axis=0) + params.pos_embed
    return TokenSeq(tokens=tokens, grid=grid, has_cls=True)


def init_embed_params(
    rng: np.random.Generator, patch: int, channels: int, n_patches: int, dim: int,
    std: float = 0.02,
) -> EmbedParams:
    from .tensor import randn_param

    return EmbedParams(
        projection=randn_param(rng, (patch * patch * channels, dim), std),
        cls_token=randn_param(rng, (1, dim), std),
        pos_embed=randn_param(rng, (n_patches + 1, dim), std),
    )
