"""Full model: backbone stack feeding three streams, fused embedding,
pairwise verification scoring, the training step, and checkpoint I/O.

The fused embedding is the final-layer class token, the four region
features, and the asymmetry signature concatenated in that order, width
6*dim.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .asymmetry import AsymParams, asymmetry_forward, init_asym_params
from .attention import AttnTrace, BlockParams, init_block_params, transformer_block
from .config import ModelConfig, RunConfig, model_config_digest
from .distraction import draw_gate, gated_layer_forward
from .embedding import EmbedParams, TokenSeq, embed, init_embed_params, patchify
from .losses import (
    ArcHead,
    BatchSample,
    IdentityBatch,
    arcface_loss,
    batch_twin_map,
    sample_batch,
    total_loss,
    twin_triplet_loss,
)
from .manifest import TwinManifest
from .region_attention import RegionAttnParams, init_region_attn_params, region_attention_forward
from .tensor import Tensor, concat, reshape, take_rows


@dataclass
class ModelWeights:
    embed: EmbedParams
    blocks: list[BlockParams]
    regions: RegionAttnParams
    asym: AsymParams
    arc: ArcHead

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        """All learnable tensors in a fixed, documented order."""
        out = [
            ("embed.projection", self.embed.projection),
            ("embed.cls_token", self.embed.cls_token),
            ("embed.pos_embed", self.embed.pos_embed),
        ]
        for i, blk in enumerate(self.blocks, start=1):
            base = f"block{i:02d}"
            for h in range(blk.attn.heads):
                out.append((f"{base}.attn.h{h}.w_q", blk.attn.w_q[h]))
                out.append((f"{base}.attn.h{h}.w_k", blk.attn.w_k[h]))
                out.append((f"{base}.attn.h{h}.w_v", blk.attn.w_v[h]))
            out.append((f"{base}.attn.w_o", blk.attn.w_o))
            out.append((f"{base}.norm1.gamma", blk.norm1_gamma))
            out.append((f"{base}.norm1.beta", blk.norm1_beta))
            out.append((f"{base}.norm2.gamma", blk.norm2_gamma))
            out.append((f"{base}.norm2.beta", blk.norm2_beta))
            out.append((f"{base}.ff.w1", blk.w_ff1))
            out.append((f"{base}.ff.b1", blk.b_ff1))
            out.append((f"{base}.ff.w2", blk.w_ff2))
            out.append((f"{base}.ff.b2", blk.b_ff2))
        for (name, s), (wq, wk, wv) in sorted(self.regions.proj.items()):
            out.append((f"region.{name}.s{s}.w_q", wq))
            out.append((f"region.{name}.s{s}.w_k", wk))
            out.append((f"region.{name}.s{s}.w_v", wv))
        out.append(("region.scale_logits", self.regions.scale_logits))
        out.append(("asym.w_q", self.asym.w_q))
        out.append(("asym.w_k", self.asym.w_k))
        out.append(("asym.w_v", self.asym.w_v))
        out.append(("arc.weights", self.arc.weights))
        return out

    def zero_grads(self) -> None:
        for _, p in self.named_parameters():
            p.zero_grad()


def init_weights(config: ModelConfig, n_identities: int, seed: int) -> ModelWeights:
    from .tensor import randn_param

    rng = np.random.default_rng(seed)
    return ModelWeights(
        embed=init_embed_params(
            rng, config.patch_size, config.channels, config.n_patches, config.dim
        ),
        blocks=[
            init_block_params(rng, config.dim, config.heads, config.ff_ratio)
            for _ in range(config.depth)
        ],
        regions=init_region_attn_params(rng, config.dim, list(config.scales)),
        asym=init_asym_params(rng, config.dim),
        arc=ArcHead(weights=randn_param(rng, (6 * config.dim, n_identities))),
    )


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

def _as_image_array(image, config: ModelConfig) -> np.ndarray:
    arr = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.shape != (config.image_size, config.image_size, config.channels):
        raise ValueError(
            f"image shape {arr.shape} does not match configured "
            f"{config.image_size}x{config.image_size}x{config.channels}"
        )
    return arr


def embed_image(image, weights: ModelWeights, config: ModelConfig) -> TokenSeq:
    arr = _as_image_array(image, config)
    patches = patchify(Tensor(arr), config.patch_size)
    return embed(patches, weights.embed, config.grid)


def backbone_forward(
    image,
    weights: ModelWeights,
    config: ModelConfig,
    mode: str = "infer",
    twin_image=None,
    gate_on: bool = False,
    trace: AttnTrace | None = None,
) -> TokenSeq:
    """Run the block stack; in a gated training batch the anchor branch is
    distracted by the twin's keys/values inside the configured layer range.

    The inference path never touches the twin input or any rng.
    """
    x = embed_image(image, weights, config)
    lo, hi = config.distraction.layer_range
    distract = mode == "train" and gate_on
    x_twin = None
    if distract:
        if twin_image is None:
            raise ValueError("gated training forward needs a twin image")
        x_twin = embed_image(twin_image, weights, config)
    for i, blk in enumerate(weights.blocks, start=1):
        if distract:
            nxt = gated_layer_forward(
                i, x, x_twin, blk, config.distraction, mode, gate_on, trace
            )
            if i < hi:  # the twin branch is only needed while gated layers remain
                x_twin = transformer_block(x_twin, blk)
            x = nxt
        else:
            x = transformer_block(x, blk, trace, f"self.L{i}")
    return x


def model_forward(
    image,
    weights: ModelWeights,
    config: ModelConfig,
    mode: str = "infer",
    twin_image=None,
    gate_on: bool = False,
    trace: AttnTrace | None = None,
) -> Tensor:
    """Fused embedding of width 6*dim: [global; regions; asymmetry]."""
    tokens = backbone_forward(image, weights, config, mode, twin_image, gate_on, trace)
    f_global = reshape(take_rows(tokens.tokens, np.asarray([0])), (config.dim,))
    f_regions = region_attention_forward(
        tokens, list(config.regions), list(config.scales), weights.regions, trace
    )
    f_asym = asymmetry_forward(tokens, weights.asym, trace)
    return concat([f_global, f_regions, f_asym], axis=0)


def verify(f_a, f_b) -> float:
    """Cosine similarity of two embeddings, in [-1, 1]."""
    a = f_a.data if isinstance(f_a, Tensor) else np.asarray(f_a, dtype=np.float64)
    b = f_b.data if isinstance(f_b, Tensor) else np.asarray(f_b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("verify: zero-norm embedding")
    return float(np.dot(a.ravel(), b.ravel()) / (na * nb))


# ---------------------------------------------------------------------------
# optimizer and schedule
# ---------------------------------------------------------------------------

class AdamW:
    """Adam with decoupled weight decay over named parameter tensors."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}

    def step(self, lr: float, grad_scale: float = 1.0) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, p in self.params:
            if p.grad is None:
                continue
            g = p.grad * grad_scale
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            mhat = self.m[name] / (1 - b1 ** self.t)
            vhat = self.v[name] / (1 - b2 ** self.t)
            p.data -= lr * (mhat / (np.sqrt(vhat) + self.eps) + self.weight_decay * p.data)


def cosine_lr(base_lr: float, update_idx: int, total_updates: int) -> float:
    """Anneals from base_lr at update 0 to ~0 at the final update."""
    frac = min(update_idx, total_updates) / max(total_updates, 1)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * frac))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainState:
    optimizer: AdamW
    total_updates: int
    accum_steps: int
    base_lr: float
    accum_count: int = 0
    update_count: int = 0


def train_step(
    samples: list[BatchSample],
    images: dict[str, np.ndarray],
    weights: ModelWeights,
    config: RunConfig,
    state: TrainState,
    twin_map: dict[int, int],
    gate_rng: np.random.Generator,
) -> dict:
    """One forward/backward over a sampled batch, updating weights every
    ``accum_steps`` accumulations.  Raises on non-finite losses, naming the
    offending term."""
    gate = draw_gate(config.model.distraction, gate_rng)
    embs = []
    for s in samples:
        emb = model_forward(
            images[s.image_id],
            weights,
            config.model,
            mode="train",
            twin_image=images[s.companion_image_id],
            gate_on=gate,
        )
        embs.append(reshape(emb, (1, config.model.embed_dim)))
    batch = IdentityBatch(
        embeddings=concat(embs, axis=0),
        labels=[s.label for s in samples],
        twin_of=twin_map,
    )
    l_arc = arcface_loss(batch, weights.arc)
    l_trip = twin_triplet_loss(batch, config.loss.triplet_margin)
    loss = total_loss(l_arc, l_trip, config.loss.lambda_triplet)
    loss.backward()

    state.accum_count += 1
    lr = cosine_lr(state.base_lr, state.update_count, state.total_updates)
    updated = False
    if state.accum_count >= state.accum_steps:
        state.optimizer.step(lr, grad_scale=1.0 / state.accum_steps)
        weights.zero_grads()
        state.accum_count = 0
        state.update_count += 1
        updated = True
    return {
        "total": loss.item(),
        "arc": l_arc.item(),
        "triplet": l_trip.item(),
        "lr": lr,
        "gated": gate,
        "updated": updated,
    }


def train(
    manifest: TwinManifest,
    images: dict[str, np.ndarray],
    config: RunConfig,
    seed: int,
    steps: int | None = None,
    weights: ModelWeights | None = None,
) -> tuple[ModelWeights, list[dict]]:
    """Seeded training run over the manifest's train split."""
    train_split = manifest.subset("train")
    steps = steps if steps is not None else config.train.total_steps
    n_ident = len(train_split.identities())
    if weights is None:
        weights = init_weights(config.model, n_ident, seed)
    opt = AdamW(
        weights.named_parameters(),
        beta1=config.train.beta1,
        beta2=config.train.beta2,
        eps=config.train.eps,
        weight_decay=config.train.weight_decay,
    )
    state = TrainState(
        optimizer=opt,
        total_updates=max(1, steps // config.train.accum_steps),
        accum_steps=config.train.accum_steps,
        base_lr=config.train.lr,
    )
    ss = np.random.SeedSequence([seed, 0x7917])
    sampler_rng, gate_seed_rng = (np.random.default_rng(s) for s in ss.spawn(2))
    gate_rng = np.random.default_rng(
        np.random.SeedSequence([seed, config.model.distraction.rng_seed])
    )
    twin_map = batch_twin_map(train_split)
    history = []
    for step in range(steps):
        samples = sample_batch(
            train_split, config.train.batch_size, sampler_rng,
            config.loss.oversample_ratio,
        )
        rec = train_step(samples, images, weights, config, state, twin_map, gate_rng)
        rec["step"] = step + 1
        history.append(rec)
    return weights, history


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------
#
# Little-endian binary layout:
#   magic    4 bytes   b"TVCK"
#   version  u32       currently 1
#   digest   u32 length + ascii sha256 of the model config section
#   count    u32       number of tensors
#   per tensor:
#     name_len u32, name bytes (utf-8), rank u32, dims u64 * rank,
#     data float64 * prod(dims), row-major
#
# Round-trips are bit-exact because values are written as raw doubles.

CHECKPOINT_MAGIC = b"TVCK"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | Path, weights: ModelWeights, config: ModelConfig) -> None:
    digest = model_config_digest(config).encode("ascii")
    params = weights.named_parameters()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(digest)))
        fh.write(digest)
        fh.write(struct.pack("<I", len(params)))
        for name, p in params:
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", p.data.ndim))
            fh.write(struct.pack(f"<{p.data.ndim}Q", *p.data.shape))
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def load_checkpoint(path: str | Path, config: ModelConfig) -> ModelWeights:
    """Rebuild weights from a checkpoint, verifying magic, version, digest
    and every tensor shape against the given config."""
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        (dlen,) = struct.unpack("<I", fh.read(4))
        digest = fh.read(dlen).decode("ascii")
        if digest != model_config_digest(config):
            raise CheckpointError(
                f"{path}: checkpoint was written for a different model config"
            )
        (count,) = struct.unpack("<I", fh.read(4))
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", fh.read(4))
            name = fh.read(nlen).decode("utf-8")
            (rank,) = struct.unpack("<I", fh.read(4))
            dims = struct.unpack(f"<{rank}Q", fh.read(8 * rank))
            n = int(np.prod(dims)) if rank else 1
            data = np.frombuffer(fh.read(8 * n), dtype="<f8").reshape(dims)
            tensors[name] = data.astype(np.float64)

    n_ident = tensors["arc.weights"].shape[1]
    weights = init_weights(config, n_ident, seed=0)
    for name, p in weights.named_parameters():
        if name not in tensors:
            raise CheckpointError(f"{path}: missing tensor {name!r}")
        if tensors[name].shape != p.data.shape:
            raise CheckpointError(
                f"{path}: tensor {name!r} has shape {tensors[name].shape}, "
                f"config expects {p.data.shape}"
            )
        p.data = tensors[name].copy()
    return weights
