"""Training objective: angular-margin classification plus a twin-aware
triplet term, and the twin-oversampling batch sampler feeding them.

The triplet negative is the anchor's twin whenever twin samples are in the
batch; only then does it fall back to the hardest other identity.  All
embedding normalization happens inside the losses so the raw fused feature
stays inspectable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .manifest import TwinManifest
from .tensor import (
    ShapeError,
    Tensor,
    clamp,
    concat,
    cross_entropy,
    div,
    gather_flat,
    matmul,
    mean_pool,
    mul,
    relu,
    reshape,
    scale,
    sqrt,
    sub,
    tsum,
)


@dataclass
class IdentityBatch:
    """Embeddings with identity labels and the (partial) twin map."""

    embeddings: Tensor          # B x D
    labels: list[int]
    twin_of: dict[int, int]     # symmetric where defined

    def __post_init__(self):
        if self.embeddings.ndim != 2:
            raise ShapeError(f"embeddings must be B x D, got {self.embeddings.shape}")
        if len(self.labels) != self.embeddings.shape[0]:
            raise ShapeError(
                f"{len(self.labels)} labels for {self.embeddings.shape[0]} rows"
            )
        for a, b in self.twin_of.items():
            if self.twin_of.get(b) != a:
                raise ValueError(f"twin map is not an involution at {a} -> {b}")
        norms = np.linalg.norm(self.embeddings.data, axis=1)
        if np.any(norms == 0.0):
            raise ValueError("zero-norm embedding row in batch")


@dataclass
class ArcHead:
    """Class weights plus the angular margin (radians) and logit scale."""

    weights: Tensor             # D x num_identities
    margin: float = 0.5
    logit_scale: float = 64.0


def _normalize_rows(x: Tensor) -> Tensor:
    n, d = x.shape
    norms = sqrt(tsum(mul(x, x), axis=1))
    denom = matmul(reshape(norms, (n, 1)), Tensor(np.ones((1, d))))
    return div(x, denom)


def _normalize_cols(w: Tensor) -> Tensor:
    d, c = w.shape
    norms = sqrt(tsum(mul(w, w), axis=0))
    denom = matmul(Tensor(np.ones((d, 1))), reshape(norms, (1, c)))
    return div(w, denom)


def arcface_loss(batch: IdentityBatch, head: ArcHead) -> Tensor:
    """Additive angular margin cross-entropy on normalized embeddings.

    The margined target logit is cos(theta + m) expanded trigonometrically,
    so a zero margin reduces bit-exactly to cross-entropy on scaled cosine
    logits.
    """
    labels = np.asarray(batch.labels, dtype=np.int64)
    n_cls = head.weights.shape[1]
    if labels.min() < 0 or labels.max() >= n_cls:
        raise IndexError(f"label out of range [0, {n_cls})")
    cos = matmul(_normalize_rows(batch.embeddings), _normalize_cols(head.weights))
    # clamp keeps sqrt's gradient finite when cos hits +-1 to rounding
    sin = sqrt(clamp(sub(Tensor(np.ones(cos.shape)), mul(cos, cos)), 1e-14, 1.0))
    margined = sub(scale(cos, np.cos(head.margin)), scale(sin, np.sin(head.margin)))
    onehot = np.zeros(cos.shape)
    onehot[np.arange(len(labels)), labels] = 1.0
    logits = scale(cos + mul(Tensor(onehot), sub(margined, cos)), head.logit_scale)
    return cross_entropy(logits, labels)


def cosine_distance_matrix(embeddings: Tensor) -> Tensor:
    """Pairwise 1 - cosine similarity, differentiable."""
    e = _normalize_rows(embeddings)
    sims = matmul(e, e.T)
    return sub(Tensor(np.ones(sims.shape)), sims)


def _mine_triplets(
    dist: np.ndarray, labels: np.ndarray, twin_of: dict[int, int]
) -> list[tuple[int, int, int]]:
    """Batch-hard (anchor, positive, negative) indices; ties go to the lowest
    batch index.  Anchors without an in-batch positive are skipped."""
    triplets = []
    b = len(labels)
    for a in range(b):
        pos_mask = (labels == labels[a]) & (np.arange(b) != a)
        if not pos_mask.any():
            continue
        pos_idx = np.flatnonzero(pos_mask)
        p = pos_idx[np.argmax(dist[a, pos_idx])]          # hardest positive
        twin = twin_of.get(int(labels[a]))
        twin_idx = np.flatnonzero(labels == twin) if twin is not None else np.array([], int)
        if twin_idx.size:
            n = twin_idx[np.argmin(dist[a, twin_idx])]    # hardest twin sample
        else:
            neg_idx = np.flatnonzero(labels != labels[a])
            if not neg_idx.size:
                continue
            n = neg_idx[np.argmin(dist[a, neg_idx])]
        triplets.append((a, int(p), int(n)))
    return triplets


def twin_triplet_loss(batch: IdentityBatch, margin: float) -> Tensor:
    """Mean hinge over mined triplets on cosine distances."""
    dist = cosine_distance_matrix(batch.embeddings)
    labels = np.asarray(batch.labels)
    triplets = _mine_triplets(dist.data, labels, batch.twin_of)
    if not triplets:
        raise ValueError("no anchor in the batch has a same-identity positive")
    b = len(labels)
    ap = gather_flat(dist, np.asarray([a * b + p for a, p, _ in triplets]))
    an = gather_flat(dist, np.asarray([a * b + n for a, _, n in triplets]))
    hinge = relu(sub(ap, an) + margin)
    return mean_pool(hinge, axis=0)


def total_loss(l_arc: Tensor, l_trip: Tensor, lam: float) -> Tensor:
    """Weighted sum of the two objectives."""
    for name, t in (("classification", l_arc), ("triplet", l_trip)):
        if not np.isfinite(t.data).all():
            raise FloatingPointError(f"{name} loss is not finite")
    return l_arc + scale(l_trip, lam)


# ---------------------------------------------------------------------------
# batch sampling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BatchSample:
    """One anchor image plus the same-family companion used as distractor."""

    image_id: str
    identity_id: str
    companion_image_id: str
    label: int


def sample_batch(
    manifest: TwinManifest,
    batch_size: int,
    rng: np.random.Generator,
    oversample_ratio: float = 3.0,
) -> list[BatchSample]:
    """Draw one training batch with twin families oversampled.

    Identities enter in slots of two images so triplet anchors have
    positives.  Each slot is independently a twin slot with probability
    ratio/(ratio+1); twin slots are covered by sibling pairs so, in
    expectation, that fraction of anchors has its twin in the batch.  Lone
    slots draw from twinless identities and only exist when the manifest
    has any.  Every anchor gets a companion image from its twin (or itself
    when no twin exists).
    """
    if batch_size < 2 or batch_size % 2:
        raise ValueError(f"batch size must be even and >= 2, got {batch_size}")
    families = manifest.twin_families()
    if not families:
        raise ValueError("manifest has no twin pairs")
    twinless = manifest.twinless_identities()
    index = manifest.identity_index()

    n_slots = batch_size // 2
    p_twin = oversample_ratio / (oversample_ratio + 1.0)
    slot_is_twin = [
        bool(rng.random() < p_twin) or not twinless for _ in range(n_slots)
    ]
    n_twin_slots = sum(slot_is_twin)

    # cover twin slots two at a time with a sibling pair; an odd leftover
    # slot takes one image from each sibling instead of two of one identity
    twin_slot_ids: list[tuple[str, ...]] = []
    remaining = n_twin_slots
    while remaining >= 2:
        a, b = families[rng.integers(len(families))]
        twin_slot_ids.extend([(a, a), (b, b)])
        remaining -= 2
    if remaining == 1:
        a, b = families[rng.integers(len(families))]
        twin_slot_ids.append((a, b))

    lone_slot_ids = [
        (ident, ident)
        for ident in (twinless[rng.integers(len(twinless))] for _ in range(n_slots - n_twin_slots))
    ]

    slots = []
    twin_iter = iter(twin_slot_ids)
    lone_iter = iter(lone_slot_ids)
    for is_twin in slot_is_twin:
        slots.append(next(twin_iter) if is_twin else next(lone_iter))

    samples: list[BatchSample] = []
    for idents in slots:
        for ident in idents:
            images = manifest.images_of(ident)
            img = images[rng.integers(len(images))]
            comp_ident = manifest.twin_of.get(ident, ident)
            comp_images = manifest.images_of(comp_ident)
            comp = comp_images[rng.integers(len(comp_images))]
            samples.append(
                BatchSample(img.image_id, ident, comp.image_id, index[ident])
            )
    return samples


def batch_twin_map(manifest: TwinManifest) -> dict[int, int]:
    """The identity-level twin map in label-index space."""
    index = manifest.identity_index()
    return {index[a]: index[b] for a, b in manifest.twin_of.items()}
