"""Self-supervised auxiliary tasks: rotation prediction and instance discrimination.

Rotation prediction turns each image into a 4-way classification problem
over {0, 90, 180, 270} degrees.  Instance discrimination contrasts two
augmented views of the same image against a FIFO queue of momentum-encoded
negatives.  A run uses one task or the other, never both; both weight each
image equally regardless of its class.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import torch
import torch.nn.functional as F

ROTATION_CLASSES = 4  # {0, 90, 180, 270} degrees, counterclockwise


class SelfSupError(ValueError):
    """Raised for invalid self-supervised inputs or state."""


# ---------------------------------------------------------------------------
# rotation prediction
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RotationBatch:
    """Rotated images plus the rotation class each image received."""

    rotated_images: torch.Tensor  # (B, C, H, W)
    rotation_labels: torch.Tensor  # (B,) int64 in {0..3}


def rotate_image(image: np.ndarray, k: int) -> np.ndarray:
    """Rotate one (H, W, C) image counterclockwise by k * 90 degrees.

    The output at (i, j) for k=1 is the input at (j, H-1-i); four
    applications compose to the identity.
    """
    image = np.asarray(image)
    if image.ndim not in (2, 3):
        raise SelfSupError(f"expected (H, W) or (H, W, C) image, got shape {image.shape}")
    if image.shape[0] != image.shape[1]:
        raise SelfSupError(f"rotation needs square spatial dims, got {image.shape[:2]}")
    if k not in (0, 1, 2, 3):
        raise SelfSupError(f"rotation class must be in {{0,1,2,3}}, got {k}")
    return np.ascontiguousarray(np.rot90(image, k, axes=(0, 1)))


def rotate_batch(images: torch.Tensor, rotations: torch.Tensor) -> torch.Tensor:
    """Rotate each (B, C, H, W) image by its own class in {0..3}."""
    if images.shape[-1] != images.shape[-2]:
        raise SelfSupError(f"rotation needs square spatial dims, got {tuple(images.shape[-2:])}")
    out = images.clone()
    for k in (1, 2, 3):
        mask = rotations == k
        if mask.any():
            out[mask] = torch.rot90(images[mask], k, dims=(2, 3))
    return out


def make_rotation_batch(images: torch.Tensor, seed: int) -> RotationBatch:
    """Assign a uniform random rotation class to each image and apply it."""
    rng = np.random.default_rng(seed)
    labels = torch.from_numpy(rng.integers(0, ROTATION_CLASSES, size=len(images)))
    return RotationBatch(rotated_images=rotate_batch(images, labels), rotation_labels=labels)


def rotation_loss(logits4: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy of 4-way rotation predictions."""
    if logits4.ndim != 2 or logits4.shape[1] != ROTATION_CLASSES:
        raise SelfSupError(f"rotation logits must be (batch, 4), got {tuple(logits4.shape)}")
    if labels.min() < 0 or labels.max() >= ROTATION_CLASSES:
        raise SelfSupError("rotation labels must lie in {0,1,2,3}")
    return F.cross_entropy(logits4, labels)


# ---------------------------------------------------------------------------
# instance discrimination
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ContrastiveState:
    """FIFO queue of momentum-encoded negatives plus the task constants.

    Row 0 is the oldest entry; pushes evict from the front.  Every row
    keeps unit L2 norm.
    """

    queue: torch.Tensor  # (K, embed_dim), rows unit-norm, oldest first
    tau: float
    momentum: float
    embed_dim: int

    def __post_init__(self):
        if self.tau <= 0:
            raise SelfSupError(f"temperature must be positive, got {self.tau}")
        if not 0.0 <= self.momentum <= 1.0:
            raise SelfSupError(f"momentum must lie in [0, 1], got {self.momentum}")
        if self.queue.ndim != 2 or self.queue.shape[1] != self.embed_dim:
            raise SelfSupError(f"queue must be (K, {self.embed_dim}), got {tuple(self.queue.shape)}")

    @property
    def queue_size(self) -> int:
        return self.queue.shape[0]

    def check_unit_norm(self, tol: float = 1e-5):
        norms = torch.linalg.norm(self.queue, dim=1)
        worst = (norms - 1.0).abs().max().item() if len(norms) else 0.0
        if worst > tol:
            raise SelfSupError(f"queue rows must be unit-norm, worst deviation {worst:.2e}")


def init_contrastive_state(queue_size: int, embed_dim: int, tau: float, momentum: float, seed: int) -> ContrastiveState:
    """Fill the queue with random unit vectors; treated as warm-up content."""
    rng = np.random.default_rng(seed)
    raw = rng.standard_normal((queue_size, embed_dim))
    raw /= np.linalg.norm(raw, axis=1, keepdims=True)
    return ContrastiveState(
        queue=torch.from_numpy(raw.astype(np.float32)),
        tau=tau,
        momentum=momentum,
        embed_dim=embed_dim,
    )


def _check_norms(name, vectors, tol=1e-12):
    norms = torch.linalg.norm(vectors, dim=-1)
    if (norms < tol).any():
        raise SelfSupError(f"{name} contains a zero-norm embedding")


def info_nce_loss(v: torch.Tensor, v_pos: torch.Tensor, negatives: torch.Tensor, tau: float) -> torch.Tensor:
    """Contrastive loss of one query against its positive and K negatives.

    -log( exp(v.v_pos/tau) / (exp(v.v_pos/tau) + sum_k exp(v.v_k/tau)) );
    zero when there are no negatives.
    """
    if tau <= 0:
        raise SelfSupError(f"temperature must be positive, got {tau}")
    _check_norms("query", v)
    _check_norms("positive", v_pos)
    if len(negatives):
        _check_norms("negatives", negatives)
    pos = (v * v_pos).sum().reshape(1)
    neg = negatives @ v if len(negatives) else v.new_zeros(0)
    logits = torch.cat([pos, neg]) / tau
    return torch.logsumexp(logits, dim=0) - logits[0]


def info_nce_batch(queries: torch.Tensor, positives: torch.Tensor, state: ContrastiveState) -> torch.Tensor:
    """Mean contrastive loss of a batch of queries against the shared queue."""
    _check_norms("queries", queries)
    _check_norms("positives", positives)
    pos = (queries * positives).sum(dim=1, keepdim=True)
    neg = queries @ state.queue.T
    logits = torch.cat([pos, neg], dim=1) / state.tau
    targets = torch.zeros(len(queries), dtype=torch.int64)
    return F.cross_entropy(logits, targets)


def momentum_update(key_params, query_params, m: float):
    """In-place key <- m * key + (1 - m) * query over paired tensors."""
    if not 0.0 <= m <= 1.0:
        raise SelfSupError(f"momentum must lie in [0, 1], got {m}")
    key_params = list(key_params)
    query_params = list(query_params)
    with torch.no_grad():
        for key, query in zip(key_params, query_params, strict=True):
            if key.shape != query.shape:
                raise SelfSupError(f"shape mismatch: {tuple(key.shape)} vs {tuple(query.shape)}")
            key.mul_(m).add_(query, alpha=1.0 - m)
    return key_params


def queue_push(state: ContrastiveState, embeddings_batch: torch.Tensor) -> ContrastiveState:
    """Evict the oldest |batch| rows and append the batch at the back."""
    batch = embeddings_batch.detach()
    if batch.ndim != 2 or batch.shape[1] != state.embed_dim:
        raise SelfSupError(f"batch must be (n, {state.embed_dim}), got {tuple(batch.shape)}")
    if len(batch) > state.queue_size:
        raise SelfSupError(f"batch of {len(batch)} exceeds queue size {state.queue_size}")
    norms = torch.linalg.norm(batch, dim=1)
    if (norms - 1.0).abs().max().item() > 1e-5:
        raise SelfSupError("queue entries must be unit-norm")
    return replace(state, queue=torch.cat([state.queue[len(batch):], batch]))


# ---------------------------------------------------------------------------
# joint objective and augmentation
# ---------------------------------------------------------------------------


def stage1_joint_loss(sup_loss, self_loss, alpha1: float = 1.0, alpha2: float = 1.0):
    """Weighted sum alpha1 * supervised + alpha2 * self-supervised."""
    for name, value in (("supervised", sup_loss), ("self-supervised", self_loss)):
        scalar = value.item() if isinstance(value, torch.Tensor) else value
        if not np.isfinite(scalar):
            raise SelfSupError(f"{name} loss is not finite: {scalar}")
    return alpha1 * sup_loss + alpha2 * self_loss


def augment_weak(images: np.ndarray, rng: np.random.Generator, pad: int = 2) -> np.ndarray:
    """Random shifted crop plus horizontal flip on a (B, H, W, C) batch."""
    n, h, w, _ = images.shape
    padded = np.pad(images, ((0, 0), (pad, pad), (pad, pad), (0, 0)), mode="reflect")
    out = np.empty_like(images)
    offsets = rng.integers(0, 2 * pad + 1, size=(n, 2))
    flips = rng.random(n) < 0.5
    for i in range(n):
        dy, dx = offsets[i]
        crop = padded[i, dy:dy + h, dx:dx + w]
        out[i] = crop[:, ::-1] if flips[i] else crop
    return out


def augment_strong(images: np.ndarray, rng: np.random.Generator, pad: int = 2, jitter: float = 0.3) -> np.ndarray:
    """Weak augmentation plus per-image brightness/contrast/grayscale jitter."""
    out = augment_weak(images, rng, pad=pad)
    n = len(out)
    brightness = rng.uniform(-jitter, jitter, size=(n, 1, 1, 1)).astype(np.float32)
    contrast = rng.uniform(1.0 - jitter, 1.0 + jitter, size=(n, 1, 1, 1)).astype(np.float32)
    means = out.mean(axis=(1, 2, 3), keepdims=True)
    out = (out - means) * contrast + means + brightness
    gray_mask = rng.random(n) < 0.2
    if gray_mask.any():
        gray = out[gray_mask].mean(axis=3, keepdims=True)
        out[gray_mask] = np.broadcast_to(gray, out[gray_mask].shape)
    return np.clip(out, 0.0, 1.0)
