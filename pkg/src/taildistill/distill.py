"""Soft-label generation, distillation losses, and head wiring modes.

The stage-II teacher emits one temperature-softened probability vector
per training instance; stage III consumes them as fixed targets.  The
distillation loss keeps the conventional T^2 factor so its gradients
stay comparable to cross-entropy when both are weighted 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .serialization import load_container, save_container

MODE_DUAL = "dual"
MODE_COUPLED = "coupled"
MODE_SINGLE = "single"
DISTILL_MODES = (MODE_DUAL, MODE_COUPLED, MODE_SINGLE)

DEFAULT_TEMPERATURE = 2.0

_ROW_SUM_TOL = 1e-6


class DistillError(ValueError):
    """Raised for invalid distillation inputs or artifacts."""


def softmax_with_temperature(logits, temperature: float) -> np.ndarray:
    """Temperature-scaled softmax over the last axis, max-stabilized."""
    if temperature <= 0:
        raise DistillError(f"temperature must be positive, got {temperature}")
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise DistillError("logits must be finite")
    z = z / temperature
    z = z - z.max(axis=-1, keepdims=True)
    num = np.exp(z)
    return num / num.sum(axis=-1, keepdims=True)


@dataclass(frozen=True)
class SoftLabelSet:
    """Per-instance soft targets from one teacher at one temperature."""

    instance_ids: np.ndarray  # (N,) int64, strictly increasing
    probabilities: np.ndarray  # (N, C) float32 rows summing to 1
    temperature: float
    teacher_hash: str = ""

    def __post_init__(self):
        ids = np.asarray(self.instance_ids, dtype=np.int64)
        probs = np.asarray(self.probabilities, dtype=np.float32)
        if probs.ndim != 2 or len(ids) != len(probs):
            raise DistillError("need one probability row per instance id")
        if len(ids) == 0:
            raise DistillError("soft label set must be non-empty")
        if np.any(np.diff(ids) <= 0):
            raise DistillError("instance_ids must be strictly increasing")
        if self.temperature <= 0:
            raise DistillError(f"temperature must be positive, got {self.temperature}")
        if probs.min() < 0:
            raise DistillError("probabilities must be non-negative")
        sums = probs.astype(np.float64).sum(axis=1)
        worst = np.abs(sums - 1.0).max()
        if worst > _ROW_SUM_TOL:
            raise DistillError(f"rows must sum to 1 within {_ROW_SUM_TOL}, worst deviation {worst:.2e}")
        object.__setattr__(self, "instance_ids", ids)
        object.__setattr__(self, "probabilities", probs)
        object.__setattr__(self, "_row_of", {int(i): r for r, i in enumerate(ids)})

    def __len__(self) -> int:
        return len(self.instance_ids)

    @property
    def num_classes(self) -> int:
        return self.probabilities.shape[1]

    def covers(self, instance_ids) -> bool:
        return all(int(i) in self._row_of for i in instance_ids)

    def rows_for(self, instance_ids) -> np.ndarray:
        try:
            rows = [self._row_of[int(i)] for i in instance_ids]
        except KeyError as missing:
            raise DistillError(f"no soft label for instance {missing.args[0]}") from None
        return self.probabilities[rows]

    def save(self, path):
        save_container(
            path,
            {"instance_ids": self.instance_ids, "probabilities": self.probabilities},
            {
                "kind": "soft-labels",
                "num_classes": int(self.num_classes),
                "num_instances": len(self),
                "temperature": float(self.temperature),
                "teacher_hash": self.teacher_hash,
            },
        )

    @classmethod
    def load(cls, path) -> "SoftLabelSet":
        arrays, meta = load_container(path)
        if meta.get("kind") != "soft-labels":
            raise DistillError(f"{path}: not a soft label file")
        return cls(
            instance_ids=arrays["instance_ids"],
            probabilities=arrays["probabilities"],
            temperature=meta["temperature"],
            teacher_hash=meta.get("teacher_hash", ""),
        )


def generate_soft_labels(
    dataset,
    backbone,
    head,
    scales,
    temperature: float = DEFAULT_TEMPERATURE,
    teacher_hash: str = "",
    batch_size: int = 256,
) -> SoftLabelSet:
    """Run the re-scaled teacher over every training instance once.

    Logits come from the LWS-rescaled classifier; rows are stored sorted
    by instance id, so regeneration from the same checkpoint is
    byte-identical.
    """
    from .models import lws_forward  # local import to avoid a cycle

    if scales is None:
        raise DistillError("soft-label generation needs the stage-II scales")
    num_classes = head.out_features
    if num_classes != dataset.num_classes:
        raise DistillError(f"teacher predicts {num_classes} classes, dataset has {dataset.num_classes}")
    backbone.eval()
    order = np.argsort(dataset.instance_ids)
    probs = np.empty((len(dataset), num_classes), dtype=np.float32)
    with torch.no_grad():
        for start in range(0, len(order), batch_size):
            chunk = order[start:start + batch_size]
            images = torch.from_numpy(np.transpose(dataset.images[chunk], (0, 3, 1, 2)).copy())
            logits = lws_forward(backbone(images), head, scales)
            probs[start:start + len(chunk)] = softmax_with_temperature(
                logits.numpy().astype(np.float64), temperature
            ).astype(np.float32)
    return SoftLabelSet(
        instance_ids=dataset.instance_ids[order],
        probabilities=probs,
        temperature=temperature,
        teacher_hash=teacher_hash,
    )


def _as_prob_tensor(y_soft) -> torch.Tensor:
    y = torch.as_tensor(np.asarray(y_soft), dtype=torch.float64) if not isinstance(y_soft, torch.Tensor) else y_soft
    if y.min() < 0:
        raise DistillError("soft targets must be non-negative")
    sums = y.sum(dim=-1)
    worst = (sums - 1.0).abs().max().item()
    if worst > 1e-5:
        raise DistillError(f"soft targets must sum to 1, worst deviation {worst:.2e}")
    return y


def kd_loss(y_soft, z_soft: torch.Tensor, temperature: float = DEFAULT_TEMPERATURE) -> torch.Tensor:
    """Distillation loss -T^2 * sum_i y_i * log softmax(z/T)_i, batch-averaged.

    The value is bounded below by T^2 times the target entropy, reached
    exactly when the softened prediction equals the target.
    """
    if temperature <= 0:
        raise DistillError(f"temperature must be positive, got {temperature}")
    y = _as_prob_tensor(y_soft)
    log_pred = F.log_softmax(z_soft / temperature, dim=-1)
    per_sample = -(temperature ** 2) * (y.to(log_pred.dtype) * log_pred).sum(dim=-1)
    return per_sample.mean()


def hybrid_loss(
    y_hard: torch.Tensor,
    z_hard: torch.Tensor,
    y_soft,
    z_soft: torch.Tensor,
    temperature: float = DEFAULT_TEMPERATURE,
    lambda1: float = 1.0,
    lambda2: float = 1.0,
) -> torch.Tensor:
    """Weighted sum of hard-label cross-entropy and soft-label distillation."""
    ce = F.cross_entropy(z_hard, y_hard)
    kd = kd_loss(y_soft, z_soft, temperature)
    return lambda1 * ce + lambda2 * kd


@dataclass(frozen=True)
class DistillWiring:
    """Which head receives each loss and which head to evaluate.

    ``ce_head`` is None when hard labels are unused (single mode).
    """

    mode: str
    ce_head: str
    kd_head: str
    eval_head: str


def apply_distill_mode(mode: str, bundle) -> DistillWiring:
    """Resolve a mode name to its loss-to-head wiring on this bundle."""
    if mode not in DISTILL_MODES:
        raise DistillError(f"unknown distill mode {mode!r}, expected one of {DISTILL_MODES}")
    if mode in (MODE_DUAL, MODE_SINGLE) and bundle.soft_head is None:
        raise DistillError(f"{mode} mode needs a bundle with a soft head")
    if mode == MODE_DUAL:
        return DistillWiring(mode=mode, ce_head="hard", kd_head="soft", eval_head="soft")
    if mode == MODE_COUPLED:
        return DistillWiring(mode=mode, ce_head="hard", kd_head="hard", eval_head="hard")
    return DistillWiring(mode=mode, ce_head=None, kd_head="soft", eval_head="soft")


def aggregate_distilled_distribution(soft_labels: SoftLabelSet) -> np.ndarray:
    """Per-class sum of soft-label mass over all instances; totals N."""
    return soft_labels.probabilities.astype(np.float64).sum(axis=0)
