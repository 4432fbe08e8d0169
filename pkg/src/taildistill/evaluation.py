"""Top-1 evaluation with many/medium/few breakdowns and distribution reports."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .data import SPLITS
from .distill import aggregate_distilled_distribution

HEAD_SELECTORS = ("hard", "soft", "lws")


class EvalError(ValueError):
    """Raised for invalid evaluation inputs."""


@dataclass(frozen=True)
class EvalReport:
    """Top-1 accuracies overall, per split, and per class."""

    overall_top1: float
    split_top1: dict
    per_class_accuracy: tuple
    head: str
    num_instances: int
    checkpoint_hash: str = ""
    config_hash: str = ""

    def to_dict(self) -> dict:
        return {
            "overall_top1": self.overall_top1,
            "split_top1": dict(self.split_top1),
            "per_class_accuracy": list(self.per_class_accuracy),
            "head": self.head,
            "num_instances": self.num_instances,
            "checkpoint_hash": self.checkpoint_hash,
            "config_hash": self.config_hash,
        }

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> "EvalReport":
        doc = json.loads(Path(path).read_text())
        doc["per_class_accuracy"] = tuple(doc["per_class_accuracy"])
        return cls(**doc)


def predict_labels(bundle, images: np.ndarray, head: str, batch_size: int = 256) -> np.ndarray:
    """Deterministic argmax predictions; ties resolve to the lowest class."""
    if head not in HEAD_SELECTORS:
        raise EvalError(f"unknown head {head!r}, expected one of {HEAD_SELECTORS}")
    bundle.eval()
    out = np.empty(len(images), dtype=np.int64)
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            chunk = np.transpose(images[start:start + batch_size], (0, 3, 1, 2))
            logits = bundle.logits(torch.from_numpy(chunk.copy()), head=head)
            out[start:start + len(chunk)] = np.argmax(logits.numpy(), axis=1)
    return out


def accuracy_breakdown(labels: np.ndarray, predictions: np.ndarray, split_tags) -> dict:
    """Overall, per-split, and per-class top-1 rates for given predictions.

    Split rates weight each instance equally within the split, so they
    work on unbalanced training sets too.
    """
    labels = np.asarray(labels)
    correct = predictions == labels
    num_classes = len(split_tags)
    per_class = np.full(num_classes, np.nan)
    for c in range(num_classes):
        mask = labels == c
        if mask.any():
            per_class[c] = correct[mask].mean()
    split_top1 = {}
    for split in SPLITS:
        members = np.array([tag == split for tag in split_tags])
        mask = members[labels]
        split_top1[split] = float(correct[mask].mean()) if mask.any() else float("nan")
    return {
        "overall_top1": float(correct.mean()),
        "split_top1": split_top1,
        "per_class_accuracy": tuple(float(a) for a in per_class),
    }


def evaluate(bundle, head_selector: str, test_set, checkpoint_hash: str = "", config_hash: str = "") -> EvalReport:
    """Score a bundle's chosen head on a balanced test set."""
    if bundle.config.num_classes != test_set.num_classes:
        raise EvalError(
            f"bundle predicts {bundle.config.num_classes} classes, test set has {test_set.num_classes}"
        )
    counts = test_set.class_counts
    if counts.min() != counts.max():
        raise EvalError("test set must be balanced (equal per-class counts)")
    predictions = predict_labels(bundle, test_set.images, head_selector)
    breakdown = accuracy_breakdown(test_set.labels, predictions, test_set.split_tags)
    return EvalReport(
        overall_top1=breakdown["overall_top1"],
        split_top1=breakdown["split_top1"],
        per_class_accuracy=breakdown["per_class_accuracy"],
        head=head_selector,
        num_instances=len(test_set),
        checkpoint_hash=checkpoint_hash,
        config_hash=config_hash,
    )


def _ratio(series: np.ndarray) -> float:
    low = float(np.min(series))
    if low <= 0:
        return float("inf")
    return float(np.max(series) / low)


def distribution_report(dataset, soft_labels=None) -> dict:
    """Original, re-balanced, and distilled per-class mass with max/min ratios.

    The re-balanced series is the uniform expectation N/C a class-balanced
    sampler converges to; the distilled series is the aggregate soft-label
    mass when soft labels are given.
    """
    counts = dataset.class_counts.astype(np.float64)
    total = counts.sum()
    rebalanced = np.full(len(counts), total / len(counts))
    report = {
        "num_classes": int(dataset.num_classes),
        "num_instances": int(total),
        "original": counts.tolist(),
        "rebalanced": rebalanced.tolist(),
        "ratios": {"original": _ratio(counts), "rebalanced": 1.0},
    }
    if soft_labels is not None:
        if soft_labels.num_classes != dataset.num_classes:
            raise EvalError("soft labels and dataset disagree on class count")
        mass = aggregate_distilled_distribution(soft_labels)
        report["distilled"] = mass.tolist()
        report["ratios"]["distilled"] = _ratio(mass)
        report["temperature"] = float(soft_labels.temperature)
    return report
