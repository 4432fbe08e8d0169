"""Epoch samplers over long-tailed datasets.

Both strategies sample with replacement and return instance ids, so a
sequence remains meaningful after the dataset is subsampled or reordered.
Instance-balanced sampling draws uniformly over instances (head classes
dominate); class-balanced sampling draws a class uniformly first, which
repeatedly revisits tail instances.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

INSTANCE_BALANCED = "instance_balanced"
CLASS_BALANCED = "class_balanced"
STRATEGIES = (INSTANCE_BALANCED, CLASS_BALANCED)


class SamplingError(ValueError):
    """Raised for invalid sampler specifications or unsatisfiable draws."""


@dataclass(frozen=True)
class SamplerSpec:
    """Which strategy to use, how many draws per epoch, and the stream seed.

    ``epoch_length=None`` defaults to the dataset size at draw time, which
    keeps step counts comparable across strategies.
    """

    strategy: str
    seed: int
    epoch_length: int = None

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise SamplingError(f"unknown strategy {self.strategy!r}, expected one of {STRATEGIES}")
        if self.epoch_length is not None and self.epoch_length <= 0:
            raise SamplingError(f"epoch_length must be positive, got {self.epoch_length}")


def _resolve_length(dataset, spec):
    if len(dataset) == 0:
        raise SamplingError("cannot sample from an empty dataset")
    return len(dataset) if spec.epoch_length is None else spec.epoch_length


def instance_balanced_indices(dataset, spec: SamplerSpec) -> np.ndarray:
    """Draw instance ids uniformly over all instances, with replacement."""
    length = _resolve_length(dataset, spec)
    rng = np.random.default_rng(spec.seed)
    positions = rng.integers(0, len(dataset), size=length)
    return dataset.instance_ids[positions]


def class_balanced_indices(dataset, spec: SamplerSpec) -> np.ndarray:
    """Draw a class uniformly, then an instance uniformly within it.

    Every class is equally likely regardless of its count, so a
    single-instance tail class contributes that instance about once per
    C draws.
    """
    length = _resolve_length(dataset, spec)
    if np.any(dataset.class_counts == 0):
        empty = np.nonzero(dataset.class_counts == 0)[0]
        raise SamplingError(f"class-balanced sampling needs every class non-empty; empty: {empty.tolist()}")
    rng = np.random.default_rng(spec.seed)
    num_classes = dataset.num_classes
    classes = rng.integers(0, num_classes, size=length)
    positions = np.empty(length, dtype=np.int64)
    for c in range(num_classes):
        where = np.nonzero(classes == c)[0]
        if len(where) == 0:
            continue
        pool = dataset.class_positions(c)
        positions[where] = pool[rng.integers(0, len(pool), size=len(where))]
    return dataset.instance_ids[positions]


def epoch_indices(dataset, spec: SamplerSpec) -> np.ndarray:
    """Dispatch to the sampler named by ``spec.strategy``."""
    if spec.strategy == INSTANCE_BALANCED:
        return instance_balanced_indices(dataset, spec)
    return class_balanced_indices(dataset, spec)
