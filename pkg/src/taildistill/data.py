"""Long-tailed dataset construction, split tagging, and manifests.

Datasets are plain numpy containers: images as float32 arrays in [0, 1]
with shape (N, H, W, C), labels as class indices.  Class 0 is always the
largest (head) class and per-class counts are non-increasing, so the
imbalance factor is ``class_counts[0] / class_counts[-1]``.

Evaluation splits follow the per-class *training* count: many-shot for
100 or more samples, medium-shot for 20 to 99, few-shot below 20.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SPLIT_MANY = "many"
SPLIT_MEDIUM = "medium"
SPLIT_FEW = "few"
SPLITS = (SPLIT_MANY, SPLIT_MEDIUM, SPLIT_FEW)

MANY_SHOT_MIN = 100
FEW_SHOT_MAX = 20  # exclusive: counts < 20 are few-shot

DATASET_MANIFEST_FORMAT = "taildistill-dataset"
DATASET_MANIFEST_VERSION = 1


class DatasetError(ValueError):
    """Raised for invalid dataset construction parameters or state."""


def assign_split(count: int) -> str:
    """Map a per-class training count to its evaluation split tag."""
    if count < 1:
        raise DatasetError(f"class count must be >= 1, got {count}")
    if count >= MANY_SHOT_MIN:
        return SPLIT_MANY
    if count >= FEW_SHOT_MAX:
        return SPLIT_MEDIUM
    return SPLIT_FEW


def exponential_profile(n_max: int, num_classes: int, imbalance_factor: float) -> np.ndarray:
    """Per-class counts decaying exponentially from ``n_max`` by the imbalance factor.

    ``counts[i] = round(n_max * imbalance_factor ** (-i / (num_classes - 1)))``,
    so the head class keeps ``n_max`` samples and the max/min ratio matches
    the imbalance factor up to integer rounding.
    """
    if num_classes < 2:
        raise DatasetError(f"need at least 2 classes, got {num_classes}")
    if n_max <= 0:
        raise DatasetError(f"n_max must be positive, got {n_max}")
    if imbalance_factor < 1:
        raise DatasetError(f"imbalance factor must be >= 1, got {imbalance_factor}")
    if n_max < imbalance_factor:
        raise DatasetError(
            f"n_max={n_max} < imbalance_factor={imbalance_factor}: smallest class would be empty"
        )
    exponents = -np.arange(num_classes, dtype=np.float64) / (num_classes - 1)
    counts = np.rint(n_max * np.power(float(imbalance_factor), exponents)).astype(np.int64)
    counts[0] = n_max
    return counts


def pareto_profile(n_max: int, n_min: int, num_classes: int, alpha: float) -> np.ndarray:
    """Per-class counts following a power-law decay with exact endpoints.

    The raw shape is ``(i + 1) ** (-alpha * s)`` with ``s`` chosen so the
    last class lands exactly on ``n_min``; interior values are rounded.
    """
    if n_min > n_max:
        raise DatasetError(f"n_min={n_min} > n_max={n_max}")
    if n_min < 1:
        raise DatasetError(f"n_min must be >= 1, got {n_min}")
    if num_classes < 2:
        raise DatasetError(f"need at least 2 classes, got {num_classes}")
    if alpha <= 0:
        raise DatasetError(f"alpha must be positive, got {alpha}")
    if n_max == n_min:
        return np.full(num_classes, n_max, dtype=np.int64)
    # scale the exponent so (num_classes)**(-alpha*s) == n_min/n_max
    s = np.log(n_max / n_min) / (alpha * np.log(num_classes))
    ranks = np.arange(1, num_classes + 1, dtype=np.float64)
    counts = np.rint(n_max * np.power(ranks, -alpha * s)).astype(np.int64)
    counts[0] = n_max
    counts[-1] = n_min
    return counts


@dataclass(frozen=True)
class ImbalanceProfile:
    """A realized per-class count profile plus the parameters that built it."""

    kind: str  # "exponential" | "pareto" | "explicit"
    counts: tuple
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        if counts.ndim != 1 or len(counts) == 0:
            raise DatasetError("profile counts must be a non-empty 1-D sequence")
        if np.any(counts < 0) or counts[0] <= 0:
            raise DatasetError("profile counts must be non-negative with a non-empty head class")
        if np.any(np.diff(counts) > 0):
            raise DatasetError("profile counts must be non-increasing in class index")
        object.__setattr__(self, "counts", tuple(int(c) for c in counts))

    @property
    def num_classes(self) -> int:
        return len(self.counts)

    @property
    def imbalance_factor(self) -> float:
        if self.counts[-1] == 0:
            raise DatasetError("imbalance factor undefined: profile has an empty class")
        return self.counts[0] / self.counts[-1]

    @classmethod
    def exponential(cls, n_max, num_classes, imbalance_factor):
        counts = exponential_profile(n_max, num_classes, imbalance_factor)
        return cls(
            kind="exponential",
            counts=tuple(counts),
            params={"n_max": int(n_max), "imbalance_factor": float(imbalance_factor)},
        )

    @classmethod
    def pareto(cls, n_max, n_min, num_classes, alpha):
        counts = pareto_profile(n_max, n_min, num_classes, alpha)
        return cls(
            kind="pareto",
            counts=tuple(counts),
            params={"n_max": int(n_max), "n_min": int(n_min), "alpha": float(alpha)},
        )

    @classmethod
    def explicit(cls, counts):
        return cls(kind="explicit", counts=tuple(int(c) for c in counts))


@dataclass
class LongTailedDataset:
    """Labeled image instances with per-class counts and split tags.

    ``instance_ids`` are stable identifiers that survive subsampling;
    positions in the arrays are looked up through :meth:`position_of`.
    ``split_tags`` always derive from *training* counts, so a balanced
    test set carries the tags of the training set it evaluates.
    """

    images: np.ndarray  # (N, H, W, C) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    instance_ids: np.ndarray  # (N,) int64, unique
    class_counts: np.ndarray  # (C,) int64
    split_tags: tuple  # per-class tag from SPLITS

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.instance_ids = np.asarray(self.instance_ids, dtype=np.int64)
        self.class_counts = np.asarray(self.class_counts, dtype=np.int64)
        self.split_tags = tuple(self.split_tags)
        self._validate()
        self._id_to_position = {int(i): p for p, i in enumerate(self.instance_ids)}
        for arr in (self.images, self.labels, self.instance_ids, self.class_counts):
            arr.setflags(write=False)

    def _validate(self):
        if self.images.ndim != 4:
            raise DatasetError(f"images must be (N, H, W, C), got shape {self.images.shape}")
        n = len(self.images)
        if len(self.labels) != n or len(self.instance_ids) != n:
            raise DatasetError("images, labels, and instance_ids must have equal length")
        if len(np.unique(self.instance_ids)) != n:
            raise DatasetError("instance_ids must be unique")
        c = len(self.class_counts)
        if len(self.split_tags) != c:
            raise DatasetError("split_tags must have one entry per class")
        if any(tag not in SPLITS for tag in self.split_tags):
            raise DatasetError(f"split tags must be among {SPLITS}")
        if n and (self.labels.min() < 0 or self.labels.max() >= c):
            raise DatasetError("labels must lie in [0, num_classes)")
        observed = np.bincount(self.labels, minlength=c)
        if not np.array_equal(observed, self.class_counts):
            raise DatasetError("class_counts must match observed label counts")
        if n == 0:
            raise DatasetError("dataset must contain at least one instance")
        if np.any(self.class_counts < 0):
            raise DatasetError("class counts must be non-negative")
        if np.any(np.diff(self.class_counts) > 0):
            raise DatasetError("class_counts must be non-increasing in class index")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise DatasetError("image values must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def num_classes(self) -> int:
        return len(self.class_counts)

    @property
    def image_shape(self) -> tuple:
        return self.images.shape[1:]

    @property
    def imbalance_factor(self) -> float:
        if self.class_counts.min() == 0:
            raise DatasetError("imbalance factor undefined: dataset has an empty class")
        return float(self.class_counts.max() / self.class_counts.min())

    def position_of(self, instance_id: int) -> int:
        return self._id_to_position[int(instance_id)]

    def positions_of(self, instance_ids) -> np.ndarray:
        return np.array([self._id_to_position[int(i)] for i in instance_ids], dtype=np.int64)

    def class_positions(self, label: int) -> np.ndarray:
        return np.nonzero(self.labels == label)[0]

    def split_classes(self, split: str) -> np.ndarray:
        return np.array([c for c, tag in enumerate(self.split_tags) if tag == split], dtype=np.int64)


def subsample_to_profile(full_dataset: LongTailedDataset, profile: ImbalanceProfile, seed: int) -> LongTailedDataset:
    """Draw a deterministic per-class subset matching the profile counts.

    Selected positions are sorted within each class, so re-subsampling a
    dataset to its own profile reproduces it exactly.
    """
    if profile.num_classes != full_dataset.num_classes:
        raise DatasetError(
            f"profile has {profile.num_classes} classes, dataset has {full_dataset.num_classes}"
        )
    rng = np.random.default_rng(seed)
    keep = []
    for c, want in enumerate(profile.counts):
        available = full_dataset.class_positions(c)
        if len(available) < want:
            raise DatasetError(
                f"class {c} has {len(available)} samples, profile needs {want}"
            )
        if want:
            chosen = rng.choice(available, size=want, replace=False)
            keep.append(np.sort(chosen))
    order = np.concatenate(keep)
    counts = np.asarray(profile.counts, dtype=np.int64)
    tags = tuple(assign_split(int(c)) if c else SPLIT_FEW for c in counts)
    return LongTailedDataset(
        images=full_dataset.images[order],
        labels=full_dataset.labels[order],
        instance_ids=full_dataset.instance_ids[order],
        class_counts=counts,
        split_tags=tags,
    )


def _class_prototypes(num_classes, image_size, channels, grid, rng):
    # coarse random grid upsampled to full resolution: smooth, orientation-bearing patterns
    coarse = rng.uniform(0.15, 0.85, size=(num_classes, grid, grid, channels))
    reps = int(np.ceil(image_size / grid))
    protos = np.repeat(np.repeat(coarse, reps, axis=1), reps, axis=2)
    return protos[:, :image_size, :image_size, :].astype(np.float32)


def make_synthetic_longtail(
    num_classes: int,
    n_max: int,
    imbalance_factor: float,
    image_size: int = 16,
    seed: int = 0,
    test_per_class: int = 50,
    noise_sigma: float = 0.25,
    shift_range: int = 4,
    channels: int = 3,
    prototype_grid: int = 4,
):
    """Generate a class-separable synthetic long-tailed set plus a balanced test set.

    Each class gets a deterministic low-frequency prototype pattern;
    every instance is that prototype under a random circular shift of up
    to ``shift_range`` pixels plus Gaussian pixel noise, clipped to
    [0, 1].  The shifts give each class genuine intra-class variability,
    so classes with very few training samples under-cover their own test
    distribution the way real tail classes do.  Returns ``(train,
    test)``; the test set is balanced with ``test_per_class`` images per
    class and carries the training split tags.
    """
    counts = exponential_profile(n_max, num_classes, imbalance_factor)
    rng = np.random.default_rng(seed)
    protos = _class_prototypes(num_classes, image_size, channels, prototype_grid, rng)
    tags = tuple(assign_split(int(c)) for c in counts)

    def render(per_class):
        images, labels = [], []
        for c, n in enumerate(per_class):
            shifts = rng.integers(-shift_range, shift_range + 1, size=(n, 2))
            noise = rng.normal(0.0, noise_sigma, size=(n, image_size, image_size, channels))
            shifted = np.stack(
                [np.roll(protos[c], tuple(s), axis=(0, 1)) for s in shifts]
            )
            images.append(np.clip(shifted + noise, 0.0, 1.0).astype(np.float32))
            labels.append(np.full(n, c, dtype=np.int64))
        return np.concatenate(images), np.concatenate(labels)

    train_images, train_labels = render(counts)
    test_images, test_labels = render(np.full(num_classes, test_per_class, dtype=np.int64))
    train = LongTailedDataset(
        images=train_images,
        labels=train_labels,
        instance_ids=np.arange(len(train_images), dtype=np.int64),
        class_counts=counts,
        split_tags=tags,
    )
    test = LongTailedDataset(
        images=test_images,
        labels=test_labels,
        instance_ids=np.arange(len(test_images), dtype=np.int64),
        class_counts=np.full(num_classes, test_per_class, dtype=np.int64),
        split_tags=tags,
    )
    return train, test


def save_dataset_bundle(manifest_path, train=None, test=None, synthetic_params=None, seed=None, profile=None):
    """Write a dataset manifest (train + test pair) next to any payload blobs.

    Synthetic bundles store only their generation parameters and are
    regenerated on load; explicit bundles store instance tables in the
    manifest and raw little-endian float32 image payloads in sidecar
    ``.bin`` files.
    """
    manifest_path = Path(manifest_path)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    doc = {"format": DATASET_MANIFEST_FORMAT, "version": DATASET_MANIFEST_VERSION}
    if synthetic_params is not None:
        doc["kind"] = "synthetic"
        doc["params"] = dict(synthetic_params)
    else:
        if train is None or test is None:
            raise DatasetError("explicit bundles need both train and test datasets")
        doc["kind"] = "explicit"
        if seed is not None:
            doc["seed"] = int(seed)
        if profile is not None:
            doc["profile"] = {"kind": profile.kind, "counts": list(profile.counts), "params": profile.params}
        for name, ds in (("train", train), ("test", test)):
            payload_name = manifest_path.stem + f".{name}.bin"
            (manifest_path.parent / payload_name).write_bytes(
                np.ascontiguousarray(ds.images, dtype="<f4").tobytes()
            )
            doc[name] = {
                "instance_ids": ds.instance_ids.tolist(),
                "labels": ds.labels.tolist(),
                "class_counts": ds.class_counts.tolist(),
                "split_tags": list(ds.split_tags),
                "payload": payload_name,
                "image_shape": list(ds.image_shape),
                "dtype": "<f4",
            }
    manifest_path.write_text(json.dumps(doc, indent=2, sort_keys=True))


def load_dataset_bundle(manifest_path):
    """Load a ``(train, test)`` pair from a dataset manifest."""
    manifest_path = Path(manifest_path)
    doc = json.loads(manifest_path.read_text())
    if doc.get("format") != DATASET_MANIFEST_FORMAT:
        raise DatasetError(f"{manifest_path}: not a dataset manifest")
    if doc["kind"] == "synthetic":
        return make_synthetic_longtail(**doc["params"])
    datasets = []
    for name in ("train", "test"):
        section = doc[name]
        shape = tuple(section["image_shape"])
        raw = (manifest_path.parent / section["payload"]).read_bytes()
        images = np.frombuffer(raw, dtype=section["dtype"]).reshape((-1,) + shape)
        datasets.append(
            LongTailedDataset(
                images=images.copy(),
                labels=np.array(section["labels"], dtype=np.int64),
                instance_ids=np.array(section["instance_ids"], dtype=np.int64),
                class_counts=np.array(section["class_counts"], dtype=np.int64),
                split_tags=tuple(section["split_tags"]),
            )
        )
    return tuple(datasets)
