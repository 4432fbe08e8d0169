"""Backbone, classifier heads, class-wise logit scales, and checkpointing.

A ModelBundle groups the backbone with whichever heads a training stage
needs: the main classifier, an optional second classifier for the
distillation target, a rotation head, a projection head with its
momentum twin, and per-class logit scales.  All weights initialize from
a numpy stream, so two bundles built from the same seed are identical
down to the byte.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .seeding import derive_seed
from .serialization import load_container, save_container

TASK_NONE = "none"
TASK_ROTATION = "rotation"
TASK_INSTANCE = "instance"
SELFSUP_TASKS = (TASK_NONE, TASK_ROTATION, TASK_INSTANCE)


class ModelError(ValueError):
    """Raised for invalid model configuration or checkpoint state."""


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyper-parameters shared by every stage of a run."""

    num_classes: int
    image_size: int = 16
    in_channels: int = 3
    conv_channels: tuple = (32, 64, 64)
    norm_groups: int = 8
    proj_dim: int = 32
    selfsup_task: str = TASK_NONE
    with_soft_head: bool = False

    def __post_init__(self):
        if self.num_classes < 2:
            raise ModelError(f"need at least 2 classes, got {self.num_classes}")
        if self.selfsup_task not in SELFSUP_TASKS:
            raise ModelError(f"unknown self-supervised task {self.selfsup_task!r}")
        for ch in self.conv_channels:
            if ch % self.norm_groups:
                raise ModelError(f"conv channels {self.conv_channels} must divide norm_groups={self.norm_groups}")

    @property
    def feature_dim(self) -> int:
        return self.conv_channels[-1]

    def to_dict(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "image_size": self.image_size,
            "in_channels": self.in_channels,
            "conv_channels": list(self.conv_channels),
            "norm_groups": self.norm_groups,
            "proj_dim": self.proj_dim,
            "selfsup_task": self.selfsup_task,
            "with_soft_head": self.with_soft_head,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelConfig":
        doc = dict(doc)
        doc["conv_channels"] = tuple(doc["conv_channels"])
        return cls(**doc)


class SmallConvBackbone(nn.Module):
    """A few conv blocks with group norm, pooled to a flat feature vector."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        blocks = []
        in_ch = config.in_channels
        spatial = config.image_size
        for i, out_ch in enumerate(config.conv_channels):
            blocks += [
                nn.Conv2d(in_ch, out_ch, kernel_size=3, padding=1),
                nn.GroupNorm(config.norm_groups, out_ch),
                nn.ReLU(inplace=True),
            ]
            if spatial >= 4 and i < len(config.conv_channels) - 1:
                blocks.append(nn.MaxPool2d(2))
                spatial //= 2
            in_ch = out_ch
        self.blocks = nn.Sequential(*blocks)
        self.feature_dim = config.conv_channels[-1]
        self.expected_shape = (config.in_channels, config.image_size, config.image_size)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if tuple(x.shape[1:]) != self.expected_shape:
            raise ModelError(f"expected input (B, {self.expected_shape}), got {tuple(x.shape)}")
        h = self.blocks(x)
        return h.mean(dim=(2, 3))


class ProjectionHead(nn.Module):
    """Two-layer MLP mapping features to L2-normalized embeddings."""

    def __init__(self, feature_dim: int, proj_dim: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(feature_dim, feature_dim),
            nn.ReLU(inplace=True),
            nn.Linear(feature_dim, proj_dim),
        )

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        raw = self.net(features)
        return raw / torch.linalg.norm(raw, dim=1, keepdim=True).clamp_min(1e-12)


class LWSScales(nn.Module):
    """Per-class logit scales, kept positive by storing them as exponents.

    Fresh scales are all 1, leaving logits untouched until stage II
    tunes them.
    """

    def __init__(self, num_classes: int):
        super().__init__()
        self.log_scales = nn.Parameter(torch.zeros(num_classes))

    @property
    def scales(self) -> torch.Tensor:
        return torch.exp(self.log_scales)


def lws_forward(features: torch.Tensor, head: nn.Linear, scales: LWSScales) -> torch.Tensor:
    """Per-class rescaling of the full logit: scales[c] * (w_c . f + b_c)."""
    logits = head(features)
    if logits.shape[1] != scales.log_scales.shape[0]:
        raise ModelError(
            f"head produces {logits.shape[1]} classes, scales cover {scales.log_scales.shape[0]}"
        )
    return logits * scales.scales


class ModelBundle(nn.Module):
    """Everything one run trains: backbone, heads, scales, momentum twin."""

    def __init__(self, config: ModelConfig, seed: int):
        super().__init__()
        self.config = config
        self.init_seed = seed
        self.backbone = SmallConvBackbone(config)
        self.classifier = nn.Linear(config.feature_dim, config.num_classes)
        self.soft_head = nn.Linear(config.feature_dim, config.num_classes) if config.with_soft_head else None
        self.rotation_head = nn.Linear(config.feature_dim, 4) if config.selfsup_task == TASK_ROTATION else None
        if config.selfsup_task == TASK_INSTANCE:
            self.projection = ProjectionHead(config.feature_dim, config.proj_dim)
            self.momentum_backbone = SmallConvBackbone(config)
            self.momentum_projection = ProjectionHead(config.feature_dim, config.proj_dim)
        else:
            self.projection = None
            self.momentum_backbone = None
            self.momentum_projection = None
        self.lws = LWSScales(config.num_classes)
        initialize_parameters(self, seed)
        if config.selfsup_task == TASK_INSTANCE:
            self.copy_to_momentum()
            for p in self.momentum_parameters():
                p.requires_grad_(False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.classifier(self.backbone(x))

    def momentum_parameters(self):
        yield from self.momentum_backbone.parameters()
        yield from self.momentum_projection.parameters()

    def online_parameters(self):
        yield from self.backbone.parameters()
        yield from self.projection.parameters()

    def copy_to_momentum(self):
        with torch.no_grad():
            pairs = zip(self.momentum_parameters(), self.online_parameters(), strict=True)
            for key, query in pairs:
                key.copy_(query)

    def logits(self, x: torch.Tensor, head: str = "hard") -> torch.Tensor:
        features = self.backbone(x)
        if head == "hard":
            return self.classifier(features)
        if head == "soft":
            if self.soft_head is None:
                raise ModelError("bundle has no soft head")
            return self.soft_head(features)
        if head == "lws":
            return lws_forward(features, self.classifier, self.lws)
        raise ModelError(f"unknown head {head!r}")


def initialize_parameters(module: nn.Module, seed: int):
    """Fan-in-scaled uniform weights, zero biases, unit norm gains.

    Each parameter draws from its own stream keyed by name, so adding or
    removing a head never shifts another parameter's values.
    """
    with torch.no_grad():
        for name, param in module.named_parameters():
            rng = np.random.default_rng(derive_seed(seed, "init", name))
            if param.ndim >= 2:
                fan_in = int(np.prod(param.shape[1:]))
                bound = 1.0 / np.sqrt(fan_in)
                values = rng.uniform(-bound, bound, size=tuple(param.shape))
                param.copy_(torch.from_numpy(values.astype(np.float32)))
            elif "log_scales" in name or name.endswith("bias"):
                param.zero_()
            else:  # norm gains
                param.fill_(1.0)


def reinitialize(bundle: ModelBundle, seed: int) -> ModelBundle:
    """Build a fresh bundle of the same architecture from a new seed."""
    return ModelBundle(bundle.config, seed)


def freeze_backbone_train_scales(bundle: ModelBundle):
    """Mark only the logit scales trainable; return those parameters.

    The backbone and classifier keep requires_grad=False until unfrozen,
    so an optimizer built on the returned list can never move them.
    """
    for p in bundle.parameters():
        p.requires_grad_(False)
    bundle.lws.log_scales.requires_grad_(True)
    return [bundle.lws.log_scales]


def parameter_arrays(bundle: ModelBundle) -> dict:
    return {name: param.detach().numpy().astype("<f4") for name, param in bundle.named_parameters()}


def save_bundle(path, bundle: ModelBundle, meta: dict, extra_arrays: dict = None):
    """Write all named parameters plus stage metadata to a container file.

    ``extra_arrays`` carries auxiliary state such as the contrastive
    queue; names must not collide with parameter names.
    """
    meta = dict(meta)
    meta["model_config"] = bundle.config.to_dict()
    meta["init_seed"] = bundle.init_seed
    arrays = parameter_arrays(bundle)
    for name, values in (extra_arrays or {}).items():
        if name in arrays:
            raise ModelError(f"extra array {name!r} collides with a parameter name")
        arrays[name] = values
    save_container(path, arrays, meta)


def load_bundle(path, with_extras: bool = False):
    """Rebuild a bundle from a checkpoint.

    Returns ``(bundle, meta)``, or ``(bundle, meta, extras)`` with any
    non-parameter arrays when ``with_extras`` is set.
    """
    arrays, meta = load_container(path)
    config = ModelConfig.from_dict(meta["model_config"])
    bundle = ModelBundle(config, seed=meta.get("init_seed", 0))
    expected = {name for name, _ in bundle.named_parameters()}
    missing = sorted(expected - set(arrays))
    if missing:
        raise ModelError(f"checkpoint is missing parameters: {missing}")
    with torch.no_grad():
        for name, param in bundle.named_parameters():
            values = arrays[name]
            if tuple(values.shape) != tuple(param.shape):
                raise ModelError(f"{name}: checkpoint shape {values.shape} != model shape {tuple(param.shape)}")
            param.copy_(torch.from_numpy(values.copy()))
    if with_extras:
        extras = {name: arr for name, arr in arrays.items() if name not in expected}
        return bundle, meta, extras
    return bundle, meta
