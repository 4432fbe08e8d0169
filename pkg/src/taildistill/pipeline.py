"""Stage orchestration: joint pretraining, scale tuning, distillation, fine-tune.

Stages run in a fixed order.  Stage 1 trains the backbone jointly on
labels and a self-supervised task under instance-balanced sampling.
Stage 2 freezes everything except the per-class logit scales, tunes them
with class-balanced sampling, and emits soft labels.  Stage 3 trains a
freshly initialized network on hard labels plus the frozen soft labels,
again instance-balanced.  Stage 4 optionally re-tunes logit scales on
the stage-3 classifier.  Every stage writes a checkpoint plus a line-
delimited metrics log, and a run manifest ties the artifacts together
with content hashes so reruns can skip completed stages.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
import yaml

from .data import LongTailedDataset, load_dataset_bundle, make_synthetic_longtail
from .distill import (
    DISTILL_MODES,
    MODE_DUAL,
    MODE_SINGLE,
    SoftLabelSet,
    apply_distill_mode,
    generate_soft_labels,
    kd_loss,
)
from .evaluation import accuracy_breakdown, evaluate, predict_labels
from .models import (
    SELFSUP_TASKS,
    TASK_INSTANCE,
    TASK_NONE,
    TASK_ROTATION,
    ModelBundle,
    ModelConfig,
    freeze_backbone_train_scales,
    load_bundle,
    save_bundle,
)
from .sampling import CLASS_BALANCED, INSTANCE_BALANCED, SamplerSpec, epoch_indices
from .seeding import derive_seed
from .selfsup import (
    augment_strong,
    augment_weak,
    info_nce_batch,
    init_contrastive_state,
    make_rotation_batch,
    momentum_update,
    queue_push,
    rotation_loss,
    stage1_joint_loss,
)
from .serialization import config_hash, file_hash

MANIFEST_NAME = "manifest.json"
RUN_MANIFEST_FORMAT = "taildistill-run"

_STAGE_SAMPLERS = {1: INSTANCE_BALANCED, 2: CLASS_BALANCED, 3: INSTANCE_BALANCED, 4: CLASS_BALANCED}


class PipelineError(RuntimeError):
    """Raised when a stage cannot run or its artifacts are inconsistent."""


class TrainingDiverged(PipelineError):
    """Raised when a loss goes non-finite; training aborts immediately."""


@dataclass(frozen=True)
class StageConfig:
    """Hyper-parameters for one stage; the sampler follows from the stage."""

    stage: int
    epochs: int
    batch_size: int
    lr: float
    momentum: float = 0.9
    weight_decay: float = 0.0
    schedule: str = "cosine"
    selfsup_task: str = TASK_NONE
    alpha1: float = 1.0
    alpha2: float = 1.0
    distill_mode: str = MODE_DUAL
    temperature: float = 2.0
    lambda1: float = 1.0
    lambda2: float = 1.0
    tau: float = 0.2
    queue_size: int = 256
    encoder_momentum: float = 0.999

    def __post_init__(self):
        if self.stage not in (1, 2, 3, 4):
            raise PipelineError(f"stage must be 1..4, got {self.stage}")
        if self.epochs < 0:
            raise PipelineError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size <= 0 or self.lr <= 0:
            raise PipelineError("batch_size and lr must be positive")
        if self.schedule not in ("constant", "cosine"):
            raise PipelineError(f"unknown schedule {self.schedule!r}")
        if self.selfsup_task not in SELFSUP_TASKS:
            raise PipelineError(f"unknown self-supervised task {self.selfsup_task!r}")
        if self.distill_mode not in DISTILL_MODES:
            raise PipelineError(f"unknown distill mode {self.distill_mode!r}")
        if self.temperature <= 0:
            raise PipelineError("temperature must be positive")

    @property
    def sampler_strategy(self) -> str:
        return _STAGE_SAMPLERS[self.stage]

    def to_dict(self) -> dict:
        doc = {
            "stage": self.stage,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "momentum": self.momentum,
            "weight_decay": self.weight_decay,
            "schedule": self.schedule,
            "sampler_strategy": self.sampler_strategy,
        }
        if self.stage == 1:
            doc.update(
                selfsup_task=self.selfsup_task,
                alpha1=self.alpha1,
                alpha2=self.alpha2,
                tau=self.tau,
                queue_size=self.queue_size,
                encoder_momentum=self.encoder_momentum,
            )
        if self.stage == 2:
            doc.update(temperature=self.temperature)
        if self.stage == 3:
            doc.update(
                distill_mode=self.distill_mode,
                temperature=self.temperature,
                lambda1=self.lambda1,
                lambda2=self.lambda2,
            )
        return doc


@dataclass(frozen=True)
class MasterConfig:
    """Dataset, model, and per-stage settings for a full run."""

    seed: int
    dataset: dict
    model: dict
    stage1: StageConfig
    stage2: StageConfig
    stage3: StageConfig
    stage4: StageConfig = None

    def to_dict(self) -> dict:
        doc = {
            "seed": self.seed,
            "dataset": dict(self.dataset),
            "model": dict(self.model),
            "stage1": self.stage1.to_dict(),
            "stage2": self.stage2.to_dict(),
            "stage3": self.stage3.to_dict(),
        }
        if self.stage4 is not None:
            doc["stage4"] = self.stage4.to_dict()
        return doc


def load_master_config(path) -> MasterConfig:
    """Parse a YAML run config with dataset/model/stage sections."""
    doc = yaml.safe_load(Path(path).read_text())
    return master_config_from_dict(doc)


def master_config_from_dict(doc: dict) -> MasterConfig:
    stages = {}
    for k in (1, 2, 3, 4):
        section = doc.get(f"stage{k}")
        if section is None:
            if k == 4:
                continue
            raise PipelineError(f"config missing stage{k} section")
        section = {key: val for key, val in section.items() if key != "sampler_strategy"}
        stages[k] = StageConfig(stage=k, **section)
    return MasterConfig(
        seed=int(doc.get("seed", 0)),
        dataset=dict(doc.get("dataset", {})),
        model=dict(doc.get("model", {})),
        stage1=stages[1],
        stage2=stages[2],
        stage3=stages[3],
        stage4=stages.get(4),
    )


def resolve_dataset(dataset_section: dict):
    """Build or load the (train, test) pair named by a config's dataset section."""
    section = dict(dataset_section)
    kind = section.pop("kind", "synthetic")
    if kind == "synthetic":
        return make_synthetic_longtail(**section)
    if kind == "manifest":
        return load_dataset_bundle(section["path"])
    raise PipelineError(f"unknown dataset kind {kind!r}")


def dataset_fingerprint(dataset: LongTailedDataset) -> str:
    """Content hash of the instance arrays; identifies the exact data."""
    digest = hashlib.sha256()
    for arr in (dataset.images, dataset.labels, dataset.instance_ids, dataset.class_counts):
        digest.update(np.ascontiguousarray(arr).tobytes())
    return digest.hexdigest()


class MetricsLogger:
    """Append-only line-delimited metric records for one stage."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text("")

    def log(self, stage, epoch, split, metric, value):
        record = {"stage": stage, "epoch": epoch, "split": split, "metric": metric, "value": float(value)}
        with self.path.open("a") as fh:
            fh.write(json.dumps(record) + "\n")

    def log_breakdown(self, stage, epoch, metric, breakdown):
        self.log(stage, epoch, "all", metric, breakdown["overall_top1"])
        for split, value in breakdown["split_top1"].items():
            if not math.isnan(value):
                self.log(stage, epoch, split, metric, value)


def _limit_threads():
    # single-threaded math keeps floating-point reductions reproducible
    torch.set_num_threads(1)


def _to_torch(images: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(np.transpose(images, (0, 3, 1, 2))))


def _check_finite(loss, stage, epoch, step):
    if not torch.isfinite(loss):
        raise TrainingDiverged(f"stage {stage} epoch {epoch} step {step}: loss is {loss.item()}")


def _epoch_lr(cfg: StageConfig, epoch: int) -> float:
    if cfg.schedule == "constant" or cfg.epochs <= 1:
        return cfg.lr
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * epoch / (cfg.epochs - 1)))


def _set_lr(optimizer, lr):
    for group in optimizer.param_groups:
        group["lr"] = lr


def _iter_batches(positions: np.ndarray, batch_size: int):
    for start in range(0, len(positions), batch_size):
        yield positions[start:start + batch_size]


def _log_train_accuracy(bundle, dataset, heads, logger, stage, epoch):
    predictions = {head: predict_labels(bundle, dataset.images, head) for head in heads}
    for head, pred in predictions.items():
        breakdown = accuracy_breakdown(dataset.labels, pred, dataset.split_tags)
        logger.log_breakdown(stage, epoch, f"train_top1_{head}", breakdown)


def run_stage1(train_set, model_config: ModelConfig, cfg: StageConfig, out_dir, run_seed: int):
    """Joint supervised + self-supervised training from scratch.

    With ``selfsup_task: none`` this is the plain cross-entropy baseline.
    Returns the checkpoint path.
    """
    if cfg.stage != 1:
        raise PipelineError(f"run_stage1 got a stage-{cfg.stage} config")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model_config = replace(model_config, selfsup_task=cfg.selfsup_task, with_soft_head=False)
    bundle = ModelBundle(model_config, seed=derive_seed(run_seed, "stage1-init"))
    logger = MetricsLogger(out_dir / "stage1.metrics.jsonl")

    params = list(bundle.backbone.parameters()) + list(bundle.classifier.parameters())
    if bundle.rotation_head is not None:
        params += list(bundle.rotation_head.parameters())
    state = None
    if cfg.selfsup_task == TASK_INSTANCE:
        params += list(bundle.projection.parameters())
        state = init_contrastive_state(
            cfg.queue_size, model_config.proj_dim, cfg.tau, cfg.encoder_momentum,
            seed=derive_seed(run_seed, "stage1-queue"),
        )
    optimizer = torch.optim.SGD(params, lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)

    labels_all = torch.from_numpy(train_set.labels.copy())
    for epoch in range(cfg.epochs):
        _set_lr(optimizer, _epoch_lr(cfg, epoch))
        spec = SamplerSpec(cfg.sampler_strategy, seed=derive_seed(run_seed, "stage1-sampler", epoch))
        positions = train_set.positions_of(epoch_indices(train_set, spec))
        aug_rng = np.random.default_rng(derive_seed(run_seed, "stage1-augment", epoch))
        sup_losses, self_losses = [], []
        bundle.train()
        for step, batch in enumerate(_iter_batches(positions, cfg.batch_size)):
            raw = train_set.images[batch]
            x = _to_torch(augment_weak(raw, aug_rng))
            features = bundle.backbone(x)
            sup = F.cross_entropy(bundle.classifier(features), labels_all[batch])
            if cfg.selfsup_task == TASK_ROTATION:
                rot = make_rotation_batch(x.detach(), seed=derive_seed(run_seed, "stage1-rot", epoch, step))
                logits4 = bundle.rotation_head(bundle.backbone(rot.rotated_images))
                self_loss = rotation_loss(logits4, rot.rotation_labels)
            elif cfg.selfsup_task == TASK_INSTANCE:
                momentum_update(bundle.momentum_parameters(), bundle.online_parameters(), cfg.encoder_momentum)
                with torch.no_grad():
                    keys = bundle.momentum_projection(bundle.momentum_backbone(_to_torch(augment_strong(raw, aug_rng))))
                queries = bundle.projection(features)
                self_loss = info_nce_batch(queries, keys, state)
            else:
                self_loss = sup.new_zeros(())
            _check_finite(sup, 1, epoch, step)
            _check_finite(self_loss, 1, epoch, step)
            total = stage1_joint_loss(sup, self_loss, cfg.alpha1, cfg.alpha2)
            _check_finite(total, 1, epoch, step)
            optimizer.zero_grad()
            total.backward()
            optimizer.step()
            if cfg.selfsup_task == TASK_INSTANCE:
                state = queue_push(state, keys)
            sup_losses.append(sup.item())
            self_losses.append(self_loss.item())
        logger.log(1, epoch, "all", "loss_sup", np.mean(sup_losses))
        logger.log(1, epoch, "all", "loss_self", np.mean(self_losses))
        _log_train_accuracy(bundle, train_set, ["hard"], logger, 1, epoch)

    checkpoint = out_dir / "stage1.ckpt"
    meta = {"stage": 1, "epochs": cfg.epochs, "run_seed": run_seed, "stage_config_hash": config_hash(cfg.to_dict())}
    extra = {"contrastive_queue": state.queue.numpy().astype("<f4")} if state is not None else None
    save_bundle(checkpoint, bundle, meta, extra_arrays=extra)
    return checkpoint


def _train_scales(bundle, train_set, cfg, run_seed, stage, logger):
    """Shared stage-2/4 loop: tune logit scales against the frozen network.

    Batches are augmented like any other training stage; only the scale
    exponents receive gradients, so the backbone and classifier stay
    byte-identical.
    """
    scale_params = freeze_backbone_train_scales(bundle)
    bundle.eval()
    labels_all = torch.from_numpy(train_set.labels.copy())
    optimizer = torch.optim.SGD(scale_params, lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    tag = f"stage{stage}"
    for epoch in range(cfg.epochs):
        _set_lr(optimizer, _epoch_lr(cfg, epoch))
        spec = SamplerSpec(cfg.sampler_strategy, seed=derive_seed(run_seed, f"{tag}-sampler", epoch))
        positions = train_set.positions_of(epoch_indices(train_set, spec))
        aug_rng = np.random.default_rng(derive_seed(run_seed, f"{tag}-augment", epoch))
        losses = []
        for step, batch in enumerate(_iter_batches(positions, cfg.batch_size)):
            with torch.no_grad():
                base = bundle.classifier(bundle.backbone(_to_torch(augment_weak(train_set.images[batch], aug_rng))))
            loss = F.cross_entropy(base * bundle.lws.scales, labels_all[batch])
            _check_finite(loss, stage, epoch, step)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(loss.item())
        logger.log(stage, epoch, "all", "loss_ce", np.mean(losses))
        _log_train_accuracy(bundle, train_set, ["lws"], logger, stage, epoch)


def run_stage2(train_set, stage1_checkpoint, cfg: StageConfig, out_dir, run_seed: int):
    """Tune per-class scales class-balanced on frozen features; emit soft labels.

    Returns ``(checkpoint_path, soft_label_path)``.
    """
    if cfg.stage != 2:
        raise PipelineError(f"run_stage2 got a stage-{cfg.stage} config")
    stage1_checkpoint = Path(stage1_checkpoint)
    if not stage1_checkpoint.exists():
        raise PipelineError(f"stage-1 checkpoint not found: {stage1_checkpoint}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    bundle, _ = load_bundle(stage1_checkpoint)
    logger = MetricsLogger(out_dir / "stage2.metrics.jsonl")
    _train_scales(bundle, train_set, cfg, run_seed, 2, logger)

    checkpoint = out_dir / "stage2.ckpt"
    meta = {
        "stage": 2,
        "epochs": cfg.epochs,
        "run_seed": run_seed,
        "stage_config_hash": config_hash(cfg.to_dict()),
        "stage1_checkpoint_hash": file_hash(stage1_checkpoint),
    }
    save_bundle(checkpoint, bundle, meta)
    teacher_hash = file_hash(checkpoint)
    soft = generate_soft_labels(
        train_set, bundle.backbone, bundle.classifier, bundle.lws,
        temperature=cfg.temperature, teacher_hash=teacher_hash,
    )
    soft_path = out_dir / "soft_labels.bin"
    soft.save(soft_path)
    return checkpoint, soft_path


def run_stage3(
    train_set,
    soft_labels,
    cfg: StageConfig,
    out_dir,
    run_seed: int,
    model_config: ModelConfig,
    teacher_checkpoint=None,
):
    """Train a re-initialized network on hard labels plus frozen soft labels.

    ``soft_labels`` may be a SoftLabelSet or a path.  When
    ``teacher_checkpoint`` is given, its content hash must match the one
    recorded in the soft labels.  Returns the checkpoint path.
    """
    if cfg.stage != 3:
        raise PipelineError(f"run_stage3 got a stage-{cfg.stage} config")
    if not isinstance(soft_labels, SoftLabelSet):
        soft_labels = SoftLabelSet.load(soft_labels)
    if teacher_checkpoint is not None:
        actual = file_hash(teacher_checkpoint)
        if actual != soft_labels.teacher_hash:
            raise PipelineError(
                f"soft labels came from teacher {soft_labels.teacher_hash[:12]}, "
                f"checkpoint {Path(teacher_checkpoint).name} hashes to {actual[:12]}"
            )
    if not soft_labels.covers(train_set.instance_ids):
        raise PipelineError("soft labels do not cover every training instance")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    model_config = replace(
        model_config,
        selfsup_task=TASK_NONE,
        with_soft_head=cfg.distill_mode in (MODE_DUAL, MODE_SINGLE),
    )
    bundle = ModelBundle(model_config, seed=derive_seed(run_seed, "stage3-init"))
    wiring = apply_distill_mode(cfg.distill_mode, bundle)
    logger = MetricsLogger(out_dir / "stage3.metrics.jsonl")

    params = list(bundle.backbone.parameters()) + list(bundle.classifier.parameters())
    if bundle.soft_head is not None:
        params += list(bundle.soft_head.parameters())
    optimizer = torch.optim.SGD(params, lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)

    soft_matrix = torch.from_numpy(soft_labels.rows_for(train_set.instance_ids))
    labels_all = torch.from_numpy(train_set.labels.copy())
    heads = {"hard": bundle.classifier, "soft": bundle.soft_head}
    for epoch in range(cfg.epochs):
        _set_lr(optimizer, _epoch_lr(cfg, epoch))
        spec = SamplerSpec(cfg.sampler_strategy, seed=derive_seed(run_seed, "stage3-sampler", epoch))
        positions = train_set.positions_of(epoch_indices(train_set, spec))
        aug_rng = np.random.default_rng(derive_seed(run_seed, "stage3-augment", epoch))
        ce_losses, kd_losses = [], []
        bundle.train()
        for step, batch in enumerate(_iter_batches(positions, cfg.batch_size)):
            x = _to_torch(augment_weak(train_set.images[batch], aug_rng))
            features = bundle.backbone(x)
            kd = kd_loss(soft_matrix[batch], heads[wiring.kd_head](features), cfg.temperature)
            if wiring.ce_head is None:
                ce = kd.new_zeros(())
                total = cfg.lambda2 * kd
            else:
                ce = F.cross_entropy(heads[wiring.ce_head](features), labels_all[batch])
                total = cfg.lambda1 * ce + cfg.lambda2 * kd
            _check_finite(total, 3, epoch, step)
            optimizer.zero_grad()
            total.backward()
            optimizer.step()
            ce_losses.append(ce.item())
            kd_losses.append(kd.item())
        logger.log(3, epoch, "all", "loss_ce", np.mean(ce_losses))
        logger.log(3, epoch, "all", "loss_kd", np.mean(kd_losses))
        eval_heads = ["hard"] + (["soft"] if bundle.soft_head is not None else [])
        _log_train_accuracy(bundle, train_set, eval_heads, logger, 3, epoch)

    checkpoint = out_dir / "stage3.ckpt"
    meta = {
        "stage": 3,
        "epochs": cfg.epochs,
        "run_seed": run_seed,
        "stage_config_hash": config_hash(cfg.to_dict()),
        "distill_mode": cfg.distill_mode,
        "eval_head": wiring.eval_head,
        "teacher_hash": soft_labels.teacher_hash,
    }
    save_bundle(checkpoint, bundle, meta)
    return checkpoint


def run_stage4(train_set, stage3_checkpoint, cfg: StageConfig, out_dir, run_seed: int):
    """Tune logit scales on the frozen stage-3 classifier; returns checkpoint path."""
    if cfg.stage != 4:
        raise PipelineError(f"run_stage4 got a stage-{cfg.stage} config")
    stage3_checkpoint = Path(stage3_checkpoint)
    if not stage3_checkpoint.exists():
        raise PipelineError(f"stage-3 checkpoint not found: {stage3_checkpoint}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    bundle, _ = load_bundle(stage3_checkpoint)
    logger = MetricsLogger(out_dir / "stage4.metrics.jsonl")
    _train_scales(bundle, train_set, cfg, run_seed, 4, logger)
    checkpoint = out_dir / "stage4.ckpt"
    meta = {
        "stage": 4,
        "epochs": cfg.epochs,
        "run_seed": run_seed,
        "stage_config_hash": config_hash(cfg.to_dict()),
        "stage3_checkpoint_hash": file_hash(stage3_checkpoint),
    }
    save_bundle(checkpoint, bundle, meta)
    return checkpoint


@dataclass
class RunManifest:
    """Ordered record of stage artifacts for one full run."""

    dataset_fingerprint: str
    seed: int
    stages: list
    reports: dict

    def to_dict(self) -> dict:
        return {
            "format": RUN_MANIFEST_FORMAT,
            "version": 1,
            "dataset_fingerprint": self.dataset_fingerprint,
            "seed": self.seed,
            "stages": self.stages,
            "reports": self.reports,
        }

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> "RunManifest":
        doc = json.loads(Path(path).read_text())
        if doc.get("format") != RUN_MANIFEST_FORMAT:
            raise PipelineError(f"{path}: not a run manifest")
        return cls(
            dataset_fingerprint=doc["dataset_fingerprint"],
            seed=doc["seed"],
            stages=doc["stages"],
            reports=doc["reports"],
        )

    def stage_record(self, stage: int) -> dict:
        for record in self.stages:
            if record["stage"] == stage:
                return record
        raise PipelineError(f"manifest has no stage-{stage} record")


def _effective_hash(stage_cfg, master, fingerprint, upstream_hash):
    return config_hash(
        {
            "stage": stage_cfg.to_dict(),
            "model": master.model,
            "seed": master.seed,
            "dataset": fingerprint,
            "upstream": upstream_hash,
        }
    )


def run_full(train_set, test_set, master: MasterConfig, out_dir) -> RunManifest:
    """Run stages 1-4 in order, reusing completed stages when hashes match.

    Writes checkpoints, metrics, soft labels, evaluation reports, and the
    manifest under ``out_dir``.
    """
    _limit_threads()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    fingerprint = dataset_fingerprint(train_set)
    model_config = ModelConfig(num_classes=train_set.num_classes, **master.model)

    previous = None
    manifest_path = out_dir / MANIFEST_NAME
    if manifest_path.exists():
        previous = RunManifest.load(manifest_path)
        if previous.dataset_fingerprint != fingerprint or previous.seed != master.seed:
            previous = None

    def reusable(stage, expected_hash, *artifacts):
        if previous is None:
            return None
        try:
            record = previous.stage_record(stage)
        except PipelineError:
            return None
        if record["effective_hash"] != expected_hash:
            return None
        if not all(Path(a).exists() for a in [record[k] for k in artifacts]):
            return None
        return record

    stages = []
    reports = {}

    def execute(stage_num, cfg, upstream_hash, runner, artifact_keys):
        eff = _effective_hash(cfg, master, fingerprint, upstream_hash)
        cached = reusable(stage_num, eff, *artifact_keys)
        if cached is not None:
            stages.append(cached)
            return cached
        try:
            produced = runner()
        except PipelineError:
            raise
        except Exception as err:
            raise PipelineError(f"stage {stage_num} failed: {err}") from err
        record = {
            "stage": stage_num,
            "effective_hash": eff,
            "config_hash": config_hash(cfg.to_dict()),
            "metrics": str(out_dir / f"stage{stage_num}.metrics.jsonl"),
        }
        record.update(produced)
        stages.append(record)
        return record

    rec1 = execute(
        1, master.stage1, upstream_hash="",
        runner=lambda: {"checkpoint": str(run_stage1(train_set, model_config, master.stage1, out_dir, master.seed))},
        artifact_keys=("checkpoint",),
    )
    rec2 = execute(
        2, master.stage2, upstream_hash=file_hash(rec1["checkpoint"]),
        runner=lambda: dict(
            zip(("checkpoint", "soft_labels"),
                map(str, run_stage2(train_set, rec1["checkpoint"], master.stage2, out_dir, master.seed)))
        ),
        artifact_keys=("checkpoint", "soft_labels"),
    )
    rec3 = execute(
        3, master.stage3, upstream_hash=file_hash(rec2["checkpoint"]),
        runner=lambda: {
            "checkpoint": str(
                run_stage3(
                    train_set, rec2["soft_labels"], master.stage3, out_dir, master.seed,
                    model_config, teacher_checkpoint=rec2["checkpoint"],
                )
            )
        },
        artifact_keys=("checkpoint",),
    )
    final_record = rec3
    if master.stage4 is not None:
        final_record = execute(
            4, master.stage4, upstream_hash=file_hash(rec3["checkpoint"]),
            runner=lambda: {"checkpoint": str(run_stage4(train_set, rec3["checkpoint"], master.stage4, out_dir, master.seed))},
            artifact_keys=("checkpoint",),
        )

    bundle3, meta3 = load_bundle(rec3["checkpoint"])
    report3 = evaluate(bundle3, meta3["eval_head"], test_set, checkpoint_hash=file_hash(rec3["checkpoint"]))
    report3_path = out_dir / "eval_stage3.json"
    report3.save(report3_path)
    reports["stage3"] = str(report3_path)
    if master.stage4 is not None:
        bundle4, _ = load_bundle(final_record["checkpoint"])
        report4 = evaluate(bundle4, "lws", test_set, checkpoint_hash=file_hash(final_record["checkpoint"]))
        report4_path = out_dir / "eval_stage4.json"
        report4.save(report4_path)
        reports["stage4"] = str(report4_path)

    manifest = RunManifest(dataset_fingerprint=fingerprint, seed=master.seed, stages=stages, reports=reports)
    manifest.save(manifest_path)
    return manifest
