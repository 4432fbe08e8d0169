"""Command-line front end for dataset building, stage training, and reports."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .data import DatasetError, save_dataset_bundle
from .distill import DistillError, SoftLabelSet
from .evaluation import HEAD_SELECTORS, EvalError, distribution_report, evaluate
from .models import ModelConfig, ModelError, load_bundle
from .pipeline import (
    MasterConfig,
    PipelineError,
    load_master_config,
    resolve_dataset,
    run_full,
    run_stage1,
    run_stage2,
    run_stage3,
    run_stage4,
)
from .sampling import SamplingError
from .selfsup import SelfSupError
from .serialization import ContainerError, file_hash

_USER_ERRORS = (
    PipelineError,
    DatasetError,
    DistillError,
    EvalError,
    ModelError,
    SamplingError,
    SelfSupError,
    ContainerError,
    FileNotFoundError,
    KeyError,
)


def _add_config(parser):
    parser.add_argument("--config", required=True, help="run config YAML")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="taildistill", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-dataset", help="materialize the configured dataset to a manifest")
    _add_config(p)
    p.add_argument("--out", required=True, help="manifest path to write (JSON)")

    for stage in (1, 2, 3, 4):
        p = sub.add_parser(f"stage{stage}", help=f"run stage {stage} only")
        _add_config(p)
        p.add_argument("--out", required=True, help="output directory for checkpoints and metrics")
        if stage == 2:
            p.add_argument("--stage1-checkpoint", required=True)
        if stage == 3:
            p.add_argument("--soft-labels", required=True)
            p.add_argument("--teacher-checkpoint", default=None, help="stage-2 checkpoint to hash-verify against")
        if stage == 4:
            p.add_argument("--stage3-checkpoint", required=True)

    p = sub.add_parser("run-all", help="run stages 1-4 end to end")
    _add_config(p)
    p.add_argument("--out", required=True, help="output directory for all artifacts")

    p = sub.add_parser("evaluate", help="score a checkpoint on the balanced test set")
    _add_config(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--head", choices=HEAD_SELECTORS, default=None, help="defaults to the head recorded in the checkpoint")
    p.add_argument("--out", default=None, help="optional report path (JSON)")

    p = sub.add_parser("report-distribution", help="original vs re-balanced vs distilled class mass")
    _add_config(p)
    p.add_argument("--soft-labels", default=None)
    p.add_argument("--out", default=None, help="optional report path (JSON)")

    return parser


def _load_run(args) -> MasterConfig:
    master = load_master_config(args.config)
    if args.seed is not None:
        master = MasterConfig(
            seed=args.seed,
            dataset=master.dataset,
            model=master.model,
            stage1=master.stage1,
            stage2=master.stage2,
            stage3=master.stage3,
            stage4=master.stage4,
        )
    return master


def _emit(doc: dict, out_path):
    text = json.dumps(doc, indent=2, sort_keys=True)
    if out_path:
        Path(out_path).write_text(text)
    print(text)


def _dispatch(args) -> int:
    master = _load_run(args)
    train_set, test_set = resolve_dataset(master.dataset)
    command = args.command

    if command == "build-dataset":
        if master.dataset.get("kind", "synthetic") == "synthetic":
            params = {k: v for k, v in master.dataset.items() if k != "kind"}
            save_dataset_bundle(args.out, synthetic_params=params)
        else:
            save_dataset_bundle(args.out, train=train_set, test=test_set)
        print(f"wrote dataset manifest to {args.out}")
        return 0

    model_config = ModelConfig(num_classes=train_set.num_classes, **master.model)

    if command == "stage1":
        path = run_stage1(train_set, model_config, master.stage1, args.out, master.seed)
        print(f"stage 1 checkpoint: {path}")
        return 0
    if command == "stage2":
        ckpt, soft = run_stage2(train_set, args.stage1_checkpoint, master.stage2, args.out, master.seed)
        print(f"stage 2 checkpoint: {ckpt}")
        print(f"soft labels: {soft}")
        return 0
    if command == "stage3":
        path = run_stage3(
            train_set, args.soft_labels, master.stage3, args.out, master.seed,
            model_config, teacher_checkpoint=args.teacher_checkpoint,
        )
        print(f"stage 3 checkpoint: {path}")
        return 0
    if command == "stage4":
        if master.stage4 is None:
            raise PipelineError("config has no stage4 section")
        path = run_stage4(train_set, args.stage3_checkpoint, master.stage4, args.out, master.seed)
        print(f"stage 4 checkpoint: {path}")
        return 0
    if command == "run-all":
        manifest = run_full(train_set, test_set, master, args.out)
        for name, report_path in sorted(manifest.reports.items()):
            print(f"{name} report: {report_path}")
        print(f"manifest: {Path(args.out) / 'manifest.json'}")
        return 0
    if command == "evaluate":
        bundle, meta = load_bundle(args.checkpoint)
        head = args.head or meta.get("eval_head", "hard")
        report = evaluate(bundle, head, test_set, checkpoint_hash=file_hash(args.checkpoint))
        _emit(report.to_dict(), args.out)
        return 0
    if command == "report-distribution":
        soft = SoftLabelSet.load(args.soft_labels) if args.soft_labels else None
        _emit(distribution_report(train_set, soft), args.out)
        return 0
    raise PipelineError(f"unhandled command {command!r}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _dispatch(args)
    except _USER_ERRORS as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
