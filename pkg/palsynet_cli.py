#!/usr/bin/env python3
"""
🌀 PALSYNET CLI
Single entry point for dataset generation, training, LOSO evaluation, ablations,
face-score fusion, gradient checking and prediction.

Usage:
    python palsynet_cli.py generate --config palsynet_config.yaml
    python palsynet_cli.py train --config palsynet_config.yaml
    python palsynet_cli.py loso --config palsynet_config.yaml --workers 4
    python palsynet_cli.py ablate frame-duration --config palsynet_config.yaml
    python palsynet_cli.py ablate loss --config palsynet_config.yaml
    python palsynet_cli.py fuse-score heatmaps.ptns candidates.txt --gammas 1,0.75
    python palsynet_cli.py gradcheck --selector desk --seed 0
    python palsynet_cli.py predict --config palsynet_config.yaml --checkpoint runs/motion clip.psq

Exit codes: 0 success, 1 runtime or I/O failure, 2 usage or configuration error.
Experiments are configured by file; flags only choose paths, workers and verbosity.
"""

import argparse
import sys
import time
from typing import List, Optional

from facefuse import FuseInputError, load_candidates, load_heatmaps, parse_gammas, score_candidates
from gradient_check import CASES, run_gradcheck_suite
from loso_evaluation import (
    clear_report, confusion_matrix, f1_report, run_ablation_frame_duration, run_ablation_loss, run_loso,
    write_ablation_table, write_json_complete, write_report,
)
from palsy_trainer import load_checkpoint, predict, save_checkpoint, train
from palsynet_config import ConfigError, RunConfig, load_run_config
from resnet3d_model import NetworkSpec, load_params
from synthetic_dataset import generate_dataset, load_manifest
from tensor_core import FormatError
from videopipe import SequenceError, load_sequence

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
ABLATIONS = ("frame-duration", "loss")


def _fail(message: str, code: int) -> int:
    print(f"❌ {message}", file=sys.stderr)
    return code


def headline(task: str, macro_f1: float, **extra) -> str:
    fields = [f"task={task}"] + [f"{k}={v}" for k, v in extra.items()] + [f"macro_f1={macro_f1:.4f}"]
    return " ".join(fields)


def _prepare(config_path: Optional[str], needs_dataset: bool = True) -> RunConfig:
    cfg = load_run_config(config_path)
    if needs_dataset:
        cfg.require_inputs()
    return cfg


def _init_params(cfg: RunConfig, spec: NetworkSpec):
    return load_params(cfg.init_params, spec) if cfg.init_params is not None else None


def cmd_generate(config_path: Optional[str], verbose: bool = True) -> int:
    cfg = _prepare(config_path, needs_dataset=False)
    manifest = generate_dataset(cfg.synthetic, cfg.dataset_dir, verbose=verbose)
    print(f"✨ {len(manifest)} sequences for {len(manifest.subjects)} subjects in {cfg.dataset_dir}")
    return EXIT_OK


def cmd_train(config_path: Optional[str], verbose: bool = True) -> int:
    cfg = _prepare(config_path)
    manifest = load_manifest(cfg.manifest_path)
    spec = cfg.network_spec()
    state = train(manifest, cfg.optimizer, cfg.task, spec, init=_init_params(cfg, spec),
                  augmentation=cfg.augmentation, verbose=verbose)
    save_checkpoint(state, cfg.optimizer, cfg.output_dir, cfg.task)

    predicted, _ = predict(state.params, spec, [manifest.load(r) for r in manifest.records], cfg.optimizer.batch_size)
    cm = confusion_matrix(manifest.labels(cfg.task), predicted, cfg.task.num_classes)
    metrics = f1_report(cm)
    write_json_complete({"task": cfg.task.value, "split": "train", "confusion": cm.to_list(),
                         "metrics": metrics.to_dict(cfg.task.class_names), "macro_f1": metrics.macro_f1},
                        cfg.output_dir / "train_report.json")
    print(headline(cfg.task.value, metrics.macro_f1))
    return EXIT_OK


def cmd_loso(config_path: Optional[str], workers: Optional[int] = None, verbose: bool = True) -> int:
    cfg = _prepare(config_path)
    manifest = load_manifest(cfg.manifest_path)
    spec = cfg.network_spec()
    clear_report(cfg.output_dir)
    workers = workers or cfg.workers
    started = time.perf_counter()
    report = run_loso(manifest, cfg.optimizer, cfg.task, spec, workers,
                      augmentation=cfg.augmentation, init=_init_params(cfg, spec), verbose=verbose)
    write_report(report, cfg.output_dir)
    if verbose:
        print(f"✨ LOSO wall time {time.perf_counter() - started:.1f} s with {workers} worker(s)")
    print(headline(cfg.task.value, report.macro_f1))
    return EXIT_OK


def cmd_ablate(config_path: Optional[str], kind: str, workers: Optional[int] = None, verbose: bool = True) -> int:
    if kind not in ABLATIONS:
        raise ConfigError(f"unknown ablation {kind!r} (expected one of {', '.join(ABLATIONS)})")
    cfg = _prepare(config_path)
    manifest = load_manifest(cfg.manifest_path)
    workers = workers or cfg.workers
    clear_report(cfg.output_dir, f"ablation_{kind.replace('-', '_')}")
    if kind == "frame-duration":
        rows = run_ablation_frame_duration(manifest, cfg.optimizer, cfg.task, cfg.network_spec(),
                                           cfg.ablation.durations, workers, cfg.augmentation,
                                           cfg.ablation.record_wall_time, verbose=verbose)
        write_ablation_table(rows, cfg.output_dir, kind, cfg.task)
        for row in rows:
            print(headline(cfg.task.value, row.macro_f1, duration=row.duration))
    else:
        rows = run_ablation_loss(manifest, cfg.optimizer, cfg.task, cfg.network_spec(), cfg.ablation.loss_subjects,
                                 workers, cfg.augmentation, verbose=verbose)
        write_ablation_table(rows, cfg.output_dir, kind, cfg.task)
        for row in rows:
            print(headline(cfg.task.value, row.macro_f1, loss=row.loss_mode))
    return EXIT_OK


def cmd_fuse_score(heatmap_path: str, candidates_path: str, gammas: Optional[str] = None) -> int:
    try:
        heatmaps = load_heatmaps(heatmap_path)
        candidates = load_candidates(candidates_path)
        scores = score_candidates(heatmaps, parse_gammas(gammas, heatmaps.count), candidates)
    except (FuseInputError, FormatError, OSError) as e:
        return _fail(f"fuse-score: {e}", EXIT_USAGE)
    for score in scores:
        print(score.line())
    return EXIT_OK


def cmd_gradcheck(selector: str = "desk", seed: int = 0, instances: int = 20, corrupt: Optional[str] = None,
                  verbose: bool = True) -> int:
    try:
        NetworkSpec.from_selector(selector, num_classes=3)
    except ValueError as e:
        return _fail(f"gradcheck: {e}", EXIT_USAGE)
    if corrupt is not None and corrupt not in CASES and corrupt != f"network[{selector}]":
        return _fail(f"gradcheck: unknown op {corrupt!r} for --corrupt", EXIT_USAGE)

    if verbose:
        print(f"🌀 Gradient check: {len(CASES)} ops × {instances} instances + network[{selector}], seed {seed}")
    summary = run_gradcheck_suite(seed=seed, instances=instances, selector=selector, corrupt=corrupt)
    worst = summary.worst
    print(f"worst: op={worst.op} tensor={worst.tensor} instance={worst.instance} rel_error={worst.rel_error:.3e}")
    if not summary.passed:
        offender = max(summary.failures, key=lambda r: r.rel_error)
        return _fail(f"gradient check failed: op={offender.op} rel_error={offender.rel_error:.3e}", EXIT_RUNTIME)
    print(f"✨ gradient check passed ({len(summary.results)} comparisons)")
    return EXIT_OK


def cmd_predict(config_path: Optional[str], checkpoint: str, sequence_path: str) -> int:
    cfg = _prepare(config_path, needs_dataset=False)
    spec = cfg.network_spec()
    params, _, _ = load_checkpoint(checkpoint, spec, cfg.optimizer.center_alpha)
    try:
        sequence = load_sequence(sequence_path)
    except SequenceError as e:
        return _fail(f"predict: {e}", EXIT_USAGE)
    labels, _ = predict(params, spec, [sequence])
    print(f"prediction={cfg.task.class_names[int(labels[0])]}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="3D-CNN mouth-motion and palsy-grade pipeline")
    parser.add_argument("--quiet", action="store_true", help="Only print results and errors")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, text in (("generate", "Write the synthetic dataset and manifest"),
                       ("train", "Train one model on the whole dataset and save a checkpoint"),
                       ("loso", "Leave-one-subject-out evaluation")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", default=None, help="YAML/JSON run configuration")
        if name == "loso":
            p.add_argument("--workers", type=int, default=None, help="Folds evaluated concurrently")

    p = sub.add_parser("ablate", help="Frame-duration or loss-function ablation")
    p.add_argument("kind", choices=ABLATIONS)
    p.add_argument("--config", default=None, help="YAML/JSON run configuration")
    p.add_argument("--workers", type=int, default=None, help="Folds evaluated concurrently")

    p = sub.add_parser("fuse-score", help="Fuse heatmap confidence with detector candidates")
    p.add_argument("heatmaps", help="PTNS tensor n×rows×cols")
    p.add_argument("candidates", help="Lines of `x y det height p_faster img_width`")
    p.add_argument("--gammas", default=None, help="Visibility weights: comma list or file (default all 1.0)")

    p = sub.add_parser("gradcheck", help="Finite-difference gradient verification in 64-bit")
    p.add_argument("--selector", default="desk", help="Network spec for the head check (desk|full)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--corrupt", default=None, help=argparse.SUPPRESS)

    p = sub.add_parser("predict", help="Classify one PSQ1 sequence with a trained checkpoint")
    p.add_argument("--config", default=None, help="YAML/JSON run configuration")
    p.add_argument("--checkpoint", required=True, help="Directory written by `train`")
    p.add_argument("sequence", help="PSQ1 sequence file")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    verbose = not args.quiet

    try:
        if args.command == "generate":
            return cmd_generate(args.config, verbose)
        if args.command == "train":
            return cmd_train(args.config, verbose)
        if args.command == "loso":
            return cmd_loso(args.config, args.workers, verbose)
        if args.command == "ablate":
            return cmd_ablate(args.config, args.kind, args.workers, verbose)
        if args.command == "fuse-score":
            return cmd_fuse_score(args.heatmaps, args.candidates, args.gammas)
        if args.command == "gradcheck":
            return cmd_gradcheck(args.selector, args.seed, args.instances, args.corrupt, verbose)
        return cmd_predict(args.config, args.checkpoint, args.sequence)
    except ConfigError as e:
        return _fail(f"configuration error: {e}", EXIT_USAGE)
    except KeyboardInterrupt:
        return _fail("interrupted", EXIT_RUNTIME)
    except Exception as e:
        return _fail(f"{args.command} failed: {type(e).__name__}: {e}", EXIT_RUNTIME)


if __name__ == "__main__":
    sys.exit(main())
