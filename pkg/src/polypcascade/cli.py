"""Command-line entry point: pipeline runs, reward scoring, training, ablations.

Exit codes: 0 clean, 1 fatal (configuration or I/O), 2 partial (some frames,
records, or variants failed while the rest completed).
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
from typing import Dict, List, Optional, Sequence, Tuple

from . import __version__
from .backends import (
    FixtureError,
    HttpVerifier,
    OracleVerifier,
    ReplayDetector,
    ReplayVerifier,
)
from .cascade import DatasetRun, audit_record, run_dataset
from .config import ConfigError, RunConfig, load_config, load_dataset
from .frames import FrameRecord
from .grpo import (
    FEATURE_DIM,
    PolicyVerifier,
    ToyVerifierPolicy,
    evaluate_recall,
    load_checkpoint,
    make_synthetic_task,
    save_checkpoint,
    supervised_warm_start,
    target_action,
    train,
)
from .metrics import StratifiedReport, ablation_table, build_report, round_pct, stratum_csv_rows
from .quality import ThresholdController
from .rewards import reward_total

EXIT_OK = 0
EXIT_FATAL = 1
EXIT_PARTIAL = 2

ABLATION_VARIANTS = ("fixed_tau", "adaptive_tau", "adaptive_grpo")


def provenance(config: RunConfig) -> dict:
    return {
        "config_hash": config.config_hash(),
        "seed": config.seed,
        "version": __version__,
    }


def build_backends(config: RunConfig, frames: Sequence[FrameRecord]):
    """Instantiate (detector, verifier) per the backend section."""
    b = config.backend
    if b.detector_fixture is None:
        raise ConfigError("backend requires detector_fixture (candidates are replayed)")
    detector = ReplayDetector(b.detector_fixture)

    if b.policy_checkpoint:
        policy, _ = load_checkpoint(b.policy_checkpoint)
        return detector, PolicyVerifier(policy, frames)
    if b.kind == "replay":
        if b.verifier_fixture is None:
            raise ConfigError("replay backend requires verifier_fixture")
        return detector, ReplayVerifier(b.verifier_fixture)
    if b.kind == "oracle":
        return detector, OracleVerifier(frames, tau_iou=config.cascade.tau_iou)
    if b.kind == "http":
        if not b.endpoint:
            raise ConfigError("http backend requires an endpoint")
        return detector, HttpVerifier(
            b.endpoint,
            token=os.environ.get(b.token_env),
            timeout_s=b.timeout_s,
            max_attempts=b.max_attempts,
            backoff_s=b.backoff_s,
            max_in_flight=b.max_in_flight,
        )
    raise ConfigError(f"unknown backend kind {b.kind!r}")


def controller_for(config: RunConfig) -> ThresholdController:
    return ThresholdController(
        config.threshold_policy,
        config.quality_weights,
        adverse_source=config.adverse_source,
    )


def _dump(obj: dict) -> str:
    return json.dumps(obj, sort_keys=True)


def write_audit_log(
    path: str, config: RunConfig, frames: Sequence[FrameRecord], run: DatasetRun
) -> None:
    by_id = {r.frame_id: r for r in run.results}
    errors = {f.frame_id: f for f in run.failures}
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_dump({"provenance": provenance(config)}) + "\n")
        for frame in frames:
            if frame.frame_id in by_id:
                fh.write(_dump(audit_record(by_id[frame.frame_id])) + "\n")
            elif frame.frame_id in errors:
                fh.write(
                    _dump({"frame_id": frame.frame_id, "error": errors[frame.frame_id].error})
                    + "\n"
                )


def report_to_dict(report: StratifiedReport) -> dict:
    def triple(t):
        return {
            "precision": round_pct(t.precision),
            "recall": round_pct(t.recall),
            "miou": round_pct(t.miou),
            "frames": t.frames,
            "degenerate": t.degenerate,
        }

    return {
        "overall": triple(report.overall),
        "per_condition": {k: triple(v) for k, v in report.per_condition.items()},
        "per_tag": {k: triple(v) for k, v in report.per_tag.items()},
        "deltas": report.deltas,
        "latency": {
            "mean_ms": report.latency_mean_ms,
            "p95_ms": report.latency_p95_ms,
        },
        "notes": {
            "miou": "mean IoU over matched final/ground-truth pairs; unmatched boxes excluded",
            "percent_rounding": "half-up to one decimal",
        },
    }


def render_report_text(report: StratifiedReport, failures: int) -> str:
    lines = []
    lines.append("stratum            frames  precision  recall  mIoU")
    lines.append("mIoU = mean IoU over matched final/ground-truth pairs")

    def row(name, t):
        return (
            f"{name:<18} {t.frames:>6}  {round_pct(t.precision):>9.1f}"
            f"  {round_pct(t.recall):>6.1f}  {round_pct(t.miou):>4.1f}"
        )

    lines.append(row("overall", report.overall))
    for name, t in report.per_condition.items():
        lines.append(row(f"condition:{name}", t))
    for name, t in report.per_tag.items():
        lines.append(row(f"tag:{name}", t))
    for name, delta in report.deltas.items():
        lines.append(f"delta_recall vs {name}: {delta:+.1f} pp")
    if failures:
        lines.append(f"failed frames: {failures}")
    if report.latency_mean_ms is not None:
        lines.append(f"latency mean_ms: {report.latency_mean_ms:.3f}")
        lines.append(f"latency p95_ms: {report.latency_p95_ms:.3f}")
    return "\n".join(lines) + "\n"


def cmd_run(config: RunConfig) -> int:
    if not config.dataset:
        raise ConfigError("a dataset path is required (--dataset or config)")
    frames = load_dataset(config.dataset)
    detector, verifier = build_backends(config, frames)
    run = run_dataset(
        frames, detector, verifier, controller_for(config), config.cascade, config.workers
    )
    os.makedirs(config.out_dir, exist_ok=True)
    write_audit_log(os.path.join(config.out_dir, "audit.ndjson"), config, frames, run)

    report = build_report(run.results, config.cascade.tau_iou)
    payload = {
        "provenance": provenance(config),
        **report_to_dict(report),
        "failures": [{"frame_id": f.frame_id, "error": f.error} for f in run.failures],
    }
    with open(os.path.join(config.out_dir, "report.json"), "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(config.out_dir, "report.txt"), "w", encoding="utf-8") as fh:
        fh.write(render_report_text(report, len(run.failures)))
    with open(
        os.path.join(config.out_dir, "metrics_by_stratum.csv"), "w", encoding="utf-8", newline=""
    ) as fh:
        csv.writer(fh).writerows(stratum_csv_rows(report))
    return EXIT_PARTIAL if run.partial else EXIT_OK


def cmd_score(config: RunConfig, responses_path: str) -> int:
    if not config.dataset:
        raise ConfigError("a dataset path is required (--dataset or config)")
    frames = {f.frame_id: f for f in load_dataset(config.dataset)}
    os.makedirs(config.out_dir, exist_ok=True)

    records: List[dict] = []
    skipped = 0
    try:
        with open(responses_path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                    frame_id = obj["frame_id"]
                    raw = obj["raw_response"]
                except (json.JSONDecodeError, KeyError, TypeError) as exc:
                    raise ConfigError(
                        f"{responses_path}:{lineno}: bad response record: {exc}"
                    ) from exc
                frame = frames.get(frame_id)
                if frame is None:
                    skipped += 1
                    records.append({"frame_id": frame_id, "error": "unknown frame_id"})
                    continue
                breakdown = reward_total(
                    raw,
                    frame.ground_truths,
                    config.rewards,
                    frame.image_width,
                    frame.image_height,
                )
                records.append(
                    {
                        "frame_id": frame_id,
                        "condition": frame.condition,
                        **breakdown.to_dict(),
                    }
                )
    except OSError as exc:
        raise ConfigError(f"cannot read responses {responses_path}: {exc}") from exc

    with open(os.path.join(config.out_dir, "rewards.ndjson"), "w", encoding="utf-8") as fh:
        fh.write(_dump({"provenance": provenance(config)}) + "\n")
        for record in records:
            fh.write(_dump(record) + "\n")

    scored = [r for r in records if "r_total" in r]
    by_condition: Dict[str, List[float]] = {}
    for r in scored:
        by_condition.setdefault(r["condition"], []).append(r["r_total"])
    summary = {
        "provenance": provenance(config),
        "responses": len(records),
        "scored": len(scored),
        "skipped": skipped,
        "mean_r_total": (sum(r["r_total"] for r in scored) / len(scored)) if scored else None,
        "mean_by_condition": {
            k: sum(v) / len(v) for k, v in sorted(by_condition.items())
        },
    }
    with open(os.path.join(config.out_dir, "score_summary.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return EXIT_OK


def cmd_train(config: RunConfig, resume: Optional[str] = None) -> int:
    task = config.train_task
    train_items, heldout = make_synthetic_task(
        task.task_seed, n_train=task.n_train, n_heldout=task.n_heldout
    )
    if resume:
        policy, start_step = load_checkpoint(resume)
    else:
        policy, start_step = ToyVerifierPolicy(FEATURE_DIM), 0
        if task.warm_start:
            supervised_warm_start(
                policy, [(i.features, target_action(i.label)) for i in train_items]
            )
    report = train(
        policy, train_items, config.train, config.rewards, seed=config.seed,
        start_step=start_step,
    )
    os.makedirs(config.out_dir, exist_ok=True)
    with open(os.path.join(config.out_dir, "train_report.ndjson"), "w", encoding="utf-8") as fh:
        fh.write(_dump({"provenance": provenance(config)}) + "\n")
        for record in report.records:
            fh.write(_dump(record.to_dict()) + "\n")
    save_checkpoint(
        policy, os.path.join(config.out_dir, "checkpoint.json"), step=report.final_step
    )
    summary = {
        "provenance": provenance(config),
        "aborted": report.aborted,
        "steps": len(report.records),
        "final_step": report.final_step,
        "start_reward": report.start_reward if report.records else None,
        "final_reward": report.final_reward if report.records else None,
        "heldout_recall": evaluate_recall(policy, heldout, config.cascade.tau_conf),
    }
    with open(os.path.join(config.out_dir, "train_summary.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return EXIT_PARTIAL if report.aborted else EXIT_OK


def apply_variant(config: RunConfig, name: str) -> RunConfig:
    if name == "fixed_tau":
        return dataclasses.replace(config, adverse_source="never")
    if name == "adaptive_tau":
        return config
    if name == "adaptive_grpo":
        # falls back to the configured verifier when no checkpoint is given
        return config
    raise ConfigError(f"unknown variant {name!r}; choose from {ABLATION_VARIANTS}")


def cmd_ablate(config: RunConfig, variants: Sequence[str]) -> int:
    if len(variants) < 2:
        raise ConfigError("ablation needs a baseline plus at least one variant")
    if not config.dataset:
        raise ConfigError("a dataset path is required (--dataset or config)")
    frames = load_dataset(config.dataset)

    rows: List[Tuple[str, float, float]] = []
    errors: Dict[str, str] = {}
    for name in variants:
        try:
            variant_config = apply_variant(config, name)
            detector, verifier = build_backends(variant_config, frames)
            run = run_dataset(
                frames, detector, verifier, controller_for(variant_config),
                variant_config.cascade, variant_config.workers,
            )
            report = build_report(run.results, variant_config.cascade.tau_iou)
            rows.append(
                (name, round_pct(report.overall.precision), round_pct(report.overall.recall))
            )
        except (ConfigError, FixtureError, OSError) as exc:
            errors[name] = str(exc)

    if not rows or variants[0] in errors:
        raise ConfigError(f"baseline variant failed: {errors.get(variants[0], 'no rows')}")

    table = ablation_table(rows) if len(rows) >= 2 else [
        {"configuration": rows[0][0], "precision": rows[0][1], "recall": rows[0][2],
         "delta_recall": None}
    ]
    for name in variants:
        if name in errors:
            table.append({"configuration": name, "error": errors[name]})

    os.makedirs(config.out_dir, exist_ok=True)
    with open(os.path.join(config.out_dir, "ablation.json"), "w", encoding="utf-8") as fh:
        json.dump({"provenance": provenance(config), "rows": table}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(config.out_dir, "ablation.txt"), "w", encoding="utf-8") as fh:
        fh.write("configuration      precision  recall  delta_recall\n")
        for row in table:
            if "error" in row:
                fh.write(f"{row['configuration']:<18} FAILED: {row['error']}\n")
            else:
                delta = "--" if row["delta_recall"] is None else f"{row['delta_recall']:+.1f}"
                fh.write(
                    f"{row['configuration']:<18} {row['precision']:>9.1f}"
                    f"  {row['recall']:>6.1f}  {delta:>12}\n"
                )
    return EXIT_PARTIAL if errors else EXIT_OK


def _apply_overrides(config: RunConfig, args: argparse.Namespace) -> RunConfig:
    updates = {}
    if getattr(args, "dataset", None):
        updates["dataset"] = args.dataset
    if getattr(args, "workers", None) is not None:
        updates["workers"] = args.workers
    if getattr(args, "seed", None) is not None:
        updates["seed"] = args.seed
    if getattr(args, "out", None):
        updates["out_dir"] = args.out
    if getattr(args, "backend", None):
        updates["backend"] = dataclasses.replace(config.backend, kind=args.backend)
    return dataclasses.replace(config, **updates) if updates else config


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", help="JSON run configuration")
    sub.add_argument("--dataset", help="dataset manifest (.json) or frames (.ndjson)")
    sub.add_argument("--backend", choices=["replay", "http"], help="verifier backend")
    sub.add_argument("--workers", type=int, help="frame worker count")
    sub.add_argument("--seed", type=int, help="run seed")
    sub.add_argument("--out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="polypcascade",
        description="Cascaded detector-verifier pipeline engine",
    )
    parser.add_argument("--version", action="version", version=__version__)
    commands = parser.add_subparsers(dest="command", required=True)

    run_p = commands.add_parser("run", help="run the cascade over a dataset")
    _add_common(run_p)

    score_p = commands.add_parser("score", help="batch-score raw responses")
    _add_common(score_p)
    score_p.add_argument("--responses", required=True, help="NDJSON of raw model responses")

    train_p = commands.add_parser("train", help="train the toy verifier policy")
    _add_common(train_p)
    train_p.add_argument("--resume", help="checkpoint to resume from")

    ablate_p = commands.add_parser("ablate", help="run ablation variants")
    _add_common(ablate_p)
    ablate_p.add_argument(
        "--variant",
        action="append",
        dest="variants",
        help=f"variant name (repeatable): {', '.join(ABLATION_VARIANTS)}",
    )
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = _apply_overrides(load_config(args.config), args)
        if args.command == "run":
            return cmd_run(config)
        if args.command == "score":
            return cmd_score(config, args.responses)
        if args.command == "train":
            return cmd_train(config, resume=args.resume)
        if args.command == "ablate":
            variants = args.variants or list(ABLATION_VARIANTS)
            return cmd_ablate(config, variants)
        raise ConfigError(f"unknown command {args.command!r}")
    except (ConfigError, FixtureError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FATAL
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FATAL


if __name__ == "__main__":
    sys.exit(main())
