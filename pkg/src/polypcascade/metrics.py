"""Dataset-level clinical metrics, stratified reporting, and patient splits.

Counting semantics: a ground truth counts as detected (TP) when any final
prediction overlaps it at tau_iou (max-over-finals rule); false positives
are the finals left over after greedy one-to-one matching, so duplicate
detections of one polyp count against precision. mIoU is the mean IoU over
matched pairs only (false positives and negatives excluded). Percentages
are reported rounded half-up to one decimal, and recall deltas are taken on
those rounded values, matching printed-table precision.
"""
from __future__ import annotations

import random
import statistics
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

from .cascade import FrameResult
from .frames import FrameRecord
from .geometry import detected, greedy_match


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def __post_init__(self) -> None:
        if min(self.tp, self.fp, self.fn) < 0:
            raise ValueError("confusion counts must be nonnegative")

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)


@dataclass(frozen=True)
class PrecisionRecall:
    precision: float
    recall: float
    degenerate: bool = False


@dataclass(frozen=True)
class MetricsTriple:
    precision: float
    recall: float
    miou: float
    frames: int
    degenerate: bool = False


@dataclass
class StratifiedReport:
    overall: MetricsTriple
    per_condition: Dict[str, MetricsTriple] = field(default_factory=dict)
    per_tag: Dict[str, MetricsTriple] = field(default_factory=dict)
    deltas: Dict[str, float] = field(default_factory=dict)  # recall gain in pp
    latency_mean_ms: Optional[float] = None
    latency_p95_ms: Optional[float] = None


def round_pct(fraction: float) -> float:
    """Percentage rounded half-up to one decimal, e.g. 0.7535 -> 75.4."""
    return float(
        Decimal(str(fraction * 100)).quantize(Decimal("0.1"), rounding=ROUND_HALF_UP)
    )


def accumulate(results: Sequence[FrameResult], tau_iou: float) -> ConfusionCounts:
    """Sum TP/FP/FN over frames at one evaluation threshold."""
    tp = fp = fn = 0
    for r in results:
        flags = [detected(gt, r.finals, tau_iou) for gt in r.ground_truths]
        tp += sum(flags)
        fn += len(flags) - sum(flags)
        matched = greedy_match(r.finals, list(r.ground_truths), tau_iou)
        fp += len(r.finals) - len(matched.pairs)
    return ConfusionCounts(tp, fp, fn)


def precision_recall(counts: ConfusionCounts) -> PrecisionRecall:
    p_den = counts.tp + counts.fp
    r_den = counts.tp + counts.fn
    precision = counts.tp / p_den if p_den else 0.0
    recall = counts.tp / r_den if r_den else 0.0
    return PrecisionRecall(precision, recall, degenerate=(p_den == 0 or r_den == 0))


def mean_iou(results: Sequence[FrameResult], tau_iou: float) -> Tuple[float, bool]:
    """Mean IoU over matched (final, ground-truth) pairs; (0, True) with none."""
    total = 0.0
    pairs = 0
    for r in results:
        match = greedy_match(r.finals, list(r.ground_truths), tau_iou)
        total += sum(v for _, _, v in match.pairs)
        pairs += len(match.pairs)
    if pairs == 0:
        return 0.0, True
    return total / pairs, False


def welch_t(a: Sequence[float], b: Sequence[float]) -> float:
    """Welch's t statistic with unbiased sample variances."""
    if len(a) < 2 or len(b) < 2:
        raise ValueError("each sample needs at least two observations")
    var_a = statistics.variance(a)
    var_b = statistics.variance(b)
    if var_a == 0.0 and var_b == 0.0:
        raise ValueError("sample variances are both zero; t is undefined")
    num = statistics.fmean(a) - statistics.fmean(b)
    return num / ((var_a / len(a) + var_b / len(b)) ** 0.5)


def _percentile(values: Sequence[float], q: float) -> float:
    ordered = sorted(values)
    if len(ordered) == 1:
        return ordered[0]
    pos = (len(ordered) - 1) * q
    lo = int(pos)
    hi = min(lo + 1, len(ordered) - 1)
    frac = pos - lo
    return ordered[lo] * (1.0 - frac) + ordered[hi] * frac


def _triple(results: Sequence[FrameResult], tau_iou: float) -> MetricsTriple:
    counts = accumulate(results, tau_iou)
    pr = precision_recall(counts)
    miou, miou_degenerate = mean_iou(results, tau_iou)
    return MetricsTriple(
        precision=pr.precision,
        recall=pr.recall,
        miou=miou,
        frames=len(results),
        degenerate=pr.degenerate or miou_degenerate,
    )


def build_report(
    results: Sequence[FrameResult],
    tau_iou: float,
    comparisons: Optional[Mapping[str, Sequence[FrameResult]]] = None,
) -> StratifiedReport:
    """Overall and per-stratum metrics, recall deltas, and latency summary.

    Strata with no frames are simply absent from the maps. Deltas are this
    run's rounded recall percentage minus each comparison's, in points.
    """
    report = StratifiedReport(overall=_triple(results, tau_iou))

    conditions = sorted({r.condition for r in results})
    for condition in conditions:
        subset = [r for r in results if r.condition == condition]
        report.per_condition[condition] = _triple(subset, tau_iou)

    tags = sorted({t for r in results for t in r.degradation_tags})
    for tag in tags:
        subset = [r for r in results if tag in r.degradation_tags]
        report.per_tag[tag] = _triple(subset, tau_iou)

    if comparisons:
        own = round_pct(report.overall.recall)
        for name, other_results in comparisons.items():
            other = round_pct(_triple(other_results, tau_iou).recall)
            report.deltas[name] = _delta_points(own, other)

    totals = [r.timing.total for r in results if r.timing is not None]
    if totals:
        report.latency_mean_ms = statistics.fmean(totals)
        report.latency_p95_ms = _percentile(totals, 0.95)
    return report


def _delta_points(recall_pct: float, baseline_pct: float) -> float:
    return float(
        (Decimal(str(recall_pct)) - Decimal(str(baseline_pct))).quantize(
            Decimal("0.1"), rounding=ROUND_HALF_UP
        )
    )


def ablation_table(
    rows: Sequence[Tuple[str, float, float]],
) -> List[dict]:
    """Table rows (name, precision %, recall %) -> dicts with recall delta vs row 0.

    Inputs are printed-precision percentages; the baseline row's delta is None.
    """
    if len(rows) < 2:
        raise ValueError("need a baseline row plus at least one variant")
    baseline_recall = rows[0][2]
    out = []
    for i, (name, precision, recall) in enumerate(rows):
        out.append(
            {
                "configuration": name,
                "precision": precision,
                "recall": recall,
                "delta_recall": None if i == 0 else _delta_points(recall, baseline_recall),
            }
        )
    return out


def stratified_split(
    frames: Sequence[FrameRecord],
    k: int,
    seed: int,
) -> Dict[str, int]:
    """Patient-atomic fold assignment balancing per-fold polyp fractions.

    Greedy largest-patient-first: patients ordered by descending polyp count
    (seeded shuffle breaks ties), each assigned to the fold currently lowest
    on polyps, then on frames. Returns frame_id -> fold index.
    """
    if k < 2:
        raise ValueError("need at least two folds")
    by_patient: Dict[str, List[FrameRecord]] = {}
    for frame in frames:
        if frame.patient_id is None:
            raise ValueError(f"frame {frame.frame_id} has no patient_id")
        by_patient.setdefault(frame.patient_id, []).append(frame)
    if k > len(by_patient):
        raise ValueError(f"cannot make {k} folds from {len(by_patient)} patients")

    patients = list(by_patient.keys())
    random.Random(seed).shuffle(patients)
    patients.sort(
        key=lambda pid: (
            -sum(len(f.ground_truths) for f in by_patient[pid]),
            -len(by_patient[pid]),
        )
    )

    total_polyps = sum(len(f.ground_truths) for f in frames)
    global_frac = total_polyps / len(frames) if frames else 0.0
    fold_polyps = [0] * k
    fold_frames = [0] * k
    assignment: Dict[str, int] = {}

    def place(pid: str, fold: int) -> None:
        fold_polyps[fold] += sum(len(f.ground_truths) for f in by_patient[pid])
        fold_frames[fold] += len(by_patient[pid])
        for frame in by_patient[pid]:
            assignment[frame.frame_id] = fold

    # the k largest patients seed one fold each so no fold stays empty
    for fold, pid in enumerate(patients[:k]):
        place(pid, fold)
    for pid in patients[k:]:
        polyps = sum(len(f.ground_truths) for f in by_patient[pid])
        nframes = len(by_patient[pid])

        def resulting_deviation(fold: int) -> float:
            frac = (fold_polyps[fold] + polyps) / (fold_frames[fold] + nframes)
            return abs(frac - global_frac)

        fold = min(range(k), key=lambda i: (resulting_deviation(i), fold_frames[i], i))
        place(pid, fold)
    return assignment


def stratum_csv_rows(report: StratifiedReport) -> List[List[str]]:
    """Plot-data export: one row per stratum with printed-precision percentages."""
    rows = [["stratum", "frames", "precision", "recall", "miou"]]

    def fmt(name: str, t: MetricsTriple) -> List[str]:
        return [
            name,
            str(t.frames),
            f"{round_pct(t.precision):.1f}",
            f"{round_pct(t.recall):.1f}",
            f"{round_pct(t.miou):.1f}",
        ]

    rows.append(fmt("overall", report.overall))
    for name, triple in report.per_condition.items():
        rows.append(fmt(f"condition:{name}", triple))
    for name, triple in report.per_tag.items():
        rows.append(fmt(f"tag:{name}", triple))
    return rows
