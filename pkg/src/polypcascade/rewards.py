"""Asymmetric, cost-sensitive detection rewards.

The composite reward is a weighted sum of three terms: localization quality
(mean IoU over matched pairs), confidence calibration with an asymmetric
false-negative penalty, and binary format compliance. Missed ground truths
are charged lambda_fn times the missed fraction (or the raw count, in
"count" mode), which is what tilts a trained policy toward recall.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Tuple

from .geometry import (
    BoundingBox,
    Candidate,
    denormalize_from_grid,
    greedy_match,
    greedy_match_strict,
)
from .protocol import parse_detection

WEIGHT_SUM_TOL = 1e-9

FN_MODE_FRACTIONAL = "fractional"
FN_MODE_COUNT = "count"


@dataclass(frozen=True)
class RewardWeights:
    """Component weights (sum 1) plus penalty strength and matching cutoffs."""

    alpha: float = 0.6
    beta: float = 0.3
    gamma: float = 0.1
    lambda_fn: float = 2.0
    tau_match: float = 0.3
    tau_iou: float = 0.3
    fn_penalty_mode: str = FN_MODE_FRACTIONAL

    def __post_init__(self) -> None:
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("reward weights must be nonnegative")
        total = self.alpha + self.beta + self.gamma
        if abs(total - 1.0) > WEIGHT_SUM_TOL:
            raise ValueError(f"reward weights must sum to 1, got {total}")
        if self.lambda_fn < 0:
            raise ValueError(f"lambda_fn must be >= 0, got {self.lambda_fn}")
        if not (0.0 < self.tau_match <= 1.0) or not (0.0 < self.tau_iou <= 1.0):
            raise ValueError("tau_match and tau_iou must be in (0, 1]")
        if self.fn_penalty_mode not in (FN_MODE_FRACTIONAL, FN_MODE_COUNT):
            raise ValueError(f"unknown fn_penalty_mode {self.fn_penalty_mode!r}")


@dataclass(frozen=True)
class RewardBreakdown:
    r_iou: float
    r_conf: float
    r_format: int
    r_total: float
    matches: int
    predictions: int
    false_negatives: int

    def to_dict(self) -> dict:
        return {
            "r_iou": self.r_iou,
            "r_conf": self.r_conf,
            "r_format": self.r_format,
            "r_total": self.r_total,
            "matches": self.matches,
            "predictions": self.predictions,
            "false_negatives": self.false_negatives,
        }


def reward_iou(
    predictions: Sequence[Candidate],
    ground_truths: Sequence[BoundingBox],
    tau_match: float,
) -> Tuple[float, int]:
    """Mean IoU over greedy one-to-one matches at >= tau_match; 0 with no matches."""
    result = greedy_match(predictions, ground_truths, tau_match)
    m = len(result.pairs)
    if m == 0:
        return 0.0, 0
    return sum(v for _, _, v in result.pairs) / m, m


def reward_conf(
    predictions: Sequence[Candidate],
    ground_truths: Sequence[BoundingBox],
    tau_iou: float,
    lambda_fn: float,
    fn_penalty_mode: str = FN_MODE_FRACTIONAL,
) -> Tuple[float, int]:
    """Calibration term with asymmetric miss penalty; returns (r_conf, fn count).

    A prediction matched above tau_iou (strict, per the printed piecewise
    rule) earns its confidence; any other prediction earns 1 - confidence.
    Ground truths left unmatched are false negatives.
    """
    for p in predictions:
        if not (0.0 <= p.confidence <= 1.0):
            raise ValueError(f"confidence out of range: {p.confidence}")
    match = greedy_match_strict(predictions, ground_truths, tau_iou)
    matched_preds = {pi for pi, _, _ in match.pairs}
    fn = len(match.unmatched_ground_truths)

    if fn_penalty_mode == FN_MODE_COUNT:
        penalty = lambda_fn * fn
    else:
        penalty = lambda_fn * (fn / len(ground_truths)) if ground_truths else 0.0

    n = len(predictions)
    if n == 0:
        return -penalty, fn
    per_pred = [
        p.confidence if i in matched_preds else 1.0 - p.confidence
        for i, p in enumerate(predictions)
    ]
    return sum(per_pred) / n - penalty, fn


def reward_format(raw_response: str) -> int:
    """1 iff the response passes every format-compliance check."""
    _, report = parse_detection(raw_response)
    return 1 if report.all_ok else 0


def reward_total(
    raw_response: str,
    ground_truths: Sequence[BoundingBox],
    weights: RewardWeights,
    image_width: float,
    image_height: float,
) -> RewardBreakdown:
    """Full reward for one raw model response against pixel-space ground truths.

    Grid coordinates in the response are denormalized against the frame size.
    Unparseable responses score as zero predictions with format reward 0.
    """
    response, report = parse_detection(raw_response)
    r_fmt = 1 if report.all_ok else 0

    predictions: List[Candidate] = []
    if response is not None:
        for item in response.items:
            box = denormalize_from_grid(item.position, image_width, image_height)
            predictions.append(Candidate(box, item.confidence))

    r_iou, matches = reward_iou(predictions, ground_truths, weights.tau_match)
    r_conf, fn = reward_conf(
        predictions,
        ground_truths,
        weights.tau_iou,
        weights.lambda_fn,
        weights.fn_penalty_mode,
    )
    r_total = weights.alpha * r_iou + weights.beta * r_conf + weights.gamma * r_fmt
    return RewardBreakdown(
        r_iou=r_iou,
        r_conf=r_conf,
        r_format=r_fmt,
        r_total=r_total,
        matches=matches,
        predictions=len(predictions),
        false_negatives=fn,
    )
