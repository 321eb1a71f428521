"""Bounding-box arithmetic: IoU, greedy matching, detection tests, region scaling.

Boxes are axis-aligned corner-form rectangles (x1, y1, x2, y2) in continuous
image coordinates. Every operation here is a pure function over immutable
values and safe to call concurrently.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned rectangle with x1 <= x2 and y1 <= y2."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self) -> None:
        if not all(math.isfinite(v) for v in (self.x1, self.y1, self.x2, self.y2)):
            raise ValueError(f"box coordinates must be finite, got {self}")
        if self.x1 > self.x2 or self.y1 > self.y2:
            raise ValueError(f"box corners out of order: {self}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> Tuple[float, float]:
        return (self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)


@dataclass(frozen=True)
class Candidate:
    """A detector proposal: a box plus its confidence score in [0, 1]."""

    box: BoundingBox
    confidence: float

    def __post_init__(self) -> None:
        if not (0.0 <= self.confidence <= 1.0):
            raise ValueError(f"confidence must be in [0, 1], got {self.confidence}")


@dataclass
class MatchResult:
    """One-to-one pairing of predictions against ground truths.

    ``pairs`` holds (prediction index, ground-truth index, iou) triples; every
    index appears in at most one pair and every pair's IoU meets the matching
    threshold it was produced under.
    """

    pairs: List[Tuple[int, int, float]] = field(default_factory=list)
    unmatched_predictions: List[int] = field(default_factory=list)
    unmatched_ground_truths: List[int] = field(default_factory=list)


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection-over-union of two boxes.

    Returns 0 when the union has zero area (both boxes degenerate).
    """
    ix1 = max(a.x1, b.x1)
    iy1 = max(a.y1, b.y1)
    ix2 = min(a.x2, b.x2)
    iy2 = min(a.y2, b.y2)
    inter = max(0.0, ix2 - ix1) * max(0.0, iy2 - iy1)
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def _greedy_assign(
    predictions: Sequence[Candidate],
    ground_truths: Sequence[BoundingBox],
    tau: float,
    strict: bool,
) -> MatchResult:
    # Predictions claim ground truths in order of descending confidence;
    # ties break on the lower prediction index, then lower GT index.
    order = sorted(range(len(predictions)), key=lambda i: (-predictions[i].confidence, i))
    taken = [False] * len(ground_truths)
    pairs: List[Tuple[int, int, float]] = []
    unmatched_preds: List[int] = []
    for pi in order:
        best_gi = -1
        best_iou = -1.0
        for gi, gt in enumerate(ground_truths):
            if taken[gi]:
                continue
            v = iou(predictions[pi].box, gt)
            if v > best_iou:
                best_iou = v
                best_gi = gi
        ok = best_gi >= 0 and (best_iou > tau if strict else best_iou >= tau)
        if ok:
            taken[best_gi] = True
            pairs.append((pi, best_gi, best_iou))
        else:
            unmatched_preds.append(pi)
    pairs.sort(key=lambda p: p[0])
    unmatched_preds.sort()
    unmatched_gts = [gi for gi, used in enumerate(taken) if not used]
    return MatchResult(pairs, unmatched_preds, unmatched_gts)


def greedy_match(
    predictions: Sequence[Candidate],
    ground_truths: Sequence[BoundingBox],
    tau_match: float,
) -> MatchResult:
    """Greedy one-to-one matching, keeping pairs with IoU >= tau_match.

    Each prediction, visited in descending-confidence order, takes the
    still-unassigned ground truth of highest IoU. Deterministic under the
    tie-breaks documented in ``_greedy_assign``.
    """
    if not (0.0 < tau_match <= 1.0):
        raise ValueError(f"tau_match must be in (0, 1], got {tau_match}")
    return _greedy_assign(predictions, ground_truths, tau_match, strict=False)


def greedy_match_strict(
    predictions: Sequence[Candidate],
    ground_truths: Sequence[BoundingBox],
    tau: float,
) -> MatchResult:
    """As greedy_match but pairs must satisfy IoU > tau (strict inequality)."""
    if not (0.0 <= tau <= 1.0):
        raise ValueError(f"tau must be in [0, 1], got {tau}")
    return _greedy_assign(predictions, ground_truths, tau, strict=True)


def detected(
    ground_truth: BoundingBox,
    finals: Sequence[Candidate],
    tau_iou: float,
) -> bool:
    """True iff any final prediction overlaps the ground truth at >= tau_iou."""
    if not (0.0 < tau_iou <= 1.0):
        raise ValueError(f"tau_iou must be in (0, 1], got {tau_iou}")
    return any(iou(ground_truth, c.box) >= tau_iou for c in finals)


def scale_about_center(
    box: BoundingBox,
    factor: float,
    image_width: float,
    image_height: float,
) -> BoundingBox:
    """Scale a box about its center and clip the result to the image."""
    if factor <= 0:
        raise ValueError(f"scale factor must be positive, got {factor}")
    cx, cy = box.center
    hw = box.width * factor / 2.0
    hh = box.height * factor / 2.0
    return BoundingBox(
        max(0.0, cx - hw),
        max(0.0, cy - hh),
        min(float(image_width), cx + hw),
        min(float(image_height), cy + hh),
    )


def expand_region(
    box: BoundingBox,
    rho: float,
    image_width: float,
    image_height: float,
) -> BoundingBox:
    """Enlarge a candidate region by factor rho (>= 1), clipped to the image."""
    if rho < 1.0:
        raise ValueError(f"expansion factor must be >= 1, got {rho}")
    return scale_about_center(box, rho, image_width, image_height)


GRID_RANGE = 1000


def _round_half_up(x: float) -> int:
    return math.floor(x + 0.5)


def normalize_to_grid(
    box: BoundingBox,
    image_width: float,
    image_height: float,
) -> Tuple[int, int, int, int]:
    """Map pixel coordinates onto the integer [0, 1000] grid (round half up)."""
    if image_width <= 0 or image_height <= 0:
        raise ValueError(
            f"image dimensions must be positive, got {image_width}x{image_height}"
        )
    gx1 = _round_half_up(box.x1 * GRID_RANGE / image_width)
    gy1 = _round_half_up(box.y1 * GRID_RANGE / image_height)
    gx2 = _round_half_up(box.x2 * GRID_RANGE / image_width)
    gy2 = _round_half_up(box.y2 * GRID_RANGE / image_height)
    clamp = lambda v: max(0, min(GRID_RANGE, v))
    return clamp(gx1), clamp(gy1), clamp(gx2), clamp(gy2)


def denormalize_from_grid(
    grid_box: Sequence[int],
    image_width: float,
    image_height: float,
) -> BoundingBox:
    """Inverse of normalize_to_grid; exact to within one grid cell per axis."""
    if image_width <= 0 or image_height <= 0:
        raise ValueError(
            f"image dimensions must be positive, got {image_width}x{image_height}"
        )
    gx1, gy1, gx2, gy2 = grid_box
    return BoundingBox(
        gx1 * image_width / GRID_RANGE,
        gy1 * image_height / GRID_RANGE,
        gx2 * image_width / GRID_RANGE,
        gy2 * image_height / GRID_RANGE,
    )
