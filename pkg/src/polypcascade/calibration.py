"""Confidence calibration and uncertainty estimation.

Epistemic uncertainty is the across-pass variance of class probabilities
under stochastic inference passes; aleatoric uncertainty is backend-supplied
and only passed through by callers. Temperature scaling divides logits by a
fitted positive constant, which never changes the argmax.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple

PROB_SUM_TOL = 1e-9


@dataclass(frozen=True)
class StochasticScores:
    """Probability vectors from repeated stochastic passes over one input."""

    passes: Tuple[Tuple[float, ...], ...]

    def __post_init__(self) -> None:
        if len(self.passes) < 1:
            raise ValueError("need at least one pass")
        width = len(self.passes[0])
        for vec in self.passes:
            if len(vec) != width:
                raise ValueError("all passes must have the same number of classes")
            if abs(sum(vec) - 1.0) > PROB_SUM_TOL:
                raise ValueError(f"pass probabilities must sum to 1, got {vec}")


@dataclass(frozen=True)
class CalibrationModel:
    temperature: float = 1.0

    def __post_init__(self) -> None:
        if not (self.temperature > 0 and math.isfinite(self.temperature)):
            raise ValueError(f"temperature must be strictly positive, got {self.temperature}")


def epistemic(scores: StochasticScores) -> float:
    """Mean across classes of the across-pass (population) variance.

    A single pass carries no spread information and scores 0 by convention.
    """
    t = len(scores.passes)
    if t == 1 or all(vec == scores.passes[0] for vec in scores.passes):
        return 0.0
    k = len(scores.passes[0])
    total = 0.0
    for c in range(k):
        vals = [vec[c] for vec in scores.passes]
        mean = sum(vals) / t
        total += sum((v - mean) ** 2 for v in vals) / t
    return total / k


def _softmax(scaled: Sequence[float]) -> List[float]:
    top = max(scaled)
    exps = [math.exp(v - top) for v in scaled]
    z = sum(exps)
    return [e / z for e in exps]


def temperature_scale(logits: Sequence[float], model: CalibrationModel) -> List[float]:
    """softmax(logits / temperature)."""
    if not logits or not all(math.isfinite(v) for v in logits):
        raise ValueError(f"logits must be nonempty and finite, got {logits}")
    return _softmax([v / model.temperature for v in logits])


def _nll(samples: Sequence[Tuple[Sequence[float], int]], temperature: float) -> float:
    total = 0.0
    for logits, label in samples:
        probs = _softmax([v / temperature for v in logits])
        total -= math.log(max(probs[label], 1e-300))
    return total


LOG_T_LOW = -4.0
LOG_T_HIGH = 4.0
GOLDEN_TOL = 1e-6


def fit_temperature(samples: Sequence[Tuple[Sequence[float], int]]) -> CalibrationModel:
    """Fit the temperature by NLL, golden-section search over log T in [-4, 4].

    Deterministic (no stochastic optimizer). Requires at least two samples
    covering more than one label.
    """
    if len(samples) < 2:
        raise ValueError("need at least two labeled samples")
    labels = {label for _, label in samples}
    if len(labels) < 2:
        raise ValueError("all samples share one label; temperature is unidentifiable")

    inv_phi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = LOG_T_LOW, LOG_T_HIGH
    c = b - inv_phi * (b - a)
    d = a + inv_phi * (b - a)
    fc = _nll(samples, math.exp(c))
    fd = _nll(samples, math.exp(d))
    while b - a > GOLDEN_TOL:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - inv_phi * (b - a)
            fc = _nll(samples, math.exp(c))
        else:
            a, c, fc = c, d, fd
            d = a + inv_phi * (b - a)
            fd = _nll(samples, math.exp(d))
    return CalibrationModel(math.exp((a + b) / 2.0))


def expected_calibration_error(
    predictions: Sequence[Tuple[float, bool]],
    bins: int,
) -> float:
    """Weighted |accuracy - mean confidence| over equal-width confidence bins.

    Bins are half-open except the last; an empty prediction list scores 0.
    """
    if bins < 1:
        raise ValueError(f"need at least one bin, got {bins}")
    n = len(predictions)
    if n == 0:
        return 0.0
    counts = [0] * bins
    conf_sums = [0.0] * bins
    hit_sums = [0] * bins
    for confidence, correct in predictions:
        if not (0.0 <= confidence <= 1.0):
            raise ValueError(f"confidence out of range: {confidence}")
        idx = min(int(confidence * bins), bins - 1)
        counts[idx] += 1
        conf_sums[idx] += confidence
        hit_sums[idx] += 1 if correct else 0
    ece = 0.0
    for idx in range(bins):
        if counts[idx] == 0:
            continue
        acc = hit_sums[idx] / counts[idx]
        conf = conf_sums[idx] / counts[idx]
        ece += (counts[idx] / n) * abs(acc - conf)
    return ece
