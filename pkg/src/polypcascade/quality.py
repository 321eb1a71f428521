"""Adaptive threshold control from frame-quality assessment.

A frame's quality score is a convex combination of illumination, clarity,
and artifact-freeness factors. The detector confidence cutoff either
switches between a low and high threshold (binary mode) or interpolates
linearly between them over a quality band (interpolated mode).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

WEIGHT_SUM_TOL = 1e-9


@dataclass(frozen=True)
class QualityFactors:
    """Per-frame quality scores in [0, 1]; artifacts = 1 means artifact-free."""

    illumination: float
    clarity: float
    artifacts: float

    def __post_init__(self) -> None:
        for name in ("illumination", "clarity", "artifacts"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"{name} must be in [0, 1], got {v}")


@dataclass(frozen=True)
class QualityWeights:
    alpha1: float = 1.0 / 3.0
    alpha2: float = 1.0 / 3.0
    alpha3: float = 1.0 / 3.0

    def __post_init__(self) -> None:
        if min(self.alpha1, self.alpha2, self.alpha3) < 0:
            raise ValueError("quality weights must be nonnegative")
        total = self.alpha1 + self.alpha2 + self.alpha3
        if abs(total - 1.0) > WEIGHT_SUM_TOL:
            raise ValueError(f"quality weights must sum to 1, got {total}")


@dataclass(frozen=True)
class ThresholdPolicy:
    """Detector-cutoff policy; mode is 'binary' or 'interpolated'."""

    tau_low: float = 0.2
    tau_high: float = 0.5
    q_min: float = 0.0
    q_max: float = 1.0
    mode: str = "binary"

    def __post_init__(self) -> None:
        if not (0.0 < self.tau_low < self.tau_high <= 1.0):
            raise ValueError(
                f"need 0 < tau_low < tau_high <= 1, got {self.tau_low}, {self.tau_high}"
            )
        if not self.q_min < self.q_max:
            raise ValueError(f"need q_min < q_max, got {self.q_min}, {self.q_max}")
        if self.mode not in ("binary", "interpolated"):
            raise ValueError(f"unknown mode {self.mode!r}")


def quality_score(factors: QualityFactors, weights: QualityWeights) -> float:
    """Weighted quality score Q in [0, 1]."""
    return (
        weights.alpha1 * factors.illumination
        + weights.alpha2 * factors.clarity
        + weights.alpha3 * factors.artifacts
    )


def select_threshold_binary(adverse: bool, policy: ThresholdPolicy) -> float:
    """Low cutoff under adverse conditions, high otherwise."""
    if policy.mode != "binary":
        raise ValueError("policy mode must be 'binary'")
    return policy.tau_low if adverse else policy.tau_high


def select_threshold_interpolated(q: float, policy: ThresholdPolicy) -> float:
    """Cutoff interpolated linearly over [q_min, q_max]; clamped outside."""
    if policy.mode != "interpolated":
        raise ValueError("policy mode must be 'interpolated'")
    q_clamped = min(max(q, policy.q_min), policy.q_max)
    span = (policy.tau_high - policy.tau_low) / (policy.q_max - policy.q_min)
    return policy.tau_low + (q_clamped - policy.q_min) * span


class ThresholdController:
    """Chooses the per-frame detector cutoff from a quality assessment.

    The adverse/clean signal is pluggable: 'backend' trusts the verifier's
    global assessment boolean, 'quality' derives it from the quality score
    (adverse iff Q < adverse_cutoff), and 'never' pins the clean cutoff,
    which is how a fixed-threshold baseline is expressed.
    """

    def __init__(
        self,
        policy: ThresholdPolicy,
        weights: Optional[QualityWeights] = None,
        adverse_source: str = "backend",
        adverse_cutoff: float = 0.5,
    ) -> None:
        if adverse_source not in ("backend", "quality", "never"):
            raise ValueError(f"unknown adverse source {adverse_source!r}")
        self.policy = policy
        self.weights = weights or QualityWeights()
        self.adverse_source = adverse_source
        self.adverse_cutoff = adverse_cutoff

    def select(
        self,
        adverse: Optional[bool],
        factors: Optional[QualityFactors],
    ) -> float:
        """Threshold for one frame. Missing signals fall back to the clean cutoff."""
        if self.adverse_source == "never":
            return select_threshold_binary(False, self.policy) if (
                self.policy.mode == "binary"
            ) else self.policy.tau_high
        if self.policy.mode == "interpolated":
            if factors is None:
                return self.policy.tau_high
            return select_threshold_interpolated(
                quality_score(factors, self.weights), self.policy
            )
        if self.adverse_source == "quality" and factors is not None:
            adverse = quality_score(factors, self.weights) < self.adverse_cutoff
        if adverse is None:
            adverse = False
        return select_threshold_binary(adverse, self.policy)
