"""Cascaded detector-verifier pipeline engine.

Adaptive per-frame thresholding, semantic verification with consensus,
cost-sensitive rewards with group-relative policy optimization, calibration
utilities, and a clinical evaluation harness. Neural detectors and
verifiers stay behind replay, oracle, and HTTP backends.
"""

__version__ = "0.1.0"

from .geometry import BoundingBox, Candidate, MatchResult  # noqa: F401
from .frames import FrameRecord  # noqa: F401
from .quality import (  # noqa: F401
    QualityFactors,
    QualityWeights,
    ThresholdController,
    ThresholdPolicy,
)
from .rewards import RewardBreakdown, RewardWeights  # noqa: F401
from .cascade import CascadeParams, FrameResult  # noqa: F401
