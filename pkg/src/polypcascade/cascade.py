"""Two-stage frame processing: thresholded candidate generation, then
semantic verification with the consensus rule.

A candidate survives only when the detector proposed it at or above the
adaptive threshold AND the verifier said Yes at or above the verifier
confidence cutoff. Any verifier failure rejects the affected candidate
(fail-closed) and is recorded in the audit trail rather than raised.
"""
from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

from .backends import (
    Assessment,
    BackendError,
    DetectorBackend,
    StageTiming,
    TimingSink,
    VerifierBackend,
    VerifyRequest,
    timed,
)
from .frames import FrameRecord
from .geometry import BoundingBox, Candidate, detected, expand_region
from .protocol import parse_verdict, render_verify_prompt
from .quality import ThresholdController

SCALE_WEIGHT_TOL = 1e-9


@dataclass(frozen=True)
class CascadeParams:
    """Stage-2 knobs; scale weights must sum to 1."""

    tau_conf: float = 0.7
    tau_iou: float = 0.3
    rho: float = 1.5
    scales: Tuple[float, ...] = (0.8, 1.0, 1.2)
    scale_weights: Tuple[float, ...] = (0.2, 0.6, 0.2)
    multiscale: bool = False
    multiscale_drives_acceptance: bool = False
    class_name: str = "polyp"
    verify_workers: int = 1

    def __post_init__(self) -> None:
        if not (0.0 <= self.tau_conf <= 1.0):
            raise ValueError(f"tau_conf must be in [0, 1], got {self.tau_conf}")
        if not (0.0 < self.tau_iou <= 1.0):
            raise ValueError(f"tau_iou must be in (0, 1], got {self.tau_iou}")
        if self.rho < 1.0:
            raise ValueError(f"rho must be >= 1, got {self.rho}")
        if len(self.scales) != len(self.scale_weights):
            raise ValueError("scales and scale_weights must align")
        if self.scales and abs(sum(self.scale_weights) - 1.0) > SCALE_WEIGHT_TOL:
            raise ValueError(f"scale weights must sum to 1, got {self.scale_weights}")
        if self.verify_workers < 1:
            raise ValueError("verify_workers must be >= 1")


@dataclass(frozen=True)
class VerifiedCandidate:
    candidate: Candidate
    decision: int  # 0 or 1
    confidence: float  # verifier confidence s_k
    multiscale_score: Optional[float]
    accepted: bool
    error: Optional[str] = None
    raw_response: Optional[str] = None

    def __post_init__(self) -> None:
        if self.accepted and self.decision != 1:
            raise ValueError("accepted candidates must carry a positive decision")
        if self.accepted and self.error is not None:
            raise ValueError("failed candidates can never be accepted")


@dataclass
class FrameResult:
    frame_id: str
    condition: str
    degradation_tags: Tuple[str, ...]
    image_width: float
    image_height: float
    ground_truths: Tuple[BoundingBox, ...]
    applied_threshold: float
    assessment: Assessment
    stage1_candidates: List[Candidate]
    verified: List[VerifiedCandidate]
    finals: List[Candidate]
    per_gt_detected: List[bool]
    timing: StageTiming


@dataclass(frozen=True)
class FrameError:
    frame_id: str
    error: str


@dataclass
class DatasetRun:
    results: List[FrameResult] = field(default_factory=list)
    failures: List[FrameError] = field(default_factory=list)

    @property
    def partial(self) -> bool:
        return bool(self.failures)


def stage1(
    frame: FrameRecord,
    detector: DetectorBackend,
    controller: ThresholdController,
    assessment: Assessment,
) -> Tuple[float, List[Candidate]]:
    """Pick the frame threshold and keep detector proposals at or above it.

    Candidates come back sorted by descending confidence with the proposal
    index as tie-break, which fixes downstream ordering everywhere.
    """
    tau = controller.select(assessment.adverse, assessment.quality or frame.quality)
    proposals = detector.propose(frame)
    kept = [(i, c) for i, c in enumerate(proposals) if c.confidence >= tau]
    kept.sort(key=lambda ic: (-ic[1].confidence, ic[0]))
    return tau, [c for _, c in kept]


def _verdict_score(decision: int, confidence: float) -> float:
    # scalar polyp-likelihood reading of a (decision, confidence) verdict
    return confidence if decision == 1 else 1.0 - confidence


def _verify_candidate(
    frame: FrameRecord,
    candidate: Candidate,
    verifier: VerifierBackend,
    params: CascadeParams,
    prompt: str,
) -> VerifiedCandidate:
    crop = candidate.box
    context = expand_region(crop, params.rho, frame.image_width, frame.image_height)

    def call(scale: float) -> str:
        return verifier.verify(
            VerifyRequest(
                frame_id=frame.frame_id,
                crop=crop,
                prompt=prompt,
                context_crop=context,
                scale=scale,
                image_ref=frame.image_ref,
            )
        )

    try:
        raw = call(1.0)
    except BackendError as exc:
        return VerifiedCandidate(candidate, 0, 0.0, None, False, error=str(exc))

    verdict, report = parse_verdict(raw)
    if verdict is None:
        return VerifiedCandidate(
            candidate, 0, 0.0, None, False,
            error="unparseable verdict", raw_response=raw,
        )
    decision = 1 if verdict.decision == "Yes" else 0
    s_k = verdict.confidence

    multiscale_score: Optional[float] = None
    if params.multiscale:
        total = 0.0
        for scale, weight in zip(params.scales, params.scale_weights):
            if scale == 1.0:
                scaled_raw = raw
            else:
                try:
                    scaled_raw = call(scale)
                except BackendError as exc:
                    return VerifiedCandidate(
                        candidate, decision, s_k, None, False,
                        error=str(exc), raw_response=raw,
                    )
            scaled_verdict, _ = parse_verdict(scaled_raw)
            if scaled_verdict is None:
                return VerifiedCandidate(
                    candidate, decision, s_k, None, False,
                    error=f"unparseable verdict at scale {scale}", raw_response=raw,
                )
            total += weight * _verdict_score(
                1 if scaled_verdict.decision == "Yes" else 0, scaled_verdict.confidence
            )
        multiscale_score = total

    if params.multiscale_drives_acceptance and multiscale_score is not None:
        accepted = decision == 1 and multiscale_score >= params.tau_conf
    else:
        accepted = decision == 1 and s_k >= params.tau_conf
    return VerifiedCandidate(
        candidate, decision, s_k, multiscale_score, accepted, raw_response=raw
    )


def stage2(
    frame: FrameRecord,
    tau: float,
    candidates: Sequence[Candidate],
    verifier: VerifierBackend,
    params: CascadeParams,
    assessment: Assessment,
    timing: Optional[StageTiming] = None,
) -> FrameResult:
    """Verify each candidate and assemble the consensus detection set."""
    prompt = render_verify_prompt(params.class_name)
    if params.verify_workers > 1 and len(candidates) > 1:
        with ThreadPoolExecutor(max_workers=params.verify_workers) as pool:
            verified = list(
                pool.map(
                    lambda c: _verify_candidate(frame, c, verifier, params, prompt),
                    candidates,
                )
            )
    else:
        verified = [
            _verify_candidate(frame, c, verifier, params, prompt) for c in candidates
        ]

    post_start = time.monotonic()
    finals = [vc.candidate for vc in verified if vc.accepted]
    per_gt = [detected(gt, finals, params.tau_iou) for gt in frame.ground_truths]
    timing = timing or StageTiming()
    timing.t_postprocess += (time.monotonic() - post_start) * 1000.0

    return FrameResult(
        frame_id=frame.frame_id,
        condition=frame.condition,
        degradation_tags=frame.degradation_tags,
        image_width=frame.image_width,
        image_height=frame.image_height,
        ground_truths=frame.ground_truths,
        applied_threshold=tau,
        assessment=assessment,
        stage1_candidates=list(candidates),
        verified=verified,
        finals=finals,
        per_gt_detected=per_gt,
        timing=timing,
    )


def evaluate_frame(result: FrameResult, tau_iou: float) -> List[bool]:
    """Re-derive the per-ground-truth detection flags at a given threshold."""
    return [detected(gt, result.finals, tau_iou) for gt in result.ground_truths]


def run_frame(
    frame: FrameRecord,
    detector: DetectorBackend,
    verifier: VerifierBackend,
    controller: ThresholdController,
    params: CascadeParams,
) -> FrameResult:
    """Full per-frame pipeline with stage timing capture."""
    sink = TimingSink()
    timed_detector = timed(detector, sink)
    timed_verifier = timed(verifier, sink)

    assessment = timed_verifier.assess_global(frame)
    tau, candidates = stage1(frame, timed_detector, controller, assessment)
    timing = StageTiming(
        t_preprocess=sum(sink.durations("assess")),
        t_detect=sum(sink.durations("detect")),
    )
    result = stage2(frame, tau, candidates, timed_verifier, params, assessment, timing)
    result.timing.t_verify_each = sink.durations("verify")
    return result


def run_dataset(
    frames: Sequence[FrameRecord],
    detector: DetectorBackend,
    verifier: VerifierBackend,
    controller: ThresholdController,
    params: CascadeParams,
    workers: int = 1,
) -> DatasetRun:
    """Process frames on a bounded worker pool, deterministically ordered.

    A failing frame becomes a FrameError record; the batch keeps going.
    Output order equals input order regardless of worker count.
    """
    ids = [f.frame_id for f in frames]
    if len(set(ids)) != len(ids):
        raise ValueError("frame_id values must be unique within a dataset")
    if workers < 1:
        raise ValueError("workers must be >= 1")

    def work(frame: FrameRecord):
        try:
            return run_frame(frame, detector, verifier, controller, params)
        except Exception as exc:  # frame-level isolation
            return FrameError(frame.frame_id, f"{type(exc).__name__}: {exc}")

    run = DatasetRun()
    if workers == 1 or len(frames) <= 1:
        outcomes = [work(f) for f in frames]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(work, frames))
    for outcome in outcomes:
        if isinstance(outcome, FrameError):
            run.failures.append(outcome)
        else:
            run.results.append(outcome)
    return run


def audit_record(result: FrameResult) -> dict:
    """JSON-shaped audit entry for one frame; timing sits under one key."""
    return {
        "frame_id": result.frame_id,
        "condition": result.condition,
        "degradation_tags": list(result.degradation_tags),
        "applied_threshold": result.applied_threshold,
        "assessment": {
            "adverse": result.assessment.adverse,
            "quality": None
            if result.assessment.quality is None
            else {
                "illumination": result.assessment.quality.illumination,
                "clarity": result.assessment.quality.clarity,
                "artifacts": result.assessment.quality.artifacts,
            },
            "aleatoric": result.assessment.aleatoric,
        },
        "stage1_candidates": [
            {"box": list(c.box.as_tuple()), "confidence": c.confidence}
            for c in result.stage1_candidates
        ],
        "verified": [
            {
                "box": list(vc.candidate.box.as_tuple()),
                "detector_confidence": vc.candidate.confidence,
                "decision": vc.decision,
                "verifier_confidence": vc.confidence,
                "multiscale_score": vc.multiscale_score,
                "accepted": vc.accepted,
                "error": vc.error,
            }
            for vc in result.verified
        ],
        "finals": [
            {"box": list(c.box.as_tuple()), "confidence": c.confidence}
            for c in result.finals
        ],
        "per_gt_detected": result.per_gt_detected,
        "timing": {
            "t_preprocess": result.timing.t_preprocess,
            "t_detect": result.timing.t_detect,
            "t_verify_each": result.timing.t_verify_each,
            "t_postprocess": result.timing.t_postprocess,
            "total": result.timing.total,
        },
    }
