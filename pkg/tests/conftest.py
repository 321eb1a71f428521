"""Shared test fixtures and the acceptance-criteria summary hook."""
from typing import Dict, Sequence, Tuple

from polypcascade.backends import Assessment, StageTiming
from polypcascade.cascade import FrameResult
from polypcascade.geometry import BoundingBox, Candidate, detected

# criterion id -> (description, passed) recorded by tests/test_acceptance.py
ACCEPTANCE_RESULTS: Dict[int, Tuple[str, bool]] = {}


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_RESULTS):
        description, ok = ACCEPTANCE_RESULTS[key]
        status = "PASS" if ok else "FAIL"
        terminalreporter.write_line(f"[{status}] criterion {key}: {description}")


def make_result(
    frame_id: str = "f0",
    ground_truths: Sequence[BoundingBox] = (),
    finals: Sequence[Candidate] = (),
    condition: str = "clean",
    tags: Sequence[str] = (),
    tau: float = 0.5,
    tau_iou: float = 0.3,
    timing: StageTiming = None,
) -> FrameResult:
    """Minimal FrameResult for metrics-level tests."""
    finals = list(finals)
    gts = tuple(ground_truths)
    return FrameResult(
        frame_id=frame_id,
        condition=condition,
        degradation_tags=tuple(tags),
        image_width=1000,
        image_height=1000,
        ground_truths=gts,
        applied_threshold=tau,
        assessment=Assessment(),
        stage1_candidates=finals,
        verified=[],
        finals=finals,
        per_gt_detected=[detected(g, finals, tau_iou) for g in gts],
        timing=timing or StageTiming(),
    )
