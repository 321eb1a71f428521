import json
import time

import pytest

from polypcascade.backends import (
    Assessment,
    BackendError,
    DetectorBackend,
    FixtureError,
    OracleVerifier,
    ReplayDetector,
    ReplayVerifier,
    StageTiming,
    TimingSink,
    VerifierBackend,
    VerifyRequest,
    timed,
)
from polypcascade.frames import FrameRecord
from polypcascade.geometry import BoundingBox, Candidate
from polypcascade.protocol import parse_verdict


def write_ndjson(path, records):
    path.write_text("\n".join(json.dumps(r) for r in records) + "\n")
    return str(path)


def frame(frame_id="f1", gts=(), condition="clean"):
    return FrameRecord(
        frame_id=frame_id,
        image_width=1000,
        image_height=1000,
        condition=condition,
        ground_truths=tuple(gts),
    )


DET_LINE = {
    "frame_id": "f1",
    "boxes": [
        {"x1": 10, "y1": 10, "x2": 60, "y2": 60, "conf": 0.9},
        {"x1": 200, "y1": 200, "x2": 260, "y2": 260, "conf": 0.4},
    ],
}


class TestReplayDetector:
    def test_replays_candidates(self, tmp_path):
        det = ReplayDetector(write_ndjson(tmp_path / "d.ndjson", [DET_LINE]))
        got = det.propose(frame("f1"))
        assert [c.confidence for c in got] == [0.9, 0.4]
        assert got[0].box == BoundingBox(10, 10, 60, 60)
        assert det.propose(frame("f1")) == got  # replay determinism

    def test_unknown_frame_returns_empty_with_warning(self, tmp_path):
        det = ReplayDetector(write_ndjson(tmp_path / "d.ndjson", [DET_LINE]))
        assert det.propose(frame("nope")) == []
        assert any("nope" in w for w in det.warnings)

    def test_negative_coordinates_rejected_with_line(self, tmp_path):
        bad = {"frame_id": "f1", "boxes": [{"x1": -5, "y1": 0, "x2": 10, "y2": 10, "conf": 0.5}]}
        path = write_ndjson(tmp_path / "d.ndjson", [DET_LINE, bad])
        with pytest.raises(FixtureError, match=r":2:"):
            ReplayDetector(path)

    def test_box_beyond_declared_dims_rejected(self, tmp_path):
        bad = {
            "frame_id": "f1",
            "image_width": 100,
            "image_height": 100,
            "boxes": [{"x1": 0, "y1": 0, "x2": 150, "y2": 50, "conf": 0.5}],
        }
        with pytest.raises(FixtureError, match="out of image bounds"):
            ReplayDetector(write_ndjson(tmp_path / "d.ndjson", [bad]))

    def test_malformed_json_names_line(self, tmp_path):
        p = tmp_path / "d.ndjson"
        p.write_text(json.dumps(DET_LINE) + "\n{not json\n")
        with pytest.raises(FixtureError, match=r":2:"):
            ReplayDetector(str(p))

    def test_clips_to_frame_bounds(self, tmp_path):
        line = {"frame_id": "f1", "boxes": [{"x1": 0, "y1": 0, "x2": 900, "y2": 900, "conf": 0.5}]}
        det = ReplayDetector(write_ndjson(tmp_path / "d.ndjson", [line]))
        small = FrameRecord(frame_id="f1", image_width=500, image_height=500)
        got = det.propose(small)
        assert got[0].box == BoundingBox(0, 0, 500, 500)


VER_LINES = [
    {
        "frame_id": "f1",
        "adverse": True,
        "quality": {"illumination": 0.2, "clarity": 0.3, "artifacts": 0.5},
    },
    {
        "frame_id": "f1",
        "crop": [10, 10, 60, 60],
        "raw_response": "<think>r</think><answer>[{'Decision': 'Yes', 'Confidence': 0.91}]</answer>",
    },
]


class TestReplayVerifier:
    def test_assessment_replay(self, tmp_path):
        ver = ReplayVerifier(write_ndjson(tmp_path / "v.ndjson", VER_LINES))
        a = ver.assess_global(frame("f1"))
        assert a.adverse is True
        assert a.quality.illumination == 0.2

    def test_verdict_replay_is_stable(self, tmp_path):
        ver = ReplayVerifier(write_ndjson(tmp_path / "v.ndjson", VER_LINES))
        req = VerifyRequest("f1", BoundingBox(10, 10, 60, 60), prompt="p")
        raw1 = ver.verify(req)
        raw2 = ver.verify(req)
        assert raw1 == raw2
        verdict, report = parse_verdict(raw1)
        assert report.all_ok and verdict.decision == "Yes"

    def test_malformed_response_is_reproduced_verbatim(self, tmp_path):
        lines = [{"frame_id": "f1", "crop": [0, 0, 5, 5], "raw_response": "not a verdict"}]
        ver = ReplayVerifier(write_ndjson(tmp_path / "v.ndjson", lines))
        raw = ver.verify(VerifyRequest("f1", BoundingBox(0, 0, 5, 5), prompt="p"))
        assert raw == "not a verdict"
        verdict, report = parse_verdict(raw)
        assert verdict is None and not report.valid_envelope

    def test_missing_crop_key_fails_closed(self, tmp_path):
        ver = ReplayVerifier(write_ndjson(tmp_path / "v.ndjson", VER_LINES))
        with pytest.raises(BackendError):
            ver.verify(VerifyRequest("f1", BoundingBox(0, 0, 1, 1), prompt="p"))

    def test_unknown_frame_assessment_warns(self, tmp_path):
        ver = ReplayVerifier(write_ndjson(tmp_path / "v.ndjson", VER_LINES))
        assert ver.assess_global(frame("other")) == Assessment()
        assert ver.warnings

    def test_response_without_crop_rejected_at_load(self, tmp_path):
        with pytest.raises(FixtureError, match="crop"):
            ReplayVerifier(
                write_ndjson(
                    tmp_path / "v.ndjson", [{"frame_id": "f1", "raw_response": "x"}]
                )
            )


class TestOracleVerifier:
    def test_yes_on_overlapping_crop(self):
        gt = BoundingBox(100, 100, 200, 200)
        ver = OracleVerifier([frame("f1", gts=[gt])], tau_iou=0.3)
        raw = ver.verify(VerifyRequest("f1", gt, prompt="p"))
        verdict, _ = parse_verdict(raw)
        assert verdict.decision == "Yes"

    def test_no_on_background_crop(self):
        gt = BoundingBox(100, 100, 200, 200)
        ver = OracleVerifier([frame("f1", gts=[gt])], tau_iou=0.3)
        raw = ver.verify(VerifyRequest("f1", BoundingBox(500, 500, 600, 600), prompt="p"))
        verdict, _ = parse_verdict(raw)
        assert verdict.decision == "No"

    def test_adverse_tracks_condition(self):
        ver = OracleVerifier([frame("f1", condition="degraded")])
        assert ver.assess_global(frame("f1", condition="degraded")).adverse is True


class SleepyDetector(DetectorBackend):
    def __init__(self, delay_s):
        from polypcascade.backends import BackendInfo

        self.info = BackendInfo("sleepy")
        self.delay_s = delay_s

    def propose(self, frame):
        time.sleep(self.delay_s)
        return []


class SleepyVerifier(VerifierBackend):
    def __init__(self, delays_s):
        from polypcascade.backends import BackendInfo

        self.info = BackendInfo("sleepy")
        self.delays = list(delays_s)
        self.calls = 0

    def assess_global(self, frame):
        return Assessment()

    def verify(self, request):
        delay = self.delays[self.calls % len(self.delays)]
        self.calls += 1
        time.sleep(delay)
        return "<think>.</think><answer>[{'Decision': 'Yes', 'Confidence': 0.90}]</answer>"


class TestTimed:
    def test_zero_candidates_zero_verify_entries(self):
        sink = TimingSink()
        assert sink.durations("verify") == []
        t = StageTiming(t_preprocess=1.0, t_detect=2.0, t_verify_each=[], t_postprocess=3.0)
        assert t.total == 6.0

    def test_three_calls_three_entries(self):
        sink = TimingSink()
        ver = timed(SleepyVerifier([0.0]), sink)
        req = VerifyRequest("f1", BoundingBox(0, 0, 1, 1), prompt="p")
        for _ in range(3):
            ver.verify(req)
        assert len(sink.durations("verify")) == 3

    def test_injected_delays_sum_within_jitter(self):
        sink = TimingSink()
        det = timed(SleepyDetector(0.01), sink)
        ver = timed(SleepyVerifier([0.01, 0.02, 0.03]), sink)
        det.propose(frame())
        req = VerifyRequest("f1", BoundingBox(0, 0, 1, 1), prompt="p")
        for _ in range(3):
            ver.verify(req)
        verify_total = sum(sink.durations("verify"))
        assert verify_total == pytest.approx(60.0, abs=25.0)
        assert sum(sink.durations("detect")) == pytest.approx(10.0, abs=15.0)

    def test_rejects_non_backend(self):
        with pytest.raises(TypeError):
            timed(object(), TimingSink())
