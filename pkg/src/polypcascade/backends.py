"""Detector and verifier backends: file replay, ground-truth oracle, remote HTTP.

Backends never pre-parse model output; the raw response text travels
verbatim to the protocol parser so the format reward sees what the model
actually said. All backends are safe to call from multiple workers, and
every failure path is fail-closed: an error can reject a candidate but
never accept one.
"""
from __future__ import annotations

import json
import threading
import time
import uuid
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import requests

from .frames import FrameRecord
from .geometry import BoundingBox, Candidate, iou
from .protocol import render_verdict_answer
from .quality import QualityFactors


class BackendError(RuntimeError):
    """A backend could not produce a usable answer; the caller must fail closed."""


class FixtureError(ValueError):
    """A replay fixture failed validation; message carries the offending line."""


@dataclass(frozen=True)
class BackendInfo:
    name: str
    version: str = "1"


@dataclass(frozen=True)
class Assessment:
    """Global frame assessment: adverse flag, quality factors, aleatoric pass-through."""

    adverse: Optional[bool] = None
    quality: Optional[QualityFactors] = None
    aleatoric: Optional[float] = None


@dataclass(frozen=True)
class VerifyRequest:
    """One verification call: the crop under test plus its expanded context."""

    frame_id: str
    crop: BoundingBox
    prompt: str
    context_crop: Optional[BoundingBox] = None
    scale: float = 1.0
    image_ref: Optional[str] = None


class DetectorBackend(ABC):
    info: BackendInfo

    @abstractmethod
    def propose(self, frame: FrameRecord) -> List[Candidate]:
        """Unthresholded candidate boxes for a frame, clipped to image bounds."""


class VerifierBackend(ABC):
    info: BackendInfo

    @abstractmethod
    def assess_global(self, frame: FrameRecord) -> Assessment:
        """Whole-frame quality assessment feeding the threshold controller."""

    @abstractmethod
    def verify(self, request: VerifyRequest) -> str:
        """Raw model response text for one crop; raises BackendError on failure."""


@dataclass
class StageTiming:
    """Per-frame latency components in milliseconds."""

    t_preprocess: float = 0.0
    t_detect: float = 0.0
    t_verify_each: List[float] = field(default_factory=list)
    t_postprocess: float = 0.0

    @property
    def total(self) -> float:
        return self.t_preprocess + self.t_detect + sum(self.t_verify_each) + self.t_postprocess


# --- replay backends -------------------------------------------------------

def _load_ndjson(path: str) -> List[Tuple[int, dict]]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FixtureError(f"{path}:{lineno}: not valid JSON: {exc}") from exc
            if not isinstance(obj, dict):
                raise FixtureError(f"{path}:{lineno}: expected an object")
            records.append((lineno, obj))
    return records


def _crop_key(box: BoundingBox, scale: float) -> Tuple[float, float, float, float, float]:
    return (
        round(box.x1, 2),
        round(box.y1, 2),
        round(box.x2, 2),
        round(box.y2, 2),
        round(scale, 2),
    )


class ReplayDetector(DetectorBackend):
    """Replays recorded candidates keyed by frame_id, bit-deterministic."""

    def __init__(self, fixture_path: str) -> None:
        self.info = BackendInfo("replay-detector")
        self.warnings: List[str] = []
        self._by_frame: Dict[str, List[Candidate]] = {}
        for lineno, obj in _load_ndjson(fixture_path):
            where = f"{fixture_path}:{lineno}"
            frame_id = obj.get("frame_id")
            if not isinstance(frame_id, str) or not frame_id:
                raise FixtureError(f"{where}: missing frame_id")
            boxes = obj.get("boxes")
            if not isinstance(boxes, list):
                raise FixtureError(f"{where}: missing boxes list")
            width = obj.get("image_width")
            height = obj.get("image_height")
            candidates = []
            for b in boxes:
                try:
                    box = BoundingBox(b["x1"], b["y1"], b["x2"], b["y2"])
                    cand = Candidate(box, b["conf"])
                except (KeyError, TypeError, ValueError) as exc:
                    raise FixtureError(f"{where}: bad box {b!r}: {exc}") from exc
                if box.x1 < 0 or box.y1 < 0:
                    raise FixtureError(f"{where}: box {b!r} out of image bounds")
                if width is not None and height is not None:
                    if box.x2 > width or box.y2 > height:
                        raise FixtureError(f"{where}: box {b!r} out of image bounds")
                candidates.append(cand)
            self._by_frame[frame_id] = candidates

    def propose(self, frame: FrameRecord) -> List[Candidate]:
        recorded = self._by_frame.get(frame.frame_id)
        if recorded is None:
            self.warnings.append(f"no recorded candidates for frame {frame.frame_id}")
            return []
        out = []
        for cand in recorded:
            b = cand.box
            clipped = BoundingBox(
                min(max(b.x1, 0.0), frame.image_width),
                min(max(b.y1, 0.0), frame.image_height),
                min(max(b.x2, 0.0), frame.image_width),
                min(max(b.y2, 0.0), frame.image_height),
            )
            out.append(Candidate(clipped, cand.confidence))
        return out


class ReplayVerifier(VerifierBackend):
    """Replays recorded raw responses keyed by (frame_id, crop, scale).

    Fixture lines may carry a global assessment (quality/adverse), a crop
    response (crop/raw_response), or both.
    """

    def __init__(self, fixture_path: str) -> None:
        self.info = BackendInfo("replay-verifier")
        self.warnings: List[str] = []
        self._assessments: Dict[str, Assessment] = {}
        self._responses: Dict[Tuple[str, Tuple[float, float, float, float, float]], str] = {}
        for lineno, obj in _load_ndjson(fixture_path):
            where = f"{fixture_path}:{lineno}"
            frame_id = obj.get("frame_id")
            if not isinstance(frame_id, str) or not frame_id:
                raise FixtureError(f"{where}: missing frame_id")
            if "quality" in obj or "adverse" in obj:
                quality = None
                if obj.get("quality") is not None:
                    q = obj["quality"]
                    try:
                        quality = QualityFactors(
                            q["illumination"], q["clarity"], q["artifacts"]
                        )
                    except (KeyError, TypeError, ValueError) as exc:
                        raise FixtureError(f"{where}: bad quality {q!r}: {exc}") from exc
                adverse = obj.get("adverse")
                if adverse is not None and not isinstance(adverse, bool):
                    raise FixtureError(f"{where}: adverse must be a boolean")
                self._assessments[frame_id] = Assessment(
                    adverse=adverse, quality=quality, aleatoric=obj.get("aleatoric")
                )
            if "raw_response" in obj:
                crop = obj.get("crop")
                if not (isinstance(crop, list) and len(crop) == 4):
                    raise FixtureError(f"{where}: raw_response requires a crop [x1,y1,x2,y2]")
                if not isinstance(obj["raw_response"], str):
                    raise FixtureError(f"{where}: raw_response must be text")
                try:
                    box = BoundingBox(*crop)
                except (TypeError, ValueError) as exc:
                    raise FixtureError(f"{where}: bad crop {crop!r}: {exc}") from exc
                key = (frame_id, _crop_key(box, obj.get("scale", 1.0)))
                self._responses[key] = obj["raw_response"]

    def assess_global(self, frame: FrameRecord) -> Assessment:
        found = self._assessments.get(frame.frame_id)
        if found is None:
            self.warnings.append(f"no recorded assessment for frame {frame.frame_id}")
            return Assessment()
        return found

    def verify(self, request: VerifyRequest) -> str:
        key = (request.frame_id, _crop_key(request.crop, request.scale))
        try:
            return self._responses[key]
        except KeyError:
            raise BackendError(
                f"no recorded response for frame {request.frame_id} crop {key[1]}"
            ) from None


class OracleVerifier(VerifierBackend):
    """Answers from ground truth: Yes iff the crop overlaps a true box at tau_iou.

    A testing and ablation aid; precision under this verifier is 1 by
    construction whenever tau_iou matches the evaluation threshold.
    """

    def __init__(
        self,
        frames: Sequence[FrameRecord],
        tau_iou: float = 0.3,
        confidence: float = 0.99,
    ) -> None:
        self.info = BackendInfo("oracle-verifier")
        self._frames = {f.frame_id: f for f in frames}
        self._tau_iou = tau_iou
        self._confidence = confidence

    def assess_global(self, frame: FrameRecord) -> Assessment:
        return Assessment(adverse=frame.condition == "degraded", quality=frame.quality)

    def verify(self, request: VerifyRequest) -> str:
        frame = self._frames.get(request.frame_id)
        if frame is None:
            raise BackendError(f"oracle knows no frame {request.frame_id}")
        hit = any(iou(request.crop, gt) >= self._tau_iou for gt in frame.ground_truths)
        return render_verdict_answer("Yes" if hit else "No", self._confidence)


# --- remote HTTP verifier ---------------------------------------------------

ENVELOPE_VERSION = 1


@dataclass
class HttpStats:
    """Thread-safe transport counters surfaced into the audit log."""

    requests: int = 0
    retries: int = 0
    failures: int = 0
    timeouts: int = 0

    def __post_init__(self) -> None:
        self._lock = threading.Lock()

    def bump(self, field_name: str, by: int = 1) -> None:
        with self._lock:
            setattr(self, field_name, getattr(self, field_name) + by)

    def snapshot(self) -> dict:
        with self._lock:
            return {
                "requests": self.requests,
                "retries": self.retries,
                "failures": self.failures,
                "timeouts": self.timeouts,
            }


class HttpVerifier(VerifierBackend):
    """Remote verifier speaking the versioned JSON envelope over HTTP.

    Transient failures (connection errors, 5xx) are retried with exponential
    backoff; 4xx and timeouts are not retried. A bounded semaphore caps
    concurrent in-flight requests, released even on cancellation.
    """

    def __init__(
        self,
        endpoint: str,
        token: Optional[str] = None,
        timeout_s: float = 5.0,
        max_attempts: int = 3,
        backoff_s: float = 0.1,
        max_in_flight: int = 4,
    ) -> None:
        if max_in_flight < 1:
            raise ValueError("in-flight limit must be >= 1")
        if max_attempts < 1:
            raise ValueError("need at least one attempt")
        self.info = BackendInfo("http-verifier")
        self.endpoint = endpoint.rstrip("/")
        self.timeout_s = timeout_s
        self.max_attempts = max_attempts
        self.backoff_s = backoff_s
        self.stats = HttpStats()
        self._slots = threading.BoundedSemaphore(max_in_flight)
        self._session = requests.Session()
        if token:
            self._session.headers["Authorization"] = f"Bearer {token}"

    def _post(self, path: str, payload: dict) -> dict:
        request_id = uuid.uuid4().hex
        payload = {"v": ENVELOPE_VERSION, "request_id": request_id, **payload}
        attempt = 0
        self._slots.acquire()
        try:
            while True:
                attempt += 1
                self.stats.bump("requests")
                try:
                    resp = self._session.post(
                        f"{self.endpoint}{path}", json=payload, timeout=self.timeout_s
                    )
                except requests.Timeout as exc:
                    self.stats.bump("timeouts")
                    self.stats.bump("failures")
                    raise BackendError(f"timeout after {self.timeout_s}s: {exc}") from exc
                except requests.ConnectionError as exc:
                    if attempt < self.max_attempts:
                        self.stats.bump("retries")
                        time.sleep(self.backoff_s * (2 ** (attempt - 1)))
                        continue
                    self.stats.bump("failures")
                    raise BackendError(f"connection failed: {exc}") from exc

                if 500 <= resp.status_code < 600 and attempt < self.max_attempts:
                    self.stats.bump("retries")
                    time.sleep(self.backoff_s * (2 ** (attempt - 1)))
                    continue
                if resp.status_code != 200:
                    self.stats.bump("failures")
                    raise BackendError(f"server returned {resp.status_code}")

                try:
                    body = resp.json()
                except ValueError as exc:
                    self.stats.bump("failures")
                    raise BackendError(f"response is not JSON: {exc}") from exc
                if not isinstance(body, dict) or body.get("request_id") != request_id:
                    self.stats.bump("failures")
                    raise BackendError("malformed response envelope")
                return body
        finally:
            self._slots.release()

    def assess_global(self, frame: FrameRecord) -> Assessment:
        body = self._post(
            "/v1/assess",
            {"frame_id": frame.frame_id, "image_ref": frame.image_ref},
        )
        quality = None
        q = body.get("quality")
        if isinstance(q, dict):
            try:
                quality = QualityFactors(q["illumination"], q["clarity"], q["artifacts"])
            except (KeyError, TypeError, ValueError) as exc:
                raise BackendError(f"bad quality payload {q!r}") from exc
        adverse = body.get("adverse")
        if adverse is not None and not isinstance(adverse, bool):
            raise BackendError("adverse must be a boolean")
        return Assessment(adverse=adverse, quality=quality, aleatoric=body.get("aleatoric"))

    def verify(self, request: VerifyRequest) -> str:
        body = self._post(
            "/v1/verify",
            {
                "frame_id": request.frame_id,
                "crop": list(request.crop.as_tuple()),
                "context_crop": list(request.context_crop.as_tuple())
                if request.context_crop
                else None,
                "scale": request.scale,
                "prompt": request.prompt,
                "image_ref": request.image_ref,
            },
        )
        text = body.get("model_text")
        if not isinstance(text, str):
            raise BackendError("response envelope missing model_text")
        return text


# --- timing wrappers --------------------------------------------------------

class TimingSink:
    """Collects (operation, milliseconds) records from timed backends."""

    def __init__(self) -> None:
        self.records: List[Tuple[str, float]] = []

    def record(self, op: str, ms: float) -> None:
        self.records.append((op, ms))

    def durations(self, op: str) -> List[float]:
        return [ms for name, ms in self.records if name == op]


class _TimedDetector(DetectorBackend):
    def __init__(self, inner: DetectorBackend, sink: TimingSink) -> None:
        self.info = inner.info
        self._inner = inner
        self._sink = sink

    def propose(self, frame: FrameRecord) -> List[Candidate]:
        start = time.monotonic()
        try:
            return self._inner.propose(frame)
        finally:
            self._sink.record("detect", (time.monotonic() - start) * 1000.0)


class _TimedVerifier(VerifierBackend):
    def __init__(self, inner: VerifierBackend, sink: TimingSink) -> None:
        self.info = inner.info
        self._inner = inner
        self._sink = sink

    def assess_global(self, frame: FrameRecord) -> Assessment:
        start = time.monotonic()
        try:
            return self._inner.assess_global(frame)
        finally:
            self._sink.record("assess", (time.monotonic() - start) * 1000.0)

    def verify(self, request: VerifyRequest) -> str:
        start = time.monotonic()
        try:
            return self._inner.verify(request)
        finally:
            self._sink.record("verify", (time.monotonic() - start) * 1000.0)


def timed(backend, sink: TimingSink):
    """Wrap a backend so each call appends its duration to the sink."""
    if isinstance(backend, DetectorBackend):
        return _TimedDetector(backend, sink)
    if isinstance(backend, VerifierBackend):
        return _TimedVerifier(backend, sink)
    raise TypeError(f"not a backend: {backend!r}")
