import json
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

from polypcascade.backends import BackendError, HttpVerifier, VerifyRequest
from polypcascade.cascade import CascadeParams, stage2
from polypcascade.backends import Assessment
from polypcascade.frames import FrameRecord
from polypcascade.geometry import BoundingBox, Candidate
from polypcascade.protocol import render_verdict_answer

YES_TEXT = render_verdict_answer("Yes", 0.90)


class StubServer:
    """Scriptable HTTP stub; `script(path, payload)` returns (status, body, delay_s).

    A body of None means "reply with a well-formed envelope echoing the
    request id and carrying YES_TEXT".
    """

    def __init__(self, script=None):
        self.script = script or (lambda path, payload: (200, None, 0.0))
        self.lock = threading.Lock()
        self.active = 0
        self.max_active = 0
        self.calls = 0
        stub = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):
                pass

            def do_POST(self):
                with stub.lock:
                    stub.active += 1
                    stub.calls += 1
                    stub.max_active = max(stub.max_active, stub.active)
                try:
                    length = int(self.headers.get("Content-Length", "0"))
                    payload = json.loads(self.rfile.read(length) or b"{}")
                    status, body, delay = stub.script(self.path, payload)
                    if delay:
                        time.sleep(delay)
                    if body is None:
                        body = {
                            "v": 1,
                            "request_id": payload.get("request_id"),
                            "model_text": YES_TEXT,
                        }
                    raw = json.dumps(body).encode()
                    self.send_response(status)
                    self.send_header("Content-Type", "application/json")
                    self.send_header("Content-Length", str(len(raw)))
                    self.end_headers()
                    self.wfile.write(raw)
                finally:
                    with stub.lock:
                        stub.active -= 1

        self.server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)
        self.thread.start()

    @property
    def endpoint(self):
        host, port = self.server.server_address
        return f"http://{host}:{port}"

    def close(self):
        self.server.shutdown()
        self.server.server_close()


@pytest.fixture
def stub():
    servers = []

    def make(script=None):
        s = StubServer(script)
        servers.append(s)
        return s

    yield make
    for s in servers:
        s.close()


def req(frame_id="f1"):
    return VerifyRequest(frame_id, BoundingBox(0, 0, 100, 100), prompt="p")


class TestHttpVerifier:
    def test_canned_response_end_to_end(self, stub):
        s = stub()
        ver = HttpVerifier(s.endpoint, backoff_s=0.01)
        frame = FrameRecord(frame_id="f1", image_width=1000, image_height=1000)
        cand = Candidate(BoundingBox(0, 0, 100, 100), 0.8)
        result = stage2(frame, 0.5, [cand], ver, CascadeParams(), Assessment())
        assert result.verified[0].accepted
        assert result.finals == [cand]

    def test_retry_then_succeed(self, stub):
        state = {"n": 0}

        def script(path, payload):
            state["n"] += 1
            if state["n"] <= 2:
                return (500, {"error": "transient"}, 0.0)
            return (200, None, 0.0)

        s = stub(script)
        ver = HttpVerifier(s.endpoint, backoff_s=0.01, max_attempts=3)
        text = ver.verify(req())
        assert text == YES_TEXT
        assert ver.stats.retries == 2
        assert ver.stats.requests == 3

    def test_retry_exhaustion_fails_closed(self, stub):
        s = stub(lambda path, payload: (500, {"error": "down"}, 0.0))
        ver = HttpVerifier(s.endpoint, backoff_s=0.01, max_attempts=3)
        with pytest.raises(BackendError):
            ver.verify(req())
        assert ver.stats.requests == 3

    def test_4xx_never_retried(self, stub):
        s = stub(lambda path, payload: (404, {"error": "nope"}, 0.0))
        ver = HttpVerifier(s.endpoint, backoff_s=0.01, max_attempts=3)
        with pytest.raises(BackendError):
            ver.verify(req())
        assert ver.stats.requests == 1
        assert ver.stats.retries == 0

    def test_timeout_fails_closed_and_batch_continues(self, stub):
        s = stub(lambda path, payload: (200, None, 1.0))  # sleeps past the client timeout
        ver = HttpVerifier(s.endpoint, timeout_s=0.2, backoff_s=0.01)
        frame = FrameRecord(frame_id="f1", image_width=1000, image_height=1000)
        cands = [
            Candidate(BoundingBox(0, 0, 100, 100), 0.8),
            Candidate(BoundingBox(200, 200, 300, 300), 0.6),
        ]
        result = stage2(frame, 0.5, cands, ver, CascadeParams(), Assessment())
        assert len(result.verified) == 2  # batch continued past the timeouts
        assert all(not vc.accepted for vc in result.verified)
        assert all(vc.error is not None for vc in result.verified)
        assert ver.stats.timeouts == 2

    def test_malformed_envelope_rejected(self, stub):
        s = stub(lambda path, payload: (200, {"v": 1, "request_id": "wrong"}, 0.0))
        ver = HttpVerifier(s.endpoint, backoff_s=0.01)
        with pytest.raises(BackendError):
            ver.verify(req())

    def test_missing_model_text_rejected(self, stub):
        def script(path, payload):
            return (200, {"v": 1, "request_id": payload["request_id"]}, 0.0)

        s = stub(script)
        ver = HttpVerifier(s.endpoint, backoff_s=0.01)
        with pytest.raises(BackendError):
            ver.verify(req())

    def test_in_flight_cap_never_exceeded(self, stub):
        s = stub(lambda path, payload: (200, None, 0.05))
        ver = HttpVerifier(s.endpoint, max_in_flight=3, backoff_s=0.01)
        with ThreadPoolExecutor(max_workers=12) as pool:
            list(pool.map(lambda i: ver.verify(req(f"f{i}")), range(12)))
        assert s.calls == 12
        assert s.max_active <= 3

    def test_assess_global_roundtrip(self, stub):
        def script(path, payload):
            assert path == "/v1/assess"
            return (
                200,
                {
                    "v": 1,
                    "request_id": payload["request_id"],
                    "adverse": True,
                    "quality": {"illumination": 0.1, "clarity": 0.2, "artifacts": 0.3},
                },
                0.0,
            )

        s = stub(script)
        ver = HttpVerifier(s.endpoint, backoff_s=0.01)
        frame = FrameRecord(frame_id="f1", image_width=10, image_height=10)
        assessment = ver.assess_global(frame)
        assert assessment.adverse is True
        assert assessment.quality.clarity == 0.2

    def test_bad_limits_rejected(self):
        with pytest.raises(ValueError):
            HttpVerifier("http://x", max_in_flight=0)
        with pytest.raises(ValueError):
            HttpVerifier("http://x", max_attempts=0)
