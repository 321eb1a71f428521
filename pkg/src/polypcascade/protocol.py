"""Prompt rendering and structured-response parsing.

The wire grammar is a chain-of-thought envelope,

    <think>...</think><answer>PAYLOAD</answer>

where PAYLOAD is either the literal ``No Objects`` (detection only) or a
list of objects. Detection items carry ``Position`` (four integers on the
[0, 1000] grid, corner-ordered) and ``Confidence`` (in [0, 1], at most two
fractional digits); verdicts carry ``Decision`` (Yes/No) and ``Confidence``.

Models emit this payload in either single-quoted pseudo-JSON or strict JSON;
the parser accepts both, and the canonical serializers here emit the strict
double-quoted form. Parsers are total: arbitrary bytes produce a report with
the failing compliance flags set to False, never an exception.
"""
from __future__ import annotations

import ast
import json
import re
from dataclasses import dataclass
from importlib import resources
from typing import List, Optional, Sequence, Tuple

TEMPLATE_VERSION = 1

GRID_MAX = 1000
EMPTY_MARKER = "No Objects"
DEFAULT_THINK = "..."

_CLASS_MARKER = "<CLASS>"
_ENVELOPE_RE = re.compile(r"<think>(.*?)</think>\s*<answer>(.*?)</answer>", re.DOTALL)
_FORBIDDEN_THINK = ("</think>", "<answer>", "</answer>")


@dataclass(frozen=True)
class DetectionItem:
    """One predicted box on the integer grid plus its confidence."""

    position: Tuple[int, int, int, int]
    confidence: float


@dataclass(frozen=True)
class DetectionResponse:
    think_text: str
    items: Tuple[DetectionItem, ...]


@dataclass(frozen=True)
class VerdictResponse:
    think_text: str
    decision: str  # "Yes" or "No", normalized at parse
    confidence: float


@dataclass(frozen=True)
class FormatReport:
    """Which compliance checks passed; downstream format reward is 1 iff all four hold."""

    valid_envelope: bool
    valid_payload: bool
    required_fields: bool
    value_ranges: bool

    @property
    def all_ok(self) -> bool:
        return (
            self.valid_envelope
            and self.valid_payload
            and self.required_fields
            and self.value_ranges
        )


_ALL_OK = FormatReport(True, True, True, True)


def _load_template(name: str) -> str:
    return (
        resources.files("polypcascade.resources")
        .joinpath(f"{name}_v{TEMPLATE_VERSION}.txt")
        .read_text(encoding="utf-8")
    )


def _render_prompt(template_name: str, class_name: str) -> str:
    if not class_name or not class_name.strip():
        raise ValueError("class name must be nonempty")
    return _load_template(template_name).replace(_CLASS_MARKER, class_name)


def render_detection_prompt(class_name: str) -> str:
    """Detection prompt with the target class substituted, byte-stable per version."""
    return _render_prompt("detect_prompt", class_name)


def render_verify_prompt(class_name: str) -> str:
    """Crop-verification prompt with the target class substituted."""
    return _render_prompt("verify_prompt", class_name)


def _last_envelope(raw: str) -> Optional[Tuple[str, str]]:
    matches = _ENVELOPE_RE.findall(raw)
    if not matches:
        return None
    return matches[-1]


def _parse_payload(body: str):
    """Parse the answer body under the relaxed grammar (JSON or Python literal)."""
    try:
        return json.loads(body), True
    except Exception:
        pass
    try:
        return ast.literal_eval(body), True
    except Exception:
        return None, False


def _is_number(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _two_decimals(c: float) -> bool:
    return abs(c * 100 - round(c * 100)) <= 1e-9


def parse_detection(raw: str) -> Tuple[Optional[DetectionResponse], FormatReport]:
    """Parse a detection response; returns (response or None, compliance report).

    The response is present only when every compliance flag holds. Multiple
    envelopes in the input resolve to the last complete one.
    """
    env = _last_envelope(raw) if isinstance(raw, str) else None
    if env is None:
        return None, FormatReport(False, False, False, False)
    think, body = env

    if body.strip().casefold() == EMPTY_MARKER.casefold():
        return DetectionResponse(think, ()), _ALL_OK

    value, ok = _parse_payload(body.strip())
    if not ok or not isinstance(value, (list, tuple)):
        return None, FormatReport(True, False, False, False)

    items: List[DetectionItem] = []
    fields_ok = True
    ranges_ok = True
    for element in value:
        if not (
            isinstance(element, dict)
            and "Position" in element
            and "Confidence" in element
        ):
            fields_ok = False
            break
        pos = element["Position"]
        conf = element["Confidence"]
        if not (
            isinstance(pos, (list, tuple))
            and len(pos) == 4
            and all(_is_int(p) for p in pos)
            and _is_number(conf)
        ):
            fields_ok = False
            break
        x1, y1, x2, y2 = pos
        if not (
            all(0 <= p <= GRID_MAX for p in pos)
            and x1 <= x2
            and y1 <= y2
            and 0.0 <= conf <= 1.0
            and _two_decimals(conf)
        ):
            ranges_ok = False
        items.append(DetectionItem((x1, y1, x2, y2), float(conf)))

    if not fields_ok:
        return None, FormatReport(True, True, False, False)
    if not ranges_ok:
        return None, FormatReport(True, True, True, False)
    return DetectionResponse(think, tuple(items)), _ALL_OK


def parse_verdict(raw: str) -> Tuple[Optional[VerdictResponse], FormatReport]:
    """Parse a verification verdict; payload must be a single Decision/Confidence object."""
    env = _last_envelope(raw) if isinstance(raw, str) else None
    if env is None:
        return None, FormatReport(False, False, False, False)
    think, body = env

    value, ok = _parse_payload(body.strip())
    if not ok or not isinstance(value, (list, tuple)):
        return None, FormatReport(True, False, False, False)

    if len(value) != 1:
        return None, FormatReport(True, True, False, False)
    element = value[0]
    if not (
        isinstance(element, dict)
        and "Decision" in element
        and "Confidence" in element
    ):
        return None, FormatReport(True, True, False, False)

    decision_raw = element["Decision"]
    conf = element["Confidence"]
    if not isinstance(decision_raw, str) or not _is_number(conf):
        return None, FormatReport(True, True, False, False)
    token = decision_raw.strip().casefold()
    if token not in ("yes", "no"):
        return None, FormatReport(True, True, False, False)

    if not (0.0 <= conf <= 1.0 and _two_decimals(conf)):
        return None, FormatReport(True, True, True, False)

    decision = "Yes" if token == "yes" else "No"
    return VerdictResponse(think, decision, float(conf)), _ALL_OK


def _check_think(think_text: str) -> None:
    for token in _FORBIDDEN_THINK:
        if token in think_text:
            raise ValueError(f"think text may not contain envelope markup: {token!r}")


def _check_confidence(c: float) -> None:
    if not (_is_number(c) and 0.0 <= c <= 1.0 and _two_decimals(c)):
        raise ValueError(f"confidence must be in [0, 1] with two decimals, got {c!r}")


def render_detection_answer(
    items: Sequence[DetectionItem],
    think_text: str = DEFAULT_THINK,
) -> str:
    """Canonical serialization; parse_detection accepts it with all flags true.

    The empty item list serializes to the ``No Objects`` marker.
    """
    _check_think(think_text)
    rendered = []
    for item in items:
        pos = item.position
        if len(pos) != 4 or not all(_is_int(p) and 0 <= p <= GRID_MAX for p in pos):
            raise ValueError(f"position must be four integers in [0, {GRID_MAX}]: {pos!r}")
        if pos[0] > pos[2] or pos[1] > pos[3]:
            raise ValueError(f"position corners out of order: {pos!r}")
        _check_confidence(item.confidence)
        rendered.append(
            '{"Position": [%d, %d, %d, %d], "Confidence": %.2f}' % (*pos, item.confidence)
        )
    body = EMPTY_MARKER if not rendered else "[" + ", ".join(rendered) + "]"
    return f"<think>{think_text}</think><answer>{body}</answer>"


def render_verdict_answer(
    decision: str,
    confidence: float,
    think_text: str = DEFAULT_THINK,
) -> str:
    """Canonical verdict serialization (decision must already be Yes or No)."""
    _check_think(think_text)
    if decision not in ("Yes", "No"):
        raise ValueError(f"decision must be 'Yes' or 'No', got {decision!r}")
    _check_confidence(confidence)
    body = '[{"Decision": "%s", "Confidence": %.2f}]' % (decision, confidence)
    return f"<think>{think_text}</think><answer>{body}</answer>"
