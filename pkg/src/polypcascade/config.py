"""Run configuration and dataset ingestion.

Defaults reproduce the published operating point: adaptive thresholds
0.5/0.2, relaxed evaluation IoU 0.3, verifier confidence 0.7, reward
weights 0.6/0.3/0.1 with miss penalty 2.0, group size 4, context expansion
1.5, and multi-scale factors 0.8/1.0/1.2 weighted 0.2/0.6/0.2. Configs
round-trip losslessly through JSON.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

from .cascade import CascadeParams
from .frames import FrameRecord
from .geometry import BoundingBox
from .grpo import TrainSchedule
from .quality import QualityFactors, QualityWeights, ThresholdPolicy
from .rewards import RewardWeights


class ConfigError(ValueError):
    """Configuration or dataset input is invalid; maps to exit code 1."""


@dataclass(frozen=True)
class BackendConfig:
    kind: str = "replay"  # replay | http | oracle
    detector_fixture: Optional[str] = None
    verifier_fixture: Optional[str] = None
    endpoint: Optional[str] = None
    token_env: str = "POLYPCASCADE_HTTP_TOKEN"
    timeout_s: float = 5.0
    max_attempts: int = 3
    backoff_s: float = 0.1
    max_in_flight: int = 4
    policy_checkpoint: Optional[str] = None

    def __post_init__(self) -> None:
        if self.kind not in ("replay", "http", "oracle"):
            raise ConfigError(f"unknown backend kind {self.kind!r}")


@dataclass(frozen=True)
class TrainTaskConfig:
    task_seed: int = 123
    n_train: int = 16
    n_heldout: int = 32
    warm_start: bool = False


@dataclass(frozen=True)
class RunConfig:
    dataset: Optional[str] = None
    backend: BackendConfig = field(default_factory=BackendConfig)
    threshold_policy: ThresholdPolicy = field(default_factory=ThresholdPolicy)
    quality_weights: QualityWeights = field(default_factory=QualityWeights)
    adverse_source: str = "backend"
    cascade: CascadeParams = field(default_factory=CascadeParams)
    rewards: RewardWeights = field(default_factory=RewardWeights)
    train: TrainSchedule = field(default_factory=TrainSchedule)
    train_task: TrainTaskConfig = field(default_factory=TrainTaskConfig)
    workers: int = 1
    seed: int = 0
    out_dir: str = "out"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @staticmethod
    def from_dict(data: dict) -> "RunConfig":
        try:
            kwargs = dict(data)
            for key, cls in (
                ("backend", BackendConfig),
                ("threshold_policy", ThresholdPolicy),
                ("quality_weights", QualityWeights),
                ("cascade", CascadeParams),
                ("rewards", RewardWeights),
                ("train", TrainSchedule),
                ("train_task", TrainTaskConfig),
            ):
                if key in kwargs and isinstance(kwargs[key], dict):
                    section = dict(kwargs[key])
                    for tuple_field in ("scales", "scale_weights"):
                        if tuple_field in section and isinstance(section[tuple_field], list):
                            section[tuple_field] = tuple(section[tuple_field])
                    kwargs[key] = cls(**section)
            return RunConfig(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad configuration: {exc}") from exc

    def config_hash(self) -> str:
        """Hash of the result-determining configuration.

        Execution knobs (worker count, output directory) are excluded so
        artifacts from equivalent runs carry identical provenance.
        """
        semantic = self.to_dict()
        semantic.pop("workers", None)
        semantic.pop("out_dir", None)
        canonical = json.dumps(semantic, sort_keys=True)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


def load_config(path: Optional[str]) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    return RunConfig.from_dict(data)


def save_config(config: RunConfig, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(config.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


# --- dataset ingestion --------------------------------------------------------

def _frame_from_record(obj: dict, where: str) -> FrameRecord:
    try:
        quality = None
        if obj.get("quality") is not None:
            q = obj["quality"]
            quality = QualityFactors(q["illumination"], q["clarity"], q["artifacts"])
        gts = tuple(BoundingBox(*g) for g in obj.get("ground_truths", []))
        return FrameRecord(
            frame_id=obj["frame_id"],
            image_width=obj["image_width"],
            image_height=obj["image_height"],
            condition=obj.get("condition", "clean"),
            degradation_tags=tuple(obj.get("degradation_tags", [])),
            quality=quality,
            ground_truths=gts,
            patient_id=obj.get("patient_id"),
            image_ref=obj.get("image_ref"),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: bad frame record: {exc}") from exc


def _load_frames_ndjson(path: str) -> List[FrameRecord]:
    frames = []
    try:
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise ConfigError(f"{path}:{lineno}: not valid JSON: {exc}") from exc
                frames.append(_frame_from_record(obj, f"{path}:{lineno}"))
    except OSError as exc:
        raise ConfigError(f"cannot read dataset {path}: {exc}") from exc
    ids = [f.frame_id for f in frames]
    if len(set(ids)) != len(ids):
        raise ConfigError(f"{path}: duplicate frame_id values")
    return frames


def load_dataset(path: str) -> List[FrameRecord]:
    """Load frames from a manifest (.json, with checksum) or a bare .ndjson file."""
    if path.endswith(".json"):
        try:
            with open(path, "r", encoding="utf-8") as fh:
                manifest = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read manifest {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"manifest {path} is not valid JSON: {exc}") from exc
        annotations = manifest.get("annotations")
        if not isinstance(annotations, str):
            raise ConfigError(f"manifest {path} missing 'annotations' path")
        annotations_path = os.path.join(os.path.dirname(path), annotations)
        expected = manifest.get("sha256")
        if expected:
            try:
                with open(annotations_path, "rb") as fh:
                    digest = hashlib.sha256(fh.read()).hexdigest()
            except OSError as exc:
                raise ConfigError(f"cannot read annotations {annotations_path}: {exc}") from exc
            if digest != expected:
                raise ConfigError(
                    f"checksum mismatch for {annotations_path}: expected {expected}, got {digest}"
                )
        return _load_frames_ndjson(annotations_path)
    return _load_frames_ndjson(path)


def frame_to_record(frame: FrameRecord) -> dict:
    """Inverse of dataset ingestion, used by fixture generators."""
    return {
        "frame_id": frame.frame_id,
        "image_width": frame.image_width,
        "image_height": frame.image_height,
        "condition": frame.condition,
        "degradation_tags": list(frame.degradation_tags),
        "quality": None
        if frame.quality is None
        else {
            "illumination": frame.quality.illumination,
            "clarity": frame.quality.clarity,
            "artifacts": frame.quality.artifacts,
        },
        "ground_truths": [list(g.as_tuple()) for g in frame.ground_truths],
        "patient_id": frame.patient_id,
        "image_ref": frame.image_ref,
    }
