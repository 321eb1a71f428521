"""Dataset frame records: identity, quality metadata, and ground truth."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Tuple

from .geometry import BoundingBox
from .quality import QualityFactors

CONDITIONS = ("clean", "degraded")


@dataclass(frozen=True)
class FrameRecord:
    """One image's identity, condition metadata, and ground-truth boxes.

    The engine never touches pixels; `image_ref` is an opaque reference
    (path or id) that backends may resolve however they like.
    """

    frame_id: str
    image_width: float
    image_height: float
    condition: str = "clean"
    degradation_tags: Tuple[str, ...] = ()
    quality: Optional[QualityFactors] = None
    ground_truths: Tuple[BoundingBox, ...] = ()
    patient_id: Optional[str] = None
    image_ref: Optional[str] = None

    def __post_init__(self) -> None:
        if not self.frame_id:
            raise ValueError("frame_id must be nonempty")
        if self.image_width <= 0 or self.image_height <= 0:
            raise ValueError(
                f"frame {self.frame_id}: image dimensions must be positive"
            )
        if self.condition not in CONDITIONS:
            raise ValueError(
                f"frame {self.frame_id}: condition must be one of {CONDITIONS}"
            )
        for gt in self.ground_truths:
            if gt.x1 < 0 or gt.y1 < 0 or gt.x2 > self.image_width or gt.y2 > self.image_height:
                raise ValueError(
                    f"frame {self.frame_id}: ground truth {gt.as_tuple()} outside image bounds"
                )
