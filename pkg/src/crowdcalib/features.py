"""Per-frame scalar/ordinal features extracted from CV observations."""

from __future__ import annotations

import csv
import enum
import io
import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

from .calibration import PoolMode, estimate_occupancy, pool
from .domain import CrowdLevel, DetectionBox, FrameObservation, GridMask, HeadPoint, WeightMap
from .ingest import FormatError, format_number

DEFAULT_CONF_MIN = 0.30
PERSON_CLASS = 0


class Method(enum.Enum):
    DET_COUNT = "det_count"
    HEAD_COUNT = "head_count"
    SEG_PIXELS = "seg_pixels"
    SEG_RATIO = "seg_ratio"
    SEG_CALIBRATED = "seg_calibrated"
    CLASS_LEVEL = "class_level"


ORDINAL_METHODS = frozenset({Method.CLASS_LEVEL})


@dataclass(frozen=True)
class FrameFeature:
    camera: str
    event_id: str
    offset_s: int
    method: Method
    value: float

    def __post_init__(self):
        if self.method in (Method.DET_COUNT, Method.HEAD_COUNT, Method.SEG_PIXELS):
            if self.value < 0:
                raise ValueError(f"{self.method.value} must be >= 0, got {self.value}")
        if self.method is Method.SEG_RATIO and not (0.0 <= self.value <= 1.0):
            raise ValueError(f"seg_ratio must lie in [0, 1], got {self.value}")
        if self.method is Method.CLASS_LEVEL:
            object.__setattr__(self, "value", float(CrowdLevel(int(self.value))))


def detection_count(
    boxes: Sequence[DetectionBox],
    conf_min: float = DEFAULT_CONF_MIN,
    person_class: int = PERSON_CLASS,
) -> int:
    """Boxes of the person class at or above the confidence threshold."""
    if not (0.0 <= conf_min <= 1.0):
        raise ValueError(f"conf_min must lie in [0, 1], got {conf_min}")
    return sum(1 for b in boxes if b.class_id == person_class and b.conf >= conf_min)


def head_count(points: Sequence[HeadPoint], conf_min: float = DEFAULT_CONF_MIN) -> int:
    if not (0.0 <= conf_min <= 1.0):
        raise ValueError(f"conf_min must lie in [0, 1], got {conf_min}")
    return sum(1 for p in points if p.conf >= conf_min)


def seg_features(mask: GridMask, aoi: GridMask) -> tuple[int, float]:
    """(person pixels inside the AOI, their share of the total image area)."""
    if (mask.rows, mask.cols) != (aoi.rows, aoi.cols):
        raise ValueError(
            f"mask is {mask.rows}x{mask.cols} but AOI is {aoi.rows}x{aoi.cols}"
        )
    pixels = int((mask.bits & aoi.bits).sum())
    return pixels, pixels / (mask.rows * mask.cols)


def seg_ratio_aoi(mask: GridMask, aoi: GridMask) -> float:
    """Ratio against the AOI area instead of the full image (optional variant)."""
    area = aoi.pixel_count()
    if area == 0:
        raise ValueError("empty AOI")
    pixels, _ = seg_features(mask, aoi)
    return pixels / area


def class_level_from_logits(logits: Sequence[float]) -> CrowdLevel:
    """Argmax over the 4 level logits; ties break toward the higher level."""
    vals = [float(v) for v in logits]
    if len(vals) != 4:
        raise ValueError(f"expected 4 logits, got {len(vals)}")
    if not all(math.isfinite(v) for v in vals):
        raise ValueError(f"logits must be finite, got {vals}")
    best = max(range(4), key=lambda i: (vals[i], i))
    return CrowdLevel(best)


def frame_feature(
    obs: FrameObservation,
    method: Method,
    aoi: Optional[GridMask] = None,
    weight_map: Optional[WeightMap] = None,
    conf_min: float = DEFAULT_CONF_MIN,
    clamp_nonnegative: bool = False,
    aoi_relative_ratio: bool = False,
) -> FrameFeature:
    """Compute one feature from one observation (AOI already applied upstream
    for boxes/points; masks still need the AOI for pixel accounting)."""
    if method is Method.DET_COUNT:
        if obs.detections is None:
            raise ValueError(f"{method.value} needs a boxes payload")
        value = float(detection_count(obs.detections, conf_min))
    elif method is Method.HEAD_COUNT:
        if obs.points is None:
            raise ValueError(f"{method.value} needs a points payload")
        value = float(head_count(obs.points, conf_min))
    elif method in (Method.SEG_PIXELS, Method.SEG_RATIO):
        if obs.mask is None:
            raise ValueError(f"{method.value} needs a mask payload")
        if aoi is None:
            raise ValueError(f"{method.value} needs the camera AOI")
        pixels, ratio = seg_features(obs.mask, aoi)
        if method is Method.SEG_PIXELS:
            value = float(pixels)
        elif aoi_relative_ratio:
            value = seg_ratio_aoi(obs.mask, aoi)
        else:
            value = ratio
    elif method is Method.SEG_CALIBRATED:
        if obs.mask is None:
            raise ValueError(f"{method.value} needs a mask payload")
        if weight_map is None:
            raise ValueError(f"{method.value} needs the camera weight map")
        mask = obs.mask
        if aoi is not None:
            mask = GridMask(mask.rows, mask.cols, mask.bits & aoi.bits)
        pooled = pool(mask, weight_map.p, weight_map.q, PoolMode(weight_map.pool_mode))
        value = estimate_occupancy(pooled, weight_map, clamp_nonnegative)
    elif method is Method.CLASS_LEVEL:
        if obs.class_logits is None:
            raise ValueError(f"{method.value} needs a logits payload")
        value = float(class_level_from_logits(obs.class_logits))
    else:
        raise ValueError(f"unknown method {method!r}")
    return FrameFeature(obs.camera, obs.event_id, obs.offset_s, method, value)


# ---------------------------------------------------------------------------
# Feature dump CSV


def write_features_csv(features: Iterable[FrameFeature]) -> str:
    lines = ["event_id,camera,offset_s,method,value"]
    for f in sorted(features, key=lambda f: (f.event_id, f.camera, f.method.value, f.offset_s)):
        lines.append(
            f"{f.event_id},{f.camera},{f.offset_s},{f.method.value},{format_number(f.value)}"
        )
    return "\n".join(lines) + "\n"


def read_features_csv(text: str) -> list[FrameFeature]:
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise FormatError("row 1: missing header") from None
    if [h.strip() for h in header] != ["event_id", "camera", "offset_s", "method", "value"]:
        raise FormatError(
            f"row 1: expected header event_id,camera,offset_s,method,value, got {header}"
        )
    out = []
    for rowno, row in enumerate(reader, start=2):
        if not row:
            continue
        try:
            out.append(
                FrameFeature(row[1], row[0], int(row[2]), Method(row[3]), float(row[4]))
            )
        except (IndexError, ValueError) as exc:
            raise FormatError(f"row {rowno}: {exc}") from None
    return out
