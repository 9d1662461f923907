"""Core data types shared by the whole pipeline.

Everything here is immutable after construction and carries its own
validation; no I/O and no algorithms beyond constructors, `bin_index`
and `crowd_level`.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from datetime import datetime, tzinfo
from typing import Optional, Sequence

import numpy as np

BINS_PER_DAY = 96
BINS_PER_WEEK = 672


class CrowdLevel(enum.IntEnum):
    """Ordinal crowding class; total order EMPTY < LOW < MEDIUM < HIGH."""

    EMPTY = 0
    LOW = 1
    MEDIUM = 2
    HIGH = 3


@dataclass(frozen=True, eq=False)
class GridMask:
    """Binary person/background raster, one value per pixel, row-major."""

    rows: int
    cols: int
    bits: np.ndarray

    def __post_init__(self):
        if self.rows <= 0 or self.cols <= 0:
            raise ValueError(f"mask dimensions must be positive, got {self.rows}x{self.cols}")
        bits = np.ascontiguousarray(self.bits, dtype=np.uint8)
        if bits.size != self.rows * self.cols:
            raise ValueError(
                f"bit array has {bits.size} values, expected {self.rows * self.cols}"
            )
        bits = bits.reshape(self.rows, self.cols)
        if bits.max(initial=0) > 1:
            raise ValueError("mask values must be 0 or 1")
        object.__setattr__(self, "bits", bits)
        self.bits.setflags(write=False)

    @classmethod
    def from_array(cls, arr) -> "GridMask":
        arr = np.asarray(arr)
        return cls(arr.shape[0], arr.shape[1], (arr != 0).astype(np.uint8))

    def to_packed(self) -> bytes:
        """Pack to one bit per pixel (row-major, big-endian within bytes)."""
        return np.packbits(self.bits.ravel()).tobytes()

    @classmethod
    def from_packed(cls, rows: int, cols: int, data: bytes) -> "GridMask":
        bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8), count=rows * cols)
        return cls(rows, cols, bits)

    def pixel_count(self) -> int:
        return int(self.bits.sum())

    def __eq__(self, other) -> bool:
        if not isinstance(other, GridMask):
            return NotImplemented
        return (
            self.rows == other.rows
            and self.cols == other.cols
            and np.array_equal(self.bits, other.bits)
        )


@dataclass(frozen=True, eq=False)
class PooledMap:
    """Block-reduced segmentation map; values are per-block activations in [0, 1]."""

    prows: int
    pcols: int
    values: np.ndarray

    def __post_init__(self):
        if self.prows <= 0 or self.pcols <= 0:
            raise ValueError(f"pooled dimensions must be positive, got {self.prows}x{self.pcols}")
        values = np.ascontiguousarray(self.values, dtype=np.float64)
        if values.size != self.prows * self.pcols:
            raise ValueError(
                f"pooled map has {values.size} values, expected {self.prows * self.pcols}"
            )
        values = values.reshape(self.prows, self.pcols)
        if not np.all(np.isfinite(values)):
            raise ValueError("pooled map values must be finite")
        if values.min(initial=0.0) < 0.0 or values.max(initial=0.0) > 1.0:
            raise ValueError("pooled map values must lie in [0, 1]")
        object.__setattr__(self, "values", values)
        self.values.setflags(write=False)

    def __eq__(self, other) -> bool:
        if not isinstance(other, PooledMap):
            return NotImplemented
        return (
            self.prows == other.prows
            and self.pcols == other.pcols
            and np.array_equal(self.values, other.values)
        )


@dataclass(frozen=True, eq=False)
class WeightMap:
    """Learned per-camera weight matrix over pooled blocks.

    `p`/`q` are the pooling block sizes (pixels) the map was fit at and
    `lam` the ridge strength, kept so the map is self-describing on disk.
    """

    camera: str
    prows: int
    pcols: int
    p: int
    q: int
    lam: float
    pool_mode: str
    values: np.ndarray

    def __post_init__(self):
        if not self.camera or any(c.isspace() for c in self.camera):
            raise ValueError(f"camera id must be non-empty without whitespace: {self.camera!r}")
        if self.p < 1 or self.q < 1:
            raise ValueError("pooling block sizes must be >= 1")
        if not (self.lam >= 0.0):
            raise ValueError(f"lambda must be nonnegative, got {self.lam}")
        if self.pool_mode not in ("max", "mean"):
            raise ValueError(f"pool_mode must be 'max' or 'mean', got {self.pool_mode!r}")
        values = np.ascontiguousarray(self.values, dtype=np.float64)
        if values.size != self.prows * self.pcols:
            raise ValueError(
                f"weight map has {values.size} values, expected {self.prows * self.pcols}"
            )
        if not np.all(np.isfinite(values)):
            raise ValueError("weight map values must be finite")
        object.__setattr__(self, "values", values.reshape(self.prows, self.pcols))
        self.values.setflags(write=False)

    def __eq__(self, other) -> bool:
        if not isinstance(other, WeightMap):
            return NotImplemented
        return (
            (self.camera, self.prows, self.pcols, self.p, self.q, self.lam, self.pool_mode)
            == (other.camera, other.prows, other.pcols, other.p, other.q, other.lam, other.pool_mode)
            and np.array_equal(self.values, other.values)
        )


@dataclass(frozen=True)
class DetectionBox:
    """One detection: pixel-space center, extents, confidence and class id."""

    cx: float
    cy: float
    w: float
    h: float
    conf: float
    class_id: int

    def __post_init__(self):
        if not (0.0 <= self.conf <= 1.0):
            raise ValueError(f"confidence must lie in [0, 1], got {self.conf}")
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box extents must be positive, got w={self.w}, h={self.h}")
        if self.class_id < 0:
            raise ValueError(f"class id must be nonnegative, got {self.class_id}")


@dataclass(frozen=True)
class HeadPoint:
    """One localized head with confidence."""

    x: float
    y: float
    conf: float

    def __post_init__(self):
        if not (0.0 <= self.conf <= 1.0):
            raise ValueError(f"confidence must lie in [0, 1], got {self.conf}")


VALID_OFFSETS = (-5, 0, 5)


@dataclass(frozen=True, eq=False)
class FrameObservation:
    """One CV output for one frame of one camera around peak crowding.

    Exactly one payload kind is present: a segmentation mask, a list of
    detection boxes, a list of head points, or 4 class logits ordered
    EMPTY, LOW, MEDIUM, HIGH.
    """

    camera: str
    event_id: str
    offset_s: int
    mask: Optional[GridMask] = None
    detections: Optional[tuple] = None
    points: Optional[tuple] = None
    class_logits: Optional[tuple] = None

    def __post_init__(self):
        if self.offset_s not in VALID_OFFSETS:
            raise ValueError(f"offset_s must be one of {VALID_OFFSETS}, got {self.offset_s}")
        payloads = [
            p for p in (self.mask, self.detections, self.points, self.class_logits)
            if p is not None
        ]
        if len(payloads) != 1:
            raise ValueError(
                f"exactly one payload kind required, got {len(payloads)} "
                f"for ({self.camera}, {self.event_id}, {self.offset_s})"
            )
        if self.detections is not None:
            object.__setattr__(self, "detections", tuple(self.detections))
        if self.points is not None:
            object.__setattr__(self, "points", tuple(self.points))
        if self.class_logits is not None:
            logits = tuple(float(v) for v in self.class_logits)
            if len(logits) != 4:
                raise ValueError(f"expected 4 class logits, got {len(logits)}")
            if not all(np.isfinite(v) for v in logits):
                raise ValueError("class logits must be finite")
            object.__setattr__(self, "class_logits", logits)

    @property
    def payload_kind(self) -> str:
        if self.mask is not None:
            return "mask"
        if self.detections is not None:
            return "boxes"
        if self.points is not None:
            return "points"
        return "logits"


@dataclass(frozen=True, eq=False)
class ArrivalEvent:
    """One train arrival with its ground-truth occupancy and captured frames.

    Up to 3 frames (offsets -5/0/+5) per camera and payload kind; a
    camera typically contributes several payload kinds for the same
    physical frame, each as its own observation.
    """

    event_id: str
    platform: str
    arrival_time: datetime
    occupancy: float
    frames: tuple = ()

    def __post_init__(self):
        if self.occupancy < 0:
            raise ValueError(f"occupancy must be nonnegative, got {self.occupancy}")
        if self.arrival_time.tzinfo is None:
            raise ValueError(f"arrival_time must carry a timezone: {self.arrival_time}")
        frames = tuple(self.frames)
        seen = set()
        for obs in frames:
            if obs.event_id != self.event_id:
                raise ValueError(
                    f"frame references event {obs.event_id!r}, expected {self.event_id!r}"
                )
            key = (obs.camera, obs.payload_kind, obs.offset_s)
            if key in seen:
                raise ValueError(f"duplicate frame {key} in event {self.event_id}")
            seen.add(key)
        object.__setattr__(self, "frames", frames)

    def frames_for(self, camera: str, kind: Optional[str] = None) -> tuple:
        return tuple(
            f for f in self.frames
            if f.camera == camera and (kind is None or f.payload_kind == kind)
        )


@dataclass(frozen=True)
class CrowdLevelScheme:
    """Per-platform occupancy thresholds at the 50th/75th/98th percentiles."""

    platform: str
    t50: float
    t75: float
    t98: float

    def __post_init__(self):
        if not (0.0 <= self.t50 <= self.t75 <= self.t98):
            raise ValueError(
                f"thresholds must satisfy 0 <= t50 <= t75 <= t98, "
                f"got ({self.t50}, {self.t75}, {self.t98})"
            )


@dataclass(frozen=True, eq=False)
class WeeklyBinStats:
    """Historical mean/std of occupancy for each of the 672 weekly 15-minute bins."""

    platform: str
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        mu = np.ascontiguousarray(self.mu, dtype=np.float64)
        sigma = np.ascontiguousarray(self.sigma, dtype=np.float64)
        if mu.shape != (BINS_PER_WEEK,) or sigma.shape != (BINS_PER_WEEK,):
            raise ValueError(
                f"weekly stats need exactly {BINS_PER_WEEK} entries, "
                f"got {mu.size} mu / {sigma.size} sigma"
            )
        if mu.min(initial=0.0) < 0 or sigma.min(initial=0.0) < 0:
            raise ValueError("mu and sigma must be nonnegative")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)
        self.mu.setflags(write=False)
        self.sigma.setflags(write=False)

    @classmethod
    def from_records(cls, platform: str, records: Sequence[tuple]) -> "WeeklyBinStats":
        """Build from (bin_index, mu, sigma) records covering 0..671 exactly once."""
        if len(records) != BINS_PER_WEEK:
            raise ValueError(
                f"platform {platform}: expected {BINS_PER_WEEK} records, got {len(records)}"
            )
        mu = np.full(BINS_PER_WEEK, np.nan)
        sigma = np.full(BINS_PER_WEEK, np.nan)
        for idx, m, s in records:
            if not (0 <= idx < BINS_PER_WEEK):
                raise ValueError(f"bin_index {idx} out of range 0..{BINS_PER_WEEK - 1}")
            if not np.isnan(mu[idx]):
                raise ValueError(f"duplicate bin_index {idx} for platform {platform}")
            mu[idx] = m
            sigma[idx] = s
        return cls(platform, mu, sigma)


@dataclass(frozen=True, eq=False)
class PlatformConfig:
    """Camera inventory and per-camera area-of-interest masks for one platform."""

    platform: str
    cameras: tuple
    aoi: dict

    def __post_init__(self):
        object.__setattr__(self, "cameras", tuple(self.cameras))
        unknown = set(self.aoi) - set(self.cameras)
        if unknown:
            raise ValueError(f"AOI masks for unknown cameras: {sorted(unknown)}")


def bin_index(t: datetime, tz: tzinfo) -> int:
    """Weekly 15-minute bin of a timestamp, 0..671, Monday 00:00 = 0 in `tz`."""
    if t.tzinfo is None:
        raise ValueError(f"timestamp must carry a timezone: {t}")
    local = t.astimezone(tz)
    return local.weekday() * BINS_PER_DAY + local.hour * 4 + local.minute // 15


def crowd_level(occupancy: float, scheme: CrowdLevelScheme) -> CrowdLevel:
    """Classify an occupancy against a scheme; upper bounds are closed."""
    if occupancy < 0:
        raise ValueError(f"occupancy must be nonnegative, got {occupancy}")
    if occupancy <= scheme.t50:
        return CrowdLevel.EMPTY
    if occupancy <= scheme.t75:
        return CrowdLevel.LOW
    if occupancy <= scheme.t98:
        return CrowdLevel.MEDIUM
    return CrowdLevel.HIGH
