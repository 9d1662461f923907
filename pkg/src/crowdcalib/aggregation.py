"""Frame -> event -> 15-minute bin roll-ups.

Numeric features take the maximum over a camera's frames and the mean
over events in a bin; ordinal crowd levels take medians at both steps,
resolving even counts to the upper median.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from datetime import date, datetime, tzinfo
from typing import Iterable, Mapping, Sequence

from .domain import ArrivalEvent, BINS_PER_DAY
from .features import FrameFeature, Method, ORDINAL_METHODS
from .ingest import FormatError, format_number


@dataclass(frozen=True)
class EventFeature:
    event_id: str
    camera: str
    method: Method
    value: float


@dataclass(frozen=True)
class BinEntry:
    platform: str
    day: date
    bin_of_day: int  # 0..95 within the day
    value: float
    n_events: int

    def __post_init__(self):
        if not (0 <= self.bin_of_day < BINS_PER_DAY):
            raise ValueError(f"bin_of_day must lie in 0..95, got {self.bin_of_day}")
        if self.n_events < 1:
            raise ValueError("bins are only emitted for >= 1 event")


def upper_median(values: Sequence[float]) -> float:
    """Median resolving even-length ties upward (crowding-conservative)."""
    ordered = sorted(values)
    if not ordered:
        raise ValueError("median of empty sequence")
    return ordered[len(ordered) // 2]


def frames_to_event(features: Sequence[FrameFeature]) -> EventFeature:
    """Collapse one (event, camera, method) group of 1-3 frames."""
    if not features:
        raise ValueError("no frames to aggregate")
    first = features[0]
    key = (first.event_id, first.camera, first.method)
    for f in features:
        if (f.event_id, f.camera, f.method) != key:
            raise ValueError(f"mixed groups: {key} vs {(f.event_id, f.camera, f.method)}")
    if len(features) > 3:
        raise ValueError(f"{key}: more than 3 frames ({len(features)})")
    values = [f.value for f in features]
    if first.method in ORDINAL_METHODS:
        value = upper_median(values)
    else:
        value = max(values)
    return EventFeature(first.event_id, first.camera, first.method, value)


def events_to_bin_value(values: Sequence[EventFeature]) -> float:
    """Collapse the event values falling in one bin; empty bins are omitted
    by the caller, never zero-filled."""
    if not values:
        raise ValueError("no events in bin")
    method = values[0].method
    vals = [v.value for v in values]
    if method in ORDINAL_METHODS:
        return upper_median(vals)
    return sum(vals) / len(vals)


def ground_truth_bin_mean(events: Sequence[ArrivalEvent]) -> float:
    if not events:
        raise ValueError("no events in bin")
    return sum(ev.occupancy for ev in events) / len(events)


def group_frames(
    features: Iterable[FrameFeature],
) -> dict[tuple[str, str, Method], list[FrameFeature]]:
    groups: dict[tuple[str, str, Method], list[FrameFeature]] = {}
    for f in features:
        groups.setdefault((f.event_id, f.camera, f.method), []).append(f)
    return groups


def aggregate_events(features: Iterable[FrameFeature]) -> list[EventFeature]:
    groups = group_frames(features)
    return [frames_to_event(groups[k]) for k in sorted(groups, key=lambda k: (k[0], k[1], k[2].value))]


def day_bin_of(t: datetime, tz: tzinfo) -> tuple[date, int]:
    local = t.astimezone(tz)
    return local.date(), local.hour * 4 + local.minute // 15


def build_bin_series(
    event_values: Mapping[str, float],
    events_by_id: Mapping[str, ArrivalEvent],
    tz: tzinfo,
    method: Method,
) -> list[BinEntry]:
    """Group per-event values into calendar (date, bin-of-day) bins.

    `event_values` maps event_id to the per-event value being binned
    (an EventFeature value or a fused prediction).
    """
    bins: dict[tuple[str, date, int], list[float]] = {}
    for event_id, value in event_values.items():
        ev = events_by_id[event_id]
        day, bod = day_bin_of(ev.arrival_time, tz)
        bins.setdefault((ev.platform, day, bod), []).append(value)
    entries = []
    for (platform, day, bod) in sorted(bins):
        vals = bins[(platform, day, bod)]
        if method in ORDINAL_METHODS:
            value = upper_median(vals)
        else:
            value = sum(vals) / len(vals)
        entries.append(BinEntry(platform, day, bod, value, len(vals)))
    return entries


def write_bin_series_csv(entries: Iterable[BinEntry]) -> str:
    lines = ["platform,date,bin_of_day,value,n_events"]
    for e in entries:
        lines.append(
            f"{e.platform},{e.day.isoformat()},{e.bin_of_day},"
            f"{format_number(e.value)},{e.n_events}"
        )
    return "\n".join(lines) + "\n"


def read_bin_series_csv(text: str) -> list[BinEntry]:
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise FormatError("row 1: missing header") from None
    if [h.strip() for h in header] != ["platform", "date", "bin_of_day", "value", "n_events"]:
        raise FormatError(
            f"row 1: expected header platform,date,bin_of_day,value,n_events, got {header}"
        )
    out = []
    for rowno, row in enumerate(reader, start=2):
        if not row:
            continue
        try:
            out.append(
                BinEntry(row[0], date.fromisoformat(row[1]), int(row[2]),
                         float(row[3]), int(row[4]))
            )
        except (IndexError, ValueError) as exc:
            raise FormatError(f"row {rowno}: {exc}") from None
    return out


def write_event_features_csv(features: Iterable[EventFeature]) -> str:
    lines = ["event_id,camera,method,value"]
    for f in sorted(features, key=lambda f: (f.event_id, f.camera, f.method.value)):
        lines.append(f"{f.event_id},{f.camera},{f.method.value},{format_number(f.value)}")
    return "\n".join(lines) + "\n"


def read_event_features_csv(text: str) -> list[EventFeature]:
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise FormatError("row 1: missing header") from None
    if [h.strip() for h in header] != ["event_id", "camera", "method", "value"]:
        raise FormatError(
            f"row 1: expected header event_id,camera,method,value, got {header}"
        )
    out = []
    for rowno, row in enumerate(reader, start=2):
        if not row:
            continue
        try:
            out.append(EventFeature(row[0], row[1], Method(row[2]), float(row[3])))
        except (IndexError, ValueError) as exc:
            raise FormatError(f"row {rowno}: {exc}") from None
    return out
