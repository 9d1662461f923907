"""Crowd-level thresholds, event labeling and stratified train/test splits."""

from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .domain import ArrivalEvent, CrowdLevel, CrowdLevelScheme, crowd_level
from .ingest import FormatError, format_number


@dataclass(frozen=True)
class SplitAssignment:
    """Disjoint train/test event-id sets whose union covers all labeled events."""

    train_event_ids: frozenset
    test_event_ids: frozenset
    seed: int

    def __post_init__(self):
        overlap = self.train_event_ids & self.test_event_ids
        if overlap:
            raise ValueError(f"events in both splits: {sorted(overlap)[:5]}")


def fit_scheme(occupancies: Sequence[float], platform: str) -> CrowdLevelScheme:
    """Fit 50th/75th/98th percentile thresholds on the zero-excluded sample.

    Percentiles use linear interpolation between closest ranks. At least
    two strictly positive occupancies are required.
    """
    values = np.asarray(list(occupancies), dtype=np.float64)
    if values.size and values.min() < 0:
        raise ValueError("occupancies must be nonnegative")
    positive = values[values > 0]
    if positive.size < 2:
        raise ValueError(
            f"platform {platform}: need at least 2 strictly positive occupancies "
            f"to fit a scheme, got {positive.size}"
        )
    t50, t75, t98 = np.percentile(positive, [50, 75, 98])
    return CrowdLevelScheme(platform, float(t50), float(t75), float(t98))


def label_events(
    events: Iterable[ArrivalEvent], scheme: CrowdLevelScheme
) -> dict[str, CrowdLevel]:
    labels = {}
    for ev in events:
        if ev.platform != scheme.platform:
            raise ValueError(
                f"event {ev.event_id} is on platform {ev.platform!r} but the "
                f"scheme is for {scheme.platform!r}"
            )
        labels[ev.event_id] = crowd_level(ev.occupancy, scheme)
    return labels


def stratified_split(
    labels: Mapping[str, CrowdLevel], ratio: float, seed: int
) -> SplitAssignment:
    """Per-class train/test split, deterministic in `seed`.

    Within each class the train share is round-half-up of ratio*count but
    never less than one event; event ids are sorted before shuffling so
    the assignment is independent of input ordering.
    """
    if not (0.0 < ratio < 1.0):
        raise ValueError(f"ratio must lie in (0, 1), got {ratio}")
    if not labels:
        raise ValueError("no labeled events to split")
    by_class: dict[CrowdLevel, list[str]] = {}
    for event_id, level in labels.items():
        by_class.setdefault(level, []).append(event_id)

    rng = np.random.default_rng(seed)
    train, test = set(), set()
    for level in sorted(by_class):
        ids = sorted(by_class[level])
        order = rng.permutation(len(ids))
        n_train = max(1, int(np.floor(ratio * len(ids) + 0.5)))
        if n_train >= len(ids):
            n_train = len(ids)
            warnings.warn(
                f"class {level.name}: only {len(ids)} event(s); test side is empty"
            )
        for pos, idx in enumerate(order):
            (train if pos < n_train else test).add(ids[idx])
    return SplitAssignment(frozenset(train), frozenset(test), seed)


# ---------------------------------------------------------------------------
# CSV exports


def write_scheme_csv(schemes: Iterable[CrowdLevelScheme]) -> str:
    lines = ["platform,t50,t75,t98"]
    for s in schemes:
        lines.append(
            f"{s.platform},{format_number(s.t50)},{format_number(s.t75)},"
            f"{format_number(s.t98)}"
        )
    return "\n".join(lines) + "\n"


def read_scheme_csv(text: str) -> dict[str, CrowdLevelScheme]:
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise FormatError("row 1: missing header") from None
    if [h.strip() for h in header] != ["platform", "t50", "t75", "t98"]:
        raise FormatError(f"row 1: expected header platform,t50,t75,t98, got {header}")
    out = {}
    for rowno, row in enumerate(reader, start=2):
        if not row:
            continue
        try:
            out[row[0]] = CrowdLevelScheme(row[0], float(row[1]), float(row[2]), float(row[3]))
        except (IndexError, ValueError) as exc:
            raise FormatError(f"row {rowno}: {exc}") from None
    return out


def write_split_csv(split: SplitAssignment) -> str:
    lines = ["event_id,split"]
    for eid in sorted(split.train_event_ids):
        lines.append(f"{eid},train")
    for eid in sorted(split.test_event_ids):
        lines.append(f"{eid},test")
    return "\n".join(lines) + "\n"


def read_split_csv(text: str, seed: int = 0) -> SplitAssignment:
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise FormatError("row 1: missing header") from None
    if [h.strip() for h in header] != ["event_id", "split"]:
        raise FormatError(f"row 1: expected header event_id,split, got {header}")
    train, test = set(), set()
    for rowno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != 2 or row[1] not in ("train", "test"):
            raise FormatError(f"row {rowno}: expected '<event_id>,train|test', got {row}")
        (train if row[1] == "train" else test).add(row[0])
    return SplitAssignment(frozenset(train), frozenset(test), seed)


def write_labels_csv(labels: Mapping[str, CrowdLevel]) -> str:
    lines = ["event_id,level"]
    for eid in sorted(labels):
        lines.append(f"{eid},{labels[eid].name}")
    return "\n".join(lines) + "\n"


def read_labels_csv(text: str) -> dict[str, CrowdLevel]:
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise FormatError("row 1: missing header") from None
    if [h.strip() for h in header] != ["event_id", "level"]:
        raise FormatError(f"row 1: expected header event_id,level, got {header}")
    out = {}
    for rowno, row in enumerate(reader, start=2):
        if not row:
            continue
        try:
            out[row[0]] = CrowdLevel[row[1]]
        except (IndexError, KeyError) as exc:
            raise FormatError(f"row {rowno}: {exc}") from None
    return out
