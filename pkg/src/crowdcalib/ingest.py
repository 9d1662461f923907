"""File formats and dataset assembly.

Masks travel as PGM (P5 binary or P2 ASCII, nonzero = person); detector,
head-point and classifier outputs as JSON Lines; ground truth and weekly
bin statistics as CSV. `apply_aoi` restricts raw observations to the
per-camera area of interest.
"""

from __future__ import annotations

import csv
import io
import json
import warnings
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .domain import (
    BINS_PER_WEEK,
    ArrivalEvent,
    CrowdLevelScheme,
    DetectionBox,
    FrameObservation,
    GridMask,
    HeadPoint,
    PlatformConfig,
    VALID_OFFSETS,
    WeeklyBinStats,
)


class FormatError(ValueError):
    """Malformed external data; message carries byte offset or line/row number."""


OFFSET_NAMES = {-5: "m5", 0: "0", 5: "p5"}
OFFSET_VALUES = {v: k for k, v in OFFSET_NAMES.items()}


# ---------------------------------------------------------------------------
# PGM masks


def _next_pgm_token(data: bytes, pos: int) -> tuple[bytes, int]:
    """Return the next header token and the position just past it.

    Skips whitespace and `#` comments, both legal anywhere in a PNM header.
    """
    n = len(data)
    while pos < n:
        c = data[pos]
        if c in b"#":
            while pos < n and data[pos] not in b"\r\n":
                pos += 1
        elif c in b" \t\r\n\x0b\x0c":
            pos += 1
        else:
            break
    if pos >= n:
        raise FormatError(f"unexpected end of PGM header at byte {pos}")
    start = pos
    while pos < n and data[pos] not in b" \t\r\n\x0b\x0c#":
        pos += 1
    return data[start:pos], pos


def _pgm_int(data: bytes, pos: int, what: str) -> tuple[int, int]:
    tok, end = _next_pgm_token(data, pos)
    try:
        return int(tok), end
    except ValueError:
        raise FormatError(f"invalid {what} {tok!r} at byte {pos}") from None


def read_mask_pgm(data: bytes) -> GridMask:
    """Parse a PGM (P5 or P2) into a binary mask; any nonzero pixel is person."""
    magic, pos = _next_pgm_token(data, 0)
    if magic not in (b"P5", b"P2"):
        raise FormatError(f"not a PGM: magic {magic!r} at byte 0")
    width, pos = _pgm_int(data, pos, "width")
    height, pos = _pgm_int(data, pos, "height")
    maxval, pos = _pgm_int(data, pos, "maxval")
    if width <= 0 or height <= 0:
        raise FormatError(f"invalid dimensions {width}x{height} at byte {pos}")
    if maxval <= 0 or maxval > 65535:
        raise FormatError(f"invalid maxval {maxval} at byte {pos}")

    npix = width * height
    if magic == b"P5":
        # exactly one whitespace byte separates maxval from the payload
        if pos >= len(data) or data[pos] not in b" \t\r\n\x0b\x0c":
            raise FormatError(f"missing whitespace before P5 payload at byte {pos}")
        pos += 1
        bytes_per = 1 if maxval < 256 else 2
        need = npix * bytes_per
        payload = data[pos:pos + need]
        if len(payload) < need:
            raise FormatError(
                f"truncated P5 payload at byte {pos + len(payload)}: "
                f"have {len(payload)} bytes, need {need}"
            )
        if len(data) > pos + need:
            raise FormatError(f"trailing data after P5 payload at byte {pos + need}")
        dtype = np.uint8 if bytes_per == 1 else np.dtype(">u2")
        pixels = np.frombuffer(payload, dtype=dtype, count=npix)
    else:
        values = []
        while True:
            try:
                tok, pos = _next_pgm_token(data, pos)
            except FormatError:
                break
            try:
                values.append(int(tok))
            except ValueError:
                raise FormatError(f"invalid P2 pixel {tok!r} at byte {pos}") from None
            if len(values) > npix:
                raise FormatError(f"trailing data after P2 payload at byte {pos}")
        if len(values) < npix:
            raise FormatError(
                f"truncated P2 payload at byte {len(data)}: have {len(values)} "
                f"pixels, need {npix}"
            )
        pixels = np.array(values)
    if pixels.max(initial=0) > maxval:
        raise FormatError(f"pixel value exceeds maxval {maxval}")
    return GridMask(height, width, (pixels != 0).astype(np.uint8))


def write_mask_pgm(mask: GridMask) -> bytes:
    """Serialize a mask as binary PGM (P5, maxval 255, person = 255)."""
    header = f"P5\n{mask.cols} {mask.rows}\n255\n".encode("ascii")
    return header + (mask.bits * np.uint8(255)).tobytes()


# ---------------------------------------------------------------------------
# Detections / points / logits JSONL


def _parse_obs_record(rec: dict, where: str) -> FrameObservation:
    for key in ("camera", "event_id", "offset_s"):
        if key not in rec:
            raise FormatError(f"{where}: missing required field {key!r}")
    offset = rec["offset_s"]
    if offset not in VALID_OFFSETS:
        raise FormatError(f"{where}: offset_s must be one of {VALID_OFFSETS}, got {offset!r}")
    payload_keys = [k for k in ("boxes", "points", "class_logits") if k in rec]
    if len(payload_keys) != 1:
        raise FormatError(
            f"{where}: exactly one of boxes/points/class_logits required, "
            f"got {payload_keys or 'none'}"
        )
    kind = payload_keys[0]
    try:
        if kind == "boxes":
            boxes = tuple(
                DetectionBox(b["cx"], b["cy"], b["w"], b["h"], b["conf"], b["class_id"])
                for b in rec["boxes"]
            )
            return FrameObservation(rec["camera"], rec["event_id"], offset, detections=boxes)
        if kind == "points":
            points = tuple(HeadPoint(p["x"], p["y"], p["conf"]) for p in rec["points"])
            return FrameObservation(rec["camera"], rec["event_id"], offset, points=points)
        return FrameObservation(
            rec["camera"], rec["event_id"], offset, class_logits=rec["class_logits"]
        )
    except KeyError as exc:
        raise FormatError(f"{where}: missing field {exc} in {kind} entry") from None
    except (TypeError, ValueError) as exc:
        raise FormatError(f"{where}: {exc}") from None


def read_detections_jsonl(lines: Iterable[str]) -> list[FrameObservation]:
    """Parse one FrameObservation per JSONL line; unknown fields are ignored."""
    out = []
    for lineno, line in enumerate(lines, start=1):
        line = line.strip()
        if not line:
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"line {lineno}: invalid JSON ({exc.msg})") from None
        if not isinstance(rec, dict):
            raise FormatError(f"line {lineno}: expected a JSON object")
        out.append(_parse_obs_record(rec, f"line {lineno}"))
    return out


def write_detections_jsonl(observations: Iterable[FrameObservation]) -> str:
    rows = []
    for obs in observations:
        rec: dict = {"camera": obs.camera, "event_id": obs.event_id, "offset_s": obs.offset_s}
        if obs.detections is not None:
            rec["boxes"] = [
                {"cx": b.cx, "cy": b.cy, "w": b.w, "h": b.h, "conf": b.conf,
                 "class_id": b.class_id}
                for b in obs.detections
            ]
        elif obs.points is not None:
            rec["points"] = [{"x": p.x, "y": p.y, "conf": p.conf} for p in obs.points]
        elif obs.class_logits is not None:
            rec["class_logits"] = list(obs.class_logits)
        else:
            raise ValueError("mask observations are stored as PGM files, not JSONL")
        rows.append(json.dumps(rec, sort_keys=True))
    return "\n".join(rows) + ("\n" if rows else "")


# ---------------------------------------------------------------------------
# CSV ground truth and weekly stats


def parse_rfc3339(text: str) -> datetime:
    t = datetime.fromisoformat(text.strip().replace("Z", "+00:00"))
    if t.tzinfo is None:
        raise ValueError(f"timestamp lacks a timezone offset: {text!r}")
    return t


@dataclass(frozen=True)
class OccupancyRecord:
    platform: str
    arrival_time: datetime
    occupancy: float


def read_occupancy_csv(text: str) -> list[OccupancyRecord]:
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise FormatError("row 1: missing header") from None
    if [h.strip() for h in header] != ["platform", "arrival_time", "occupancy"]:
        raise FormatError(f"row 1: expected header platform,arrival_time,occupancy, got {header}")
    records = []
    seen = set()
    for rowno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != 3:
            raise FormatError(f"row {rowno}: expected 3 columns, got {len(row)}")
        platform, ts, occ = row
        try:
            arrival = parse_rfc3339(ts)
        except ValueError as exc:
            raise FormatError(f"row {rowno}: {exc}") from None
        try:
            occupancy = float(occ)
        except ValueError:
            raise FormatError(f"row {rowno}: invalid occupancy {occ!r}") from None
        if not np.isfinite(occupancy) or occupancy < 0:
            raise FormatError(f"row {rowno}: occupancy must be finite and >= 0, got {occ}")
        key = (platform, arrival)
        if key in seen:
            raise FormatError(
                f"row {rowno}: duplicate (platform, arrival_time) = "
                f"({platform}, {arrival.isoformat()}) is ambiguous"
            )
        seen.add(key)
        records.append(OccupancyRecord(platform, arrival, occupancy))
    return records


def format_number(v: float) -> str:
    """Canonical decimal form: integral floats without exponent or trailing .0."""
    f = float(v)
    if f == int(f) and abs(f) < 1e16:
        return str(int(f))
    return repr(f)


def write_occupancy_csv(records: Iterable[OccupancyRecord]) -> str:
    lines = ["platform,arrival_time,occupancy"]
    for r in records:
        lines.append(f"{r.platform},{r.arrival_time.isoformat()},{format_number(r.occupancy)}")
    return "\n".join(lines) + "\n"


def read_bin_stats_csv(text: str) -> dict[str, WeeklyBinStats]:
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise FormatError("row 1: missing header") from None
    if [h.strip() for h in header] != ["platform", "bin_index", "mu", "sigma"]:
        raise FormatError(f"row 1: expected header platform,bin_index,mu,sigma, got {header}")
    rows_by_platform: dict[str, list] = {}
    for rowno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != 4:
            raise FormatError(f"row {rowno}: expected 4 columns, got {len(row)}")
        platform, idx, mu, sigma = row
        try:
            rows_by_platform.setdefault(platform, []).append((int(idx), float(mu), float(sigma)))
        except ValueError as exc:
            raise FormatError(f"row {rowno}: {exc}") from None
    out = {}
    for platform, rows in rows_by_platform.items():
        try:
            out[platform] = WeeklyBinStats.from_records(platform, rows)
        except ValueError as exc:
            raise FormatError(str(exc)) from None
    return out


def write_bin_stats_csv(stats: Iterable[WeeklyBinStats]) -> str:
    lines = ["platform,bin_index,mu,sigma"]
    for s in stats:
        for b in range(BINS_PER_WEEK):
            lines.append(
                f"{s.platform},{b},{format_number(s.mu[b])},{format_number(s.sigma[b])}"
            )
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Area-of-interest masking


def _inside_aoi(x: float, y: float, aoi: GridMask) -> Optional[bool]:
    """AOI membership of a pixel-space point; None when outside the image."""
    if not (0.0 <= x < aoi.cols and 0.0 <= y < aoi.rows):
        return None
    # clamp the rounded index back into bounds (x in (cols-1, cols) rounds up)
    ix = min(int(round(x)), aoi.cols - 1)
    iy = min(int(round(y)), aoi.rows - 1)
    return bool(aoi.bits[iy, ix])


def apply_aoi(obs: FrameObservation, aoi: GridMask) -> FrameObservation:
    """Restrict one observation to the area of interest.

    Masks are ANDed with the AOI; boxes and points survive iff their
    center lies on an AOI pixel. Logits pass through unchanged.
    Out-of-image centers are dropped and counted in a single warning.
    """
    if obs.mask is not None:
        if (obs.mask.rows, obs.mask.cols) != (aoi.rows, aoi.cols):
            raise ValueError(
                f"mask is {obs.mask.rows}x{obs.mask.cols} but AOI is {aoi.rows}x{aoi.cols}"
            )
        bits = obs.mask.bits & aoi.bits
        return FrameObservation(
            obs.camera, obs.event_id, obs.offset_s,
            mask=GridMask(aoi.rows, aoi.cols, bits),
        )
    if obs.detections is not None:
        kept, dropped = [], 0
        for box in obs.detections:
            inside = _inside_aoi(box.cx, box.cy, aoi)
            if inside is None:
                dropped += 1
            elif inside:
                kept.append(box)
        if dropped:
            warnings.warn(
                f"{dropped} detection(s) outside the image dropped "
                f"({obs.camera}, {obs.event_id}, {obs.offset_s})"
            )
        return FrameObservation(obs.camera, obs.event_id, obs.offset_s, detections=tuple(kept))
    if obs.points is not None:
        kept, dropped = [], 0
        for pt in obs.points:
            inside = _inside_aoi(pt.x, pt.y, aoi)
            if inside is None:
                dropped += 1
            elif inside:
                kept.append(pt)
        if dropped:
            warnings.warn(
                f"{dropped} head point(s) outside the image dropped "
                f"({obs.camera}, {obs.event_id}, {obs.offset_s})"
            )
        return FrameObservation(obs.camera, obs.event_id, obs.offset_s, points=tuple(kept))
    return obs


# ---------------------------------------------------------------------------
# Dataset assembly


@dataclass
class Dataset:
    """One platform's worth of events plus optional labeling/eval inputs."""

    platform_config: PlatformConfig
    events: list[ArrivalEvent] = field(default_factory=list)
    scheme: Optional[CrowdLevelScheme] = None
    bin_stats: Optional[WeeklyBinStats] = None

    def __post_init__(self):
        cameras = set(self.platform_config.cameras)
        ids = set()
        for ev in self.events:
            if ev.event_id in ids:
                raise ValueError(f"duplicate event_id {ev.event_id}")
            ids.add(ev.event_id)
            for obs in ev.frames:
                if obs.camera not in cameras:
                    raise ValueError(
                        f"event {ev.event_id} references unknown camera {obs.camera!r}"
                    )

    def event_by_id(self, event_id: str) -> ArrivalEvent:
        for ev in self.events:
            if ev.event_id == event_id:
                return ev
        raise KeyError(event_id)


def event_id_for(platform: str, arrival_time: datetime) -> str:
    """Canonical event id joining ground truth, mask paths and JSONL records."""
    return f"{platform}_{arrival_time:%Y%m%dT%H%M%S%z}"


def load_dataset(
    data_dir: str | Path,
    platform: Optional[str] = None,
    mask_aoi: bool = True,
) -> Dataset:
    """Assemble a Dataset from the on-disk layout.

    Expects `occupancy.csv`, `aoi/<camera>.pgm`, mask files under
    `<camera>/<event_id>/<offset>.pgm` with offset in {m5, 0, p5},
    optionally `detections.jsonl` and `stats.csv`. With `mask_aoi`,
    observations are AOI-restricted as they are loaded.
    """
    root = Path(data_dir)
    occ_path = root / "occupancy.csv"
    if not occ_path.is_file():
        raise FormatError(f"missing {occ_path}")
    records = read_occupancy_csv(occ_path.read_text())
    platforms = sorted({r.platform for r in records})
    if platform is None:
        if len(platforms) != 1:
            raise FormatError(
                f"occupancy.csv covers platforms {platforms}; pass platform= to pick one"
            )
        platform = platforms[0]
    records = [r for r in records if r.platform == platform]
    if not records:
        raise FormatError(f"no ground-truth rows for platform {platform!r}")

    aoi_dir = root / "aoi"
    if not aoi_dir.is_dir():
        raise FormatError(f"missing AOI directory {aoi_dir}")
    aoi = {}
    for path in sorted(aoi_dir.glob("*.pgm")):
        try:
            aoi[path.stem] = read_mask_pgm(path.read_bytes())
        except FormatError as exc:
            raise FormatError(f"{path}: {exc}") from None
    if not aoi:
        raise FormatError(f"no AOI masks in {aoi_dir}")
    cameras = tuple(sorted(aoi))
    config = PlatformConfig(platform, cameras, aoi)

    frames_by_event: dict[str, list[FrameObservation]] = {}
    known_ids = {event_id_for(r.platform, r.arrival_time) for r in records}

    for camera in cameras:
        cam_dir = root / camera
        if not cam_dir.is_dir():
            continue
        for event_dir in sorted(cam_dir.iterdir()):
            if not event_dir.is_dir():
                continue
            event_id = event_dir.name
            if event_id not in known_ids:
                raise FormatError(
                    f"{event_dir}: event id not present in occupancy.csv for {platform}"
                )
            for mask_path in sorted(event_dir.glob("*.pgm")):
                if mask_path.stem not in OFFSET_VALUES:
                    raise FormatError(
                        f"{mask_path}: offset must be one of {sorted(OFFSET_VALUES)}"
                    )
                try:
                    mask = read_mask_pgm(mask_path.read_bytes())
                except FormatError as exc:
                    raise FormatError(f"{mask_path}: {exc}") from None
                obs = FrameObservation(
                    camera, event_id, OFFSET_VALUES[mask_path.stem], mask=mask
                )
                if mask_aoi:
                    obs = apply_aoi(obs, aoi[camera])
                frames_by_event.setdefault(event_id, []).append(obs)

    det_path = root / "detections.jsonl"
    if det_path.is_file():
        for obs in read_detections_jsonl(det_path.read_text().splitlines()):
            if obs.camera not in aoi:
                raise FormatError(
                    f"detections.jsonl references unknown camera {obs.camera!r}"
                )
            if obs.event_id not in known_ids:
                raise FormatError(
                    f"detections.jsonl references unknown event {obs.event_id!r}"
                )
            if mask_aoi:
                obs = apply_aoi(obs, aoi[obs.camera])
            frames_by_event.setdefault(obs.event_id, []).append(obs)

    events = []
    for r in sorted(records, key=lambda r: r.arrival_time):
        eid = event_id_for(r.platform, r.arrival_time)
        events.append(
            ArrivalEvent(eid, r.platform, r.arrival_time, r.occupancy,
                         tuple(frames_by_event.get(eid, ())))
        )

    bin_stats = None
    stats_path = root / "stats.csv"
    if stats_path.is_file():
        stats = read_bin_stats_csv(stats_path.read_text())
        bin_stats = stats.get(platform)

    return Dataset(config, events, bin_stats=bin_stats)


def write_dataset_files(
    out_dir: str | Path,
    config: PlatformConfig,
    events: Iterable[ArrivalEvent],
    bin_stats: Optional[WeeklyBinStats] = None,
) -> None:
    """Write the on-disk layout `load_dataset` reads."""
    root = Path(out_dir)
    (root / "aoi").mkdir(parents=True, exist_ok=True)
    for camera, mask in config.aoi.items():
        (root / "aoi" / f"{camera}.pgm").write_bytes(write_mask_pgm(mask))

    records = []
    jsonl_obs = []
    for ev in events:
        records.append(OccupancyRecord(ev.platform, ev.arrival_time, ev.occupancy))
        for obs in ev.frames:
            if obs.mask is not None:
                frame_dir = root / obs.camera / ev.event_id
                frame_dir.mkdir(parents=True, exist_ok=True)
                name = f"{OFFSET_NAMES[obs.offset_s]}.pgm"
                (frame_dir / name).write_bytes(write_mask_pgm(obs.mask))
            else:
                jsonl_obs.append(obs)
    (root / "occupancy.csv").write_text(write_occupancy_csv(records))
    if jsonl_obs:
        (root / "detections.jsonl").write_text(write_detections_jsonl(jsonl_obs))
    if bin_stats is not None:
        (root / "stats.csv").write_text(write_bin_stats_csv([bin_stats]))
