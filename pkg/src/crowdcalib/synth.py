"""Synthetic platform scenes with known ground-truth occupancy.

Each event places elliptical person blobs uniformly inside a trapezoidal
platform polygon, with blob pixel area shrinking linearly toward the far
edge (top of the image) down to `depth_scale` times the near-edge area.
Frames are the blob unions with small per-frame jitter; boxes, head
points and class logits are derived from the same blobs. Everything is
deterministic in the seed, with per-event derived seeds so events are
independent of generation order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .domain import (
    ArrivalEvent,
    CrowdLevelScheme,
    DetectionBox,
    FrameObservation,
    GridMask,
    HeadPoint,
    PlatformConfig,
    WeeklyBinStats,
    BINS_PER_WEEK,
    bin_index,
    crowd_level,
)
from .ingest import Dataset, event_id_for, write_dataset_files
from .labeling import fit_scheme

OFFSETS_BY_COUNT = {1: (0,), 2: (-5, 0), 3: (-5, 0, 5)}
BLOB_ASPECT = 1.6  # semi-height / semi-width of a person blob


@dataclass(frozen=True)
class SynthConfig:
    rows: int = 216
    cols: int = 384
    # trapezoid vertices as (x, y), in order; default spans most of the image
    platform_polygon: tuple = ()
    depth_scale: float = 0.25
    occupancy_range: tuple = (0, 60)
    n_events: int = 50
    frames_per_event: int = 3
    seed: int = 0
    miss_rate: float = 0.0
    overlap_factor: float = 0.0
    # plumbing beyond the scene model: identifiers, timing, blob scale
    platform: str = "SYNTH-1"
    n_cameras: int = 1
    start_time: str = "2024-06-03T07:00:00+00:00"
    headway_s: int = 300
    near_person_area: Optional[float] = None
    jitter_px: int = 2

    def __post_init__(self):
        if self.rows <= 0 or self.cols <= 0:
            raise ValueError("image dimensions must be positive")
        if not self.platform_polygon:
            object.__setattr__(self, "platform_polygon", self.default_polygon(self.rows, self.cols))
        poly = tuple((float(x), float(y)) for x, y in self.platform_polygon)
        if len(poly) < 3:
            raise ValueError("platform polygon needs at least 3 vertices")
        for x, y in poly:
            if not (0 <= x < self.cols and 0 <= y < self.rows):
                raise ValueError(f"polygon vertex ({x}, {y}) outside the image")
        object.__setattr__(self, "platform_polygon", poly)
        if not (0.0 < self.depth_scale <= 1.0):
            raise ValueError(f"depth_scale must lie in (0, 1], got {self.depth_scale}")
        lo, hi = self.occupancy_range
        if lo < 0 or hi < lo:
            raise ValueError(f"invalid occupancy_range {self.occupancy_range}")
        if self.n_events < 1:
            raise ValueError("n_events must be >= 1")
        if self.frames_per_event not in OFFSETS_BY_COUNT:
            raise ValueError("frames_per_event must be 1, 2 or 3")
        if not (0.0 <= self.miss_rate < 1.0):
            raise ValueError(f"miss_rate must lie in [0, 1), got {self.miss_rate}")
        if self.overlap_factor < 0.0:
            raise ValueError(f"overlap_factor must be >= 0, got {self.overlap_factor}")
        if self.n_cameras < 1:
            raise ValueError("n_cameras must be >= 1")

    @staticmethod
    def default_polygon(rows: int, cols: int) -> tuple:
        # trapezoid: narrow far edge at the top, wide near edge at the bottom
        return (
            (cols * 0.30, rows * 0.12),
            (cols * 0.70, rows * 0.12),
            (cols * 0.95, rows * 0.92),
            (cols * 0.05, rows * 0.92),
        )

    @property
    def cameras(self) -> tuple:
        return tuple(f"cam{i + 1}" for i in range(self.n_cameras))

    @property
    def near_area(self) -> float:
        if self.near_person_area is not None:
            return float(self.near_person_area)
        return self.rows * self.cols / 1000.0

    @property
    def start(self) -> datetime:
        t = datetime.fromisoformat(self.start_time.replace("Z", "+00:00"))
        if t.tzinfo is None:
            t = t.replace(tzinfo=timezone.utc)
        return t

    @classmethod
    def from_json(cls, text: str) -> "SynthConfig":
        raw = json.loads(text)
        if "platform_polygon" in raw:
            raw["platform_polygon"] = tuple(tuple(v) for v in raw["platform_polygon"])
        if "occupancy_range" in raw:
            raw["occupancy_range"] = tuple(raw["occupancy_range"])
        try:
            return cls(**raw)
        except TypeError as exc:
            raise ValueError(f"invalid synth config: {exc}") from None

    def to_json(self) -> str:
        out = {
            "rows": self.rows, "cols": self.cols,
            "platform_polygon": [list(v) for v in self.platform_polygon],
            "depth_scale": self.depth_scale,
            "occupancy_range": list(self.occupancy_range),
            "n_events": self.n_events, "frames_per_event": self.frames_per_event,
            "seed": self.seed, "miss_rate": self.miss_rate,
            "overlap_factor": self.overlap_factor, "platform": self.platform,
            "n_cameras": self.n_cameras, "start_time": self.start_time,
            "headway_s": self.headway_s, "jitter_px": self.jitter_px,
        }
        if self.near_person_area is not None:
            out["near_person_area"] = self.near_person_area
        return json.dumps(out, indent=2) + "\n"


def rasterize_polygon(rows: int, cols: int, polygon) -> GridMask:
    """Even-odd rasterization; pixel (r, c) is tested as the point (c, r)."""
    xs = np.arange(cols, dtype=np.float64)
    ys = np.arange(rows, dtype=np.float64)
    xx, yy = np.meshgrid(xs, ys)
    inside = np.zeros((rows, cols), dtype=bool)
    x0, y0 = polygon[-1]
    for x1, y1 in polygon:
        if y0 != y1:
            cross = (y0 > yy) != (y1 > yy)
            x_at = (x1 - x0) * (yy - y0) / (y1 - y0) + x0
            inside ^= cross & (xx < x_at)
        x0, y0 = x1, y1
    return GridMask(rows, cols, inside.astype(np.uint8))


class _BlobPainter:
    """Paints elliptical blobs, caching the boolean templates by size."""

    def __init__(self):
        self._cache: dict = {}

    def template(self, a: float, b: float) -> np.ndarray:
        key = (round(a * 2) / 2, round(b * 2) / 2)
        tmpl = self._cache.get(key)
        if tmpl is None:
            a_r, b_r = max(key[0], 0.5), max(key[1], 0.5)
            ra, rb = int(np.ceil(a_r)), int(np.ceil(b_r))
            yy, xx = np.ogrid[-ra:ra + 1, -rb:rb + 1]
            tmpl = (yy / a_r) ** 2 + (xx / b_r) ** 2 <= 1.0
            self._cache[key] = tmpl
        return tmpl

    def paint(self, buf: np.ndarray, cx: float, cy: float, a: float, b: float) -> None:
        tmpl = self.template(a, b)
        th, tw = tmpl.shape
        r0 = int(round(cy)) - th // 2
        c0 = int(round(cx)) - tw // 2
        rr0, cc0 = max(r0, 0), max(c0, 0)
        rr1, cc1 = min(r0 + th, buf.shape[0]), min(c0 + tw, buf.shape[1])
        if rr1 <= rr0 or cc1 <= cc0:
            return
        sub = buf[rr0:rr1, cc0:cc1]
        np.maximum(sub, tmpl[rr0 - r0:rr1 - r0, cc0 - c0:cc1 - c0], out=sub)


def _triangulate(polygon) -> tuple[np.ndarray, np.ndarray]:
    """Fan triangulation with triangle areas, for uniform interior sampling."""
    pts = np.asarray(polygon, dtype=np.float64)
    tris = []
    areas = []
    for i in range(1, len(pts) - 1):
        a, b, c = pts[0], pts[i], pts[i + 1]
        area = 0.5 * abs((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]))
        tris.append((a, b, c))
        areas.append(area)
    return np.array(tris), np.array(areas)


def _sample_in_polygon(rng, tris, areas, aoi_bits: np.ndarray, count: int) -> np.ndarray:
    """Uniform points inside the polygon whose rounded pixel is on the AOI."""
    out = np.empty((count, 2))
    filled = 0
    weights = areas / areas.sum()
    rows, cols = aoi_bits.shape
    while filled < count:
        need = count - filled
        choice = rng.choice(len(tris), size=need, p=weights)
        u = rng.random(need)
        v = rng.random(need)
        su = np.sqrt(u)
        a, b, c = tris[choice, 0], tris[choice, 1], tris[choice, 2]
        pts = (1 - su)[:, None] * a + (su * (1 - v))[:, None] * b + (su * v)[:, None] * c
        ix = np.clip(np.round(pts[:, 0]).astype(int), 0, cols - 1)
        iy = np.clip(np.round(pts[:, 1]).astype(int), 0, rows - 1)
        good = aoi_bits[iy, ix] == 1
        take = pts[good][:need]
        out[filled:filled + take.shape[0]] = take
        filled += take.shape[0]
    return out


def _blob_axes(area: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    b = np.sqrt(area / (np.pi * BLOB_ASPECT))
    return BLOB_ASPECT * b, b  # (semi-height, semi-width)


def _overlap_fraction(cx, cy, area) -> np.ndarray:
    """Approximate per-blob overlapped-area fraction, treating blobs as discs."""
    k = cx.size
    if k < 2:
        return np.zeros(k)
    r = np.sqrt(area / np.pi)
    dx = cx[:, None] - cx[None, :]
    dy = cy[:, None] - cy[None, :]
    d = np.sqrt(dx * dx + dy * dy)
    rsum = r[:, None] + r[None, :]
    # crude lens-area proxy: full overlap at distance 0, none at r_i + r_j
    frac = np.clip(1.0 - d / rsum, 0.0, 1.0)
    np.fill_diagonal(frac, 0.0)
    return np.clip(frac.sum(axis=1), 0.0, 1.0)


@dataclass
class SceneGeometry:
    """Shared, config-derived geometry reused across all events."""

    config: SynthConfig
    aoi: GridMask
    tris: np.ndarray
    areas: np.ndarray
    y_top: float
    y_bottom: float

    @classmethod
    def build(cls, config: SynthConfig) -> "SceneGeometry":
        aoi = rasterize_polygon(config.rows, config.cols, config.platform_polygon)
        poly_area = aoi.pixel_count()
        if poly_area == 0:
            raise ValueError("platform polygon rasterizes to zero pixels")
        far_area = config.near_area * config.depth_scale
        if config.occupancy_range[1] * far_area > poly_area * 4:
            raise ValueError(
                f"polygon too small for requested occupancy: {poly_area} px "
                f"cannot host {config.occupancy_range[1]} blobs of ~{far_area:.0f} px"
            )
        ys = [y for _, y in config.platform_polygon]
        tris, areas = _triangulate(config.platform_polygon)
        return cls(config, aoi, tris, areas, min(ys), max(ys))

    def blob_area_at(self, y: np.ndarray) -> np.ndarray:
        depth = (y - self.y_top) / max(self.y_bottom - self.y_top, 1e-9)
        scale = self.config.depth_scale + (1.0 - self.config.depth_scale) * depth
        return self.config.near_area * scale


def _event_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(1, index)))


def _draw_occupancies(config: SynthConfig) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence(entropy=config.seed, spawn_key=(0,)))
    lo, hi = config.occupancy_range
    return rng.integers(lo, hi + 1, size=config.n_events)


def generate_scheme(config: SynthConfig) -> CrowdLevelScheme:
    """Crowd-level scheme implied by the generated occupancy distribution."""
    occ = _draw_occupancies(config)
    return fit_scheme(occ.astype(float), config.platform)


def _make_event(
    geom: SceneGeometry,
    index: int,
    occupancy: int,
    scheme: CrowdLevelScheme,
    painter: _BlobPainter,
) -> ArrivalEvent:
    config = geom.config
    rng = _event_rng(config.seed, index)
    arrival = config.start + timedelta(seconds=index * config.headway_s)
    event_id = event_id_for(config.platform, arrival)
    offsets = OFFSETS_BY_COUNT[config.frames_per_event]
    level = crowd_level(float(occupancy), scheme)

    if occupancy > 0:
        centers = _sample_in_polygon(rng, geom.tris, geom.areas, geom.aoi.bits, occupancy)
        cx, cy = centers[:, 0], centers[:, 1]
        area = geom.blob_area_at(cy)
        a, b = _blob_axes(area)
        if config.overlap_factor > 0:
            overlap = _overlap_fraction(cx, cy, area)
        else:
            overlap = np.zeros(occupancy)
        p_miss = np.clip(config.miss_rate + config.overlap_factor * overlap, 0.0, 1.0)
    else:
        cx = cy = a = b = p_miss = np.zeros(0)

    frames = []
    buf = np.zeros((config.rows, config.cols), dtype=np.uint8)
    for camera in config.cameras:
        for offset in offsets:
            # jitter blob centers per (camera, frame); fall back to the
            # un-jittered center when the jitter would leave the AOI
            if occupancy > 0 and config.jitter_px > 0:
                jx = rng.integers(-config.jitter_px, config.jitter_px + 1, size=occupancy)
                jy = rng.integers(-config.jitter_px, config.jitter_px + 1, size=occupancy)
                nx, ny = cx + jx, cy + jy
                ixs = np.clip(np.round(nx).astype(int), 0, config.cols - 1)
                iys = np.clip(np.round(ny).astype(int), 0, config.rows - 1)
                ok = geom.aoi.bits[iys, ixs] == 1
                fx = np.where(ok, nx, cx)
                fy = np.where(ok, ny, cy)
            else:
                fx, fy = cx, cy

            buf[:] = 0
            for i in range(occupancy):
                painter.paint(buf, fx[i], fy[i], a[i], b[i])
            mask = GridMask(config.rows, config.cols, buf.copy())
            frames.append(FrameObservation(camera, event_id, offset, mask=mask))

            detected = rng.random(occupancy) >= p_miss if occupancy else np.zeros(0, bool)
            boxes = tuple(
                DetectionBox(float(fx[i]), float(fy[i]), float(2 * b[i]), float(2 * a[i]),
                             float(rng.uniform(0.5, 1.0)), 0)
                for i in range(occupancy) if detected[i]
            )
            frames.append(FrameObservation(camera, event_id, offset, detections=boxes))

            points = tuple(
                HeadPoint(float(fx[i]), float(fy[i]), float(rng.uniform(0.5, 1.0)))
                for i in range(occupancy) if detected[i]
            )
            frames.append(FrameObservation(camera, event_id, offset, points=points))

            logits = 3.0 * np.eye(4)[int(level)] + rng.uniform(-1.0, 1.0, size=4)
            frames.append(FrameObservation(camera, event_id, offset, class_logits=logits))

    return ArrivalEvent(event_id, config.platform, arrival, float(occupancy), tuple(frames))


def _scheme_or_trivial(occupancies, platform: str) -> CrowdLevelScheme:
    values = [float(v) for v in occupancies]
    if sum(1 for v in values if v > 0) >= 2:
        return fit_scheme(values, platform)
    # all-zero generation: every event is EMPTY under the zero scheme
    return CrowdLevelScheme(platform, 0.0, 0.0, 0.0)


def iter_events(config: SynthConfig) -> Iterator[ArrivalEvent]:
    """Stream events one at a time; memory stays bounded by one event."""
    geom = SceneGeometry.build(config)
    occupancies = _draw_occupancies(config)
    scheme = _scheme_or_trivial(occupancies, config.platform)
    painter = _BlobPainter()
    for index, occ in enumerate(occupancies):
        yield _make_event(geom, index, int(occ), scheme, painter)


def platform_config(config: SynthConfig) -> PlatformConfig:
    geom = SceneGeometry.build(config)
    return PlatformConfig(config.platform, config.cameras,
                          {c: geom.aoi for c in config.cameras})


def weekly_stats_from_events(events, platform: str, tz) -> WeeklyBinStats:
    """Per-weekly-bin mean/std (population) of event occupancies; empty bins 0."""
    by_bin: dict[int, list[float]] = {}
    for ev in events:
        by_bin.setdefault(bin_index(ev.arrival_time, tz), []).append(ev.occupancy)
    mu = np.zeros(BINS_PER_WEEK)
    sigma = np.zeros(BINS_PER_WEEK)
    for b, vals in by_bin.items():
        arr = np.asarray(vals)
        mu[b] = arr.mean()
        sigma[b] = arr.std()
    return WeeklyBinStats(platform, mu, sigma)


def generate(config: SynthConfig) -> Dataset:
    """Materialize a full synthetic dataset (suitable for small configs)."""
    events = list(iter_events(config))
    pconf = platform_config(config)
    stats = weekly_stats_from_events(events, config.platform, config.start.tzinfo)
    scheme = _scheme_or_trivial([ev.occupancy for ev in events], config.platform)
    return Dataset(pconf, events, scheme=scheme, bin_stats=stats)


def write_synth_dataset(config: SynthConfig, out_dir: str | Path) -> None:
    """Write the exact on-disk layout the ingest module reads."""
    pconf = platform_config(config)
    events = list(iter_events(config))
    stats = weekly_stats_from_events(events, config.platform, config.start.tzinfo)
    write_dataset_files(out_dir, pconf, events, bin_stats=stats)
