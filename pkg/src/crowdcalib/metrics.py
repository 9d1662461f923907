"""Evaluation metrics over estimate/target pairs.

Covers R^2, the z-scored variant (algebraically 2*rho - 1 with population
standard deviations), MAE, the 95th-percentile absolute error, and the
weighted MAE whose weights come from weekly-bin z-scores of the target.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .domain import BINS_PER_WEEK, WeeklyBinStats
from .ingest import format_number


@dataclass(frozen=True)
class EvalPair:
    key: str
    y: float
    y_hat: float
    bin_index: Optional[int] = None

    def __post_init__(self):
        if not (np.isfinite(self.y) and np.isfinite(self.y_hat)):
            raise ValueError(f"pair {self.key}: values must be finite")
        if self.bin_index is not None and not (0 <= self.bin_index < BINS_PER_WEEK):
            raise ValueError(f"pair {self.key}: bin_index {self.bin_index} out of range")


def _arrays(pairs: Sequence[EvalPair]) -> tuple[np.ndarray, np.ndarray]:
    y = np.array([p.y for p in pairs], dtype=np.float64)
    y_hat = np.array([p.y_hat for p in pairs], dtype=np.float64)
    return y, y_hat


def r2(pairs: Sequence[EvalPair]) -> float:
    """Coefficient of determination, 1 - SSE/SST."""
    if len(pairs) < 2:
        raise ValueError(f"need at least 2 pairs, got {len(pairs)}")
    y, y_hat = _arrays(pairs)
    sst = float(np.sum((y - y.mean()) ** 2))
    if sst == 0.0:
        raise ValueError("target variance is zero; R^2 undefined")
    sse = float(np.sum((y - y_hat) ** 2))
    return 1.0 - sse / sst


def zscore(v: np.ndarray) -> np.ndarray:
    """Population (1/N) z-transformation."""
    sd = float(v.std())
    if sd == 0.0:
        raise ValueError("zero variance; z-score undefined")
    return (v - v.mean()) / sd


def r2_normalized(pairs: Sequence[EvalPair]) -> float:
    """R^2 after z-scoring both sides; equals 2*pearson(y, y_hat) - 1."""
    if len(pairs) < 2:
        raise ValueError(f"need at least 2 pairs, got {len(pairs)}")
    y, y_hat = _arrays(pairs)
    zy, zy_hat = zscore(y), zscore(y_hat)
    sse = float(np.sum((zy - zy_hat) ** 2))
    sst = float(np.sum(zy ** 2))
    return 1.0 - sse / sst


def mae(pairs: Sequence[EvalPair]) -> float:
    if not pairs:
        raise ValueError("need at least 1 pair")
    y, y_hat = _arrays(pairs)
    return float(np.mean(np.abs(y - y_hat)))


def ae_p95(pairs: Sequence[EvalPair]) -> float:
    """95th percentile of absolute errors, linear interpolation between ranks."""
    if not pairs:
        raise ValueError("need at least 1 pair")
    y, y_hat = _arrays(pairs)
    return float(np.percentile(np.abs(y - y_hat), 95))


def wmae(pairs: Sequence[EvalPair], stats: WeeklyBinStats) -> float:
    """MAE weighted by 1 + |z| of the target against its weekly-bin history.

    Bins with sigma = 0 fall back to weight 1 with a warning. Every pair
    must carry a bin_index.
    """
    if not pairs:
        raise ValueError("need at least 1 pair")
    degenerate = set()
    num = 0.0
    den = 0.0
    for p in pairs:
        if p.bin_index is None:
            raise ValueError(f"pair {p.key}: bin_index required for wMAE")
        mu = float(stats.mu[p.bin_index])
        sigma = float(stats.sigma[p.bin_index])
        if sigma == 0.0:
            degenerate.add(p.bin_index)
            w = 1.0
        else:
            w = 1.0 + abs((p.y - mu) / sigma)
        num += w * abs(p.y - p.y_hat)
        den += w
    if degenerate:
        warnings.warn(
            f"{len(degenerate)} bin(s) with sigma = 0; weight fell back to 1 "
            f"(e.g. bin {sorted(degenerate)[0]})"
        )
    return num / den


METRICS = ("mae", "ae_p95", "r2", "r2_normalized", "wmae")


def evaluate_pairs(
    pairs: Sequence[EvalPair], stats: Optional[WeeklyBinStats] = None
) -> dict[str, float]:
    """All applicable metrics for one estimate series; wMAE only with stats."""
    out = {
        "mae": mae(pairs),
        "ae_p95": ae_p95(pairs),
        "r2": r2(pairs),
        "r2_normalized": r2_normalized(pairs),
    }
    if stats is not None:
        out["wmae"] = wmae(pairs, stats)
    return out


def write_report_csv(rows: Iterable[tuple[str, str, str, float]]) -> str:
    """Rows of (level, method, metric, value)."""
    lines = ["level,method,metric,value"]
    for level, method, metric, value in rows:
        lines.append(f"{level},{method},{metric},{format_number(value)}")
    return "\n".join(lines) + "\n"


def read_report_csv(text: str) -> list[tuple[str, str, str, float]]:
    import csv
    import io

    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header != ["level", "method", "metric", "value"]:
        raise ValueError(f"expected header level,method,metric,value, got {header}")
    return [(r[0], r[1], r[2], float(r[3])) for r in reader if r]


def write_plot_csv(pairs: Sequence[EvalPair]) -> str:
    lines = ["y,y_hat"]
    for p in pairs:
        lines.append(f"{format_number(p.y)},{format_number(p.y_hat)}")
    return "\n".join(lines) + "\n"


def read_plot_csv(text: str) -> list[EvalPair]:
    import csv
    import io

    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header != ["y", "y_hat"]:
        raise ValueError(f"expected header y,y_hat, got {header}")
    return [EvalPair(f"row{i}", float(r[0]), float(r[1]))
            for i, r in enumerate(reader) if r]
