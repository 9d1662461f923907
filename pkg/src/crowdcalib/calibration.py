"""Segmentation-map weighting: pooling, ridge fit, and occupancy estimates.

Each camera gets a weight map w over pooled mask blocks minimizing

    sum_i (y_i - <P_i, w>)^2 + lambda * ||w||^2

for its pooled training maps P_i. The problem is convex; we solve the
normal equations (X^T X + lambda I) w = X^T y with conjugate gradients,
matrix-free: products with the Gram operator are two passes over the
sample matrix (u = X v, then X^T u) so X^T X is never formed.
"""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .domain import GridMask, PooledMap, WeightMap
from .ingest import FormatError

DEFAULT_LAMBDA = 1.0
DEFAULT_TOL = 1e-8
MIN_SAMPLES_WARN = 600


class PoolMode(enum.Enum):
    MAX = "max"
    MEAN = "mean"


_LANE_DTYPES = {2: np.uint16, 4: np.uint32, 8: np.uint64}


def _block_sums(bits: np.ndarray, p: int, q: int) -> np.ndarray:
    """Per-block pixel counts of a 0/1 raster.

    For q of 2/4/8 the column stage packs q bytes into one machine word;
    one multiply by 0x0101.. then a shift yields the lane sum (values are
    0/1, so partial sums stay below 256 and never carry across lanes).
    This is ~20x faster than a strided reshape-sum at 1080p.
    """
    rows, cols = bits.shape
    if q in _LANE_DTYPES:
        dtype = _LANE_DTYPES[q]
        mult = dtype(int.from_bytes(b"\x01" * q, "little"))
        shift = dtype(8 * (q - 1))
        words = np.ascontiguousarray(bits).view(dtype).reshape(rows, cols // q)
        colsum = (words * mult) >> shift
    else:
        colsum = bits.reshape(rows, cols // q, q).sum(axis=2, dtype=np.uint32)
    return colsum.reshape(rows // p, p, cols // q).sum(axis=1, dtype=np.uint32)


def pool(mask: GridMask, p: int, q: int, mode: PoolMode) -> PooledMap:
    """Reduce a mask over non-overlapping p x q blocks.

    MAX takes each block's maximum, MEAN its average; p and q must divide
    the mask dimensions exactly. On binary rasters the block maximum is
    simply "any pixel set", so both modes share the block-sum kernel.
    """
    if p < 1 or q < 1:
        raise ValueError(f"block sizes must be >= 1, got p={p}, q={q}")
    if mask.rows % p != 0 or mask.cols % q != 0:
        raise ValueError(
            f"pooling blocks {p}x{q} do not divide mask {mask.rows}x{mask.cols}"
        )
    prows, pcols = mask.rows // p, mask.cols // q
    sums = _block_sums(mask.bits, p, q)
    if mode is PoolMode.MAX:
        values = (sums > 0).astype(np.float64)
    elif mode is PoolMode.MEAN:
        values = sums / float(p * q)
    else:
        raise ValueError(f"unknown pool mode {mode!r}")
    return PooledMap(prows, pcols, values)


@dataclass
class CalibrationProblem:
    """Per-camera regression problem: pooled maps against occupancy targets."""

    camera: str
    samples: list  # of (PooledMap, float)
    lam: float = DEFAULT_LAMBDA
    pool_mode: PoolMode = PoolMode.MAX
    p: int = 1
    q: int = 1

    def __post_init__(self):
        if not self.samples:
            raise ValueError(f"camera {self.camera}: at least one sample required")
        if not (self.lam > 0):
            raise ValueError(f"lambda must be positive, got {self.lam}")
        shape = (self.samples[0][0].prows, self.samples[0][0].pcols)
        for pm, y in self.samples:
            if (pm.prows, pm.pcols) != shape:
                raise ValueError(
                    f"camera {self.camera}: pooled map {pm.prows}x{pm.pcols} "
                    f"does not match {shape[0]}x{shape[1]}"
                )
            if not np.isfinite(y):
                raise ValueError(f"camera {self.camera}: non-finite target {y}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.samples[0][0].prows, self.samples[0][0].pcols

    def design_matrix(self) -> tuple[np.ndarray, np.ndarray]:
        X = np.stack([pm.values.ravel() for pm, _ in self.samples]).astype(np.float64)
        y = np.array([y for _, y in self.samples], dtype=np.float64)
        return X, y


@dataclass
class SolverReport:
    iterations: int
    final_residual_norm: float
    converged: bool
    objective_value: float
    # running-minimum residual norm after each iteration (see solve_ridge_cg)
    residual_history: list = field(default_factory=list)


def solve_ridge_cg(
    X: np.ndarray,
    y: np.ndarray,
    lam: float,
    tol: float = DEFAULT_TOL,
    max_iter: Optional[int] = None,
) -> tuple[np.ndarray, SolverReport]:
    """Conjugate gradients on (X^T X + lam I) w = X^T y from w = 0.

    The plain-CG residual 2-norm can oscillate, so the iterate with the
    smallest residual norm seen so far is tracked and returned; the
    reported history is that running minimum, which is nonincreasing by
    construction. Convergence means ||r|| / ||b|| <= tol.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if not np.all(np.isfinite(X)) or not np.all(np.isfinite(y)):
        raise ValueError("non-finite inputs to the ridge solver")
    if not (lam > 0):
        raise ValueError(f"lambda must be positive, got {lam}")
    if not (tol > 0):
        raise ValueError(f"tol must be positive, got {tol}")
    n, d = X.shape
    if max_iter is None:
        max_iter = 10 * d

    def gram(v: np.ndarray) -> np.ndarray:
        # two passes over the samples; X^T X is never materialized
        return X.T @ (X @ v) + lam * v

    b = X.T @ y
    b_norm = float(np.linalg.norm(b))

    def objective(w: np.ndarray) -> float:
        r = y - X @ w
        return float(r @ r + lam * (w @ w))

    w = np.zeros(d)
    if b_norm == 0.0:
        return w, SolverReport(0, 0.0, True, objective(w), [])

    r = b.copy()
    p_dir = r.copy()
    rs = float(r @ r)
    best_w = w.copy()
    best_norm = float(np.sqrt(rs))
    history = []
    iterations = 0
    for _ in range(max_iter):
        Ap = gram(p_dir)
        denom = float(p_dir @ Ap)
        if denom <= 0.0:
            break  # loss of positive-definiteness due to rounding
        alpha = rs / denom
        w = w + alpha * p_dir
        r = r - alpha * Ap
        rs_new = float(r @ r)
        iterations += 1
        norm = float(np.sqrt(rs_new))
        if norm < best_norm:
            best_norm = norm
            best_w = w.copy()
        history.append(best_norm)
        if best_norm <= tol * b_norm:
            break
        p_dir = r + (rs_new / rs) * p_dir
        rs = rs_new

    converged = best_norm <= tol * b_norm
    report = SolverReport(iterations, best_norm, converged, objective(best_w), history)
    return best_w, report


def fit_weight_map(
    problem: CalibrationProblem,
    tol: float = DEFAULT_TOL,
    max_iter: Optional[int] = None,
) -> tuple[WeightMap, SolverReport]:
    """Fit one camera's weight map; warns when samples fall below 600."""
    if len(problem.samples) < MIN_SAMPLES_WARN:
        warnings.warn(
            f"camera {problem.camera}: calibrating on {len(problem.samples)} "
            f"samples, below the recommended minimum of {MIN_SAMPLES_WARN}"
        )
    X, y = problem.design_matrix()
    w, report = solve_ridge_cg(X, y, problem.lam, tol=tol, max_iter=max_iter)
    prows, pcols = problem.shape
    wm = WeightMap(
        problem.camera, prows, pcols, problem.p, problem.q,
        problem.lam, problem.pool_mode.value, w.reshape(prows, pcols),
    )
    return wm, report


def estimate_occupancy(
    pooled: PooledMap, w: WeightMap, clamp_nonnegative: bool = False
) -> float:
    """Inner product of a pooled map with a weight map.

    The unconstrained fit can produce negative estimates; pass
    `clamp_nonnegative` to floor them at zero for operational use.
    """
    if (pooled.prows, pooled.pcols) != (w.prows, w.pcols):
        raise ValueError(
            f"pooled map {pooled.prows}x{pooled.pcols} does not match "
            f"weight map {w.prows}x{w.pcols}"
        )
    est = float(np.vdot(pooled.values, w.values))
    if clamp_nonnegative and est < 0.0:
        return 0.0
    return est


def ridge_objective(problem: CalibrationProblem, w: np.ndarray) -> float:
    """Value of the regularized least-squares objective at w."""
    X, y = problem.design_matrix()
    r = y - X @ np.asarray(w, dtype=np.float64).ravel()
    return float(r @ r + problem.lam * float(np.vdot(w, w)))


# ---------------------------------------------------------------------------
# Weight map file format


def write_weight_map(wm: WeightMap) -> str:
    """Versioned text format, 17 significant digits (lossless f64 round-trip)."""
    lines = [
        f"WMAP 1 {wm.camera} {wm.prows} {wm.pcols} {wm.p} {wm.q} "
        f"{wm.lam:.17g} {wm.pool_mode}"
    ]
    for row in wm.values:
        lines.append(" ".join(f"{v:.17g}" for v in row))
    return "\n".join(lines) + "\n"


def read_weight_map(text: str) -> WeightMap:
    lines = text.splitlines()
    if not lines:
        raise FormatError("empty weight map file")
    head = lines[0].split()
    if len(head) != 9 or head[0] != "WMAP" or head[1] != "1":
        raise FormatError(f"line 1: expected 'WMAP 1 <camera> ...', got {lines[0]!r}")
    camera = head[2]
    try:
        prows, pcols, p, q = (int(v) for v in head[3:7])
        lam = float(head[7])
    except ValueError as exc:
        raise FormatError(f"line 1: {exc}") from None
    pool_mode = head[8]
    if len(lines) < 1 + prows:
        raise FormatError(f"expected {prows} value rows, file has {len(lines) - 1}")
    values = np.empty((prows, pcols))
    for i in range(prows):
        parts = lines[1 + i].split()
        if len(parts) != pcols:
            raise FormatError(f"line {i + 2}: expected {pcols} values, got {len(parts)}")
        try:
            values[i] = [float(v) for v in parts]
        except ValueError as exc:
            raise FormatError(f"line {i + 2}: {exc}") from None
    extra = [ln for ln in lines[1 + prows:] if ln.strip()]
    if extra:
        raise FormatError(f"trailing data after {prows} value rows")
    try:
        return WeightMap(camera, prows, pcols, p, q, lam, pool_mode, values)
    except ValueError as exc:
        raise FormatError(str(exc)) from None
