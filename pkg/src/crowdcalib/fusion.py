"""Gradient-boosted regression trees fusing per-camera event features.

A deliberately small reimplementation of the boosted-trees role: squared
loss only, histogram splits over at most 256 quantile-derived bins,
leaf-wise growth, and per-node routing of missing values to the
gain-maximizing side. One model is trained per (CV method, platform).
"""

from __future__ import annotations

import heapq
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .aggregation import upper_median
from .features import FrameFeature, Method, ORDINAL_METHODS
from .ingest import Dataset, FormatError


@dataclass(frozen=True)
class GbdtParams:
    n_trees: int = 200
    learning_rate: float = 0.1
    max_leaves: int = 15
    min_samples_leaf: int = 5
    leaf_l2: float = 1.0
    max_bins: int = 256

    def __post_init__(self):
        if self.n_trees < 0:
            raise ValueError("n_trees must be >= 0")
        if not (0.0 < self.learning_rate <= 1.0):
            raise ValueError(f"learning_rate must lie in (0, 1], got {self.learning_rate}")
        if self.max_leaves < 2:
            raise ValueError("max_leaves must be >= 2")
        if self.min_samples_leaf < 1:
            raise ValueError("min_samples_leaf must be >= 1")
        if self.leaf_l2 < 0:
            raise ValueError("leaf_l2 must be >= 0")
        if not (2 <= self.max_bins <= 256):
            raise ValueError("max_bins must lie in 2..256")


@dataclass(frozen=True)
class Leaf:
    value: float


@dataclass(frozen=True)
class TreeNode:
    feature: int
    threshold: float
    missing_left: bool
    left: Union["TreeNode", Leaf]
    right: Union["TreeNode", Leaf]


Tree = Union[TreeNode, Leaf]


@dataclass(frozen=True)
class FusionRow:
    """Per-event feature vector in sorted-camera order; NaN marks a missing camera."""

    event_id: str
    features: np.ndarray
    target: float

    def __post_init__(self):
        feats = np.ascontiguousarray(self.features, dtype=np.float64)
        object.__setattr__(self, "features", feats)
        if not np.isfinite(self.target):
            raise ValueError(f"event {self.event_id}: target must be finite")
        if self.target < 0:
            raise ValueError(f"event {self.event_id}: target must be >= 0")


@dataclass
class GbdtModel:
    n_features: int
    base_prediction: float
    learning_rate: float
    trees: list
    boundaries: list  # per-feature bin boundaries frozen at training time
    params: Optional[GbdtParams] = None
    train_mse: list = field(default_factory=list)  # per-iteration training loss


def build_fusion_rows(
    dataset: Dataset, method: Method, features: Iterable[FrameFeature]
) -> list[FusionRow]:
    """One row per event: per-camera frame features collapsed to a scalar.

    Numeric methods take the mean over the camera's frames, the ordinal
    class level its upper median; cameras without frames become NaN.
    """
    cameras = sorted(dataset.platform_config.cameras)
    cam_index = {c: i for i, c in enumerate(cameras)}
    per_event: dict[str, dict[int, list[float]]] = {}
    for f in features:
        if f.method is not method:
            continue
        if f.camera not in cam_index:
            raise ValueError(f"feature references unknown camera {f.camera!r}")
        per_event.setdefault(f.event_id, {}).setdefault(cam_index[f.camera], []).append(f.value)

    rows = []
    skipped = 0
    for ev in dataset.events:
        cams = per_event.get(ev.event_id)
        if not cams:
            skipped += 1
            continue
        vec = np.full(len(cameras), np.nan)
        for ci, vals in cams.items():
            if method in ORDINAL_METHODS:
                vec[ci] = upper_median(vals)
            else:
                vec[ci] = sum(vals) / len(vals)
        rows.append(FusionRow(ev.event_id, vec, ev.occupancy))
    if skipped:
        warnings.warn(f"{skipped} event(s) without any camera features were skipped")
    return rows


# ---------------------------------------------------------------------------
# Training


def _bin_boundaries(col: np.ndarray, max_bins: int) -> np.ndarray:
    """Split points for one feature, derived from the training distribution.

    With few distinct values the boundaries are the midpoints between
    them, otherwise interior quantiles; either way at most max_bins - 1
    boundaries, i.e. max_bins histogram bins.
    """
    finite = col[np.isfinite(col)]
    if finite.size == 0:
        return np.empty(0)
    distinct = np.unique(finite)
    if distinct.size <= 1:
        return np.empty(0)
    if distinct.size <= max_bins:
        return (distinct[:-1] + distinct[1:]) / 2.0
    probs = np.linspace(0.0, 1.0, max_bins + 1)[1:-1]
    return np.unique(np.quantile(finite, probs))


def _bin_column(col: np.ndarray, boundaries: np.ndarray) -> np.ndarray:
    """Bin index per sample; x <= boundaries[j] lands in bins 0..j; NaN -> -1."""
    binned = np.full(col.shape, -1, dtype=np.int32)
    finite = np.isfinite(col)
    binned[finite] = np.searchsorted(boundaries, col[finite], side="left")
    return binned


@dataclass
class _Split:
    gain: float
    feature: int
    bin_j: int
    threshold: float
    missing_left: bool


def _best_split(
    idx: np.ndarray,
    binned: np.ndarray,
    boundaries: list,
    resid: np.ndarray,
    params: GbdtParams,
) -> Optional[_Split]:
    """Highest variance-gain split of one leaf, scanning 256-bin histograms.

    Gain uses the ridge-adjusted score S^2 / (n + leaf_l2) so it is
    consistent with the leaf-value formula. Missing samples are tried on
    both sides and the better direction is kept. Ties resolve to the
    lowest feature index, then the lowest threshold, then missing-left.
    """
    lam = params.leaf_l2
    r = resid[idx]
    total_n = idx.size
    total_s = float(r.sum())
    parent_score = total_s * total_s / (total_n + lam)

    best: Optional[_Split] = None
    for f in range(binned.shape[1]):
        bounds = boundaries[f]
        if bounds.size == 0:
            continue
        bins_f = binned[idx, f]
        present = bins_f >= 0
        n_miss = int(total_n - present.sum())
        if n_miss == total_n:
            continue  # all-missing column is never split on
        s_miss = total_s - float(r[present].sum())
        k = bounds.size + 1
        cnt = np.bincount(bins_f[present], minlength=k)
        sums = np.bincount(bins_f[present], weights=r[present], minlength=k)
        cl = np.cumsum(cnt)[:-1]  # counts in bins 0..j, one entry per boundary
        sl = np.cumsum(sums)[:-1]
        n_present = int(cnt.sum())
        cr = n_present - cl
        sr = (total_s - s_miss) - sl

        for miss_left in (True, False):
            ln = cl + (n_miss if miss_left else 0)
            rn = cr + (0 if miss_left else n_miss)
            ls = sl + (s_miss if miss_left else 0.0)
            rs = sr + (0.0 if miss_left else s_miss)
            ok = (ln >= params.min_samples_leaf) & (rn >= params.min_samples_leaf)
            if not ok.any():
                continue
            with np.errstate(divide="ignore", invalid="ignore"):
                # zero denominators only occur in entries masked out by `ok`
                gains = np.where(
                    ok,
                    ls * ls / (ln + lam) + rs * rs / (rn + lam) - parent_score,
                    -np.inf,
                )
            j = int(np.argmax(gains))
            gain = float(gains[j])
            if gain <= 0.0:
                continue
            cand = _Split(gain, f, j, float(bounds[j]), miss_left)
            if (
                best is None
                or cand.gain > best.gain
                or (cand.gain == best.gain
                    and (cand.feature, cand.bin_j, not cand.missing_left)
                    < (best.feature, best.bin_j, not best.missing_left))
            ):
                best = cand
    return best


@dataclass
class _GrowingLeaf:
    idx: np.ndarray
    split: Optional[_Split] = None
    children: Optional[tuple] = None


def _partition(idx: np.ndarray, binned: np.ndarray, split: _Split) -> tuple[np.ndarray, np.ndarray]:
    bins_f = binned[idx, split.feature]
    go_left = bins_f <= split.bin_j
    if split.missing_left:
        go_left |= bins_f < 0
    else:
        go_left &= bins_f >= 0
    return idx[go_left], idx[~go_left]


def _grow_tree(
    binned: np.ndarray,
    boundaries: list,
    resid: np.ndarray,
    pred: np.ndarray,
    params: GbdtParams,
) -> Tree:
    """Grow one tree leaf-wise on the residuals and apply its leaf updates.

    Leaves are expanded best-gain-first until max_leaves is reached or no
    leaf has a positive-gain split. A tree with no usable split reduces
    to a single (usually zero-valued) leaf.
    """
    root = _GrowingLeaf(np.arange(resid.size))
    root.split = _best_split(root.idx, binned, boundaries, resid, params)
    heap: list = []
    counter = 0
    if root.split is not None:
        heapq.heappush(heap, (-root.split.gain, counter, root))
        counter += 1
    n_leaves = 1
    while heap and n_leaves < params.max_leaves:
        _, _, leaf = heapq.heappop(heap)
        left_idx, right_idx = _partition(leaf.idx, binned, leaf.split)
        left, right = _GrowingLeaf(left_idx), _GrowingLeaf(right_idx)
        leaf.children = (left, right)
        n_leaves += 1
        for child in (left, right):
            child.split = _best_split(child.idx, binned, boundaries, resid, params)
            if child.split is not None:
                heapq.heappush(heap, (-child.split.gain, counter, child))
                counter += 1

    lam = params.leaf_l2
    lr = params.learning_rate

    def finalize(leaf: _GrowingLeaf) -> Tree:
        if leaf.children is None:
            value = lr * float(resid[leaf.idx].sum()) / (leaf.idx.size + lam)
            pred[leaf.idx] += value
            return Leaf(value)
        s = leaf.split
        return TreeNode(
            s.feature, s.threshold, s.missing_left,
            finalize(leaf.children[0]), finalize(leaf.children[1]),
        )

    return finalize(root)


def train_gbdt(rows: Sequence[FusionRow], params: GbdtParams = GbdtParams()) -> GbdtModel:
    """Fit boosted trees to the fusion rows.

    Rows are sorted by event id first so the model is independent of
    input ordering. base_prediction is the target mean; each tree fits
    the current residuals and its leaf values are sum(residual) /
    (count + leaf_l2) scaled by the learning rate.
    """
    if len(rows) < 2:
        raise ValueError(f"need at least 2 rows to train, got {len(rows)}")
    rows = sorted(rows, key=lambda r: r.event_id)
    n_features = rows[0].features.size
    for r in rows:
        if r.features.size != n_features:
            raise ValueError(
                f"event {r.event_id}: feature vector length {r.features.size} != {n_features}"
            )
    X = np.stack([r.features for r in rows])
    y = np.array([r.target for r in rows])

    boundaries = [_bin_boundaries(X[:, f], params.max_bins) for f in range(n_features)]
    binned = np.stack(
        [_bin_column(X[:, f], boundaries[f]) for f in range(n_features)], axis=1
    )

    base = float(y.mean())
    pred = np.full(y.size, base)
    trees = []
    history = []
    for _ in range(params.n_trees):
        resid = y - pred
        trees.append(_grow_tree(binned, boundaries, resid, pred, params))
        history.append(float(np.mean((y - pred) ** 2)))
    return GbdtModel(n_features, base, params.learning_rate, trees, boundaries,
                     params, history)


# ---------------------------------------------------------------------------
# Prediction


def _eval_tree(tree: Tree, features: np.ndarray) -> float:
    node = tree
    while isinstance(node, TreeNode):
        v = features[node.feature]
        if np.isnan(v):
            node = node.left if node.missing_left else node.right
        elif v <= node.threshold:
            node = node.left
        else:
            node = node.right
    return node.value


def predict_gbdt(model: GbdtModel, row: Union[FusionRow, np.ndarray]) -> float:
    features = row.features if isinstance(row, FusionRow) else np.asarray(row, dtype=np.float64)
    if features.size != model.n_features:
        raise ValueError(
            f"feature vector length {features.size} does not match the "
            f"training layout ({model.n_features})"
        )
    return model.base_prediction + sum(_eval_tree(t, features) for t in model.trees)


# ---------------------------------------------------------------------------
# Model file format


def write_gbdt(model: GbdtModel) -> str:
    lines = [
        f"GBDT 1 {model.n_features} {model.base_prediction:.17g} "
        f"{model.learning_rate:.17g}"
    ]

    def emit(node: Tree) -> None:
        if isinstance(node, Leaf):
            lines.append(f"L {node.value:.17g}")
        else:
            d = "L" if node.missing_left else "R"
            lines.append(f"N {node.feature} {node.threshold:.17g} {d}")
            emit(node.left)
            emit(node.right)

    for tree in model.trees:
        emit(tree)
    for f, bounds in enumerate(model.boundaries):
        lines.append(" ".join(["B", str(f)] + [f"{b:.17g}" for b in bounds]))
    return "\n".join(lines) + "\n"


def read_gbdt(text: str) -> GbdtModel:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise FormatError("empty model file")
    head = lines[0].split()
    if len(head) != 5 or head[0] != "GBDT" or head[1] != "1":
        raise FormatError(f"line 1: expected 'GBDT 1 <n_features> <base> <lr>', got {lines[0]!r}")
    try:
        n_features = int(head[2])
        base = float(head[3])
        lr = float(head[4])
    except ValueError as exc:
        raise FormatError(f"line 1: {exc}") from None

    pos = 1

    def parse_node() -> Tree:
        nonlocal pos
        if pos >= len(lines):
            raise FormatError(f"line {pos + 1}: unexpected end of tree")
        parts = lines[pos].split()
        pos += 1
        if parts[0] == "L":
            if len(parts) != 2:
                raise FormatError(f"line {pos}: expected 'L <value>'")
            return Leaf(float(parts[1]))
        if parts[0] == "N":
            if len(parts) != 4 or parts[3] not in ("L", "R"):
                raise FormatError(f"line {pos}: expected 'N <feat> <thr> <L|R>'")
            feature = int(parts[1])
            if not (0 <= feature < n_features):
                raise FormatError(f"line {pos}: feature index {feature} out of range")
            threshold = float(parts[2])
            left = parse_node()
            right = parse_node()
            return TreeNode(feature, threshold, parts[3] == "L", left, right)
        raise FormatError(f"line {pos}: expected node line, got {lines[pos - 1]!r}")

    trees = []
    while pos < len(lines) and lines[pos].split()[0] in ("N", "L"):
        trees.append(parse_node())

    boundaries = [np.empty(0)] * n_features
    seen = set()
    while pos < len(lines):
        parts = lines[pos].split()
        if parts[0] != "B":
            raise FormatError(f"line {pos + 1}: expected bin-boundary line, got {lines[pos]!r}")
        try:
            f = int(parts[1])
            vals = np.array([float(v) for v in parts[2:]])
        except (IndexError, ValueError) as exc:
            raise FormatError(f"line {pos + 1}: {exc}") from None
        if not (0 <= f < n_features) or f in seen:
            raise FormatError(f"line {pos + 1}: bad or duplicate feature index {f}")
        seen.add(f)
        boundaries[f] = vals
        pos += 1
    if len(seen) != n_features:
        raise FormatError(f"expected bin boundaries for {n_features} features, got {len(seen)}")
    return GbdtModel(n_features, base, lr, trees, boundaries)
