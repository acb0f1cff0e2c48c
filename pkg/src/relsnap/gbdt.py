"""Gradient-boosted regression trees with exact greedy split search.

Trees are grown leaf-wise on first/second-order gradients (squared loss for
regression, logistic loss for binary classification) with Newton leaf values,
L2 shrinkage of the leaf denominator and L1 soft-thresholding of gradient sums.
"""
from __future__ import annotations

import heapq
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .features import FeatureVector, TabularDataset
from .store import BINARY, REGRESSION, TASK_KINDS

log = logging.getLogger(__name__)

RAW_CLIP = 30.0


@dataclass(frozen=True)
class GbdtConfig:
    max_depth: int = 6
    learning_rate: float = 0.1
    num_leaves: int = 31
    subsample: float = 1.0
    colsample: float = 1.0
    min_data_in_leaf: int = 20
    l1: float = 1e-9
    l2: float = 1.0
    n_rounds: int = 100
    min_split_gain: float = 0.0

    def __post_init__(self):
        checks = [
            (3 <= self.max_depth <= 11, "max_depth in [3, 11]"),
            (0.0 <= self.learning_rate <= 0.1, "learning_rate in [0, 0.1]"),
            (2 <= self.num_leaves <= 1024, "num_leaves in [2, 1024]"),
            (0.05 <= self.subsample <= 1.0, "subsample in [0.05, 1]"),
            (0.05 <= self.colsample <= 1.0, "colsample in [0.05, 1]"),
            (1 <= self.min_data_in_leaf <= 100, "min_data_in_leaf in [1, 100]"),
            (1e-9 <= self.l1 <= 10, "l1 in [1e-9, 10]"),
            (1e-9 <= self.l2 <= 10, "l2 in [1e-9, 10]"),
            (self.n_rounds >= 0, "n_rounds >= 0"),
        ]
        bad = [msg for ok, msg in checks if not ok]
        if bad:
            raise ValueError("invalid GbdtConfig: " + ", ".join(bad))


@dataclass
class Tree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    def apply(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X), dtype=np.int64)
        rows = np.arange(len(X))
        while True:
            f = self.feature[node]
            inner = f >= 0
            if not inner.any():
                return node
            r, n, f = rows[inner], node[inner], f[inner]
            go_left = X[r, f] <= self.threshold[n]
            node[inner] = np.where(go_left, self.left[n], self.right[n])

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]

    def depth(self) -> int:
        best, stack = 0, [(0, 0)]
        while stack:
            k, d = stack.pop()
            best = max(best, d)
            if self.feature[k] >= 0:
                stack += [(self.left[k], d + 1), (self.right[k], d + 1)]
        return best

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Tree":
        return cls(
            np.array(d["feature"], dtype=np.int64),
            np.array(d["threshold"], dtype=np.float64),
            np.array(d["left"], dtype=np.int64),
            np.array(d["right"], dtype=np.int64),
            np.array(d["value"], dtype=np.float64),
        )

    @classmethod
    def stump(cls, feature: int, threshold: float, left: float, right: float) -> "Tree":
        return cls(
            np.array([feature, -1, -1]),
            np.array([threshold, 0.0, 0.0]),
            np.array([1, -1, -1]),
            np.array([2, -1, -1]),
            np.array([0.0, left, right]),
        )


@dataclass
class GbdtModel:
    trees: list[Tree]
    learning_rate: float
    base_score: float
    task_kind: str
    n_features: int
    degenerate: bool = False
    meta: dict = field(default_factory=dict)

    def raw(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got shape {X.shape}")
        out = np.full(len(X), self.base_score)
        for tree in self.trees:
            out += tree.predict(X)
        return out

    def predict(self, X: np.ndarray) -> np.ndarray:
        """Sigmoid probabilities for classification, raw sums for regression."""
        r = self.raw(X)
        if self.task_kind == BINARY:
            return 1.0 / (1.0 + np.exp(-np.clip(r, -RAW_CLIP, RAW_CLIP)))
        return r

    def to_dict(self) -> dict:
        return {
            "task_kind": self.task_kind,
            "learning_rate": self.learning_rate,
            "base_score": self.base_score,
            "n_features": self.n_features,
            "degenerate": self.degenerate,
            "meta": self.meta,
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GbdtModel":
        return cls(
            trees=[Tree.from_dict(t) for t in d["trees"]],
            learning_rate=float(d["learning_rate"]),
            base_score=float(d["base_score"]),
            task_kind=d["task_kind"],
            n_features=int(d["n_features"]),
            degenerate=bool(d.get("degenerate", False)),
            meta=dict(d.get("meta", {})),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "GbdtModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def gbdt_predict(model: GbdtModel, f: FeatureVector | np.ndarray) -> float:
    values = f.values if isinstance(f, FeatureVector) else np.asarray(f, dtype=np.float64)
    if values.ndim != 1 or len(values) != model.n_features:
        raise ValueError(f"expected a vector of {model.n_features} features, got shape {values.shape}")
    return float(model.predict(values[None, :])[0])


def _soft(G: np.ndarray, l1: float) -> np.ndarray:
    return np.sign(G) * np.maximum(np.abs(G) - l1, 0.0)


def _score(G, H, cfg: GbdtConfig):
    return np.maximum(np.abs(G) - cfg.l1, 0.0) ** 2 / (H + cfg.l2)


def _leaf_value(G: float, H: float, cfg: GbdtConfig) -> float:
    return float(-_soft(np.float64(G), cfg.l1) / (H + cfg.l2))


def _best_split(X, g, h, order, cols, cfg: GbdtConfig):
    """Best (gain, feature, threshold) for one node; ties go to lower feature, then lower threshold.

    ``order`` holds the node's rows sorted by each column of ``cols``, shape ``(m, len(cols))``.
    """
    m = len(order)
    lo = cfg.min_data_in_leaf
    if m < 2 * lo:
        return None
    Vs = X[order, cols]
    gs = np.cumsum(g[order], axis=0)
    hs = np.cumsum(h[order], axis=0)
    G, H = gs[-1], hs[-1]
    # candidate cut after position k (left = first k+1 rows)
    GL, HL = gs[lo - 1:m - lo], hs[lo - 1:m - lo]
    distinct = Vs[lo - 1:m - lo] < Vs[lo:m - lo + 1]
    gain = 0.5 * (_score(GL, HL, cfg) + _score(G - GL, H - HL, cfg) - _score(G, H, cfg))
    gain = np.where(distinct, gain, -np.inf)
    if gain.size == 0:
        return None
    best = None
    for c in range(len(cols)):
        k = int(np.argmax(gain[:, c]))
        gk = gain[k, c]
        if not np.isfinite(gk):
            continue
        if best is None or gk > best[0]:
            a, b = Vs[lo - 1 + k, c], Vs[lo + k, c]
            thr = 0.5 * (a + b)
            if not (a <= thr < b):
                thr = a
            best = (float(gk), int(cols[c]), float(thr))
    return best


def _partition(order: np.ndarray, goes_left: np.ndarray):
    """Stable split of per-column sorted row ids into left and right children."""
    m, d = order.shape
    mask = goes_left[order].T
    n_left = int(mask[0].sum()) if d else 0
    ot = order.T
    return ot[mask].reshape(d, n_left).T, ot[~mask].reshape(d, m - n_left).T


def _grow_tree(X, g, h, root_order, cols, cfg: GbdtConfig) -> Tree:
    """Leaf-wise growth from ``root_order``, the sampled rows sorted by each sampled column."""
    feature, threshold, left, right, value = [-1], [0.0], [-1], [-1], [0.0]
    rows = root_order[:, 0]
    node_order = {0: root_order}
    depth = {0: 0}
    value[0] = _leaf_value(g[rows].sum(), h[rows].sum(), cfg)
    heap = []
    goes_left = np.zeros(len(X), dtype=bool)

    def consider(k):
        o = node_order[k]
        if depth[k] >= cfg.max_depth or not np.any(g[o[:, 0]] != 0):
            return
        s = _best_split(X, g, h, o, cols, cfg)
        if s is not None and s[0] >= cfg.min_split_gain:
            heapq.heappush(heap, (-s[0], k, s[1], s[2]))

    consider(0)
    n_leaves = 1
    while heap and n_leaves < cfg.num_leaves:
        _, k, f, thr = heapq.heappop(heap)
        o = node_order.pop(k)
        r = o[:, 0]
        goes_left[r] = X[r, f] <= thr
        halves = _partition(o, goes_left)
        goes_left[r] = False
        for side, sub in zip((left, right), halves):
            c = len(feature)
            feature.append(-1)
            threshold.append(0.0)
            left.append(-1)
            right.append(-1)
            value.append(_leaf_value(g[sub[:, 0]].sum(), h[sub[:, 0]].sum(), cfg))
            side[k] = c
            node_order[c] = sub
            depth[c] = depth[k] + 1
        feature[k], threshold[k] = f, thr
        n_leaves += 1
        consider(left[k])
        consider(right[k])
    val = np.array(value) * cfg.learning_rate
    is_leaf = np.array(feature) < 0
    val[~is_leaf] = 0.0
    return Tree(np.array(feature), np.array(threshold), np.array(left), np.array(right), val)


def _grad(task_kind: str, raw: np.ndarray, y: np.ndarray):
    if task_kind == BINARY:
        p = 1.0 / (1.0 + np.exp(-np.clip(raw, -RAW_CLIP, RAW_CLIP)))
        return p - y, np.maximum(p * (1.0 - p), 1e-16)
    return raw - y, np.ones_like(raw)


def train_gbdt(ds: TabularDataset, cfg: GbdtConfig = GbdtConfig(), seed: int = 0) -> GbdtModel:
    """Fit ``cfg.n_rounds`` trees; degenerate label sets yield a flagged constant model."""
    X = np.asarray(ds.X, dtype=np.float64)
    y = np.asarray(ds.y, dtype=np.float64)
    if ds.task_kind not in TASK_KINDS:
        raise ValueError(f"unknown task kind {ds.task_kind!r}")
    if len(y) == 0 or X.ndim != 2 or X.shape[1] == 0:
        raise ValueError("training set must be non-empty with at least one feature")
    n, d = X.shape
    rng = np.random.default_rng(seed)
    if ds.task_kind == BINARY:
        m = float(np.clip(y.mean(), 1e-6, 1 - 1e-6))
        base = float(np.log(m / (1 - m)))
        degenerate = bool(np.all(y == y[0]))
    else:
        base = float(y.mean())
        degenerate = bool(np.all(y == y[0]))
    model = GbdtModel([], cfg.learning_rate, base, ds.task_kind, d, degenerate, {"config": asdict(cfg), "seed": seed})
    if degenerate:
        log.warning("degenerate training labels (all %r); returning constant model", y[0])
        return model
    raw = np.full(n, base)
    n_rows = max(1, int(round(cfg.subsample * n)))
    n_cols = max(1, int(round(cfg.colsample * d)))
    presorted = np.argsort(X, axis=0, kind="stable")
    member = np.zeros(n, dtype=bool)
    for _ in range(cfg.n_rounds):
        g, h = _grad(ds.task_kind, raw, y)
        cols = np.sort(rng.choice(d, n_cols, replace=False)) if n_cols < d else np.arange(d)
        order = presorted[:, cols]
        if n_rows < n:
            member[:] = False
            member[rng.choice(n, n_rows, replace=False)] = True
            order = order.T[member[order.T]].reshape(len(cols), n_rows).T
        tree = _grow_tree(X, g, h, order, cols, cfg)
        model.trees.append(tree)
        raw += tree.predict(X)
    return model
