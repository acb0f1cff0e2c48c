"""Heterogeneous GraphSAGE with sum aggregation and typed input projections.

Each node type has its own input projection to the hidden width. A layer
updates node ``v`` of type ``k`` as::

    h'_v = act(W_self[k] h_v + b[k] + sum_r W_r sum_{u in N_r(v)} h_u)

where ``r`` ranges over both directions of every edge type touching ``k``.
The activation is ReLU except on the last layer, which is followed by a
linear head on the target table.
"""
from __future__ import annotations

import json
import logging
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .distill import DistillMlp, DivergenceError
from .features import FeatureConfig, engineer_features_batch
from .gbdt import GbdtModel
from .graph import HeteroGraph
from .metrics import mae, rocauc
from .optim import Adam
from .store import BINARY, RelationalDatabase

log = logging.getLogger(__name__)

DISTILLED, RAW, WITH_PRED = "distilled", "raw", "with_pred"
NODE_INIT_MODES = (DISTILLED, RAW, WITH_PRED)


@dataclass(frozen=True)
class GnnConfig:
    hidden: int = 64
    depth: int = 2
    dropout: float = 0.1
    lr: float = 0.01
    epochs: int = 30
    seed: int = 0

    def __post_init__(self):
        if not 2 <= self.depth <= 6:
            raise ValueError("depth must lie in [2, 6]")
        if self.hidden < 1 or self.epochs < 1:
            raise ValueError("hidden and epochs must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")


# ---------------------------------------------------------------------------
# Node inputs


def injected_width(mode: str, embedding_dim: int = 10) -> int:
    return {DISTILLED: embedding_dim, RAW: 0, WITH_PRED: 1}[mode]


def node_inputs(g: HeteroGraph, target_table: int, injected: np.ndarray | None = None) -> list[np.ndarray]:
    """Per-type input matrices; ``injected`` columns are prepended on the target type."""
    h0 = list(g.x)
    if injected is not None:
        injected = np.asarray(injected, dtype=np.float64)
        if injected.ndim == 1:
            injected = injected[:, None]
        if len(injected) != g.count(target_table):
            raise ValueError(f"{len(injected)} injected rows for {g.count(target_table)} target nodes")
        h0[target_table] = np.hstack([injected, g.x[target_table]])
    return h0


def compute_injection(
    mode: str,
    g: HeteroGraph,
    db: RelationalDatabase,
    t: int,
    target_table: int,
    mlp: DistillMlp | None = None,
    teacher: GbdtModel | None = None,
    fe_cfg: FeatureConfig = FeatureConfig(),
) -> np.ndarray | None:
    """Embeddings or teacher predictions for the target nodes, from full history up to ``t``."""
    if mode not in NODE_INIT_MODES:
        raise ValueError(f"unknown node init mode {mode!r}")
    if mode == RAW:
        return None
    pks = g.pks_of(target_table)
    f = engineer_features_batch(db, target_table, pks, t, fe_cfg)
    if mode == DISTILLED:
        if mlp is None:
            raise ValueError("distilled mode needs a trained DistillMlp")
        return mlp.embed(f)
    if teacher is None:
        raise ValueError("with_pred mode needs a trained teacher")
    return teacher.predict(f)[:, None]


def init_node_features(
    g: HeteroGraph,
    mode: str,
    db: RelationalDatabase,
    t: int,
    target_table: int,
    mlp: DistillMlp | None = None,
    teacher: GbdtModel | None = None,
    fe_cfg: FeatureConfig = FeatureConfig(),
) -> list[np.ndarray]:
    inj = compute_injection(mode, g, db, t, target_table, mlp, teacher, fe_cfg)
    return node_inputs(g, target_table, inj)


# ---------------------------------------------------------------------------
# Model


def _rel_key(et, reverse: bool) -> str:
    return f"{et[0]}{'<' if reverse else '>'}{et[1]}"


@dataclass
class HeteroSageModel:
    params: dict[str, np.ndarray]
    in_dims: tuple[int, ...]
    edge_types: tuple[tuple[int, int], ...]
    target_table: int
    task_kind: str
    hidden: int
    depth: int
    dropout: float = 0.0
    mode: str = RAW
    norm_mean: list[np.ndarray] = field(default_factory=list)
    norm_scale: list[np.ndarray] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @classmethod
    def init(cls, in_dims: Sequence[int], edge_types, target_table: int, task_kind: str,
             cfg: GnnConfig, mode: str = RAW) -> "HeteroSageModel":
        rng = np.random.default_rng(cfg.seed)
        H = cfg.hidden
        params = {}
        for k, d in enumerate(in_dims):
            params[f"in.W.{k}"] = rng.normal(0.0, 1.0 / np.sqrt(max(d, 1)), (d, H))
            params[f"in.b.{k}"] = np.zeros(H)
        for l in range(cfg.depth):
            for k in range(len(in_dims)):
                params[f"L{l}.self.{k}"] = rng.normal(0.0, 1.0 / np.sqrt(H), (H, H))
                params[f"L{l}.bias.{k}"] = np.zeros(H)
            for et in edge_types:
                for rev in (False, True):
                    params[f"L{l}.rel.{_rel_key(et, rev)}"] = rng.normal(0.0, 1.0 / np.sqrt(H), (H, H))
        params["head.W"] = rng.normal(0.0, 1.0 / np.sqrt(H), (H, 1))
        params["head.b"] = np.zeros(1)
        return cls(
            params, tuple(int(d) for d in in_dims), tuple(tuple(e) for e in edge_types), target_table,
            task_kind, H, cfg.depth, cfg.dropout, mode,
            [np.zeros(d) for d in in_dims], [np.ones(d) for d in in_dims],
        )

    def fit_normalizer(self, h0_list: Sequence[list[np.ndarray]]) -> None:
        """Per-type z-score statistics pooled over the given graphs' inputs."""
        for k in range(len(self.in_dims)):
            rows = [h0[k] for h0 in h0_list if len(h0[k])]
            if not rows:
                continue
            X = np.vstack(rows)
            s = X.std(axis=0)
            s[s == 0] = 1.0
            self.norm_mean[k] = X.mean(axis=0)
            self.norm_scale[k] = s

    # relations carrying messages into type k: (edge type, reverse flag, source type)
    def _incoming(self, k: int):
        for et in self.edge_types:
            if et[1] == k:
                yield et, False, et[0]
            if et[0] == k:
                yield et, True, et[1]

    def forward(self, g: HeteroGraph, h0: Sequence[np.ndarray], train: bool = False,
                rng: np.random.Generator | None = None):
        """Logits (or scalar outputs) for every target-type node, plus a cache for backward."""
        p = self.params
        n_types = len(self.in_dims)
        if len(h0) != n_types:
            raise ValueError(f"expected inputs for {n_types} node types, got {len(h0)}")
        xs = []
        for k in range(n_types):
            x = np.asarray(h0[k], dtype=np.float64)
            if x.shape[1] != self.in_dims[k]:
                raise ValueError(f"node type {k}: input width {x.shape[1]} != {self.in_dims[k]}")
            xs.append((x - self.norm_mean[k]) / self.norm_scale[k])
        H = [xs[k] @ p[f"in.W.{k}"] + p[f"in.b.{k}"] for k in range(n_types)]
        layers = []
        for l in range(self.depth):
            last = l == self.depth - 1
            types = [self.target_table] if last else range(n_types)
            pre, out, masks = {}, {}, {}
            for k in types:
                z = H[k] @ p[f"L{l}.self.{k}"] + p[f"L{l}.bias.{k}"]
                for et, rev, s in self._incoming(k):
                    A = g.adjacency[et][1 if rev else 0]
                    W = p[f"L{l}.rel.{_rel_key(et, rev)}"]
                    if A.shape[0] <= A.shape[1]:
                        z = z + (A @ H[s]) @ W
                    else:
                        z = z + A @ (H[s] @ W)
                pre[k] = z
                if last:
                    out[k] = z
                else:
                    a = np.maximum(z, 0.0)
                    if train and self.dropout > 0:
                        masks[k] = (rng.random(a.shape) >= self.dropout) / (1.0 - self.dropout)
                        a = a * masks[k]
                    out[k] = a
            layers.append((H, pre, masks))
            H = [out.get(k) for k in range(n_types)]
        ht = H[self.target_table]
        y = (ht @ p["head.W"] + p["head.b"])[:, 0]
        if not np.isfinite(y).all():
            raise DivergenceError("non-finite GNN outputs")
        return y, (xs, layers, ht)

    def backward(self, g: HeteroGraph, cache, dy: np.ndarray) -> dict[str, np.ndarray]:
        p = self.params
        xs, layers, ht = cache
        n_types = len(self.in_dims)
        grads = {k: np.zeros_like(v) for k, v in p.items()}
        grads["head.W"] = ht.T @ dy[:, None]
        grads["head.b"] = np.array([dy.sum()])
        dH = {self.target_table: dy[:, None] @ p["head.W"].T}
        for l in reversed(range(self.depth)):
            Hin, pre, masks = layers[l]
            last = l == self.depth - 1
            dIn = [None] * n_types
            for k, z in pre.items():
                d = dH.get(k)
                if d is None:
                    continue
                if not last:
                    if k in masks:
                        d = d * masks[k]
                    d = d * (z > 0)
                grads[f"L{l}.self.{k}"] += Hin[k].T @ d
                grads[f"L{l}.bias.{k}"] += d.sum(axis=0)
                dIn[k] = d @ p[f"L{l}.self.{k}"].T if dIn[k] is None else dIn[k] + d @ p[f"L{l}.self.{k}"].T
                for et, rev, s in self._incoming(k):
                    A, AT = g.adjacency[et]
                    if rev:
                        A, AT = AT, A
                    key = f"L{l}.rel.{_rel_key(et, rev)}"
                    W = p[key]
                    if A.shape[0] <= A.shape[1]:
                        grads[key] += (A @ Hin[s]).T @ d
                        ds = AT @ (d @ W.T)
                    else:
                        G = AT @ d
                        grads[key] += Hin[s].T @ G
                        ds = G @ W.T
                    dIn[s] = ds if dIn[s] is None else dIn[s] + ds
            dH = {k: v for k, v in enumerate(dIn) if v is not None}
        for k, d in dH.items():
            grads[f"in.W.{k}"] += xs[k].T @ d
            grads[f"in.b.{k}"] += d.sum(axis=0)
        return grads

    def loss_and_grads(self, g: HeteroGraph, h0, targets: np.ndarray, labels: np.ndarray,
                       train: bool = False, rng: np.random.Generator | None = None):
        """Mean BCE-with-logits (binary) or mean absolute error (regression) over ``targets``."""
        y, cache = self.forward(g, h0, train=train, rng=rng)
        n_t = len(y)
        z = y[targets]
        labels = np.asarray(labels, dtype=np.float64)
        m = len(targets)
        if self.task_kind == BINARY:
            loss = float(np.mean(np.maximum(z, 0) - z * labels + np.log1p(np.exp(-np.abs(z)))))
            dz = (np.exp(-np.logaddexp(0.0, -z)) - labels) / m
        else:
            r = z - labels
            loss = float(np.mean(np.abs(r)))
            dz = np.sign(r) / m
        dy = np.zeros(n_t)
        np.add.at(dy, targets, dz)
        return loss, self.backward(g, cache, dy)

    def predict(self, g: HeteroGraph, h0, targets: np.ndarray | None = None) -> np.ndarray:
        y, _ = self.forward(g, h0)
        return y if targets is None else y[targets]

    def to_dict(self) -> dict:
        return {
            "in_dims": list(self.in_dims),
            "edge_types": [list(e) for e in self.edge_types],
            "target_table": self.target_table,
            "task_kind": self.task_kind,
            "hidden": self.hidden,
            "depth": self.depth,
            "dropout": self.dropout,
            "mode": self.mode,
            "norm_mean": [m.tolist() for m in self.norm_mean],
            "norm_scale": [s.tolist() for s in self.norm_scale],
            "meta": self.meta,
            "params": {k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in self.params.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HeteroSageModel":
        params = {k: np.array(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in d["params"].items()}
        return cls(
            params, tuple(d["in_dims"]), tuple(tuple(e) for e in d["edge_types"]), int(d["target_table"]),
            d["task_kind"], int(d["hidden"]), int(d["depth"]), float(d["dropout"]), d["mode"],
            [np.array(m, dtype=np.float64) for m in d["norm_mean"]],
            [np.array(s, dtype=np.float64) for s in d["norm_scale"]],
            dict(d.get("meta", {})),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "HeteroSageModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def sage_layer(g: HeteroGraph, h: Sequence[np.ndarray], params: dict[str, np.ndarray],
               edge_types, last: bool = False, layer: int = 0) -> list[np.ndarray]:
    """One message-passing layer over every node type, parameters named as in the model."""
    out = []
    for k in range(len(h)):
        z = h[k] @ params[f"L{layer}.self.{k}"] + params[f"L{layer}.bias.{k}"]
        for et in edge_types:
            if et[1] == k:
                z = z + g.adjacency[et][0] @ h[et[0]] @ params[f"L{layer}.rel.{_rel_key(et, False)}"]
            if et[0] == k:
                z = z + g.adjacency[et][1] @ h[et[1]] @ params[f"L{layer}.rel.{_rel_key(et, True)}"]
        out.append(z if last else np.maximum(z, 0.0))
    return out


def forward(model: HeteroSageModel, g: HeteroGraph, h0, targets: np.ndarray) -> np.ndarray:
    """Eval-mode outputs for the given target node positions."""
    targets = np.asarray(targets, dtype=np.int64)
    n_t = g.count(model.target_table)
    if len(targets) and (targets.min() < 0 or targets.max() >= n_t):
        raise KeyError("target index outside the target node range")
    return model.predict(g, h0, targets)


# ---------------------------------------------------------------------------
# Training


@dataclass
class GraphSample:
    """One seed time: its graph, node inputs and labelled target positions."""
    graph: HeteroGraph
    h0: list[np.ndarray]
    targets: np.ndarray
    labels: np.ndarray
    seed_time: int = 0


@dataclass
class TrainRun:
    epoch_loss: list[float] = field(default_factory=list)
    val_metric: list[float] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)
    best_epoch: int = -1
    test_metric: float | None = None
    seed: int = 0

    def to_csv(self, path: str | Path) -> None:
        lines = ["epoch,loss,val_metric,seconds"]
        for e, (l, v, s) in enumerate(zip(self.epoch_loss, self.val_metric, self.epoch_seconds)):
            lines.append(f"{e},{l!r},{v!r},{s!r}")
        Path(path).write_text("\n".join(lines) + "\n")


def evaluate(model: HeteroSageModel, samples: Sequence[GraphSample]) -> float:
    """ROCAUC (binary) or MAE (regression) pooled over the samples."""
    preds = np.concatenate([model.predict(s.graph, s.h0, s.targets) for s in samples])
    labels = np.concatenate([s.labels for s in samples])
    if model.task_kind == BINARY:
        return rocauc(preds, labels)
    return mae(preds, labels)


def train_gnn(model: HeteroSageModel, train: Sequence[GraphSample], val: Sequence[GraphSample],
              cfg: GnnConfig) -> TrainRun:
    """Whole-graph steps, one seed time per step; keeps the parameters of the best validation epoch."""
    if not train:
        raise ValueError("need at least one training seed time")
    rng = np.random.default_rng(cfg.seed + 1)
    opt = Adam(model.params, lr=cfg.lr)
    run = TrainRun(seed=cfg.seed)
    # without validation data, select on training loss
    higher = model.task_kind == BINARY and bool(val)
    better = (lambda a, b: a > b) if higher else (lambda a, b: a < b)
    best = None
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        total = 0.0
        for i in rng.permutation(len(train)):
            s = train[i]
            loss, grads = model.loss_and_grads(s.graph, s.h0, s.targets, s.labels, train=True, rng=rng)
            if not np.isfinite(loss):
                raise DivergenceError(f"non-finite GNN loss at epoch {epoch}, seed time {s.seed_time}")
            opt.step(grads)
            total += loss
        run.epoch_seconds.append(time.perf_counter() - t0)
        run.epoch_loss.append(total / len(train))
        metric = evaluate(model, val) if val else run.epoch_loss[-1]
        run.val_metric.append(metric)
        if best is None or better(metric, best):
            best = metric
            run.best_epoch = epoch
            snapshot = {k: v.copy() for k, v in model.params.items()}
        log.debug("gnn epoch %d loss %.5f val %.5f", epoch, run.epoch_loss[-1], metric)
    for k, v in snapshot.items():
        model.params[k][...] = v
    model.meta = {"config": asdict(cfg), "best_epoch": run.best_epoch}
    return run


def infer_timed(model: HeteroSageModel, g: HeteroGraph, injected: np.ndarray | None, targets: np.ndarray,
                repeats: int = 5) -> tuple[np.ndarray, float]:
    """Median wall time of input assembly plus forward pass; a warm-up call is discarded."""
    if repeats < 3:
        raise ValueError("repeats must be >= 3")
    h0 = node_inputs(g, model.target_table, injected)
    preds = model.predict(g, h0, targets)
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        h0 = node_inputs(g, model.target_table, injected)
        preds = model.predict(g, h0, targets)
        times.append(time.perf_counter() - t0)
    return preds, statistics.median(times)
