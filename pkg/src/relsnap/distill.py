"""Two-head MLP student distilled from a tree-ensemble teacher.

The trunk is a stack of ReLU layers whose last output is the entity
embedding; a hard head is fit to the true labels and a soft head to the
teacher's temperature-softened predictions. For binary tasks both heads emit
two logits passed through a softmax; for regression both are scalar and
trained with mean absolute error.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .features import TabularDataset
from .gbdt import GbdtModel
from .optim import Adam
from .store import BINARY, REGRESSION

log = logging.getLogger(__name__)

PROB_EPS = 1e-12


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class DistillConfig:
    alpha: float = 0.5
    temperature: float = 2.0
    lr: float = 0.01
    dropout: float = 0.1
    epochs: int = 20
    batch_size: int = 256
    hidden: tuple[int, ...] = (32,)
    embedding_dim: int = 10
    seed: int = 0
    # cosine decay of the learning rate down to lr * lr_floor over the run
    lr_floor: float = 0.01

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.temperature < 1.0:
            raise ValueError("temperature must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if not 0.0 <= self.lr_floor <= 1.0:
            raise ValueError("lr_floor must lie in [0, 1]")
        if self.epochs < 1 or self.batch_size < 1 or self.embedding_dim < 1:
            raise ValueError("epochs, batch_size and embedding_dim must be positive")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))


# ---------------------------------------------------------------------------
# Losses


def soften(y_tb, F: float) -> np.ndarray:
    """Temperature softmax of log ``[1 - p, p]``; returns shape ``(..., 2)``."""
    p = np.asarray(y_tb, dtype=np.float64)
    if not np.isfinite(p).all():
        raise ValueError("teacher probabilities must be finite")
    if F < 1:
        raise ValueError("temperature must be >= 1")
    p = np.clip(p, PROB_EPS, 1.0 - PROB_EPS)
    z = np.stack([np.log1p(-p), np.log(p)], axis=-1) / F
    z -= z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _check(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def hard_loss(pred, labels) -> float:
    """Summed cross-entropy for ``(n, C)`` distributions, mean absolute error for scalars."""
    pred = np.asarray(pred, dtype=np.float64)
    labels = np.asarray(labels)
    _check(pred, labels)
    if pred.ndim == 2:
        if labels.ndim != 1:
            raise ValueError("class labels must be a vector")
        picked = pred[np.arange(len(labels)), labels.astype(np.int64)]
        return float(-np.log(np.clip(picked, PROB_EPS, 1.0)).sum())
    if pred.shape != labels.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {labels.shape}")
    return float(np.abs(pred - labels).mean())


def soft_loss(student, teacher) -> float:
    """Summed cross-entropy against teacher distributions; MAE for scalar teachers."""
    student = np.asarray(student, dtype=np.float64)
    teacher = np.asarray(teacher, dtype=np.float64)
    if student.shape != teacher.shape:
        raise ValueError(f"shape mismatch: {student.shape} vs {teacher.shape}")
    if student.ndim == 2:
        return float(-(teacher * np.log(np.clip(student, PROB_EPS, 1.0))).sum())
    return float(np.abs(student - teacher).mean())


def total_loss(hard: float, soft: float, alpha: float, F: float) -> float:
    return alpha * hard + (1.0 - alpha) * F * F * soft


# ---------------------------------------------------------------------------
# Model


def _relu(x):
    return np.maximum(x, 0.0)


def _log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


@dataclass
class DistillMlp:
    params: dict[str, np.ndarray]
    n_trunk: int
    task_kind: str
    mean: np.ndarray
    scale: np.ndarray
    dropout: float = 0.0
    meta: dict = field(default_factory=dict)
    # regression heads work in standardised target units
    y_mean: float = 0.0
    y_scale: float = 1.0

    @classmethod
    def init(cls, n_in: int, cfg: DistillConfig, task_kind: str, rng: np.random.Generator,
             mean=None, scale=None) -> "DistillMlp":
        widths = [n_in, *cfg.hidden, cfg.embedding_dim]
        params = {}
        for k, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            params[f"W{k}"] = rng.normal(0.0, np.sqrt(2.0 / a), (a, b))
            params[f"b{k}"] = np.zeros(b)
        out = 2 if task_kind == BINARY else 1
        for head in ("hard", "soft"):
            params[f"W_{head}"] = rng.normal(0.0, np.sqrt(1.0 / widths[-1]), (widths[-1], out))
            params[f"b_{head}"] = np.zeros(out)
        return cls(
            params,
            len(widths) - 1,
            task_kind,
            np.zeros(n_in) if mean is None else np.asarray(mean, float),
            np.ones(n_in) if scale is None else np.asarray(scale, float),
            cfg.dropout,
        )

    @property
    def n_in(self) -> int:
        return self.params["W0"].shape[0]

    @property
    def embedding_dim(self) -> int:
        return self.params[f"W{self.n_trunk - 1}"].shape[1]

    def _input(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != self.n_in:
            raise ValueError(f"expected {self.n_in} input features, got {X.shape[1]}")
        return (X - self.mean) / self.scale

    def forward(self, X, train: bool = False, rng: np.random.Generator | None = None):
        """Return ``(embedding, hard_out, soft_out, cache)`` for a normalised forward pass."""
        h = self._input(X)
        cache = []
        for k in range(self.n_trunk):
            z = h @ self.params[f"W{k}"] + self.params[f"b{k}"]
            a = _relu(z)
            mask = None
            if train and self.dropout > 0:
                mask = (rng.random(a.shape) >= self.dropout) / (1.0 - self.dropout)
                a = a * mask
            cache.append((h, z, mask))
            h = a
        hard = h @ self.params["W_hard"] + self.params["b_hard"]
        soft = h @ self.params["W_soft"] + self.params["b_soft"]
        if not (np.isfinite(hard).all() and np.isfinite(soft).all()):
            raise DivergenceError("non-finite activations in MLP forward pass")
        return h, hard, soft, cache

    def embed(self, X) -> np.ndarray:
        return self.forward(X)[0]

    def _out(self, raw):
        if self.task_kind == BINARY:
            return np.exp(_log_softmax(raw))[:, 1]
        return raw[:, 0] * self.y_scale + self.y_mean

    def predict_hard(self, X) -> np.ndarray:
        return self._out(self.forward(X)[1])

    def predict_soft(self, X) -> np.ndarray:
        return self._out(self.forward(X)[2])

    def to_dict(self) -> dict:
        return {
            "task_kind": self.task_kind,
            "n_trunk": self.n_trunk,
            "dropout": self.dropout,
            "mean": self.mean.tolist(),
            "scale": self.scale.tolist(),
            "y_mean": self.y_mean,
            "y_scale": self.y_scale,
            "meta": self.meta,
            "params": {k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in self.params.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DistillMlp":
        params = {k: np.array(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in d["params"].items()}
        return cls(params, int(d["n_trunk"]), d["task_kind"], np.array(d["mean"]), np.array(d["scale"]),
                   float(d["dropout"]), dict(d.get("meta", {})),
                   float(d.get("y_mean", 0.0)), float(d.get("y_scale", 1.0)))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "DistillMlp":
        return cls.from_dict(json.loads(Path(path).read_text()))


def embed(mlp: DistillMlp, f) -> np.ndarray:
    """Penultimate-layer activations; a single vector for 1-D input, else one row per input."""
    values = getattr(f, "values", f)
    values = np.asarray(values, dtype=np.float64)
    out = mlp.embed(values)
    return out[0] if values.ndim == 1 else out


def _head_loss(task_kind, raw, target, soft: bool):
    """Loss and d loss / d raw for one head."""
    if task_kind == BINARY:
        logp = _log_softmax(raw)
        if soft:
            q = target
        else:
            q = np.zeros_like(raw)
            q[np.arange(len(target)), target.astype(np.int64)] = 1.0
        loss = float(-(q * logp).sum())
        return loss, np.exp(logp) * q.sum(axis=1, keepdims=True) - q
    r = raw[:, 0] - target
    n = len(r)
    return float(np.abs(r).mean()), (np.sign(r) / n)[:, None]


def mlp_forward_backward(mlp: DistillMlp, X, y, target, alpha: float, F: float,
                         train: bool = False, rng: np.random.Generator | None = None):
    """Composite distillation loss and exact parameter gradients for one batch.

    ``target`` is the soft-target matrix (binary) or the teacher scalar (regression).
    For regression the temperature factor is fixed at 1 and both losses are
    measured in standardised units, i.e. divided by ``mlp.y_scale``.
    """
    if len(y) == 0:
        raise ValueError("empty batch")
    if mlp.task_kind == REGRESSION:
        F = 1.0
        y = (np.asarray(y, dtype=np.float64) - mlp.y_mean) / mlp.y_scale
        target = (np.asarray(target, dtype=np.float64) - mlp.y_mean) / mlp.y_scale
    emb, hard_raw, soft_raw, cache = mlp.forward(X, train=train, rng=rng)
    lh, dh = _head_loss(mlp.task_kind, hard_raw, np.asarray(y), soft=False)
    ls, ds = _head_loss(mlp.task_kind, soft_raw, np.asarray(target), soft=True)
    ws = (1.0 - alpha) * F * F
    loss = alpha * lh + ws * ls
    dh = alpha * dh
    ds = ws * ds
    p = mlp.params
    grads = {
        "W_hard": emb.T @ dh,
        "b_hard": dh.sum(axis=0),
        "W_soft": emb.T @ ds,
        "b_soft": ds.sum(axis=0),
    }
    da = dh @ p["W_hard"].T + ds @ p["W_soft"].T
    for k in reversed(range(mlp.n_trunk)):
        h_in, z, mask = cache[k]
        if mask is not None:
            da = da * mask
        dz = da * (z > 0)
        grads[f"W{k}"] = h_in.T @ dz
        grads[f"b{k}"] = dz.sum(axis=0)
        da = dz @ p[f"W{k}"].T
    return loss, grads


def teacher_targets(teacher: GbdtModel, X: np.ndarray, F: float) -> tuple[np.ndarray, np.ndarray]:
    """Teacher predictions and the matching soft targets, computed once for the whole set."""
    y_tb = teacher.predict(X)
    if teacher.task_kind == BINARY:
        return y_tb, soften(y_tb, F)
    return y_tb, y_tb


def train_distill_mlp(ds: TabularDataset, teacher: GbdtModel | None, cfg: DistillConfig = DistillConfig(),
                      targets: np.ndarray | None = None) -> DistillMlp:
    """Mini-batch Adam on the blended hard/soft objective.

    ``targets`` overrides the soft targets derived from ``teacher``.
    """
    X = np.asarray(ds.X, dtype=np.float64)
    y = np.asarray(ds.y, dtype=np.float64)
    if len(y) == 0:
        raise ValueError("empty training set")
    if targets is None:
        if teacher is None:
            raise ValueError("a teacher or explicit soft targets are required")
        if teacher.n_features != X.shape[1]:
            raise ValueError("teacher was trained on a different feature space")
        _, targets = teacher_targets(teacher, X, cfg.temperature)
    rng = np.random.default_rng(cfg.seed)
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale == 0] = 1.0
    mlp = DistillMlp.init(X.shape[1], cfg, ds.task_kind, rng, mean, scale)
    if ds.task_kind == REGRESSION:
        mlp.y_mean = float(y.mean())
        mlp.y_scale = float(y.std()) or 1.0
    opt = Adam(mlp.params, lr=cfg.lr)
    F = cfg.temperature if ds.task_kind == BINARY else 1.0
    history = []
    n = len(y)
    for epoch in range(cfg.epochs):
        frac = epoch / max(cfg.epochs - 1, 1)
        opt.lr = cfg.lr * (cfg.lr_floor + (1.0 - cfg.lr_floor) * 0.5 * (1.0 + np.cos(np.pi * frac)))
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            b = order[start:start + cfg.batch_size]
            loss, grads = mlp_forward_backward(mlp, X[b], y[b], targets[b], cfg.alpha, F, train=True, rng=rng)
            if not np.isfinite(loss):
                raise DivergenceError(f"non-finite distillation loss at epoch {epoch}, batch starting {start}")
            opt.step(grads)
            total += loss
        history.append(total)
        log.debug("distill epoch %d loss %.6g", epoch, total)
    mlp.dropout = cfg.dropout
    mlp.meta = {"config": asdict(cfg), "epoch_loss": history}
    return mlp
