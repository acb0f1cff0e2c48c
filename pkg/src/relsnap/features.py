"""Lag-window aggregate features for entities, read strictly from history <= t."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .store import RelationalDatabase, TaskSpec


@dataclass(frozen=True)
class FeatureConfig:
    # None stands for the whole history
    windows: tuple[int | None, ...] = (1, 4, 16, None)

    def to_dict(self) -> dict:
        return {"windows": [w for w in self.windows]}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureConfig":
        return cls(tuple(None if w is None else int(w) for w in d.get("windows", (1, 4, 16, None))))


@dataclass(frozen=True)
class FeatureVector:
    values: np.ndarray
    entity: tuple[int, int]
    seed_time: int


@dataclass
class TabularDataset:
    X: np.ndarray
    y: np.ndarray
    task_kind: str
    entity: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    seed_time: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    feature_names: tuple[str, ...] = ()

    def __len__(self) -> int:
        return len(self.y)

    @property
    def n_features(self) -> int:
        return self.X.shape[1]


def _linked_tables(db: RelationalDatabase, table: int) -> list[int]:
    return [i for i, tab in enumerate(db.tables) if table in tab.defn.fk_targets]


def feature_names(db: RelationalDatabase, table: int, cfg: FeatureConfig) -> tuple[str, ...]:
    tab = db.table(table)
    names = [f"{tab.name}.{c}" for c in tab.defn.feature_names]
    for i in _linked_tables(db, table):
        other = db.tables[i]
        for w in cfg.windows:
            tag = "all" if w is None else f"w{w}"
            names.append(f"{other.name}.count.{tag}")
            names += [f"{other.name}.sum.{c}.{tag}" for c in other.defn.feature_names]
            names += [f"{other.name}.mean.{c}.{tag}" for c in other.defn.feature_names]
        names.append(f"{other.name}.recency")
    return tuple(names)


def engineer_features_batch(
    db: RelationalDatabase, table: int, pks: np.ndarray, t: int, cfg: FeatureConfig = FeatureConfig()
) -> np.ndarray:
    """Feature matrix for entities ``pks`` of ``table`` at seed time ``t``.

    Layout: the entity's own features, then for every table holding a foreign
    key into ``table`` and every window: linked-row count, per-feature sums,
    per-feature means; then ticks since the latest linked row (``t + 1`` if none).
    """
    if t < 0:
        raise ValueError(f"seed time must be >= 0, got {t}")
    tab = db.table(table)
    pks = np.asarray(pks, dtype=np.int64)
    idx, found = tab.locate(pks)
    if not found.all():
        raise KeyError(f"unknown entities {pks[~found][:5].tolist()} in table {tab.name!r}")
    n = len(pks)
    blocks = [tab.x[idx]]
    # positions of each requested pk, tolerant of repeats and arbitrary order
    order = np.argsort(pks, kind="stable")
    spk = pks[order]
    for i in _linked_tables(db, table):
        other = db.tables[i]
        rows = other.rows_in(None, t)
        fk = other.fk[rows, table]
        pos = np.searchsorted(spk, fk)
        pos_c = np.minimum(pos, max(n - 1, 0))
        hit = (fk > 0) & (pos < n) & (spk[pos_c] == fk) if n else np.zeros(len(fk), bool)
        rows, slot = rows[hit], order[pos_c[hit]]
        # duplicate requested pks share the first slot; copy afterwards
        rt = other.time[rows]
        rx = other.x[rows]
        d = other.defn.feature_dim
        for w in cfg.windows:
            m = np.ones(len(rows), bool) if w is None else rt > t - w
            cnt = np.bincount(slot[m], minlength=n).astype(np.float64)
            sums = np.zeros((n, d))
            for c in range(d):
                sums[:, c] = np.bincount(slot[m], weights=rx[m, c], minlength=n)
            with np.errstate(invalid="ignore", divide="ignore"):
                means = np.where(cnt[:, None] > 0, sums / np.maximum(cnt, 1.0)[:, None], 0.0)
            blocks += [cnt[:, None], sums, means]
        latest = np.full(n, np.iinfo(np.int64).min)
        np.maximum.at(latest, slot, rt)
        recency = np.where(latest == np.iinfo(np.int64).min, t + 1, t - latest).astype(np.float64)
        blocks.append(recency[:, None])
    out = np.hstack(blocks) if blocks else np.zeros((n, 0))
    if n and len(np.unique(pks)) != n:
        # rows for repeated pks were only accumulated at the first occurrence's slot
        first = order[np.searchsorted(spk, pks)]
        out[:, tab.defn.feature_dim:] = out[first, tab.defn.feature_dim:]
    return out


def engineer_features(
    db: RelationalDatabase, entity: tuple[int, int], t: int, cfg: FeatureConfig = FeatureConfig()
) -> FeatureVector:
    table, pk = entity
    values = engineer_features_batch(db, table, np.array([pk]), t, cfg)[0]
    return FeatureVector(values, (table, int(pk)), int(t))


def build_dataset(
    db: RelationalDatabase, task: TaskSpec, seed_times, cfg: FeatureConfig = FeatureConfig()
) -> TabularDataset:
    """Pool (features at t, label at t) over the given seed times."""
    Xs, ys, es, ts = [], [], [], []
    for t in seed_times:
        pks, y = task.at(int(t))
        Xs.append(engineer_features_batch(db, task.target_table, pks, int(t), cfg))
        ys.append(y)
        es.append(pks)
        ts.append(np.full(len(pks), int(t), dtype=np.int64))
    d = len(feature_names(db, task.target_table, cfg))
    return TabularDataset(
        X=np.vstack(Xs) if Xs else np.zeros((0, d)),
        y=np.concatenate(ys) if ys else np.zeros(0),
        task_kind=task.task_kind,
        entity=np.concatenate(es) if es else np.zeros(0, np.int64),
        seed_time=np.concatenate(ts) if ts else np.zeros(0, np.int64),
        feature_names=feature_names(db, task.target_table, cfg),
    )
