"""Seeded users/products/transactions databases with a tunable temporal signal.

Each user's transaction rate is ``c * exp(base_u + z_u(t))`` where ``base_u``
is a linear function of the user's static features and ``z_u`` is a
stationary AR(1) process with persistence ``temporal_signal``. At zero
persistence the latent term is fresh noise every tick, so a user's past
activity says nothing beyond what the static features already tell.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .store import (
    BINARY,
    REGRESSION,
    STATIC_TIME,
    RelationalDatabase,
    Table,
    TableDef,
    TaskSpec,
    save_database,
    save_task,
)

USERS, PRODUCTS, TRANSACTIONS = 0, 1, 2


@dataclass(frozen=True)
class SynthConfig:
    n_users: int = 200
    n_products: int = 50
    n_timestamps: int = 100
    tx_per_tick: float = 200.0
    temporal_signal: float = 0.9
    horizon: int = 4
    latent_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if min(self.n_users, self.n_products, self.n_timestamps, self.horizon) < 1:
            raise ValueError("counts and horizon must be >= 1")
        if self.tx_per_tick <= 0:
            raise ValueError("tx_per_tick must be positive")
        if not 0.0 <= self.temporal_signal <= 1.0:
            raise ValueError("temporal_signal must lie in [0, 1]")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


USER_COEF = np.array([0.8, -0.6, 0.3])


def schema_defs() -> list[TableDef]:
    return [
        TableDef(USERS, "users", ("u0", "u1", "u2"), (), True, "user_id", None),
        TableDef(PRODUCTS, "products", ("p0", "p1"), (), True, "product_id", None),
        TableDef(
            TRANSACTIONS, "transactions", ("amount", "channel"), (USERS, PRODUCTS), False,
            "tx_id", "timestamp", (("user_id", USERS), ("product_id", PRODUCTS)),
        ),
    ]


def latent_paths(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    """Stationary AR(1) paths, shape ``(n_timestamps, n_users)``."""
    rho, s = cfg.temporal_signal, cfg.latent_scale
    z = np.empty((cfg.n_timestamps, cfg.n_users))
    z[0] = rng.normal(0.0, s, cfg.n_users)
    innov = s * np.sqrt(1.0 - rho * rho)
    for t in range(1, cfg.n_timestamps):
        z[t] = rho * z[t - 1] + innov * rng.normal(0.0, 1.0, cfg.n_users)
    return z


def window_counts(entity_of_tx: np.ndarray, tx_time: np.ndarray, n_entities: int, lo: int, hi: int) -> np.ndarray:
    """Transactions per entity (1-based pks) with ``lo < time <= hi``."""
    m = (tx_time > lo) & (tx_time <= hi)
    return np.bincount(entity_of_tx[m] - 1, minlength=n_entities)


def seed_times_for(n_timestamps: int, horizon: int) -> np.ndarray:
    """Seed times spaced by the horizon, the last one leaving a full label window."""
    last = n_timestamps - 1 - horizon
    if last < 0:
        return np.zeros(0, dtype=np.int64)
    return np.arange(last % horizon, last + 1, horizon, dtype=np.int64)


def generate(cfg: SynthConfig) -> tuple[RelationalDatabase, TaskSpec, TaskSpec]:
    """Database plus the user-churn (binary) and item-sales (regression) tasks."""
    rng = np.random.default_rng(cfg.seed)
    defs = schema_defs()
    U, P, T = cfg.n_users, cfg.n_products, cfg.n_timestamps

    xu = rng.normal(0.0, 1.0, (U, 3))
    xp = rng.normal(0.0, 1.0, (P, 2))
    base = xu @ USER_COEF
    c = cfg.tx_per_tick / (np.exp(base).sum() * np.exp(0.5 * cfg.latent_scale ** 2))
    z = latent_paths(cfg, rng)
    rates = c * np.exp(base[None, :] + z)
    counts = rng.poisson(rates)

    pop = np.exp(0.7 * xp[:, 0])
    pop /= pop.sum()
    n_tx = int(counts.sum())
    tt, uu = np.nonzero(counts)
    reps = counts[tt, uu]
    tx_time = np.repeat(tt, reps).astype(np.int64)
    tx_user = np.repeat(uu, reps).astype(np.int64) + 1
    tx_prod = rng.choice(P, size=n_tx, p=pop).astype(np.int64) + 1
    amount = np.exp(1.0 + 0.3 * xp[tx_prod - 1, 1] + 0.5 * rng.normal(size=n_tx))
    channel = (rng.random(n_tx) < 0.3).astype(np.float64)

    n_tables = 3
    users = Table(defs[USERS], np.arange(1, U + 1), np.zeros((U, n_tables), np.int64), xu,
                  np.full(U, STATIC_TIME, np.int64))
    products = Table(defs[PRODUCTS], np.arange(1, P + 1), np.zeros((P, n_tables), np.int64), xp,
                     np.full(P, STATIC_TIME, np.int64))
    fk = np.zeros((n_tx, n_tables), np.int64)
    fk[:, USERS] = tx_user
    fk[:, PRODUCTS] = tx_prod
    txs = Table(defs[TRANSACTIONS], np.arange(1, n_tx + 1), fk, np.column_stack([amount, channel]), tx_time)
    db = RelationalDatabase((users, products, txs))

    seeds = seed_times_for(T, cfg.horizon)
    ent_u, ent_p, tim_u, tim_p, churn, sales = [], [], [], [], [], []
    for s in seeds:
        cu = window_counts(tx_user, tx_time, U, int(s), int(s) + cfg.horizon)
        cp = window_counts(tx_prod, tx_time, P, int(s), int(s) + cfg.horizon)
        ent_u.append(np.arange(1, U + 1))
        tim_u.append(np.full(U, s))
        churn.append((cu == 0).astype(np.float64))
        ent_p.append(np.arange(1, P + 1))
        tim_p.append(np.full(P, s))
        sales.append(cp.astype(np.float64))

    def cat(parts, dtype):
        return np.concatenate(parts).astype(dtype) if parts else np.zeros(0, dtype)

    churn_task = TaskSpec("user-churn", USERS, BINARY, cfg.horizon, seeds,
                          cat(ent_u, np.int64), cat(tim_u, np.int64), cat(churn, np.float64))
    sales_task = TaskSpec("item-sales", PRODUCTS, REGRESSION, cfg.horizon, seeds,
                          cat(ent_p, np.int64), cat(tim_p, np.int64), cat(sales, np.float64))
    return db, churn_task, sales_task


def write(cfg: SynthConfig, out_dir: str | Path, overwrite: bool = False) -> Path:
    """Write ``schema.json``, ``data/*.csv``, ``tasks/<name>.{json,csv}`` and ``synth.json``."""
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()) and not overwrite:
        raise FileExistsError(f"{out} is not empty; refusing to overwrite it")
    out.mkdir(parents=True, exist_ok=True)
    db, churn, sales = generate(cfg)
    save_database(db, out / "schema.json", out / "data")
    (out / "tasks").mkdir(exist_ok=True)
    save_task(churn, db, out / "tasks" / "user-churn")
    save_task(sales, db, out / "tasks" / "item-sales")
    (out / "synth.json").write_text(json.dumps(asdict(cfg), indent=2) + "\n")
    return out
