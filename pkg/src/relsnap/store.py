"""Typed relational tables with primary/foreign keys and integer timestamps.

Tables are held column-wise: one int64 array of primary keys, an ``(n, N)``
foreign-key matrix (column ``j`` references table ``j``, 0 meaning no link),
a float64 feature matrix and an int64 timestamp vector. Rows are kept sorted
by primary key so entity lookup is a binary search.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

log = logging.getLogger(__name__)

STATIC_TIME = -1
BINARY = "binary-classification"
REGRESSION = "regression"
TASK_KINDS = (BINARY, REGRESSION)


class LoadError(ValueError):
    """Raised when a schema or CSV file cannot be turned into a database."""

    def __init__(self, message: str, table: str | None = None, row: int | None = None):
        where = ""
        if table is not None:
            where = f"table {table!r}"
            if row is not None:
                where += f", row {row}"
            where += ": "
        super().__init__(where + message)
        self.table = table
        self.row = row


@dataclass(frozen=True)
class EntityRow:
    pk: int
    fks: tuple[int, ...]
    features: tuple[float, ...]
    timestamp: int


@dataclass(frozen=True)
class TableDef:
    table_id: int
    name: str
    feature_names: tuple[str, ...] = ()
    fk_targets: tuple[int, ...] = ()
    is_static: bool = False
    pk_col: str = "id"
    timestamp_col: str | None = "timestamp"
    fk_cols: tuple[tuple[str, int], ...] = ()

    @property
    def feature_dim(self) -> int:
        return len(self.feature_names)


@dataclass(frozen=True, eq=False)
class Table:
    defn: TableDef
    pk: np.ndarray
    fk: np.ndarray
    x: np.ndarray
    time: np.ndarray

    def __post_init__(self):
        order = np.argsort(self.pk, kind="stable")
        if not np.all(order == np.arange(len(order))):
            for name in ("pk", "fk", "x", "time"):
                object.__setattr__(self, name, getattr(self, name)[order])
        for name in ("pk", "fk", "x", "time"):
            getattr(self, name).setflags(write=False)

    @classmethod
    def from_rows(cls, defn: TableDef, rows: Iterable[EntityRow], n_tables: int) -> "Table":
        rows = list(rows)
        n = len(rows)
        pk = np.array([r.pk for r in rows], dtype=np.int64)
        fk = np.zeros((n, n_tables), dtype=np.int64)
        for i, r in enumerate(rows):
            fk[i, : len(r.fks)] = r.fks
        x = np.array([r.features for r in rows], dtype=np.float64).reshape(n, defn.feature_dim)
        t = np.array([r.timestamp for r in rows], dtype=np.int64)
        return cls(defn, pk, fk, x, t)

    def __len__(self) -> int:
        return len(self.pk)

    @property
    def name(self) -> str:
        return self.defn.name

    @cached_property
    def time_order(self) -> np.ndarray:
        """Row permutation sorting by (timestamp, pk); used for range slicing."""
        return np.lexsort((self.pk, self.time))

    @cached_property
    def sorted_time(self) -> np.ndarray:
        return self.time[self.time_order]

    def rows_in(self, lo: int | None, hi: int) -> np.ndarray:
        """Row indices (pk order) with ``lo < timestamp <= hi``; ``lo=None`` means unbounded."""
        st = self.sorted_time
        a = 0 if lo is None else np.searchsorted(st, lo, side="right")
        b = np.searchsorted(st, hi, side="right")
        return np.sort(self.time_order[a:b])

    def locate(self, pks: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Map primary keys to row indices. Returns ``(index, found_mask)``."""
        pks = np.asarray(pks, dtype=np.int64)
        if not len(self.pk):
            return np.zeros(pks.shape, np.int64), np.zeros(pks.shape, bool)
        idx = np.minimum(np.searchsorted(self.pk, pks), len(self.pk) - 1)
        return idx, self.pk[idx] == pks

    def row(self, i: int) -> EntityRow:
        return EntityRow(
            int(self.pk[i]),
            tuple(int(k) for k in self.fk[i]),
            tuple(float(v) for v in self.x[i]),
            int(self.time[i]),
        )

    def take(self, idx: np.ndarray, fk: np.ndarray | None = None) -> "Table":
        return Table(self.defn, self.pk[idx], self.fk[idx] if fk is None else fk, self.x[idx], self.time[idx])


@dataclass(frozen=True, eq=False)
class RelationalDatabase:
    tables: tuple[Table, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "tables", tuple(self.tables))
        for i, tab in enumerate(self.tables):
            if tab.defn.table_id != i:
                raise ValueError(f"table {tab.name!r} has id {tab.defn.table_id}, expected {i}")

    @property
    def n_tables(self) -> int:
        return len(self.tables)

    @cached_property
    def table_ids(self) -> dict[str, int]:
        return {t.name: i for i, t in enumerate(self.tables)}

    def table(self, key: int | str) -> Table:
        if isinstance(key, str):
            try:
                key = self.table_ids[key]
            except KeyError:
                raise KeyError(f"unknown table {key!r}") from None
        return self.tables[key]

    @cached_property
    def links(self) -> frozenset[tuple[int, int]]:
        """Observed links: ``(i, j)`` when some row of table ``i`` holds a nonzero fk into ``j``."""
        out = set()
        for i, tab in enumerate(self.tables):
            if len(tab):
                for j in np.flatnonzero((tab.fk != 0).any(axis=0)):
                    out.add((i, int(j)))
        return frozenset(out)

    @cached_property
    def schema_links(self) -> tuple[tuple[int, int], ...]:
        """Declared links from the schema; a superset of :attr:`links` for valid data."""
        return tuple((t.defn.table_id, j) for t in self.tables for j in t.defn.fk_targets)

    def entity(self, table: int | str, pk: int) -> EntityRow:
        tab = self.table(table)
        idx, found = tab.locate(np.array([pk]))
        if not found[0]:
            raise KeyError(f"no entity with pk {pk} in table {tab.name!r}")
        return tab.row(int(idx[0]))

    def __len__(self) -> int:
        return sum(len(t) for t in self.tables)

    def max_time(self) -> int:
        return max((int(t.time.max()) for t in self.tables if len(t)), default=STATIC_TIME)


@dataclass
class Violation:
    kind: str
    table: str
    row: int | None
    detail: str

    def __str__(self) -> str:
        loc = self.table if self.row is None else f"{self.table}[{self.row}]"
        return f"{self.kind} at {loc}: {self.detail}"


@dataclass
class ValidationReport:
    violations: list[Violation] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.violations)

    def __iter__(self):
        return iter(self.violations)

    @property
    def ok(self) -> bool:
        return not self.violations

    def kinds(self) -> list[str]:
        return [v.kind for v in self.violations]

    def __str__(self) -> str:
        if self.ok:
            return "ok"
        return "\n".join(str(v) for v in self.violations)


def validate(db: RelationalDatabase) -> ValidationReport:
    """Check every database invariant and list the violations found."""
    report = ValidationReport()
    add = report.violations.append
    for tab in db.tables:
        d = tab.defn
        if tab.fk.shape != (len(tab), db.n_tables):
            add(Violation("fk-shape", d.name, None, f"fk matrix {tab.fk.shape}, expected ({len(tab)}, {db.n_tables})"))
            continue
        if tab.x.shape != (len(tab), d.feature_dim):
            add(Violation("feature-shape", d.name, None, f"features {tab.x.shape}, expected ({len(tab)}, {d.feature_dim})"))
            continue
        for i in np.flatnonzero(tab.pk < 1):
            add(Violation("pk-nonpositive", d.name, int(i), f"pk {tab.pk[i]}"))
        dup = np.flatnonzero(tab.pk[1:] == tab.pk[:-1]) + 1
        for i in dup:
            add(Violation("pk-duplicate", d.name, int(i), f"pk {tab.pk[i]} repeated"))
        for i in np.flatnonzero(~np.isfinite(tab.x).all(axis=1)):
            add(Violation("feature-nonfinite", d.name, int(i), f"pk {tab.pk[i]}"))
        if d.is_static:
            bad = np.flatnonzero(tab.time != STATIC_TIME)
            for i in bad:
                add(Violation("timestamp-static", d.name, int(i), f"static row has timestamp {tab.time[i]}"))
        else:
            for i in np.flatnonzero(tab.time < 0):
                add(Violation("timestamp-negative", d.name, int(i), f"timestamp {tab.time[i]}"))
        for i in np.flatnonzero((tab.fk < 0).any(axis=1)):
            add(Violation("fk-negative", d.name, int(i), f"pk {tab.pk[i]}"))
        for j in range(db.n_tables):
            col = tab.fk[:, j]
            nz = np.flatnonzero(col > 0)
            if not len(nz):
                continue
            if j not in d.fk_targets:
                add(Violation("fk-undeclared", d.name, int(nz[0]), f"references {db.tables[j].name!r} without a declared fk"))
                continue
            _, found = db.tables[j].locate(col[nz])
            for i in nz[~found]:
                add(Violation("fk-dangling", d.name, int(i), f"fk {col[i]} into {db.tables[j].name!r} does not resolve"))
    return report


def slice_history(db: RelationalDatabase, t: int) -> RelationalDatabase:
    """Keep rows with timestamp <= t (static rows always); zero fks orphaned by the cut."""
    if t < 0:
        raise ValueError(f"slice time must be >= 0, got {t}")
    kept = [tab.take(tab.rows_in(None, t)) for tab in db.tables]
    out = []
    n_dangling = 0
    for tab in kept:
        fk = tab.fk
        for j in tab.defn.fk_targets:
            col = fk[:, j]
            nz = np.flatnonzero(col > 0)
            _, found = kept[j].locate(col[nz])
            if not found.all():
                if fk is tab.fk:
                    fk = tab.fk.copy()
                fk[nz[~found], j] = 0
                n_dangling += int((~found).sum())
        out.append(tab if fk is tab.fk else Table(tab.defn, tab.pk, fk, tab.x, tab.time))
    if n_dangling:
        log.info("slice at t=%d zeroed %d dangling foreign keys", t, n_dangling)
    return RelationalDatabase(tuple(out))


# ---------------------------------------------------------------------------
# Tasks


@dataclass(frozen=True, eq=False)
class TaskSpec:
    name: str
    target_table: int
    task_kind: str
    horizon: int
    seed_times: np.ndarray
    entity: np.ndarray
    time: np.ndarray
    label: np.ndarray

    def __post_init__(self):
        if self.task_kind not in TASK_KINDS:
            raise ValueError(f"task_kind must be one of {TASK_KINDS}, got {self.task_kind!r}")
        st = np.asarray(self.seed_times, dtype=np.int64)
        if len(st) > 1 and np.any(np.diff(st) <= 0):
            raise ValueError("seed_times must be strictly increasing")
        object.__setattr__(self, "seed_times", st)
        object.__setattr__(self, "entity", np.asarray(self.entity, dtype=np.int64))
        object.__setattr__(self, "time", np.asarray(self.time, dtype=np.int64))
        object.__setattr__(self, "label", np.asarray(self.label, dtype=np.float64))
        if self.task_kind == BINARY and not np.isin(self.label, (0.0, 1.0)).all():
            raise ValueError("binary labels must be 0 or 1")
        if not np.isfinite(self.label).all():
            raise ValueError("labels must be finite")

    def at(self, t: int) -> tuple[np.ndarray, np.ndarray]:
        """Entity pks and labels for seed time ``t``, sorted by pk."""
        m = self.time == t
        pks, y = self.entity[m], self.label[m]
        order = np.argsort(pks, kind="stable")
        return pks[order], y[order]

    def label_of(self, pk: int, t: int) -> float:
        m = (self.entity == pk) & (self.time == t)
        if not m.any():
            raise KeyError(f"no label for entity {pk} at seed time {t}")
        return float(self.label[m][0])

    def check_against(self, db: RelationalDatabase) -> list[str]:
        problems = []
        _, found = db.table(self.target_table).locate(self.entity)
        if not found.all():
            problems.append(f"{int((~found).sum())} labelled entities missing from {db.table(self.target_table).name!r}")
        if not np.isin(self.time, self.seed_times).all():
            problems.append("labels reference unknown seed times")
        return problems


def split_times(task: TaskSpec, n_train: int, n_val: int, n_test: int) -> tuple[list[int], list[int], list[int]]:
    """Chronological train/val/test seed-time split using the most recent seed times."""
    total = n_train + n_val + n_test
    if min(n_train, n_val, n_test) < 0:
        raise ValueError("split sizes must be non-negative")
    st = [int(s) for s in task.seed_times]
    if total > len(st):
        raise ValueError(f"need {total} seed times, task has {len(st)}")
    st = st[len(st) - total:]
    return st[:n_train], st[n_train:n_train + n_val], st[n_train + n_val:]


# ---------------------------------------------------------------------------
# Files


def _schema_tables(schema: Mapping) -> list[dict]:
    if not isinstance(schema, Mapping) or "tables" not in schema:
        raise LoadError("schema must be an object with a 'tables' list")
    return list(schema["tables"])


def build_defs(schema: Mapping) -> list[TableDef]:
    raw = _schema_tables(schema)
    ids = {}
    for i, t in enumerate(raw):
        name = t.get("name")
        if not name:
            raise LoadError(f"table #{i} has no name")
        if name in ids:
            raise LoadError("duplicate table name", table=name)
        ids[name] = i
    defs = []
    for i, t in enumerate(raw):
        fk_cols = []
        seen = set()
        for col, target in dict(t.get("fk_cols", {})).items():
            if target not in ids:
                raise LoadError(f"fk column {col!r} references unknown table {target!r}", table=t["name"])
            j = ids[target]
            if j in seen:
                raise LoadError(f"more than one fk column into {target!r}", table=t["name"])
            seen.add(j)
            fk_cols.append((col, j))
        static = bool(t.get("static", False))
        defs.append(TableDef(
            table_id=i,
            name=t["name"],
            feature_names=tuple(t.get("feature_cols", ())),
            fk_targets=tuple(sorted(seen)),
            is_static=static,
            pk_col=t.get("pk_col", "id"),
            timestamp_col=None if static else t.get("timestamp_col", "timestamp"),
            fk_cols=tuple(fk_cols),
        ))
    return defs


def _int(value: str, what: str, table: str, row: int) -> int:
    try:
        return int(value)
    except (TypeError, ValueError):
        raise LoadError(f"{what} {value!r} is not an integer", table=table, row=row) from None


def _read_table(defn: TableDef, path: Path, n_tables: int) -> tuple[Table, np.ndarray]:
    if not path.exists():
        raise LoadError(f"missing data file {path}", table=defn.name)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise LoadError("empty CSV (no header)", table=defn.name) from None
        col = {name: k for k, name in enumerate(header)}
        needed = [defn.pk_col, *defn.feature_names, *(c for c, _ in defn.fk_cols)]
        if defn.timestamp_col:
            needed.append(defn.timestamp_col)
        missing = [c for c in needed if c not in col]
        if missing:
            raise LoadError(f"missing columns {missing}", table=defn.name)
        pks, fks, xs, ts, lines = [], [], [], [], []
        seen: dict[int, int] = {}
        for r, rec in enumerate(reader, start=1):
            if not rec:
                continue
            if len(rec) != len(header):
                raise LoadError(f"expected {len(header)} fields, got {len(rec)}", table=defn.name, row=r)
            pk = _int(rec[col[defn.pk_col]], "pk", defn.name, r)
            if pk in seen:
                raise LoadError(f"duplicate pk {pk} (first seen at row {seen[pk]})", table=defn.name, row=r)
            seen[pk] = r
            pks.append(pk)
            lines.append(r)
            k = [0] * n_tables
            for c, j in defn.fk_cols:
                cell = rec[col[c]].strip()
                k[j] = 0 if cell == "" else _int(cell, f"fk {c}", defn.name, r)
            fks.append(k)
            try:
                xs.append([float(rec[col[c]]) for c in defn.feature_names])
            except ValueError as err:
                raise LoadError(f"bad feature value ({err})", table=defn.name, row=r) from None
            ts.append(_int(rec[col[defn.timestamp_col]], "timestamp", defn.name, r) if defn.timestamp_col else STATIC_TIME)
    n = len(pks)
    pk = np.array(pks, dtype=np.int64)
    tab = Table(
        defn,
        pk,
        np.array(fks, dtype=np.int64).reshape(n, n_tables),
        np.array(xs, dtype=np.float64).reshape(n, defn.feature_dim),
        np.array(ts, dtype=np.int64),
    )
    return tab, np.array(lines, dtype=np.int64)[np.argsort(pk, kind="stable")]


def load_database(schema_doc: str | Path | Mapping, data_dir: str | Path) -> RelationalDatabase:
    """Load a schema (JSON path or parsed mapping) and one CSV per table, then validate.

    Raises :class:`LoadError` naming the table and row of the first problem.
    """
    if not isinstance(schema_doc, Mapping):
        with open(schema_doc) as fh:
            schema_doc = json.load(fh)
    defs = build_defs(schema_doc)
    data_dir = Path(data_dir)
    loaded = [_read_table(d, data_dir / f"{d.name}.csv", len(defs)) for d in defs]
    db = RelationalDatabase(tuple(tab for tab, _ in loaded))
    report = validate(db)
    if not report.ok:
        v = report.violations[0]
        lines = loaded[db.table_ids[v.table]][1]
        row = None if v.row is None else int(lines[v.row])
        raise LoadError(f"{v.kind}: {v.detail}", table=v.table, row=row)
    return db


def fk_columns(db: RelationalDatabase, d: TableDef) -> tuple[tuple[str, int], ...]:
    if d.fk_cols:
        return d.fk_cols
    return tuple((f"{db.tables[j].name}_id", j) for j in d.fk_targets)


def schema_of(db: RelationalDatabase) -> dict:
    tables = []
    for tab in db.tables:
        d = tab.defn
        entry = {
            "name": d.name,
            "pk_col": d.pk_col,
            "timestamp_col": d.timestamp_col,
            "fk_cols": {c: db.tables[j].name for c, j in fk_columns(db, d)},
            "feature_cols": list(d.feature_names),
            "static": d.is_static,
        }
        tables.append(entry)
    return {"tables": tables}


def _fmt(v: float) -> str:
    return format(v, ".17g")


def save_database(db: RelationalDatabase, schema_path: str | Path, data_dir: str | Path) -> None:
    data_dir = Path(data_dir)
    data_dir.mkdir(parents=True, exist_ok=True)
    with open(schema_path, "w") as fh:
        json.dump(schema_of(db), fh, indent=2)
        fh.write("\n")
    for tab in db.tables:
        d = tab.defn
        fkc = fk_columns(db, d)
        header = [d.pk_col, *(c for c, _ in fkc), *d.feature_names]
        if d.timestamp_col:
            header.append(d.timestamp_col)
        with open(data_dir / f"{d.name}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for i in range(len(tab)):
                rec = [str(tab.pk[i]), *(str(tab.fk[i, j]) for _, j in fkc), *(_fmt(v) for v in tab.x[i])]
                if d.timestamp_col:
                    rec.append(str(tab.time[i]))
                w.writerow(rec)


def save_task(task: TaskSpec, db: RelationalDatabase, path: str | Path) -> None:
    """Write ``<path>.json`` metadata and ``<path>.csv`` labels (entity, seed_time, label)."""
    path = Path(path)
    meta = {
        "name": task.name,
        "target_table": db.tables[task.target_table].name,
        "task_kind": task.task_kind,
        "horizon": int(task.horizon),
        "seed_times": [int(s) for s in task.seed_times],
        "labels": path.with_suffix(".csv").name,
    }
    with open(path.with_suffix(".json"), "w") as fh:
        json.dump(meta, fh, indent=2)
        fh.write("\n")
    order = np.lexsort((task.entity, task.time))
    with open(path.with_suffix(".csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["entity", "seed_time", "label"])
        for i in order:
            lab = task.label[i]
            w.writerow([task.entity[i], task.time[i], int(lab) if task.task_kind == BINARY else _fmt(lab)])


def load_task(path: str | Path, db: RelationalDatabase) -> TaskSpec:
    path = Path(path)
    meta_path = path if path.suffix == ".json" else path.with_suffix(".json")
    with open(meta_path) as fh:
        meta = json.load(fh)
    ent, tim, lab = [], [], []
    with open(meta_path.parent / meta["labels"], newline="") as fh:
        for r, rec in enumerate(csv.DictReader(fh), start=1):
            try:
                ent.append(int(rec["entity"]))
                tim.append(int(rec["seed_time"]))
                lab.append(float(rec["label"]))
            except (KeyError, TypeError, ValueError):
                raise LoadError("malformed label row", table=meta["labels"], row=r) from None
    task = TaskSpec(
        name=meta["name"],
        target_table=db.table_ids[meta["target_table"]],
        task_kind=meta["task_kind"],
        horizon=int(meta["horizon"]),
        seed_times=np.array(meta["seed_times"], dtype=np.int64),
        entity=np.array(ent, dtype=np.int64),
        time=np.array(tim, dtype=np.int64),
        label=np.array(lab),
    )
    problems = task.check_against(db)
    if problems:
        raise LoadError("; ".join(problems), table=meta["labels"])
    return task


def make_database(defs: Sequence[TableDef], rows: Mapping[str, Iterable[EntityRow]]) -> RelationalDatabase:
    """Assemble a database from table definitions and per-table row lists."""
    n = len(defs)
    return RelationalDatabase(tuple(Table.from_rows(d, rows.get(d.name, ()), n) for d in defs))
