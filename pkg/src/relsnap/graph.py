"""Heterogeneous graphs built from a relational database.

Every row becomes a node typed by its table. An edge runs from a referencing
row (the one holding the foreign key) to the row it references, so its type
``(table of referencing row, table of referenced row)`` is one of the
database links. Message passing uses both directions of every edge type.

Two constructions are provided: the cumulative graph over all rows up to a
time ``t`` and the snapshot graph over a trailing window ``(t - window, t]``.
"""
from __future__ import annotations

import time as _time
from dataclasses import dataclass
from functools import cached_property
from typing import Mapping

import numpy as np
import scipy.sparse as sp

from .store import STATIC_TIME, RelationalDatabase

EdgeType = tuple[int, int]


@dataclass(frozen=True, eq=False)
class HeteroGraph:
    table_names: tuple[str, ...]
    offsets: np.ndarray
    pk: np.ndarray
    time: np.ndarray
    x: tuple[np.ndarray, ...]
    src: np.ndarray
    dst: np.ndarray
    edge_types: tuple[EdgeType, ...]
    adjacency: Mapping[EdgeType, tuple[sp.csr_matrix, sp.csr_matrix]]
    build_seconds: float = 0.0

    @property
    def n_nodes(self) -> int:
        return int(self.offsets[-1])

    @property
    def n_edges(self) -> int:
        return len(self.src)

    @property
    def n_types(self) -> int:
        return len(self.table_names)

    def count(self, table: int) -> int:
        return int(self.offsets[table + 1] - self.offsets[table])

    @cached_property
    def node_table(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_types), np.diff(self.offsets))

    def nodes_of(self, table: int) -> np.ndarray:
        return np.arange(self.offsets[table], self.offsets[table + 1])

    def pks_of(self, table: int) -> np.ndarray:
        return self.pk[self.offsets[table]:self.offsets[table + 1]]

    def local_index(self, table: int, pks: np.ndarray) -> np.ndarray:
        """Position of each pk among the nodes of ``table``; raises if one is absent."""
        have = self.pks_of(table)
        pks = np.asarray(pks, dtype=np.int64)
        idx = np.searchsorted(have, pks)
        ok = idx < len(have)
        ok[ok] = have[idx[ok]] == pks[ok]
        if not ok.all():
            missing = pks[~ok][:5].tolist()
            raise KeyError(f"entities {missing} of table {self.table_names[table]!r} are not in the graph")
        return idx

    @cached_property
    def _edge_keys(self) -> np.ndarray:
        return self.src.astype(np.int64) * max(self.n_nodes, 1) + self.dst

    def has_edge(self, src: int, dst: int) -> bool:
        key = int(src) * max(self.n_nodes, 1) + int(dst)
        i = np.searchsorted(self._edge_keys, key)
        return bool(i < len(self._edge_keys) and self._edge_keys[i] == key)

    def edges_of_type(self, et: EdgeType) -> tuple[np.ndarray, np.ndarray]:
        nt = self.node_table
        m = (nt[self.src] == et[0]) & (nt[self.dst] == et[1])
        return self.src[m], self.dst[m]

    def node_keys(self) -> set[tuple[int, int]]:
        return set(zip(self.node_table.tolist(), self.pk.tolist()))

    def edge_keys(self) -> set[tuple[tuple[int, int], tuple[int, int]]]:
        nt, pk = self.node_table, self.pk
        return {
            ((int(nt[s]), int(pk[s])), (int(nt[d]), int(pk[d])))
            for s, d in zip(self.src.tolist(), self.dst.tolist())
        }


def edge_type_of(g: HeteroGraph, edge: tuple[int, int]) -> EdgeType:
    src, dst = edge
    if not (0 <= src < g.n_nodes and 0 <= dst < g.n_nodes) or not g.has_edge(src, dst):
        raise KeyError(f"edge {edge} is not in the graph")
    nt = g.node_table
    return int(nt[src]), int(nt[dst])


def _assemble(db: RelationalDatabase, selected: list[np.ndarray], time_ordered: bool, t0: float) -> HeteroGraph:
    tabs = db.tables
    counts = np.array([len(s) for s in selected], dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(counts)])
    pk = np.concatenate([tab.pk[s] for tab, s in zip(tabs, selected)]) if tabs else np.zeros(0, np.int64)
    tm = np.concatenate([tab.time[s] for tab, s in zip(tabs, selected)]) if tabs else np.zeros(0, np.int64)
    xs = tuple(tab.x[s] for tab, s in zip(tabs, selected))

    srcs, dsts, adjacency = [], [], {}
    edge_types = tuple(db.schema_links)
    for i, j in edge_types:
        rows_i = selected[i]
        fk = tabs[i].fk[rows_i, j]
        has = np.flatnonzero(fk > 0)
        pk_j = tabs[j].pk[selected[j]]
        loc = np.searchsorted(pk_j, fk[has])
        loc_c = np.minimum(loc, max(len(pk_j) - 1, 0))
        ok = (loc < len(pk_j)) & (pk_j[loc_c] == fk[has]) if len(pk_j) else np.zeros(len(has), bool)
        a, b = has[ok], loc[ok]
        if time_ordered and len(a):
            keep = tabs[j].time[selected[j][b]] <= tabs[i].time[rows_i[a]]
            a, b = a[keep], b[keep]
        srcs.append(a + offsets[i])
        dsts.append(b + offsets[j])
        A = sp.csr_matrix((np.ones(len(a)), (b, a)), shape=(counts[j], counts[i]))
        adjacency[(i, j)] = (A, A.T.tocsr())
    if srcs:
        src, dst = np.concatenate(srcs), np.concatenate(dsts)
        order = np.lexsort((dst, src))
        src, dst = src[order], dst[order]
    else:
        src = dst = np.zeros(0, np.int64)
    return HeteroGraph(
        table_names=tuple(t.name for t in tabs),
        offsets=offsets,
        pk=pk,
        time=tm,
        x=xs,
        src=src,
        dst=dst,
        edge_types=edge_types,
        adjacency=adjacency,
        build_seconds=_time.perf_counter() - t0,
    )


def build_cumulative_graph(db: RelationalDatabase, t: int) -> HeteroGraph:
    """All rows with timestamp <= t; an fk match is an edge when the referenced row is not newer."""
    t0 = _time.perf_counter()
    selected = [tab.rows_in(None, t) for tab in db.tables]
    return _assemble(db, selected, True, t0)


def build_snapshot_graph(
    db: RelationalDatabase,
    t: int,
    window: int,
    keep: Mapping[int, np.ndarray] | None = None,
) -> HeteroGraph:
    """Rows with ``t - window < timestamp <= t`` plus the static rows they reference.

    ``keep`` maps a table id to primary keys that must be present regardless,
    typically the prediction targets of a static table.
    """
    if window < 1:
        raise ValueError(f"window must be >= 1, got {window}")
    t0 = _time.perf_counter()
    selected: list[np.ndarray | None] = []
    for tab in db.tables:
        selected.append(None if tab.defn.is_static else tab.rows_in(t - window, t))
    for j, tab in enumerate(db.tables):
        if not tab.defn.is_static:
            continue
        wanted = [np.asarray(keep[j], dtype=np.int64)] if keep and j in keep else []
        for i, other in enumerate(db.tables):
            if not other.defn.is_static and j in other.defn.fk_targets:
                fk = other.fk[selected[i], j]
                wanted.append(fk[fk > 0])
        pks = np.unique(np.concatenate(wanted)) if wanted else np.zeros(0, np.int64)
        idx, found = tab.locate(pks)
        selected[j] = idx[found]
    # static rows sit at STATIC_TIME, so the time-order rule never drops their edges
    assert all(s is not None for s in selected)
    return _assemble(db, selected, True, t0)


@dataclass
class GraphStats:
    nodes: dict[str, int]
    edges: dict[tuple[str, str], int]
    build_seconds: float

    @property
    def n_nodes(self) -> int:
        return sum(self.nodes.values())

    @property
    def n_edges(self) -> int:
        return sum(self.edges.values())


def graph_stats(g: HeteroGraph) -> GraphStats:
    names = g.table_names
    nodes = {names[k]: g.count(k) for k in range(g.n_types)}
    edges = {(names[i], names[j]): int(g.adjacency[(i, j)][0].nnz) for i, j in g.edge_types}
    return GraphStats(nodes, edges, g.build_seconds)


def canonical(g: HeteroGraph) -> str:
    """Line-oriented text form: sorted nodes then sorted edges."""
    lines = []
    nt = g.node_table
    for v in range(g.n_nodes):
        k = int(nt[v])
        feats = " ".join(format(f, ".17g") for f in g.x[k][v - g.offsets[k]])
        lines.append(f"node {v} {g.table_names[k]} {g.pk[v]} {g.time[v]} {feats}".rstrip())
    for s, d in zip(g.src.tolist(), g.dst.tolist()):
        lines.append(f"edge {s} {d}")
    return "\n".join(lines) + "\n"


__all__ = [
    "STATIC_TIME",
    "EdgeType",
    "GraphStats",
    "HeteroGraph",
    "build_cumulative_graph",
    "build_snapshot_graph",
    "canonical",
    "edge_type_of",
    "graph_stats",
]
