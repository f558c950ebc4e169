"""Metapath-guided random walks and sliding-window training pairs."""

from __future__ import annotations

import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .graph import Graph, NodeKind, edge_kind_between

PAIRS_MAGIC = b"EPP1"


@dataclass(frozen=True)
class MetaPath:
    """Cyclic pattern of node kinds.

    A closed pattern such as ``user,show,user`` cycles over ``user,show``;
    an open one such as ``user,show`` is cycled as written.
    """

    pattern: tuple[NodeKind, ...]

    def __post_init__(self):
        if len(self.pattern) < 2:
            raise ValueError("metapath needs at least two kinds")
        cyc = self.cycle
        for a, b in zip(cyc, cyc[1:] + cyc[:1]):
            edge_kind_between(a, b)

    @classmethod
    def parse(cls, text: str) -> "MetaPath":
        return cls(tuple(NodeKind.parse(part) for part in text.split(",") if part.strip()))

    @property
    def cycle(self) -> tuple[NodeKind, ...]:
        if self.pattern[0] == self.pattern[-1]:
            return self.pattern[:-1]
        return self.pattern

    def offset(self, kind: NodeKind) -> int | None:
        """Position in the cycle where a walk starting at ``kind`` begins."""
        try:
            return self.cycle.index(NodeKind(kind))
        except ValueError:
            return None

    def kind_at(self, start_offset: int, step: int) -> NodeKind:
        cyc = self.cycle
        return cyc[(start_offset + step) % len(cyc)]

    def __str__(self) -> str:
        return ",".join("user" if k == NodeKind.USER else "show" for k in self.pattern)


@dataclass
class WalkConfig:
    walk_length: int = 20
    walks_per_node: int = 10
    window: int = 3
    rng_seed: int = 0

    def validate(self) -> None:
        if self.walk_length < 2:
            raise ValueError("walk_length must be >= 2")
        if self.walks_per_node < 1:
            raise ValueError("walks_per_node must be >= 1")
        if not 1 <= self.window < self.walk_length:
            raise ValueError("window must satisfy 1 <= window < walk_length")


class Transitions:
    """Per-kind CSR tables of neighbors with cumulative edge weights."""

    def __init__(self, graph: Graph):
        self.tables = {}
        owner = np.repeat(np.arange(graph.num_nodes), np.diff(graph.indptr))
        nbr_kind = graph.kinds[graph.adj_nbr]
        w = graph.weights[graph.adj_edge]
        for kind in NodeKind:
            mask = nbr_kind == int(kind)
            indptr = np.zeros(graph.num_nodes + 1, dtype=np.int64)
            np.cumsum(np.bincount(owner[mask], minlength=graph.num_nodes), out=indptr[1:])
            nbrs = graph.adj_nbr[mask]
            ws = w[mask]
            cum = np.cumsum(ws)
            seg_base = np.concatenate([[0.0], cum])[indptr[:-1]]
            cum -= np.repeat(seg_base, np.diff(indptr))
            self.tables[kind] = (indptr, nbrs, cum)

    def step(self, node: int, kind: NodeKind, rng: np.random.Generator) -> int | None:
        """Sample a neighbor of ``kind`` with probability proportional to edge weight."""
        indptr, nbrs, cum = self.tables[kind]
        lo, hi = indptr[node], indptr[node + 1]
        if lo == hi:
            return None
        total = cum[hi - 1]
        if total <= 0:
            return int(nbrs[lo + int(rng.integers(hi - lo))])
        x = rng.random() * total
        j = int(np.searchsorted(cum[lo:hi], x, side="right"))
        return int(nbrs[lo + min(j, hi - lo - 1)])


def _walks_from(args) -> list[list[np.ndarray]]:
    graph, trans, metapath, cfg, starts = args
    out = []
    for node in starts:
        rng = np.random.default_rng([cfg.rng_seed, int(node)])
        offset = metapath.offset(NodeKind(int(graph.kinds[node])))
        walks = []
        for _ in range(cfg.walks_per_node):
            walk = [int(node)]
            cur = int(node)
            for t in range(1, cfg.walk_length):
                nxt = trans.step(cur, metapath.kind_at(offset, t), rng)
                if nxt is None:
                    break
                walk.append(nxt)
                cur = nxt
            walks.append(np.array(walk, dtype=np.int64))
        out.append(walks)
    return out


def walk_starts(graph: Graph, metapath: MetaPath) -> np.ndarray:
    kinds = [int(k) for k in set(metapath.cycle)]
    return np.flatnonzero(np.isin(graph.kinds, kinds) & graph.members)


def generate_walks(graph: Graph, metapath: MetaPath, cfg: WalkConfig, workers: int = 1) -> list[np.ndarray]:
    """``walks_per_node`` metapath walks from every member node whose kind is in the pattern.

    Each start node owns an RNG stream seeded by ``(rng_seed, node id)``, so
    the corpus does not depend on ``workers``. Walks are ordered round by
    round, then by start node. A walk stops early at a node without a
    neighbor of the next required kind.
    """
    cfg.validate()
    if graph.num_nodes == 0:
        raise ValueError("empty graph")
    missing = [k.name for k in set(metapath.cycle) if not np.any(graph.kinds == int(k))]
    if missing:
        raise ValueError(f"graph has no nodes of kind {missing}")
    trans = Transitions(graph)
    starts = walk_starts(graph, metapath)
    if workers > 1 and len(starts) > workers:
        chunks = np.array_split(starts, workers)
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_walks_from, [(graph, trans, metapath, cfg, c) for c in chunks]))
        per_node = [w for part in parts for w in part]
    else:
        per_node = _walks_from((graph, trans, metapath, cfg, starts))
    return [per_node[i][r] for r in range(cfg.walks_per_node) for i in range(len(starts))]


def generate_pairs(walks: Sequence[np.ndarray], k: int) -> np.ndarray:
    """All ``(walk[i], walk[j])`` with ``0 < |i - j| <= k``, as an ``(P, 2)`` array.

    Order follows walk, then ``i``, then ``j``. Pairs whose endpoints are the
    same node are dropped; repeated pairs are kept.
    """
    if k < 1:
        raise ValueError("window must be >= 1")
    offsets = np.concatenate([np.arange(-k, 0), np.arange(1, k + 1)])
    chunks = []
    for walk in walks:
        walk = np.asarray(walk, dtype=np.int64)
        n = len(walk)
        if n < 2:
            continue
        i = np.repeat(np.arange(n), len(offsets))
        j = i + np.tile(offsets, n)
        ok = (j >= 0) & (j < n)
        a, b = walk[i[ok]], walk[j[ok]]
        keep = a != b
        chunks.append(np.column_stack([a[keep], b[keep]]))
    if not chunks:
        return np.zeros((0, 2), dtype=np.int64)
    return np.concatenate(chunks)


def merge_pairs(pair_sets: Sequence[np.ndarray]) -> np.ndarray:
    parts = [p for p in pair_sets if len(p)]
    return np.concatenate(parts) if parts else np.zeros((0, 2), dtype=np.int64)


def write_walks(path: str | Path, walks: Sequence[np.ndarray]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for w in walks:
            fh.write(" ".join(map(str, np.asarray(w).tolist())))
            fh.write("\n")


def read_walks(path: str | Path) -> list[np.ndarray]:
    with open(path, encoding="utf-8") as fh:
        return [np.array(line.split(), dtype=np.int64) for line in fh if line.strip()]


def write_pairs(path: str | Path, pairs: np.ndarray) -> None:
    pairs = np.ascontiguousarray(pairs, dtype="<u8").reshape(-1, 2)
    with open(path, "wb") as fh:
        fh.write(PAIRS_MAGIC)
        fh.write(struct.pack("<Q", len(pairs)))
        fh.write(pairs.tobytes())


def read_pairs(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != PAIRS_MAGIC:
        raise ValueError(f"{path} is not a pair file")
    (count,) = struct.unpack_from("<Q", data, 4)
    return np.frombuffer(data, dtype="<u8", count=2 * count, offset=12).reshape(count, 2).astype(np.int64)
