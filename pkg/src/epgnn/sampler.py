"""Two-level neighbor sampling: a stored first-order cache, re-drawn per batch."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from .graph import Graph

CACHE_MAGIC = b"EPC1"


def _ratio(fraction: float) -> tuple[int, int]:
    r = Fraction(repr(float(fraction))).limit_denominator(10 ** 9)
    return r.numerator, r.denominator


def sample_count(fraction: float, n: int) -> int:
    """``ceil(fraction * n)`` evaluated on the decimal value of ``fraction``.

    Plain float products misround cases such as ``0.7 * 10``; going through
    the shortest repr keeps the count exact for configured decimals.
    """
    num, den = _ratio(fraction)
    return -((-num * int(n)) // den)


def sample_counts(fraction: float, sizes: np.ndarray) -> np.ndarray:
    num, den = _ratio(fraction)
    sizes = np.asarray(sizes, dtype=np.int64)
    return -((-num * sizes) // den)


@dataclass
class SampleConfig:
    s1_fraction: float = 0.7
    s2_fraction: float = 0.5
    rng_seed: int = 0
    weighted: bool = False

    def validate(self) -> None:
        for name in ("s1_fraction", "s2_fraction"):
            v = getattr(self, name)
            if not 0 < v <= 1:
                raise ValueError(f"{name} must lie in (0, 1]")


@dataclass(frozen=True)
class CacheEntry:
    neighbor: int
    node_features: np.ndarray | None
    edge_features: np.ndarray


class NeighborCache:
    """Per-node first-order neighbor sample in CSR layout.

    ``neighbors``/``edges`` list the cached neighbor ids and the graph edge
    each came from; ``edge_features`` holds the matching ``u_ij`` rows.
    """

    def __init__(self, indptr: np.ndarray, neighbors: np.ndarray, edges: np.ndarray,
                 edge_features: np.ndarray, node_features: np.ndarray | None = None):
        self.indptr = np.asarray(indptr, dtype=np.int64)
        self.neighbors = np.asarray(neighbors, dtype=np.int64)
        self.edges = np.asarray(edges, dtype=np.int64)
        self.edge_features = np.asarray(edge_features, dtype=np.float64)
        self.node_features = node_features
        for arr in (self.indptr, self.neighbors, self.edges, self.edge_features):
            arr.flags.writeable = False

    @property
    def num_nodes(self) -> int:
        return len(self.indptr) - 1

    def size(self, node: int | np.ndarray) -> np.ndarray | int:
        return self.indptr[np.asarray(node) + 1] - self.indptr[np.asarray(node)]

    def entries(self, node: int) -> list[CacheEntry]:
        lo, hi = self.indptr[node], self.indptr[node + 1]
        out = []
        for p in range(lo, hi):
            j = int(self.neighbors[p])
            feats = None
            if self.node_features is not None and not np.isnan(self.node_features[j]).any():
                feats = self.node_features[j]
            out.append(CacheEntry(j, feats, self.edge_features[p]))
        return out


def build_neighbor_cache(graph: Graph, cfg: SampleConfig) -> NeighborCache:
    """Keep ``ceil(s1_fraction * degree)`` distinct neighbors of every node.

    Selection is uniform without replacement (random sort keys per adjacency
    slot). With ``weighted`` the keys follow the Efraimidis-Spirakis scheme so
    heavier edges are kept preferentially.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.rng_seed)
    deg = np.diff(graph.indptr)
    owner = np.repeat(np.arange(graph.num_nodes), deg)
    keys = rng.random(len(owner))
    if cfg.weighted:
        w = np.maximum(graph.weights[graph.adj_edge], 1e-12)
        keys = -np.log1p(-keys) / w
    order = np.lexsort((keys, owner))
    rank = np.arange(len(owner)) - np.repeat(graph.indptr[:-1], deg)
    keep_n = sample_counts(cfg.s1_fraction, deg)
    chosen = order[rank < np.repeat(keep_n, deg)]
    chosen.sort(kind="stable")
    # keep per-node slots in adjacency order for reproducible layouts
    indptr = np.zeros(graph.num_nodes + 1, dtype=np.int64)
    np.cumsum(keep_n, out=indptr[1:])
    edges = graph.adj_edge[chosen]
    return NeighborCache(indptr, graph.adj_nbr[chosen], edges, graph.edge_features[edges], graph.node_features)


def resample_slots(cache: NeighborCache, nodes: np.ndarray, s2_fraction: float,
                   rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized second-order draw for many nodes.

    Returns ``(owner_index, slot)``: for each draw, the position of its node in
    ``nodes`` and the absolute cache slot picked, uniformly with replacement.
    """
    nodes = np.asarray(nodes, dtype=np.int64)
    sizes = cache.indptr[nodes + 1] - cache.indptr[nodes]
    counts = sample_counts(s2_fraction, sizes)
    owner = np.repeat(np.arange(len(nodes)), counts)
    if len(owner) == 0:
        return owner, owner.copy()
    pick = np.floor(rng.random(len(owner)) * sizes[owner]).astype(np.int64)
    pick = np.minimum(pick, sizes[owner] - 1)
    return owner, cache.indptr[nodes[owner]] + pick


def resample(cache: NeighborCache, node: int, cfg: SampleConfig, batch_rng: np.random.Generator) -> list[CacheEntry]:
    """``ceil(s2_fraction * |cache[node]|)`` entries drawn with replacement."""
    entries = cache.entries(node)
    if not entries:
        return []
    _, slots = resample_slots(cache, np.array([node]), cfg.s2_fraction, batch_rng)
    lo = cache.indptr[node]
    return [entries[int(s - lo)] for s in slots]


def save_cache(cache: NeighborCache, path: str | Path) -> None:
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(struct.pack("<QQI", cache.num_nodes, len(cache.neighbors), cache.edge_features.shape[1]))
        fh.write(cache.indptr.astype("<u8").tobytes())
        fh.write(cache.neighbors.astype("<u8").tobytes())
        fh.write(cache.edges.astype("<u8").tobytes())
        fh.write(np.ascontiguousarray(cache.edge_features, dtype="<f8").tobytes())


def load_cache(path: str | Path, graph: Graph | None = None) -> NeighborCache:
    data = Path(path).read_bytes()
    if data[:4] != CACHE_MAGIC:
        raise ValueError(f"{path} is not a neighbor cache file")
    n, nnz, m_e = struct.unpack_from("<QQI", data, 4)
    off = 4 + struct.calcsize("<QQI")
    indptr = np.frombuffer(data, "<u8", n + 1, off).astype(np.int64)
    off += 8 * (n + 1)
    nbrs = np.frombuffer(data, "<u8", nnz, off).astype(np.int64)
    off += 8 * nnz
    edges = np.frombuffer(data, "<u8", nnz, off).astype(np.int64)
    off += 8 * nnz
    feats = np.frombuffer(data, "<f8", nnz * m_e, off).reshape(nnz, m_e).copy()
    return NeighborCache(indptr, nbrs, edges, feats, None if graph is None else graph.node_features)
