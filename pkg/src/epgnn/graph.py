"""Typed user/show-combination graph with multi-attribute edges."""

from __future__ import annotations

import json
import logging
import math
import struct
import zlib
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import sparse

logger = logging.getLogger(__name__)

GRAPH_MAGIC = b"EPG1"
GRAPH_VERSION = 1
NORM_SCHEMES = ("log1p-maxnorm", "minmax")
EDGE_DIM = 2


class NodeKind(IntEnum):
    USER = 0
    SHOW = 1

    @classmethod
    def parse(cls, text: str) -> "NodeKind":
        key = text.strip().lower()
        if key in ("user", "u"):
            return cls.USER
        if key in ("show", "showcombo", "combo", "s"):
            return cls.SHOW
        raise ValueError(f"unknown node kind {text!r}")


class EdgeKind(IntEnum):
    USER_SHOW = 0
    USER_USER = 1
    SHOW_SHOW = 2

    @property
    def endpoints(self) -> tuple[NodeKind, NodeKind]:
        return EDGE_ENDPOINTS[self]


EDGE_ENDPOINTS = {
    EdgeKind.USER_SHOW: (NodeKind.USER, NodeKind.SHOW),
    EdgeKind.USER_USER: (NodeKind.USER, NodeKind.USER),
    EdgeKind.SHOW_SHOW: (NodeKind.SHOW, NodeKind.SHOW),
}


def edge_kind_between(a: NodeKind, b: NodeKind) -> EdgeKind:
    if a != b:
        return EdgeKind.USER_SHOW
    return EdgeKind.USER_USER if a == NodeKind.USER else EdgeKind.SHOW_SHOW


class EmptyGraphError(ValueError):
    pass


@dataclass(frozen=True)
class RawInteraction:
    user_id: str
    show_combo_id: str
    click_count: int
    view_time: float


@dataclass
class GraphConfig:
    coclick_min: int = 2
    degree_cap: int | None = None
    norm_scheme: str = "log1p-maxnorm"

    def validate(self) -> None:
        if self.coclick_min < 0:
            raise ValueError("coclick_min must be >= 0")
        if self.degree_cap is not None and self.degree_cap < 1:
            raise ValueError("degree_cap must be >= 1 when set")
        if self.norm_scheme not in NORM_SCHEMES:
            raise ValueError(f"norm_scheme must be one of {NORM_SCHEMES}")


@dataclass(frozen=True)
class Node:
    id: int
    kind: NodeKind
    external_id: str
    profile: dict[str, str]
    raw_features: np.ndarray | None


@dataclass(frozen=True)
class Edge:
    index: int
    src: int
    dst: int
    kind: EdgeKind
    weight: float
    features: np.ndarray


def _edge_table(values, rows: int) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 2:
        return arr
    return arr.reshape(rows, -1) if rows else arr.reshape(0, EDGE_DIM)


class Graph:
    """Undirected heterogeneous graph stored as flat arrays plus a CSR adjacency.

    Sub-graphs produced by partitioning or edge splits share the node table of
    their parent, so node ids stay global. ``members`` marks the nodes that
    belong to the sub-graph and ``edge_origin`` maps edges back to the graph
    they were cut from.
    """

    def __init__(
        self,
        kinds: np.ndarray,
        external_ids: Sequence[str],
        profiles: Sequence[dict[str, str]],
        src: np.ndarray,
        dst: np.ndarray,
        edge_kinds: np.ndarray,
        weights: np.ndarray,
        raw_edge_features: np.ndarray,
        edge_features: np.ndarray | None = None,
        node_features: np.ndarray | None = None,
        norm_scheme: str | None = None,
        members: np.ndarray | None = None,
        edge_origin: np.ndarray | None = None,
        meta: dict | None = None,
    ):
        self.kinds = np.asarray(kinds, dtype=np.int8)
        self.external_ids = list(external_ids)
        self.profiles = list(profiles)
        self.src = np.asarray(src, dtype=np.int64)
        self.dst = np.asarray(dst, dtype=np.int64)
        self.edge_kinds = np.asarray(edge_kinds, dtype=np.int8)
        self.weights = np.asarray(weights, dtype=np.float64)
        self.raw_edge_features = _edge_table(raw_edge_features, len(self.src))
        if edge_features is None:
            edge_features = self.raw_edge_features.copy()
        self.edge_features = _edge_table(edge_features, len(self.src))
        # rows of NaN mark nodes without side-information features
        self.node_features = None if node_features is None else np.asarray(node_features, dtype=np.float64)
        self.norm_scheme = norm_scheme
        n = len(self.kinds)
        self.members = np.ones(n, dtype=bool) if members is None else np.asarray(members, dtype=bool)
        self.edge_origin = np.arange(len(self.src), dtype=np.int64) if edge_origin is None else np.asarray(edge_origin, dtype=np.int64)
        self.meta = dict(meta or {})
        self._check()
        self._build_adjacency()
        self.index = {ext: i for i, ext in enumerate(self.external_ids)}

    def _check(self) -> None:
        n = len(self.kinds)
        if not (len(self.external_ids) == len(self.profiles) == n):
            raise ValueError("node table columns differ in length")
        e = len(self.src)
        for name in ("dst", "edge_kinds", "weights", "edge_origin"):
            if len(getattr(self, name)) != e:
                raise ValueError(f"edge column {name} has wrong length")
        if e:
            if self.src.min() < 0 or max(self.src.max(), self.dst.max()) >= n:
                raise ValueError("edge endpoint out of range")
            if np.any(self.src == self.dst):
                raise ValueError("self-loops are not allowed")
            if np.any(self.weights < 0):
                raise ValueError("edge weights must be nonnegative")
            if not np.all(np.isfinite(self.edge_features)):
                raise ValueError("edge features must be finite")
        if self.node_features is not None and self.node_features.shape[0] != n:
            raise ValueError("node_features must have one row per node")

    def _build_adjacency(self) -> None:
        n, e = len(self.kinds), len(self.src)
        owner = np.concatenate([self.src, self.dst])
        nbr = np.concatenate([self.dst, self.src])
        eid = np.concatenate([np.arange(e), np.arange(e)])
        order = np.lexsort((eid, owner))
        self.adj_nbr = nbr[order]
        self.adj_edge = eid[order]
        self.indptr = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(np.bincount(owner, minlength=n), out=self.indptr[1:])

    # -- queries ---------------------------------------------------------

    @property
    def num_nodes(self) -> int:
        return len(self.kinds)

    @property
    def num_edges(self) -> int:
        return len(self.src)

    @property
    def edge_dim(self) -> int:
        return self.edge_features.shape[1]

    def degree(self, kind: EdgeKind | None = None) -> np.ndarray:
        if kind is None:
            return np.diff(self.indptr)
        mask = self.edge_kinds == int(kind)
        n = self.num_nodes
        return np.bincount(self.src[mask], minlength=n) + np.bincount(self.dst[mask], minlength=n)

    def neighbors(self, node: int) -> tuple[np.ndarray, np.ndarray]:
        """Neighbor ids and incident edge indices of ``node``."""
        lo, hi = self.indptr[node], self.indptr[node + 1]
        return self.adj_nbr[lo:hi], self.adj_edge[lo:hi]

    def node(self, node_id: int) -> Node:
        feats = None
        if self.node_features is not None and not np.isnan(self.node_features[node_id]).any():
            feats = self.node_features[node_id]
        return Node(node_id, NodeKind(int(self.kinds[node_id])), self.external_ids[node_id],
                    self.profiles[node_id], feats)

    def edge(self, index: int) -> Edge:
        return Edge(index, int(self.src[index]), int(self.dst[index]), EdgeKind(int(self.edge_kinds[index])),
                    float(self.weights[index]), self.edge_features[index])

    def nodes_of_kind(self, kind: NodeKind) -> np.ndarray:
        return np.flatnonzero((self.kinds == int(kind)) & self.members)

    def edge_keys(self) -> set[tuple[int, int]]:
        lo = np.minimum(self.src, self.dst)
        hi = np.maximum(self.src, self.dst)
        return set(zip(lo.tolist(), hi.tolist()))

    def input_features(self, node_id: int) -> np.ndarray | None:
        if self.node_features is None:
            return None
        row = self.node_features[node_id]
        return None if np.isnan(row).any() else row

    # -- derived graphs --------------------------------------------------

    def edge_subgraph(self, keep: np.ndarray, members: np.ndarray | None = None, **meta) -> "Graph":
        """New graph over the same nodes keeping only the edges flagged in ``keep``."""
        keep = np.asarray(keep)
        if keep.dtype == bool:
            keep = np.flatnonzero(keep)
        return Graph(
            self.kinds, self.external_ids, self.profiles,
            self.src[keep], self.dst[keep], self.edge_kinds[keep], self.weights[keep],
            self.raw_edge_features[keep], self.edge_features[keep],
            node_features=self.node_features, norm_scheme=self.norm_scheme,
            members=self.members if members is None else members,
            edge_origin=self.edge_origin[keep], meta={**self.meta, **meta},
        )

    def with_edge_values(self, weights: np.ndarray, edge_features: np.ndarray, norm_scheme: str | None) -> "Graph":
        return Graph(
            self.kinds, self.external_ids, self.profiles, self.src, self.dst, self.edge_kinds,
            weights, self.raw_edge_features, edge_features, node_features=self.node_features,
            norm_scheme=norm_scheme, members=self.members, edge_origin=self.edge_origin, meta=self.meta,
        )

    def __repr__(self) -> str:
        return f"Graph(nodes={self.num_nodes}, edges={self.num_edges}, norm={self.norm_scheme})"


# ---------------------------------------------------------------------------
# construction


def _valid(rec: RawInteraction) -> bool:
    try:
        if not rec.user_id or not rec.show_combo_id:
            return False
        clicks, view = float(rec.click_count), float(rec.view_time)
    except (TypeError, ValueError, AttributeError):
        return False
    if not (math.isfinite(clicks) and math.isfinite(view)) or clicks < 0 or view < 0:
        return False
    return clicks > 0 or view > 0


def build_graph(
    interactions: Iterable[RawInteraction],
    show_type_map: Mapping[str, str],
    config: GraphConfig | None = None,
    profiles: Mapping[str, Mapping[str, str]] | None = None,
    node_features: Mapping[str, Sequence[float]] | None = None,
) -> Graph:
    """Aggregate raw interactions into the user/show graph.

    Edge feature channels are ``(click, view)`` for user-show edges,
    ``(shared combos, sum of geometric-mean view time over shared combos)``
    for user-user edges, and ``(1, 1)`` for show-show edges. The returned graph
    is already normalized with ``config.norm_scheme``; raw values are kept in
    ``raw_edge_features``.
    """
    config = config or GraphConfig()
    config.validate()
    profiles = profiles or {}

    agg: dict[tuple[str, str], list[float]] = {}
    user_order: dict[str, int] = {}
    show_order: dict[str, int] = {}
    skipped = 0
    for rec in interactions:
        if not _valid(rec):
            skipped += 1
            continue
        user_order.setdefault(rec.user_id, len(user_order))
        show_order.setdefault(rec.show_combo_id, len(show_order))
        acc = agg.setdefault((rec.user_id, rec.show_combo_id), [0.0, 0.0])
        acc[0] += float(rec.click_count)
        acc[1] += float(rec.view_time)
    if skipped:
        logger.warning("skipped %d malformed interaction records", skipped)
    if not agg:
        raise EmptyGraphError("empty graph")
    for combo in profiles:
        show_order.setdefault(combo, len(show_order))

    clash = set(user_order) & set(show_order)
    if clash:
        raise ValueError(f"ids used for both users and show combos: {sorted(clash)[:5]}")

    users = sorted(user_order)
    shows = sorted(show_order)
    n_users = len(users)
    user_id = {u: i for i, u in enumerate(users)}
    show_id = {s: n_users + i for i, s in enumerate(shows)}
    external_ids = users + shows
    kinds = np.array([NodeKind.USER] * n_users + [NodeKind.SHOW] * len(shows), dtype=np.int8)
    node_profiles: list[dict[str, str]] = [{} for _ in users]
    for s in shows:
        prof = dict(profiles.get(s, {}))
        if not prof:
            prof = {"type": show_type_map[s]} if s in show_type_map else {"combo": s}
        node_profiles.append(prof)

    keys = sorted(agg)
    us_src = np.array([user_id[u] for u, _ in keys], dtype=np.int64)
    us_dst = np.array([show_id[s] for _, s in keys], dtype=np.int64)
    us_raw = np.array([agg[k] for k in keys], dtype=np.float64).reshape(-1, EDGE_DIM)

    # co-click counts via a sparse user x show incidence product
    rows = us_src
    cols = us_dst - n_users
    shape = (n_users, len(shows))
    incidence = sparse.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=shape)
    root_view = sparse.csr_matrix((np.sqrt(us_raw[:, 1]), (rows, cols)), shape=shape)
    shared = sparse.triu(incidence @ incidence.T, k=1).tocoo()
    coview = sparse.triu(root_view @ root_view.T, k=1).tocsr()
    threshold = max(config.coclick_min, 1)
    keep = shared.data >= threshold
    uu_src, uu_dst, uu_count = shared.row[keep], shared.col[keep], shared.data[keep]
    order = np.lexsort((uu_dst, uu_src))
    uu_src, uu_dst, uu_count = uu_src[order].astype(np.int64), uu_dst[order].astype(np.int64), uu_count[order]
    uu_view = np.asarray(coview[uu_src, uu_dst]).ravel() if len(uu_src) else np.zeros(0)
    uu_raw = np.column_stack([uu_count, uu_view]) if len(uu_src) else np.zeros((0, EDGE_DIM))

    by_type: dict[str, list[int]] = {}
    for s in shows:
        t = show_type_map.get(s)
        if t is not None and t != "":
            by_type.setdefault(t, []).append(show_id[s])
    ss_pairs = [(a, b) for t in sorted(by_type) for i, a in enumerate(by_type[t]) for b in by_type[t][i + 1:]]
    ss_pairs.sort()
    ss_src = np.array([a for a, _ in ss_pairs], dtype=np.int64)
    ss_dst = np.array([b for _, b in ss_pairs], dtype=np.int64)
    ss_raw = np.ones((len(ss_pairs), EDGE_DIM))

    src = np.concatenate([us_src, uu_src, ss_src])
    dst = np.concatenate([us_dst, uu_dst, ss_dst])
    edge_kinds = np.concatenate([
        np.full(len(us_src), EdgeKind.USER_SHOW), np.full(len(uu_src), EdgeKind.USER_USER),
        np.full(len(ss_src), EdgeKind.SHOW_SHOW),
    ]).astype(np.int8)
    raw = np.vstack([us_raw, uu_raw, ss_raw])
    weights = np.concatenate([us_raw.sum(axis=1), uu_raw[:, 0], ss_raw[:, 0]])

    feats = None
    if node_features:
        dims = {len(v) for v in node_features.values()}
        if len(dims) != 1:
            raise ValueError("node feature vectors must share one length")
        feats = np.full((len(external_ids), dims.pop()), np.nan)
        for ext, vec in node_features.items():
            idx = user_id.get(ext, show_id.get(ext))
            if idx is not None:
                feats[idx] = vec

    graph = Graph(kinds, external_ids, node_profiles, src, dst, edge_kinds, weights, raw,
                  node_features=feats, meta={"skipped_records": skipped})
    graph = normalize_edge_features(graph, config.norm_scheme)
    if config.degree_cap is not None:
        graph = cap_degree(graph, config.degree_cap)
    logger.info("built %r", graph)
    return graph


def normalize_edge_features(graph: Graph, scheme: str = "log1p-maxnorm") -> Graph:
    """Rescale every edge-feature channel into [0, 1], separately per edge kind.

    The transform is always applied to the raw values, so normalizing an
    already-normalized graph is a no-op. User-show walk weights are reset to
    the sum of their normalized channels.
    """
    if scheme not in NORM_SCHEMES:
        raise ValueError(f"unknown normalization scheme {scheme!r}")
    raw = graph.raw_edge_features
    out = np.zeros_like(raw)
    for kind in EdgeKind:
        mask = graph.edge_kinds == int(kind)
        if not mask.any():
            continue
        block = raw[mask]
        if scheme == "log1p-maxnorm":
            logged = np.log1p(block)
            top = logged.max(axis=0)
            scaled = np.divide(logged, top, out=np.zeros_like(logged), where=top > 0)
        else:
            lo, hi = block.min(axis=0), block.max(axis=0)
            span = hi - lo
            scaled = np.divide(block - lo, span, out=np.zeros_like(block), where=span > 0)
            # constant channel: nonzero entries map to 1, zeros stay 0
            scaled = np.where(span > 0, scaled, (block > 0).astype(float))
        out[mask] = scaled
    weights = graph.weights.copy()
    us = graph.edge_kinds == EdgeKind.USER_SHOW
    weights[us] = out[us].sum(axis=1)
    return graph.with_edge_values(weights, out, scheme)


def cap_degree(graph: Graph, cap: int) -> Graph:
    """Drop edges until no node keeps more than ``cap`` neighbors.

    An edge survives only if it ranks among the ``cap`` heaviest edges at both
    endpoints (ties by edge index), which keeps adjacency symmetric.
    """
    keep = np.ones(graph.num_edges, dtype=bool)
    for node in np.flatnonzero(graph.degree() > cap):
        _, eids = graph.neighbors(node)
        order = np.lexsort((eids, -graph.weights[eids]))
        keep[eids[order[cap:]]] = False
    return graph.edge_subgraph(keep)


def partition_by_category(graph: Graph, category_of: Mapping[str, str], parts: int) -> list[Graph]:
    """Cut the graph into ``parts`` buckets along show categories.

    Show-combo nodes are bucketed by category. User-show edges follow their
    show. Show-show edges across buckets are dropped. A user-user edge goes to
    the lowest bucket in which both users hold a user-show edge and is dropped
    when there is none. Users are replicated into every bucket where they keep
    an edge. Partitions keep global node ids.
    """
    if parts < 1:
        raise ValueError("parts must be >= 1")
    bucket, missing = node_buckets(graph, category_of, parts)
    if parts == 1:
        return [graph.edge_subgraph(np.ones(graph.num_edges, dtype=bool), bucket=0, missing_category=missing)]

    edge_bucket = edge_buckets(graph, bucket, parts)
    out = []
    for b in range(parts):
        keep = edge_bucket == b
        members = np.zeros(graph.num_nodes, dtype=bool)
        members[graph.src[keep]] = True
        members[graph.dst[keep]] = True
        shows = (graph.kinds == NodeKind.SHOW) & (bucket == b) & graph.members
        members |= shows
        out.append(graph.edge_subgraph(keep, members=members, bucket=b, missing_category=missing))
    return out


def category_bucket(categories: Sequence[str], parts: int) -> dict[str, int]:
    cats = sorted(set(categories))
    if len(cats) <= parts:
        return {c: i for i, c in enumerate(cats)}
    return {c: zlib.crc32(c.encode("utf-8")) % parts for c in cats}


def node_buckets(graph: Graph, category_of: Mapping[str, str], parts: int) -> tuple[np.ndarray, int]:
    """Bucket per node (-1 for users, whose placement follows their edges) and
    the number of show combos that had no category."""
    bucket = np.full(graph.num_nodes, -1, dtype=np.int64)
    shows = np.flatnonzero(graph.kinds == NodeKind.SHOW)
    cats = {graph.external_ids[s]: category_of.get(graph.external_ids[s]) for s in shows}
    table = category_bucket([c for c in cats.values() if c is not None], parts)
    missing = 0
    for s in shows:
        c = cats[graph.external_ids[s]]
        if c is None:
            missing += 1
            bucket[s] = 0
        else:
            bucket[s] = table[c]
    if missing:
        logger.warning("%d show-combo nodes without category assigned to bucket 0", missing)
    return bucket, missing


def edge_buckets(graph: Graph, bucket: np.ndarray, parts: int) -> np.ndarray:
    """Bucket per edge, -1 for edges cut by the partition."""
    out = np.full(graph.num_edges, -1, dtype=np.int64)
    kinds = graph.edge_kinds
    us = np.flatnonzero(kinds == EdgeKind.USER_SHOW)
    show_end = np.where(graph.kinds[graph.src[us]] == NodeKind.SHOW, graph.src[us], graph.dst[us])
    user_end = np.where(graph.kinds[graph.src[us]] == NodeKind.SHOW, graph.dst[us], graph.src[us])
    out[us] = bucket[show_end]

    ss = np.flatnonzero(kinds == EdgeKind.SHOW_SHOW)
    same = bucket[graph.src[ss]] == bucket[graph.dst[ss]]
    out[ss[same]] = bucket[graph.src[ss[same]]]

    present = np.zeros((graph.num_nodes, parts), dtype=bool)
    present[user_end, bucket[show_end]] = True
    uu = np.flatnonzero(kinds == EdgeKind.USER_USER)
    both = present[graph.src[uu]] & present[graph.dst[uu]]
    has = both.any(axis=1)
    out[uu[has]] = np.argmax(both[has], axis=1)
    return out


def degree_distribution(graph: Graph, kind: EdgeKind, thresholds: Sequence[int]) -> list[float]:
    """Fraction of nodes whose ``kind``-degree is strictly above each threshold.

    Only member nodes whose kind is an endpoint of ``kind`` are counted.
    """
    thresholds = list(thresholds)
    if any(a < b for a, b in zip(thresholds, thresholds[1:])):
        raise ValueError("thresholds must be in descending order")
    kind = EdgeKind(kind)
    ends = {int(k) for k in kind.endpoints}
    pool = np.isin(graph.kinds, list(ends)) & graph.members
    deg = graph.degree(kind)[pool]
    if len(deg) == 0:
        return [0.0 for _ in thresholds]
    return [float(np.count_nonzero(deg > t)) / len(deg) for t in thresholds]


# ---------------------------------------------------------------------------
# text and binary formats


def parse_profile(text: str) -> dict[str, str]:
    """Parse ``key=value;key=value``.

    A segment without ``=`` continues the previous key's value, which is how
    multi-valued fields such as actor lists are written: ``actors=a;b;director=c``.
    """
    out: dict[str, str] = {}
    last = None
    for part in text.strip().split(";"):
        part = part.strip()
        if not part:
            continue
        if "=" in part:
            key, value = part.split("=", 1)
            last = key.strip()
            out[last] = value.strip()
        elif last is not None:
            out[last] = f"{out[last]};{part}"
    return out


def format_profile(profile: Mapping[str, str]) -> str:
    return ";".join(f"{k}={v}" for k, v in profile.items())


def read_interactions(path: str | Path) -> tuple[list[RawInteraction], int]:
    """Read ``interactions.tsv``; returns records and the count of unparsable lines."""
    records, bad = [], 0
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line.strip():
                continue
            cols = line.split("\t")
            if len(cols) != 4:
                bad += 1
                continue
            try:
                records.append(RawInteraction(cols[0].strip(), cols[1].strip(), int(cols[2]), float(cols[3])))
            except ValueError:
                bad += 1
    return records, bad


def read_profiles(path: str | Path) -> dict[str, dict[str, str]]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line.strip():
                continue
            combo, _, rest = line.partition("\t")
            out[combo.strip()] = parse_profile(rest)
    return out


def write_interactions(path: str | Path, records: Iterable[RawInteraction]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            view = int(r.view_time) if float(r.view_time).is_integer() else r.view_time
            fh.write(f"{r.user_id}\t{r.show_combo_id}\t{r.click_count}\t{view}\n")


def write_profiles(path: str | Path, profiles: Mapping[str, Mapping[str, str]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for combo, prof in profiles.items():
            fh.write(f"{combo}\t{format_profile(prof)}\n")


def save_graph(graph: Graph, path: str | Path, idmap_path: str | Path | None = None) -> None:
    """Write ``graph.bin`` and, next to it, ``idmap.tsv``."""
    path = Path(path)
    idmap_path = Path(idmap_path) if idmap_path else path.with_name("idmap.tsv")
    n, e, m_e = graph.num_nodes, graph.num_edges, graph.edge_dim
    m_f = 0 if graph.node_features is None else graph.node_features.shape[1]
    header = {
        "norm_scheme": graph.norm_scheme,
        "profiles": graph.profiles,
        "meta": graph.meta,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(GRAPH_MAGIC)
        fh.write(struct.pack("<IQQII", GRAPH_VERSION, n, e, m_e, m_f))
        fh.write(graph.kinds.astype("<u1").tobytes())
        fh.write(graph.members.astype("<u1").tobytes())
        if m_f:
            fh.write(graph.node_features.astype("<f8").tobytes())
        for arr, dt in ((graph.src, "<u8"), (graph.dst, "<u8"), (graph.edge_kinds, "<u1"),
                        (graph.weights, "<f8"), (graph.raw_edge_features, "<f8"),
                        (graph.edge_features, "<f8"), (graph.edge_origin, "<u8")):
            fh.write(np.ascontiguousarray(arr).astype(dt).tobytes())
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
    with open(idmap_path, "w", encoding="utf-8") as fh:
        for i, ext in enumerate(graph.external_ids):
            fh.write(f"{ext}\t{NodeKind(int(graph.kinds[i])).name.lower()}\t{i}\n")


def load_graph(path: str | Path, idmap_path: str | Path | None = None) -> Graph:
    path = Path(path)
    idmap_path = Path(idmap_path) if idmap_path else path.with_name("idmap.tsv")
    data = path.read_bytes()
    if data[:4] != GRAPH_MAGIC:
        raise ValueError(f"{path} is not a graph file")
    version, n, e, m_e, m_f = struct.unpack_from("<IQQII", data, 4)
    if version != GRAPH_VERSION:
        raise ValueError(f"unsupported graph version {version}")
    off = 4 + struct.calcsize("<IQQII")

    def take(dtype: str, count: int) -> np.ndarray:
        nonlocal off
        arr = np.frombuffer(data, dtype=dtype, count=count, offset=off)
        off += arr.nbytes
        return arr

    kinds = take("<u1", n).astype(np.int8)
    members = take("<u1", n).astype(bool)
    node_features = take("<f8", n * m_f).reshape(n, m_f).copy() if m_f else None
    src = take("<u8", e).astype(np.int64)
    dst = take("<u8", e).astype(np.int64)
    ekinds = take("<u1", e).astype(np.int8)
    weights = take("<f8", e).copy()
    raw = take("<f8", e * m_e).reshape(e, m_e).copy()
    feats = take("<f8", e * m_e).reshape(e, m_e).copy()
    origin = take("<u8", e).astype(np.int64)
    (blob_len,) = struct.unpack_from("<Q", data, off)
    header = json.loads(data[off + 8: off + 8 + blob_len].decode("utf-8"))

    external_ids = [""] * n
    with open(idmap_path, encoding="utf-8") as fh:
        for line in fh:
            ext, _, idx = line.rstrip("\n").split("\t")
            external_ids[int(idx)] = ext
    return Graph(kinds, external_ids, header["profiles"], src, dst, ekinds, weights, raw, feats,
                 node_features=node_features, norm_scheme=header["norm_scheme"], members=members,
                 edge_origin=origin, meta=header["meta"])
