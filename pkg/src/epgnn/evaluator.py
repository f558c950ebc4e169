"""Link-prediction evaluation: held-out edge splits, edge scoring and metrics."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .graph import EDGE_ENDPOINTS, EdgeKind, Graph, NodeKind
from .model import sigmoid


class UndefinedMetric(ValueError):
    pass


@dataclass
class EdgeSplit:
    """Held-out positives (as ``(a, b, kind)`` rows) and equal-size sampled non-edges."""

    train_graph: Graph
    valid_pos: np.ndarray
    valid_neg: np.ndarray
    test_pos: np.ndarray
    test_neg: np.ndarray
    seed: int

    @staticmethod
    def _keys(rows: np.ndarray) -> set[tuple[int, int]]:
        return {(min(a, b), max(a, b)) for a, b in rows[:, :2].tolist()}

    def pairs(self, part: str) -> tuple[np.ndarray, np.ndarray]:
        pos, neg = (self.valid_pos, self.valid_neg) if part == "valid" else (self.test_pos, self.test_neg)
        pairs = np.concatenate([pos[:, :2], neg[:, :2]])
        labels = np.concatenate([np.ones(len(pos), dtype=np.int64), np.zeros(len(neg), dtype=np.int64)])
        return pairs, labels


@dataclass
class MetricReport:
    roc_auc: float
    pr_auc: float
    f1: float
    threshold: float

    def to_dict(self) -> dict:
        return asdict(self)


def _edge_rows(graph: Graph, idx: np.ndarray) -> np.ndarray:
    return np.column_stack([graph.src[idx], graph.dst[idx], graph.edge_kinds[idx]]).astype(np.int64)


def split_edges(graph: Graph, valid_frac: float = 0.05, test_frac: float = 0.10, seed: int = 0) -> EdgeSplit:
    """Hold out ``valid_frac``/``test_frac`` of the edges and pair them with non-edges.

    Edges are visited in a seeded random order and an edge is only held out
    if both endpoints keep at least one training edge, so no node is isolated.
    Negatives are uniform same-kind node pairs that are not edges of ``graph``.
    """
    if valid_frac < 0 or test_frac < 0 or valid_frac + test_frac >= 1:
        raise ValueError("fractions must be nonnegative and sum to < 1")
    rng = np.random.default_rng(seed)
    e = graph.num_edges
    n_valid = int(round(valid_frac * e))
    n_test = int(round(test_frac * e))
    need = n_valid + n_test
    deg = graph.degree().copy()
    held = []
    if need:
        for idx in rng.permutation(e):
            a, b = graph.src[idx], graph.dst[idx]
            if deg[a] > 1 and deg[b] > 1:
                deg[a] -= 1
                deg[b] -= 1
                held.append(idx)
                if len(held) == need:
                    break
        if len(held) < need:
            raise ValueError(f"graph too small: only {len(held)} of {need} edges can be held out "
                             "without isolating a node")
    held = np.array(held, dtype=np.int64)
    valid_idx, test_idx = held[:n_valid], held[n_valid:]
    keep = np.ones(e, dtype=bool)
    keep[held] = False
    train_graph = graph.edge_subgraph(keep)

    taken = graph.edge_keys()
    valid_pos = _edge_rows(graph, valid_idx)
    test_pos = _edge_rows(graph, test_idx)
    valid_neg = _sample_negatives(graph, valid_pos[:, 2], taken, rng)
    test_neg = _sample_negatives(graph, test_pos[:, 2], taken, rng)
    return EdgeSplit(train_graph, valid_pos, valid_neg, test_pos, test_neg, seed)


def _sample_negatives(graph: Graph, kinds: np.ndarray, taken: set, rng: np.random.Generator,
                      max_tries: int = 1000) -> np.ndarray:
    """One non-edge per requested kind; ``taken`` grows so negatives never repeat.

    Rejection sampling first; when that stalls on a dense kind, draw from the
    explicit list of remaining non-edges.
    """
    rows = []
    pools = {k: graph.nodes_of_kind(k) for k in NodeKind}
    for kind in kinds.tolist():
        ka, kb = EDGE_ENDPOINTS[EdgeKind(kind)]
        pa, pb = pools[ka], pools[kb]
        if len(pa) == 0 or len(pb) == 0:
            raise ValueError(f"could not find a non-edge of kind {EdgeKind(kind).name}")
        for _ in range(max_tries):
            a = int(pa[rng.integers(len(pa))])
            b = int(pb[rng.integers(len(pb))])
            key = (min(a, b), max(a, b))
            if a != b and key not in taken:
                break
        else:
            free = sorted({(min(a, b), max(a, b)) for a in pa.tolist() for b in pb.tolist() if a != b} - taken)
            if not free:
                raise ValueError(f"could not find a non-edge of kind {EdgeKind(kind).name}")
            a, b = free[int(rng.integers(len(free)))]
            key = (a, b)
        taken.add(key)
        rows.append((a, b, kind))
    return np.array(rows, dtype=np.int64).reshape(-1, 3)


def score_edge(embeddings: Mapping[int, np.ndarray] | np.ndarray, a: int, b: int, metric: str = "dot") -> float:
    """``sigmoid(v_a . v_b)``, or cosine similarity with ``metric='cosine'``."""
    try:
        va, vb = np.asarray(embeddings[a], dtype=np.float64), np.asarray(embeddings[b], dtype=np.float64)
    except (KeyError, IndexError) as exc:
        raise KeyError(f"missing embedding for edge ({a}, {b})") from exc
    if metric == "cosine":
        denom = np.linalg.norm(va) * np.linalg.norm(vb)
        return float(va @ vb / denom) if denom > 0 else 0.0
    return float(sigmoid(float(va @ vb)))


def score_pairs(embeddings: np.ndarray, pairs: np.ndarray, metric: str = "dot") -> np.ndarray:
    emb = np.asarray(embeddings, dtype=np.float64)
    va, vb = emb[pairs[:, 0]], emb[pairs[:, 1]]
    dots = np.einsum("pd,pd->p", va, vb)
    if metric == "cosine":
        denom = np.linalg.norm(va, axis=1) * np.linalg.norm(vb, axis=1)
        return np.divide(dots, denom, out=np.zeros_like(dots), where=denom > 0)
    return sigmoid(dots)


def _check_labels(labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    return labels.astype(bool)


def average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing the mean rank."""
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="mergesort")
    sorted_vals = values[order]
    starts = np.flatnonzero(np.concatenate([[True], sorted_vals[1:] != sorted_vals[:-1]]))
    ends = np.concatenate([starts[1:], [len(values)]])
    mean_rank = (starts + ends + 1) / 2.0
    ranks = np.empty(len(values))
    ranks[order] = np.repeat(mean_rank, ends - starts)
    return ranks


def roc_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Mann-Whitney estimate of ROC-AUC; ties count one half."""
    y = _check_labels(labels)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetric("undefined AUC: need both classes")
    ranks = average_ranks(scores)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def pr_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Step-wise area under the precision-recall curve (average precision)."""
    y = _check_labels(labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedMetric("undefined PR-AUC: no positives")
    s = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    tp = np.cumsum(y)
    # evaluate only at the last index of each block of tied scores
    last = np.flatnonzero(np.concatenate([s[1:] != s[:-1], [True]]))
    tp_t = tp[last].astype(np.float64)
    precision = tp_t / (last + 1)
    recall = tp_t / n_pos
    d_recall = np.diff(np.concatenate([[0.0], recall]))
    return float(np.sum(d_recall * precision))


def f1_at(scores: np.ndarray, labels: np.ndarray, threshold: float) -> float:
    y = _check_labels(labels)
    pred = np.asarray(scores) >= threshold
    tp = np.count_nonzero(pred & y)
    fp = np.count_nonzero(pred & ~y)
    fn = np.count_nonzero(~pred & y)
    return 0.0 if tp == 0 else 2 * tp / (2 * tp + fp + fn)


def f1_best(scores_valid, labels_valid, scores_test, labels_test) -> tuple[float, float]:
    """Threshold with the best validation F1 (ties toward the lower threshold)
    and the test F1 at that threshold. Predicts positive when ``score >= threshold``."""
    y = _check_labels(labels_valid)
    if y.all() or not y.any():
        raise UndefinedMetric("undefined F1 threshold: validation needs both classes")
    s = np.asarray(scores_valid, dtype=np.float64)
    order = np.argsort(-s, kind="mergesort")
    s_sorted, y_sorted = s[order], y[order]
    tp = np.cumsum(y_sorted)
    last = np.flatnonzero(np.concatenate([s_sorted[1:] != s_sorted[:-1], [True]]))
    tp_t = tp[last]
    predicted = last + 1
    f1 = 2 * tp_t / (predicted + y.sum())
    # candidates run from high to low threshold; take the last maximum
    best = len(f1) - 1 - int(np.argmax(f1[::-1]))
    threshold = float(s_sorted[last[best]])
    return threshold, f1_at(np.asarray(scores_test), np.asarray(labels_test), threshold)


def evaluate(embeddings: np.ndarray, split: EdgeSplit, metric: str = "dot") -> MetricReport:
    """ROC-AUC and PR-AUC on the test split, F1 at the validation-optimal threshold."""
    test_pairs, test_labels = split.pairs("test")
    valid_pairs, valid_labels = split.pairs("valid")
    test_scores = score_pairs(embeddings, test_pairs, metric)
    valid_scores = score_pairs(embeddings, valid_pairs, metric)
    threshold, f1 = f1_best(valid_scores, valid_labels, test_scores, test_labels)
    return MetricReport(roc_auc(test_scores, test_labels), pr_auc(test_scores, test_labels), f1, threshold)


def embeddings_matrix(graph: Graph, vectors: Mapping[str, np.ndarray]) -> np.ndarray:
    """Arrange an external ``{external_id: vector}`` table by node id."""
    dim = len(next(iter(vectors.values())))
    out = np.full((graph.num_nodes, dim), np.nan)
    for ext, vec in vectors.items():
        idx = graph.index.get(ext)
        if idx is not None:
            out[idx] = vec
    return out


def write_split(path: str | Path, graph: Graph, split: EdgeSplit) -> None:
    """``part \\t src_external \\t dst_external \\t label`` rows for valid and test."""
    ext = graph.external_ids
    with open(path, "w", encoding="utf-8") as fh:
        for part in ("valid", "test"):
            pairs, labels = split.pairs(part)
            for (a, b), lab in zip(pairs.tolist(), labels.tolist()):
                fh.write(f"{part}\t{ext[a]}\t{ext[b]}\t{lab}\n")


def write_report(path: str | Path, report: MetricReport, dataset: str, seed: int, extra: dict | None = None) -> None:
    payload = {"dataset": dataset, "split_seed": seed, "metrics": report.to_dict(), "threshold": report.threshold}
    if extra:
        payload.update(extra)
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# multiplex public datasets (``edge_type src dst [label]`` lines)


def read_multiplex_edges(path: str | Path) -> list[tuple[str, str, str, int]]:
    """Rows of ``(edge_type, src, dst, label)``; label defaults to 1."""
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            parts = line.split()
            if len(parts) < 3:
                continue
            label = int(parts[3]) if len(parts) > 3 else 1
            rows.append((parts[0], parts[1], parts[2], label))
    return rows


def multiplex_graph(rows: Sequence[tuple[str, str, str, int]]) -> tuple[Graph, list[str]]:
    """Single-kind graph whose edge features one-hot encode the edge type.

    Parallel edges of different types between one node pair are merged into
    one edge with several active channels. Only rows with label 1 are used.
    """
    types = sorted({r[0] for r in rows})
    tpos = {t: i for i, t in enumerate(types)}
    nodes = sorted({x for r in rows for x in (r[1], r[2])})
    nid = {x: i for i, x in enumerate(nodes)}
    feats: dict[tuple[int, int], np.ndarray] = {}
    for t, a, b, lab in rows:
        if lab != 1 or a == b:
            continue
        ia, ib = nid[a], nid[b]
        key = (min(ia, ib), max(ia, ib))
        feats.setdefault(key, np.zeros(len(types)))[tpos[t]] = 1.0
    keys = sorted(feats)
    src = np.array([k[0] for k in keys], dtype=np.int64)
    dst = np.array([k[1] for k in keys], dtype=np.int64)
    raw = np.array([feats[k] for k in keys]).reshape(len(keys), len(types))
    graph = Graph(
        np.full(len(nodes), NodeKind.USER, dtype=np.int8), nodes, [{} for _ in nodes],
        src, dst, np.full(len(keys), EdgeKind.USER_USER, dtype=np.int8), raw.sum(axis=1), raw, raw,
        norm_scheme="one-hot",
    )
    return graph, types
