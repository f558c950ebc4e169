"""Edge-prompted message passing network with hand-derived gradients.

One layer computes, for node ``i`` with sampled neighbors ``j``::

    v_i' = b_i + f(v_i) + sum_j alpha(v_i, v_j) * sum_k u_ijk W_k v_j

where ``f`` is a two-layer tanh network, ``alpha`` a sigmoid over a linear
map of ``[v_i; v_j]`` and ``u_ij`` the normalized edge-feature vector. The
objective is the negative-sampling log-sigmoid loss over the outputs.
"""

from __future__ import annotations

import copy
import json
import logging
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import sparse

from .graph import Graph, NodeKind
from .sampler import NeighborCache, resample_slots

logger = logging.getLogger(__name__)

CKPT_MAGIC = b"EPM1"
CKPT_VERSION = 1
ATTENTION_MODES = ("sigmoid", "softmax", "none")
DENSE_PARAMS = ("F_w1", "F_b1", "F_w2", "F_b2", "A_w", "A_b", "W")
PARAM_NAMES = ("V", "B") + DENSE_PARAMS


@dataclass
class ModelDims:
    m_n: int = 32
    m_e: int = 2
    layers: int = 1
    hidden: int | None = None
    attention: str = "sigmoid"

    def __post_init__(self):
        if self.hidden is None:
            self.hidden = self.m_n

    def validate(self) -> None:
        if self.m_n < 1 or self.m_e < 1 or self.layers < 1 or self.hidden < 1:
            raise ValueError("model dimensions must be >= 1")
        if self.attention not in ATTENTION_MODES:
            raise ValueError(f"attention must be one of {ATTENTION_MODES}")


@dataclass
class LossConfig:
    q: float = 1.0
    negatives_per_positive: int = 5
    neg_power: float = 0.75

    def validate(self) -> None:
        if self.q < 0:
            raise ValueError("q must be >= 0")
        if self.negatives_per_positive < 1:
            raise ValueError("negatives_per_positive must be >= 1")


@dataclass
class TrainConfig:
    epochs: int = 5
    batch_size: int = 256
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    rng_seed: int = 0

    def validate(self) -> None:
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class ModelParams:
    V: np.ndarray
    B: np.ndarray
    F_w1: np.ndarray
    F_b1: np.ndarray
    F_w2: np.ndarray
    F_b2: np.ndarray
    A_w: np.ndarray
    A_b: np.ndarray
    W: np.ndarray
    dims: ModelDims

    @property
    def num_nodes(self) -> int:
        return self.V.shape[0]

    def tensors(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self) -> "ModelParams":
        return ModelParams(**{k: v.copy() for k, v in self.tensors().items()}, dims=copy.copy(self.dims))


def init_params(num_nodes: int, dims: ModelDims, seed: int = 0,
                node_features: np.ndarray | None = None) -> ModelParams:
    """Random initialization; rows of ``node_features`` without NaN seed ``V``."""
    dims.validate()
    rng = np.random.default_rng(seed)
    d, h, m_e = dims.m_n, dims.hidden, dims.m_e
    V = rng.uniform(-0.5 / d, 0.5 / d, size=(num_nodes, d))
    if node_features is not None:
        feats = np.asarray(node_features, dtype=np.float64)
        if feats.shape[1] != d:
            raise ValueError(f"node features have width {feats.shape[1]}, expected m_n={d}")
        ok = ~np.isnan(feats).any(axis=1)
        V[ok] = feats[ok]
    B = rng.uniform(-0.5 / d, 0.5 / d, size=(num_nodes, d))
    lim1 = np.sqrt(6.0 / (d + h))
    return ModelParams(
        V=V,
        B=B,
        F_w1=rng.uniform(-lim1, lim1, size=(h, d)),
        F_b1=np.zeros(h),
        F_w2=rng.uniform(-lim1, lim1, size=(d, h)),
        F_b2=np.zeros(d),
        A_w=rng.normal(0.0, 0.1, size=2 * d),
        A_b=np.zeros(1),
        W=rng.normal(0.0, 1.0 / np.sqrt(d * m_e), size=(m_e, d, d)),
        dims=dims,
    )


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def log_sigmoid(x):
    """``log(sigmoid(x)) = -softplus(-x)`` without overflow."""
    return -np.logaddexp(0.0, -np.asarray(x, dtype=np.float64))


# ---------------------------------------------------------------------------
# single-pair building blocks


def attention(params: ModelParams, v_i: np.ndarray, v_j: np.ndarray) -> float:
    """Per-pair attention coefficient ``sigmoid(a . [v_i; v_j] + c)``."""
    if params.dims.attention == "none":
        return 1.0
    z = float(np.dot(params.A_w, np.concatenate([v_i, v_j])) + params.A_b[0])
    return float(sigmoid(z))


def interaction(params: ModelParams, v_i: np.ndarray, neighbors: Sequence[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    """Two-body term for one node given ``(v_j, u_ij)`` neighbor tuples."""
    d, m_e = params.dims.m_n, params.dims.m_e
    v_i = np.asarray(v_i, dtype=np.float64)
    if v_i.shape != (d,):
        raise ValueError(f"v_i must have shape ({d},)")
    g = np.zeros(d)
    if not neighbors:
        return g
    vs = []
    for v_j, u in neighbors:
        v_j, u = np.asarray(v_j, dtype=np.float64), np.asarray(u, dtype=np.float64)
        if v_j.shape != (d,) or u.shape != (m_e,):
            raise ValueError("neighbor embedding or edge feature has the wrong dimension")
        vs.append((v_j, u))
    if params.dims.attention == "softmax":
        z = np.array([np.dot(params.A_w, np.concatenate([v_i, v_j])) + params.A_b[0] for v_j, _ in vs])
        alphas = np.exp(z - z.max())
        alphas /= alphas.sum()
    else:
        alphas = [attention(params, v_i, v_j) for v_j, _ in vs]
    for alpha, (v_j, u) in zip(alphas, vs):
        g += alpha * np.einsum("k,kde,e->d", u, params.W, v_j)
    return g


def scalar_edge_interaction(params: ModelParams, v_i: np.ndarray, neighbors: Sequence[tuple[np.ndarray, float]]) -> np.ndarray:
    """Single-matrix form for one scalar edge channel: ``W (sum_j alpha_ij u_ij v_j)``.

    With ``m_e == 1`` this is algebraically the same as :func:`interaction`,
    but aggregates before applying the shared matrix.
    """
    if params.dims.m_e != 1:
        raise ValueError("scalar edge form needs m_e == 1")
    agg = np.zeros(params.dims.m_n)
    for v_j, u in neighbors:
        u = float(np.asarray(u).reshape(-1)[0])
        agg += attention(params, v_i, v_j) * u * np.asarray(v_j, dtype=np.float64)
    return params.W[0] @ agg


def one_body(params: ModelParams, v: np.ndarray) -> np.ndarray:
    return params.F_w2 @ np.tanh(params.F_w1 @ v + params.F_b1) + params.F_b2


# ---------------------------------------------------------------------------
# batched forward/backward over a layered computation plan


NeighborSource = Callable[[np.ndarray], tuple[np.ndarray, np.ndarray, np.ndarray]]
"""Maps an array of node ids to flat ``(owner_index, neighbor_id, u_rows)``."""


class SampledNeighbors:
    """Fresh second-order draw from the cache on every call."""

    def __init__(self, cache: NeighborCache, s2_fraction: float, rng: np.random.Generator):
        self.cache, self.s2, self.rng = cache, s2_fraction, rng

    def __call__(self, nodes):
        nodes = np.asarray(nodes, dtype=np.int64)
        inside = nodes < self.cache.num_nodes
        owner, slots = resample_slots(self.cache, nodes[inside], self.s2, self.rng)
        owner = np.flatnonzero(inside)[owner]
        return owner, self.cache.neighbors[slots], self.cache.edge_features[slots]


class FullNeighbors:
    """Every graph neighbor, scaled as configured."""

    def __init__(self, graph: Graph, scale: Callable[[np.ndarray], np.ndarray] | None = None):
        self.graph = graph
        self.scale = scale

    def __call__(self, nodes):
        g = self.graph
        nodes = np.asarray(nodes, dtype=np.int64)
        deg = g.indptr[nodes + 1] - g.indptr[nodes]
        owner = np.repeat(np.arange(len(nodes)), deg)
        starts = np.repeat(g.indptr[nodes], deg)
        slot = starts + (np.arange(len(owner)) - np.repeat(np.cumsum(deg) - deg, deg))
        u = g.edge_features[g.adj_edge[slot]]
        if self.scale is not None:
            u = u * self.scale(deg)[owner][:, None]
        return owner, g.adj_nbr[slot], u


class FixedNeighbors:
    """Explicit ``{node: [(neighbor, u_ij), ...]}`` lists, reused at every layer."""

    def __init__(self, table: dict[int, Sequence[tuple[int, Sequence[float]]]], m_e: int):
        self.table, self.m_e = table, m_e

    def __call__(self, nodes):
        owner, nbr, u = [], [], []
        for pos, node in enumerate(np.asarray(nodes).tolist()):
            for j, feats in self.table.get(int(node), ()):
                owner.append(pos)
                nbr.append(int(j))
                u.append(np.asarray(feats, dtype=np.float64))
        u_arr = np.array(u, dtype=np.float64).reshape(len(u), self.m_e)
        return np.array(owner, dtype=np.int64), np.array(nbr, dtype=np.int64), u_arr


@dataclass
class Level:
    nodes: np.ndarray
    self_pos: np.ndarray
    nbr_pos: np.ndarray
    u: np.ndarray
    mask: np.ndarray


@dataclass
class Plan:
    """Layer-by-layer node sets; ``levels[t]`` computes layer ``t + 1`` outputs
    for ``levels[t].nodes`` from rows of the layer-``t`` node set."""

    inputs: np.ndarray
    levels: list[Level]

    @property
    def targets(self) -> np.ndarray:
        return self.levels[-1].nodes if self.levels else self.inputs


def build_plan(targets: np.ndarray, source: NeighborSource, layers: int, m_e: int) -> Plan:
    """Expand ``targets`` downward through ``layers`` rounds of neighbor lookups.

    Each layer draws its own neighbors, so sampled sources re-sample per layer.
    """
    current = np.unique(np.asarray(targets, dtype=np.int64))
    pending = []
    for _ in range(layers):
        owner, nbr, u = source(current)
        prev = np.unique(np.concatenate([current, nbr]))
        counts = np.bincount(owner, minlength=len(current))
        width = int(counts.max()) if len(counts) and len(owner) else 0
        order = np.argsort(owner, kind="stable")
        owner, nbr, u = owner[order], nbr[order], u[order]
        col = np.arange(len(owner)) - np.repeat(np.cumsum(counts) - counts, counts)
        nbr_pos = np.zeros((len(current), width), dtype=np.int64)
        u_pad = np.zeros((len(current), width, m_e))
        mask = np.zeros((len(current), width))
        nbr_pos[owner, col] = np.searchsorted(prev, nbr)
        u_pad[owner, col] = u
        mask[owner, col] = 1.0
        pending.append(Level(current, np.searchsorted(prev, current), nbr_pos, u_pad, mask))
        current = prev
    return Plan(current, pending[::-1])


def input_rows(params: ModelParams, nodes: np.ndarray, node_features: np.ndarray | None = None) -> np.ndarray:
    """Layer-0 vectors: trained rows for known nodes, side features (or zeros) otherwise."""
    nodes = np.asarray(nodes, dtype=np.int64)
    out = np.zeros((len(nodes), params.dims.m_n))
    known = nodes < params.num_nodes
    out[known] = params.V[nodes[known]]
    if node_features is not None and (~known).any():
        feats = node_features[nodes[~known]]
        feats = np.where(np.isnan(feats), 0.0, feats)
        out[~known] = feats
    return out


def bias_rows(params: ModelParams, nodes: np.ndarray) -> np.ndarray:
    nodes = np.asarray(nodes, dtype=np.int64)
    out = np.zeros((len(nodes), params.dims.m_n))
    known = nodes < params.num_nodes
    out[known] = params.B[nodes[known]]
    return out


def scatter_rows(n: int, index: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """``out[index[i]] += rows[i]`` for repeated indices, as a sparse product."""
    index = np.asarray(index, dtype=np.int64).reshape(-1)
    op = sparse.csr_matrix((np.ones(len(index)), (index, np.arange(len(index)))), shape=(n, len(index)))
    return np.asarray(op @ rows)


def _layer_forward(p: ModelParams, h: np.ndarray, level: Level):
    d = p.dims.m_n
    hs = h[level.self_pos]
    hn = h[level.nbr_pos]
    mask = level.mask
    pre = hs @ p.F_w1.T + p.F_b1
    act = np.tanh(pre)
    f = act @ p.F_w2.T + p.F_b2
    z = (hs @ p.A_w[:d])[:, None] + hn @ p.A_w[d:] + p.A_b[0]
    mode = p.dims.attention
    if mode == "sigmoid":
        alpha = sigmoid(z) * mask
    elif mode == "softmax":
        zm = np.where(mask > 0, z, -np.inf)
        top = np.max(zm, axis=1, keepdims=True, initial=-np.inf)
        top = np.where(np.isfinite(top), top, 0.0)
        ex = np.exp(zm - top) * mask
        tot = ex.sum(axis=1, keepdims=True)
        alpha = np.divide(ex, tot, out=np.zeros_like(ex), where=tot > 0)
    else:
        alpha = mask.copy()
    # sum_s alpha_s u_sk h_s, then one matrix product per channel
    agg = np.matmul((alpha[:, :, None] * level.u).transpose(0, 2, 1), hn)
    m_e = p.dims.m_e
    g = agg.reshape(len(hs), m_e * d) @ p.W.transpose(0, 2, 1).reshape(m_e * d, d)
    out = bias_rows(p, level.nodes) + f + g
    return out, (hs, hn, act, z, alpha, agg)


def _layer_backward(p: ModelParams, level: Level, cache, dout: np.ndarray, grads: dict, n_prev: int):
    d = p.dims.m_n
    hs, hn, act, z, alpha, agg = cache
    mask, u = level.mask, level.u
    grads["B_rows"].append((level.nodes, dout))

    grads["F_w2"] += dout.T @ act
    grads["F_b2"] += dout.sum(axis=0)
    dpre = (dout @ p.F_w2) * (1.0 - act ** 2)
    grads["F_w1"] += dpre.T @ hs
    grads["F_b1"] += dpre.sum(axis=0)
    dhs = dpre @ p.F_w1

    m_e = p.dims.m_e
    grads["W"] += (dout.T @ agg.reshape(len(dout), m_e * d)).reshape(d, m_e, d).transpose(1, 0, 2)
    r = (dout @ p.W.transpose(1, 0, 2).reshape(d, m_e * d)).reshape(len(dout), m_e, d)  # W_k^T dout
    ur = np.matmul(u, r)
    dhn = alpha[:, :, None] * ur
    dalpha = (ur * hn).sum(axis=2)
    mode = p.dims.attention
    if mode == "sigmoid":
        dz = dalpha * alpha * (1.0 - sigmoid(z)) * mask
    elif mode == "softmax":
        dz = alpha * (dalpha - (alpha * dalpha).sum(axis=1, keepdims=True))
    else:
        dz = np.zeros_like(dalpha)
    grads["A_w"][:d] += dz.sum(axis=1) @ hs
    grads["A_w"][d:] += dz.reshape(-1) @ hn.reshape(-1, d)
    grads["A_b"] += dz.sum()
    dhs += dz.sum(axis=1)[:, None] * p.A_w[:d]
    dhn += dz[:, :, None] * p.A_w[d:]

    dh = scatter_rows(n_prev, level.self_pos, dhs)
    dh += scatter_rows(n_prev, level.nbr_pos.reshape(-1), (dhn * mask[:, :, None]).reshape(-1, d))
    return dh


def forward_plan(params: ModelParams, plan: Plan, node_features: np.ndarray | None = None):
    h = input_rows(params, plan.inputs, node_features)
    caches = []
    for level in plan.levels:
        h, c = _layer_forward(params, h, level)
        caches.append(c)
    return h, caches


def forward(params: ModelParams, nodes, source: NeighborSource, node_features: np.ndarray | None = None,
            allow_new: bool = False) -> np.ndarray:
    """Output embeddings for ``nodes`` (in the given order) after ``dims.layers`` layers.

    Ids past the trained table raise ``KeyError`` unless ``allow_new`` or
    ``node_features`` is given.
    """
    nodes = np.atleast_1d(np.asarray(nodes, dtype=np.int64))
    new_ok = allow_new or node_features is not None
    if nodes.size and (nodes.min() < 0 or (not new_ok and nodes.max() >= params.num_nodes)):
        raise KeyError(f"unknown node in {nodes.tolist()[:5]}")
    plan = build_plan(nodes, source, params.dims.layers, params.dims.m_e)
    out, _ = forward_plan(params, plan, node_features)
    return out[np.searchsorted(plan.targets, nodes)]


def forward_node(params: ModelParams, node: int, neighbors: Sequence[tuple[int, Sequence[float]]]) -> np.ndarray:
    """One node with an explicit neighbor list; the list is reused at every layer."""
    if not 0 <= node < params.num_nodes:
        raise KeyError(f"unknown node {node}")
    table = {int(node): list(neighbors)}
    return forward(params, [node], FixedNeighbors(table, params.dims.m_e))[0]


# ---------------------------------------------------------------------------
# loss and gradients


@dataclass
class Batch:
    centers: np.ndarray
    contexts: np.ndarray
    negatives: np.ndarray  # (P, N) node ids
    neg_mask: np.ndarray  # (P, N) 1.0 where a negative was drawn
    plan: Plan


def make_batch(pairs: np.ndarray, negatives: np.ndarray, neg_mask: np.ndarray | None,
               source: NeighborSource, dims: ModelDims) -> Batch:
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    negatives = np.asarray(negatives, dtype=np.int64).reshape(len(pairs), -1)
    if neg_mask is None:
        neg_mask = np.ones(negatives.shape)
    targets = np.concatenate([pairs.ravel(), negatives[neg_mask > 0]])
    plan = build_plan(targets, source, dims.layers, dims.m_e)
    return Batch(pairs[:, 0], pairs[:, 1], negatives, np.asarray(neg_mask, dtype=np.float64), plan)


def pair_terms(pos: np.ndarray, neg: np.ndarray, neg_mask: np.ndarray, q: float):
    """Per-pair loss and its derivatives w.r.t. positive and negative scores."""
    n_valid = neg_mask.sum(axis=1)
    scale = np.divide(q, n_valid, out=np.zeros_like(n_valid), where=n_valid > 0)
    loss = -log_sigmoid(pos) - scale * (log_sigmoid(-neg) * neg_mask).sum(axis=1)
    dpos = sigmoid(pos) - 1.0
    dneg = scale[:, None] * sigmoid(neg) * neg_mask
    return loss, dpos, dneg


def loss(params: ModelParams, batch: Batch, cfg: LossConfig, node_features: np.ndarray | None = None) -> float:
    """Mean over pairs of ``-log s(v_k.v_i) - Q * mean_neg log s(-v_j.v_i)``."""
    out, _ = forward_plan(params, batch.plan, node_features)
    pos, neg = _scores(out, batch)
    per_pair, _, _ = pair_terms(pos, neg, batch.neg_mask, cfg.q)
    return float(per_pair.mean())


def _scores(out: np.ndarray, batch: Batch):
    t = batch.plan.targets
    ci = np.searchsorted(t, batch.centers)
    ki = np.searchsorted(t, batch.contexts)
    ni = np.searchsorted(t, batch.negatives)
    ni = np.where(batch.neg_mask > 0, np.minimum(ni, len(t) - 1), 0)
    vc, vk, vn = out[ci], out[ki], out[ni]
    pos = np.einsum("pd,pd->p", vc, vk)
    neg = np.einsum("pd,pnd->pn", vc, vn)
    return pos, neg


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class Grads:
    dense: dict[str, np.ndarray]
    V_rows: tuple[np.ndarray, np.ndarray]
    B_rows: tuple[np.ndarray, np.ndarray]

    def to_dense(self, num_nodes: int) -> dict[str, np.ndarray]:
        out = dict(self.dense)
        for name, (ids, rows) in (("V", self.V_rows), ("B", self.B_rows)):
            full = np.zeros((num_nodes, rows.shape[1]))
            known = ids < num_nodes
            full[ids[known]] = rows[known]
            out[name] = full
        return out


def _merge_rows(chunks: list[tuple[np.ndarray, np.ndarray]], d: int):
    if not chunks:
        return np.zeros(0, dtype=np.int64), np.zeros((0, d))
    ids = np.concatenate([c[0] for c in chunks])
    rows = np.concatenate([c[1] for c in chunks])
    uniq, inv = np.unique(ids, return_inverse=True)
    return uniq, scatter_rows(len(uniq), inv, rows)


def loss_and_grad(params: ModelParams, batch: Batch, cfg: LossConfig,
                  node_features: np.ndarray | None = None) -> tuple[float, Grads]:
    """Mean batch loss and exact gradients for every parameter tensor."""
    d = params.dims.m_n
    plan = batch.plan
    out, caches = forward_plan(params, plan, node_features)
    t = plan.targets
    ci = np.searchsorted(t, batch.centers)
    ki = np.searchsorted(t, batch.contexts)
    ni = np.where(batch.neg_mask > 0, np.minimum(np.searchsorted(t, batch.negatives), len(t) - 1), 0)
    vc, vk, vn = out[ci], out[ki], out[ni]
    pos = np.einsum("pd,pd->p", vc, vk)
    neg = np.einsum("pd,pnd->pn", vc, vn)
    per_pair, dpos, dneg = pair_terms(pos, neg, batch.neg_mask, cfg.q)
    n_pairs = len(per_pair)
    dpos /= n_pairs
    dneg /= n_pairs

    idx = np.concatenate([ci, ki, ni.reshape(-1)])
    rows = np.concatenate([
        dpos[:, None] * vk + np.matmul(dneg[:, None, :], vn)[:, 0],
        dpos[:, None] * vc,
        (dneg[:, :, None] * vc[:, None, :]).reshape(-1, d),
    ])
    dout = scatter_rows(len(out), idx, rows)

    grads = {name: np.zeros_like(getattr(params, name)) for name in DENSE_PARAMS}
    grads["B_rows"] = []
    dh = dout
    for i in range(len(plan.levels) - 1, -1, -1):
        n_prev = len(plan.levels[i - 1].nodes) if i > 0 else len(plan.inputs)
        dh = _layer_backward(params, plan.levels[i], caches[i], dh, grads, n_prev)
    b_rows = _merge_rows(grads.pop("B_rows"), d)
    v_rows = (plan.inputs, dh)
    result = Grads(grads, v_rows, b_rows)
    for name, arr in list(grads.items()) + [("V", dh), ("B", b_rows[1])]:
        if not np.all(np.isfinite(arr)):
            raise NonFiniteGradient(f"non-finite gradient in tensor {name}")
    return float(per_pair.mean()), result


# ---------------------------------------------------------------------------
# negative sampling


class NegativeSampler:
    """Draws same-kind negatives from ``degree ** power``, never the context itself."""

    def __init__(self, graph: Graph, cfg: LossConfig):
        cfg.validate()
        self.cfg = cfg
        self.kinds = graph.kinds
        deg = graph.degree().astype(np.float64)
        self.pools = {}
        for kind in NodeKind:
            cand = graph.nodes_of_kind(kind)
            w = deg[cand] ** cfg.neg_power
            if len(cand) and w.sum() <= 0:
                w = np.ones(len(cand))
            cum = np.cumsum(w)
            self.pools[int(kind)] = (cand, cum / cum[-1] if len(cand) else cum)

    def draw(self, contexts: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """``(negatives, mask)`` of shape ``(len(contexts), negatives_per_positive)``."""
        contexts = np.asarray(contexts, dtype=np.int64)
        n = self.cfg.negatives_per_positive
        out = np.zeros((len(contexts), n), dtype=np.int64)
        mask = np.zeros((len(contexts), n))
        ctx_kinds = self.kinds[contexts]
        for kind, (cand, cum) in self.pools.items():
            rows = np.flatnonzero(ctx_kinds == kind)
            if len(rows) == 0 or len(cand) == 0:
                continue
            if len(cand) == 1:
                usable = rows[contexts[rows] != cand[0]]
                out[usable] = cand[0]
                mask[usable] = 1.0
                continue
            ctx = np.repeat(contexts[rows], n)
            picks = cand[np.minimum(np.searchsorted(cum, rng.random(len(ctx)), side="right"), len(cand) - 1)]
            clash = np.flatnonzero(picks == ctx)
            while len(clash):
                redraw = cand[np.minimum(np.searchsorted(cum, rng.random(len(clash)), side="right"), len(cand) - 1)]
                picks[clash] = redraw
                clash = clash[redraw == ctx[clash]]
            out[rows] = picks.reshape(-1, n)
            mask[rows] = 1.0
        return out, mask


def negative_sample(pair: tuple[int, int], graph: Graph, cfg: LossConfig, rng: np.random.Generator) -> list[int]:
    negs, mask = NegativeSampler(graph, cfg).draw(np.array([pair[1]]), rng)
    return [int(x) for x, m in zip(negs[0], mask[0]) if m > 0]


# ---------------------------------------------------------------------------
# optimizer and training


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "AdamState":
        return cls({k: np.zeros_like(a) for k, a in params.tensors().items()},
                   {k: np.zeros_like(a) for k, a in params.tensors().items()})


def adam_step(params: ModelParams, grads: Grads, state: AdamState, cfg: TrainConfig) -> None:
    """In-place Adam update; embedding tables update only the rows in the batch."""
    state.step += 1
    b1, b2, lr, eps = cfg.adam_beta1, cfg.adam_beta2, cfg.learning_rate, cfg.adam_eps
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step

    def update(name, target, idx, g):
        m = state.m[name]
        v = state.v[name]
        if idx is None:
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            target -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
        else:
            m[idx] = b1 * m[idx] + (1 - b1) * g
            v[idx] = b2 * v[idx] + (1 - b2) * g * g
            target[idx] -= lr * (m[idx] / c1) / (np.sqrt(v[idx] / c2) + eps)

    for name, g in grads.dense.items():
        update(name, getattr(params, name), None, g)
    for name, (ids, rows) in (("V", grads.V_rows), ("B", grads.B_rows)):
        known = ids < params.num_nodes
        update(name, getattr(params, name), ids[known], rows[known])


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, params: ModelParams, report: "TrainReport"):
        super().__init__(message)
        self.params = params
        self.report = report


@dataclass
class TrainReport:
    epoch_loss: list[float] = field(default_factory=list)
    batches: int = 0
    pairs: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def train(
    graph: Graph,
    cache: NeighborCache,
    pairs: np.ndarray,
    dims: ModelDims,
    loss_cfg: LossConfig,
    train_cfg: TrainConfig,
    s2_fraction: float = 0.5,
    params: ModelParams | None = None,
    adam: AdamState | None = None,
) -> tuple[ModelParams, TrainReport]:
    """Shuffled mini-batch training; deterministic for a fixed ``rng_seed``.

    Each batch draws negatives, re-samples neighbors from ``cache``, and takes
    one Adam step. On a non-finite loss the last end-of-epoch parameters are
    attached to the raised :class:`TrainingDiverged`.
    """
    dims.validate()
    loss_cfg.validate()
    train_cfg.validate()
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if len(pairs) == 0:
        raise ValueError("no training pairs")
    if params is None:
        params = init_params(graph.num_nodes, dims, train_cfg.rng_seed, graph.node_features)
    adam = adam or AdamState.zeros_like(params)
    rng = np.random.default_rng(train_cfg.rng_seed)
    negs = NegativeSampler(graph, loss_cfg)
    report = TrainReport(pairs=len(pairs))
    good = params.copy()
    for epoch in range(train_cfg.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(len(pairs))
        total, count = 0.0, 0
        for start in range(0, len(order), train_cfg.batch_size):
            chunk = pairs[order[start:start + train_cfg.batch_size]]
            neg, mask = negs.draw(chunk[:, 1], rng)
            source = SampledNeighbors(cache, s2_fraction, rng)
            batch = make_batch(chunk, neg, mask, source, dims)
            try:
                value, grads = loss_and_grad(params, batch, loss_cfg)
            except NonFiniteGradient as exc:
                raise TrainingDiverged(str(exc), good, report) from exc
            if not np.isfinite(value):
                raise TrainingDiverged(f"loss diverged in epoch {epoch}", good, report)
            adam_step(params, grads, adam, train_cfg)
            total += value * len(chunk)
            count += len(chunk)
            report.batches += 1
        report.epoch_loss.append(total / count)
        good = params.copy()
        logger.info("epoch %d loss %.6f (%.1fs)", epoch, total / count, time.perf_counter() - t0)
    return params, report


# ---------------------------------------------------------------------------
# inference


def sampled_rate_scale(s1_fraction: float, s2_fraction: float) -> Callable[[np.ndarray], np.ndarray]:
    """Per-node factor ``ceil(s2*ceil(s1*d)) / d`` that matches a full-neighbor sum
    to the expected size of a training-time sample."""
    from .sampler import sample_counts

    def scale(deg: np.ndarray) -> np.ndarray:
        deg = np.asarray(deg, dtype=np.int64)
        n = sample_counts(s2_fraction, sample_counts(s1_fraction, deg))
        return np.divide(n, deg, out=np.zeros(len(deg)), where=deg > 0)

    return scale


def infer_embedding(params: ModelParams, graph: Graph, node: int, scale=None) -> np.ndarray:
    """Deterministic embedding from the full neighborhood; works for nodes added
    after training (their layer-0 vector is their side features or zeros)."""
    return embed_nodes(params, graph, [node], scale=scale)[0]


def embed_nodes(params: ModelParams, graph: Graph, nodes=None, batch_size: int = 4096, scale=None) -> np.ndarray:
    nodes = np.arange(graph.num_nodes) if nodes is None else np.asarray(nodes, dtype=np.int64)
    source = FullNeighbors(graph, scale)
    out = np.zeros((len(nodes), params.dims.m_n))
    for start in range(0, len(nodes), batch_size):
        chunk = nodes[start:start + batch_size]
        out[start:start + len(chunk)] = forward(params, chunk, source, graph.node_features, allow_new=True)
    return out


# ---------------------------------------------------------------------------
# files


def write_embeddings(path: str | Path, external_ids: Sequence[str], vectors: np.ndarray) -> None:
    vectors = np.asarray(vectors, dtype=np.float64)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"#dim={vectors.shape[1]} count={len(external_ids)}\n")
        for ext, row in zip(external_ids, vectors):
            fh.write(ext + "\t" + ",".join(f"{x:.9g}" for x in row) + "\n")


def read_embeddings(path: str | Path) -> dict[str, np.ndarray]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.startswith("#") or not line.strip():
                continue
            ext, _, vec = line.rstrip("\n").partition("\t")
            out[ext] = np.array([float(x) for x in vec.split(",")])
    return out


def save_checkpoint(path: str | Path, params: ModelParams, adam: AdamState | None = None) -> None:
    names = list(PARAM_NAMES)
    header = {
        "version": CKPT_VERSION,
        "dims": asdict(params.dims),
        "tensors": [[n, list(getattr(params, n).shape)] for n in names],
        "adam_step": adam.step if adam else None,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(getattr(params, n), dtype="<f8").tobytes())
        if adam:
            for n in names:
                fh.write(np.ascontiguousarray(adam.m[n], dtype="<f8").tobytes())
                fh.write(np.ascontiguousarray(adam.v[n], dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> tuple[ModelParams, AdamState | None]:
    data = Path(path).read_bytes()
    if data[:4] != CKPT_MAGIC:
        raise ValueError(f"{path} is not a model checkpoint")
    (blen,) = struct.unpack_from("<Q", data, 4)
    header = json.loads(data[12:12 + blen])
    if header["version"] != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header['version']}")
    off = 12 + blen

    def take(shape):
        nonlocal off
        count = int(np.prod(shape))
        arr = np.frombuffer(data, "<f8", count, off).reshape(shape).copy()
        off += 8 * count
        return arr

    tensors = {n: take(shape) for n, shape in header["tensors"]}
    params = ModelParams(**tensors, dims=ModelDims(**header["dims"]))
    adam = None
    if header["adam_step"] is not None:
        m, v = {}, {}
        for n, shape in header["tensors"]:
            m[n] = take(shape)
            v[n] = take(shape)
        adam = AdamState(m, v, header["adam_step"])
    return params, adam
