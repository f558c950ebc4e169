"""Independent reference implementations shared by the unit and acceptance tests.

They favour plain loops over speed so they do not share code paths with the
package.
"""

from __future__ import annotations

import math


def randomize(params, rng, scale=0.5):
    for arr in params.tensors().values():
        arr[...] = rng.normal(0.0, scale, arr.shape)
    return params


def random_table(rng, n, m_e, max_nbrs=5):
    table = {}
    for i in range(n):
        k = int(rng.integers(0, max_nbrs + 1))
        nbrs = [int(j) for j in rng.choice(n, size=min(k, n), replace=False) if j != i]
        table[i] = [(j, rng.random(m_e)) for j in nbrs]
    return table


def ref_embedding(params, node, table, t):
    """Straight-line recursion over layers with python loops."""
    if t == 0:
        return [float(x) for x in params.V[node]]
    d = params.dims.m_n
    h_i = ref_embedding(params, node, table, t - 1)
    hidden = [math.tanh(sum(params.F_w1[r, c] * h_i[c] for c in range(d)) + params.F_b1[r])
              for r in range(params.dims.hidden)]
    out = [params.B[node, r] + sum(params.F_w2[r, c] * hidden[c] for c in range(len(hidden))) + params.F_b2[r]
           for r in range(d)]
    nbrs = [(j, u, ref_embedding(params, j, table, t - 1)) for j, u in table.get(node, [])]
    zs = [sum(params.A_w[c] * h_i[c] for c in range(d)) + sum(params.A_w[d + c] * h_j[c] for c in range(d))
          + params.A_b[0] for _, _, h_j in nbrs]
    mode = params.dims.attention
    if mode == "sigmoid":
        alphas = [1.0 / (1.0 + math.exp(-z)) for z in zs]
    elif mode == "softmax":
        top = max(zs) if zs else 0.0
        ex = [math.exp(z - top) for z in zs]
        alphas = [e / sum(ex) for e in ex]
    else:
        alphas = [1.0] * len(zs)
    for alpha, (_, u, h_j) in zip(alphas, nbrs):
        for r in range(d):
            out[r] += alpha * sum(u[k] * sum(params.W[k, r, c] * h_j[c] for c in range(d))
                                  for k in range(params.dims.m_e))
    return out


def softplus(x):
    return math.log1p(math.exp(-abs(x))) + max(x, 0.0)


def pairwise_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return total / (len(pos) * len(neg))


def sweep_ap(scores, labels):
    n_pos = sum(labels)
    prev_recall, area = 0.0, 0.0
    for t in sorted(set(scores), reverse=True):
        tp = sum(1 for s, y in zip(scores, labels) if s >= t and y == 1)
        pred = sum(1 for s in scores if s >= t)
        recall = tp / n_pos
        area += (recall - prev_recall) * (tp / pred)
        prev_recall = recall
    return area


def sweep_f1(sv, yv, st_, yt):
    best_t, best_f = None, -1.0
    for t in sorted(set(sv)):  # ascending so ">" keeps the lowest threshold on ties
        f = f1_loop(sv, yv, t)
        if f > best_f:
            best_t, best_f = t, f
    return best_t, f1_loop(st_, yt, best_t)


def f1_loop(scores, labels, threshold):
    tp = sum(1 for s, y in zip(scores, labels) if s >= threshold and y == 1)
    fp = sum(1 for s, y in zip(scores, labels) if s >= threshold and y == 0)
    fn = sum(1 for s, y in zip(scores, labels) if s < threshold and y == 1)
    return 0.0 if tp == 0 else 2 * tp / (2 * tp + fp + fn)


def enumerate_pairs(walk, k):
    out = []
    for i in range(len(walk)):
        for j in range(len(walk)):
            if 0 < abs(i - j) <= k and walk[i] != walk[j]:
                out.append((walk[i], walk[j]))
    return out
