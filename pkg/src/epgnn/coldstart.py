"""Embeddings for unseen shows from side-information overlap with known combos."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .graph import parse_profile

MULTI_SEP = ";"


class NoComparableShow(ValueError):
    pass


def _values(value: str) -> set[str]:
    return {v.strip() for v in str(value).split(MULTI_SEP) if v.strip()}


def profile_overlap(p: Mapping[str, str], q: Mapping[str, str],
                    field_weights: Mapping[str, float] | None = None, mode: str = "count") -> float:
    """Weighted count of shared ``(key, value)`` matches.

    Multi-valued fields (``a;b;c``) match element-wise. ``mode='jaccard'``
    divides by the weighted size of the union instead.
    """
    weights = field_weights or {}
    if any(w < 0 for w in weights.values()):
        raise ValueError("field weights must be nonnegative")
    shared = union = 0.0
    for key in set(p) | set(q):
        w = float(weights.get(key, 1.0))
        a = _values(p[key]) if key in p else set()
        b = _values(q[key]) if key in q else set()
        shared += w * len(a & b)
        union += w * len(a | b)
    if mode == "jaccard":
        return shared / union if union > 0 else 0.0
    if mode != "count":
        raise ValueError("mode must be 'count' or 'jaccard'")
    return shared


def _same_profile(p: Mapping[str, str], q: Mapping[str, str]) -> bool:
    return set(p) == set(q) and all(_values(p[k]) == _values(q[k]) for k in p)


def coldstart_embed(new_profile: Mapping[str, str], combo_nodes: Sequence[int],
                    combo_profiles: Sequence[Mapping[str, str]], embeddings: np.ndarray, m: int = 20,
                    field_weights: Mapping[str, float] | None = None, mode: str = "count",
                    fallback_mean: bool = False) -> np.ndarray:
    """Embedding of a new show.

    A combo with exactly the same profile is returned as-is (mean of them if
    several). Otherwise the top-``m`` combos by overlap (ties by ascending
    node id) are averaged with their overlap scores as weights.
    ``embeddings`` is indexed by node id.
    """
    if m < 1:
        raise ValueError("M must be >= 1")
    if not new_profile:
        raise ValueError("profile has no fields")
    nodes = np.asarray(combo_nodes, dtype=np.int64)
    emb = np.asarray(embeddings, dtype=np.float64)
    exact = [int(c) for c, prof in zip(nodes, combo_profiles) if _same_profile(new_profile, prof)]
    if exact:
        return emb[exact[0]].copy() if len(exact) == 1 else emb[sorted(exact)].mean(axis=0)
    scores = np.array([profile_overlap(new_profile, prof, field_weights, mode) for prof in combo_profiles])
    positive = scores > 0
    if not positive.any():
        if fallback_mean and len(nodes):
            return emb[nodes].mean(axis=0)
        raise NoComparableShow("no comparable show")
    order = np.lexsort((nodes, -scores))
    top = order[:m]
    top = top[scores[top] > 0]
    w = scores[top]
    return (w[:, None] * emb[nodes[top]]).sum(axis=0) / w.sum()


def read_new_shows(path: str | Path) -> list[tuple[str, dict[str, str]]]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line.strip():
                continue
            show, _, rest = line.partition("\t")
            rows.append((show.strip(), parse_profile(rest)))
    return rows
