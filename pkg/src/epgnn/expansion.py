"""Audience expansion through clustered user groups.

Offline, users are grouped with k-means and every show gets an exact top-N
``base`` audience. Online, seed users of a show pick the groups that hold the
most seeds and those groups form the ``delta`` audience.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .model import sigmoid


@dataclass
class ClusterModel:
    centroids: np.ndarray
    user_ids: np.ndarray
    labels: np.ndarray
    objective_history: list[float] = field(default_factory=list)

    def __post_init__(self):
        self.user_ids = np.asarray(self.user_ids, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        order = np.argsort(self.labels, kind="stable")
        counts = np.bincount(self.labels, minlength=len(self.centroids))
        self._members = np.split(self.user_ids[order], np.cumsum(counts)[:-1])
        self.assignment = dict(zip(self.user_ids.tolist(), self.labels.tolist()))

    @property
    def num_groups(self) -> int:
        return len(self.centroids)

    def members(self, group: int) -> np.ndarray:
        return self._members[group]

    def group_sizes(self) -> np.ndarray:
        return np.array([len(m) for m in self._members], dtype=np.int64)


@dataclass
class AudienceSet:
    show: str
    base: list[tuple[int, float]] = field(default_factory=list)
    delta: list[tuple[int, int]] = field(default_factory=list)
    merged: list[int] = field(default_factory=list)


@dataclass
class SeedBatch:
    show: str
    seeds: set[int]
    timestamp: int = 0


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = (x * x).sum(axis=1)[:, None] - 2.0 * x @ c.T + (c * c).sum(axis=1)[None, :]
    return np.maximum(d, 0.0)


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [int(rng.integers(len(x)))]
    closest = _sq_dists(x, x[centers]).ravel()
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            # every point already coincides with a center; take unused points
            unused = np.setdiff1d(np.arange(len(x)), centers)
            centers.append(int(unused[0]))
        else:
            nxt = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            centers.append(min(nxt, len(x) - 1))
        closest = np.minimum(closest, _sq_dists(x, x[centers[-1:]]).ravel())
    return x[centers].copy()


def kmeans_objective(x: np.ndarray, centroids: np.ndarray, labels: np.ndarray) -> float:
    diff = x - centroids[labels]
    return float(np.einsum("ij,ij->", diff, diff))


def cluster_users(user_embeddings: np.ndarray, groups: int, iters: int = 50, seed: int = 0,
                  user_ids: Sequence[int] | None = None) -> ClusterModel:
    """k-means++ seeding followed by Lloyd iterations.

    Stops at an assignment fixed point or after ``iters`` rounds. A group left
    empty by the update is re-seeded with the point farthest from its centroid.
    ``objective_history`` records the sum of squared distances after every
    update step.
    """
    x = np.asarray(user_embeddings, dtype=np.float64)
    n = len(x)
    if groups < 1 or groups > n:
        raise ValueError(f"group count {groups} must be between 1 and the number of users ({n})")
    ids = np.arange(n) if user_ids is None else np.asarray(user_ids, dtype=np.int64)
    rng = np.random.default_rng(seed)
    centroids = _kmeanspp(x, groups, rng)
    labels = np.argmin(_sq_dists(x, centroids), axis=1)
    history = [kmeans_objective(x, centroids, labels)]
    for _ in range(iters):
        centroids, labels = _update(x, labels, groups)
        history.append(kmeans_objective(x, centroids, labels))
        # keep current label on exact distance ties to guarantee termination
        d = _sq_dists(x, centroids)
        new_labels = np.argmin(d, axis=1)
        cur = d[np.arange(n), labels]
        new_labels = np.where(d[np.arange(n), new_labels] < cur, new_labels, labels)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    else:
        centroids, labels = _update(x, labels, groups)
        history.append(kmeans_objective(x, centroids, labels))
    return ClusterModel(centroids, ids, labels, history)


def _update(x: np.ndarray, labels: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    labels = labels.copy()
    while True:
        counts = np.bincount(labels, minlength=k)
        sums = np.zeros((k, x.shape[1]))
        np.add.at(sums, labels, x)
        centroids = sums / np.maximum(counts, 1)[:, None]
        empty = np.flatnonzero(counts == 0)
        if len(empty) == 0:
            return centroids, labels
        dist = ((x - centroids[labels]) ** 2).sum(axis=1)
        # never steal the last member of a group
        dist[counts[labels] <= 1] = -1.0
        far = int(np.argmax(dist))
        labels[far] = empty[0]


# ---------------------------------------------------------------------------
# offline base audience


def _dots(user_embeddings: np.ndarray, rows: np.ndarray, show: np.ndarray) -> np.ndarray:
    return (user_embeddings[rows] * show).sum(axis=1)


def exhaustive_topn(show_embedding: np.ndarray, user_embeddings: np.ndarray, user_ids: np.ndarray, n: int):
    """Reference scan: score every user, order by score then ascending id."""
    user_ids = np.asarray(user_ids, dtype=np.int64)
    dots = _dots(user_embeddings, np.arange(len(user_ids)), np.asarray(show_embedding, dtype=np.float64))
    order = np.lexsort((user_ids, -dots))[:n]
    return [(int(user_ids[i]), float(sigmoid(dots[i]))) for i in order]


class GroupIndex:
    """Cluster model plus per-group radii for exact pruned top-N search.

    ``user_embeddings`` rows align with ``model.user_ids``.
    """

    def __init__(self, model: ClusterModel, user_embeddings: np.ndarray):
        self.model = model
        self.emb = np.asarray(user_embeddings, dtype=np.float64)
        self.row_of = {u: i for i, u in enumerate(model.user_ids.tolist())}
        self.member_rows = [np.array([self.row_of[u] for u in model.members(g).tolist()], dtype=np.int64)
                            for g in range(model.num_groups)]
        self.radius = np.zeros(model.num_groups)
        for g, rows in enumerate(self.member_rows):
            if len(rows):
                self.radius[g] = np.sqrt(((self.emb[rows] - model.centroids[g]) ** 2).sum(axis=1)).max()

    def topn(self, show_embedding: np.ndarray, n: int) -> list[tuple[int, float]]:
        """Exact top-N by ``sigmoid(show . user)``; ties broken by ascending user id.

        Groups are scanned by centroid score. Scanning stops once ``n`` users
        are held and no remaining group's bound
        ``show . centroid + |show| * radius`` reaches the current n-th score.
        """
        if n < 1:
            raise ValueError("N must be >= 1")
        show = np.asarray(show_embedding, dtype=np.float64)
        ids = self.model.user_ids
        n = min(n, len(ids))
        cdots = self.model.centroids @ show
        bound = cdots + np.linalg.norm(show) * self.radius
        bound += 1e-9 * (1.0 + np.abs(bound))
        order = np.lexsort((np.arange(len(cdots)), -cdots))
        sizes = np.array([len(self.member_rows[g]) for g in order])
        suffix_max = np.maximum.accumulate(np.where(sizes > 0, bound[order], -np.inf)[::-1])[::-1]
        best_rows = np.zeros(0, dtype=np.int64)
        best_dots = np.zeros(0)
        for pos, g in enumerate(order):
            if len(best_rows) >= n and suffix_max[pos] < best_dots[n - 1]:
                break
            rows = self.member_rows[g]
            if len(rows) == 0:
                continue
            rows = np.concatenate([best_rows, rows])
            dots = np.concatenate([best_dots, _dots(self.emb, self.member_rows[g], show)])
            keep = np.lexsort((ids[rows], -dots))[:n]
            best_rows, best_dots = rows[keep], dots[keep]
        return [(int(ids[r]), float(sigmoid(d))) for r, d in zip(best_rows, best_dots)]

    def group_recall(self, show_embedding: np.ndarray, n: int, seed: int = 0) -> list[int]:
        """Exactly ``min(n, users)`` users reached through groups ranked by centroid score.

        Whole groups are taken in order; the group that would overflow ``n``
        contributes a uniform random sample of the remaining slots.
        """
        show = np.asarray(show_embedding, dtype=np.float64)
        cdots = self.model.centroids @ show
        order = np.lexsort((np.arange(len(cdots)), -cdots))
        rng = np.random.default_rng(seed)
        out: list[int] = []
        for g in order:
            members = self.model.members(int(g))
            room = n - len(out)
            if room <= 0:
                break
            if len(members) > room:
                members = np.sort(rng.choice(members, size=room, replace=False))
            out.extend(members.tolist())
        return out


def base_topn(show_embedding: np.ndarray, cluster_model: ClusterModel, user_embeddings: np.ndarray,
              n: int) -> list[tuple[int, float]]:
    return GroupIndex(cluster_model, user_embeddings).topn(show_embedding, n)


# ---------------------------------------------------------------------------
# online delta audience


def rank_groups(seeds: Iterable[int], cluster_model: ClusterModel, mode: str = "count") -> list[tuple[int, float]]:
    """Groups holding at least one seed as ``(group, key)``, best first, ties by group id."""
    if mode not in ("count", "density"):
        raise ValueError("mode must be 'count' or 'density'")
    counts: dict[int, int] = {}
    for s in seeds:
        g = cluster_model.assignment.get(int(s))
        if g is not None:
            counts[g] = counts.get(g, 0) + 1
    sizes = cluster_model.group_sizes()
    keyed = [(g, c / sizes[g] if mode == "density" else float(c)) for g, c in counts.items()]
    keyed.sort(key=lambda t: (-t[1], t[0]))
    return keyed


def delta_expand(seeds: SeedBatch, cluster_model: ClusterModel, budget: int, mode: str = "count",
                 seed: int = 0) -> list[tuple[int, int]]:
    """Fill ``budget`` audience slots with whole groups in rank order.

    The group that would overflow the budget contributes a uniform random
    sample of exactly the remaining slots. Budget is counted over group
    members; seed users are removed from the output afterwards. Returns
    ``(user, source_group)`` in group-rank order.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    if not seeds.seeds:
        return []
    rng = np.random.default_rng(seed)
    remaining = budget
    out = []
    for g, _ in rank_groups(seeds.seeds, cluster_model, mode):
        if remaining <= 0:
            break
        members = cluster_model.members(g)
        if len(members) > remaining:
            members = np.sort(rng.choice(members, size=remaining, replace=False))
        remaining -= len(members)
        out.extend((int(u), g) for u in members.tolist() if int(u) not in seeds.seeds)
    return out


def rescore_delta(delta: Sequence[tuple[int, int]], show_embedding: np.ndarray, user_embeddings: np.ndarray,
                  user_ids: Sequence[int]) -> list[tuple[int, int]]:
    """Delta reordered by ``show . user`` (best first, ties by user id), keeping group provenance.

    ``user_embeddings`` rows align with ``user_ids``.
    """
    if not delta:
        return []
    row = {int(u): i for i, u in enumerate(user_ids)}
    show = np.asarray(show_embedding, dtype=np.float64)
    users = np.array([u for u, _ in delta], dtype=np.int64)
    dots = _dots(np.asarray(user_embeddings, dtype=np.float64), np.array([row[u] for u in users.tolist()]), show)
    return [tuple(delta[i]) for i in np.lexsort((users, -dots))]


def merge_audience(base: Sequence[tuple[int, float]], delta: Sequence[tuple[int, int]], show: str = "") -> AudienceSet:
    """Base users in their order, then delta users not already present."""
    seen = set()
    merged = []
    for u, _ in list(base) + list(delta):
        if u not in seen:
            seen.add(u)
            merged.append(u)
    return AudienceSet(show, list(base), list(delta), merged)


def recall_coverage(exact_topn: Iterable[int], via_groups: Iterable[int]) -> float:
    """Share of the exact top-N audience also reached through groups."""
    exact = set(exact_topn)
    if not exact:
        raise ValueError("exact audience is empty")
    return len(exact & set(via_groups)) / len(exact)


# ---------------------------------------------------------------------------
# files


def write_groups(path: str | Path, external_ids: Sequence[str], model: ClusterModel) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for u, g in zip(model.user_ids.tolist(), model.labels.tolist()):
            fh.write(f"{external_ids[u]}\t{g}\n")


def read_groups(path: str | Path) -> list[tuple[str, int]]:
    with open(path, encoding="utf-8") as fh:
        return [(a, int(b)) for a, b in (line.rstrip("\n").split("\t") for line in fh if line.strip())]


def read_seeds(path: str | Path) -> list[tuple[str, str, int]]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            cols = line.rstrip("\n").split("\t")
            if len(cols) >= 2 and cols[0]:
                rows.append((cols[0], cols[1], int(cols[2]) if len(cols) > 2 and cols[2] else 0))
    return rows


def write_audience(path: str | Path, external_ids: Sequence[str], audience: AudienceSet) -> None:
    base_ids = {u for u, _ in audience.base}
    with open(path, "w", encoding="utf-8") as fh:
        for u, score in audience.base:
            fh.write(f"{external_ids[u]}\t{score:.9g}\tbase\n")
        for u, g in audience.delta:
            if u not in base_ids:
                fh.write(f"{external_ids[u]}\t{g}\tdelta\n")
                base_ids.add(u)
