"""Planted-partition interaction data for desk-scale runs and tests."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .graph import RawInteraction, write_interactions, write_profiles

GENRES = ("drama", "comedy", "action", "romance", "war", "documentary")


@dataclass
class Fixture:
    interactions: list[RawInteraction]
    profiles: dict[str, dict[str, str]]
    show_type_map: dict[str, str]
    categories: dict[str, str]
    community: dict[str, int]

    def write(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        write_interactions(directory / "interactions.tsv", self.interactions)
        write_profiles(directory / "combos.tsv", self.profiles)


def planted_partition(n_users: int = 160, n_combos: int = 40, communities: int = 2, p_in: float = 0.5,
                      p_out: float = 0.02, seed: int = 0, sub_genres: int = 3) -> Fixture:
    """Users and show combos split into ``communities`` blocks.

    A user interacts with a combo of its own block with probability around
    ``p_in`` (higher when the combo's sub-genre is the user's favourite) and
    with other blocks with probability ``p_out``. Combo profiles draw their
    fields from block-specific pools, so side information predicts the block,
    and each block has ``sub_genres`` sub-genres.
    """
    rng = np.random.default_rng(seed)
    if communities > len(GENRES):
        raise ValueError(f"at most {len(GENRES)} communities")
    user_block = np.arange(n_users) % communities
    combo_block = np.arange(n_combos) % communities
    subs = sub_genres
    combo_sub = rng.integers(subs, size=n_combos)
    user_fav = rng.integers(subs, size=n_users)

    profiles, types, cats, community = {}, {}, {}, {}
    for c in range(n_combos):
        b = int(combo_block[c])
        genre = GENRES[b]
        sub = int(combo_sub[c])
        # people pools are tied to the sub-genre, as the latent type drives both
        actors = sub * 4 + rng.choice(4, size=2, replace=False)
        prof = {
            "main_genre": genre,
            "sub_genre": f"{genre}-{sub}",
            "director": f"dir-{genre}-{sub * 2 + rng.integers(2)}",
            "actors": ";".join(f"act-{genre}-{a}" for a in sorted(actors)),
            "rating": str(rng.integers(1, 6)),
        }
        cid = f"c{c:04d}"
        profiles[cid] = prof
        types[cid] = prof["sub_genre"]
        cats[cid] = genre
        community[cid] = b

    records = []
    for u in range(n_users):
        uid = f"u{u:05d}"
        community[uid] = int(user_block[u])
        for c in range(n_combos):
            if user_block[u] == combo_block[c]:
                p = min(1.0, p_in * (1.5 if user_fav[u] == combo_sub[c] else 0.75))
            else:
                p = p_out
            if rng.random() < p:
                clicks = int(1 + rng.poisson(2.0))
                view = float(np.round(rng.exponential(600.0) + 30.0))
                records.append(RawInteraction(uid, f"c{c:04d}", clicks, view))
    return Fixture(records, profiles, types, cats, community)


def write_fixture(directory: str | Path, seed: int = 0, seed_users: int = 6) -> Fixture:
    """Write the demo inputs: interactions, combo profiles, one show's seed
    feed and two new-show profiles."""
    directory = Path(directory)
    fx = planted_partition(seed=seed)
    fx.write(directory)
    rng = np.random.default_rng(seed + 1)
    show = "c0000"
    seen = {r.user_id for r in fx.interactions if r.show_combo_id == show}
    pool = sorted(u for u, b in fx.community.items()
                  if u.startswith("u") and b == fx.community[show] and u not in seen)
    picked = sorted(rng.choice(pool, size=min(seed_users, len(pool)), replace=False).tolist())
    with open(directory / "seeds.tsv", "w", encoding="utf-8") as fh:
        for i, u in enumerate(picked):
            fh.write(f"{show}\t{u}\t{1700000000 + 60 * i}\n")
    new = {}
    base = dict(fx.profiles["c0001"])
    base["director"] = "dir-new-0"
    new["n0001"] = base
    other = dict(fx.profiles["c0002"])
    other["actors"] = other["actors"].split(";")[0] + ";act-new-9"
    other["rating"] = "5"
    new["n0002"] = other
    write_profiles(directory / "newshows.tsv", new)
    return fx


def mixture_embeddings(n_users: int = 1500, n_shows: int = 20, dim: int = 16, components: int = 8,
                       spread: float = 0.6, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """User and show vectors drawn around shared Gaussian centers, a stand-in
    for trained embeddings at a size where clustering granularity matters."""
    rng = np.random.default_rng(seed)
    centers = rng.normal(0.0, 1.0, (components, dim))
    users = centers[rng.integers(components, size=n_users)] + rng.normal(0.0, spread, (n_users, dim))
    shows = centers[rng.integers(components, size=n_shows)] + rng.normal(0.0, spread, (n_shows, dim))
    return users, shows
