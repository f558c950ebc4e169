from __future__ import annotations

import numpy as np
import pytest

from epgnn.graph import GraphConfig, RawInteraction, build_graph
from epgnn.synthetic import planted_partition


def random_interactions(rng: np.random.Generator, n_users: int, n_shows: int, n_records: int):
    out = []
    for _ in range(n_records):
        u = int(rng.integers(n_users))
        s = int(rng.integers(n_shows))
        out.append(RawInteraction(f"u{u}", f"s{s}", int(rng.integers(0, 5)), float(rng.integers(1, 900))))
    return out


def random_graph(seed: int, n_users: int = 12, n_shows: int = 6, n_records: int = 50, types: int = 2,
                 coclick_min: int = 1):
    rng = np.random.default_rng(seed)
    records = random_interactions(rng, n_users, n_shows, n_records)
    type_map = {f"s{s}": f"t{s % types}" for s in range(n_shows)}
    return build_graph(records, type_map, GraphConfig(coclick_min=coclick_min))


@pytest.fixture(scope="session")
def planted():
    return planted_partition(seed=0)


@pytest.fixture(scope="session")
def planted_graph(planted):
    return build_graph(planted.interactions, planted.show_type_map, GraphConfig(), planted.profiles)
