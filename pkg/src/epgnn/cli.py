"""Pipeline driver: one subcommand per stage, one INI config for all of them.

Each stage reads its inputs from the run directory (``--out-dir``), writes
its artifacts there and records ``manifests/<stage>.json`` with the config
hash, seed, duration, counts and the sha256 of every artifact it wrote.

Exit status: 0 on success, 1 on invalid configuration, input or a missing
upstream artifact, 2 on any other runtime failure.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import logging
import sys
import time
from collections import defaultdict
from importlib import resources
from pathlib import Path
from typing import Callable

import numpy as np

from .coldstart import NoComparableShow, coldstart_embed, read_new_shows
from .evaluator import embeddings_matrix, evaluate, split_edges, write_report, write_split
from .expansion import (
    ClusterModel, GroupIndex, SeedBatch, cluster_users, delta_expand, merge_audience, read_groups, rescore_delta,
    read_seeds, write_audience, write_groups,
)
from .graph import (
    EdgeKind, Graph, GraphConfig, NodeKind, build_graph, degree_distribution, edge_buckets, load_graph,
    node_buckets, partition_by_category, read_interactions, read_profiles, save_graph,
)
from .model import (
    AdamState, LossConfig, ModelDims, TrainConfig, TrainingDiverged, embed_nodes, init_params,
    load_checkpoint, read_embeddings, sampled_rate_scale, save_checkpoint, train, write_embeddings,
)
from .sampler import SampleConfig, build_neighbor_cache, load_cache, save_cache
from .walker import MetaPath, WalkConfig, generate_pairs, generate_walks, read_pairs, read_walks, write_pairs, write_walks

logger = logging.getLogger("epgnn")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class ConfigError(ValueError):
    pass


class MissingArtifact(Exception):
    def __init__(self, name: str):
        super().__init__(f"missing artifact: {name}")
        self.name = name


# ---------------------------------------------------------------------------
# configuration


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_int(text: str) -> int | None:
    return None if text.strip().lower() in ("", "none") else int(text)


def _words(text: str) -> list[str]:
    return text.split()


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.split()]


def _weights(text: str) -> dict[str, float]:
    out = {}
    for item in text.split():
        key, sep, value = item.partition("=")
        if not sep:
            raise ValueError(f"expected field=weight, got {item!r}")
        out[key] = float(value)
    return out


# section -> key -> (parser, default)
SCHEMA: dict[str, dict[str, tuple[Callable[[str], object], object]]] = {
    "paths": {
        "interactions": (str, ""),
        "combos": (str, ""),
        "seeds": (str, ""),
        "new_shows": (str, ""),
        "embeddings": (str, ""),
    },
    "graph": {
        "coclick_min": (int, 2),
        "degree_cap": (_opt_int, None),
        "norm_scheme": (str, "log1p-maxnorm"),
        "type_field": (str, "sub_genre"),
        "category_field": (str, "main_genre"),
        "partitions": (int, 10),
        "degree_thresholds": (_ints, [1000, 100, 10]),
    },
    "walk": {
        "metapaths": (_words, ["user,show,user", "user,user", "show,show"]),
        "walk_length": (int, 20),
        "walks_per_node": (int, 10),
        "window": (int, 3),
    },
    "sample": {
        "s1_fraction": (float, 0.7),
        "s2_fraction": (float, 0.5),
        "weighted": (_bool, False),
    },
    "model": {
        "m_n": (int, 32),
        "layers": (int, 1),
        "hidden": (_opt_int, None),
        "attention": (str, "sigmoid"),
        "sampled_scale": (_bool, False),
    },
    "loss": {
        "q": (float, 1.0),
        "negatives_per_positive": (int, 5),
        "neg_power": (float, 0.75),
    },
    "train": {
        "epochs": (int, 5),
        "batch_size": (int, 256),
        "learning_rate": (float, 1e-3),
        "adam_beta1": (float, 0.9),
        "adam_beta2": (float, 0.999),
        "adam_eps": (float, 1e-8),
    },
    "eval": {
        "valid_frac": (float, 0.05),
        "test_frac": (float, 0.10),
        "metric": (str, "dot"),
    },
    "cluster": {
        "groups": (int, 50),
        "iters": (int, 50),
    },
    "expansion": {
        "top_n": (int, 100),
        "budget": (int, 100),
        "mode": (str, "count"),
        "rescore": (_bool, False),
    },
    "coldstart": {
        "m": (int, 20),
        "mode": (str, "count"),
        "fallback_mean": (_bool, False),
        "field_weights": (_weights, {}),
    },
    "run": {
        "rng_seed": (int, 0),
        "workers": (int, 1),
        "out_dir": (str, "out"),
        "stages": (_words, []),
    },
}

PIPELINE = ("build-graph", "partition", "walk", "pairs", "cache", "train", "embed",
            "cluster", "base", "coldstart", "expand", "stats")


class Config:
    """Parsed configuration plus the directory relative input paths resolve against."""

    def __init__(self, values: dict[str, dict[str, object]], raw: dict[str, dict[str, str]], base_dir: Path):
        self.values = values
        self.raw = raw
        self.base_dir = base_dir

    def __getitem__(self, section: str) -> dict[str, object]:
        return self.values[section]

    def path(self, key: str) -> Path | None:
        text = str(self.values["paths"][key]).strip()
        if not text:
            return None
        p = Path(text)
        return p if p.is_absolute() else self.base_dir / p

    def digest(self) -> str:
        """Hash over everything that can change an artifact (not out_dir or workers)."""
        keep = {s: {k: v for k, v in kv.items() if (s, k) not in (("run", "out_dir"), ("run", "workers"))}
                for s, kv in self.raw.items()}
        text = json.dumps({s: kv for s, kv in keep.items() if kv}, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()


def load_config(path: str | Path | None, overrides: list[tuple[str, str]] = ()) -> Config:
    """Read an INI file and apply ``section.key`` overrides; unknown keys are errors."""
    raw: dict[str, dict[str, str]] = {}
    base_dir = Path.cwd()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            parser.read(path, encoding="utf-8")
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        for section in parser.sections():
            for key, value in parser.items(section):
                raw.setdefault(section, {})[key] = value
        base_dir = path.resolve().parent
    for dotted, value in overrides:
        section, sep, key = dotted.partition(".")
        if not sep:
            raise ConfigError(f"override {dotted!r} must look like section.key")
        raw.setdefault(section, {})[key] = value

    values: dict[str, dict[str, object]] = {s: {k: d for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()}
    for section, keys in raw.items():
        if section not in SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        for key, text in keys.items():
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown config key {section}.{key}")
            conv = SCHEMA[section][key][0]
            try:
                values[section][key] = conv(text)
            except ValueError as exc:
                raise ConfigError(f"bad value for {section}.{key}: {exc}") from exc
    cfg = Config(values, raw, base_dir)
    validate(cfg)
    return cfg


def graph_config(cfg: Config) -> GraphConfig:
    g = cfg["graph"]
    return GraphConfig(coclick_min=g["coclick_min"], degree_cap=g["degree_cap"], norm_scheme=g["norm_scheme"])


def walk_config(cfg: Config) -> WalkConfig:
    w = cfg["walk"]
    return WalkConfig(w["walk_length"], w["walks_per_node"], w["window"], cfg["run"]["rng_seed"])


def sample_config(cfg: Config) -> SampleConfig:
    s = cfg["sample"]
    return SampleConfig(s["s1_fraction"], s["s2_fraction"], cfg["run"]["rng_seed"], s["weighted"])


def model_dims(cfg: Config, m_e: int = 2) -> ModelDims:
    m = cfg["model"]
    return ModelDims(m_n=m["m_n"], m_e=m_e, layers=m["layers"], hidden=m["hidden"], attention=m["attention"])


def loss_config(cfg: Config) -> LossConfig:
    return LossConfig(**cfg["loss"])


def train_config(cfg: Config) -> TrainConfig:
    return TrainConfig(**cfg["train"], rng_seed=cfg["run"]["rng_seed"])


def validate(cfg: Config) -> None:
    """Check every module config up front so no stage starts on a bad file."""
    try:
        graph_config(cfg).validate()
        walk_config(cfg).validate()
        for text in cfg["walk"]["metapaths"]:
            MetaPath.parse(text)
        sample_config(cfg).validate()
        model_dims(cfg).validate()
        loss_config(cfg).validate()
        train_config(cfg).validate()
    except (ValueError, KeyError) as exc:
        raise ConfigError(str(exc)) from exc
    checks = [
        (cfg["graph"]["partitions"] >= 1, "graph.partitions must be >= 1"),
        (not any(a < b for a, b in zip(cfg["graph"]["degree_thresholds"], cfg["graph"]["degree_thresholds"][1:])),
         "graph.degree_thresholds must be descending"),
        (cfg["eval"]["metric"] in ("dot", "cosine"), "eval.metric must be dot or cosine"),
        (cfg["eval"]["valid_frac"] >= 0 and cfg["eval"]["test_frac"] >= 0
         and cfg["eval"]["valid_frac"] + cfg["eval"]["test_frac"] < 1, "eval fractions must be >= 0 and sum to < 1"),
        (cfg["cluster"]["groups"] >= 1 and cfg["cluster"]["iters"] >= 0, "cluster.groups must be >= 1"),
        (cfg["expansion"]["top_n"] >= 1 and cfg["expansion"]["budget"] >= 1, "expansion.top_n and budget must be >= 1"),
        (cfg["expansion"]["mode"] in ("count", "density"), "expansion.mode must be count or density"),
        (cfg["coldstart"]["m"] >= 1, "coldstart.m must be >= 1"),
        (cfg["coldstart"]["mode"] in ("count", "jaccard"), "coldstart.mode must be count or jaccard"),
        (all(w >= 0 for w in cfg["coldstart"]["field_weights"].values()), "coldstart.field_weights must be >= 0"),
        (cfg["run"]["workers"] >= 1, "run.workers must be >= 1"),
        (all(s in PIPELINE or s == "eval" for s in cfg["run"]["stages"]), "run.stages lists an unknown stage"),
    ]
    for ok, message in checks:
        if not ok:
            raise ConfigError(message)


# ---------------------------------------------------------------------------
# run context and manifests


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Run:
    def __init__(self, cfg: Config):
        self.cfg = cfg
        self.out = Path(cfg["run"]["out_dir"])
        self.seed = int(cfg["run"]["rng_seed"])
        self.workers = int(cfg["run"]["workers"])
        self._graph: Graph | None = None

    def artifact(self, name: str) -> Path:
        p = self.out / name
        if not p.exists():
            raise MissingArtifact(name)
        return p

    def input(self, key: str) -> Path:
        p = self.cfg.path(key)
        if p is None:
            raise ConfigError(f"paths.{key} is not set")
        if not p.exists():
            raise MissingArtifact(str(p))
        return p

    def graph(self) -> Graph:
        if self._graph is None:
            path = self.artifact("graph.bin")
            self.artifact("idmap.tsv")
            self._graph = load_graph(path)
        return self._graph

    def embeddings(self) -> np.ndarray:
        g = self.graph()
        vectors = read_embeddings(self.artifact("embeddings.tsv"))
        if not vectors:
            raise ValueError("embeddings.tsv is empty")
        return embeddings_matrix(g, vectors)

    def write_manifest(self, stage: str, started: float, artifacts: list[str], counts: dict) -> Path:
        manifest = {
            "stage": stage,
            "config_hash": self.cfg.digest(),
            "seed": self.seed,
            "duration_s": round(time.perf_counter() - started, 6),
            "counts": counts,
            "artifacts": {name: sha256_file(self.out / name) for name in sorted(artifacts)},
        }
        path = self.out / "manifests" / f"{stage}.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


# ---------------------------------------------------------------------------
# stages; each returns (artifact names, counts)


def stage_build_graph(run: Run):
    records, bad = read_interactions(run.input("interactions"))
    profiles = read_profiles(run.input("combos")) if run.cfg.path("combos") else {}
    field = run.cfg["graph"]["type_field"]
    types = {c: p[field] for c, p in profiles.items() if field in p}
    graph = build_graph(records, types, graph_config(run.cfg), profiles)
    save_graph(graph, run.out / "graph.bin")
    counts = {
        "nodes": graph.num_nodes,
        "users": int(np.count_nonzero(graph.kinds == NodeKind.USER)),
        "shows": int(np.count_nonzero(graph.kinds == NodeKind.SHOW)),
        "edges": {k.name: int(np.count_nonzero(graph.edge_kinds == k)) for k in EdgeKind},
        "unparsable_lines": bad,
        "skipped_records": int(graph.meta.get("skipped_records", 0)),
    }
    return ["graph.bin", "idmap.tsv"], counts


def categories(graph: Graph, cfg: Config) -> dict[str, str]:
    field = cfg["graph"]["category_field"]
    shows = graph.nodes_of_kind(NodeKind.SHOW)
    return {graph.external_ids[s]: graph.profiles[s][field] for s in shows if field in graph.profiles[s]}


def stage_partition(run: Run):
    graph = run.graph()
    parts = run.cfg["graph"]["partitions"]
    bucket, missing = node_buckets(graph, categories(graph, run.cfg), parts)
    eb = edge_buckets(graph, bucket, parts) if parts > 1 else np.zeros(graph.num_edges, dtype=np.int64)
    ext = graph.external_ids
    with open(run.out / "partition.tsv", "w", encoding="utf-8") as fh:
        for a, b, k, p in zip(graph.src.tolist(), graph.dst.tolist(), graph.edge_kinds.tolist(), eb.tolist()):
            fh.write(f"{ext[a]}\t{ext[b]}\t{EdgeKind(k).name.lower()}\t{p}\n")
    per_bucket = np.bincount(eb[eb >= 0], minlength=parts)
    counts = {"edges_per_partition": per_bucket.tolist(), "dropped_edges": int(np.count_nonzero(eb < 0)),
              "missing_category": missing}
    return ["partition.tsv"], counts


def corpus(graph: Graph, cfg: Config, workers: int = 1) -> list[np.ndarray]:
    """Walks over every category partition (or the whole graph when
    ``graph.partitions`` is 1), concatenated in partition order."""
    parts = cfg["graph"]["partitions"]
    pieces = [graph] if parts == 1 else partition_by_category(graph, categories(graph, cfg), parts)
    walks: list[np.ndarray] = []
    wcfg = walk_config(cfg)
    for piece in pieces:
        if not piece.members.any():
            continue
        for text in cfg["walk"]["metapaths"]:
            walks.extend(generate_walks(piece, MetaPath.parse(text), wcfg, workers=workers))
    return walks


def stage_walk(run: Run):
    walks = corpus(run.graph(), run.cfg, run.workers)
    write_walks(run.out / "walks.txt", walks)
    lengths = np.array([len(w) for w in walks]) if walks else np.zeros(1)
    return ["walks.txt"], {"walks": len(walks), "mean_length": float(lengths.mean())}


def stage_pairs(run: Run):
    walks = read_walks(run.artifact("walks.txt"))
    pairs = generate_pairs(walks, run.cfg["walk"]["window"])
    write_pairs(run.out / "pairs.bin", pairs)
    return ["pairs.bin"], {"pairs": int(len(pairs))}


def stage_cache(run: Run):
    cache = build_neighbor_cache(run.graph(), sample_config(run.cfg))
    save_cache(cache, run.out / "cache.bin")
    return ["cache.bin"], {"entries": int(len(cache.neighbors))}


def fit(graph: Graph, cache, pairs: np.ndarray, cfg: Config):
    """Train from a fresh initialization; returns params, Adam state and report."""
    dims = model_dims(cfg, graph.edge_dim)
    tcfg = train_config(cfg)
    params = init_params(graph.num_nodes, dims, tcfg.rng_seed, graph.node_features)
    adam = AdamState.zeros_like(params)
    params, report = train(graph, cache, pairs, dims, loss_config(cfg), tcfg,
                           s2_fraction=cfg["sample"]["s2_fraction"], params=params, adam=adam)
    return params, adam, report


def stage_train(run: Run):
    graph = run.graph()
    cache = load_cache(run.artifact("cache.bin"), graph)
    pairs = read_pairs(run.artifact("pairs.bin"))
    try:
        params, adam, report = fit(graph, cache, pairs, run.cfg)
    except TrainingDiverged as exc:
        save_checkpoint(run.out / "model.ckpt", exc.params)
        logger.error("training diverged; last good parameters saved to model.ckpt")
        raise
    save_checkpoint(run.out / "model.ckpt", params, adam)
    (run.out / "train_report.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8")
    return ["model.ckpt", "train_report.json"], {"epochs": len(report.epoch_loss), "batches": report.batches,
                                                 "pairs": report.pairs}


def _scale(cfg: Config):
    s = cfg["sample"]
    return sampled_rate_scale(s["s1_fraction"], s["s2_fraction"]) if cfg["model"]["sampled_scale"] else None


def stage_embed(run: Run):
    graph = run.graph()
    params, _ = load_checkpoint(run.artifact("model.ckpt"))
    if params.num_nodes != graph.num_nodes:
        raise ValueError("model.ckpt does not match graph.bin")
    emb = embed_nodes(params, graph, scale=_scale(run.cfg))
    write_embeddings(run.out / "embeddings.tsv", graph.external_ids, emb)
    return ["embeddings.tsv"], {"embedded": int(len(emb)), "dim": int(emb.shape[1])}


def stage_eval(run: Run):
    """Held-out link prediction. Retrains on the training split unless
    ``paths.embeddings`` names an external embedding file."""
    graph = run.graph()
    e = run.cfg["eval"]
    split = split_edges(graph, e["valid_frac"], e["test_frac"], run.seed)
    external = run.cfg.path("embeddings")
    if external is not None:
        emb = embeddings_matrix(graph, read_embeddings(run.input("embeddings")))
        source = str(run.cfg["paths"]["embeddings"])
    else:
        tg = split.train_graph
        walks = corpus(tg, run.cfg, run.workers)
        pairs = generate_pairs(walks, run.cfg["walk"]["window"])
        cache = build_neighbor_cache(tg, sample_config(run.cfg))
        params, _, _ = fit(tg, cache, pairs, run.cfg)
        emb = embed_nodes(params, tg, scale=_scale(run.cfg))
        source = "retrained"
    used = np.unique(np.concatenate([split.pairs(p)[0].reshape(-1) for p in ("valid", "test")]))
    if len(used) and not np.all(np.isfinite(emb[used])):
        raise ValueError("embeddings do not cover every evaluated node")
    report = evaluate(emb, split, e["metric"])
    write_split(run.out / "split.tsv", graph, split)
    dataset = str(run.cfg["paths"]["interactions"]) or "graph.bin"
    write_report(run.out / "report.json", report, dataset, run.seed, {"embeddings": source, "metric": e["metric"]})
    return ["split.tsv", "report.json"], {**report.to_dict(), "test_pairs": int(len(split.pairs("test")[1]))}


def _users(graph: Graph) -> np.ndarray:
    users = graph.nodes_of_kind(NodeKind.USER)
    return users[graph.members[users]]


def stage_cluster(run: Run):
    graph = run.graph()
    emb = run.embeddings()
    users = _users(graph)
    model = cluster_users(emb[users], run.cfg["cluster"]["groups"], run.cfg["cluster"]["iters"], run.seed,
                          user_ids=users)
    write_groups(run.out / "groups.tsv", graph.external_ids, model)
    write_embeddings(run.out / "centroids.tsv", [str(g) for g in range(model.num_groups)], model.centroids)
    sizes = model.group_sizes()
    counts = {"groups": int(model.num_groups), "users": int(len(users)), "objective": model.objective_history[-1],
              "largest_group": int(sizes.max()), "empty_groups": int(np.count_nonzero(sizes == 0))}
    return ["groups.tsv", "centroids.tsv"], counts


def load_cluster_model(run: Run) -> ClusterModel:
    graph = run.graph()
    rows = read_groups(run.artifact("groups.tsv"))
    cents = read_embeddings(run.artifact("centroids.tsv"))
    centroids = np.array([cents[str(g)] for g in range(len(cents))])
    try:
        ids = [graph.index[u] for u, _ in rows]
    except KeyError as exc:
        raise ValueError(f"groups.tsv names unknown user {exc.args[0]}") from exc
    return ClusterModel(centroids, ids, [g for _, g in rows])


def stage_base(run: Run):
    graph = run.graph()
    emb = run.embeddings()
    model = load_cluster_model(run)
    index = GroupIndex(model, emb[model.user_ids])
    n = run.cfg["expansion"]["top_n"]
    ext = graph.external_ids
    rows = 0
    shows = graph.nodes_of_kind(NodeKind.SHOW)
    with open(run.out / "base.tsv", "w", encoding="utf-8") as fh:
        for s in shows.tolist():
            for u, score in index.topn(emb[s], n):
                fh.write(f"{ext[s]}\t{ext[u]}\t{score:.9g}\n")
                rows += 1
    return ["base.tsv"], {"shows": int(len(shows)), "rows": rows}


def stage_coldstart(run: Run):
    graph = run.graph()
    emb = run.embeddings()
    new = read_new_shows(run.input("new_shows"))
    shows = graph.nodes_of_kind(NodeKind.SHOW)
    profiles = [graph.profiles[s] for s in shows]
    c = run.cfg["coldstart"]
    ids, vecs, skipped = [], [], []
    for show, profile in new:
        try:
            vecs.append(coldstart_embed(profile, shows, profiles, emb, m=c["m"], field_weights=c["field_weights"],
                                        mode=c["mode"], fallback_mean=c["fallback_mean"]))
            ids.append(show)
        except NoComparableShow:
            logger.warning("no comparable show for %s; skipped", show)
            skipped.append(show)
    dim = emb.shape[1]
    write_embeddings(run.out / "coldstart.tsv", ids, np.array(vecs).reshape(len(vecs), dim))
    return ["coldstart.tsv"], {"embedded": len(ids), "skipped": skipped}


def stage_expand(run: Run):
    graph = run.graph()
    emb = run.embeddings()
    model = load_cluster_model(run)
    index = GroupIndex(model, emb[model.user_ids])
    cold = read_embeddings(run.out / "coldstart.tsv") if (run.out / "coldstart.tsv").exists() else {}
    feed: dict[str, list[tuple[str, int]]] = defaultdict(list)
    for show, user, ts in read_seeds(run.input("seeds")):
        feed[show].append((user, ts))
    e = run.cfg["expansion"]
    written, counts = [], {"unknown_seed_users": 0, "unknown_shows": []}
    for show in sorted(feed):
        node = graph.index.get(show)
        if node is not None and graph.kinds[node] == NodeKind.SHOW:
            vec = emb[node]
        elif show in cold:
            vec = cold[show]
        else:
            logger.warning("show %s has neither a graph node nor a cold-start embedding; skipped", show)
            counts["unknown_shows"].append(show)
            continue
        seeds = set()
        for user, _ in feed[show]:
            u = graph.index.get(user)
            if u is None or graph.kinds[u] != NodeKind.USER:
                counts["unknown_seed_users"] += 1
            else:
                seeds.add(u)
        batch = SeedBatch(show, seeds, max(ts for _, ts in feed[show]))
        base = index.topn(vec, e["top_n"])
        delta = delta_expand(batch, model, e["budget"], e["mode"], run.seed)
        if e["rescore"]:
            delta = rescore_delta(delta, vec, emb[model.user_ids], model.user_ids)
        audience = merge_audience(base, delta, show)
        name = f"audience_{show}.tsv"
        write_audience(run.out / name, graph.external_ids, audience)
        written.append(name)
        counts[show] = {"seeds": len(seeds), "base": len(base), "delta": len(delta), "merged": len(audience.merged)}
    return written, counts


def stage_stats(run: Run):
    graph = run.graph()
    thresholds = run.cfg["graph"]["degree_thresholds"]
    stats = {
        "nodes": graph.num_nodes,
        "edges": {k.name: int(np.count_nonzero(graph.edge_kinds == k)) for k in EdgeKind},
        "thresholds": thresholds,
        "degree_distribution": {k.name: degree_distribution(graph, k, thresholds) for k in EdgeKind},
    }
    (run.out / "stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return ["stats.json"], {"nodes": graph.num_nodes}


STAGES: dict[str, Callable[[Run], tuple[list[str], dict]]] = {
    "build-graph": stage_build_graph,
    "partition": stage_partition,
    "walk": stage_walk,
    "pairs": stage_pairs,
    "cache": stage_cache,
    "train": stage_train,
    "embed": stage_embed,
    "eval": stage_eval,
    "cluster": stage_cluster,
    "base": stage_base,
    "expand": stage_expand,
    "coldstart": stage_coldstart,
    "stats": stage_stats,
}

# stages that only run inside ``pipeline`` when their input is configured
OPTIONAL_INPUT = {"coldstart": "new_shows", "expand": "seeds"}


def run_stage(run: Run, name: str) -> dict:
    started = time.perf_counter()
    logger.info("stage %s", name)
    artifacts, counts = STAGES[name](run)
    run.write_manifest(name, started, artifacts, counts)
    return counts


def run_pipeline(run: Run) -> dict:
    started = time.perf_counter()
    stages = run.cfg["run"]["stages"] or list(PIPELINE)
    done, skipped = [], []
    for name in stages:
        key = OPTIONAL_INPUT.get(name)
        if key and run.cfg.path(key) is None:
            logger.info("stage %s skipped: paths.%s not set", name, key)
            skipped.append(name)
            continue
        run_stage(run, name)
        done.append(name)
    run.write_manifest("pipeline", started, [], {"stages": done, "skipped": skipped})
    return {"stages": done, "skipped": skipped}


# ---------------------------------------------------------------------------
# entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def fixture_dir() -> Path:
    return Path(str(resources.files("epgnn") / "data" / "fixture"))


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="INI config file")
    common.add_argument("--fixture", action="store_true", help="use the bundled 200-node demo config")
    common.add_argument("--seed", type=int, help="global rng seed (run.rng_seed)")
    common.add_argument("--workers", type=int, help="worker processes for walk generation (run.workers)")
    common.add_argument("--out-dir", help="run directory for artifacts (run.out_dir)")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = _Parser(prog="epgnn", description=__doc__.split("\n")[0], parents=[common])
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True
    for name in list(STAGES) + ["pipeline"]:
        sub.add_parser(name, parents=[common], help=f"run the {name} stage" if name != "pipeline"
                       else "run all offline stages in order")
    return parser


def parse_overrides(extra: list[str]) -> list[tuple[str, str]]:
    """``--section.key value`` or ``--section.key=value`` pairs."""
    out = []
    i = 0
    while i < len(extra):
        token = extra[i]
        if not token.startswith("--") or "." not in token:
            raise ConfigError(f"unrecognized argument {token!r}")
        key = token[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise ConfigError(f"override {token} needs a value")
            value = extra[i + 1]
            i += 2
        out.append((key, value))
    return out


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args, extra = build_parser().parse_known_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        overrides = parse_overrides(extra)
        if args.fixture and args.config:
            raise ConfigError("--fixture and --config are mutually exclusive")
        config_path = fixture_dir() / "epgnn.ini" if args.fixture else args.config
        for flag, key in ((args.seed, "run.rng_seed"), (args.workers, "run.workers"), (args.out_dir, "run.out_dir")):
            if flag is not None:
                overrides.append((key, str(flag)))
        cfg = load_config(config_path, overrides)
        run = Run(cfg)
        run.out.mkdir(parents=True, exist_ok=True)
        if args.command == "pipeline":
            run_pipeline(run)
        else:
            run_stage(run, args.command)
    except MissingArtifact as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
