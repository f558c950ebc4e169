from __future__ import annotations

import json
import subprocess
import sys

import numpy as np
import pytest

from epgnn import cli
from epgnn.cli import ConfigError, fixture_dir, load_config, main, model_dims, parse_overrides
from epgnn.graph import EdgeKind, degree_distribution, load_graph
from epgnn.model import init_params, load_checkpoint, read_embeddings

FAST = ["--train.epochs", "1", "--walk.walks_per_node", "2"]
OFFLINE = ("build-graph", "partition", "walk", "pairs", "cache")


def run(*args):
    return main(list(args))


@pytest.fixture(scope="module")
def pipeline_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("pipeline")
    assert run("pipeline", "--fixture", "--out-dir", str(out), *FAST) == 0
    return out


class TestPipeline:
    def test_artifacts(self, pipeline_dir):
        for name in ("graph.bin", "idmap.tsv", "partition.tsv", "walks.txt", "pairs.bin", "cache.bin",
                     "model.ckpt", "train_report.json", "embeddings.tsv", "groups.tsv", "centroids.tsv",
                     "base.tsv", "coldstart.tsv", "audience_c0000.tsv", "stats.json"):
            assert (pipeline_dir / name).stat().st_size > 0, name
        summary = json.loads((pipeline_dir / "manifests" / "pipeline.json").read_text())
        assert summary["counts"]["stages"] == list(cli.PIPELINE)

    def test_manifest_fields(self, pipeline_dir):
        m = json.loads((pipeline_dir / "manifests" / "embed.json").read_text())
        assert set(m) == {"stage", "config_hash", "seed", "duration_s", "counts", "artifacts"}
        assert m["seed"] == 0 and len(m["config_hash"]) == 64
        assert m["artifacts"]["embeddings.tsv"] == cli.sha256_file(pipeline_dir / "embeddings.tsv")

    def test_embeddings_cover_graph(self, pipeline_dir):
        graph = load_graph(pipeline_dir / "graph.bin")
        emb = read_embeddings(pipeline_dir / "embeddings.tsv")
        assert list(emb) == graph.external_ids
        assert len(next(iter(emb.values()))) == 32

    def test_audience_file(self, pipeline_dir):
        rows = [line.split("\t") for line in (pipeline_dir / "audience_c0000.tsv").read_text().splitlines()]
        users = [r[0] for r in rows]
        assert len(users) == len(set(users))
        assert {r[2] for r in rows} <= {"base", "delta"}
        assert sum(r[2] == "base" for r in rows) == 40
        seeds = {line.split("\t")[1] for line in (fixture_dir() / "seeds.tsv").read_text().splitlines()}
        assert not seeds & {r[0] for r in rows if r[2] == "delta"}

    def test_coldstart_rows(self, pipeline_dir):
        emb = read_embeddings(pipeline_dir / "coldstart.tsv")
        assert sorted(emb) == ["n0001", "n0002"]

    def test_rescore_flag(self, pipeline_dir):
        plain = (pipeline_dir / "audience_c0000.tsv").read_text().splitlines()
        assert run("expand", "--fixture", "--out-dir", str(pipeline_dir), *FAST, "--expansion.rescore", "true") == 0
        rescored = (pipeline_dir / "audience_c0000.tsv").read_text().splitlines()
        assert sorted(plain) == sorted(rescored)
        assert run("expand", "--fixture", "--out-dir", str(pipeline_dir), *FAST) == 0
        assert (pipeline_dir / "audience_c0000.tsv").read_text().splitlines() == plain

    def test_stats_same_as_library(self, pipeline_dir):
        stats = json.loads((pipeline_dir / "stats.json").read_text())
        graph = load_graph(pipeline_dir / "graph.bin")
        for kind in EdgeKind:
            assert stats["degree_distribution"][kind.name] == degree_distribution(graph, kind, [100, 50, 20, 10])

    def test_rerun_stage_identical(self, pipeline_dir):
        before = (pipeline_dir / "base.tsv").read_bytes()
        assert run("base", "--fixture", "--out-dir", str(pipeline_dir), *FAST) == 0
        assert (pipeline_dir / "base.tsv").read_bytes() == before


class TestTrainZeroEpochs:
    def test_initial_embeddings_kept(self, tmp_path):
        for stage in OFFLINE:
            assert run(stage, "--fixture", "--out-dir", str(tmp_path), *FAST) == 0
        assert run("train", "--fixture", "--out-dir", str(tmp_path), "--train.epochs", "0",
                   "--seed", "5") == 0
        params, _ = load_checkpoint(tmp_path / "model.ckpt")
        graph = load_graph(tmp_path / "graph.bin")
        cfg = load_config(fixture_dir() / "epgnn.ini")
        init = init_params(graph.num_nodes, model_dims(cfg, graph.edge_dim), 5, graph.node_features)
        for name, arr in init.tensors().items():
            np.testing.assert_array_equal(getattr(params, name), arr)


class TestExitCodes:
    def test_missing_artifact(self, tmp_path, capsys):
        assert run("train", "--fixture", "--out-dir", str(tmp_path)) == 1
        assert "graph.bin" in capsys.readouterr().err

    def test_missing_cache(self, tmp_path, capsys):
        assert run("build-graph", "--fixture", "--out-dir", str(tmp_path)) == 0
        assert run("train", "--fixture", "--out-dir", str(tmp_path)) == 1
        assert "missing artifact" in capsys.readouterr().err

    @pytest.mark.parametrize("args", [
        ["--graph.bogus", "1"],
        ["--nosuch.key", "1"],
        ["--cluster.groups", "0"],
        ["--model.m_n", "abc"],
        ["--sample.s1_fraction", "1.5"],
        ["--walk.metapaths", "user,show,dog"],
        ["--run.stages", "build-graph nope"],
        ["--unknown-flag"],
    ])
    def test_validation_errors(self, tmp_path, args):
        assert run("stats", "--fixture", "--out-dir", str(tmp_path), *args) == 1
        assert not (tmp_path / "manifests").exists()

    def test_unknown_command(self):
        assert run("frobnicate", "--fixture") == 1

    def test_missing_config(self, tmp_path):
        assert run("stats", "--config", str(tmp_path / "none.ini")) == 1

    def test_runtime_error(self, tmp_path, monkeypatch):
        def boom(_run):
            raise RuntimeError("disk on fire")

        monkeypatch.setitem(cli.STAGES, "stats", boom)
        assert run("stats", "--fixture", "--out-dir", str(tmp_path)) == 2

    def test_too_many_groups(self, tmp_path):
        assert run("build-graph", "--fixture", "--out-dir", str(tmp_path)) == 0
        (tmp_path / "embeddings.tsv").write_text("#dim=1 count=1\nu00000\t1\n")
        assert run("cluster", "--fixture", "--out-dir", str(tmp_path), "--cluster.groups", "100000") == 1


class TestConfig:
    def test_overrides_forms(self):
        assert parse_overrides(["--a.b", "1", "--c.d=x y"]) == [("a.b", "1"), ("c.d", "x y")]
        with pytest.raises(ConfigError):
            parse_overrides(["--a.b"])
        with pytest.raises(ConfigError):
            parse_overrides(["stray"])

    def test_override_applies(self):
        cfg = load_config(fixture_dir() / "epgnn.ini", [("walk.walk_length", "4"), ("sample.weighted", "yes")])
        assert cfg["walk"]["walk_length"] == 4 and cfg["sample"]["weighted"] is True
        assert cfg["graph"]["degree_thresholds"] == [100, 50, 20, 10]
        assert cfg.path("interactions") == fixture_dir().resolve() / "interactions.tsv"

    def test_digest(self):
        base = load_config(fixture_dir() / "epgnn.ini")
        same = load_config(fixture_dir() / "epgnn.ini", [("run.out_dir", "/elsewhere"), ("run.workers", "4")])
        other = load_config(fixture_dir() / "epgnn.ini", [("run.rng_seed", "1")])
        assert base.digest() == same.digest() != other.digest()

    def test_flags_after_command(self, tmp_path):
        assert run("build-graph", "--out-dir", str(tmp_path), "--fixture", "--seed", "3") == 0
        assert json.loads((tmp_path / "manifests" / "build-graph.json").read_text())["seed"] == 3

    def test_module_entry_point(self, tmp_path):
        proc = subprocess.run([sys.executable, "-m", "epgnn", "build-graph", "--fixture", "--out-dir", str(tmp_path)],
                              capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
        assert (tmp_path / "graph.bin").exists()
