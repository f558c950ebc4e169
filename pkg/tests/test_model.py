from __future__ import annotations

import math

import numpy as np
import pytest

from oracles import randomize, random_table, ref_embedding, softplus
from epgnn.graph import EdgeKind, Graph, NodeKind
from epgnn.model import (
    AdamState, FixedNeighbors, FullNeighbors, LossConfig, ModelDims, NonFiniteGradient, TrainConfig,
    TrainingDiverged, adam_step, attention, embed_nodes, forward, forward_node, infer_embedding, init_params,
    interaction, load_checkpoint, log_sigmoid, loss, loss_and_grad, make_batch, negative_sample,
    NegativeSampler, one_body, pair_terms, read_embeddings, save_checkpoint, scalar_edge_interaction,
    train, write_embeddings,
)
from epgnn.sampler import SampleConfig, build_neighbor_cache
from epgnn.walker import MetaPath, WalkConfig, generate_pairs, generate_walks
import epgnn.model as model_mod


def line_graph():
    kinds = [NodeKind.USER, NodeKind.SHOW, NodeKind.USER, NodeKind.SHOW]
    src, dst = np.array([0, 2, 2]), np.array([1, 1, 3])
    feats = np.array([[0.2, 0.9], [1.0, 0.5], [0.3, 0.3]])
    return Graph(kinds, ["u0", "s1", "u2", "s3"], [{}] * 4, src, dst,
                 np.full(3, EdgeKind.USER_SHOW), feats.sum(axis=1), feats)


class TestAttention:
    def test_zero_net_is_half(self):
        p = init_params(3, ModelDims(m_n=4))
        p.A_w[:] = 0
        p.A_b[:] = 0
        rng = np.random.default_rng(0)
        assert attention(p, rng.normal(size=4), rng.normal(size=4)) == 0.5

    def test_formula_and_range(self):
        rng = np.random.default_rng(1)
        p = randomize(init_params(3, ModelDims(m_n=4)), rng)
        for _ in range(20):
            a, b = rng.normal(size=4) * 3, rng.normal(size=4) * 3
            z = sum(p.A_w[i] * x for i, x in enumerate(np.concatenate([a, b]))) + p.A_b[0]
            got = attention(p, a, b)
            assert abs(got - 1 / (1 + math.exp(-z))) <= 1e-12
            assert 0 < got < 1


class TestInteraction:
    def test_empty(self):
        p = init_params(2, ModelDims(m_n=3))
        np.testing.assert_array_equal(interaction(p, np.ones(3), []), np.zeros(3))

    def test_identity_degenerate(self):
        p = init_params(2, ModelDims(m_n=3, m_e=1, attention="none"))
        p.W[0] = np.eye(3)
        rng = np.random.default_rng(0)
        vs = [rng.normal(size=3) for _ in range(4)]
        np.testing.assert_allclose(interaction(p, np.ones(3), [(v, [1.0]) for v in vs]), np.sum(vs, axis=0),
                                   atol=1e-12)

    def test_hand_arithmetic(self):
        p = init_params(2, ModelDims(m_n=2, m_e=2))
        p.W[0] = [[1.0, 2.0], [3.0, 4.0]]
        p.W[1] = [[0.5, 0.0], [-1.0, 2.0]]
        p.A_w[:] = [0.1, -0.2, 0.3, 0.4]
        p.A_b[:] = [0.05]
        v_i, v_j, u = np.array([1.0, 2.0]), np.array([-1.0, 0.5]), np.array([0.25, 2.0])
        z = 0.1 * 1 - 0.2 * 2 + 0.3 * -1 + 0.4 * 0.5 + 0.05
        alpha = 1 / (1 + math.exp(-z))
        w0v = [1 * -1 + 2 * 0.5, 3 * -1 + 4 * 0.5]
        w1v = [0.5 * -1, -1 * -1 + 2 * 0.5]
        want = [alpha * (0.25 * w0v[r] + 2.0 * w1v[r]) for r in range(2)]
        np.testing.assert_allclose(interaction(p, v_i, [(v_j, u)]), want, atol=1e-12)

    def test_dimension_mismatch(self):
        p = init_params(2, ModelDims(m_n=3, m_e=2))
        with pytest.raises(ValueError):
            interaction(p, np.ones(3), [(np.ones(3), np.ones(3))])
        with pytest.raises(ValueError):
            interaction(p, np.ones(2), [])

    def test_scalar_edge_path(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            p = randomize(init_params(2, ModelDims(m_n=4, m_e=1)), rng)
            v_i = rng.normal(size=4)
            nbrs = [(rng.normal(size=4), float(rng.random())) for _ in range(3)]
            np.testing.assert_allclose(scalar_edge_interaction(p, v_i, nbrs),
                                       interaction(p, v_i, [(v, [u]) for v, u in nbrs]), atol=1e-12)


class TestForward:
    def test_isolated_node(self):
        p = init_params(2, ModelDims(m_n=4))
        for name in ("F_w1", "F_b1", "F_w2", "F_b2"):
            getattr(p, name)[...] = 0
        p.B[0] = 0
        np.testing.assert_array_equal(forward_node(p, 0, []), np.zeros(4))
        p.B[0] = [1.0, -2.0, 3.0, 0.5]
        np.testing.assert_array_equal(forward_node(p, 0, []), p.B[0])

    def test_bias_plus_neighbor_sum(self):
        rng = np.random.default_rng(0)
        p = randomize(init_params(4, ModelDims(m_n=3, m_e=1, attention="none")), rng)
        for name in ("F_w1", "F_b1", "F_w2", "F_b2"):
            getattr(p, name)[...] = 0
        p.W[0] = np.eye(3)
        out = forward_node(p, 0, [(1, [1.0]), (2, [1.0]), (3, [1.0])])
        np.testing.assert_allclose(out, p.B[0] + p.V[1] + p.V[2] + p.V[3], atol=1e-12)

    @pytest.mark.parametrize("mode", ["sigmoid", "softmax", "none"])
    @pytest.mark.parametrize("layers", [1, 2])
    def test_straight_line_oracle(self, mode, layers):
        rng = np.random.default_rng(layers)
        for _ in range(5):
            p = randomize(init_params(6, ModelDims(m_n=4, m_e=2, layers=layers, attention=mode)), rng)
            table = random_table(rng, 6, 2, max_nbrs=3)
            got = forward(p, np.arange(6), FixedNeighbors(table, 2))
            want = np.array([ref_embedding(p, i, table, layers) for i in range(6)])
            np.testing.assert_allclose(got, want, atol=1e-12)

    def test_unknown_node(self):
        p = init_params(3, ModelDims(m_n=2))
        with pytest.raises(KeyError):
            forward_node(p, 5, [])
        with pytest.raises(KeyError):
            forward(p, [3], FixedNeighbors({}, 2))

    def test_one_body_shape(self):
        p = init_params(2, ModelDims(m_n=3, hidden=7))
        assert one_body(p, np.ones(3)).shape == (3,)


class TestLoss:
    def _batch(self, p, pairs, negs, mask=None, table=None):
        return make_batch(np.array(pairs), np.array(negs), mask, FixedNeighbors(table or {}, p.dims.m_e), p.dims)

    def test_zero_score_no_negatives(self):
        p = init_params(3, ModelDims(m_n=2))
        for arr in p.tensors().values():
            arr[...] = 0
        b = self._batch(p, [[0, 1]], [[2]], mask=np.zeros((1, 1)))
        assert loss(p, b, LossConfig()) == pytest.approx(0.693147, abs=1e-6)

    def test_saturation(self):
        per, _, _ = pair_terms(np.array([50.0]), np.array([[-50.0, -60.0]]), np.ones((1, 2)), 1.0)
        assert per[0] < 1e-20

    def test_stable_range(self):
        x = np.linspace(-100, 100, 201)
        per, dpos, dneg = pair_terms(x, x[:, None], np.ones((201, 1)), 1.0)
        assert np.all(np.isfinite(per)) and np.all(np.isfinite(dpos)) and np.all(np.isfinite(dneg))
        np.testing.assert_allclose(log_sigmoid(-800.0), -800.0)

    def test_zero_params_positive_slope(self):
        _, dpos, _ = pair_terms(np.array([0.0]), np.zeros((1, 1)), np.zeros((1, 1)), 1.0)
        assert dpos[0] == -0.5

    def test_straight_line_loss(self):
        rng = np.random.default_rng(4)
        for _ in range(5):
            p = randomize(init_params(8, ModelDims(m_n=4, m_e=2)), rng, 0.3)
            table = random_table(rng, 8, 2, 3)
            pairs = rng.integers(0, 8, size=(3, 2))
            negs = rng.integers(0, 8, size=(3, 2))
            mask = (rng.random((3, 2)) < 0.7).astype(float)
            q = 1.7
            b = self._batch(p, pairs, negs, mask, table)
            emb = {i: np.array(ref_embedding(p, i, table, 1)) for i in range(8)}
            total = 0.0
            for (c, k), nrow, mrow in zip(pairs, negs, mask):
                term = softplus(-float(emb[c] @ emb[k]))
                if mrow.sum():
                    term += q * sum(softplus(float(emb[c] @ emb[j])) for j, m in zip(nrow, mrow) if m) / mrow.sum()
                total += term
            assert loss(p, b, LossConfig(q=q)) == pytest.approx(total / 3, abs=1e-10)

    def test_q_linearity_on_v(self):
        rng = np.random.default_rng(5)
        p = randomize(init_params(6, ModelDims(m_n=3)), rng, 0.4)
        b = self._batch(p, [[0, 1], [2, 3]], [[4, 5], [5, 1]], table=random_table(rng, 6, 2, 2))
        g0 = loss_and_grad(p, b, LossConfig(q=0.0))[1].to_dense(6)["V"]
        g1 = loss_and_grad(p, b, LossConfig(q=1.0))[1].to_dense(6)["V"]
        g2 = loss_and_grad(p, b, LossConfig(q=2.0))[1].to_dense(6)["V"]
        np.testing.assert_allclose(g2 - g0, 2 * (g1 - g0), atol=1e-12)


class TestGradient:
    @pytest.mark.parametrize("mode", ["sigmoid", "softmax", "none"])
    @pytest.mark.parametrize("layers", [1, 2])
    def test_finite_differences(self, mode, layers):
        rng = np.random.default_rng(11)
        p = randomize(init_params(7, ModelDims(m_n=3, m_e=2, layers=layers, attention=mode)), rng)
        table = random_table(rng, 7, 2, 3)
        b = make_batch(np.array([[0, 1], [2, 3]]), rng.integers(0, 7, (2, 2)), None,
                       FixedNeighbors(table, 2), p.dims)
        cfg = LossConfig(q=1.3)
        _, grads = loss_and_grad(p, b, cfg)
        dense = grads.to_dense(7)
        for name, arr in p.tensors().items():
            num = np.zeros_like(arr)
            for idx in np.ndindex(arr.shape):
                old = arr[idx]
                arr[idx] = old + 1e-5
                lp = loss(p, b, cfg)
                arr[idx] = old - 1e-5
                lm = loss(p, b, cfg)
                arr[idx] = old
                num[idx] = (lp - lm) / 2e-5
            err = np.linalg.norm(num - dense[name]) / max(np.linalg.norm(num), np.linalg.norm(dense[name]), 1e-8)
            assert err <= 1e-4, name

    def test_non_finite_named(self):
        p = init_params(3, ModelDims(m_n=2))
        p.W[...] = np.inf
        b = make_batch(np.array([[0, 1]]), np.array([[2]]), None, FixedNeighbors({0: [(1, [1, 1])]}, 2), p.dims)
        with np.errstate(all="ignore"), pytest.raises(NonFiniteGradient, match="tensor"):
            loss_and_grad(p, b, LossConfig())


class TestNegativeSampling:
    def test_same_kind_never_context(self):
        g = Graph([NodeKind.USER, NodeKind.SHOW], ["u", "s"], [{}, {}], [0], [1], [EdgeKind.USER_SHOW], [1.0],
                  np.ones((1, 2)))
        assert negative_sample((0, 1), g, LossConfig(), np.random.default_rng(0)) == []
        g2 = Graph([NodeKind.USER, NodeKind.SHOW, NodeKind.SHOW], ["u", "s", "t"], [{}] * 3, [0, 0], [1, 2],
                   [EdgeKind.USER_SHOW] * 2, [1.0, 1.0], np.ones((2, 2)))
        assert negative_sample((0, 1), g2, LossConfig(negatives_per_positive=4), np.random.default_rng(0)) == [2] * 4

    def test_uniform_degrees(self):
        kinds = [NodeKind.USER] + [NodeKind.SHOW] * 5
        g = Graph(kinds, [str(i) for i in range(6)], [{}] * 6, [0] * 5, list(range(1, 6)),
                  [EdgeKind.USER_SHOW] * 5, np.ones(5), np.ones((5, 2)))
        sampler = NegativeSampler(g, LossConfig(negatives_per_positive=5))
        # five equal-degree shows; context show 1 is excluded, the other four share the mass
        negs, _ = sampler.draw(np.full(2000, 1), np.random.default_rng(0))
        freq = np.bincount(negs.ravel(), minlength=6)[2:] / negs.size
        np.testing.assert_allclose(freq, 0.25, atol=0.02)

    def test_power_ratio(self):
        # show a has degree 16, show b degree 1; context is a third show
        kinds = [NodeKind.USER] * 16 + [NodeKind.SHOW] * 3
        src = list(range(16)) + [0, 0]
        dst = [16] * 16 + [17, 18]
        g = Graph(kinds, [str(i) for i in range(19)], [{}] * 19, src, dst, [EdgeKind.USER_SHOW] * 18,
                  np.ones(18), np.ones((18, 2)))
        negs, _ = NegativeSampler(g, LossConfig(negatives_per_positive=10)).draw(np.full(5000, 18),
                                                                                 np.random.default_rng(1))
        counts = np.bincount(negs.ravel(), minlength=19)
        assert counts[18] == 0
        assert counts[16] / counts[17] == pytest.approx(8.0, rel=0.1)


@pytest.fixture(scope="module")
def small(planted_graph):
    walks = generate_walks(planted_graph, MetaPath.parse("user,show,user"),
                           WalkConfig(walk_length=6, walks_per_node=2, window=2))
    pairs = generate_pairs(walks, 2)
    cache = build_neighbor_cache(planted_graph, SampleConfig())
    return planted_graph, cache, pairs


class TestTraining:
    def test_zero_learning_rate(self, small):
        g, cache, pairs = small
        dims = ModelDims(m_n=8)
        init = init_params(g.num_nodes, dims, 3)
        params, rep = train(g, cache, pairs[:600], dims, LossConfig(),
                            TrainConfig(epochs=2, learning_rate=0.0, rng_seed=3), params=init.copy())
        for name, arr in init.tensors().items():
            np.testing.assert_array_equal(getattr(params, name), arr)
        assert len(rep.epoch_loss) == 2

    def test_deterministic(self, small):
        g, cache, pairs = small
        runs = [train(g, cache, pairs[:1000], ModelDims(m_n=8), LossConfig(), TrainConfig(epochs=1, rng_seed=1))
                for _ in range(2)]
        assert runs[0][1].epoch_loss == runs[1][1].epoch_loss
        np.testing.assert_array_equal(runs[0][0].V, runs[1][0].V)

    def test_loss_decreases(self, small):
        g, cache, pairs = small
        decreasing = []
        for seed in range(5):
            _, rep = train(g, cache, pairs, ModelDims(m_n=16), LossConfig(),
                           TrainConfig(epochs=5, learning_rate=1e-3, rng_seed=seed))
            decreasing.append(all(b < a for a, b in zip(rep.epoch_loss, rep.epoch_loss[1:])))
        assert sum(decreasing) >= 3

    def test_empty_pairs(self, small):
        g, cache, _ = small
        with pytest.raises(ValueError):
            train(g, cache, np.zeros((0, 2)), ModelDims(m_n=4), LossConfig(), TrainConfig())

    def test_divergence_keeps_last_good(self, small, monkeypatch):
        g, cache, pairs = small
        real = model_mod.loss_and_grad
        calls = {"n": 0}

        def flaky(params, batch, cfg, node_features=None):
            calls["n"] += 1
            value, grads = real(params, batch, cfg, node_features)
            return (float("nan") if calls["n"] > 3 else value), grads

        monkeypatch.setattr(model_mod, "loss_and_grad", flaky)
        with pytest.raises(TrainingDiverged) as info:
            train(g, cache, pairs[:600], ModelDims(m_n=4), LossConfig(),
                  TrainConfig(epochs=3, batch_size=200, rng_seed=0))
        assert len(info.value.report.epoch_loss) == 1
        assert np.all(np.isfinite(info.value.params.V))


class TestAdam:
    def test_hand_step(self):
        rng = np.random.default_rng(0)
        p = randomize(init_params(4, ModelDims(m_n=2, m_e=2)), rng, 0.3)
        before = p.copy()
        b = make_batch(np.array([[0, 1]]), np.array([[2]]), None, FixedNeighbors({0: [(3, [0.5, 0.2])]}, 2), p.dims)
        _, grads = loss_and_grad(p, b, LossConfig())
        dense = grads.to_dense(4)
        cfg = TrainConfig(learning_rate=0.01)
        state = AdamState.zeros_like(p)
        adam_step(p, grads, state, cfg)
        touched = set(grads.V_rows[0].tolist())
        for name, g in dense.items():
            m = (1 - 0.9) * g
            v = (1 - 0.999) * g * g
            step = 0.01 * (m / 0.1) / (np.sqrt(v / 0.001) + 1e-8)
            want = getattr(before, name) - step
            if name == "V":
                rows = sorted(touched)
                np.testing.assert_allclose(p.V[rows], want[rows], atol=1e-10)
                untouched = [i for i in range(4) if i not in touched]
                np.testing.assert_array_equal(p.V[untouched], before.V[untouched])
            else:
                np.testing.assert_allclose(getattr(p, name), want, atol=1e-10)


class TestInference:
    def test_matches_forward(self):
        g = line_graph()
        rng = np.random.default_rng(0)
        p = randomize(init_params(4, ModelDims(m_n=3)), rng)
        want = forward(p, [2], FullNeighbors(g))[0]
        np.testing.assert_array_equal(infer_embedding(p, g, 2), want)
        got = embed_nodes(p, g, batch_size=2)
        np.testing.assert_allclose(got, forward(p, np.arange(4), FullNeighbors(g)), atol=1e-14)

    def test_new_isolated_node_is_f_of_zero(self):
        g = line_graph()
        rng = np.random.default_rng(1)
        p = randomize(init_params(3, ModelDims(m_n=3)), rng)
        lonely = Graph(list(g.kinds) + [NodeKind.USER], g.external_ids + ["new"], g.profiles + [{}],
                       g.src, g.dst, g.edge_kinds, g.weights, g.raw_edge_features)
        out = infer_embedding(p, lonely, 4)
        np.testing.assert_allclose(out, one_body(p, np.zeros(3)), atol=1e-12)

    def test_duplicate_node_same_embedding(self):
        kinds = [NodeKind.USER, NodeKind.SHOW, NodeKind.USER]
        g = Graph(kinds, ["a", "s", "b"], [{}] * 3, [0, 2], [1, 1], [EdgeKind.USER_SHOW] * 2, [1.0, 1.0],
                  np.array([[0.4, 0.6], [0.4, 0.6]]))
        rng = np.random.default_rng(2)
        p = randomize(init_params(3, ModelDims(m_n=3)), rng)
        p.V[2] = p.V[0]
        p.B[2] = p.B[0]
        np.testing.assert_array_equal(infer_embedding(p, g, 0), infer_embedding(p, g, 2))

    def test_sampled_scale_option(self):
        from epgnn.model import sampled_rate_scale
        scale = sampled_rate_scale(0.7, 0.5)
        np.testing.assert_allclose(scale(np.array([0, 1, 10])), [0.0, 1.0, 0.4])


class TestFiles:
    def test_embeddings_format(self, tmp_path):
        vec = np.array([[1.0, 1 / 3], [-2.5e-10, 7.0]])
        write_embeddings(tmp_path / "e.tsv", ["a", "b"], vec)
        lines = (tmp_path / "e.tsv").read_text().splitlines()
        assert lines[0] == "#dim=2 count=2"
        assert lines[1] == "a\t1,0.333333333"
        back = read_embeddings(tmp_path / "e.tsv")
        np.testing.assert_allclose(back["b"], vec[1])

    def test_checkpoint_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        p = randomize(init_params(5, ModelDims(m_n=3, layers=2, attention="softmax")), rng)
        state = AdamState.zeros_like(p)
        state.step = 4
        state.m["W"][...] = 1.5
        save_checkpoint(tmp_path / "m.ckpt", p, state)
        assert (tmp_path / "m.ckpt").read_bytes()[:4] == b"EPM1"
        q, back = load_checkpoint(tmp_path / "m.ckpt")
        assert q.dims == p.dims and back.step == 4
        for name, arr in p.tensors().items():
            np.testing.assert_array_equal(getattr(q, name), arr)
        np.testing.assert_array_equal(back.m["W"], 1.5)
