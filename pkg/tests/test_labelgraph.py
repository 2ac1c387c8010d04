"""Label graph construction, attention forward vs a dense-loop oracle, the
channel gate, and freeze/reload integrity."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from mlmargin import tensor as T
from mlmargin.labelgraph import (
    FrozenGateError,
    GraphStructureError,
    build_correlation,
    channel_weights,
    freeze_branch,
    gat_attention_maps,
    gat_forward,
    gate_flops,
    init_gat_params,
    load_embeddings,
    load_frozen_gate,
    reweight_and_pool,
    save_embeddings,
)
from mlmargin.tensor import ShapeError, Tensor, gradcheck


def gat_oracle(nodes: np.ndarray, z_matrix: np.ndarray, params) -> np.ndarray:
    """Dense per-edge loop over the same parameters."""

    def leaky(v, alpha):
        return v if v > 0 else alpha * v

    def elu(v):
        return v if v > 0 else np.exp(v) - 1.0

    mask = z_matrix != 0
    h = nodes
    for li, layer in enumerate(params.layers):
        outs = []
        for w, a_s, a_d in zip(layer.w, layer.a_src, layer.a_dst):
            z = h @ w.data
            k = z.shape[0]
            out = np.zeros_like(z)
            for i in range(k):
                neigh = [j for j in range(k) if mask[i, j]]
                scores = [leaky(float(a_s.data @ z[i]) + float(a_d.data @ z[j]), params.alpha)
                          for j in neigh]
                m = max(scores)
                e = [np.exp(v - m) for v in scores]
                tot = sum(e)
                for j, w_ij in zip(neigh, e):
                    out[i] += (w_ij / tot) * z[j]
            outs.append(out)
        if layer.concat:
            h = np.concatenate(outs, axis=1)
        else:
            h = sum(outs) / len(outs)
        if li < len(params.layers) - 1:
            h = np.vectorize(elu)(h)
    return h.T


class TestBuildCorrelation:
    def test_hand_counted_pair(self):
        z = build_correlation([{0, 1}, {0}, {1}], num_classes=2, tau=0.4, p=0.2)
        # P(1|0) = P(0|1) = 0.5 >= 0.4: both edges kept, mass 0.2 spread on one neighbor
        assert_allclose(z, [[0.8, 0.2], [0.2, 0.8]], atol=1e-15)

    def test_threshold_drops_edges(self):
        z = build_correlation([{0, 1}, {0}, {1}], num_classes=2, tau=0.51, p=0.2)
        assert_allclose(z, np.eye(2), rtol=0, atol=0)

    def test_singletons_give_identity(self):
        z = build_correlation([{0}, {1}, {2}], num_classes=3)
        assert_allclose(z, np.eye(3), rtol=0, atol=0)

    def test_conditional_probability_is_directed(self):
        # P(1|0) = 1/3 below tau, P(0|1) = 1/2 above: only the 1->0 edge stays
        z = build_correlation([{0, 1}, {0}, {0}, {1}], num_classes=2, tau=0.4)
        assert z[0, 1] == 0.0
        assert z[1, 0] == pytest.approx(0.2)
        assert z[0, 0] == 1.0 and z[1, 1] == pytest.approx(0.8)

    def test_mass_splits_across_neighbors(self):
        samples = [{0, 1, 2}] * 5
        z = build_correlation(samples, num_classes=3, tau=0.4, p=0.2)
        assert_allclose(z, 0.8 * np.eye(3) + 0.1 * (1 - np.eye(3)), atol=1e-15)

    def test_annotation_order_irrelevant(self):
        rng = np.random.default_rng(5)
        samples = [set(rng.choice(6, size=rng.integers(1, 4), replace=False).tolist())
                   for _ in range(40)]
        z1 = build_correlation(samples, num_classes=6)
        z2 = build_correlation(list(reversed([sorted(s, reverse=True) for s in samples])), num_classes=6)
        assert np.array_equal(z1, z2)

    def test_duplicate_labels_in_sample_ignored(self):
        z1 = build_correlation([[0, 0, 1], [0]], num_classes=2)
        z2 = build_correlation([[0, 1], [0]], num_classes=2)
        assert np.array_equal(z1, z2)

    def test_missing_class_named_in_error(self):
        with pytest.raises(GraphStructureError, match="class 2"):
            build_correlation([{0, 1}, {0}], num_classes=3)

    def test_row_sums_are_one(self):
        rng = np.random.default_rng(6)
        samples = [set(rng.choice(5, size=rng.integers(1, 4), replace=False).tolist())
                   for _ in range(60)]
        z = build_correlation(samples, num_classes=5)
        assert_allclose(z.sum(axis=1), np.ones(5), atol=1e-12)


class TestGatForward:
    def test_single_node_attention_is_one(self):
        rng = np.random.default_rng(10)
        params = init_gat_params(rng, in_dim=4, out_dim=3, hidden_dim=5, heads=2)
        maps = gat_attention_maps(rng.normal(size=(1, 4)), np.array([[1.0]]), params)
        for att in maps:
            assert_allclose(att, [[1.0]], rtol=0, atol=0)

    def test_identical_embeddings_identical_outputs(self):
        rng = np.random.default_rng(11)
        params = init_gat_params(rng, in_dim=4, out_dim=6, hidden_dim=5)
        nodes = np.tile(rng.normal(size=(1, 4)), (3, 1))
        chain = np.array([[1.0, 0.2, 0.0], [0.2, 1.0, 0.2], [0.0, 0.2, 1.0]])
        h = gat_forward(nodes, chain, params).data
        assert_allclose(h[:, 0], h[:, 1], atol=1e-12)
        assert_allclose(h[:, 0], h[:, 2], atol=1e-12)

    def test_matches_dense_oracle(self):
        rng = np.random.default_rng(12)
        for trial in range(10):
            k = int(rng.integers(2, 6))
            nodes = rng.normal(size=(k, 7))
            samples = [set(rng.choice(k, size=rng.integers(1, k + 1), replace=False).tolist())
                       for _ in range(30)]
            z = build_correlation(samples, num_classes=k)
            params = init_gat_params(rng, in_dim=7, out_dim=4, hidden_dim=6, heads=3)
            got = gat_forward(nodes, z, params).data
            want = gat_oracle(nodes, z, params)
            assert_allclose(got, want, atol=1e-12), f"trial {trial}"

    def test_attention_rows_sum_to_one_and_respect_mask(self):
        rng = np.random.default_rng(13)
        z = np.array([[1.0, 0.2, 0.0], [0.2, 1.0, 0.2], [0.0, 0.2, 1.0]])
        params = init_gat_params(rng, in_dim=5, out_dim=4)
        maps = gat_attention_maps(rng.normal(size=(3, 5)), z, params)
        assert len(maps) == 8  # 2 layers x 4 heads
        for att in maps:
            assert_allclose(att.sum(axis=1), np.ones(3), atol=1e-12)
            assert att[0, 2] == 0.0 and att[2, 0] == 0.0
            assert np.all(att >= 0.0)

    def test_isolated_node_rejected(self):
        rng = np.random.default_rng(14)
        params = init_gat_params(rng, in_dim=3, out_dim=2)
        z = np.array([[1.0, 0.0], [0.0, 0.0]])
        with pytest.raises(GraphStructureError, match="node 1"):
            gat_forward(rng.normal(size=(2, 3)), z, params)

    def test_output_width_is_out_dim(self):
        rng = np.random.default_rng(15)
        params = init_gat_params(rng, in_dim=6, out_dim=9, hidden_dim=4, heads=2)
        h = gat_forward(rng.normal(size=(4, 6)), np.eye(4), params)
        assert h.shape == (9, 4)

    def test_gradcheck_through_parameters(self):
        rng = np.random.default_rng(16)
        params = init_gat_params(rng, in_dim=3, out_dim=2, hidden_dim=3, heads=2)
        nodes = rng.normal(size=(3, 3))
        z = np.array([[1.0, 0.2, 0.0], [0.2, 1.0, 0.2], [0.0, 0.2, 1.0]])
        coeffs = rng.normal(size=(2, 3))

        w0 = params.layers[0].w[0]
        a0 = params.layers[0].a_src[1]
        w1 = params.layers[1].w[0]

        def fn(w, a, wf):
            return (gat_forward(nodes, z, params) * coeffs).sum()

        rep = gradcheck(fn, [w0, a0, w1], tol=1e-5)
        assert rep.passed, rep.summary()


class TestChannelGate:
    def test_constant_channel(self):
        h = Tensor(np.full((4, 3), -1.5))
        w = channel_weights(h)
        assert_allclose(w.data, np.full(4, 1.0 / (1.0 + np.exp(1.5))), atol=1e-15)

    def test_max_selects_dominant_node(self):
        h = np.array([[0.1, 9.0, -3.0], [2.0, -1.0, 1.0]])
        w = channel_weights(Tensor(h))
        assert_allclose(w.data, 1.0 / (1.0 + np.exp(-np.array([9.0, 2.0]))), atol=1e-15)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(20)
        h = rng.normal(size=(6, 5))
        want = np.array([1.0 / (1.0 + np.exp(-max(row))) for row in h])
        assert_allclose(channel_weights(Tensor(h)).data, want, atol=1e-12)

    def test_gate_in_open_interval(self):
        rng = np.random.default_rng(21)
        w = channel_weights(Tensor(rng.normal(scale=5.0, size=(8, 4)))).data
        assert np.all(w > 0.0) and np.all(w < 1.0)


class TestReweightAndPool:
    def test_unit_gate_constant_features(self):
        f = Tensor(np.full((3, 2, 2), 2.5))
        out = reweight_and_pool(f, np.ones(3))
        assert_allclose(out.data, np.full(3, 5.0), rtol=0, atol=0)

    def test_zero_gate_annihilates(self):
        rng = np.random.default_rng(22)
        f = Tensor(rng.normal(size=(3, 4, 4)))
        gate = np.array([1.0, 0.0, 0.5])
        out = reweight_and_pool(f, gate).data
        assert out[1] == 0.0

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(23)
        f = rng.normal(size=(5, 3, 4))
        gate = rng.uniform(0.1, 0.9, size=5)
        want = np.array([g * (c.mean() + c.max()) for g, c in zip(gate, f)])
        got = reweight_and_pool(Tensor(f), gate).data
        assert_allclose(got, want, atol=1e-12)

    def test_batched_input(self):
        rng = np.random.default_rng(24)
        f = rng.normal(size=(2, 3, 4, 4))
        gate = rng.uniform(size=3)
        got = reweight_and_pool(Tensor(f), gate).data
        assert got.shape == (2, 3)
        for b in range(2):
            want = np.array([g * (c.mean() + c.max()) for g, c in zip(gate, f[b])])
            assert_allclose(got[b], want, atol=1e-12)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            reweight_and_pool(Tensor(np.ones((3, 2, 2))), np.ones(4))


class TestFreezeReload:
    def _branch(self, rng):
        k, n, s = 4, 6, 5
        nodes = rng.normal(size=(k, n))
        samples = [set(rng.choice(k, size=2, replace=False).tolist()) for _ in range(20)]
        z = build_correlation(samples, num_classes=k)
        params = init_gat_params(rng, in_dim=n, out_dim=s)
        return nodes, z, params

    def test_round_trip_bitwise(self, tmp_path):
        rng = np.random.default_rng(30)
        nodes, z, params = self._branch(rng)
        live = freeze_branch(nodes, z, params, tmp_path / "gate.json")
        reloaded = load_frozen_gate(tmp_path / "gate.json")
        assert np.array_equal(live, reloaded)
        recomputed = channel_weights(gat_forward(nodes, z, params)).data
        assert np.array_equal(recomputed, reloaded)

    def test_tampered_checksum_rejected(self, tmp_path):
        import json

        rng = np.random.default_rng(31)
        nodes, z, params = self._branch(rng)
        path = tmp_path / "gate.json"
        freeze_branch(nodes, z, params, path)
        payload = json.loads(path.read_text())
        payload["weights"][0] += 1e-9
        path.write_text(json.dumps(payload))
        with pytest.raises(FrozenGateError, match="checksum"):
            load_frozen_gate(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FrozenGateError, match="not found"):
            load_frozen_gate(tmp_path / "absent.json")

    def test_malformed_json(self, tmp_path):
        path = tmp_path / "gate.json"
        path.write_text("{not json")
        with pytest.raises(FrozenGateError, match="JSON"):
            load_frozen_gate(path)

    def test_gate_flops_accounting(self):
        assert gate_flops(64, 8 * 8) == 64 * 64
        assert gate_flops(5, 1) == 5


class TestEmbeddingsIO:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(40)
        names = ["cat", "dog", "truck"]
        vecs = rng.normal(size=(3, 7))
        save_embeddings(tmp_path / "emb.txt", names, vecs)
        loaded = load_embeddings(tmp_path / "emb.txt", names)
        assert np.array_equal(loaded, vecs)

    def test_subset_and_reorder(self, tmp_path):
        rng = np.random.default_rng(41)
        names = ["a", "b", "c"]
        vecs = rng.normal(size=(3, 4))
        save_embeddings(tmp_path / "emb.txt", names, vecs)
        loaded = load_embeddings(tmp_path / "emb.txt", ["c", "a"])
        assert np.array_equal(loaded, vecs[[2, 0]])

    def test_missing_class_mentions_unnamed_labels(self, tmp_path):
        save_embeddings(tmp_path / "emb.txt", ["a"], np.ones((1, 3)))
        with pytest.raises(KeyError, match="unnamed labels"):
            load_embeddings(tmp_path / "emb.txt", ["a", "zebra"])

    def test_missing_file_mentions_limitation(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="unnamed labels"):
            load_embeddings(tmp_path / "nope.txt", ["a"])

    def test_ragged_rows_rejected(self, tmp_path):
        (tmp_path / "emb.txt").write_text("a 1.0 2.0\nb 1.0\n")
        with pytest.raises(ValueError, match="line 2"):
            load_embeddings(tmp_path / "emb.txt", ["a", "b"])
