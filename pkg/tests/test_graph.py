import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import grid_neighbours, numeric_grad, rel_err
from lga.graph import (DIRECTIONS, OFFSETS, EdgeActivation, EdgeKernels, assemble_adjacency, build_graph,
                       compute_edge_maps, densify, message_pass, message_pass_backward, n_edges,
                       normalize_adjacency, normalize_backward)
from lga.tensor_core import FeatureMap, ShapeError, count_macs


def random_graph(h, w, seed, eps=1e-6):
    rng = np.random.default_rng(seed)
    maps = rng.uniform(0.1, 2.0, size=(h, w, 9))
    return normalize_adjacency(assemble_adjacency(maps, h, w), eps), maps


class TestEdgeKernels:
    def test_nine_kernels(self):
        k = EdgeKernels.init(5, bias=True)
        assert k.weight.shape == (5, 9)
        assert k.n_params == 9 * 5 + 9
        assert EdgeKernels.init(5).n_params == 45
        assert set(DIRECTIONS) == {"self", "N", "NE", "E", "SE", "S", "SW", "W", "NW"}
        assert OFFSETS[DIRECTIONS.index("self")] == (0, 0)

    def test_zero_kernels_give_ln2(self):
        maps = compute_edge_maps(FeatureMap(np.random.default_rng(0).normal(size=(3, 4, 6))), EdgeKernels.zeros(6))
        np.testing.assert_allclose(maps, np.log(2.0), rtol=0, atol=1e-15)

    def test_single_channel(self):
        k = EdgeKernels(np.ones((1, 9)))
        maps = compute_edge_maps(FeatureMap(np.array([[[0.7]]])), k)
        np.testing.assert_allclose(maps[0, 0], np.log1p(np.exp(0.7)))

    def test_loop_oracle(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(4, 4, 8))
        k = EdgeKernels.init(8, rng=rng)
        maps = compute_edge_maps(FeatureMap(x), k)
        for y in range(4):
            for xx in range(4):
                for d in range(9):
                    z = sum(x[y, xx, c] * k.weight[c, d] for c in range(8))
                    assert maps[y, xx, d] == pytest.approx(np.log(1.0 + np.exp(z)), abs=1e-13)

    @pytest.mark.parametrize("act", list(EdgeActivation))
    def test_activations_nonnegative_with_gradient(self, act):
        z = np.linspace(-4, 4, 17)
        assert np.all(act(z) >= 0)
        num = (act(z + 1e-6) - act(z - 1e-6)) / 2e-6
        mask = np.abs(z) > 1e-3  # abs has a kink at 0
        np.testing.assert_allclose(act.grad(z)[mask], num[mask], rtol=1e-6, atol=1e-8)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            compute_edge_maps(FeatureMap(np.zeros((2, 2, 3))), EdgeKernels.zeros(4))


class TestStructure:
    def test_single_node(self):
        g, _ = random_graph(1, 1, 0)
        assert g.n_entries == 1
        assert g.src[0] == g.dst[0] == 0

    def test_two_by_two(self):
        g, _ = random_graph(2, 2, 0)
        assert g.n_entries == 16
        assert np.all(np.bincount(g.src) == 4)

    def test_32x32_dense_shape(self):
        g, _ = random_graph(32, 32, 0)
        assert densify(g).shape == (1024, 1024)

    def test_densify_limit(self):
        g, _ = random_graph(65, 64, 0)
        with pytest.raises(ValueError):
            densify(g)

    @given(st.integers(1, 9), st.integers(1, 9))
    @settings(max_examples=40, deadline=None)
    def test_outgoing_sets_and_count(self, h, w):
        g, _ = random_graph(h, w, 0)
        for n in range(h * w):
            assert set(g.dst[g.src == n]) == grid_neighbours(h, w, n)
        assert g.n_entries == n_edges(h, w) == sum(len(grid_neighbours(h, w, n)) for n in range(h * w))
        assert g.n_entries <= 9 * h * w

    def test_edge_weight_read_at_source(self):
        h, w = 3, 4
        g, maps = random_graph(h, w, 2)
        for s, d, k, r in zip(g.src, g.dst, g.direction, g.raw):
            dy, dx = OFFSETS[k]
            sy, sx = divmod(int(s), w)
            assert (sy + dy) * w + (sx + dx) == d
            assert r == maps[sy, sx, k]

    def test_same_sparsity_pattern(self):
        g, _ = random_graph(5, 4, 3)
        assert np.array_equal(densify(g, "raw") != 0, densify(g, "norm") != 0)


class TestNormalization:
    def test_single_node(self):
        g = normalize_adjacency(assemble_adjacency(np.full((1, 1, 9), 0.3), 1, 1), 1e-6)
        assert g.norm[0] == pytest.approx(0.3 / (0.3 + 1e-6), rel=1e-15)

    def test_uniform_two_by_two(self):
        g = normalize_adjacency(assemble_adjacency(np.ones((2, 2, 9)), 2, 2), 1e-6)
        np.testing.assert_allclose(g.norm, 1.0 / (4.0 + 1e-6), rtol=1e-15)

    def test_dense_row_sums(self):
        g, _ = random_graph(3, 3, 4)
        m_raw = densify(g, "raw")
        s = m_raw.sum(axis=1)
        np.testing.assert_allclose(densify(g).sum(axis=1), s / (s + 1e-6), rtol=1e-14)
        assert np.all(densify(g).sum(axis=1) < 1.0)

    def test_sums_tend_to_one(self):
        _, maps = random_graph(3, 3, 5)
        sums = [normalize_adjacency(assemble_adjacency(maps * t, 3, 3), 1e-6).norm.sum() / 9 for t in (1, 1e3, 1e6)]
        assert sums[0] < sums[1] < sums[2] < 1.0
        assert 1.0 - sums[2] < 1e-11

    @pytest.mark.parametrize("eps", [0.0, -1e-6])
    def test_eps_must_be_positive(self, eps):
        with pytest.raises(ValueError):
            normalize_adjacency(assemble_adjacency(np.ones((2, 2, 9)), 2, 2), eps)

    def test_identity_structured(self):
        maps = np.zeros((2, 3, 9))
        maps[..., 0] = 1.0
        g = assemble_adjacency(maps, 2, 3)
        np.testing.assert_array_equal(densify(g, "raw"), np.eye(6))


class TestMessagePassing:
    @pytest.mark.parametrize("seed", range(5))
    def test_sparse_equals_dense(self, seed):
        g, _ = random_graph(4, 4, seed)
        x = np.random.default_rng(seed + 10).normal(size=(16, 5))
        # receiver aggregation: out[j] = sum_i x[i] M[i, j]
        np.testing.assert_allclose(message_pass(x, g), densify(g).T @ x, rtol=0, atol=1e-12)

    def test_mac_count(self):
        g, _ = random_graph(4, 5, 0)
        with count_macs() as c:
            message_pass(np.ones((20, 3)), g)
        assert c["info_prop"] == g.n_entries * 3

    def test_backward(self):
        rng = np.random.default_rng(7)
        g, maps = random_graph(3, 3, 7)
        x = rng.normal(size=(9, 2))
        r = rng.normal(size=(9, 2))
        raw = g.raw.copy()

        def f():
            gg = normalize_adjacency(type(g)(3, 3, g.src, g.dst, g.direction, raw), g.eps)
            return float(np.sum(r * message_pass(x, gg)))

        gx, gnorm = message_pass_backward(x, g, r)
        graw = normalize_backward(g, gnorm)
        assert rel_err(gx, numeric_grad(f, x)) < 1e-8
        assert rel_err(graw, numeric_grad(f, raw)) < 1e-7


class TestDump:
    def test_json(self):
        x = FeatureMap(np.random.default_rng(0).normal(size=(2, 2, 3)))
        g = build_graph(x, EdgeKernels.init(3, rng=np.random.default_rng(1)), 1e-6)
        obj = json.loads(g.to_json())
        assert obj["eps"] == 1e-6
        assert len(obj["edges"]) == 16
        for s, d, r, n in obj["edges"]:
            assert r > 0 and 0 < n < 1
        out = {}
        for s, d, r, n in obj["edges"]:
            out[s] = out.get(s, 0.0) + n
        assert all(v < 1 for v in out.values())
