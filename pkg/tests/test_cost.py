import csv
import math

import numpy as np
import pytest

from lga.baselines import AttentionParams, crisscross_attention, dense_attention
from lga.cost import (BENCH_COLUMNS, BenchConfig, CcnetCostConfig, DenseCostConfig, LgaCostConfig,
                      analytic_attention_costs, ccnet_affinity_macs, count_ccnet, count_dense, count_lga,
                      count_preset, fit_scaling_exponent, run_benchmark, write_bench_csv)
from lga.graph import EdgeKernels, build_graph, n_edges
from lga.module import init_params, lga_forward
from lga.tensor_core import FeatureMap, count_macs

NS = (256, 1024, 4096, 16384)


class TestPresets:
    def test_squeeze_lga(self):
        r = count_preset("squeeze-lga").table_row()
        assert abs(r["params_resize_k"] - 66) <= 2 and abs(r["params_attention_k"] - 67) <= 2
        assert abs(r["params_total_k"] - 132) <= 2
        assert abs(r["flops_resize_m"] - 67) <= 2 and abs(r["flops_info_prop_m"] - 5) <= 2
        assert abs(r["flops_other_m"] - 68) <= 2 and abs(r["flops_total_m"] - 140) <= 2

    def test_squeeze_lga_small(self):
        r = count_preset("squeeze-lga-small").table_row()
        assert abs(r["params_resize_k"] - 8) <= 2 and abs(r["params_attention_k"] - 9) <= 2
        assert abs(r["params_total_k"] - 17) <= 2
        assert abs(r["flops_resize_m"] - 8) <= 2 and abs(r["flops_other_m"] - 9) <= 2
        assert abs(r["flops_total_m"] - 22) <= 2

    def test_ccnet_within_five_percent(self):
        r = count_preset("ccnet")
        assert abs(r.params_total / 2686e3 - 1) < 0.05
        assert abs(r.flops_total / 5652e6 - 1) < 0.05
        row = r.table_row()
        for got, want in ((row["flops_resize_m"], 4832), (row["flops_info_prop_m"], 150), (row["flops_other_m"], 670)):
            assert abs(got / want - 1) < 0.05

    def test_unknown_preset(self):
        with pytest.raises(KeyError):
            count_preset("nope")

    def test_hand_count_tiny(self):
        # C_in=8, C=4, L=2, G=2, 3x3 grid: resize 8*4/2=16, attention 9*4 + 2*4*4/2 = 52
        r = count_lga(LgaCostConfig(8, 4, 2, 2, 3, 3))
        assert (r.params_channel_resize, r.params_attention) == (16, 52)
        assert r.flops_channel_resize == 9 * 16
        assert r.flops_info_prop == 2 * 9 * 9 * 4
        assert r.flops_other_conv == 2 * 9 * 8 + 9 * 9 * 4  # transforms C*C/G = 8 per node, edge kernels 9*C


class TestFormulas:
    def test_totals_are_sums(self):
        for r in (count_lga(LgaCostConfig()), count_ccnet(CcnetCostConfig()), count_dense(DenseCostConfig())):
            assert r.params_total == r.params_channel_resize + r.params_attention
            assert r.flops_total == r.flops_channel_resize + r.flops_info_prop + r.flops_other_conv
            assert min(r.params_total, r.flops_total) >= 0

    def test_zero_layers(self):
        r = count_lga(LgaCostConfig(layers=0))
        assert r.flops_info_prop == 0 and r.flops_other_conv == 0

    def test_zero_recurrence(self):
        assert count_ccnet(CcnetCostConfig(recurrence=0)).flops_info_prop == 0

    def test_ccnet_doubling(self):
        a = ccnet_affinity_macs(1024, 64, 512, 2)
        assert ccnet_affinity_macs(2048, 64, 512, 2) / a == pytest.approx(2 ** 1.5, rel=1e-14)

    def test_linear_in_layers_and_nodes(self):
        f = lambda **kw: count_lga(LgaCostConfig(**kw)).flops_info_prop
        assert f(layers=4) == 2 * f(layers=2)
        assert f(height=64) == 2 * f(height=32)

    def test_flops_per_mac(self):
        a = count_lga(LgaCostConfig())
        b = count_lga(LgaCostConfig(flops_per_mac=2))
        assert b.flops_total == 2 * a.flops_total and b.params_total == a.params_total

    def test_invalid(self):
        with pytest.raises(ValueError):
            count_lga(LgaCostConfig(groups=3))
        with pytest.raises(ValueError):
            count_lga(LgaCostConfig(reduce=False))


class TestInstrumentation:
    @pytest.mark.parametrize("h,w,cin,c,layers,groups", [(4, 4, 8, 4, 2, 2), (5, 3, 16, 8, 4, 8), (1, 1, 4, 4, 1, 1)])
    def test_lga_counts_match(self, h, w, cin, c, layers, groups):
        p = init_params(cin, c, layers, groups, rng=np.random.default_rng(0))
        with count_macs() as m:
            lga_forward(FeatureMap(np.ones((h, w, cin))), p)
        r = count_lga(LgaCostConfig(cin, c, layers, groups, h, w, exact_edges=True))
        assert m["resize"] == r.flops_channel_resize
        assert m["info_prop"] == r.flops_info_prop
        assert m["other"] == r.flops_other_conv

    def test_crisscross_counts_match(self):
        p = AttentionParams.init(8, 2, 8, recurrence=2, rng=np.random.default_rng(0))
        with count_macs() as m:
            crisscross_attention(FeatureMap(np.ones((4, 6, 8))), p)
        r = count_ccnet(CcnetCostConfig(8, 8, 1, 2, 8, 2, 4, 6, exact_positions=True, qkv_per_recurrence=True))
        assert m["info_prop"] == r.flops_info_prop
        assert m["other"] == r.flops_other_conv

    def test_dense_counts_match(self):
        p = AttentionParams.init(8, 2, 4, recurrence=1, rng=np.random.default_rng(0))
        with count_macs() as m:
            dense_attention(FeatureMap(np.ones((3, 4, 8))), p)
        r = count_dense(DenseCostConfig(8, 2, 4, 12))
        assert m["info_prop"] == r.flops_info_prop
        assert m["other"] == r.flops_other_conv


class TestScaling:
    @pytest.mark.parametrize("model,expected", [("lga", 1.0), ("ccnet", 1.5), ("dense", 2.0)])
    def test_analytic_exponents(self, model, expected):
        fit = fit_scaling_exponent(zip(NS, analytic_attention_costs(model, NS)))
        assert fit.exponent == pytest.approx(expected, abs=1e-12)
        assert round(fit.exponent, 3) == expected

    def test_fit_validation(self):
        with pytest.raises(ValueError):
            fit_scaling_exponent([(1, 1), (2, 2), (3, 3)])
        with pytest.raises(ValueError):
            fit_scaling_exponent([(1, 1), (2, 2), (4, 3), (8, 4)])  # spans only 8x
        with pytest.raises(ValueError):
            fit_scaling_exponent([(1, 1), (4, 0), (16, 3), (64, 4)])
        with pytest.raises(ValueError):
            fit_scaling_exponent([(1, 1), (16, 2), (4, 3), (64, 4)])

    def test_analytic_bench_csv(self, tmp_path):
        rows, fits = run_benchmark(BenchConfig(), analytic=True)
        assert {m: round(f.exponent, 3) for m, f in fits.items()} == {"lga": 1.0, "ccnet": 1.5, "dense": 2.0}
        write_bench_csv(rows, tmp_path / "b.csv")
        with open(tmp_path / "b.csv") as fh:
            got = list(csv.DictReader(fh))
        assert tuple(got[0]) == BENCH_COLUMNS
        assert len(got) == 12

    def test_tiny_wall_time_run(self):
        rows, fits = run_benchmark(BenchConfig(ns=(16, 64, 256, 1024), repeats=1, warmup=0,
                                               channels={"lga": 4, "ccnet": 4, "dense": 4}))
        assert all(r.wall_ns_median > 0 for r in rows)
        assert all(math.isfinite(f.exponent) for f in fits.values())


class TestStorage:
    def test_entries_bounded_and_linear(self):
        sides = (16, 32, 64, 128)
        ns = [s * s for s in sides]
        entries = []
        for s in sides:
            g = build_graph(FeatureMap(np.zeros((s, s, 1))), EdgeKernels.zeros(1))
            assert g.n_entries == n_edges(s, s) == (3 * s - 2) ** 2
            assert g.n_entries <= 9 * s * s
            entries.append(g.n_entries)
        slope = np.polyfit(ns, entries, 1)[0]
        assert 7 <= slope <= 9
