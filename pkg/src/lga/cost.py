"""Analytic parameter/FLOP counts and empirical scaling measurements.

Counts are split the same way as the efficiency comparison they reproduce:
channel resizing, information propagation (the attention/message term) and
other convolutions. One multiply-accumulate counts as ``flops_per_mac`` FLOPs.
"""
from __future__ import annotations

import csv
import math
import statistics
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from .baselines import crisscross_core, dense_attention_core
from .graph import EdgeKernels, build_graph, message_pass, n_edges
from .tensor_core import FeatureMap

BENCH_COLUMNS = ("model", "N", "C_in", "C_lga", "G", "L", "params_total", "flops_resize", "flops_attn",
                 "flops_other", "wall_ns_median")


@dataclass(frozen=True)
class CostReport:
    model: str
    n_nodes: int
    params_channel_resize: int
    params_attention: int
    flops_channel_resize: int
    flops_info_prop: int
    flops_other_conv: int

    @property
    def params_total(self) -> int:
        return self.params_channel_resize + self.params_attention

    @property
    def flops_total(self) -> int:
        return self.flops_channel_resize + self.flops_info_prop + self.flops_other_conv

    def table_row(self) -> dict[str, float]:
        """Values in the display units of the efficiency table (10^3 params, 10^6 FLOPs)."""
        return {
            "params_resize_k": self.params_channel_resize / 1e3,
            "params_attention_k": self.params_attention / 1e3,
            "params_total_k": self.params_total / 1e3,
            "flops_resize_m": self.flops_channel_resize / 1e6,
            "flops_info_prop_m": self.flops_info_prop / 1e6,
            "flops_other_m": self.flops_other_conv / 1e6,
            "flops_total_m": self.flops_total / 1e6,
        }

    def format(self) -> str:
        r = self.table_row()
        return (f"{self.model:<12} N={self.n_nodes:<6} "
                f"params(k): resize {r['params_resize_k']:.1f}  attention {r['params_attention_k']:.1f}  "
                f"total {r['params_total_k']:.1f} | "
                f"FLOPs(M): resize {r['flops_resize_m']:.1f}  info-prop {r['flops_info_prop_m']:.1f}  "
                f"other {r['flops_other_m']:.1f}  total {r['flops_total_m']:.1f}")


# ---------------------------------------------------------------------------
# LGA
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LgaCostConfig:
    in_channels: int = 512
    channels: int = 128
    layers: int = 4
    groups: int = 1
    height: int = 32
    width: int = 32
    reduce: bool = True
    bias: bool = False
    exact_edges: bool = False
    flops_per_mac: int = 1

    @property
    def n_nodes(self) -> int:
        return self.height * self.width


def _validate_lga(cfg: LgaCostConfig) -> None:
    if cfg.layers < 0 or cfg.groups < 1 or cfg.height < 1 or cfg.width < 1:
        raise ValueError(f"invalid LGA config {cfg}")
    if cfg.channels % cfg.groups or (cfg.reduce and cfg.in_channels % cfg.groups):
        raise ValueError(f"groups={cfg.groups} must divide the channel counts")
    if not cfg.reduce and cfg.in_channels != cfg.channels:
        raise ValueError("without a reducer in_channels must equal channels")


def lga_propagation_macs(n_nodes: int, channels: int, layers: int, edges: int | None = None) -> int:
    """Message-passing MACs; ``edges`` defaults to the 9-per-node upper bound."""
    return layers * (9 * n_nodes if edges is None else edges) * channels


def count_lga(cfg: LgaCostConfig) -> CostReport:
    _validate_lga(cfg)
    n, c, g, L = cfg.n_nodes, cfg.channels, cfg.groups, cfg.layers
    resize_macs = n * cfg.in_channels * c // g if cfg.reduce else 0
    p_resize = cfg.in_channels * c // g + (c if cfg.bias else 0) if cfg.reduce else 0
    p_attn = 9 * c + L * c * c // g + ((9 + L * c) if cfg.bias else 0)
    edges = n_edges(cfg.height, cfg.width) if cfg.exact_edges else None
    prop = lga_propagation_macs(n, c, L, edges)
    # layer transforms plus the nine edge kernels
    other = L * n * c * c // g + 9 * n * c if L > 0 else 0
    k = cfg.flops_per_mac
    return CostReport("LGA" if g == 1 else "LGA small", n, p_resize, p_attn, k * resize_macs, k * prop, k * other)


# ---------------------------------------------------------------------------
# Criss-cross and dense attention
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CcnetCostConfig:
    in_channels: int = 512
    reduced_channels: int = 512
    reduce_kernel: int = 3
    qk_channels: int = 64
    value_channels: int = 512
    recurrence: int = 2
    height: int = 32
    width: int = 32
    exact_positions: bool = True
    qkv_per_recurrence: bool = True
    flops_per_mac: int = 1

    @property
    def n_nodes(self) -> int:
        return self.height * self.width


def ccnet_affinity_macs(n_nodes: float, qk_channels: int, value_channels: int, recurrence: int) -> float:
    """Closed form R * N * 2 sqrt(N) * (c_qk + c_v): row plus column of a square grid."""
    return recurrence * n_nodes * 2.0 * math.sqrt(n_nodes) * (qk_channels + value_channels)


def count_ccnet(cfg: CcnetCostConfig) -> CostReport:
    if min(cfg.in_channels, cfg.reduced_channels, cfg.qk_channels, cfg.value_channels) < 1 or cfg.recurrence < 0:
        raise ValueError(f"invalid CCNet config {cfg}")
    n, cr = cfg.n_nodes, cfg.reduced_channels
    kk = cfg.reduce_kernel ** 2
    p_resize = kk * cfg.in_channels * cr
    qkv_params = cr * (2 * cfg.qk_channels + cfg.value_channels)
    if cfg.exact_positions:
        aff = cfg.recurrence * n * (cfg.height + cfg.width - 1) * (cfg.qk_channels + cfg.value_channels)
    else:
        aff = round(ccnet_affinity_macs(n, cfg.qk_channels, cfg.value_channels, cfg.recurrence))
    passes = cfg.recurrence if cfg.qkv_per_recurrence else min(cfg.recurrence, 1)
    other = passes * n * qkv_params
    k = cfg.flops_per_mac
    return CostReport("CCNet", n, p_resize, qkv_params, k * n * p_resize, k * aff, k * other)


@dataclass(frozen=True)
class DenseCostConfig:
    channels: int = 128
    qk_channels: int = 16
    value_channels: int = 128
    n_nodes: int = 1024
    flops_per_mac: int = 1


def count_dense(cfg: DenseCostConfig) -> CostReport:
    n = cfg.n_nodes
    qkv = cfg.channels * (2 * cfg.qk_channels + cfg.value_channels)
    k = cfg.flops_per_mac
    return CostReport("dense", n, 0, qkv, 0, k * n * n * (cfg.qk_channels + cfg.value_channels), k * n * qkv)


# Presets reproducing the SqueezeNet (32x32x512 encoder output) comparison.
# The CCNet internals are not published; these were recovered from the
# reported breakdown, see README "CCNet preset".
PAPER_PRESETS = {
    "squeeze-lga": LgaCostConfig(512, 128, 4, 1, 32, 32),
    "squeeze-lga-small": LgaCostConfig(512, 128, 4, 8, 32, 32),
    "ccnet": CcnetCostConfig(512, 512, 3, 64, 512, 2, 32, 32, exact_positions=True,
                             qkv_per_recurrence=False, flops_per_mac=2),
}


def count_preset(name: str) -> CostReport:
    cfg = PAPER_PRESETS.get(name)
    if cfg is None:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PAPER_PRESETS)}")
    return count_lga(cfg) if isinstance(cfg, LgaCostConfig) else count_ccnet(cfg)


# ---------------------------------------------------------------------------
# Scaling fits
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScalingFit:
    ns: tuple[float, ...]
    costs: tuple[float, ...]
    exponent: float
    intercept: float
    residual: float


def fit_scaling_exponent(samples) -> ScalingFit:
    """Least-squares slope of log(cost) against log(N)."""
    pts = [(float(n), float(c)) for n, c in samples]
    if len(pts) < 4:
        raise ValueError(f"need at least 4 samples, got {len(pts)}")
    ns = np.array([p[0] for p in pts])
    cs = np.array([p[1] for p in pts])
    if np.any(ns <= 0) or np.any(cs <= 0):
        raise ValueError("sample sizes and costs must be positive")
    if np.any(np.diff(ns) <= 0):
        raise ValueError("N must be strictly increasing")
    if ns[-1] / ns[0] < 16:
        raise ValueError("samples must span at least 16x in N")
    x, y = np.log(ns), np.log(cs)
    (slope, intercept), res, *_ = np.polyfit(x, y, 1, full=True)
    return ScalingFit(tuple(ns), tuple(cs), float(slope), float(intercept), float(res[0]) if len(res) else 0.0)


def analytic_attention_costs(model: str, ns, channels: int = 64, layers: int = 4, recurrence: int = 2,
                             qk_channels: int = 8):
    """Attention-term MACs only (channel resizing excluded)."""
    if model == "lga":
        return [lga_propagation_macs(n, channels, layers) for n in ns]
    if model == "ccnet":
        return [ccnet_affinity_macs(n, qk_channels, channels, recurrence) for n in ns]
    if model == "dense":
        return [n * n * (qk_channels + channels) for n in ns]
    raise ValueError(f"unknown model {model!r}")


# ---------------------------------------------------------------------------
# Wall-time benchmark
# ---------------------------------------------------------------------------


@dataclass
class BenchConfig:
    ns: tuple[int, ...] = (256, 1024, 4096, 16384)
    models: tuple[str, ...] = ("lga", "ccnet", "dense")
    channels: dict[str, int] = field(default_factory=lambda: {"lga": 64, "ccnet": 16, "dense": 8})
    qk_channels: int = 8
    layers: int = 4
    recurrence: int = 2
    repeats: int = 9
    warmup: int = 2
    dtype: str = "float32"
    seed: int = 0


@dataclass
class BenchRow:
    model: str
    N: int
    C_in: int
    C_lga: int
    G: int
    L: int
    params_total: int
    flops_resize: int
    flops_attn: int
    flops_other: int
    wall_ns_median: int


def _median_ns(fn, repeats: int, warmup: int, min_sample_ns: int = 20_000_000) -> int:
    """Median per-call time. Fast kernels are looped so each timed sample lasts
    at least ``min_sample_ns``, which keeps small-N timings out of timer noise."""
    for _ in range(warmup):
        fn()
    t0 = time.perf_counter_ns()
    fn()
    number = max(1, math.ceil(min_sample_ns / max(time.perf_counter_ns() - t0, 1)))
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter_ns()
        for _ in range(number):
            fn()
        times.append((time.perf_counter_ns() - t0) / number)
    return int(statistics.median(times))


def _attention_kernel(model: str, n: int, c: int, cfg: BenchConfig, rng: np.random.Generator):
    side = int(round(math.sqrt(n)))
    if side * side != n:
        raise ValueError(f"benchmark grids are square; N={n} is not a perfect square")
    dt = np.dtype(cfg.dtype)
    if model == "lga":
        x = FeatureMap(rng.normal(size=(side, side, c)).astype(dt))
        g = build_graph(x, EdgeKernels(rng.normal(size=(c, 9)).astype(dt) / math.sqrt(c)))
        nodes = x.nodes()

        def run():
            y = nodes
            for _ in range(cfg.layers):
                y = message_pass(y, g)
            return y
        return run
    q = rng.normal(size=(side, side, cfg.qk_channels)).astype(dt)
    k = rng.normal(size=(side, side, cfg.qk_channels)).astype(dt)
    v = rng.normal(size=(side, side, c)).astype(dt)
    if model == "ccnet":
        def run():
            y = v
            for _ in range(cfg.recurrence):
                y = crisscross_core(q, k, y)
            return y
        return run
    if model == "dense":
        qn, kn, vn = q.reshape(n, -1), k.reshape(n, -1), v.reshape(n, -1)
        return lambda: dense_attention_core(qn, kn, vn)
    raise ValueError(f"unknown model {model!r}")


def _report_for(model: str, n: int, c: int, cfg: BenchConfig) -> tuple[BenchRow, int]:
    side = int(round(math.sqrt(n)))
    if model == "lga":
        r = count_lga(LgaCostConfig(c, c, cfg.layers, 1, side, side, reduce=False, exact_edges=True))
        return BenchRow(model, n, c, c, 1, cfg.layers, r.params_total, r.flops_channel_resize,
                        r.flops_info_prop, r.flops_other_conv, 0), r.flops_info_prop
    if model == "ccnet":
        r = count_ccnet(CcnetCostConfig(c, c, 1, cfg.qk_channels, c, cfg.recurrence, side, side))
        return BenchRow(model, n, c, 0, 1, cfg.recurrence, r.params_total, r.flops_channel_resize,
                        r.flops_info_prop, r.flops_other_conv, 0), r.flops_info_prop
    r = count_dense(DenseCostConfig(c, cfg.qk_channels, c, n))
    return BenchRow(model, n, c, 0, 1, 1, r.params_total, r.flops_channel_resize, r.flops_info_prop,
                    r.flops_other_conv, 0), r.flops_info_prop


def run_benchmark(cfg: BenchConfig | None = None, analytic: bool = False):
    """Time the attention kernel of each model over ``cfg.ns``.

    Returns ``(rows, fits)`` where ``fits`` maps model -> ScalingFit of wall time
    (or of the analytic attention FLOPs when ``analytic`` is set).
    Runs single-threaded.
    """
    cfg = cfg or BenchConfig()
    rng = np.random.default_rng(cfg.seed)
    rows: list[BenchRow] = []
    fits: dict[str, ScalingFit] = {}
    with threadpool_limits(limits=1):
        for model in cfg.models:
            c = cfg.channels[model]
            samples = []
            for n in cfg.ns:
                row, attn = _report_for(model, n, c, cfg)
                if not analytic:
                    row.wall_ns_median = _median_ns(_attention_kernel(model, n, c, cfg, rng),
                                                    cfg.repeats, cfg.warmup)
                rows.append(row)
                samples.append((n, row.wall_ns_median if not analytic else None))
            if analytic:
                costs = analytic_attention_costs(model, cfg.ns, c, cfg.layers, cfg.recurrence, cfg.qk_channels)
                fits[model] = fit_scaling_exponent(zip(cfg.ns, costs))
            else:
                fits[model] = fit_scaling_exponent(samples)
    return rows, fits


def write_bench_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=BENCH_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow(asdict(r))

