"""Command-line entry point: ``lga <command> [--config FILE] [key=value ...]``.

Configuration is resolved as defaults < config file < key=value overrides
< ``LGA_SEED`` environment variable < ``--seed``. Unknown keys are rejected.
Every command writes ``resolved_config.txt`` (same key=value format, so it can
be fed back with ``--config``) next to its outputs in ``--out-dir``.

Exit codes: 0 success, 1 check failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .cost import (PAPER_PRESETS, BenchConfig, CcnetCostConfig, DenseCostConfig, LgaCostConfig, count_ccnet,
                   count_dense, count_lga, count_preset, run_benchmark, write_bench_csv)
from .gradcheck import GradcheckConfig, format_report, run_gradcheck
from .graph import DEFAULT_EPS, EdgeActivation, EdgeKernels, build_graph
from .tensor_core import FeatureMap, load_feature_map
from .toy.train import ABLATION_AXES, TrainConfig, TrainingDiverged, ablate, run, write_history

log = logging.getLogger("lga")

EXIT_OK, EXIT_CHECK, EXIT_USAGE = 0, 1, 2


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# key=value configuration
# ---------------------------------------------------------------------------


def parse_pairs(lines, source: str) -> dict[str, str]:
    """``key=value`` lines; blank lines and ``#`` comments are skipped."""
    out = {}
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        out[key] = value
    return out


def _convert(key: str, text: str, default):
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            elem = type(default[0]) if default else str
            return tuple(elem(s.strip()) for s in text.split(",") if s.strip())
        if default is None:
            return text or None
        return text
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None


def resolve(defaults: dict, pairs: dict[str, str]) -> dict:
    unknown = sorted(set(pairs) - set(defaults))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}; valid keys: {', '.join(sorted(defaults))}")
    out = dict(defaults)
    for k, v in pairs.items():
        out[k] = _convert(k, v, defaults[k])
    return out


def format_config(cfg: dict, command: str) -> str:
    def fmt(v):
        if isinstance(v, tuple):
            return ",".join(str(x) for x in v)
        return "" if v is None else str(v)
    return f"# lga {command}\n" + "".join(f"{k}={fmt(v)}\n" for k, v in sorted(cfg.items()))


# ---------------------------------------------------------------------------
# Per-command defaults
# ---------------------------------------------------------------------------


def _fields(cls) -> dict:
    return {f.name: getattr(cls(), f.name) for f in dataclasses.fields(cls)}


def _defaults(command: str) -> dict:
    if command == "dump-graph":
        return {"height": 4, "width": 4, "channels": 8, "eps": DEFAULT_EPS, "activation": "softplus",
                "bias": False, "input": None, "seed": 0}
    if command == "gradcheck":
        return {**_fields(GradcheckConfig), "instances": 3}
    if command == "bench":
        b = BenchConfig()
        return {"ns": b.ns, "models": b.models, "lga_channels": b.channels["lga"],
                "ccnet_channels": b.channels["ccnet"], "dense_channels": b.channels["dense"],
                "qk_channels": b.qk_channels, "layers": b.layers, "recurrence": b.recurrence,
                "repeats": b.repeats, "warmup": b.warmup, "dtype": b.dtype, "analytic": False, "seed": b.seed}
    if command == "train":
        return _fields(TrainConfig)
    if command == "ablate":
        return {**_fields(TrainConfig), "axis": "layers", "values": "0,1,2,4"}
    raise ConfigError(f"unknown command {command!r}")


_COST_MODELS = {"lga": (LgaCostConfig, count_lga), "ccnet": (CcnetCostConfig, count_ccnet),
                "dense": (DenseCostConfig, count_dense)}


def _cost_defaults(pairs: dict[str, str], preset: str | None) -> dict:
    """Keys of the selected cost model only; a preset admits no further keys."""
    if preset is not None:
        kind = "lga" if isinstance(PAPER_PRESETS[preset], LgaCostConfig) else "ccnet"
        return {"model": kind}
    model = pairs.get("model", "lga")
    if model not in _COST_MODELS:
        raise ConfigError(f"model must be one of {sorted(_COST_MODELS)}, got {model!r}")
    return {"model": model, **_fields(_COST_MODELS[model][0])}


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_dump_graph(cfg: dict, out_dir: Path) -> int:
    rng = np.random.default_rng(cfg["seed"])
    if cfg["input"]:
        f_in = load_feature_map(cfg["input"])
    else:
        f_in = FeatureMap(rng.normal(size=(cfg["height"], cfg["width"], cfg["channels"])))
    kernels = EdgeKernels.init(f_in.channels, bias=cfg["bias"], rng=rng)
    g = build_graph(f_in, kernels, cfg["eps"], EdgeActivation(cfg["activation"]))
    path = out_dir / "graph.json"
    path.write_text(g.to_json())
    print(f"{g.n_nodes} nodes, {g.n_entries} edges -> {path}")
    return EXIT_OK


def cmd_gradcheck(cfg: dict, out_dir: Path) -> int:
    instances = cfg.pop("instances")
    rows = run_gradcheck(GradcheckConfig(**cfg), instances)
    print(format_report(rows))
    with open(out_dir / "gradcheck.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["tensor", "size", "max_rel_error", "threshold", "passed"])
        for r in rows:
            w.writerow([r.tensor, r.size, f"{r.max_rel_error:.6e}", r.threshold, int(r.passed)])
    failed = [r.tensor for r in rows if not r.passed]
    if failed:
        print(f"FAILED: {', '.join(failed)}")
        return EXIT_CHECK
    print("all gradient checks passed")
    return EXIT_OK


def cmd_cost(cfg: dict, out_dir: Path, preset: str | None) -> int:
    if preset is not None:
        report = count_preset(preset)
    else:
        cls, counter = _COST_MODELS[cfg["model"]]
        report = counter(cls(**{k: v for k, v in cfg.items() if k != "model"}))
    print(report.format())
    row = {"model": report.model, "n_nodes": report.n_nodes,
           "params_resize": report.params_channel_resize, "params_attention": report.params_attention,
           "params_total": report.params_total, "flops_resize": report.flops_channel_resize,
           "flops_info_prop": report.flops_info_prop, "flops_other": report.flops_other_conv,
           "flops_total": report.flops_total, **report.table_row()}
    with open(out_dir / "cost.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(row))
        w.writeheader()
        w.writerow(row)
    return EXIT_OK


def cmd_bench(cfg: dict, out_dir: Path) -> int:
    unknown = set(cfg["models"]) - {"lga", "ccnet", "dense"}
    if unknown:
        raise ConfigError(f"unknown bench model(s): {', '.join(sorted(unknown))}")
    bc = BenchConfig(ns=cfg["ns"], models=cfg["models"],
                     channels={m: cfg[f"{m}_channels"] for m in ("lga", "ccnet", "dense")},
                     qk_channels=cfg["qk_channels"], layers=cfg["layers"], recurrence=cfg["recurrence"],
                     repeats=cfg["repeats"], warmup=cfg["warmup"], dtype=cfg["dtype"], seed=cfg["seed"])
    rows, fits = run_benchmark(bc, analytic=cfg["analytic"])
    write_bench_csv(rows, out_dir / "bench.csv")
    summary = {m: {"exponent": f.exponent, "intercept": f.intercept, "residual": f.residual,
                   "basis": "analytic_macs" if cfg["analytic"] else "wall_ns"} for m, f in fits.items()}
    (out_dir / "exponents.json").write_text(json.dumps(summary, indent=2))
    for m, f in fits.items():
        print(f"{m:<6} exponent {f.exponent:.3f}")
    return EXIT_OK


def _train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(**{k: cfg[k] for k in _fields(TrainConfig)})


def cmd_train(cfg: dict, out_dir: Path) -> int:
    tc = _train_config(cfg)
    try:
        history = run(tc, out_dir=out_dir / "checkpoints")
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_CHECK
    write_history(history, out_dir / "history.csv")
    last = history[-1] if history else {}
    print(f"final mIoU {last.get('miou', float('nan')):.4f}  pixel acc {last.get('pixel_acc', float('nan')):.4f}")
    return EXIT_OK


def cmd_ablate(cfg: dict, out_dir: Path) -> int:
    axis = cfg["axis"]
    if axis not in ABLATION_AXES:
        raise ConfigError(f"axis must be one of {ABLATION_AXES}, got {axis!r}")
    values = [v.strip() for v in cfg["values"].split(",") if v.strip()]
    if axis in ("layers", "groups"):
        try:
            values = [int(v) for v in values]
        except ValueError:
            raise ConfigError(f"values for {axis} must be integers: {cfg['values']!r}") from None
    rows = ablate(axis, values, _train_config(cfg), out_dir / f"ablation_{axis}.csv")
    for v, m in rows:
        print(f"{axis}={v}  mIoU {m:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="plain-text key=value config file")
    common.add_argument("--out-dir", type=Path, default=Path("lga_out"), help="output directory")
    common.add_argument("--seed", type=int, help="seed override (takes precedence over LGA_SEED)")
    common.add_argument("-v", "--verbose", action="count", default=0)
    common.add_argument("overrides", nargs="*", metavar="key=value", help="config overrides")

    parser = argparse.ArgumentParser(prog="lga", description="Latent graph attention toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("dump-graph", parents=[common], help="build a graph on a feature map and dump it as JSON")
    sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    cost = sub.add_parser("cost", parents=[common], help="parameter and FLOP counts")
    cost.add_argument("--paper-config", choices=sorted(PAPER_PRESETS), help="reference preset")
    sub.add_parser("bench", parents=[common], help="scaling benchmark and exponent fit")
    sub.add_parser("train", parents=[common], help="train the toy segmentation model")
    sub.add_parser("ablate", parents=[common], help="one toy run per value along an axis")
    return parser


def _resolve_for(args) -> dict:
    pairs: dict[str, str] = {}
    if args.config is not None:
        try:
            text = args.config.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        pairs.update(parse_pairs(text.splitlines(), str(args.config)))
    pairs.update(parse_pairs(args.overrides, "command line"))
    if args.command == "cost":
        defaults = _cost_defaults(pairs, args.paper_config)
    else:
        defaults = _defaults(args.command)
    cfg = resolve(defaults, pairs)
    if "seed" in cfg:
        env = os.environ.get("LGA_SEED")
        if env is not None:
            cfg["seed"] = _convert("LGA_SEED", env, 0)
        if args.seed is not None:
            cfg["seed"] = args.seed
    elif args.seed is not None:
        raise ConfigError(f"command {args.command} takes no seed")
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    try:
        cfg = _resolve_for(args)
        out_dir: Path = args.out_dir
        out_dir.mkdir(parents=True, exist_ok=True)
        snapshot = dict(cfg)
        if args.command == "cost" and args.paper_config:
            snapshot.update(dataclasses.asdict(PAPER_PRESETS[args.paper_config]))
        (out_dir / "resolved_config.txt").write_text(format_config(snapshot, args.command))
        if args.command == "dump-graph":
            return cmd_dump_graph(cfg, out_dir)
        if args.command == "gradcheck":
            return cmd_gradcheck(cfg, out_dir)
        if args.command == "cost":
            return cmd_cost(cfg, out_dir, args.paper_config)
        if args.command == "bench":
            return cmd_bench(cfg, out_dir)
        if args.command == "train":
            return cmd_train(cfg, out_dir)
        return cmd_ablate(cfg, out_dir)
    except (ConfigError, ValueError, KeyError) as exc:
        print(f"lga {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"lga {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
