"""Central finite-difference checks for the LGA module and the contrastive loss.

The module objective is a fixed random projection of both outputs,
``J = <R_out, F_out> + <R_cat, F_cat>``, so every tensor receives gradient
through every path. The contrastive loss is checked separately with respect
to F_out, since U is a constant of F_in by design.

Relative error per tensor is normwise: ``max|g - g_fd| / max(|g|_inf, |g_fd|_inf)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .loss import Divergence, build_similarity, lga_contrastive_loss, sample_pairs
from .module import init_params, lga_backward, lga_forward
from .tensor_core import FeatureMap

DEFAULT_THRESHOLD = 1e-4


@dataclass(frozen=True)
class GradcheckConfig:
    height: int = 5
    width: int = 4
    in_channels: int = 8
    channels: int = 4
    layers: int = 3
    groups: int = 2
    reduce: bool = True
    bias: bool = True
    divergence: str = "mse"
    pairs: int = 24
    n_classes: int = 3
    step: float = 1e-6
    threshold: float = DEFAULT_THRESHOLD
    seed: int = 0


@dataclass(frozen=True)
class GradcheckRow:
    tensor: str
    size: int
    max_rel_error: float
    threshold: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.threshold


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)


def _numeric(f, arr: np.ndarray, h: float) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``arr``, perturbed in place."""
    out = np.zeros_like(arr)
    flat, gflat = arr.reshape(-1), out.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        fp = f()
        flat[k] = orig - h
        fm = f()
        flat[k] = orig
        gflat[k] = (fp - fm) / (2.0 * h)
    return out


def check_instance(cfg: GradcheckConfig) -> list[GradcheckRow]:
    """One random instance: a row per LGA parameter tensor, F_in, and the loss."""
    rng = np.random.default_rng(cfg.seed)
    h, w = cfg.height, cfg.width
    channels = cfg.channels if cfg.reduce else cfg.in_channels
    p = init_params(cfg.in_channels, channels, cfg.layers, cfg.groups, reduce=cfg.reduce, bias=cfg.bias, rng=rng)
    # biases start at zero; a dead group then sits exactly on the ReLU kink
    for name, arr in p.tensors().items():
        if name.endswith(".bias"):
            arr[...] = rng.normal(scale=0.5, size=arr.shape)
    x = rng.normal(size=(h, w, cfg.in_channels))
    r_out = rng.normal(size=(h, w, channels))
    r_cat = rng.normal(size=(h, w, cfg.in_channels + channels))

    def objective() -> float:
        o = lga_forward(FeatureMap(x), p, keep_intermediates=False)
        return float(np.sum(r_out * o.f_out.values) + np.sum(r_cat * o.f_cat.values))

    out = lga_forward(FeatureMap(x), p)
    grads = lga_backward(out, p, grad_f_out=r_out, grad_f_cat=r_cat)
    rows = []
    analytic = dict(grads.tensors())
    analytic["f_in"] = grads.f_in.values
    targets = dict(p.tensors())
    targets["f_in"] = x
    for name, arr in targets.items():
        num = _numeric(objective, arr, cfg.step)
        rows.append(GradcheckRow(name, arr.size, relative_error(analytic[name], num), cfg.threshold))

    labels = rng.integers(0, cfg.n_classes, size=(h, w))
    sim = build_similarity(labels, h, w)
    pairs = sample_pairs(sim, cfg.pairs, seed=cfg.seed)
    f_in = FeatureMap(x)
    y =out.f_out.values.copy() + rng.normal(scale=0.1, size=(h, w, channels))
    kind = Divergence(cfg.divergence)

    def loss() -> float:
        return lga_contrastive_loss(f_in, FeatureMap(y), sim, pairs, kind)[0]

    _, g = lga_contrastive_loss(f_in, FeatureMap(y), sim, pairs, kind)
    num = _numeric(loss, y, cfg.step)
    rows.append(GradcheckRow(f"contrastive[{kind.value}].f_out", y.size,
                             relative_error(g.values, num), cfg.threshold))
    return rows


def run_gradcheck(cfg: GradcheckConfig, instances: int = 1) -> list[GradcheckRow]:
    """Worst row per tensor name over ``instances`` seeds starting at ``cfg.seed``."""
    worst: dict[str, GradcheckRow] = {}
    for i in range(instances):
        sub = GradcheckConfig(**{**cfg.__dict__, "seed": cfg.seed + i})
        for row in check_instance(sub):
            if row.tensor not in worst or row.max_rel_error > worst[row.tensor].max_rel_error:
                worst[row.tensor] = row
    return list(worst.values())


def format_report(rows: list[GradcheckRow]) -> str:
    lines = [f"{'tensor':<28}{'size':>8}{'max_rel_err':>14}  status"]
    for r in rows:
        lines.append(f"{r.tensor:<28}{r.size:>8}{r.max_rel_error:>14.3e}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
