"""Tiny encoder -> LGA -> decoder segmentation net with manual gradients.

Encoder: two 2x2 stride-2 convolutions (space-to-depth + linear map, ReLU).
Decoder: two 2x2 stride-2 transposed convolutions (linear map + depth-to-space).
Neither mixes information across latent cells, so any context beyond a 4x4
pixel block has to come from the LGA module.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..graph import DEFAULT_EPS
from ..module import LgaParams, init_params, lga_backward, lga_forward
from ..tensor_core import FeatureMap, GroupedLinear, linear_nodes, linear_nodes_backward, log_softmax
from .data import N_CLASSES


def space_to_depth(x: np.ndarray) -> np.ndarray:
    h, w, c = x.shape
    return x.reshape(h // 2, 2, w // 2, 2, c).transpose(0, 2, 1, 3, 4).reshape(h // 2, w // 2, 4 * c)


def depth_to_space(x: np.ndarray) -> np.ndarray:
    h, w, c4 = x.shape
    c = c4 // 4
    return x.reshape(h, w, 2, 2, c).transpose(0, 2, 1, 3, 4).reshape(2 * h, 2 * w, c)


@dataclass
class ModelConfig:
    width: int = 16          # encoder / LGA channels
    hidden: int = 16         # first encoder / last decoder stage channels
    layers: int = 4          # 0 disables LGA entirely
    groups: int = 1
    n_classes: int = N_CLASSES
    eps: float = DEFAULT_EPS


@dataclass
class ToyModel:
    cfg: ModelConfig
    enc1: GroupedLinear
    enc2: GroupedLinear
    dec1: GroupedLinear
    dec2: GroupedLinear
    lga: LgaParams | None = None

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int = 0) -> "ToyModel":
        # backbone and LGA use separate streams so LGA on/off runs share a backbone init
        rng = np.random.default_rng([seed, 0])
        c, h = cfg.width, cfg.hidden
        enc1 = GroupedLinear.init(12, h, bias=True, rng=rng)
        enc2 = GroupedLinear.init(4 * h, c, bias=True, rng=rng)
        dec_in = 2 * c if cfg.layers > 0 else c
        dec1 = GroupedLinear.init(dec_in, 4 * h, bias=True, rng=rng)
        dec2 = GroupedLinear.init(h, 4 * cfg.n_classes, bias=True, rng=rng, scale=np.sqrt(1.0 / h))
        lga = None
        if cfg.layers > 0:
            lga = init_params(c, c, cfg.layers, cfg.groups, reduce=False, rng=np.random.default_rng([seed, 1]))
        return cls(cfg, enc1, enc2, dec1, dec2, lga)

    def tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for name in ("enc1", "enc2", "dec1", "dec2"):
            layer: GroupedLinear = getattr(self, name)
            out[f"{name}.weight"] = layer.weight
            out[f"{name}.bias"] = layer.bias
        if self.lga is not None:
            out.update({f"lga.{k}": v for k, v in self.lga.tensors().items()})
        return out

    @property
    def n_params(self) -> int:
        return sum(a.size for a in self.tensors().values())


@dataclass
class ForwardCache:
    a1: np.ndarray
    z1: np.ndarray
    a2: np.ndarray
    z2: np.ndarray
    f_in: FeatureMap
    lga_out: object
    f_cat: np.ndarray
    z3: np.ndarray
    h3: np.ndarray
    logits: np.ndarray
    shapes: dict = field(default_factory=dict)


def _lin(x3: np.ndarray, layer: GroupedLinear, category="other") -> np.ndarray:
    h, w, c = x3.shape
    return linear_nodes(x3.reshape(h * w, c), layer, category).reshape(h, w, -1)


def forward(model: ToyModel, image: np.ndarray, keep: bool = True) -> ForwardCache:
    a1 = space_to_depth(image)
    z1 = _lin(a1, model.enc1)
    a2 = space_to_depth(np.maximum(z1, 0.0))
    z2 = _lin(a2, model.enc2)
    f_in = FeatureMap(np.maximum(z2, 0.0))
    lga_out = None
    if model.lga is not None:
        lga_out = lga_forward(f_in, model.lga, model.cfg.eps, keep_intermediates=keep)
        f_cat = lga_out.f_cat.values
    else:
        f_cat = f_in.values
    z3 = _lin(f_cat, model.dec1)
    h3 = np.maximum(depth_to_space(z3), 0.0)
    logits = depth_to_space(_lin(h3, model.dec2))
    return ForwardCache(a1, z1, a2, z2, f_in, lga_out, f_cat, z3, h3, logits)


def predict(model: ToyModel, image: np.ndarray) -> np.ndarray:
    return forward(model, image, keep=False).logits.argmax(axis=2)


def cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean pixel cross-entropy and its gradient w.r.t. the logits."""
    lp = log_softmax(logits, axis=2)
    h, w, _ = logits.shape
    yy, xx = np.mgrid[0:h, 0:w]
    loss = -lp[yy, xx, labels].mean()
    grad = np.exp(lp)
    grad[yy, xx, labels] -= 1.0
    return float(loss), grad / (h * w)


def _lin_back(x3: np.ndarray, layer: GroupedLinear, g3: np.ndarray):
    h, w, c = x3.shape
    gx, gw, gb = linear_nodes_backward(x3.reshape(h * w, c), layer, g3.reshape(h * w, -1))
    return gx.reshape(h, w, c), gw, gb


def backward(model: ToyModel, cache: ForwardCache, grad_logits: np.ndarray,
             grad_f_out: np.ndarray | None = None) -> dict[str, np.ndarray]:
    """Gradients for every tensor in ``model.tensors()``.

    ``grad_f_out`` adds an extra gradient on the LGA output (the contrastive loss).
    """
    grads: dict[str, np.ndarray] = {}
    g_h3, grads["dec2.weight"], grads["dec2.bias"] = _lin_back(cache.h3, model.dec2, space_to_depth(grad_logits))
    g_z3 = space_to_depth(g_h3 * (cache.h3 > 0))
    g_cat, grads["dec1.weight"], grads["dec1.bias"] = _lin_back(cache.f_cat, model.dec1, g_z3)

    if model.lga is not None:
        lg = lga_backward(cache.lga_out, model.lga, grad_f_out=grad_f_out, grad_f_cat=g_cat)
        grads.update({f"lga.{k}": v for k, v in lg.tensors().items()})
        g_fin = lg.f_in.values
    else:
        g_fin = g_cat

    g_z2 = g_fin * (cache.z2 > 0)
    g_a2, grads["enc2.weight"], grads["enc2.bias"] = _lin_back(cache.a2, model.enc2, g_z2)
    g_h1 = depth_to_space(g_a2)
    g_z1 = g_h1 * (cache.z1 > 0)
    _, grads["enc1.weight"], grads["enc1.bias"] = _lin_back(cache.a1, model.enc1, g_z1)
    return grads
