"""Contrastive loss on LGA node pairs and the ground-truth patch similarity it uses.

For a pair (i, j) with input divergence U and output divergence V the loss is

    C * log(V^2 / U + 1) + (1 - C) * log(U / V^2 + 1)

where C = 1 when the two nodes' ground-truth patches are similar. U comes from
the LGA input and is treated as a constant.
"""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass

import numpy as np

from .tensor_core import FeatureMap, ShapeError, flatten_nodes, log_softmax, softmax

DEFAULT_DELTA = 1e-8
DEFAULT_TAU = 0.8
SSIM_K1 = 0.01
SSIM_K2 = 0.03


class Divergence(str, enum.Enum):
    MSE = "mse"
    KL = "kl"


class SimilarityMode(str, enum.Enum):
    CLASS_MAJORITY = "class_majority"
    SSIM_THRESHOLD = "ssim_threshold"


# ---------------------------------------------------------------------------
# Divergences
# ---------------------------------------------------------------------------


def node_divergence(a, b, kind: Divergence | str = Divergence.MSE) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeError(f"divergence needs two equal-length vectors, got {a.shape} and {b.shape}")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("divergence inputs must be finite")
    return float(pair_divergences(a[None], b[None], kind)[0])


def pair_divergences(a: np.ndarray, b: np.ndarray, kind: Divergence | str = Divergence.MSE) -> np.ndarray:
    """Row-wise divergence between two (P, C) stacks of node vectors."""
    kind = Divergence(kind)
    if kind is Divergence.MSE:
        return np.mean((a - b) ** 2, axis=1)
    lp, lq = log_softmax(a), log_softmax(b)
    return np.maximum(np.sum(np.exp(lp) * (lp - lq), axis=1), 0.0)


def pair_divergences_backward(a: np.ndarray, b: np.ndarray, grad: np.ndarray,
                              kind: Divergence | str = Divergence.MSE):
    """Gradients of ``sum(grad * pair_divergences(a, b))`` w.r.t. a and b."""
    kind = Divergence(kind)
    if kind is Divergence.MSE:
        ga = (2.0 / a.shape[1]) * (a - b) * grad[:, None]
        return ga, -ga
    p, q = softmax(a), softmax(b)
    r = np.log(p) - np.log(q)
    ga = p * (r - np.sum(p * r, axis=1, keepdims=True))
    gb = q - p
    return ga * grad[:, None], gb * grad[:, None]


# ---------------------------------------------------------------------------
# SSIM
# ---------------------------------------------------------------------------


def ssim(patch_a, patch_b, data_range: float = 1.0) -> float:
    """Single-window SSIM over the whole patch (values assumed in [0, data_range])."""
    a = np.asarray(patch_a, dtype=np.float64)
    b = np.asarray(patch_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"SSIM patches differ in shape: {a.shape} vs {b.shape}")
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a, mu_b = a.mean(), b.mean()
    var_a = ((a - mu_a) ** 2).mean()
    var_b = ((b - mu_b) ** 2).mean()
    cov = ((a - mu_a) * (b - mu_b)).mean()
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(num / den)


# ---------------------------------------------------------------------------
# Patch similarity
# ---------------------------------------------------------------------------


@dataclass
class PatchSimilarity:
    height: int
    width: int
    mode: SimilarityMode
    labels: np.ndarray | None = None
    patches: np.ndarray | None = None
    tau: float = DEFAULT_TAU

    @property
    def n_nodes(self) -> int:
        return self.height * self.width

    def similar(self, i: int, j: int) -> int:
        return int(self.pair_labels(np.array([[i, j]]))[0])

    def pair_labels(self, pairs: np.ndarray) -> np.ndarray:
        pairs = np.asarray(pairs).reshape(-1, 2)
        if self.mode is SimilarityMode.CLASS_MAJORITY:
            return (self.labels[pairs[:, 0]] == self.labels[pairs[:, 1]]).astype(np.int8)
        out = np.empty(len(pairs), dtype=np.int8)
        for k, (i, j) in enumerate(pairs):
            out[k] = 1 if i == j else int(ssim(self.patches[i], self.patches[j]) > self.tau)
        return out

    def matrix(self) -> np.ndarray:
        n = self.n_nodes
        if n > 1024:
            raise ValueError(f"pairwise matrix only materialized for <= 1024 nodes, got {n}")
        ii, jj = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        return self.pair_labels(np.stack([ii.ravel(), jj.ravel()], axis=1)).reshape(n, n)

    def to_json(self, pairwise: bool = False) -> str:
        obj = {"height": self.height, "width": self.width, "mode": self.mode.value, "tau": self.tau}
        if self.labels is not None:
            obj["labels"] = self.labels.tolist()
        if pairwise:
            obj["pairwise"] = self.matrix().tolist()
        return json.dumps(obj)


def majority_label(patch: np.ndarray) -> int:
    """Most frequent label; ties go to the smallest class id."""
    values, counts = np.unique(patch, return_counts=True)
    return int(values[np.argmax(counts)])


def build_similarity(gt, height: int, width: int, mode: SimilarityMode | str = SimilarityMode.CLASS_MAJORITY,
                     tau: float = DEFAULT_TAU) -> PatchSimilarity:
    """Split ``gt`` into ``height x width`` equal patches, one per node.

    Class mode expects an integer label map (Hg, Wg); SSIM mode an image with
    values in [0, 1], shape (Hg, Wg) or (Hg, Wg, channels).
    """
    mode = SimilarityMode(mode)
    gt = np.asarray(gt)
    hg, wg = gt.shape[:2]
    if hg % height or wg % width:
        raise ShapeError(f"ground truth {hg}x{wg} does not split into {height}x{width} equal patches")
    ph, pw = hg // height, wg // width
    blocks = gt.reshape(height, ph, width, pw, *gt.shape[2:]).swapaxes(1, 2)
    blocks = blocks.reshape(height * width, ph, pw, *gt.shape[2:])
    if mode is SimilarityMode.CLASS_MAJORITY:
        n_classes = int(gt.max()) + 1 if gt.size else 1
        flat = blocks.reshape(len(blocks), -1).astype(np.int64)
        counts = np.zeros((len(blocks), n_classes), dtype=np.int64)
        np.add.at(counts, (np.repeat(np.arange(len(blocks)), flat.shape[1]), flat.ravel()), 1)
        # argmax returns the first maximum, i.e. the smallest class id on ties
        return PatchSimilarity(height, width, mode, labels=counts.argmax(axis=1))
    return PatchSimilarity(height, width, mode, patches=blocks.astype(np.float64), tau=tau)


# ---------------------------------------------------------------------------
# Pair sampling
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PairBatch:
    pairs: np.ndarray
    seed: int

    def __len__(self) -> int:
        return len(self.pairs)


def sample_pairs(sim: PatchSimilarity, k: int = 256, seed: int = 0, min_fraction: float = 0.25) -> PairBatch:
    """Draw up to ``k`` distinct unordered node pairs (i < j).

    When both similar and dissimilar pairs exist, each kind fills at least
    ``min_fraction`` of the batch (or all of that kind, if fewer exist).
    """
    n = sim.n_nodes
    if n < 2:
        raise ValueError("need at least two nodes to form pairs")
    rng = np.random.default_rng(seed)
    total = n * (n - 1) // 2
    k = min(k, total)
    if total <= 500_000:
        ii, jj = np.triu_indices(n, 1)
        universe = np.stack([ii, jj], axis=1)
    else:
        universe = _draw_distinct(rng, n, min(total, 8 * k))
    c = sim.pair_labels(universe).astype(bool)
    pos, neg = np.nonzero(c)[0], np.nonzero(~c)[0]
    if len(pos) == 0 or len(neg) == 0:
        chosen = rng.choice(len(universe), size=k, replace=False)
    else:
        quota = math.ceil(min_fraction * k)
        n_pos = min(len(pos), quota)
        n_neg = min(len(neg), quota)
        first = np.concatenate([rng.choice(pos, n_pos, replace=False), rng.choice(neg, n_neg, replace=False)])
        rest = np.setdiff1d(np.arange(len(universe)), first)
        fill = rng.choice(rest, size=min(k - len(first), len(rest)), replace=False)
        chosen = np.concatenate([first, fill])
    chosen = np.sort(chosen)
    return PairBatch(universe[chosen], seed)


def _draw_distinct(rng: np.random.Generator, n: int, count: int) -> np.ndarray:
    seen: set[tuple[int, int]] = set()
    while len(seen) < count:
        ij = rng.integers(0, n, size=(2 * count, 2))
        for i, j in ij:
            if i != j:
                seen.add((min(i, j), max(i, j)))
                if len(seen) == count:
                    break
    return np.array(sorted(seen), dtype=np.int64)


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


def pair_loss(u, v, c, delta: float = DEFAULT_DELTA) -> np.ndarray:
    """Per-pair loss value. ``delta`` is a floor on the denominators U and V^2;
    it leaves the value untouched whenever both exceed it."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    v2 = v * v
    similar = np.log1p(v2 / np.maximum(u, delta))
    different = np.log1p(u / np.maximum(v2, delta))
    return c * similar + (1.0 - c) * different


def pair_loss_grad_v(u, v, c, delta: float = DEFAULT_DELTA) -> np.ndarray:
    """d pair_loss / d V."""
    u, v, c = (np.array(a, dtype=np.float64) for a in np.broadcast_arrays(u, v, c))
    v2 = v * v
    us = np.maximum(u, delta)
    g_sim = 2.0 * v / (us + v2)
    # below the floor the dissimilar term is constant in V
    live = v2 > delta
    g_diff = np.zeros_like(v2)
    g_diff[live] = -2.0 * u[live] / (v[live] * (v2[live] + u[live]))
    return c * g_sim + (1.0 - c) * g_diff


def lga_contrastive_loss(f_in: FeatureMap, f_out: FeatureMap, sim: PatchSimilarity, pairs: PairBatch,
                         kind: Divergence | str = Divergence.MSE, delta: float = DEFAULT_DELTA):
    """Mean pair loss and its gradient w.r.t. ``f_out`` (same shape as f_out).

    No gradient is returned for ``f_in``: U is a constant reference.
    """
    if f_in.shape[:2] != f_out.shape[:2]:
        raise ShapeError(f"f_in {f_in.shape} and f_out {f_out.shape} must share the node grid")
    if (sim.height, sim.width) != f_out.shape[:2]:
        raise ShapeError(f"similarity grid {sim.height}x{sim.width} does not match feature map {f_out.shape}")
    if len(pairs) == 0:
        raise ValueError("empty pair batch")
    ij = pairs.pairs
    xin, xout = flatten_nodes(f_in), flatten_nodes(f_out)
    u = pair_divergences(xin[ij[:, 0]], xin[ij[:, 1]], kind)
    a, b = xout[ij[:, 0]], xout[ij[:, 1]]
    v = pair_divergences(a, b, kind)
    c = sim.pair_labels(ij)
    terms = pair_loss(u, v, c, delta)
    loss = float(terms.mean())
    if not np.isfinite(loss):
        raise FloatingPointError("non-finite contrastive loss")
    gv = pair_loss_grad_v(u, v, c, delta) / len(ij)
    ga, gb = pair_divergences_backward(a, b, gv, kind)
    grad = np.zeros_like(xout, dtype=np.float64)
    np.add.at(grad, ij[:, 0], ga)
    np.add.at(grad, ij[:, 1], gb)
    return loss, FeatureMap.from_nodes(grad, f_out.height, f_out.width)
