"""Locally connected directed graph over a feature map.

Each node has up to nine outgoing edges (itself plus its 8-neighbourhood).
Edges that would leave the grid are simply not stored, so border nodes have
fewer than nine entries. Edge weights are produced per source node by nine
1x1 kernels, then divided by the source's total outgoing weight plus eps.
"""
from __future__ import annotations

import enum
import functools
import json
from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse as sp

from .tensor_core import FeatureMap, ShapeError, flatten_nodes, record_macs, sigmoid, softplus

DIRECTIONS = ("self", "N", "NE", "E", "SE", "S", "SW", "W", "NW")
OFFSETS = ((0, 0), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1))
DEFAULT_EPS = 1e-6
DENSE_LIMIT = 4096


class EdgeActivation(str, enum.Enum):
    SOFTPLUS = "softplus"
    ABS = "abs"
    SIGMOID = "sigmoid"

    def __call__(self, z: np.ndarray) -> np.ndarray:
        if self is EdgeActivation.SOFTPLUS:
            return softplus(z)
        if self is EdgeActivation.ABS:
            return np.abs(z)
        return sigmoid(z)

    def grad(self, z: np.ndarray) -> np.ndarray:
        if self is EdgeActivation.SOFTPLUS:
            return sigmoid(z)
        if self is EdgeActivation.ABS:
            return np.sign(z)
        s = sigmoid(z)
        return s * (1.0 - s)


@dataclass
class EdgeKernels:
    """Nine C -> 1 kernels stored as the columns of a (C, 9) matrix.

    Column ``d`` is the kernel for direction ``DIRECTIONS[d]``.
    """

    weight: np.ndarray
    bias: np.ndarray | None = None

    def __post_init__(self):
        w = np.asarray(self.weight)
        self.weight = w if w.dtype.kind == "f" else w.astype(np.float64)
        if self.weight.ndim != 2 or self.weight.shape[1] != 9:
            raise ShapeError(f"edge kernels must have shape (C, 9), got {self.weight.shape}")
        if self.bias is not None:
            self.bias = np.asarray(self.bias, dtype=self.weight.dtype)
            if self.bias.shape != (9,):
                raise ShapeError(f"edge bias must have shape (9,), got {self.bias.shape}")

    @classmethod
    def init(cls, channels: int, *, bias: bool = False, rng: np.random.Generator | None = None,
             scale: float | None = None) -> "EdgeKernels":
        rng = rng if rng is not None else np.random.default_rng()
        std = scale if scale is not None else 1.0 / np.sqrt(channels)
        return cls(rng.normal(0.0, std, size=(channels, 9)), np.zeros(9) if bias else None)

    @classmethod
    def zeros(cls, channels: int) -> "EdgeKernels":
        return cls(np.zeros((channels, 9)))

    @property
    def channels(self) -> int:
        return self.weight.shape[0]

    @property
    def n_params(self) -> int:
        return self.weight.size + (0 if self.bias is None else 9)

    def kernel(self, direction: str) -> np.ndarray:
        return self.weight[:, DIRECTIONS.index(direction)]


@functools.lru_cache(maxsize=64)
def edge_structure(height: int, width: int):
    """(src, dst, direction) arrays for every in-grid edge, ordered by source
    node then direction. Cached per grid size; arrays are read-only."""
    if height < 1 or width < 1:
        raise ShapeError(f"grid must be at least 1x1, got {height}x{width}")
    ys, xs = np.divmod(np.arange(height * width), width)
    src, dst, dirs = [], [], []
    for d, (dy, dx) in enumerate(OFFSETS):
        ny, nx = ys + dy, xs + dx
        ok = (ny >= 0) & (ny < height) & (nx >= 0) & (nx < width)
        src.append(np.nonzero(ok)[0])
        dst.append((ny * width + nx)[ok])
        dirs.append(np.full(ok.sum(), d))
    src = np.concatenate(src)
    dst = np.concatenate(dst)
    dirs = np.concatenate(dirs).astype(np.int8)
    order = np.lexsort((dirs, src))
    src, dst, dirs = src[order], dst[order], dirs[order]
    # receiver-major CSR pattern; perm maps CSR slots to edge ids
    pattern = sp.csr_matrix((np.arange(len(src), dtype=np.float64), (dst, src)),
                            shape=(height * width,) * 2)
    perm = pattern.data.astype(np.int64)
    for a in (src, dst, dirs, perm):
        a.setflags(write=False)
    return src, dst, dirs, pattern.indices.copy(), pattern.indptr.copy(), perm


def n_edges(height: int, width: int) -> int:
    """Structural edge count, (3H - 2)(3W - 2)."""
    return (3 * height - 2) * (3 * width - 2)


@dataclass(frozen=True)
class LocalGraph:
    height: int
    width: int
    src: np.ndarray
    dst: np.ndarray
    direction: np.ndarray
    raw: np.ndarray
    norm: np.ndarray | None = None
    eps: float | None = None

    @property
    def n_nodes(self) -> int:
        return self.height * self.width

    @property
    def n_entries(self) -> int:
        return len(self.src)

    @property
    def nbytes(self) -> int:
        arrays = [self.src, self.dst, self.direction, self.raw] + ([self.norm] if self.norm is not None else [])
        return sum(a.nbytes for a in arrays)

    def out_sums(self) -> np.ndarray:
        return np.bincount(self.src, weights=self.raw, minlength=self.n_nodes)

    def operator(self, which: str = "norm") -> sp.csr_matrix:
        """Sparse (N x N) receiver-major matrix R with R[j, i] = weight(i -> j)."""
        weights = self.norm if which == "norm" else self.raw
        if weights is None:
            raise ValueError("graph has not been normalized")
        _, _, _, indices, indptr, perm = edge_structure(self.height, self.width)
        return sp.csr_matrix((weights[perm], indices, indptr), shape=(self.n_nodes,) * 2)

    def to_json(self) -> str:
        norm = self.norm if self.norm is not None else np.full(self.n_entries, np.nan)
        edges = [[int(s), int(d), float(r), None if np.isnan(n) else float(n)]
                 for s, d, r, n in zip(self.src, self.dst, self.raw, norm)]
        return json.dumps({"height": self.height, "width": self.width, "eps": self.eps,
                           "edges": edges})


def edge_logits(nodes: np.ndarray, kernels: EdgeKernels) -> np.ndarray:
    """N x 9 pre-activation edge values. Counted as "other" conv MACs."""
    if nodes.shape[1] != kernels.channels:
        raise ShapeError(f"input has {nodes.shape[1]} channels, edge kernels expect {kernels.channels}")
    z = nodes @ kernels.weight
    if kernels.bias is not None:
        z = z + kernels.bias
    record_macs("other", nodes.shape[0] * kernels.weight.size)
    return z


def compute_edge_maps(f_in: FeatureMap, kernels: EdgeKernels,
                      activation: EdgeActivation | str = EdgeActivation.SOFTPLUS) -> np.ndarray:
    """Activated edge maps, shape (H, W, 9); slice ``[..., d]`` is direction d."""
    act = EdgeActivation(activation)
    z = edge_logits(flatten_nodes(f_in), kernels)
    return act(z).reshape(f_in.height, f_in.width, 9)


def assemble_adjacency(edge_maps: np.ndarray, height: int, width: int) -> LocalGraph:
    edge_maps = np.asarray(edge_maps)
    if edge_maps.shape != (height, width, 9):
        raise ShapeError(f"edge maps shape {edge_maps.shape} != {(height, width, 9)}")
    src, dst, dirs, *_ = edge_structure(height, width)
    raw = edge_maps.reshape(height * width, 9)[src, dirs]
    return LocalGraph(height, width, src, dst, dirs, raw)


def normalize_adjacency(g: LocalGraph, eps: float = DEFAULT_EPS) -> LocalGraph:
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps}")
    denom = g.out_sums() + eps
    return replace(g, norm=g.raw / denom[g.src], eps=eps)


def densify(g: LocalGraph, which: str = "norm") -> np.ndarray:
    """Explicit N x N matrix with M[i, j] = weight of edge i -> j (0 if absent)."""
    n = g.n_nodes
    if n > DENSE_LIMIT:
        raise ValueError(f"refusing to densify a graph with {n} > {DENSE_LIMIT} nodes")
    weights = g.norm if which == "norm" else g.raw
    if weights is None:
        raise ValueError("graph has not been normalized")
    m = np.zeros((n, n), dtype=weights.dtype)
    m[g.src, g.dst] = weights
    return m


def build_graph(f_in: FeatureMap, kernels: EdgeKernels, eps: float = DEFAULT_EPS,
                activation: EdgeActivation | str = EdgeActivation.SOFTPLUS) -> LocalGraph:
    maps = compute_edge_maps(f_in, kernels, activation)
    return normalize_adjacency(assemble_adjacency(maps, f_in.height, f_in.width), eps)


def message_pass(x: np.ndarray, g: LocalGraph) -> np.ndarray:
    """Receiver aggregation: out[j] = sum_i x[i] * norm(i -> j)."""
    if x.ndim != 2 or x.shape[0] != g.n_nodes:
        raise ShapeError(f"node matrix {x.shape} does not match graph with {g.n_nodes} nodes")
    record_macs("info_prop", g.n_entries * x.shape[1])
    return np.asarray(g.operator() @ x)


def message_pass_backward(x: np.ndarray, g: LocalGraph, grad_out: np.ndarray):
    """Returns ``(grad_x, grad_norm)`` for ``sum(grad_out * message_pass(x, g))``."""
    grad_x = np.asarray(g.operator().T @ grad_out)
    grad_norm = np.einsum("ec,ec->e", grad_out[g.dst], x[g.src])
    return grad_x, grad_norm


def normalize_backward(g: LocalGraph, grad_norm: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. raw weights given the gradient w.r.t. normalized ones."""
    denom = g.out_sums() + g.eps
    coupled = np.bincount(g.src, weights=grad_norm * g.raw, minlength=g.n_nodes) / denom ** 2
    return grad_norm / denom[g.src] - coupled[g.src]
