"""Dense feature-map substrate: storage, grouped 1x1 convolution, serialization.

Node ordering is row-major everywhere: node ``n`` sits at ``(n // W, n % W)``.
"""
from __future__ import annotations

import contextlib
import contextvars
import json
import struct
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"LGAF"
_HEADER = struct.Struct("<4sIIIB")
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class ShapeError(ValueError):
    pass


# ---------------------------------------------------------------------------
# MAC instrumentation
# ---------------------------------------------------------------------------

_counter: contextvars.ContextVar[Counter | None] = contextvars.ContextVar("lga_mac_counter", default=None)


@contextlib.contextmanager
def count_macs():
    """Collect multiply-accumulate counts from every kernel run inside the block.

    Yields a ``Counter`` keyed by cost category ("resize", "info_prop", "other").
    Context-local, so concurrent threads each see their own counter.
    """
    counter: Counter = Counter()
    token = _counter.set(counter)
    try:
        yield counter
    finally:
        _counter.reset(token)


def record_macs(category: str, n: int) -> None:
    counter = _counter.get()
    if counter is not None:
        counter[category] += int(n)


# ---------------------------------------------------------------------------
# FeatureMap
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FeatureMap:
    """H x W x C latent tensor; each spatial cell is a graph node."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 3:
            raise ShapeError(f"FeatureMap needs a 3-d (H, W, C) array, got shape {v.shape}")
        if v.dtype not in _DTYPE_CODES:
            v = v.astype(np.float64)
        object.__setattr__(self, "values", v)

    @classmethod
    def from_nodes(cls, nodes: np.ndarray, height: int, width: int) -> "FeatureMap":
        nodes = np.asarray(nodes)
        if nodes.ndim != 2 or nodes.shape[0] != height * width:
            raise ShapeError(f"cannot view node matrix {nodes.shape} as {height}x{width} grid")
        return cls(nodes.reshape(height, width, nodes.shape[1]))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]

    @property
    def n_nodes(self) -> int:
        return self.height * self.width

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape

    def nodes(self) -> np.ndarray:
        return flatten_nodes(self)

    def astype(self, dtype) -> "FeatureMap":
        return FeatureMap(self.values.astype(dtype))


def flatten_nodes(x: FeatureMap) -> np.ndarray:
    """N x C view of a feature map, rows in row-major node order."""
    return x.values.reshape(x.n_nodes, x.channels)


def unflatten_nodes(nodes: np.ndarray, height: int, width: int) -> FeatureMap:
    return FeatureMap.from_nodes(nodes, height, width)


def concat_channels(a: FeatureMap, b: FeatureMap) -> FeatureMap:
    if a.shape[:2] != b.shape[:2]:
        raise ShapeError(f"spatial mismatch for concat: {a.shape} vs {b.shape}")
    return FeatureMap(np.concatenate([a.values, b.values], axis=2))


# ---------------------------------------------------------------------------
# Grouped 1x1 convolution
# ---------------------------------------------------------------------------


@dataclass
class GroupedLinear:
    """Grouped per-node linear map (a 1x1 convolution with ``groups`` groups).

    ``weight`` has shape ``(groups, in_channels // groups, out_channels // groups)``.
    """

    weight: np.ndarray
    bias: np.ndarray | None = None

    def __post_init__(self):
        w = np.asarray(self.weight)
        self.weight = w if w.dtype in _DTYPE_CODES else w.astype(np.float64)
        if self.weight.ndim != 3:
            raise ShapeError(f"grouped weight must be 3-d (G, Cin/G, Cout/G), got {self.weight.shape}")
        if self.bias is not None:
            self.bias = np.asarray(self.bias, dtype=self.weight.dtype)
            if self.bias.shape != (self.out_channels,):
                raise ShapeError(f"bias shape {self.bias.shape} != ({self.out_channels},)")

    @classmethod
    def init(cls, in_channels: int, out_channels: int, groups: int = 1, *, bias: bool = False,
             rng: np.random.Generator | None = None, scale: float | None = None) -> "GroupedLinear":
        if groups < 1 or in_channels % groups or out_channels % groups:
            raise ShapeError(f"groups={groups} must divide in={in_channels} and out={out_channels}")
        rng = rng if rng is not None else np.random.default_rng()
        cin_g = in_channels // groups
        std = scale if scale is not None else np.sqrt(2.0 / cin_g)
        w = rng.normal(0.0, std, size=(groups, cin_g, out_channels // groups))
        b = np.zeros(out_channels) if bias else None
        return cls(w, b)

    @classmethod
    def from_dense(cls, matrix: np.ndarray, bias=None) -> "GroupedLinear":
        matrix = np.asarray(matrix, dtype=np.float64)
        return cls(matrix[None], None if bias is None else np.asarray(bias, dtype=np.float64))

    @property
    def groups(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[0] * self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0] * self.weight.shape[2]

    @property
    def n_params(self) -> int:
        return self.weight.size + (0 if self.bias is None else self.bias.size)

    def dense(self) -> np.ndarray:
        """Equivalent block-diagonal (C_in x C_out) matrix."""
        g, ci, co = self.weight.shape
        out = np.zeros((g * ci, g * co), dtype=self.weight.dtype)
        for k in range(g):
            out[k * ci:(k + 1) * ci, k * co:(k + 1) * co] = self.weight[k]
        return out


def linear_nodes(x: np.ndarray, w: GroupedLinear, category: str = "other") -> np.ndarray:
    """Apply a grouped linear map to an N x C_in node matrix."""
    if x.ndim != 2 or x.shape[1] != w.in_channels:
        raise ShapeError(f"node matrix {x.shape} does not match layer in_channels={w.in_channels}")
    g, ci, co = w.weight.shape
    n = x.shape[0]
    if g == 1:
        y = x @ w.weight[0]
    else:
        y = np.einsum("ngi,gio->ngo", x.reshape(n, g, ci), w.weight).reshape(n, g * co)
    if w.bias is not None:
        y = y + w.bias
    record_macs(category, n * g * ci * co)
    return y


def linear_nodes_backward(x: np.ndarray, w: GroupedLinear, grad_out: np.ndarray):
    """Gradients of ``sum(grad_out * linear_nodes(x, w))``.

    Returns ``(grad_x, grad_weight, grad_bias)``; ``grad_bias`` is None when the
    layer has no bias.
    """
    g, ci, co = w.weight.shape
    n = x.shape[0]
    if grad_out.shape != (n, g * co):
        raise ShapeError(f"grad_out shape {grad_out.shape} != {(n, g * co)}")
    if x.shape != (n, g * ci):
        raise ShapeError(f"input shape {x.shape} != {(n, g * ci)}")
    if g == 1:
        grad_x = grad_out @ w.weight[0].T
        grad_w = (x.T @ grad_out)[None]
    else:
        xg = x.reshape(n, g, ci)
        gg = grad_out.reshape(n, g, co)
        grad_x = np.einsum("ngo,gio->ngi", gg, w.weight).reshape(n, g * ci)
        grad_w = np.einsum("ngi,ngo->gio", xg, gg)
    grad_b = None if w.bias is None else grad_out.sum(axis=0)
    return grad_x, grad_w, grad_b


def conv1x1_grouped(x: FeatureMap, w: GroupedLinear, category: str = "other") -> FeatureMap:
    if x.channels != w.in_channels:
        raise ShapeError(f"input has {x.channels} channels, layer expects {w.in_channels}")
    y = linear_nodes(flatten_nodes(x), w, category)
    return FeatureMap.from_nodes(y, x.height, x.width)


def conv1x1_grouped_backward(x: FeatureMap, w: GroupedLinear, grad_out: FeatureMap):
    """Returns ``(grad_x, grad_w)`` as (FeatureMap, GroupedLinear); the bias
    gradient rides along in ``grad_w.bias``."""
    if x.channels != w.in_channels:
        raise ShapeError(f"input has {x.channels} channels, layer expects {w.in_channels}")
    if grad_out.shape != (x.height, x.width, w.out_channels):
        raise ShapeError(f"grad_out shape {grad_out.shape} inconsistent with forward output")
    gx, gw, gb = linear_nodes_backward(flatten_nodes(x), w, flatten_nodes(grad_out))
    return FeatureMap.from_nodes(gx, x.height, x.width), GroupedLinear(gw, gb)


# ---------------------------------------------------------------------------
# Elementwise helpers
# ---------------------------------------------------------------------------


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.result_type(x, np.float32))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def encode_array(values: np.ndarray) -> bytes:
    """Binary container: "LGAF", u32 H, u32 W, u32 C, u8 dtype, row-major payload (LE)."""
    v = np.asarray(values)
    if v.ndim != 3:
        raise ShapeError(f"container holds 3-d arrays only, got {v.shape}")
    code = _DTYPE_CODES.get(v.dtype)
    if code is None:
        raise TypeError(f"unsupported dtype {v.dtype}; use float32 or float64")
    h, w, c = v.shape
    return _HEADER.pack(MAGIC, h, w, c, code) + np.ascontiguousarray(v, dtype=_DTYPES[code]).tobytes()


def decode_array(buf: bytes) -> np.ndarray:
    if len(buf) < _HEADER.size:
        raise ValueError("buffer shorter than LGAF header")
    magic, h, w, c, code = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise ValueError(f"bad magic {magic!r}")
    if code not in _DTYPES:
        raise ValueError(f"unknown dtype code {code}")
    dt = _DTYPES[code]
    expected = h * w * c * dt.itemsize
    payload = buf[_HEADER.size:]
    if len(payload) != expected:
        raise ValueError(f"payload has {len(payload)} bytes, header implies {expected}")
    return np.frombuffer(payload, dtype=dt).reshape(h, w, c).astype(dt.newbyteorder("="))


def save_feature_map(x: FeatureMap, path) -> None:
    Path(path).write_bytes(encode_array(x.values))


def load_feature_map(path) -> FeatureMap:
    return FeatureMap(decode_array(Path(path).read_bytes()))


def feature_map_to_json(x: FeatureMap) -> str:
    return json.dumps({"height": x.height, "width": x.width, "channels": x.channels,
                       "values": x.values.tolist()})


def feature_map_from_json(text: str) -> FeatureMap:
    obj = json.loads(text)
    values = np.asarray(obj["values"], dtype=np.float64)
    if values.shape != (obj["height"], obj["width"], obj["channels"]):
        raise ShapeError(f"JSON values shape {values.shape} disagrees with declared dims")
    return FeatureMap(values)
