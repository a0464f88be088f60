"""Forward-only attention baselines: dense global attention and criss-cross attention."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor_core import FeatureMap, GroupedLinear, ShapeError, flatten_nodes, linear_nodes, record_macs, softmax

DENSE_LIMIT = 4096


@dataclass
class AttentionParams:
    query: GroupedLinear
    key: GroupedLinear
    value: GroupedLinear
    recurrence: int = 2

    def __post_init__(self):
        c = self.query.in_channels
        if self.key.in_channels != c or self.value.in_channels != c:
            raise ShapeError("query, key and value must read the same number of channels")
        if self.query.out_channels != self.key.out_channels:
            raise ShapeError("query and key widths differ")
        if self.query.out_channels > c:
            raise ShapeError(f"query/key width {self.query.out_channels} exceeds input width {c}")
        if self.recurrence < 1:
            raise ValueError("recurrence must be >= 1")
        if self.recurrence > 1 and self.value.out_channels != c:
            raise ShapeError("recurrent criss-cross attention needs value width == input width")

    @classmethod
    def init(cls, channels: int, qk_channels: int | None = None, value_channels: int | None = None,
             recurrence: int = 2, groups: int = 1, rng: np.random.Generator | None = None) -> "AttentionParams":
        rng = rng if rng is not None else np.random.default_rng()
        cqk = qk_channels or max(1, channels // 8)
        cv = value_channels or channels
        return cls(GroupedLinear.init(channels, cqk, groups, rng=rng, scale=1.0 / np.sqrt(channels)),
                   GroupedLinear.init(channels, cqk, groups, rng=rng, scale=1.0 / np.sqrt(channels)),
                   GroupedLinear.init(channels, cv, groups, rng=rng, scale=1.0 / np.sqrt(channels)),
                   recurrence)

    @property
    def n_params(self) -> int:
        return self.query.n_params + self.key.n_params + self.value.n_params


def _qkv(x: FeatureMap, p: AttentionParams):
    if x.channels != p.query.in_channels:
        raise ShapeError(f"input has {x.channels} channels, attention expects {p.query.in_channels}")
    nodes = flatten_nodes(x)
    return (linear_nodes(nodes, p.query), linear_nodes(nodes, p.key), linear_nodes(nodes, p.value))


def dense_attention_core(q: np.ndarray, k: np.ndarray, v: np.ndarray, chunk: int = 1024,
                         return_weights: bool = False):
    """softmax(Q K^T) V for node matrices, processed ``chunk`` query rows at a time."""
    n = q.shape[0]
    out = np.empty((n, v.shape[1]), dtype=np.result_type(q, v))
    weights = np.empty((n, n), dtype=out.dtype) if return_weights else None
    kt = k.T
    for start in range(0, n, chunk):
        a = softmax(q[start:start + chunk] @ kt, axis=1)
        out[start:start + chunk] = a @ v
        if weights is not None:
            weights[start:start + chunk] = a
    record_macs("info_prop", n * n * (q.shape[1] + v.shape[1]))
    return (out, weights) if return_weights else out


def dense_attention(x: FeatureMap, p: AttentionParams, *, allow_large: bool = False,
                    return_weights: bool = False):
    """Global attention over all N x N node pairs. Output channels = value width."""
    if x.n_nodes > DENSE_LIMIT and not allow_large:
        raise ValueError(f"dense attention on {x.n_nodes} > {DENSE_LIMIT} nodes needs allow_large=True")
    q, k, v = _qkv(x, p)
    res = dense_attention_core(q, k, v, return_weights=return_weights)
    if return_weights:
        out, w = res
        return FeatureMap.from_nodes(out, x.height, x.width), w
    return FeatureMap.from_nodes(res, x.height, x.width)


def crisscross_core(q: np.ndarray, k: np.ndarray, v: np.ndarray, return_weights: bool = False):
    """One criss-cross pass on (H, W, c) arrays.

    Position (y, x) attends to its whole column and to its row minus itself,
    so the self position is counted once: H + W - 1 positions in total.
    Returned weights have shape (H, W, H + W); the first H entries index the
    column, the last W the row (the self slot in the row part is 0).
    """
    h, w, _ = q.shape
    qt, kt, vt = q.transpose(1, 0, 2), k.transpose(1, 0, 2), v.transpose(1, 0, 2)
    e_col = (qt @ kt.transpose(0, 2, 1)).transpose(1, 0, 2)          # (H, W, H)
    e_row = q @ k.transpose(0, 2, 1)                                   # (H, W, W)
    idx = np.arange(w)
    e_row[:, idx, idx] = -np.inf
    a = softmax(np.concatenate([e_col, e_row], axis=2), axis=2)
    a_col, a_row = a[..., :h], a[..., h:]
    out = (a_col.transpose(1, 0, 2) @ vt).transpose(1, 0, 2) + a_row @ v
    record_macs("info_prop", h * w * (h + w - 1) * (q.shape[2] + v.shape[2]))
    return (out, a) if return_weights else out


def crisscross_attention(x: FeatureMap, p: AttentionParams, *, return_weights: bool = False):
    """Criss-cross attention applied ``p.recurrence`` times, each pass feeding the next.

    With ``return_weights`` the weights of the final pass are returned too.
    """
    weights = None
    for _ in range(p.recurrence):
        q, k, v = _qkv(x, p)
        hw = (x.height, x.width)
        res = crisscross_core(q.reshape(*hw, -1), k.reshape(*hw, -1), v.reshape(*hw, -1), return_weights)
        out, weights = res if return_weights else (res, None)
        x = FeatureMap(out)
    return (x, weights) if return_weights else x
