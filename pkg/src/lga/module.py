"""LGA forward/backward: L message-passing layers over one shared graph."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .graph import (
    DEFAULT_EPS,
    EdgeActivation,
    EdgeKernels,
    LocalGraph,
    assemble_adjacency,
    edge_logits,
    message_pass,
    message_pass_backward,
    normalize_adjacency,
    normalize_backward,
)
from .tensor_core import (
    FeatureMap,
    GroupedLinear,
    ShapeError,
    concat_channels,
    decode_array,
    encode_array,
    flatten_nodes,
    linear_nodes,
    linear_nodes_backward,
)

MAX_LAYERS = 8

_ACTIVATIONS = {
    "identity": (lambda z: z, lambda z: np.ones_like(z)),
    "relu": (lambda z: np.maximum(z, 0.0), lambda z: (z > 0).astype(z.dtype)),
    "tanh": (np.tanh, lambda z: 1.0 - np.tanh(z) ** 2),
}


@dataclass
class LgaParams:
    edge_kernels: EdgeKernels
    transforms: list[GroupedLinear]
    reducer: GroupedLinear | None = None
    activation: str = "relu"
    final_activation: str = "identity"
    edge_activation: EdgeActivation = EdgeActivation.SOFTPLUS

    def __post_init__(self):
        self.edge_activation = EdgeActivation(self.edge_activation)
        for name in (self.activation, self.final_activation):
            if name not in _ACTIVATIONS:
                raise ValueError(f"unknown activation {name!r}; choose from {sorted(_ACTIVATIONS)}")
        if not self.transforms:
            raise ValueError("LGA needs at least one layer")
        if len(self.transforms) > MAX_LAYERS:
            raise ValueError(f"at most {MAX_LAYERS} layers supported, got {len(self.transforms)}")
        c = self.transforms[0].in_channels
        g = self.transforms[0].groups
        for t in self.transforms:
            if t.in_channels != c or t.out_channels != c or t.groups != g:
                raise ShapeError("all layer transforms must map C_lga -> C_lga with the same groups")
        if self.edge_kernels.channels != c:
            raise ShapeError(f"edge kernels read {self.edge_kernels.channels} channels, layers use {c}")
        if self.reducer is not None and self.reducer.out_channels != c:
            raise ShapeError(f"reducer emits {self.reducer.out_channels} channels, layers use {c}")

    @property
    def layers(self) -> int:
        return len(self.transforms)

    @property
    def channels(self) -> int:
        return self.transforms[0].in_channels

    @property
    def in_channels(self) -> int:
        return self.reducer.in_channels if self.reducer is not None else self.channels

    @property
    def groups(self) -> int:
        return self.transforms[0].groups

    @property
    def n_params(self) -> int:
        n = self.edge_kernels.n_params + sum(t.n_params for t in self.transforms)
        return n + (self.reducer.n_params if self.reducer is not None else 0)

    def layer_activation(self, i: int) -> str:
        return self.final_activation if i == self.layers - 1 else self.activation

    def tensors(self) -> dict[str, np.ndarray]:
        """Named parameter arrays (live references, not copies)."""
        out = {"edge.weight": self.edge_kernels.weight}
        if self.edge_kernels.bias is not None:
            out["edge.bias"] = self.edge_kernels.bias
        if self.reducer is not None:
            out["reducer.weight"] = self.reducer.weight
            if self.reducer.bias is not None:
                out["reducer.bias"] = self.reducer.bias
        for i, t in enumerate(self.transforms):
            out[f"layer{i}.weight"] = t.weight
            if t.bias is not None:
                out[f"layer{i}.bias"] = t.bias
        return out


def init_params(in_channels: int, channels: int | None = None, layers: int = 4, groups: int = 8, *,
                reduce: bool = True, bias: bool = False, activation: str = "relu",
                final_activation: str = "identity", edge_activation: str = "softplus",
                rng: np.random.Generator | None = None, transform_scale: float | None = None) -> LgaParams:
    """Random parameters. Defaults follow the SqueezeNet placement:
    C_lga = C_in / 4 through a grouped reducer, 4 layers, 8 groups."""
    rng = rng if rng is not None else np.random.default_rng()
    if channels is None:
        channels = in_channels // 4 if reduce else in_channels
    reducer = GroupedLinear.init(in_channels, channels, groups, bias=bias, rng=rng) if reduce else None
    if not reduce and channels != in_channels:
        raise ShapeError("without a reducer the LGA width must equal the input width")
    edge = EdgeKernels.init(channels, bias=bias, rng=rng)
    transforms = [GroupedLinear.init(channels, channels, groups, bias=bias, rng=rng, scale=transform_scale)
                  for _ in range(layers)]
    return LgaParams(edge, transforms, reducer, activation, final_activation, edge_activation)


@dataclass
class LgaCache:
    f_in: np.ndarray
    x0: np.ndarray
    logits: np.ndarray
    graph: LocalGraph
    inputs: list[np.ndarray] = field(default_factory=list)
    messages: list[np.ndarray] = field(default_factory=list)
    preacts: list[np.ndarray] = field(default_factory=list)


@dataclass
class LgaOutput:
    f_out: FeatureMap
    f_cat: FeatureMap
    graph: LocalGraph
    cache: LgaCache | None = None


@dataclass
class LgaGrads:
    edge_kernels: EdgeKernels
    transforms: list[GroupedLinear]
    reducer: GroupedLinear | None
    f_in: FeatureMap

    def tensors(self) -> dict[str, np.ndarray]:
        """Same names and shapes as ``LgaParams.tensors``."""
        return LgaParams.tensors(self)  # type: ignore[arg-type]


def lga_forward(f_in: FeatureMap, p: LgaParams, eps: float = DEFAULT_EPS, *,
                keep_intermediates: bool = True) -> LgaOutput:
    if f_in.channels != p.in_channels:
        raise ShapeError(f"input has {f_in.channels} channels, LGA expects {p.in_channels}")
    h, w = f_in.height, f_in.width
    nodes = flatten_nodes(f_in)
    x = linear_nodes(nodes, p.reducer, "resize") if p.reducer is not None else nodes
    z_edge = edge_logits(x, p.edge_kernels)
    raw_maps = p.edge_activation(z_edge).reshape(h, w, 9)
    graph = normalize_adjacency(assemble_adjacency(raw_maps, h, w), eps)

    cache = LgaCache(nodes, x, z_edge, graph) if keep_intermediates else None
    for i, t in enumerate(p.transforms):
        m = message_pass(x, graph)
        z = linear_nodes(m, t, "other")
        if cache is not None:
            cache.inputs.append(x)
            cache.messages.append(m)
            cache.preacts.append(z)
        x = _ACTIVATIONS[p.layer_activation(i)][0](z)

    f_out = FeatureMap.from_nodes(x, h, w)
    return LgaOutput(f_out, concat_channels(f_in, f_out), graph, cache)


def lga_backward(out: LgaOutput, p: LgaParams, grad_f_out: FeatureMap | np.ndarray | None = None,
                 grad_f_cat: FeatureMap | np.ndarray | None = None) -> LgaGrads:
    """Exact reverse-mode gradients for every parameter and for the input.

    Either upstream gradient may be omitted. The shared graph is used by all
    layers, so the edge-kernel gradient sums contributions from each of them.
    """
    c = out.cache
    if c is None:
        raise ValueError("forward was run without intermediates; rerun with keep_intermediates=True")
    n, c_lga = c.inputs[0].shape
    g_x = np.zeros((n, c_lga))
    g_in = np.zeros_like(c.f_in, dtype=np.float64)
    if grad_f_out is not None:
        g_x = g_x + _nodes(grad_f_out, n)
    if grad_f_cat is not None:
        gc = _nodes(grad_f_cat, n)
        g_in = g_in + gc[:, :c.f_in.shape[1]]
        g_x = g_x + gc[:, c.f_in.shape[1]:]

    g_norm = np.zeros(c.graph.n_entries)
    t_grads: list[GroupedLinear] = [None] * p.layers  # type: ignore[list-item]
    for i in reversed(range(p.layers)):
        g_z = g_x * _ACTIVATIONS[p.layer_activation(i)][1](c.preacts[i])
        g_m, g_w, g_b = linear_nodes_backward(c.messages[i], p.transforms[i], g_z)
        t_grads[i] = GroupedLinear(g_w, g_b)
        g_x, g_e = message_pass_backward(c.inputs[i], c.graph, g_m)
        g_norm += g_e

    # g_x now holds the gradient reaching X_0 through the message path
    g_raw = normalize_backward(c.graph, g_norm)
    g_logits = np.zeros((n, 9))
    np.add.at(g_logits, (c.graph.src, c.graph.direction), g_raw)
    g_logits *= p.edge_activation.grad(c.logits)
    edge_grad = EdgeKernels(c.x0.T @ g_logits, g_logits.sum(axis=0) if p.edge_kernels.bias is not None else None)
    g_x0 = g_x + g_logits @ p.edge_kernels.weight.T

    red_grad = None
    if p.reducer is not None:
        g_r, g_w, g_b = linear_nodes_backward(c.f_in, p.reducer, g_x0)
        red_grad = GroupedLinear(g_w, g_b)
        g_in = g_in + g_r
    else:
        g_in = g_in + g_x0

    h, w = out.f_out.height, out.f_out.width
    return LgaGrads(edge_grad, t_grads, red_grad, FeatureMap.from_nodes(g_in, h, w))


def _nodes(g, n: int) -> np.ndarray:
    arr = g.values if isinstance(g, FeatureMap) else np.asarray(g)
    return arr.reshape(n, -1)


def receptive_field_probe(p: LgaParams, height: int, width: int, source_node: int, *,
                          trials: int = 3, seed: int = 0, eps: float = DEFAULT_EPS) -> set[int]:
    """Nodes whose F_out changes when the input at ``source_node`` is perturbed.

    Several random base inputs are tried and the union taken, so a ReLU that
    happens to be inactive in one trial does not hide a dependency.
    """
    if not 0 <= source_node < height * width:
        raise ValueError(f"source node {source_node} outside {height}x{width} grid")
    rng = np.random.default_rng(seed)
    changed: set[int] = set()
    for _ in range(trials):
        base = rng.normal(size=(height, width, p.in_channels))
        bumped = base.copy()
        bumped.reshape(-1, p.in_channels)[source_node] += rng.normal(size=p.in_channels)
        a = lga_forward(FeatureMap(base), p, eps, keep_intermediates=False).f_out.nodes()
        b = lga_forward(FeatureMap(bumped), p, eps, keep_intermediates=False).f_out.nodes()
        changed |= set(np.nonzero(np.any(a != b, axis=1))[0].tolist())
    return changed


def chebyshev_ball(height: int, width: int, source_node: int, radius: int) -> set[int]:
    sy, sx = divmod(source_node, width)
    return {y * width + x
            for y in range(max(0, sy - radius), min(height, sy + radius + 1))
            for x in range(max(0, sx - radius), min(width, sx + radius + 1))}


# ---------------------------------------------------------------------------
# Checkpoints: manifest.json + one LGAF container per tensor
# ---------------------------------------------------------------------------


def _as3d(a: np.ndarray) -> np.ndarray:
    if a.ndim == 3:
        return a
    if a.ndim == 2:
        return a[None]
    return a.reshape(1, 1, -1)


def save_checkpoint(p: LgaParams, directory, eps: float = DEFAULT_EPS) -> Path:
    directory = Path(directory)
    (directory / "tensors").mkdir(parents=True, exist_ok=True)
    entries = []
    for name, arr in p.tensors().items():
        fname = f"tensors/{name}.lgaf"
        (directory / fname).write_bytes(encode_array(_as3d(np.asarray(arr))))
        entries.append({"name": name, "file": fname, "shape": list(arr.shape)})
    manifest = {
        "format": "lga-checkpoint/1",
        "layers": p.layers,
        "channels": p.channels,
        "in_channels": p.in_channels,
        "groups": p.groups,
        "reducer_groups": p.reducer.groups if p.reducer is not None else None,
        "eps": eps,
        "activation": p.activation,
        "final_activation": p.final_activation,
        "edge_activation": p.edge_activation.value,
        "tensors": entries,
    }
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path


def load_checkpoint(directory) -> tuple[LgaParams, float]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    arrays = {}
    for e in manifest["tensors"]:
        arr = decode_array((directory / e["file"]).read_bytes())
        arrays[e["name"]] = arr.reshape(e["shape"])
    edge = EdgeKernels(arrays["edge.weight"], arrays.get("edge.bias"))
    reducer = None
    if "reducer.weight" in arrays:
        reducer = GroupedLinear(arrays["reducer.weight"], arrays.get("reducer.bias"))
    transforms = [GroupedLinear(arrays[f"layer{i}.weight"], arrays.get(f"layer{i}.bias"))
                  for i in range(manifest["layers"])]
    params = LgaParams(edge, transforms, reducer, manifest["activation"], manifest["final_activation"],
                       manifest["edge_activation"])
    return params, manifest["eps"]
