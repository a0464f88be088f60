"""Dense, loop-built reference implementations used as independent oracles."""
import numpy as np


def dense_adjacency(h, w, edge_maps):
    """A[i, j] = raw weight of edge i -> j, built by explicit neighbour loops.

    Direction order: self, N, NE, E, SE, S, SW, W, NW.
    """
    offsets = [(0, 0), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1)]
    a = np.zeros((h * w, h * w))
    for y in range(h):
        for x in range(w):
            for d, (dy, dx) in enumerate(offsets):
                yy, xx = y + dy, x + dx
                if 0 <= yy < h and 0 <= xx < w:
                    a[y * w + x, yy * w + xx] = edge_maps[y, x, d]
    return a


def dense_lga_forward(f_in, edge_w, transforms, reducer=None, eps=1e-6, act="relu", edge_b=None,
                      biases=None):
    """Whole LGA forward with dense matrices.

    ``transforms`` / ``reducer`` are dense (C_in, C_out) matrices; the last layer
    is linear, earlier ones use ``act``.
    """
    h, w, c_in = f_in.shape
    x = f_in.reshape(h * w, c_in)
    if reducer is not None:
        x = x @ reducer
    z = x @ edge_w + (0.0 if edge_b is None else edge_b)
    maps = np.log1p(np.exp(z)).reshape(h, w, 9)
    a = dense_adjacency(h, w, maps)
    a_norm = a / (a.sum(axis=1, keepdims=True) + eps)
    for i, t in enumerate(transforms):
        m = a_norm.T @ x
        x = m @ t + (0.0 if biases is None else biases[i])
        if i < len(transforms) - 1 and act == "relu":
            x = np.maximum(x, 0.0)
    f_out = x.reshape(h, w, -1)
    return f_out, np.concatenate([f_in, f_out], axis=2)
