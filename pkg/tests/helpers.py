"""Shared oracles for the test suite."""
import numpy as np


def numeric_grad(f, arr, h=1e-5):
    """Central differences of scalar ``f()`` w.r.t. ``arr`` (perturbed in place)."""
    out = np.zeros_like(arr, dtype=np.float64)
    flat, gflat = arr.reshape(-1), out.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        fp = f()
        flat[k] = orig - h
        fm = f()
        flat[k] = orig
        gflat[k] = (fp - fm) / (2 * h)
    return out


def rel_err(a, b):
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0))
    return 0.0 if scale == 0 else float(np.abs(a - b).max() / scale)


def grid_neighbours(h, w, n):
    """Self plus the 8-neighbourhood of node n, clipped to the grid."""
    y, x = divmod(n, w)
    return {yy * w + xx for yy in range(y - 1, y + 2) for xx in range(x - 1, x + 2)
            if 0 <= yy < h and 0 <= xx < w}


def bfs_ball(h, w, source, hops):
    seen, frontier = {source}, {source}
    for _ in range(hops):
        frontier = {m for n in frontier for m in grid_neighbours(h, w, n)} - seen
        seen |= frontier
    return seen


ACCEPTANCE_LINES: list[str] = []


def report(criterion, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {criterion}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok
