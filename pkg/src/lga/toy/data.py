"""Synthetic distant-cue segmentation.

Each image holds square objects on a plain background. Object interiors
look identical for both object classes; the class is only visible in a thin
coloured ring at Chebyshev distance >= ``cue_radius`` from the square's centre.
Pixels deep inside the square therefore cannot be labelled from local
evidence. ``cue_radius=0`` colours the whole square, making the task local.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..tensor_core import decode_array, encode_array

N_CLASSES = 3
CUE_COLORS = {1: (0.9, 0.15, 0.1), 2: (0.1, 0.2, 0.9)}
INTERIOR = (0.55, 0.55, 0.5)
BACKGROUND = (0.25, 0.3, 0.25)


@dataclass(frozen=True)
class SyntheticSample:
    image: np.ndarray  # (H, W, 3) in [0, 1]
    labels: np.ndarray  # (H, W) int, 0 = background
    seed: int
    object_classes: tuple[int, ...]


def _layout(rng: np.random.Generator, height: int, width: int, size: int, n_objects: int,
            tries: int = 10_000) -> list[tuple[int, int]]:
    """Centres for ``n_objects`` squares, redrawn together until none overlap."""
    for _ in range(tries):
        ys = rng.integers(size, height - size, size=n_objects)
        xs = rng.integers(size, width - size, size=n_objects)
        # keep a one-pixel background gap between squares
        if all(max(abs(ys[i] - ys[j]), abs(xs[i] - xs[j])) >= 2 * size + 2
               for i in range(n_objects) for j in range(i)):
            return [(int(y), int(x)) for y, x in zip(ys, xs)]
    raise ValueError(f"cannot place {n_objects} objects of half-size {size} in {height}x{width}")


def generate_sample(height: int, width: int, rng: np.random.Generator, *, size: int = 8,
                    cue_radius: int | None = None, n_objects: int = 2, noise: float = 0.05,
                    seed: int = -1) -> SyntheticSample:
    r = size if cue_radius is None else cue_radius
    if 2 * size + 1 > min(height, width):
        raise ValueError(f"object of side {2 * size + 1} does not fit a {height}x{width} image")
    image = np.empty((height, width, 3))
    image[:] = BACKGROUND
    labels = np.zeros((height, width), dtype=np.int64)
    yy, xx = np.mgrid[0:height, 0:width]
    classes = [int(c) for c in rng.integers(1, N_CLASSES, size=n_objects)]
    for cls, (cy, cx) in zip(classes, _layout(rng, height, width, size, n_objects)):
        dist = np.maximum(np.abs(yy - cy), np.abs(xx - cx))
        inside = dist <= size
        labels[inside] = cls
        image[inside] = INTERIOR
        image[inside & (dist >= r)] = CUE_COLORS[cls]
    image += rng.normal(0.0, noise, size=image.shape)
    return SyntheticSample(np.clip(image, 0.0, 1.0), labels, seed, tuple(classes))


def generate_dataset(n: int, height: int = 48, width: int = 48, seed: int = 0, *, size: int = 8,
                     cue_radius: int | None = None, n_objects: int = 2,
                     noise: float = 0.05) -> list[SyntheticSample]:
    """``n`` samples, reproducible from ``seed``. H and W must be >= 16 and
    divisible by 4 (the toy encoder downsamples twice by 2)."""
    if height < 16 or width < 16 or height % 4 or width % 4:
        raise ValueError(f"image size must be >= 16 and divisible by 4, got {height}x{width}")
    if n < 1:
        raise ValueError("n must be positive")
    rng = np.random.default_rng(seed)
    return [generate_sample(height, width, rng, size=size, cue_radius=cue_radius, n_objects=n_objects,
                            noise=noise, seed=seed)
            for _ in range(n)]


def save_dataset(samples: list[SyntheticSample], directory) -> None:
    """Images and label maps as LGAF containers plus an index.json."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index = []
    for i, s in enumerate(samples):
        (directory / f"image_{i:05d}.lgaf").write_bytes(encode_array(s.image))
        (directory / f"labels_{i:05d}.lgaf").write_bytes(encode_array(s.labels[..., None].astype(np.float64)))
        index.append({"seed": s.seed, "object_classes": list(s.object_classes)})
    (directory / "index.json").write_text(json.dumps(index))


def load_dataset(directory) -> list[SyntheticSample]:
    directory = Path(directory)
    index = json.loads((directory / "index.json").read_text())
    out = []
    for i, meta in enumerate(index):
        image = decode_array((directory / f"image_{i:05d}.lgaf").read_bytes())
        labels = decode_array((directory / f"labels_{i:05d}.lgaf").read_bytes())[..., 0].astype(np.int64)
        out.append(SyntheticSample(image, labels, meta["seed"], tuple(meta["object_classes"])))
    return out
