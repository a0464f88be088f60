"""Adam trainer, segmentation metrics and ablation driver for the toy task."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from ..loss import DEFAULT_DELTA, Divergence, build_similarity, lga_contrastive_loss, sample_pairs
from ..module import save_checkpoint
from ..tensor_core import encode_array
from .data import N_CLASSES, SyntheticSample, generate_dataset
from .model import ModelConfig, ToyModel, backward, cross_entropy, forward, predict

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "lr", "task_loss", "contrastive_loss", "pixel_acc", "miou")
ABLATION_AXES = ("layers", "divergence_loss", "groups")


class TrainingDiverged(RuntimeError):
    pass


class Adam:
    """Adam with bias correction, updating arrays in place."""

    def __init__(self, params: dict[str, np.ndarray], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, p in self.params.items():
            g = grads[k]
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g
            p -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def confusion_matrix(pred: np.ndarray, truth: np.ndarray, n_classes: int = N_CLASSES) -> np.ndarray:
    idx = truth.ravel().astype(np.int64) * n_classes + pred.ravel().astype(np.int64)
    return np.bincount(idx, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


def miou_from_confusion(cm: np.ndarray) -> float:
    """Mean IoU over classes that occur in either prediction or truth."""
    inter = np.diag(cm).astype(np.float64)
    union = cm.sum(axis=0) + cm.sum(axis=1) - inter
    present = union > 0
    return float((inter[present] / union[present]).mean()) if present.any() else 0.0


def evaluate(model: ToyModel, data: list[SyntheticSample]) -> tuple[float, float]:
    """(pixel accuracy, mIoU) over ``data``."""
    cm = np.zeros((model.cfg.n_classes,) * 2, dtype=np.int64)
    for s in data:
        cm += confusion_matrix(predict(model, s.image), s.labels, model.cfg.n_classes)
    return float(np.trace(cm) / cm.sum()), miou_from_confusion(cm)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 6
    lr: float = 3e-3
    decay_at: float = 0.75       # fraction of epochs after which lr drops 10x
    contrastive_weight: float = 0.01
    divergence_loss: bool = True
    divergence: str = "mse"
    pairs: int = 256
    layers: int = 4
    groups: int = 1
    width: int = 16
    hidden: int = 16
    seed: int = 0
    n_train: int = 160
    n_test: int = 64
    image_size: int = 64
    object_size: int = 10
    cue_radius: int = 10
    noise: float = 0.1

    @property
    def lga_enabled(self) -> bool:
        return self.layers > 0

    def lr_at(self, epoch: int) -> float:
        return self.lr if epoch < int(round(self.decay_at * self.epochs)) else self.lr * 0.1


def make_data(cfg: TrainConfig):
    kw = dict(size=cfg.object_size, cue_radius=cfg.cue_radius, noise=cfg.noise)
    train = generate_dataset(cfg.n_train, cfg.image_size, cfg.image_size, cfg.seed, **kw)
    test = generate_dataset(cfg.n_test, cfg.image_size, cfg.image_size, 10_000 + cfg.seed, **kw)
    return train, test


def build_model(cfg: TrainConfig) -> ToyModel:
    return ToyModel.init(ModelConfig(cfg.width, cfg.hidden, cfg.layers, cfg.groups), cfg.seed)


def train(model: ToyModel, data: list[SyntheticSample], cfg: TrainConfig, *,
          test_data: list[SyntheticSample] | None = None, out_dir=None) -> list[dict]:
    """Train in place; returns one metrics dict per epoch.

    Metrics are measured on ``test_data`` (defaults to the training data).
    Sample order and contrastive pair batches derive from ``cfg.seed`` only.
    """
    out_dir = Path(out_dir) if out_dir is not None else None
    params = model.tensors()
    opt = Adam(params, cfg.lr)
    rng = np.random.default_rng([cfg.seed, 2])
    use_div = cfg.divergence_loss and cfg.contrastive_weight > 0 and model.lga is not None
    kind = Divergence(cfg.divergence)
    history = []
    for epoch in range(cfg.epochs):
        opt.lr = cfg.lr_at(epoch)
        task_sum = div_sum = 0.0
        for step, idx in enumerate(rng.permutation(len(data))):
            s = data[idx]
            cache = forward(model, s.image)
            task, g_logits = cross_entropy(cache.logits, s.labels)
            g_out = None
            div = 0.0
            if use_div:
                f_out = cache.lga_out.f_out
                sim = build_similarity(s.labels, f_out.height, f_out.width)
                pairs = sample_pairs(sim, cfg.pairs, seed=hash_seed(cfg.seed, epoch, step))
                try:
                    div, g = lga_contrastive_loss(cache.f_in, f_out, sim, pairs, kind, DEFAULT_DELTA)
                    g_out = cfg.contrastive_weight * g.values
                except FloatingPointError:
                    div = float("nan")
            if not (np.isfinite(task) and np.isfinite(div)):
                _dump_divergence(out_dir, epoch, step, task, div, model)
                raise TrainingDiverged(f"non-finite loss at epoch {epoch} step {step}: task={task} div={div}")
            grads = backward(model, cache, g_logits, g_out)
            opt.step(grads)
            task_sum += task
            div_sum += div
        acc, miou = evaluate(model, test_data if test_data is not None else data)
        row = {"epoch": epoch, "lr": opt.lr, "task_loss": task_sum / len(data),
               "contrastive_loss": div_sum / len(data), "pixel_acc": acc, "miou": miou}
        history.append(row)
        log.info("epoch %d task %.4f div %.4f acc %.4f miou %.4f", epoch, row["task_loss"],
                 row["contrastive_loss"], acc, miou)
        if out_dir is not None:
            save_model(model, out_dir / f"checkpoint_epoch{epoch:03d}")
    return history


def hash_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def _dump_divergence(out_dir, epoch, step, task, div, model: ToyModel) -> None:
    if out_dir is None:
        return
    out_dir.mkdir(parents=True, exist_ok=True)
    stats = {k: {"min": float(np.nanmin(v)), "max": float(np.nanmax(v)), "finite": bool(np.all(np.isfinite(v)))}
             for k, v in model.tensors().items()}
    (out_dir / "divergence_dump.json").write_text(json.dumps(
        {"epoch": epoch, "step": step, "task_loss": task, "contrastive_loss": div, "tensors": stats}, indent=2))


def save_model(model: ToyModel, directory) -> None:
    """LGA tensors through the checkpoint manifest; backbone tensors alongside."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if model.lga is not None:
        save_checkpoint(model.lga, directory / "lga", model.cfg.eps)
    backbone = {}
    for name in ("enc1", "enc2", "dec1", "dec2"):
        layer = getattr(model, name)
        for part, arr in (("weight", layer.weight), ("bias", layer.bias)):
            fname = f"{name}.{part}.lgaf"
            (directory / fname).write_bytes(encode_array(arr if arr.ndim == 3 else arr.reshape(1, 1, -1)))
            backbone[f"{name}.{part}"] = {"file": fname, "shape": list(arr.shape)}
    (directory / "backbone.json").write_text(json.dumps({"config": asdict(model.cfg), "tensors": backbone},
                                                        indent=2))


def write_history(history: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=HISTORY_COLUMNS)
        w.writeheader()
        for row in history:
            w.writerow({k: (f"{v:.12g}" if isinstance(v, float) else v) for k, v in row.items()})


def run(cfg: TrainConfig, out_dir=None) -> list[dict]:
    train_data, test_data = make_data(cfg)
    model = build_model(cfg)
    return train(model, train_data, cfg, test_data=test_data, out_dir=out_dir)


def ablate(axis: str, values, cfg: TrainConfig, out_path=None) -> list[tuple]:
    """One seeded run per value along ``axis``; returns [(value, final mIoU)]."""
    if axis not in ABLATION_AXES:
        raise ValueError(f"unknown ablation axis {axis!r}; choose from {ABLATION_AXES}")
    rows = []
    for value in values:
        if axis == "divergence_loss":
            value = _as_bool(value)
        run_cfg = replace(cfg, **{axis: value})
        history = run(run_cfg)
        rows.append((value, history[-1]["miou"]))
    if out_path is not None:
        with open(out_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([axis, "miou"])
            for v, m in rows:
                w.writerow([v, f"{m:.12g}"])
    return rows


def _as_bool(v) -> bool:
    if isinstance(v, str):
        if v.lower() in ("1", "true", "on", "yes"):
            return True
        if v.lower() in ("0", "false", "off", "no"):
            return False
        raise ValueError(f"not a boolean: {v!r}")
    return bool(v)
