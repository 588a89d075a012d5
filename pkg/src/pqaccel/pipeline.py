"""Progressive stage-wise acceleration with fine-tuning, plus a desk-scale toy task.

The toy task: small RGB images with coloured rectangles of two classes; a fully
convolutional network predicts, for each cell of a coarse grid, whether the
cell centre lies in a class-0 box, a class-1 box or background.
"""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .accel import MacReport, acceleration_report, solve_budget
from .errors import ConfigError, DivergenceError
from .metrics import Box
from .model import Model, Node
from .quantizer import QuantizedLayer, QuantScheme, quantize_layer, reconstruct_weights
from .tensor import DTYPE, ConvLayer, col2im, im2col

log = logging.getLogger(__name__)

# SGD settings used for the detectors; the toy experiments override lr and steps.
PUBLISHED_SGD = {"batch": 8, "lr": 1e-4, "weight_decay": 1e-4, "dropout": 0.5, "epochs": 300}


# --------------------------------------------------------------------------- toy data

def cell_labels(boxes, size: int = 16, grid: int = 4) -> np.ndarray:
    """Per-cell class map: 0 background, 1 + class index where the cell centre is inside a box."""
    cell = size / grid
    labels = np.zeros((grid, grid), dtype=np.int64)
    centres = (np.arange(grid) + 0.5) * cell
    for b in boxes:
        cls = int(b.label) + 1
        for r, cy in enumerate(centres):
            for c, cx in enumerate(centres):
                if b.x_min <= cx < b.x_max and b.y_min <= cy < b.y_max:
                    labels[r, c] = cls
    return labels


_COLOURS = np.array([[1.0, 0.15, 0.15], [0.15, 1.0, 0.15]], dtype=DTYPE)


def render(boxes, size: int = 16, noise: np.ndarray | None = None) -> np.ndarray:
    img = np.zeros((3, size, size), dtype=DTYPE) if noise is None else noise.astype(DTYPE).copy()
    for b in boxes:
        x0, y0, x1, y1 = (int(round(v)) for v in (b.x_min, b.y_min, b.x_max, b.y_max))
        img[:, y0:y1, x0:x1] += _COLOURS[int(b.label)][:, None, None]
    return img


@dataclass
class BoxDataset:
    images: np.ndarray          # (n, 3, size, size)
    labels: np.ndarray          # (n, grid, grid)
    boxes: list[list[Box]]

    def __len__(self) -> int:
        return self.images.shape[0]


def make_box_dataset(n: int, seed: int, size: int = 16, grid: int = 4, max_boxes: int = 2,
                     noise: float = 0.1) -> BoxDataset:
    rng = np.random.default_rng(seed)
    images = np.empty((n, 3, size, size), dtype=DTYPE)
    labels = np.empty((n, grid, grid), dtype=np.int64)
    all_boxes = []
    for i in range(n):
        boxes = []
        for _ in range(int(rng.integers(1, max_boxes + 1))):
            w, h = (int(v) for v in rng.integers(size // 4, size // 2 + 1, size=2))
            x0, y0 = int(rng.integers(0, size - w + 1)), int(rng.integers(0, size - h + 1))
            boxes.append(Box(str(int(rng.integers(2))), x0, y0, x0 + w, y0 + h))
        images[i] = render(boxes, size, rng.normal(0.0, noise, (3, size, size)))
        labels[i] = cell_labels(boxes, size, grid)
        all_boxes.append(boxes)
    return BoxDataset(images, labels, all_boxes)


def augment(image: np.ndarray, boxes, rng: np.random.Generator, max_drift: float = 150,
            flip_prob: float = 0.5):
    """Random drift and horizontal flip of an image and its boxes.

    Boxes move by ``k_x * max_drift`` pixels along x and ``k_y * max_drift``
    along y with ``k_x, k_y ~ U(0, 1)``; the image content moves with them
    (zero fill). Boxes are clipped to the frame and dropped once empty. The
    result is flipped left-right with probability ``flip_prob``.
    """
    _, h, w = image.shape
    dx = int(rng.uniform() * max_drift)
    dy = int(rng.uniform() * max_drift)
    out = np.zeros_like(image)
    if dx < w and dy < h:
        out[:, dy:, dx:] = image[:, :h - dy, :w - dx]
    moved = []
    for b in boxes:
        x0, y0 = min(b.x_min + dx, w), min(b.y_min + dy, h)
        x1, y1 = min(b.x_max + dx, w), min(b.y_max + dy, h)
        if x0 < x1 and y0 < y1:
            moved.append(Box(b.label, x0, y0, x1, y1, b.confidence))
    if rng.uniform() < flip_prob:
        out = out[:, :, ::-1].copy()
        moved = [Box(b.label, w - b.x_max, b.y_min, w - b.x_min, b.y_max, b.confidence) for b in moved]
    return out, moved


# --------------------------------------------------------------------------- toy network

def _he_conv(rng, m, n, k, stride, padding, name):
    w = rng.normal(0.0, np.sqrt(2.0 / (n * k * k)), (m, n, k, k))
    return ConvLayer(w, np.zeros(m), stride, padding, name)


def build_toy_model(seed: int = 0, size: int = 16, width: int = 32) -> Model:
    """Stem, three target 3x3 layers (feature-extraction group) and a 1x1 per-cell head."""
    rng = np.random.default_rng(seed)
    half = width // 2
    nodes = [
        Node("stem", _he_conv(rng, half, 3, 3, 2, 1, "stem"), "stem", False, (size, size), True),
        Node("f1", _he_conv(rng, width, half, 3, 1, 1, "f1"), "feature-extraction", True,
             (size // 2, size // 2), True),
        Node("f2", _he_conv(rng, width, width, 3, 1, 1, "f2"), "feature-extraction", True,
             (size // 2, size // 2), True),
        Node("f3", _he_conv(rng, width, width, 3, 1, 1, "f3"), "feature-extraction", True,
             (size // 2, size // 2), True),
        Node("head", _he_conv(rng, 3, width, 1, 2, 0, "head"), "head", False, (size // 2, size // 2), False),
    ]
    return Model("toy-boxnet", nodes)


# --------------------------------------------------------------------------- gradient path

def _dense_of(op) -> ConvLayer:
    return reconstruct_weights(op) if isinstance(op, QuantizedLayer) else op


def _forward_cached(model: Model, x: np.ndarray):
    caches, h = [], x
    for node in model.nodes:
        layer = _dense_of(node.op)
        cols = im2col(h, layer.kernel_size, layer.stride, layer.padding)
        ho, wo = layer.output_hw(h.shape[2], h.shape[3])
        out = (layer.weight_matrix() @ cols + layer.bias[:, None])
        out = out.reshape(layer.kernels, h.shape[0], ho, wo).transpose(1, 0, 2, 3)
        caches.append((layer, h.shape, cols, out))
        h = np.maximum(out, 0) if node.relu else out
    return h, caches


def _loss_and_grad(out: np.ndarray, target: np.ndarray, loss: str):
    if loss == "xent":
        z = out - out.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        n, _, gh, gw = out.shape
        count = n * gh * gw
        idx = (np.arange(n)[:, None, None], target, np.arange(gh)[None, :, None], np.arange(gw)[None, None, :])
        value = -np.log(np.maximum(p[idx], 1e-30)).sum() / count
        grad = p
        grad[idx] -= 1.0
        return float(value), grad / count
    if loss == "mse":
        diff = out - target
        n = out.shape[0]
        return float(0.5 * np.sum(diff.astype(np.float64) ** 2) / n), diff / n
    raise ConfigError(f"unknown loss {loss!r}")


def _backward(model: Model, caches, grad_out, trainable: set[str]):
    """Gradients for the trainable nodes; stops below the lowest trainable node."""
    names = model.names
    lowest = min((names.index(n) for n in trainable), default=len(names))
    grads = {}
    g = grad_out
    for i in range(len(model.nodes) - 1, lowest - 1, -1):
        node = model.nodes[i]
        layer, in_shape, cols, out = caches[i]
        if node.relu:
            g = g * (out > 0)
        go = g.transpose(1, 0, 2, 3).reshape(layer.kernels, -1)
        if node.name in trainable:
            grads[node.name] = ((go @ cols.T).reshape(layer.shape), go.sum(axis=1))
        if i > lowest:
            g = col2im(layer.weight_matrix().T @ go, in_shape, layer.kernel_size, layer.stride, layer.padding)
    return grads


def evaluate(model: Model, images: np.ndarray, targets: np.ndarray, loss: str = "xent",
             batch: int = 256) -> dict:
    """Mean loss and (for ``xent``) per-cell accuracy, using the accelerated path for quantized nodes."""
    total_loss, correct, cells = 0.0, 0, 0
    for lo in range(0, images.shape[0], batch):
        x, t = images[lo:lo + batch], targets[lo:lo + batch]
        out = model.forward(x)
        value, _ = _loss_and_grad(out, t, loss)
        total_loss += value * x.shape[0]
        if loss == "xent":
            correct += int(np.sum(out.argmax(axis=1) == t))
            cells += t.size
    result = {"loss": total_loss / images.shape[0]}
    if loss == "xent":
        result["accuracy"] = correct / cells
    return result


def toy_finetune(model: Model, frozen_layer_set, data, steps: int, lr: float = PUBLISHED_SGD["lr"],
                 batch: int = PUBLISHED_SGD["batch"], weight_decay: float = PUBLISHED_SGD["weight_decay"],
                 loss: str = "xent", seed: int = 0, momentum: float = 0.0) -> Model:
    """Plain minibatch SGD on the layers that are neither frozen nor quantized.

    ``data`` is ``(inputs, targets)``. Weight decay applies to kernels only.
    Minibatches are drawn from a seeded permutation, restarted each epoch.
    Returns a new model; the input model is not modified.
    """
    images, targets = data
    frozen = set(frozen_layer_set) | {n.name for n in model.nodes if isinstance(n.op, QuantizedLayer)}
    unknown = frozen - set(model.names)
    if unknown:
        raise ConfigError(f"frozen layers not in model: {sorted(unknown)}")
    trainable = [n.name for n in model.nodes if n.name not in frozen]
    if steps <= 0:
        return model
    if not trainable:
        warnings.warn("toy_finetune: every layer is frozen; model returned unchanged", stacklevel=2)
        return model

    params = {n: [model[n].op.weights.astype(DTYPE).copy(), model[n].op.bias.astype(DTYPE).copy()]
              for n in trainable}
    velocity = {n: [np.zeros_like(w), np.zeros_like(b)] for n, (w, b) in params.items()}
    current = model.copy()
    rng = np.random.default_rng(seed)
    n_samples = images.shape[0]
    batch = min(batch, n_samples)
    order, pos = rng.permutation(n_samples), 0
    for step in range(steps):
        if pos + batch > n_samples:
            order, pos = rng.permutation(n_samples), 0
        idx = order[pos:pos + batch] if batch < n_samples else np.arange(n_samples)
        pos += batch
        for name in trainable:
            w, b = params[name]
            current = current.with_op(name, current[name].op.replace(weights=w, bias=b))
        with np.errstate(over="ignore", invalid="ignore"):
            out, caches = _forward_cached(current, images[idx])
            value, g = _loss_and_grad(out, targets[idx], loss)
        if not np.isfinite(value):
            raise DivergenceError(f"fine-tuning diverged at step {step} (loss {value}, lr {lr})")
        grads = _backward(current, caches, g, set(trainable))
        for name in trainable:
            gw, gb = grads[name]
            gw = gw + weight_decay * params[name][0]
            vw, vb = velocity[name]
            vw *= momentum
            vw += gw
            vb *= momentum
            vb += gb
            params[name][0] = (params[name][0] - lr * vw).astype(DTYPE)
            params[name][1] = (params[name][1] - lr * vb).astype(DTYPE)
    for name in trainable:
        w, b = params[name]
        current = current.with_op(name, current[name].op.replace(weights=w, bias=b))
    return current


def train_toy_model(seed: int = 0, steps: int = 1500, lr: float = 0.05, batch: int = 16,
                    train: BoxDataset | None = None, momentum: float = 0.9) -> Model:
    """Train the toy network from scratch (all layers trainable)."""
    if train is None:
        train = make_box_dataset(1024, seed=seed + 1000)
    model = build_toy_model(seed)
    return toy_finetune(model, (), (train.images, train.labels), steps, lr=lr, batch=batch,
                        weight_decay=PUBLISHED_SGD["weight_decay"], seed=seed, momentum=momentum)


# --------------------------------------------------------------------------- schedules

@dataclass
class Stage:
    targets: list[str]
    scheme: str = "dl"
    alpha: float | None = None
    subspace_dim: int | None = None
    params: dict | None = None

    def scheme_for(self, node: Node, seed: int, count_lookups: bool) -> QuantScheme:
        layer = node.op
        d = self.subspace_dim or layer.channels
        if self.params:
            return QuantScheme(self.scheme, d, seed=seed, **self.params)
        if self.alpha is None:
            raise ConfigError(f"stage {self.targets}: give either alpha or explicit params")
        if node.input_hw is None:
            raise ConfigError(f"layer {node.name!r} has no input geometry; cannot solve for alpha")
        return solve_budget(self.alpha, layer, node.input_hw, d, self.scheme, count_lookups, seed=seed).scheme


@dataclass
class FinetuneConfig:
    steps: int = 0
    lr: float = PUBLISHED_SGD["lr"]
    batch: int = PUBLISHED_SGD["batch"]
    weight_decay: float = PUBLISHED_SGD["weight_decay"]
    layers: list[str] | None = None


@dataclass
class StageSchedule:
    stages: list[Stage] = field(default_factory=list)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    seed: int = 0
    count_lookups: bool = True

    def validate(self, model: Model) -> None:
        seen: set[str] = set()
        for stage in self.stages:
            for t in stage.targets:
                if t not in model:
                    raise ConfigError(f"schedule targets unknown layer {t!r}")
                if t in seen:
                    raise ConfigError(f"layer {t!r} appears in more than one stage")
                if not isinstance(model[t].op, ConvLayer):
                    raise ConfigError(f"layer {t!r} is not a dense conv layer and cannot be quantized")
                seen.add(t)
        if self.finetune.layers:
            for name in self.finetune.layers:
                if name not in model:
                    raise ConfigError(f"fine-tune list names unknown layer {name!r}")
            clash = sorted(seen.intersection(self.finetune.layers))
            already = sorted(n for n in self.finetune.layers if isinstance(model[n].op, QuantizedLayer))
            if clash or already:
                raise ConfigError(f"fine-tune list names quantized layers: {clash + already}")

    @classmethod
    def from_dict(cls, data: dict) -> "StageSchedule":
        known = {"stages", "finetune", "seed", "count_lookups", "model", "data", "groups"}
        extra = set(data) - known
        if extra:
            raise ConfigError(f"unknown schedule keys: {sorted(extra)}")
        try:
            stages = [Stage(targets=list(s["targets"]), scheme=s.get("scheme", "dl"), alpha=s.get("alpha"),
                            subspace_dim=s.get("subspace_dim"), params=s.get("params"))
                      for s in data.get("stages", [])]
            ft = FinetuneConfig(**data.get("finetune", {}))
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed schedule: {exc}") from None
        return cls(stages, ft, int(data.get("seed", 0)), bool(data.get("count_lookups", True)))


def load_config(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None


@dataclass
class StageResult:
    index: int
    macs: MacReport
    metrics: dict
    quantized: list[str]
    model: Model = field(repr=False, default=None)

    def to_dict(self) -> dict:
        return {"stage": self.index, "quantized": list(self.quantized),
                "metrics": {k: round(float(v), 4) for k, v in sorted(self.metrics.items())},
                "total_macs": self.macs.total_accelerated, "total_reduction_pct": round(self.macs.total_reduction, 4),
                "macs": self.macs.to_dict()}


FinetuneHook = Callable[[Model, frozenset], Model]
EvalHook = Callable[[Model], dict]


def progressive_accelerate(model: Model, schedule: StageSchedule, finetune_hook: FinetuneHook | None = None,
                           eval_hook: EvalHook | None = None) -> list[StageResult]:
    """Quantize the schedule's stages in order, fine-tuning and evaluating after each.

    Result 0 describes the starting model. Quantized layers stay frozen; the
    fine-tune hook receives the frozen set and must return the updated model.
    """
    schedule.validate(model)
    groups = model.groups
    frozen = {n.name for n in model.nodes if isinstance(n.op, QuantizedLayer)}

    def _snapshot(idx, m):
        report = acceleration_report(m, layer_groups=groups, count_lookups=schedule.count_lookups)
        metrics = dict(eval_hook(m)) if eval_hook else {}
        return StageResult(idx, report, metrics, sorted(frozen), m)

    results = [_snapshot(0, model)]
    for idx, stage in enumerate(schedule.stages, 1):
        for name in stage.targets:
            node = model[name]
            scheme = stage.scheme_for(node, schedule.seed + idx, schedule.count_lookups)
            q = quantize_layer(node.op, scheme)
            for w in q.warnings:
                log.warning(w)
            model = model.with_op(name, q)
            frozen.add(name)
        if finetune_hook is not None:
            model = finetune_hook(model, frozenset(frozen))
        results.append(_snapshot(idx, model))
    return results


def toy_hooks(train: BoxDataset, val: BoxDataset, finetune: FinetuneConfig, seed: int = 0):
    """Fine-tune and evaluation hooks for the toy box task."""
    def finetune_hook(model, frozen):
        if finetune.steps <= 0:
            return model
        extra = set(model.names) - set(finetune.layers) if finetune.layers else set()
        return toy_finetune(model, set(frozen) | extra, (train.images, train.labels), finetune.steps,
                            lr=finetune.lr, batch=finetune.batch, weight_decay=finetune.weight_decay,
                            seed=seed)

    def eval_hook(model):
        return evaluate(model, val.images, val.labels)

    return finetune_hook, eval_hook
