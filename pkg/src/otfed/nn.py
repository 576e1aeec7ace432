"""Fully connected classifiers with hand-derived backprop.

Models are immutable stacks of (weight, bias) layers with ReLU between
layers and none after the last; the training objective is mean softmax
cross-entropy. Gradients come back as a LayerStack of the same shape so the
optimizer and regularizers can treat parameters and gradients uniformly.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, ShapeError
from .linalg import Matrix, Vector
from .seeding import rng_for

MODEL_FORMAT_VERSION = 1


@dataclass(frozen=True)
class LayerStack:
    """Ordered (weight, bias) pairs; weight l has shape (d_l, d_{l-1})."""

    layers: tuple[tuple[Matrix, Vector], ...]

    def __post_init__(self):
        if not self.layers:
            raise ShapeError("a model needs at least one layer")
        prev = None
        for idx, (w, b) in enumerate(self.layers):
            if w.ndim != 2 or b.ndim != 1:
                raise ShapeError(f"layer {idx}: weight must be 2-D and bias 1-D")
            if w.shape[0] != b.shape[0]:
                raise ShapeError(
                    f"layer {idx}: weight rows {w.shape[0]} != bias size {b.shape[0]}"
                )
            if prev is not None and w.shape[1] != prev:
                raise ShapeError(
                    f"layer {idx}: expects {w.shape[1]} inputs but layer "
                    f"{idx - 1} emits {prev}"
                )
            prev = w.shape[0]

    @property
    def dims(self) -> list[int]:
        """Full dimension chain [d_in, d_1, ..., d_out]."""
        return [self.layers[0][0].shape[1]] + [w.shape[0] for w, _ in self.layers]

    @property
    def hidden_widths(self) -> list[int]:
        return [w.shape[0] for w, _ in self.layers[:-1]]

    def arrays(self):
        for w, b in self.layers:
            yield w
            yield b

    def param_count(self) -> int:
        return sum(a.size for a in self.arrays())


@dataclass(frozen=True)
class WidthSchedule:
    """Base hidden widths plus a pruning rate in [0, 1)."""

    base_widths: tuple[int, ...]
    rate: float

    def __post_init__(self):
        if any(w < 1 for w in self.base_widths):
            raise ConfigError(f"hidden widths must be >= 1, got {self.base_widths}")
        if not 0.0 <= self.rate < 1.0:
            raise ConfigError(f"pruning rate must lie in [0, 1), got {self.rate}")


def make_submodel_shape(schedule: WidthSchedule) -> list[int]:
    """Pruned hidden widths: max(1, round((1 - rate) * base)) per layer.

    Input and output dimensions are never pruned, so only hidden widths are
    returned; rate 0 gives back the base widths unchanged.
    """
    keep = 1.0 - schedule.rate
    return [max(1, round(keep * w)) for w in schedule.base_widths]


def init_model(dims: list[int], seed: int) -> LayerStack:
    """Kaiming-uniform (fan-in) initialization, deterministic under seed."""
    if len(dims) < 2:
        raise ShapeError(f"dims chain needs input and output, got {dims}")
    rng = rng_for(seed, "init")
    layers = []
    for d_out, d_in in zip(dims[1:], dims[:-1]):
        bound = np.sqrt(6.0 / d_in)
        w = rng.uniform(-bound, bound, size=(d_out, d_in))
        b = rng.uniform(-1.0 / np.sqrt(d_in), 1.0 / np.sqrt(d_in), size=d_out)
        layers.append((w, b))
    return LayerStack(tuple(layers))


def forward(model: LayerStack, features: Matrix) -> Matrix:
    """Logits for a batch; ReLU between layers, none after the last."""
    if features.ndim != 2 or features.shape[1] != model.dims[0]:
        raise ShapeError(
            f"features {features.shape} do not match model input dim {model.dims[0]}"
        )
    act = features
    last = len(model.layers) - 1
    for idx, (w, b) in enumerate(model.layers):
        act = act @ w.T + b
        if idx != last:
            act = np.maximum(act, 0.0)
    return act


def _softmax(logits: Matrix) -> Matrix:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _check_batch(model: LayerStack, features: Matrix, labels: np.ndarray) -> None:
    if features.shape[0] == 0:
        raise ShapeError("empty batch")
    if features.shape[0] != labels.shape[0]:
        raise ShapeError(
            f"batch size mismatch: {features.shape[0]} features vs {labels.shape[0]} labels"
        )
    classes = model.dims[-1]
    if labels.min() < 0 or labels.max() >= classes:
        raise ShapeError(f"labels must lie in [0, {classes}), got range "
                         f"[{labels.min()}, {labels.max()}]")


def ce_loss(model: LayerStack, features: Matrix, labels: np.ndarray) -> float:
    """Mean softmax cross-entropy, computed with max subtraction."""
    _check_batch(model, features, labels)
    logits = forward(model, features)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    n = features.shape[0]
    return float(-log_probs[np.arange(n), labels].mean())


def ce_loss_and_grads(
    model: LayerStack, features: Matrix, labels: np.ndarray
) -> tuple[float, LayerStack]:
    """Mean cross-entropy and its gradients as a LayerStack."""
    _check_batch(model, features, labels)
    n = features.shape[0]
    last = len(model.layers) - 1

    acts = [features]
    pre = []
    for idx, (w, b) in enumerate(model.layers):
        z = acts[-1] @ w.T + b
        pre.append(z)
        acts.append(np.maximum(z, 0.0) if idx != last else z)

    probs = _softmax(pre[-1])
    shifted = pre[-1] - pre[-1].max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = float(-log_probs[np.arange(n), labels].mean())

    delta = probs.copy()
    delta[np.arange(n), labels] -= 1.0
    delta /= n

    grads: list[tuple[Matrix, Vector]] = [None] * len(model.layers)
    for idx in range(last, -1, -1):
        w, _ = model.layers[idx]
        grads[idx] = (delta.T @ acts[idx], delta.sum(axis=0))
        if idx > 0:
            delta = (delta @ w) * (pre[idx - 1] > 0.0)
    return loss, LayerStack(tuple(grads))


def sgd_step(model: LayerStack, grads: LayerStack, lr: float) -> LayerStack:
    """One gradient step; returns a new model, inputs untouched."""
    if len(model.layers) != len(grads.layers):
        raise ShapeError(
            f"incompatible layer counts: {len(model.layers)} vs {len(grads.layers)}"
        )
    out = []
    for (w, b), (gw, gb) in zip(model.layers, grads.layers):
        if w.shape != gw.shape or b.shape != gb.shape:
            raise ShapeError(f"gradient shape mismatch: {gw.shape} vs {w.shape}")
        out.append((w - lr * gw, b - lr * gb))
    return LayerStack(tuple(out))


def evaluate(model: LayerStack, data) -> float:
    """Accuracy of argmax predictions; ties break to the lowest class index."""
    features, labels = data.features, data.labels
    if features.shape[0] == 0:
        raise ShapeError("cannot evaluate on an empty dataset")
    preds = np.argmax(forward(model, features), axis=1)
    return float(np.mean(preds == labels))


def save_model(model: LayerStack, manifest_path: str | Path) -> None:
    """Write a JSON manifest plus a little-endian float64 parameter blob.

    Blob layout: per layer, row-major weight entries then the bias.
    """
    manifest_path = Path(manifest_path)
    data_name = manifest_path.stem + ".bin"
    blob = bytearray()
    for w, b in model.layers:
        blob += np.ascontiguousarray(w, dtype="<f8").tobytes()
        blob += np.ascontiguousarray(b, dtype="<f8").tobytes()
    (manifest_path.parent / data_name).write_bytes(bytes(blob))
    manifest = {
        "version": MODEL_FORMAT_VERSION,
        "dims": model.dims,
        "data_file": data_name,
    }
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n")


def load_model(manifest_path: str | Path) -> LayerStack:
    """Inverse of save_model; validates version and blob size."""
    manifest_path = Path(manifest_path)
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("version") != MODEL_FORMAT_VERSION:
        raise ConfigError(
            f"unsupported model format version {manifest.get('version')!r}"
        )
    dims = [int(d) for d in manifest["dims"]]
    raw = (manifest_path.parent / manifest["data_file"]).read_bytes()
    expected = sum(o * i + o for o, i in zip(dims[1:], dims[:-1]))
    if len(raw) != expected * 8:
        raise ConfigError(
            f"model blob holds {len(raw) // 8} values, dims {dims} need {expected}"
        )
    values = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    layers = []
    off = 0
    for d_out, d_in in zip(dims[1:], dims[:-1]):
        w = values[off : off + d_out * d_in].reshape(d_out, d_in).copy()
        off += d_out * d_in
        b = values[off : off + d_out].copy()
        off += d_out
        layers.append((w, b))
    return LayerStack(tuple(layers))
