"""Client-side local training with an anchor drift penalty.

The local objective is mean cross-entropy plus penalty * rate * squared
distance to the dispatched anchor model, so heavily pruned clients (large
rate) are pulled back harder. rate = 0 disables the penalty entirely and
the loop is then bit-identical to plain minibatch SGD.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import LabeledDataset
from .errors import ConfigError, ShapeError, SolverError
from .linalg import sq_norm_diff
from .nn import LayerStack, ce_loss_and_grads, sgd_step
from .seeding import rng_for


@dataclass(frozen=True)
class LocalTrainConfig:
    """penalty is the drift-penalty weight; the rest is plain SGD shape."""

    penalty: float = 1.0
    epochs: int = 5
    lr: float = 0.001
    batch_size: int = 256

    def __post_init__(self):
        if self.penalty < 0:
            raise ConfigError(f"penalty must be >= 0, got {self.penalty}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass(frozen=True)
class LocalTrainReport:
    """Outcome of one client's local pass.

    loss_trace holds per-epoch means of (cross-entropy, weighted drift
    penalty as it enters the objective); drift_sq is the squared parameter
    distance between the final model and the anchor.
    """

    final_model: LayerStack
    drift_sq: float
    loss_trace: tuple[tuple[float, float], ...]


def drift_penalty(model: LayerStack, anchor: LayerStack, rate: float) -> float:
    """rate-scaled squared parameter distance to the anchor (biases included)."""
    return rate * sq_norm_diff(model, anchor)


def local_train(
    anchor: LayerStack,
    data: LabeledDataset,
    rate: float,
    cfg: LocalTrainConfig,
    seed: int,
) -> LocalTrainReport:
    """Minibatch SGD from the anchor with the drift penalty folded in.

    The anchor stays fixed for the whole call; each epoch reshuffles with a
    generator derived from (seed, epoch), and the trailing partial batch is
    kept. The penalty gradient 2 * penalty * rate * (param - anchor) is
    added per batch; when penalty * rate == 0 that code path is skipped so
    the run matches an unregularized trainer bit for bit.
    """
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"rate must lie in [0, 1), got {rate}")
    model = anchor
    strength = cfg.penalty * rate
    n = len(data)
    trace = []
    for epoch in range(cfg.epochs):
        order = rng_for(seed, "epoch", epoch).permutation(n)
        ce_sum = 0.0
        pen_sum = 0.0
        batches = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            ce, grads = ce_loss_and_grads(model, data.features[idx], data.labels[idx])
            if strength != 0.0:
                pen = strength * sq_norm_diff(model, anchor)
                grads = _add_drift_grads(grads, model, anchor, 2.0 * strength)
            else:
                pen = 0.0
            if not np.isfinite(ce) or not np.isfinite(pen):
                raise SolverError(
                    f"non-finite local loss at epoch {epoch}, batch {batches}; "
                    "reduce the learning rate"
                )
            model = sgd_step(model, grads, cfg.lr)
            ce_sum += ce
            pen_sum += pen
            batches += 1
        trace.append((ce_sum / batches, pen_sum / batches))
    return LocalTrainReport(
        final_model=model,
        drift_sq=sq_norm_diff(model, anchor),
        loss_trace=tuple(trace),
    )


def _add_drift_grads(
    grads: LayerStack, model: LayerStack, anchor: LayerStack, coeff: float
) -> LayerStack:
    if len(model.layers) != len(anchor.layers):
        raise ShapeError(
            f"incompatible layer counts: {len(model.layers)} vs {len(anchor.layers)}"
        )
    out = []
    for (gw, gb), (w, b), (aw, ab) in zip(grads.layers, model.layers, anchor.layers):
        out.append((gw + coeff * (w - aw), gb + coeff * (b - ab)))
    return LayerStack(tuple(out))
