"""Neuron alignment between a global model and client submodels.

Two directions share the same progressive layer-wise machinery:

* `personalize_submodel` walks the stack from the input side, remaps the
  global layer's input coordinates through the previous layer's plan,
  matches global output neurons to client ones by transporting over row
  distances (bias appended), projects the global layer into the client's
  coordinates, and blends it with the client's stored weights. The final
  layer is matched by identity because class outputs already share
  semantics.
* `lift_to_global` runs the reverse matching (client neurons as the source,
  global neurons as the target) and barycentrically projects the trained
  client layer up to the full global shape, so heterogeneous submodels can
  be averaged coordinate-free.

Position-based extraction baselines (`baseline_extract`) live here too since
they produce the same submodel shapes by simpler means.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import AlignmentError, ConfigError, MarginalError, ShapeError, SolverError
from .linalg import pairwise_euclidean
from .nn import LayerStack
from .ot import (
    OtConfig,
    TransportPlan,
    column_normalize,
    identity_plan,
    solve,
    uniform_marginal,
)
from .seeding import rng_for

EXTRACTION_STRATEGIES = ("fixed_position", "magnitude", "random")


@dataclass(frozen=True)
class FusionConfig:
    """Blend coefficient for personalization plus the OT solver settings.

    alpha = 1 keeps only the aligned global weights, alpha = 0 returns the
    client history untouched.
    """

    alpha: float = 0.5
    ot: OtConfig = OtConfig()

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"fusion alpha must lie in [0, 1], got {self.alpha}")


@dataclass(frozen=True)
class AlignmentResult:
    """Aligned model plus the per-layer plans and transport objectives."""

    model: LayerStack
    plans: tuple[TransportPlan, ...]
    per_layer_objective: tuple[float, ...]


def _with_bias(w: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.concatenate([w, b[:, None]], axis=1)


def _check_compatible(big: LayerStack, small: LayerStack, what: str) -> None:
    if len(big.layers) != len(small.layers):
        raise ShapeError(
            f"{what}: layer counts differ ({len(big.layers)} vs {len(small.layers)})"
        )
    if big.dims[0] != small.dims[0]:
        raise ShapeError(
            f"{what}: input dims differ ({big.dims[0]} vs {small.dims[0]})"
        )
    if big.dims[-1] != small.dims[-1]:
        raise ShapeError(
            f"{what}: class counts differ ({big.dims[-1]} vs {small.dims[-1]})"
        )
    for l, (dg, dc) in enumerate(zip(big.dims[1:-1], small.dims[1:-1])):
        if dc > dg:
            raise ShapeError(
                f"{what}: layer {l} width {dc} exceeds the global width {dg}"
            )


def _solve_layer(cost, mu, nu, cfg: OtConfig, layer: int) -> TransportPlan:
    try:
        return solve(cost, mu, nu, cfg)
    except (SolverError, MarginalError) as exc:
        raise AlignmentError(f"transport failed at layer {layer}: {exc}") from exc


def personalize_submodel(
    global_model: LayerStack, history: LayerStack, cfg: FusionConfig
) -> AlignmentResult:
    """Align the global model onto a client's historical submodel and fuse.

    Progressive matching from the input side: layer l's global weights are
    first remapped through the column-normalized previous plan, matched to
    the historical neurons over row distances (bias appended), projected
    into the client's coordinate frame, then blended
    alpha * aligned + (1 - alpha) * history. The output layer uses the
    identity matching.
    """
    _check_compatible(global_model, history, "personalize")
    last = len(global_model.layers) - 1
    prev_map = None  # None encodes an exact identity input remap
    plans, objectives, fused = [], [], []
    for l, ((wg, bg), (wc, bc)) in enumerate(zip(global_model.layers, history.layers)):
        wg_remap = wg if prev_map is None else wg @ prev_map
        cost = pairwise_euclidean(_with_bias(wg_remap, bg), _with_bias(wc, bc))
        if l == last:
            plan = identity_plan(wg.shape[0])
            aligned_w, aligned_b = wg_remap, bg
            col_plan = None
        else:
            plan = _solve_layer(
                cost,
                uniform_marginal(wg.shape[0]),
                uniform_marginal(wc.shape[0]),
                cfg.ot,
                l,
            )
            col_plan = column_normalize(plan)
            aligned_w = col_plan.T @ wg_remap
            aligned_b = col_plan.T @ bg
        plans.append(plan)
        objectives.append(plan.objective(cost))
        fused.append(_blend(aligned_w, aligned_b, wc, bc, cfg.alpha))
        prev_map = col_plan
    return AlignmentResult(LayerStack(tuple(fused)), tuple(plans), tuple(objectives))


def lift_to_global(
    client_model: LayerStack, global_ref: LayerStack, ot_cfg: OtConfig
) -> AlignmentResult:
    """Project a trained client submodel up to the global model's shape.

    Reverse matching: client neurons are the transport source, global
    neurons the target. Every projection is a convex combination over the
    source side (plan normalized per target neuron): rows via the
    normalized plan transposed, the next layer's input columns via the
    previous layer's normalized plan directly. Convex combinations keep
    each parameter coordinate at source scale, so repeated dispatch, lift
    and averaging cycles neither shrink nor inflate the weights; a
    mass-splitting remap instead loses a (1 - rate) factor per hidden
    layer per round and the aggregate collapses to zero. Output layer
    matches by identity.
    """
    _check_compatible(global_ref, client_model, "lift")
    last = len(client_model.layers) - 1
    prev_map = None  # target-normalized previous plan; None is identity
    plans, objectives, lifted = [], [], []
    for l, ((wc, bc), (wg, bg)) in enumerate(zip(client_model.layers, global_ref.layers)):
        wc_remap = wc if prev_map is None else wc @ prev_map
        cost = pairwise_euclidean(_with_bias(wc_remap, bc), _with_bias(wg, bg))
        if l == last:
            plan = identity_plan(wc.shape[0])
            lifted.append((wc_remap, bc))
            prev_map = None
        else:
            plan = _solve_layer(
                cost,
                uniform_marginal(wc.shape[0]),
                uniform_marginal(wg.shape[0]),
                ot_cfg,
                l,
            )
            up = column_normalize(plan)
            lifted.append((up.T @ wc_remap, up.T @ bc))
            prev_map = up
        plans.append(plan)
        objectives.append(plan.objective(cost))
    return AlignmentResult(LayerStack(tuple(lifted)), tuple(plans), tuple(objectives))


def _blend(aw, ab, cw, cb, alpha: float):
    # exact passthrough at the endpoints keeps degeneracy checks bit-stable
    if alpha == 0.0:
        return cw.copy(), cb.copy()
    if alpha == 1.0:
        return aw.copy(), ab.copy()
    return alpha * aw + (1.0 - alpha) * cw, alpha * ab + (1.0 - alpha) * cb


def aggregate(entries: list[tuple[LayerStack, float]]) -> LayerStack:
    """Weighted parameter average of full-shape models.

    Weights must sum to 1 within 1e-9; the reduction runs in the order given
    so callers control bit-level determinism.
    """
    if not entries:
        raise ShapeError("aggregate needs at least one model")
    total = sum(w for _, w in entries)
    if abs(total - 1.0) > 1e-9:
        raise ConfigError(f"aggregation weights sum to {total!r}, expected 1")
    dims = entries[0][0].dims
    for m, _ in entries[1:]:
        if m.dims != dims:
            raise ShapeError(f"aggregate dims mismatch: {m.dims} vs {dims}")
    layers = []
    for l in range(len(entries[0][0].layers)):
        w_acc = np.zeros_like(entries[0][0].layers[l][0])
        b_acc = np.zeros_like(entries[0][0].layers[l][1])
        for model, weight in entries:
            w_acc = w_acc + weight * model.layers[l][0]
            b_acc = b_acc + weight * model.layers[l][1]
        layers.append((w_acc, b_acc))
    return LayerStack(tuple(layers))


def extraction_indices(
    model: LayerStack, hidden_widths: list[int], strategy: str, seed: int = 0
) -> list[np.ndarray]:
    """Kept output-neuron indices per hidden layer, ascending.

    fixed_position keeps the first k neurons, magnitude the k largest rows
    by L2 norm of (incoming weights, bias), random a seeded uniform draw
    without replacement. Input features and class outputs are always kept.
    """
    if strategy not in EXTRACTION_STRATEGIES:
        raise ConfigError(f"unknown extraction strategy {strategy!r}")
    base = model.hidden_widths
    if len(hidden_widths) != len(base):
        raise ShapeError(
            f"shape has {len(hidden_widths)} hidden layers, model has {len(base)}"
        )
    kept = []
    for l, (k, d) in enumerate(zip(hidden_widths, base)):
        if not 1 <= k <= d:
            raise ShapeError(f"layer {l}: cannot keep {k} of {d} neurons")
        if strategy == "fixed_position":
            idx = np.arange(k)
        elif strategy == "magnitude":
            w, b = model.layers[l]
            norms = np.sqrt(np.sum(w * w, axis=1) + b * b)
            idx = np.sort(np.argsort(-norms, kind="stable")[:k])
        else:
            idx = np.sort(rng_for(seed, "extract", l).choice(d, size=k, replace=False))
        kept.append(idx)
    return kept


def gather_submodel(model: LayerStack, kept: list[np.ndarray]) -> LayerStack:
    """Slice a submodel out of `model` along the kept-neuron index maps.

    Each kept neuron keeps only the incoming columns of the previous layer's
    kept neurons; the output layer keeps every class row.
    """
    layers = []
    prev = np.arange(model.dims[0])
    for l, (w, b) in enumerate(model.layers):
        rows = kept[l] if l < len(kept) else np.arange(w.shape[0])
        layers.append((w[np.ix_(rows, prev)].copy(), b[rows].copy()))
        prev = rows
    return LayerStack(tuple(layers))


def baseline_extract(
    model: LayerStack, hidden_widths: list[int], strategy: str, seed: int = 0
) -> LayerStack:
    """Extract a submodel by position, magnitude, or random selection."""
    return gather_submodel(model, extraction_indices(model, hidden_widths, strategy, seed))
