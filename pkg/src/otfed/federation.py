"""Round loop for simulated federated learning with heterogeneous submodels.

One process plays server and clients: per round it samples participants,
dispatches a personalized submodel to each (transport-aligned against the
client's history, or a positional/magnitude/random slice), runs anchored
local training, lifts the results back to the global shape, and aggregates
by sample-count weights. Everything is driven by derived seeds, so a config
plus a root seed reproduces a run bit for bit.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterator

import numpy as np

from .alignment import (
    FusionConfig,
    aggregate,
    baseline_extract,
    extraction_indices,
    gather_submodel,
    lift_to_global,
    personalize_submodel,
)
from .data import (
    LabeledDataset,
    PartitionSpec,
    TaskConfig,
    build_dataset,
    partition,
    split_train_test,
)
from .errors import ConfigError, ShapeError
from .localtrain import LocalTrainConfig, local_train
from .nn import LayerStack, WidthSchedule, ce_loss, evaluate, init_model, make_submodel_shape
from .ot import OtConfig
from .seeding import derive_seed, rng_for

DISPATCH_KINDS = ("transport", "fixed_position", "magnitude", "random")
LOCAL_KINDS = ("anchored", "plain")
AGGREGATE_KINDS = ("transport", "positional")


@dataclass(frozen=True)
class MethodSpec:
    """Which dispatch / local-training / aggregation variant runs."""

    dispatch: str = "transport"
    local: str = "anchored"
    aggregate: str = "transport"
    fusion_alpha: float = 0.5

    def __post_init__(self):
        if self.dispatch not in DISPATCH_KINDS:
            raise ConfigError(f"unknown dispatch {self.dispatch!r}")
        if self.local not in LOCAL_KINDS:
            raise ConfigError(f"unknown local mode {self.local!r}")
        if self.aggregate not in AGGREGATE_KINDS:
            raise ConfigError(f"unknown aggregate {self.aggregate!r}")
        if not 0.0 <= self.fusion_alpha <= 1.0:
            raise ConfigError(f"fusion_alpha must lie in [0, 1], got {self.fusion_alpha}")

    def label(self) -> str:
        return f"{self.dispatch}+{self.local}+{self.aggregate}"


@dataclass(frozen=True)
class PartitionParams:
    """Scheme parameters; client count and seed come from the run config."""

    scheme: str = "dirichlet"
    classes_per_client: int | None = None
    beta: float | None = 0.1
    domains: int | None = None
    shift_scale: float | None = None


@dataclass(frozen=True)
class FederationConfig:
    rounds: int = 200
    client_count: int = 20
    join_ratio: float = 1.0
    seed: int = 0
    hidden_widths: tuple[int, ...] = (32, 32)
    rate_set: tuple[float, ...] = (0.0, 0.25, 0.5, 0.75)
    rate_mode: str = "static"
    resample_every: int = 10
    rate_assignment: tuple[float, ...] | None = None
    method: MethodSpec = MethodSpec()
    local: LocalTrainConfig = LocalTrainConfig()
    ot: OtConfig = OtConfig()
    task: TaskConfig = TaskConfig()
    partition: PartitionParams = PartitionParams()

    def __post_init__(self):
        if self.rounds < 1:
            raise ConfigError(f"rounds must be >= 1, got {self.rounds}")
        if self.client_count < 1:
            raise ConfigError(f"client_count must be >= 1, got {self.client_count}")
        if not 0.0 < self.join_ratio <= 1.0:
            raise ConfigError(f"join_ratio must lie in (0, 1], got {self.join_ratio}")
        if not self.rate_set:
            raise ConfigError("rate_set must not be empty")
        for r in self.rate_set:
            if not 0.0 <= r < 1.0:
                raise ConfigError(f"rates must lie in [0, 1), got {r}")
        if self.rate_mode not in ("static", "dynamic"):
            raise ConfigError(f"unknown rate_mode {self.rate_mode!r}")
        if self.resample_every < 1:
            raise ConfigError(f"resample_every must be >= 1, got {self.resample_every}")
        if self.rate_assignment is not None:
            if len(self.rate_assignment) != self.client_count:
                raise ConfigError(
                    f"rate_assignment lists {len(self.rate_assignment)} rates "
                    f"for {self.client_count} clients"
                )
            for r in self.rate_assignment:
                if not 0.0 <= r < 1.0:
                    raise ConfigError(f"rates must lie in [0, 1), got {r}")

    def partition_spec(self) -> PartitionSpec:
        p = self.partition
        return PartitionSpec(
            scheme=p.scheme,
            client_count=self.client_count,
            seed=derive_seed(self.seed, "partition"),
            classes_per_client=p.classes_per_client,
            beta=p.beta,
            domains=p.domains,
            shift_scale=p.shift_scale,
        )


@dataclass(frozen=True)
class ClientRoundStats:
    client_id: int
    acc: float
    drift_sq: float
    ce_loss: float
    sar_loss: float


@dataclass(frozen=True)
class RoundRecord:
    round: int
    global_acc: float
    global_loss: float
    mean_client_acc: float
    per_client: tuple[ClientRoundStats, ...]
    participating: tuple[int, ...]


@dataclass
class ClientState:
    id: int
    train: LabeledDataset
    test: LabeledDataset
    rate: float
    weight: float
    history: LayerStack | None = None
    last_round: int | None = field(default=None)


def resample_rates(
    states: list[ClientState],
    rate_set: tuple[float, ...],
    round_index: int,
    cfg: FederationConfig,
    global_model: LayerStack,
) -> list[ClientState]:
    """Draw fresh per-client rates and reshape stored histories to match.

    A shrinking history is magnitude-extracted from itself; a growing one
    cannot supply the missing neurons, so it is re-extracted from the
    current global model instead.
    """
    draws = rng_for(cfg.seed, "rates", round_index).choice(
        np.asarray(rate_set, dtype=np.float64), size=len(states)
    )
    for state, rate in zip(states, draws):
        rate = float(rate)
        if rate == state.rate:
            continue
        state.rate = rate
        if state.history is None:
            continue
        new_widths = make_submodel_shape(WidthSchedule(cfg.hidden_widths, rate))
        old_widths = state.history.hidden_widths
        if all(nw <= ow for nw, ow in zip(new_widths, old_widths)):
            state.history = baseline_extract(state.history, new_widths, "magnitude")
        else:
            state.history = baseline_extract(global_model, new_widths, "magnitude")
    return states


def positional_aggregate(
    prev_global: LayerStack,
    entries: list[tuple[LayerStack, list[np.ndarray], float]],
) -> LayerStack:
    """Average submodels at their recorded global positions.

    Each parameter is the weight-renormalized mean over the clients whose
    kept-index maps cover it; positions no client covers keep their previous
    global value.
    """
    if not entries:
        raise ShapeError("positional aggregation needs at least one submodel")
    total = sum(w for _, _, w in entries)
    if abs(total - 1.0) > 1e-9:
        raise ConfigError(f"aggregation weights sum to {total!r}, expected 1")
    hidden_count = len(prev_global.layers) - 1
    layers = []
    for l, (w_g, b_g) in enumerate(prev_global.layers):
        w_acc = np.zeros_like(w_g)
        w_mass = np.zeros_like(w_g)
        b_acc = np.zeros_like(b_g)
        b_mass = np.zeros_like(b_g)
        for model, kept, wt in entries:
            if len(kept) != hidden_count:
                raise ShapeError(
                    f"kept-index map lists {len(kept)} hidden layers, expected {hidden_count}"
                )
            rows = kept[l] if l < hidden_count else np.arange(w_g.shape[0])
            cols = kept[l - 1] if 0 < l else np.arange(w_g.shape[1])
            w_sub, b_sub = model.layers[l]
            if w_sub.shape != (rows.size, cols.size):
                raise ShapeError(
                    f"layer {l}: submodel weight {w_sub.shape} does not sit at "
                    f"{rows.size}x{cols.size} kept positions"
                )
            cells = np.ix_(rows, cols)
            w_acc[cells] += wt * w_sub
            w_mass[cells] += wt
            b_acc[rows] += wt * b_sub
            b_mass[rows] += wt
        w_new = np.where(
            w_mass > 0, np.divide(w_acc, w_mass, out=np.zeros_like(w_acc), where=w_mass > 0), w_g
        )
        b_new = np.where(
            b_mass > 0, np.divide(b_acc, b_mass, out=np.zeros_like(b_acc), where=b_mass > 0), b_g
        )
        layers.append((w_new, b_new))
    return LayerStack(tuple(layers))


class Federation:
    """Holds the mutable run state; one instance per experiment run."""

    def __init__(self, cfg: FederationConfig):
        self.cfg = cfg
        base = build_dataset(cfg.task, derive_seed(cfg.seed, "data"))
        shards, weights = partition(base, cfg.partition_spec())
        self.clients: list[ClientState] = []
        rate_draws = (
            cfg.rate_assignment
            if cfg.rate_assignment is not None
            else rng_for(cfg.seed, "rates", "setup").choice(
                np.asarray(cfg.rate_set, dtype=np.float64), size=cfg.client_count
            )
        )
        for i, shard in enumerate(shards):
            train, test = split_train_test(shard, derive_seed(cfg.seed, "split", i))
            self.clients.append(
                ClientState(
                    id=i,
                    train=train,
                    test=test,
                    rate=float(rate_draws[i]),
                    weight=float(weights[i]),
                )
            )
        dims = [base.features.shape[1]] + list(cfg.hidden_widths) + [base.class_count]
        self.global_model = init_model(dims, derive_seed(cfg.seed, "init"))
        self._union_test = LabeledDataset(
            np.concatenate([c.test.features for c in self.clients]),
            np.concatenate([c.test.labels for c in self.clients]),
            base.class_count,
        )

    # -- round machinery ---------------------------------------------------

    def _sample_participants(self, round_index: int) -> list[int]:
        count = max(1, math.ceil(self.cfg.join_ratio * self.cfg.client_count))
        picked = rng_for(self.cfg.seed, "participants", round_index).choice(
            self.cfg.client_count, size=count, replace=False
        )
        return sorted(int(i) for i in picked)

    def _dispatch(self, client: ClientState, round_index: int, *, for_eval: bool = False):
        """Personalized submodel for a client plus its positional index map."""
        method = self.cfg.method
        widths = make_submodel_shape(WidthSchedule(self.cfg.hidden_widths, client.rate))
        if method.dispatch == "transport":
            # positional map for this dispatch is the initial first-k structure
            kept = extraction_indices(self.global_model, widths, "fixed_position")
            if client.history is None:
                return gather_submodel(self.global_model, kept), kept
            fused = personalize_submodel(
                self.global_model,
                client.history,
                FusionConfig(alpha=method.fusion_alpha, ot=self.cfg.ot),
            )
            return fused.model, kept
        tag = "eval" if for_eval else "dispatch"
        seed = derive_seed(self.cfg.seed, tag, round_index, client.id)
        kept = extraction_indices(self.global_model, widths, method.dispatch, seed)
        return gather_submodel(self.global_model, kept), kept

    def _local_config(self) -> LocalTrainConfig:
        if self.cfg.method.local == "plain":
            return replace(self.cfg.local, penalty=0.0)
        return self.cfg.local

    def play_round(self, round_index: int) -> RoundRecord:
        cfg = self.cfg
        if (
            cfg.rate_mode == "dynamic"
            and round_index > 0
            and round_index % cfg.resample_every == 0
        ):
            resample_rates(self.clients, cfg.rate_set, round_index, cfg, self.global_model)

        participants = self._sample_participants(round_index)
        local_cfg = self._local_config()
        results = []
        for cid in participants:
            client = self.clients[cid]
            try:
                anchor, kept = self._dispatch(client, round_index)
                report = local_train(
                    anchor,
                    client.train,
                    client.rate,
                    local_cfg,
                    derive_seed(cfg.seed, "train", round_index, cid),
                )
            except (ValueError, RuntimeError) as exc:
                raise type(exc)(f"round {round_index}, client {cid}: {exc}") from exc
            results.append((cid, report, kept))

        prev_global = self.global_model
        total_weight = sum(self.clients[cid].weight for cid, _, _ in results)
        if cfg.method.aggregate == "transport":
            lifted = [
                (
                    lift_to_global(report.final_model, prev_global, cfg.ot).model,
                    self.clients[cid].weight / total_weight,
                )
                for cid, report, _ in results
            ]
            self.global_model = aggregate(lifted)
        else:
            self.global_model = positional_aggregate(
                prev_global,
                [
                    (report.final_model, kept, self.clients[cid].weight / total_weight)
                    for cid, report, kept in results
                ],
            )

        for cid, report, _ in results:
            self.clients[cid].history = report.final_model
            self.clients[cid].last_round = round_index

        accs = self._client_accuracies(round_index)
        by_id = {cid: report for cid, report, _ in results}
        per_client = tuple(
            ClientRoundStats(
                client_id=cid,
                acc=accs[cid],
                drift_sq=by_id[cid].drift_sq,
                ce_loss=by_id[cid].loss_trace[-1][0],
                sar_loss=by_id[cid].loss_trace[-1][1],
            )
            for cid in participants
        )
        return RoundRecord(
            round=round_index,
            global_acc=evaluate(self.global_model, self._union_test),
            global_loss=self._global_loss(),
            mean_client_acc=float(np.mean(accs)),
            per_client=per_client,
            participating=tuple(participants),
        )

    def personalized_submodel(self, client_id: int, round_index: int) -> LayerStack:
        """Regenerate a client's current personalized submodel (no training)."""
        model, _ = self._dispatch(self.clients[client_id], round_index, for_eval=True)
        return model

    def _client_accuracies(self, round_index: int) -> list[float]:
        """Accuracy of every client's regenerated submodel on its test shard."""
        out = []
        for client in self.clients:
            sub, _ = self._dispatch(client, round_index, for_eval=True)
            out.append(evaluate(sub, client.test))
        return out

    def _global_loss(self) -> float:
        return sum(
            client.weight * ce_loss(self.global_model, client.train.features, client.train.labels)
            for client in self.clients
        )

    def rounds(self) -> Iterator[RoundRecord]:
        for t in range(self.cfg.rounds):
            yield self.play_round(t)


def iter_federation(cfg: FederationConfig) -> Iterator[RoundRecord]:
    yield from Federation(cfg).rounds()


def run_federation(cfg: FederationConfig) -> list[RoundRecord]:
    """Play every round and collect the records."""
    return list(iter_federation(cfg))


def run_fedavg_reference(cfg: FederationConfig) -> list[RoundRecord]:
    """Classical weighted full-model averaging, as a degeneracy reference.

    Requires every rate to be zero (all clients hold the full model). Uses
    the same derived seeds as the main loop, so an all-zero-rate transport
    run can be compared round by round.
    """
    rates = cfg.rate_assignment if cfg.rate_assignment is not None else cfg.rate_set
    if any(r != 0.0 for r in rates):
        raise ConfigError("fedavg reference requires every client rate to be 0")
    eng = Federation(cfg)
    records = []
    for t in range(cfg.rounds):
        participants = eng._sample_participants(t)
        results = []
        for cid in participants:
            client = eng.clients[cid]
            report = local_train(
                eng.global_model,
                client.train,
                0.0,
                eng._local_config(),
                derive_seed(cfg.seed, "train", t, cid),
            )
            results.append((cid, report))
        total = sum(eng.clients[cid].weight for cid, _ in results)
        eng.global_model = aggregate(
            [(rep.final_model, eng.clients[cid].weight / total) for cid, rep in results]
        )
        for cid, rep in results:
            eng.clients[cid].history = rep.final_model
            eng.clients[cid].last_round = t
        accs = [evaluate(eng.global_model, c.test) for c in eng.clients]
        by_id = {cid: rep for cid, rep in results}
        records.append(
            RoundRecord(
                round=t,
                global_acc=evaluate(eng.global_model, eng._union_test),
                global_loss=eng._global_loss(),
                mean_client_acc=float(np.mean(accs)),
                per_client=tuple(
                    ClientRoundStats(
                        client_id=cid,
                        acc=accs[cid],
                        drift_sq=by_id[cid].drift_sq,
                        ce_loss=by_id[cid].loss_trace[-1][0],
                        sar_loss=by_id[cid].loss_trace[-1][1],
                    )
                    for cid in participants
                ),
                participating=tuple(participants),
            )
        )
    return records
