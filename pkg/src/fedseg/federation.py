"""Round-based federated training: broadcast, local update, aggregate, adapt.

Each round every client trains from the broadcast global model, the server
aggregates with the current weights, and (for the adaptive strategy) the
weights move along the per-client validation-loss gaps. Clients are always
visited in fixed index order, so runs are bit-reproducible.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .aggregation import (
    AggregationWeights,
    aggregate,
    compute_loss_gaps,
    init_weights,
    step_size,
    update_weights,
)
from .losses import batch_dice_bce, clamp_probabilities
from .params import ParamVector
from .trainer import TrainerArchitecture, _forward_batch, init_params, train_local

STRATEGIES = ("fedavg", "fedavg_aaw")


@dataclass
class ClientHandle:
    """One simulated center: its private train/validation arrays and rng.

    Volumes and masks are stacked ``(n, V)`` float arrays. The rng is
    (re)seeded by the federation engine at the start of each run.
    """

    name: str
    train_volumes: np.ndarray
    train_masks: np.ndarray
    val_volumes: np.ndarray
    val_masks: np.ndarray
    rng: np.random.Generator | None = None

    @property
    def num_train_samples(self) -> int:
        return int(self.train_volumes.shape[0])

    @classmethod
    def from_dataset(cls, dataset) -> "ClientHandle":
        """Flatten a ClientDataset's train/validation splits for the trainer."""

        def stack(split):
            vols = np.stack([np.asarray(v, dtype=np.float64).ravel() for v, _ in split])
            masks = np.stack(
                [np.asarray(m.data, dtype=np.float64).ravel() for _, m in split]
            )
            return vols, masks

        tv, tm = stack(dataset.train)
        vv, vm = stack(dataset.validation)
        return cls(dataset.center, tv, tm, vv, vm)


@dataclass(frozen=True)
class FederationConfig:
    """Hyperparameters of one federation run."""

    total_rounds: int
    local_epochs_per_round: int = 1
    strategy: str = "fedavg"
    seed: int = 0
    learning_rate: float = 1e-4
    batch_size: int = 8
    weight_decay: float = 0.01
    hidden_units: int = 32
    # Multiplies the weight-update step schedule; 0 freezes the weights and
    # makes the adaptive strategy reproduce plain FedAvg bit for bit.
    aaw_step_scale: float = 1.0
    # Evaluate the post-aggregation loss on the previous global model instead
    # of the freshly aggregated one (the literal one-round-stale reading).
    post_loss_on_previous_global: bool = False

    def __post_init__(self):
        if self.total_rounds < 1:
            raise ValueError("total rounds must be at least 1")
        if self.local_epochs_per_round < 1:
            raise ValueError("local epochs per round must be at least 1")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if self.aaw_step_scale < 0:
            raise ValueError("step scale must be non-negative")


@dataclass
class RoundReport:
    """Everything observed in one server round, client-indexed lists of length K."""

    round: int
    strategy: str
    clients: list[str]
    step: float
    pre_agg_losses: list[float]
    post_agg_losses: list[float]
    gaps: list[float]
    weights_before: list[float]
    weights_after: list[float]
    train_losses: list[float]
    global_digest: str
    duration_sec: float = 0.0

    def to_record(self) -> dict:
        """JSON-serializable record; wall-clock timing stays in memory only
        so emitted streams are byte-identical across reruns."""
        return {
            "round": self.round,
            "strategy": self.strategy,
            "clients": self.clients,
            "step": self.step,
            "pre_agg_losses": self.pre_agg_losses,
            "post_agg_losses": self.post_agg_losses,
            "gaps": self.gaps,
            "weights_before": self.weights_before,
            "weights_after": self.weights_after,
            "train_losses": self.train_losses,
            "global_digest": self.global_digest,
        }


@dataclass
class TrainingResult:
    """Final global model, per-round reports, and final per-client local models."""

    final_global: ParamVector
    reports: list[RoundReport]
    final_locals: list[ParamVector] = field(default_factory=list)


def _digest(params: ParamVector) -> str:
    h = hashlib.sha256()
    h.update(params.layout_id.encode("utf-8"))
    h.update(params.values.tobytes())
    return h.hexdigest()


def _architecture_for(clients: Sequence[ClientHandle], config: FederationConfig) -> TrainerArchitecture:
    return TrainerArchitecture(int(clients[0].train_volumes.shape[1]), config.hidden_units)


def evaluate_loss(
    arch: TrainerArchitecture,
    params: ParamVector,
    volumes: np.ndarray,
    masks: np.ndarray,
) -> float:
    """Mean per-sample Dice-BCE loss of a model over an evaluation split."""
    if volumes.shape[0] == 0:
        raise ValueError("evaluation split must be non-empty")
    _, _, probs = _forward_batch(arch, params.values, volumes)
    dice_vec, bce_vec = batch_dice_bce(masks, clamp_probabilities(probs))
    return float(np.mean(dice_vec + bce_vec))


def run_round(
    global_params: ParamVector,
    weights: AggregationWeights,
    clients: Sequence[ClientHandle],
    config: FederationConfig,
    t: int,
) -> tuple[ParamVector, AggregationWeights, RoundReport, list[ParamVector]]:
    """One federation round: local training, aggregation, gap-driven reweighting.

    Returns the new global parameters, the weights for the next round, the
    round report, and the per-client local models.
    """
    started = time.perf_counter()
    arch = _architecture_for(clients, config)
    if global_params.layout_id != arch.layout_id:
        raise ValueError("global parameters do not match the client data layout")
    if len(clients) != len(weights):
        raise ValueError("client count does not match weight count")

    local_params: list[ParamVector] = []
    train_losses: list[float] = []
    for client in clients:
        if client.rng is None:
            raise ValueError(
                f"client {client.name!r} has no rng; run via run_federated_training or seed it first"
            )
        try:
            updated, train_loss = train_local(
                arch,
                global_params,
                client.train_volumes,
                client.train_masks,
                config.local_epochs_per_round,
                client.rng,
                learning_rate=config.learning_rate,
                batch_size=config.batch_size,
                weight_decay=config.weight_decay,
            )
        except (FloatingPointError, ValueError) as exc:
            raise RuntimeError(
                f"client {client.name!r} failed at round {t}: {exc}"
            ) from exc
        if not np.all(np.isfinite(updated.values)):
            raise RuntimeError(
                f"client {client.name!r} produced non-finite parameters at round {t}"
            )
        local_params.append(updated)
        train_losses.append(train_loss)

    pre_losses = [
        evaluate_loss(arch, p, c.val_volumes, c.val_masks)
        for p, c in zip(local_params, clients)
    ]
    new_global = aggregate(local_params, weights)
    post_model = global_params if config.post_loss_on_previous_global else new_global
    post_losses = [
        evaluate_loss(arch, post_model, c.val_volumes, c.val_masks) for c in clients
    ]
    gaps = compute_loss_gaps(pre_losses, post_losses)

    s = step_size(t, config.total_rounds) * config.aaw_step_scale
    if config.strategy == "fedavg_aaw":
        proportional = init_weights([c.num_train_samples for c in clients])
        new_weights = update_weights(weights, gaps, s, fallback=proportional.values)
    else:
        new_weights = AggregationWeights(weights.values, round=weights.round + 1)

    report = RoundReport(
        round=t,
        strategy=config.strategy,
        clients=[c.name for c in clients],
        step=s,
        pre_agg_losses=pre_losses,
        post_agg_losses=post_losses,
        gaps=[float(g) for g in gaps.gaps],
        weights_before=[float(w) for w in weights.values],
        weights_after=[float(w) for w in new_weights.values],
        train_losses=train_losses,
        global_digest=_digest(new_global),
        duration_sec=time.perf_counter() - started,
    )
    return new_global, new_weights, report, local_params


def run_federated_training(
    clients: Sequence[ClientHandle],
    config: FederationConfig,
    report_sink: Callable[[RoundReport], None] | None = None,
) -> TrainingResult:
    """Run the full federation loop for ``config.total_rounds`` rounds.

    Deterministic given (config.seed, client datasets): the initial model and
    every client's shuffling rng are derived from the seed, and clients are
    processed in fixed order. Reseeds each client's ``rng`` in place.
    """
    if len(clients) < 1:
        raise ValueError("need at least one client")
    for client in clients:
        if client.num_train_samples == 0 or client.val_volumes.shape[0] == 0:
            raise ValueError(f"client {client.name!r} has an empty split")

    seed_seq = np.random.SeedSequence(config.seed)
    init_seq, *client_seqs = seed_seq.spawn(len(clients) + 1)
    for client, child in zip(clients, client_seqs):
        client.rng = np.random.default_rng(child)

    arch = _architecture_for(clients, config)
    global_params = init_params(arch, np.random.default_rng(init_seq))
    weights = init_weights([c.num_train_samples for c in clients])

    reports: list[RoundReport] = []
    local_params: list[ParamVector] = []
    for t in range(config.total_rounds):
        global_params, weights, report, local_params = run_round(
            global_params, weights, clients, config, t
        )
        reports.append(report)
        if report_sink is not None:
            report_sink(report)
    return TrainingResult(global_params, reports, local_params)


def run_local_only(
    clients: Sequence[ClientHandle],
    config: FederationConfig,
    report_sink: Callable[[RoundReport], None] | None = None,
) -> list[TrainingResult]:
    """Isolated per-center training: each client alone, no cross-client mixing.

    Implemented as a one-client federation per center, so each center trains
    for ``total_rounds * local_epochs_per_round`` epochs and a single-client
    federated run collapses to exactly this trajectory.
    """
    solo_config = replace(config, strategy="fedavg")
    return [
        run_federated_training([client], solo_config, report_sink=report_sink)
        for client in clients
    ]
