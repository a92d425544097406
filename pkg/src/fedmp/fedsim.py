"""Federated averaging: local training, aggregation, full runs, ensembles.

All randomness flows from explicit integer seeds. Per-round, per-client
training seeds are derived with :func:`derive_seed`, so a run is a pure
function of (config, partition, dataset, init model). Clients are always
visited in ascending id order, which fixes the aggregation order and
therefore the exact bit pattern of the result.

``client_batch`` is the single access point through which training ever
touches client-local data; tests trace it to assert that retraining and
unlearning never consume unlearning-client examples. Metric evaluation
(test / unlearning-set accuracy) reads the dataset directly, since it is
the experimenter's measurement rather than part of the protocol.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import nn
from .data import Dataset, Partition
from .errors import ConfigError, ShapeError


def derive_seed(*parts: int) -> int:
    """Stable composite seed from integer components."""
    seq = np.random.SeedSequence([int(p) for p in parts])
    return int(seq.generate_state(1)[0])


@dataclass(frozen=True)
class FLConfig:
    """Hyperparameters of one federated training run."""

    arch: nn.ArchSpec
    rounds: int
    local_epochs: int = 3
    batch_size: int = 32
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    seed: int = 0
    eval_every: int = 1

    def __post_init__(self) -> None:
        if self.rounds < 1:
            raise ConfigError("rounds must be >= 1")
        if self.local_epochs < 1:
            raise ConfigError("local_epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ConfigError("learning rate must be non-negative")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")


@dataclass(frozen=True)
class HistoryEntry:
    round: int
    test_accuracy: float
    unlearn_accuracy: float | None
    elapsed_s: float


@dataclass(frozen=True)
class TrainedRun:
    """Final model of a run plus its evaluation trajectory."""

    final_model: nn.ModelParams
    history: tuple[HistoryEntry, ...]
    seed_lineage: tuple[int, ...]


def client_batch(ds: Dataset, part: Partition, k: int) -> nn.Batch:
    """Client k's local training data."""
    ids = part.client_examples[k]
    return nn.Batch(ds.features[ids], ds.labels[ids])


def local_train(
    model: nn.ModelParams, batch: nn.Batch, cfg: FLConfig, seed: int
) -> nn.ModelParams:
    """``local_epochs`` epochs of seeded-shuffle mini-batch optimization.

    Optimizer state starts fresh each call; the input model is unchanged.
    """
    gen = np.random.default_rng(seed)
    state = nn.init_opt_state(cfg.optimizer, cfg.learning_rate, model.arch.param_count)
    current = model
    n = batch.size
    for _ in range(cfg.local_epochs):
        perm = gen.permutation(n)
        for start in range(0, n, cfg.batch_size):
            take = perm[start : start + cfg.batch_size]
            mini = nn.Batch(batch.features[take], batch.labels[take])
            _, grad = nn.loss_and_grad(current, mini)
            current, state = nn.opt_step(current, state, grad)
    return current


def average_models(models: list[nn.ModelParams]) -> nn.ModelParams:
    """Elementwise arithmetic mean of the parameter vectors."""
    if not models:
        raise ValueError("cannot average an empty model list")
    arch = models[0].arch
    if any(m.arch != arch for m in models):
        raise ShapeError("all models must share one architecture")
    stacked = np.stack([m.values for m in models])
    return nn.ModelParams(arch, stacked.mean(axis=0))


def _unlearning_batch(ds: Dataset, part: Partition) -> nn.Batch | None:
    ids = part.unlearning_ids()
    if ids.size == 0:
        return None
    return nn.Batch(ds.features[ids], ds.labels[ids])


def run_fedavg(
    cfg: FLConfig,
    part: Partition,
    ds: Dataset,
    participating: set[int] | tuple[int, ...],
    init: nn.ModelParams,
    test: nn.Batch,
) -> TrainedRun:
    """T rounds of broadcast, local training and unweighted averaging.

    With ``participating`` set to the remaining clients and a fresh init,
    this is exactly the retrained-from-scratch baseline.
    """
    clients = sorted(int(k) for k in participating)
    if not clients:
        raise ValueError("participating client set must be non-empty")
    if any(not 0 <= k < part.num_clients for k in clients):
        raise ValueError("participating client id out of range")

    unlearn_eval = _unlearning_batch(ds, part)
    batches = {k: client_batch(ds, part, k) for k in clients}
    model = init
    history: list[HistoryEntry] = []
    start = time.monotonic()
    for rnd in range(1, cfg.rounds + 1):
        updated = [
            local_train(model, batches[k], cfg, derive_seed(cfg.seed, rnd, k))
            for k in clients
        ]
        model = average_models(updated)
        if rnd % cfg.eval_every == 0 or rnd == cfg.rounds:
            history.append(
                HistoryEntry(
                    round=rnd,
                    test_accuracy=nn.accuracy(model, test),
                    unlearn_accuracy=(
                        nn.accuracy(model, unlearn_eval) if unlearn_eval else None
                    ),
                    elapsed_s=time.monotonic() - start,
                )
            )
    return TrainedRun(
        final_model=model, history=tuple(history), seed_lineage=(cfg.seed,)
    )


def _ensemble(
    cfg: FLConfig,
    part: Partition,
    ds: Dataset,
    participating: tuple[int, ...],
    count: int,
    base_seed: int,
    test: nn.Batch,
) -> list[TrainedRun]:
    if count < 1:
        raise ValueError("ensemble size must be >= 1")
    runs = []
    for j in range(count):
        member_seed = int(base_seed) + j
        init = nn.init_model(cfg.arch, member_seed)
        member_cfg = replace(cfg, seed=member_seed)
        run = run_fedavg(member_cfg, part, ds, participating, init, test)
        runs.append(replace(run, seed_lineage=(member_seed,)))
    return runs


def retrain_ensemble(
    cfg: FLConfig,
    part: Partition,
    ds: Dataset,
    j: int,
    base_seed: int,
    test: nn.Batch,
) -> list[TrainedRun]:
    """J independent from-scratch runs over the remaining clients only.

    Member i uses seed ``base_seed + i`` for both its init and its run.
    """
    if not part.remaining_clients:
        raise ValueError("partition has no remaining clients")
    return _ensemble(cfg, part, ds, part.remaining_clients, j, base_seed, test)


def original_ensemble(
    cfg: FLConfig,
    part: Partition,
    ds: Dataset,
    s: int,
    base_seed: int,
    test: nn.Batch,
) -> list[TrainedRun]:
    """S independent runs over all clients (unlearning ones included)."""
    everyone = tuple(range(part.num_clients))
    return _ensemble(cfg, part, ds, everyone, s, base_seed, test)


def save_history_csv(
    run: TrainedRun, path: str | Path, config_hash: str | None = None
) -> None:
    """history as CSV: round,test_acc,unlearn_acc,elapsed_s."""
    lines = []
    if config_hash is not None:
        lines.append(f"# config_hash={config_hash}")
    lines.append("round,test_acc,unlearn_acc,elapsed_s")
    for h in run.history:
        ua = "" if h.unlearn_accuracy is None else repr(h.unlearn_accuracy)
        lines.append(f"{h.round},{h.test_accuracy!r},{ua},{h.elapsed_s!r}")
    Path(path).write_text("\n".join(lines) + "\n")
