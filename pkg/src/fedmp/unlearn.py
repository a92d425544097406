"""Unlearning by memorization pruning, plus baseline unlearners.

The canonical pipeline has three stages: rank parameters by the average
remaining-client gradient magnitude and take the lowest fraction ``rho``
(these low-traffic "redundant" parameters are where client-specific
memorization concentrates), re-initialize them with the original
Kaiming-uniform scheme, then fine-tune on the remaining clients only.
The canonical selection never touches unlearning-client data; the
alternative strategies (salun, localized, deep/shallow layer variants)
exist for ablations and do require a gradient on the unlearning set.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import fedsim, nn
from .data import Dataset, Partition
from .errors import ConfigError, DataError, NumericError

STRATEGY_KINDS = (
    "redundant_remaining",
    "salun",
    "localized",
    "deep_layers",
    "shallow_layers",
)

RHO_MIN = 0.05
RHO_MAX = 0.95


@dataclass(frozen=True)
class SelectionStrategy:
    """How to pick the parameter set to reset, and how much of it."""

    kind: str
    rho: float
    layer_split: int = 1

    def __post_init__(self) -> None:
        if self.kind not in STRATEGY_KINDS:
            raise ConfigError(f"unknown selection strategy {self.kind!r}")
        if not 0.0 <= self.rho <= 1.0:
            raise ConfigError("rho must lie in [0, 1]")

    @property
    def needs_unlearning_gradient(self) -> bool:
        return self.kind != "redundant_remaining"


@dataclass(frozen=True)
class UnlearnRequest:
    """Everything the unlearning pipeline needs besides the dataset.

    ``ft_config.rounds`` is ignored; the fine-tuning length comes from
    ``ft_rounds`` so that zero rounds (reset only) is expressible.
    """

    model: nn.ModelParams
    part: Partition
    strategy: SelectionStrategy
    ft_config: fedsim.FLConfig
    ft_rounds: int = 40
    reinit_seed: int = 0

    def __post_init__(self) -> None:
        if not self.part.remaining_clients:
            raise DataError("no remaining clients to fine-tune on")
        if self.ft_rounds < 0:
            raise ConfigError("ft_rounds must be >= 0")


@dataclass(frozen=True)
class UnlearnRun:
    """Unlearned model with trajectory plus selection audit fields."""

    run: fedsim.TrainedRun
    selected: np.ndarray
    threshold: float
    strategy: SelectionStrategy

    @property
    def final_model(self) -> nn.ModelParams:
        return self.run.final_model


def avg_remaining_gradient(
    model: nn.ModelParams, part: Partition, ds: Dataset
) -> np.ndarray:
    """Unweighted mean over remaining clients of their full-batch gradient.

    Each client's gradient is the mean cross-entropy gradient over its
    entire local dataset, all evaluated at the frozen input model.
    """
    if not part.remaining_clients:
        raise DataError("no remaining clients")
    grads = []
    for k in part.remaining_clients:
        batch = fedsim.client_batch(ds, part, k)
        _, g = nn.loss_and_grad(model, batch)
        grads.append(g)
    return np.stack(grads).mean(axis=0)


def pooled_unlearning_gradient(
    model: nn.ModelParams, part: Partition, ds: Dataset
) -> np.ndarray:
    """Mean cross-entropy gradient over all unlearning-client examples.

    Only the ablation strategies need this; it deliberately reads
    unlearning-client data through the traced access path.
    """
    clients = sorted(part.unlearning_clients)
    if not clients:
        raise DataError("no unlearning clients marked")
    batches = [fedsim.client_batch(ds, part, k) for k in clients]
    pooled = nn.Batch(
        np.vstack([b.features for b in batches]),
        np.concatenate([b.labels for b in batches]),
    )
    _, g = nn.loss_and_grad(model, pooled)
    return g


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def select_parameters(
    strategy: SelectionStrategy,
    model: nn.ModelParams,
    grad_remaining: np.ndarray | None = None,
    grad_unlearn: np.ndarray | None = None,
) -> np.ndarray:
    """Indices of the parameters to reset, sorted ascending.

    Exactly round(rho * P) indices are selected (half-up), except for the
    layer-restricted strategies when the restricted pool is smaller. Ties
    in the ranking score break toward the lower parameter index.
    """
    p = model.arch.param_count
    n = _round_half_up(strategy.rho * p)

    if strategy.kind == "redundant_remaining":
        if grad_remaining is None:
            raise ValueError("redundant_remaining needs the remaining-client gradient")
        if np.asarray(grad_remaining).shape != (p,):
            raise ValueError("gradient length must match parameter count")
        scores = np.abs(np.asarray(grad_remaining, dtype=np.float64))
        order = np.lexsort((np.arange(p), scores))  # ascending magnitude
        return np.sort(order[:n])

    if grad_unlearn is None:
        raise ValueError(f"strategy {strategy.kind!r} needs the unlearning gradient")
    if np.asarray(grad_unlearn).shape != (p,):
        raise ValueError("gradient length must match parameter count")
    gu = np.abs(np.asarray(grad_unlearn, dtype=np.float64))
    if strategy.kind == "localized":
        scores = np.abs(model.values) * gu
    else:
        scores = gu

    if strategy.kind in ("deep_layers", "shallow_layers"):
        layers = nn.param_layer_ids(model.arch)
        if not 0 <= strategy.layer_split <= model.arch.num_layers:
            raise ConfigError("layer_split outside the layer range")
        if strategy.kind == "deep_layers":
            pool = np.flatnonzero(layers >= strategy.layer_split)
        else:
            pool = np.flatnonzero(layers < strategy.layer_split)
        order = pool[np.lexsort((pool, -scores[pool]))]
        return np.sort(order[: min(n, pool.size)])

    order = np.lexsort((np.arange(p), -scores))  # descending score
    return np.sort(order[:n])


@dataclass(frozen=True)
class RhoSuggestion:
    rho: float
    degenerate: bool


def threshold_from_importance(
    grad_remaining: np.ndarray, decade_gap: int = 2
) -> RhoSuggestion:
    """Suggest a pruning ratio from the gradient-magnitude distribution.

    Gradient magnitudes span several orders of magnitude with a sharp rise
    in the top few percent. The knee decade is the highest power of ten
    10^(e+1) still covered by at least 1% of parameters; everything more
    than ``decade_gap`` decades below the knee counts as redundant, and the
    suggested ratio is that fraction, clamped to [0.05, 0.95]. Distributions
    without a usable knee (all zero, all equal) return the clamp boundary
    with the degenerate flag set.
    """
    mags = np.abs(np.asarray(grad_remaining, dtype=np.float64))
    if mags.size == 0:
        raise ValueError("gradient vector must be non-empty")
    if decade_gap < 1:
        raise ValueError("decade_gap must be >= 1")
    positive = mags[mags > 0]
    if positive.size == 0:
        return RhoSuggestion(RHO_MIN, True)

    # boundary comparisons tolerate one part in 1e9 so values constructed
    # exactly at a decade edge land on the intended side
    tol = 1.0 - 1e-9
    e_hi = int(np.floor(np.log10(mags.max())))
    e_lo = int(np.floor(np.log10(positive.min()))) - 1
    knee = None
    for e in range(e_hi, e_lo - 1, -1):
        if np.mean(mags >= (10.0 ** (e + 1)) * tol) >= 0.01:
            knee = e
            break
    if knee is None:
        return RhoSuggestion(RHO_MIN, True)
    cutoff = 10.0 ** (knee - decade_gap + 1)
    raw = float(np.mean(mags < cutoff * tol))
    rho = float(np.clip(raw, RHO_MIN, RHO_MAX))
    degenerate = bool(mags.max() == mags.min() or raw != rho)
    return RhoSuggestion(rho, degenerate)


def fedmp_unlearn(req: UnlearnRequest, ds: Dataset, test: nn.Batch) -> UnlearnRun:
    """Locate, reset and fine-tune: the full pruning-based unlearning pass.

    Returns the fine-tuned model with its trajectory and the audit fields
    (selected indices and the realized selection threshold).
    """
    g_r = avg_remaining_gradient(req.model, req.part, ds)
    g_u = (
        pooled_unlearning_gradient(req.model, req.part, ds)
        if req.strategy.needs_unlearning_gradient
        else None
    )
    selected = select_parameters(req.strategy, req.model, g_r, g_u)

    if selected.size == 0:
        threshold = 0.0
    elif req.strategy.kind == "redundant_remaining":
        threshold = float(np.abs(g_r[selected]).max())
    elif req.strategy.kind == "localized":
        threshold = float((np.abs(req.model.values) * np.abs(g_u))[selected].min())
    else:
        threshold = float(np.abs(g_u[selected]).min())

    reset = nn.reinit_params(req.model, selected, req.reinit_seed)
    if req.ft_rounds == 0:
        run = fedsim.TrainedRun(
            final_model=reset, history=(), seed_lineage=(req.ft_config.seed,)
        )
    else:
        cfg = replace(req.ft_config, rounds=req.ft_rounds)
        run = fedsim.run_fedavg(
            cfg, req.part, ds, req.part.remaining_clients, reset, test
        )
    return UnlearnRun(run=run, selected=selected, threshold=threshold, strategy=req.strategy)


def gradient_ascent_unlearn(
    model: nn.ModelParams,
    du: nn.Batch,
    steps: int,
    ascent_lr: float,
    radius: float,
) -> nn.ModelParams:
    """Gradient ascent on the unlearning data, projected to an L2 ball.

    After every ascent step the parameters are projected back onto the
    ball of the given radius around the starting model, so the result can
    never drift arbitrarily far. Unlike the pruning pipeline this baseline
    consumes the unlearning data itself.
    """
    if radius <= 0:
        raise ValueError("projection radius must be positive")
    if steps < 0:
        raise ValueError("steps must be >= 0")
    center = model.values
    current = model
    for _ in range(steps):
        loss, g = nn.loss_and_grad(current, du)
        if not np.isfinite(loss):
            raise NumericError("ascent diverged to a non-finite loss")
        values = current.values + ascent_lr * g
        offset = values - center
        norm = float(np.linalg.norm(offset))
        if norm > radius:
            values = center + offset * (radius / norm)
        current = nn.ModelParams(model.arch, values)
    return current


def save_manifest(
    result: UnlearnRun,
    path: str | Path,
    *,
    reinit_seed: int,
    ft_rounds: int,
    config_hash: str | None = None,
) -> None:
    """Key=value audit manifest for one unlearning run."""
    s = result.strategy
    lines = [
        "# fedmp unlearn manifest v1",
        f"strategy={s.kind}",
        f"rho={s.rho!r}",
        f"layer_split={s.layer_split}",
        f"threshold={result.threshold!r}",
        f"selected={result.selected.size}",
        f"reinit_seed={reinit_seed}",
        f"ft_rounds={ft_rounds}",
    ]
    if config_hash is not None:
        lines.append(f"config_hash={config_hash}")
    Path(path).write_text("\n".join(lines) + "\n")


def save_indices(indices: np.ndarray, path: str | Path) -> None:
    """Selected parameter indices, one per line, ascending."""
    Path(path).write_text(
        "\n".join(str(int(i)) for i in np.sort(indices)) + ("\n" if indices.size else "")
    )
