"""Memorization scoring, grouped evaluation and model diagnostics.

An example's memorization score is the fraction of an ensemble of
original (trained-with) models that classify it correctly minus the same
fraction over retrained (trained-without) models, so it estimates how
much of the example's accuracy depended on its own presence in training.
Scores are banded by percentile rank and the unlearned model is compared
to the retrained baseline band by band; small per-band gaps mean the
unlearned model removed what retraining would have removed, and nothing
more.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import fedsim, nn
from .data import Dataset, Partition
from .errors import ShapeError

DEFAULT_BANDS = (95.0, 90.0, 85.0, 80.0)


@dataclass(frozen=True)
class MemScoreTable:
    """Per-example memorization scores over the unlearning set."""

    example_ids: np.ndarray
    scores: np.ndarray
    boundaries: tuple[float, ...] | None = None
    band_index: np.ndarray | None = None
    degenerate: bool = False

    def __post_init__(self) -> None:
        ids = np.asarray(self.example_ids, dtype=np.intp)
        scores = np.asarray(self.scores, dtype=np.float64)
        if ids.shape != scores.shape or ids.ndim != 1 or ids.size == 0:
            raise ValueError("ids and scores must be equal-length non-empty vectors")
        if not np.all(np.isfinite(scores)):
            raise ValueError("scores must be finite")
        object.__setattr__(self, "example_ids", ids)
        object.__setattr__(self, "scores", scores)
        if self.band_index is not None:
            bands = np.asarray(self.band_index, dtype=np.intp)
            if bands.shape != ids.shape:
                raise ValueError("band assignment must cover every example")
            object.__setattr__(self, "band_index", bands)

    @property
    def size(self) -> int:
        return self.example_ids.size

    def num_bands(self) -> int:
        if self.boundaries is None:
            raise ValueError("table has no band assignment yet")
        return len(self.boundaries) + 1


def band_label(boundaries: tuple[float, ...], index: int) -> str:
    """Human-readable percentile range, e.g. ``(95,100]`` for index 0."""
    edges = (100.0,) + tuple(boundaries) + (0.0,)
    hi, lo = edges[index], edges[index + 1]
    return f"({lo:g},{hi:g}]"


def band_bounds(boundaries: tuple[float, ...], index: int) -> tuple[float, float]:
    edges = (100.0,) + tuple(boundaries) + (0.0,)
    return edges[index + 1], edges[index]


def _ensemble_correct_fraction(
    models: Sequence[nn.ModelParams], batch: nn.Batch
) -> np.ndarray:
    fractions = np.zeros(batch.size, dtype=np.float64)
    for m in models:
        fractions += nn.predict(m, batch.features) == batch.labels
    return fractions / len(models)


def memorization_scores(
    originals: Sequence[nn.ModelParams],
    retrained: Sequence[nn.ModelParams],
    du: nn.Batch,
    ids: np.ndarray,
) -> MemScoreTable:
    """Correct-classification fraction gap between the two ensembles.

    Scores lie in [-1, 1]; high scores mark examples the original models
    get right only because the unlearning data was present in training.
    """
    if not originals or not retrained:
        raise ValueError("both ensembles must be non-empty")
    arch = originals[0].arch
    if any(m.arch != arch for m in list(originals) + list(retrained)):
        raise ShapeError("ensemble members must share one architecture")
    ids = np.asarray(ids, dtype=np.intp)
    if ids.size != du.size:
        raise ValueError("one id per unlearning example required")
    orig = _ensemble_correct_fraction(originals, du)
    retr = _ensemble_correct_fraction(retrained, du)
    return MemScoreTable(example_ids=ids, scores=orig - retr)


def group_by_percentile(
    table: MemScoreTable, boundaries: tuple[float, ...] = DEFAULT_BANDS
) -> MemScoreTable:
    """Assign rank-based percentile bands, highest scores first.

    Examples are sorted by score descending (ties by ascending id) and the
    top (100 - b)% of ranks fill each band cumulatively, with ceilings
    taken so the band sizes always sum to the table size. Tables smaller
    than the band count are permitted but flagged degenerate, as is any
    empty band.
    """
    bounds = tuple(float(b) for b in boundaries)
    if any(not 0.0 < b <= 100.0 for b in bounds):
        raise ValueError("boundaries must be percentiles in (0, 100]")
    if list(bounds) != sorted(bounds, reverse=True) or len(set(bounds)) != len(bounds):
        raise ValueError("boundaries must be strictly descending")
    n = table.size
    order = np.lexsort((table.example_ids, -table.scores))

    cums = [
        min(n, math.ceil((100.0 - b) / 100.0 * n - 1e-9)) for b in bounds
    ] + [n]
    band_index = np.empty(n, dtype=np.intp)
    start = 0
    counts = []
    for band, stop in enumerate(cums):
        stop = max(stop, start)
        band_index[order[start:stop]] = band
        counts.append(stop - start)
        start = stop
    degenerate = n < len(cums) or any(c == 0 for c in counts)
    return replace(
        table, boundaries=bounds, band_index=band_index, degenerate=degenerate
    )


@dataclass(frozen=True)
class BandReport:
    label: str
    lo: float
    hi: float
    size: int
    acc_unlearned: float | None
    acc_retrained: float | None
    delta: float | None


@dataclass(frozen=True)
class GMEReport:
    """Grouped comparison of an unlearned model against retraining."""

    bands: tuple[BandReport, ...]
    unlearn_acc_unlearned: float
    unlearn_acc_retrained: float
    unlearn_delta: float
    test_acc_unlearned: float
    test_acc_retrained: float
    local_fairness: float | None = None
    rounds_to_peak_unlearned: int | None = None
    rounds_to_peak_retrained: int | None = None
    seconds_to_peak_unlearned: float | None = None
    seconds_to_peak_retrained: float | None = None


def _accuracy_over(
    models: Sequence[nn.ModelParams], batch: nn.Batch, mask: np.ndarray
) -> float | None:
    if not mask.any():
        return None
    sub = nn.Batch(batch.features[mask], batch.labels[mask])
    return float(np.mean([nn.accuracy(m, sub) for m in models]))


def gme_report(
    unlearned: nn.ModelParams,
    retrained: nn.ModelParams | Sequence[nn.ModelParams],
    table: MemScoreTable,
    du: nn.Batch,
    test: nn.Batch,
    *,
    fairness: float | None = None,
    unlearned_history: Sequence[fedsim.HistoryEntry] | None = None,
    retrained_history: Sequence[fedsim.HistoryEntry] | None = None,
) -> GMEReport:
    """Per-band and whole-set accuracy comparison plus attached summaries.

    ``retrained`` may be a single baseline model or the whole retrained
    ensemble; with an ensemble the comparison column is the mean member
    accuracy. Empty bands report no accuracy instead of a fabricated zero.
    """
    if table.band_index is None or table.boundaries is None:
        raise ValueError("table must be banded first (group_by_percentile)")
    if table.size != du.size:
        raise ValueError("table and unlearning batch sizes differ")
    baselines = [retrained] if isinstance(retrained, nn.ModelParams) else list(retrained)

    bands = []
    for i in range(table.num_bands()):
        mask = table.band_index == i
        acc_u = _accuracy_over([unlearned], du, mask)
        acc_r = _accuracy_over(baselines, du, mask)
        lo, hi = band_bounds(table.boundaries, i)
        bands.append(
            BandReport(
                label=band_label(table.boundaries, i),
                lo=lo,
                hi=hi,
                size=int(mask.sum()),
                acc_unlearned=acc_u,
                acc_retrained=acc_r,
                delta=None if acc_u is None else abs(acc_u - acc_r),
            )
        )

    all_mask = np.ones(du.size, dtype=bool)
    acc_u_all = _accuracy_over([unlearned], du, all_mask)
    acc_r_all = _accuracy_over(baselines, du, all_mask)

    rounds_u = seconds_u = rounds_r = seconds_r = None
    if unlearned_history:
        rounds_u, seconds_u = time_to_peak(unlearned_history)
    if retrained_history:
        rounds_r, seconds_r = time_to_peak(retrained_history)

    return GMEReport(
        bands=tuple(bands),
        unlearn_acc_unlearned=acc_u_all,
        unlearn_acc_retrained=acc_r_all,
        unlearn_delta=abs(acc_u_all - acc_r_all),
        test_acc_unlearned=nn.accuracy(unlearned, test),
        test_acc_retrained=float(np.mean([nn.accuracy(m, test) for m in baselines])),
        local_fairness=fairness,
        rounds_to_peak_unlearned=rounds_u,
        rounds_to_peak_retrained=rounds_r,
        seconds_to_peak_unlearned=seconds_u,
        seconds_to_peak_retrained=seconds_r,
    )


def fairness_from_deltas(deltas: Sequence[float]) -> float:
    """Sum of absolute deviations of per-client loss changes from their mean.

    Exactly zero when all deltas are equal (the mean is not re-derived in
    that case, so float rounding cannot produce a spurious residue).
    """
    d = np.asarray(deltas, dtype=np.float64)
    if np.all(d == d[0]):
        return 0.0
    return float(np.abs(d - d.mean()).sum())


def local_fairness(
    unlearned: nn.ModelParams,
    original: nn.ModelParams,
    part: Partition,
    ds: Dataset,
) -> float:
    """How unevenly unlearning changed the remaining clients' losses.

    Zero exactly when every remaining client's loss changed by the same
    amount; larger values mean some clients paid more than others.
    """
    deltas = []
    for k in part.remaining_clients:
        batch = fedsim.client_batch(ds, part, k)
        deltas.append(nn.mean_loss(unlearned, batch) - nn.mean_loss(original, batch))
    return fairness_from_deltas(deltas)


@dataclass(frozen=True)
class ParamDistance:
    l2: float
    cosine: float | None


def param_distance(m1: nn.ModelParams, m2: nn.ModelParams) -> ParamDistance:
    """L2 distance and cosine similarity between flat parameter vectors.

    Cosine is undefined (None) when either vector is all zeros.
    """
    if m1.arch != m2.arch:
        raise ShapeError("models must share one architecture")
    v1, v2 = m1.values, m2.values
    l2 = float(np.linalg.norm(v1 - v2))
    n1, n2 = float(np.linalg.norm(v1)), float(np.linalg.norm(v2))
    cosine = None if n1 == 0.0 or n2 == 0.0 else float(v1 @ v2 / (n1 * n2))
    return ParamDistance(l2=l2, cosine=cosine)


def loss_along_path(
    m_from: nn.ModelParams,
    m_to: nn.ModelParams,
    steps: int,
    eval_data: nn.Batch,
) -> list[tuple[float, float]]:
    """Loss at evenly spaced linear interpolates between two models.

    Endpoints evaluate the unmixed models exactly.
    """
    if steps < 2:
        raise ValueError("need at least the two endpoints")
    if m_from.arch != m_to.arch:
        raise ShapeError("models must share one architecture")
    curve = []
    for i in range(steps):
        t = i / (steps - 1)
        if i == 0:
            model = m_from
        elif i == steps - 1:
            model = m_to
        else:
            model = nn.ModelParams(
                m_from.arch, (1.0 - t) * m_from.values + t * m_to.values
            )
        curve.append((t, nn.mean_loss(model, eval_data)))
    return curve


def time_to_peak(history: Sequence[fedsim.HistoryEntry]) -> tuple[int, float]:
    """Round and elapsed seconds at first attainment of the best test accuracy."""
    if not history:
        raise ValueError("history is empty")
    best = max(h.test_accuracy for h in history)
    for h in history:
        if h.test_accuracy == best:
            return h.round, h.elapsed_s
    raise AssertionError("unreachable")


# ---------------------------------------------------------------------------
# serialization

WALL_CLOCK_KEYS = ("seconds_to_peak",)


def report_to_dict(
    report: GMEReport, *, method: dict | None = None, config_hash: str | None = None
) -> dict:
    return {
        "config_hash": config_hash,
        "method": method or {},
        "bands": [
            {
                "range": [b.lo, b.hi],
                "label": b.label,
                "n": b.size,
                "acc_unlearned": b.acc_unlearned,
                "acc_retrained": b.acc_retrained,
                "delta": b.delta,
            }
            for b in report.bands
        ],
        "unlearning_set": {
            "acc_unlearned": report.unlearn_acc_unlearned,
            "acc_retrained": report.unlearn_acc_retrained,
            "delta": report.unlearn_delta,
        },
        "test_accuracy": {
            "unlearned": report.test_acc_unlearned,
            "retrained": report.test_acc_retrained,
        },
        "local_fairness": report.local_fairness,
        "rounds_to_peak": {
            "unlearned": report.rounds_to_peak_unlearned,
            "retrained": report.rounds_to_peak_retrained,
        },
        "seconds_to_peak": {
            "unlearned": report.seconds_to_peak_unlearned,
            "retrained": report.seconds_to_peak_retrained,
        },
    }


def save_report_json(
    report: GMEReport,
    path: str | Path,
    *,
    method: dict | None = None,
    config_hash: str | None = None,
) -> None:
    doc = report_to_dict(report, method=method, config_hash=config_hash)
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")


def load_report_json(path: str | Path) -> dict:
    return json.loads(Path(path).read_text())


def strip_wall_clock(doc: dict) -> dict:
    """Copy of a report document without its wall-clock fields."""
    return {k: v for k, v in doc.items() if k not in WALL_CLOCK_KEYS}


def save_report_csv(
    report: GMEReport, path: str | Path, config_hash: str | None = None
) -> None:
    """One flat row per band for plotting."""
    lines = []
    if config_hash is not None:
        lines.append(f"# config_hash={config_hash}")
    lines.append("band_lo,band_hi,n,acc_unlearned,acc_retrained,delta")
    for b in report.bands:
        cells = [
            f"{b.lo:g}",
            f"{b.hi:g}",
            str(b.size),
            "" if b.acc_unlearned is None else repr(b.acc_unlearned),
            "" if b.acc_retrained is None else repr(b.acc_retrained),
            "" if b.delta is None else repr(b.delta),
        ]
        lines.append(",".join(cells))
    Path(path).write_text("\n".join(lines) + "\n")


def save_scores_csv(
    table: MemScoreTable, path: str | Path, config_hash: str | None = None
) -> None:
    """Scores as CSV: id, score, band label (empty when unbanded)."""
    lines = []
    if config_hash is not None:
        lines.append(f"# config_hash={config_hash}")
    lines.append("id,score,band")
    for i in range(table.size):
        band = ""
        if table.band_index is not None and table.boundaries is not None:
            band = band_label(table.boundaries, int(table.band_index[i]))
        lines.append(f"{int(table.example_ids[i])},{float(table.scores[i])!r},{band}")
    Path(path).write_text("\n".join(lines) + "\n")
