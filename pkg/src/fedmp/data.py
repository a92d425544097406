"""Synthetic classification data and client partitioning.

The generator places one Gaussian cluster per (class, cluster) pair on a
random orthonormal frame scaled so that every pair of cluster centers is
exactly ``center_spread`` apart; separability is then controlled by the
spread-to-noise ratio alone. A configurable number of "memorized"
outliers is injected far from every center (distance at least six noise
sigmas) with uniformly random labels; partitioners pin outlier block j
to client j so experiments that mark the lowest client ids as
unlearning clients get a known population of unlearnable examples.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError

_DIRICHLET_RETRIES = 100
DATASET_HEADER = "# fedmp dataset v1"


@dataclass(frozen=True)
class SynthConfig:
    """Geometry and size of a synthetic cluster-mixture dataset."""

    num_classes: int
    samples: int
    input_dim: int
    noise_sigma: float
    center_spread: float
    clusters_per_class: int = 1
    outliers_per_unlearning_client: int = 0
    num_unlearning_clients: int = 1
    geometry_seed: int = 0

    def __post_init__(self) -> None:
        if self.num_classes < 2:
            raise ConfigError("need at least two classes")
        if self.samples < self.num_classes:
            raise ConfigError("need at least one sample per class")
        if self.noise_sigma <= 0:
            raise ConfigError("noise sigma must be positive")
        if self.center_spread <= 0:
            raise ConfigError("center spread must be positive")
        if self.clusters_per_class < 1:
            raise ConfigError("need at least one cluster per class")
        if self.outliers_per_unlearning_client < 0 or self.num_unlearning_clients < 0:
            raise ConfigError("outlier counts must be non-negative")
        if self.input_dim < self.num_classes * self.clusters_per_class:
            raise ConfigError(
                "input_dim must be >= num_classes * clusters_per_class "
                "to place mutually equidistant cluster centers"
            )

    @property
    def total_outliers(self) -> int:
        return self.outliers_per_unlearning_client * self.num_unlearning_clients


@dataclass(frozen=True)
class Dataset:
    """Feature matrix, labels, stable example ids, outlier bookkeeping.

    ``outlier_ids``/``outlier_slots`` mark synthetic memorized outliers
    and the unlearning-client block (0, 1, ...) each belongs to; both are
    empty for datasets without injected outliers.
    """

    features: np.ndarray
    labels: np.ndarray
    example_ids: np.ndarray
    outlier_ids: np.ndarray
    outlier_slots: np.ndarray

    def __post_init__(self) -> None:
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.intp)
        ids = np.asarray(self.example_ids, dtype=np.intp)
        out = np.asarray(self.outlier_ids, dtype=np.intp)
        slots = np.asarray(self.outlier_slots, dtype=np.intp)
        if x.ndim != 2 or x.shape[0] < 1:
            raise DataError("features must be a non-empty 2-d matrix")
        if y.shape != (x.shape[0],) or ids.shape != (x.shape[0],):
            raise DataError("labels and example_ids must match the sample count")
        if len(np.unique(ids)) != ids.size:
            raise DataError("example ids must be unique")
        if y.min() < 0:
            raise DataError("labels must be non-negative")
        if out.shape != slots.shape:
            raise DataError("outlier ids and slots must be parallel")
        for name, arr in (("features", x), ("labels", y), ("example_ids", ids),
                          ("outlier_ids", out), ("outlier_slots", slots)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def size(self) -> int:
        return self.features.shape[0]

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1


def plain_dataset(features: np.ndarray, labels: np.ndarray) -> Dataset:
    """Dataset with sequential ids and no outlier bookkeeping."""
    n = np.asarray(features).shape[0]
    empty = np.zeros(0, dtype=np.intp)
    return Dataset(features, labels, np.arange(n), empty, empty)


def class_centers(cfg: SynthConfig) -> np.ndarray:
    """Cluster centers, one row per (class, cluster), mutually equidistant.

    Centers are scaled orthonormal directions, so the distance between any
    two of them is exactly ``center_spread``. Depends only on the config's
    geometry seed, which lets train and test splits share one geometry.
    """
    m = cfg.num_classes * cfg.clusters_per_class
    gen = np.random.default_rng(cfg.geometry_seed)
    basis = np.linalg.qr(gen.normal(size=(cfg.input_dim, m)))[0]
    return (cfg.center_spread / np.sqrt(2.0)) * basis.T


def gen_synthetic(cfg: SynthConfig, seed: int) -> Dataset:
    """Sample the cluster mixture plus injected memorized outliers.

    Base examples are grouped by class (near-equal class sizes); outliers
    are appended last, so they carry the highest example ids. Each outlier
    sits at distance >= 6 * noise_sigma from every cluster center and gets
    a uniformly random label.
    """
    gen = np.random.default_rng(seed)
    centers = class_centers(cfg)
    c, d = cfg.num_classes, cfg.input_dim
    sizes = np.full(c, cfg.samples // c, dtype=np.intp)
    sizes[: cfg.samples % c] += 1

    feats, labels = [], []
    for cls in range(c):
        n_cls = int(sizes[cls])
        which = gen.integers(0, cfg.clusters_per_class, size=n_cls)
        mu = centers[cls * cfg.clusters_per_class + which]
        feats.append(mu + cfg.noise_sigma * gen.normal(size=(n_cls, d)))
        labels.append(np.full(n_cls, cls, dtype=np.intp))

    center_norm = float(np.linalg.norm(centers[0]))
    n_out = cfg.total_outliers
    for _ in range(n_out):
        direction = gen.normal(size=d)
        direction /= np.linalg.norm(direction)
        radius = center_norm + 6.0 * cfg.noise_sigma + gen.uniform(0.0, cfg.center_spread)
        feats.append((radius * direction)[None, :])
        labels.append(np.array([gen.integers(0, c)], dtype=np.intp))

    features = np.vstack(feats)
    labels_arr = np.concatenate(labels)
    total = features.shape[0]
    outlier_ids = np.arange(total - n_out, total, dtype=np.intp)
    slots = np.repeat(
        np.arange(cfg.num_unlearning_clients, dtype=np.intp),
        cfg.outliers_per_unlearning_client,
    )
    return Dataset(features, labels_arr, np.arange(total), outlier_ids, slots)


@dataclass(frozen=True)
class Partition:
    """Assignment of example ids to clients plus the unlearning-client set."""

    client_examples: tuple[np.ndarray, ...]
    unlearning_clients: frozenset[int] = frozenset()

    def __post_init__(self) -> None:
        clients = tuple(
            np.asarray(ids, dtype=np.intp) for ids in self.client_examples
        )
        if not clients:
            raise DataError("partition needs at least one client")
        stacked = np.concatenate(clients) if clients else np.zeros(0, dtype=np.intp)
        if len(np.unique(stacked)) != stacked.size:
            raise DataError("an example id appears in more than one client")
        bad = [k for k in self.unlearning_clients if not 0 <= k < len(clients)]
        if bad:
            raise DataError(f"unlearning client ids out of range: {bad}")
        for ids in clients:
            ids.setflags(write=False)
        object.__setattr__(self, "client_examples", clients)
        object.__setattr__(self, "unlearning_clients", frozenset(self.unlearning_clients))

    @property
    def num_clients(self) -> int:
        return len(self.client_examples)

    @property
    def remaining_clients(self) -> tuple[int, ...]:
        return tuple(
            k for k in range(self.num_clients) if k not in self.unlearning_clients
        )

    def unlearning_ids(self) -> np.ndarray:
        """Example ids held by unlearning clients, ascending."""
        held = [self.client_examples[k] for k in sorted(self.unlearning_clients)]
        if not held:
            return np.zeros(0, dtype=np.intp)
        return np.sort(np.concatenate(held))


def _attach_outliers(clients: list[np.ndarray], ds: Dataset, k: int) -> list[np.ndarray]:
    if ds.outlier_ids.size == 0:
        return clients
    if ds.outlier_slots.size and int(ds.outlier_slots.max()) >= k:
        raise DataError(
            f"dataset expects outlier slots up to {int(ds.outlier_slots.max())}, "
            f"but only {k} clients were requested"
        )
    out = [ids.copy() for ids in clients]
    for slot in range(int(ds.outlier_slots.max()) + 1):
        block = ds.outlier_ids[ds.outlier_slots == slot]
        out[slot] = np.concatenate([out[slot], block])
    return out


def _base_ids(ds: Dataset) -> np.ndarray:
    return np.setdiff1d(ds.example_ids, ds.outlier_ids)


def partition_iid(ds: Dataset, k: int, seed: int) -> Partition:
    """Shuffle and split into K near-equal chunks (sizes differ by <= 1)."""
    if k <= 0:
        raise ValueError("client count must be positive")
    if k > ds.size:
        raise ValueError("more clients than examples")
    gen = np.random.default_rng(seed)
    perm = gen.permutation(_base_ids(ds))
    clients = [chunk.astype(np.intp) for chunk in np.array_split(perm, k)]
    return Partition(tuple(_attach_outliers(clients, ds, k)))


def partition_dirichlet(
    ds: Dataset, k: int, alpha: float, seed: int, *, disjoint: bool = False
) -> Partition:
    """Per-class Dirichlet split across K clients.

    For each class, client proportions are drawn from Dirichlet(alpha) and
    the class's examples assigned multinomially. With ``disjoint=True`` the
    zero-concentration limit is taken literally instead: class c goes
    wholly to client c mod K, so clients share no classes at all.

    If a sampled assignment leaves some client empty, the whole assignment
    is redrawn (bounded retries) so every client owns data.
    """
    if k < 1:
        raise ValueError("client count must be positive")
    if not disjoint and alpha <= 0:
        raise ValueError("alpha must be positive")
    base = _base_ids(ds)
    labels = ds.labels[base]
    classes = np.unique(labels)

    if disjoint:
        if k > classes.size:
            raise DataError(
                "disjoint mode needs at least as many classes as clients"
            )
        clients = [np.zeros(0, dtype=np.intp) for _ in range(k)]
        for cls in classes:
            owner = int(cls) % k
            clients[owner] = np.concatenate([clients[owner], base[labels == cls]])
        return Partition(tuple(_attach_outliers(clients, ds, k)))

    gen = np.random.default_rng(seed)
    for _ in range(_DIRICHLET_RETRIES):
        clients = [[] for _ in range(k)]
        for cls in classes:
            ids = base[labels == cls]
            proportions = gen.dirichlet(np.full(k, alpha))
            owner = gen.choice(k, size=ids.size, p=proportions)
            for target in range(k):
                clients[target].extend(ids[owner == target])
        if all(clients):
            arrs = [np.array(sorted(ids), dtype=np.intp) for ids in clients]
            return Partition(tuple(_attach_outliers(arrs, ds, k)))
    raise DataError(
        f"could not draw a partition without empty clients in "
        f"{_DIRICHLET_RETRIES} attempts (K={k}, alpha={alpha})"
    )


def mark_unlearning(part: Partition, clients: set[int]) -> Partition:
    """Designate unlearning clients; the remaining set must be non-empty."""
    chosen = frozenset(int(c) for c in clients)
    bad = [c for c in chosen if not 0 <= c < part.num_clients]
    if bad:
        raise ValueError(f"unlearning client ids out of range: {sorted(bad)}")
    if len(chosen) >= part.num_clients:
        raise ValueError("cannot unlearn every client; remaining set would be empty")
    return replace(part, unlearning_clients=chosen)


def save_dataset(ds: Dataset, path: str | Path) -> None:
    """Columnar text export: header N d C, then one id/label/features row."""
    lines = [DATASET_HEADER]
    if ds.outlier_ids.size:
        lines.append("# outliers: " + " ".join(str(i) for i in ds.outlier_ids))
        lines.append("# outlier_slots: " + " ".join(str(s) for s in ds.outlier_slots))
    lines.append(f"{ds.size} {ds.features.shape[1]} {ds.num_classes}")
    for i in range(ds.size):
        row = " ".join(repr(float(v)) for v in ds.features[i])
        lines.append(f"{int(ds.example_ids[i])} {int(ds.labels[i])} {row}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_dataset(path: str | Path) -> Dataset:
    """Inverse of :func:`save_dataset`; floats round-trip exactly."""
    lines = Path(path).read_text().splitlines()
    outlier_ids: list[int] = []
    outlier_slots: list[int] = []
    body_at = 0
    for i, line in enumerate(lines):
        if line.startswith("# outliers:"):
            outlier_ids = [int(v) for v in line.split(":", 1)[1].split()]
        elif line.startswith("# outlier_slots:"):
            outlier_slots = [int(v) for v in line.split(":", 1)[1].split()]
        elif not line.startswith("#"):
            body_at = i
            break
    n, d, c = (int(v) for v in lines[body_at].split())
    ids = np.empty(n, dtype=np.intp)
    labels = np.empty(n, dtype=np.intp)
    features = np.empty((n, d), dtype=np.float64)
    for row, line in enumerate(lines[body_at + 1 : body_at + 1 + n]):
        parts = line.split()
        ids[row] = int(parts[0])
        labels[row] = int(parts[1])
        features[row] = [float(v) for v in parts[2 : 2 + d]]
    if labels.max() >= c:
        raise DataError("label exceeds declared class count")
    return Dataset(
        features,
        labels,
        ids,
        np.array(outlier_ids, dtype=np.intp),
        np.array(outlier_slots, dtype=np.intp),
    )
