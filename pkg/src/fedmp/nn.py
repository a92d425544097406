"""Minimal dense ReLU classifier on a flat float64 parameter vector.

Models are immutable value objects: every operation returns a new
``ModelParams``. The flat layout is, per layer, the weight matrix in
row-major order followed by the bias vector, which lets the rest of the
package treat a model as a single vector for averaging, ranking and
resetting parameters.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, NumericError, ShapeError

CHECKPOINT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class ArchSpec:
    """Layer sizes of a fully connected network, input through output."""

    layer_dims: tuple[int, ...]

    def __post_init__(self) -> None:
        dims = tuple(int(d) for d in self.layer_dims)
        if len(dims) < 2:
            raise ConfigError("architecture needs at least input and output dims")
        if any(d < 1 for d in dims):
            raise ConfigError(f"all layer dims must be >= 1, got {dims}")
        object.__setattr__(self, "layer_dims", dims)

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def num_classes(self) -> int:
        return self.layer_dims[-1]

    @property
    def num_layers(self) -> int:
        return len(self.layer_dims) - 1

    def layer_shapes(self) -> list[tuple[int, int]]:
        """(fan_in, fan_out) per layer."""
        dims = self.layer_dims
        return [(dims[i], dims[i + 1]) for i in range(self.num_layers)]

    @property
    def param_count(self) -> int:
        return sum(f * o + o for f, o in self.layer_shapes())

    def layer_slices(self) -> list[tuple[slice, slice]]:
        """(weight_slice, bias_slice) into the flat vector, per layer."""
        out = []
        pos = 0
        for f, o in self.layer_shapes():
            w = slice(pos, pos + f * o)
            b = slice(pos + f * o, pos + f * o + o)
            out.append((w, b))
            pos = b.stop
        return out


def param_layer_ids(arch: ArchSpec) -> np.ndarray:
    """Layer index owning each flat parameter."""
    ids = np.empty(arch.param_count, dtype=np.intp)
    for layer, (w, b) in enumerate(arch.layer_slices()):
        ids[w] = layer
        ids[b] = layer
    return ids


def param_init_bounds(arch: ArchSpec) -> np.ndarray:
    """Half-width of each parameter's uniform init interval.

    Weights use the Kaiming-uniform bound sqrt(6 / fan_in); biases use
    1 / sqrt(fan_in).
    """
    bounds = np.empty(arch.param_count, dtype=np.float64)
    for (f, _), (w, b) in zip(arch.layer_shapes(), arch.layer_slices()):
        bounds[w] = np.sqrt(6.0 / f)
        bounds[b] = 1.0 / np.sqrt(f)
    return bounds


@dataclass(frozen=True)
class ModelParams:
    """Architecture plus one flat, read-only float64 parameter vector."""

    arch: ArchSpec
    values: np.ndarray

    def __post_init__(self) -> None:
        v = np.array(self.values, dtype=np.float64, copy=True).reshape(-1)
        if v.shape != (self.arch.param_count,):
            raise ShapeError(
                f"expected {self.arch.param_count} parameters, got {v.shape[0]}"
            )
        if not np.all(np.isfinite(v)):
            raise NumericError("model parameters contain NaN or Inf")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """Read-only (W, b) views, W shaped (fan_in, fan_out)."""
        out = []
        for (f, o), (w, b) in zip(self.arch.layer_shapes(), self.arch.layer_slices()):
            out.append((self.values[w].reshape(f, o), self.values[b]))
        return out


@dataclass(frozen=True)
class Batch:
    """Feature matrix with integer class labels."""

    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.intp)
        if x.ndim != 2:
            raise ShapeError(f"features must be 2-d, got shape {x.shape}")
        if y.shape != (x.shape[0],):
            raise ShapeError("labels must be a vector matching the batch size")
        if x.shape[0] < 1:
            raise ValueError("batch must contain at least one example")
        if y.size and y.min() < 0:
            raise ValueError("labels must be non-negative class indices")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    @property
    def size(self) -> int:
        return self.features.shape[0]


@dataclass(frozen=True)
class OptState:
    """SGD or Adam state for one flat parameter vector."""

    kind: str
    learning_rate: float
    m: np.ndarray
    v: np.ndarray
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0


def init_opt_state(kind: str, learning_rate: float, param_count: int) -> OptState:
    if kind not in ("sgd", "adam"):
        raise ConfigError(f"unknown optimizer kind {kind!r}")
    if learning_rate < 0:
        raise ConfigError("learning rate must be non-negative")
    zeros = np.zeros(param_count, dtype=np.float64)
    return OptState(kind=kind, learning_rate=learning_rate, m=zeros, v=zeros.copy())


def init_model(arch: ArchSpec, seed: int) -> ModelParams:
    """Kaiming-uniform initialization, deterministic per seed.

    Each layer's weights are drawn i.i.d. uniform on [-b, b] with
    b = sqrt(6 / fan_in), then its biases uniform on +-1/sqrt(fan_in),
    layer by layer in order.
    """
    gen = np.random.default_rng(seed)
    values = np.empty(arch.param_count, dtype=np.float64)
    for (f, o), (w, b) in zip(arch.layer_shapes(), arch.layer_slices()):
        wb = np.sqrt(6.0 / f)
        bb = 1.0 / np.sqrt(f)
        values[w] = gen.uniform(-wb, wb, size=f * o)
        values[b] = gen.uniform(-bb, bb, size=o)
    return ModelParams(arch=arch, values=values)


def reinit_params(model: ModelParams, indices: Iterable[int], seed: int) -> ModelParams:
    """Redraw the given flat indices from their layer's init distribution.

    All other entries are bitwise unchanged. Draws consume randomness in
    ascending index order, so a fixed (indices, seed) pair is reproducible
    regardless of the order indices were supplied in.
    """
    idx = np.unique(np.fromiter(indices, dtype=np.intp))
    if idx.size == 0:
        return model
    if idx[0] < 0 or idx[-1] >= model.arch.param_count:
        raise ValueError("parameter index out of range")
    bounds = param_init_bounds(model.arch)[idx]
    gen = np.random.default_rng(seed)
    values = model.values.copy()
    values[idx] = gen.uniform(-bounds, bounds)
    return ModelParams(arch=model.arch, values=values)


def forward_logits(model: ModelParams, features: np.ndarray) -> np.ndarray:
    """Forward pass: ReLU hidden layers, linear output."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.arch.input_dim:
        raise ShapeError(
            f"features must be (n, {model.arch.input_dim}), got {x.shape}"
        )
    layers = model.layers()
    a = x
    for i, (w, b) in enumerate(layers):
        z = a @ w + b
        a = np.maximum(z, 0.0) if i < len(layers) - 1 else z
    return a


def predict(model: ModelParams, features: np.ndarray) -> np.ndarray:
    """Argmax class per row; ties resolve to the lowest class index."""
    return np.argmax(forward_logits(model, features), axis=1)


def accuracy(model: ModelParams, batch: Batch) -> float:
    return float(np.mean(predict(model, batch.features) == batch.labels))


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def mean_loss(model: ModelParams, batch: Batch) -> float:
    """Mean softmax cross-entropy over the batch."""
    if batch.labels.max() >= model.arch.num_classes:
        raise ValueError("label index exceeds output dimension")
    logp = _log_softmax(forward_logits(model, batch.features))
    return float(-logp[np.arange(batch.size), batch.labels].mean())


def loss_and_grad(model: ModelParams, batch: Batch) -> tuple[float, np.ndarray]:
    """Mean cross-entropy loss and its exact gradient, flat over all params."""
    if batch.size < 1:
        raise ValueError("batch must contain at least one example")
    if batch.labels.max() >= model.arch.num_classes:
        raise ValueError("label index exceeds output dimension")
    layers = model.layers()
    n = batch.size

    pre = []  # pre-activation per layer
    acts = [batch.features]  # input to each layer
    a = batch.features
    for i, (w, b) in enumerate(layers):
        z = a @ w + b
        pre.append(z)
        a = np.maximum(z, 0.0) if i < len(layers) - 1 else z
        if i < len(layers) - 1:
            acts.append(a)

    logits = pre[-1]
    logp = _log_softmax(logits)
    loss = float(-logp[np.arange(n), batch.labels].mean())

    delta = np.exp(logp)
    delta[np.arange(n), batch.labels] -= 1.0
    delta /= n

    grad = np.empty(model.arch.param_count, dtype=np.float64)
    slices = model.arch.layer_slices()
    for i in range(len(layers) - 1, -1, -1):
        w_sl, b_sl = slices[i]
        grad[w_sl] = (acts[i].T @ delta).reshape(-1)
        grad[b_sl] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ layers[i][0].T) * (pre[i - 1] > 0.0)
    return loss, grad


def opt_step(
    model: ModelParams, state: OptState, grad: np.ndarray
) -> tuple[ModelParams, OptState]:
    """One SGD or Adam update; returns the new model and advanced state."""
    g = np.asarray(grad, dtype=np.float64)
    if g.shape != model.values.shape:
        raise ShapeError("gradient length must match parameter count")
    if not np.all(np.isfinite(g)):
        raise NumericError("gradient contains NaN or Inf")
    t = state.step + 1
    if state.kind == "sgd":
        values = model.values - state.learning_rate * g
        new_state = OptState(
            kind=state.kind,
            learning_rate=state.learning_rate,
            m=state.m,
            v=state.v,
            beta1=state.beta1,
            beta2=state.beta2,
            eps=state.eps,
            step=t,
        )
    else:
        m = state.beta1 * state.m + (1.0 - state.beta1) * g
        v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
        m_hat = m / (1.0 - state.beta1**t)
        v_hat = v / (1.0 - state.beta2**t)
        values = model.values - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)
        new_state = OptState(
            kind=state.kind,
            learning_rate=state.learning_rate,
            m=m,
            v=v,
            beta1=state.beta1,
            beta2=state.beta2,
            eps=state.eps,
            step=t,
        )
    return ModelParams(arch=model.arch, values=values), new_state


def save_checkpoint(
    model: ModelParams,
    path: str | Path,
    seed_lineage: Sequence[int] = (),
    config_hash: str | None = None,
) -> None:
    """Write a versioned checkpoint; round-trips bit-exactly.

    Parameter values are stored as base64 of the little-endian IEEE-754
    array, so write -> read -> write reproduces identical bytes.
    """
    raw = np.ascontiguousarray(model.values, dtype="<f8").tobytes()
    doc = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "layer_dims": list(model.arch.layer_dims),
        "values_b64": base64.b64encode(raw).decode("ascii"),
        "seed_lineage": [int(s) for s in seed_lineage],
        "config_hash": config_hash,
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")


def load_checkpoint(path: str | Path) -> tuple[ModelParams, dict]:
    """Read a checkpoint; returns the model and its metadata."""
    doc = json.loads(Path(path).read_text())
    if doc.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ConfigError(f"unsupported checkpoint version in {path}")
    arch = ArchSpec(tuple(doc["layer_dims"]))
    values = np.frombuffer(base64.b64decode(doc["values_b64"]), dtype="<f8")
    meta = {
        "seed_lineage": list(doc.get("seed_lineage", [])),
        "config_hash": doc.get("config_hash"),
    }
    return ModelParams(arch=arch, values=values.astype(np.float64)), meta
