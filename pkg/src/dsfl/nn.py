"""Dense softmax networks trained by hand-rolled backpropagation.

Every function here is pure: outputs depend only on explicit arguments
and seeds, so repeated calls are bit-identical and models can be trained
in parallel threads without locks.

Parameters live in one flat float32 vector. The layout is layer-major:
for each layer, the weight matrix first (row-major, one row per output
unit), then its bias vector. Hidden layers use relu, the output layer is
a softmax at temperature 1. Accumulating arithmetic (matmuls, loss sums,
SGD steps) runs in float64; results are cast back to float32 at the
boundary.

Targets for the cross-entropy are column-aligned with inputs and may be
soft. Columns are not required to sum to 1: a combined target such as
"one-hot plus gamma times a distillation column" is a valid input, and
the loss is then the corresponding weighted sum of cross-entropies.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class TrainingDivergenceError(RuntimeError):
    """A minibatch produced a non-finite loss or gradient."""


# Floor applied to probabilities inside the loss so log() stays finite.
PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class ModelSpec:
    """Architecture of a dense classifier.

    layer_sizes runs input-first, e.g. (784, 128, 10): first entry is the
    sample dimension, last is the class count.
    """

    layer_sizes: tuple[int, ...]

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2:
            raise ValueError("layer_sizes needs at least an input and an output size")
        if any(s < 1 for s in sizes):
            raise ValueError("layer sizes must be positive")

    @property
    def n_inputs(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_classes(self) -> int:
        return self.layer_sizes[-1]

    def layer_pairs(self) -> tuple[tuple[int, int], ...]:
        """(fan_in, fan_out) per layer, input side first."""
        return tuple(zip(self.layer_sizes[:-1], self.layer_sizes[1:]))

    def param_count(self) -> int:
        return sum(a * b + b for a, b in self.layer_pairs())


@dataclass(frozen=True, eq=False)
class ModelParams:
    """A spec plus its flat float32 parameter vector."""

    spec: ModelSpec
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float32)
        if values.ndim != 1 or values.size != self.spec.param_count():
            raise ValueError(
                f"expected {self.spec.param_count()} parameters, got shape {values.shape}"
            )
        if not np.all(np.isfinite(values)):
            raise ValueError("parameter vector contains non-finite values")
        object.__setattr__(self, "values", values)


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for sgd_update.

    learning_rate 0 is allowed (a no-op pass, handy for tests); batches
    shorter than batch_size are permitted at the end of an epoch.
    """

    learning_rate: float
    epochs: int
    batch_size: int
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")


def init_params(spec: ModelSpec, seed: int) -> ModelParams:
    """Seed-determined init: weights uniform in +-sqrt(6/(fan_in+fan_out)),
    biases zero."""
    rng = np.random.default_rng(seed)
    chunks = []
    for fan_in, fan_out in spec.layer_pairs():
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=(fan_out, fan_in))
        chunks.append(w.ravel())
        chunks.append(np.zeros(fan_out))
    return ModelParams(spec, np.concatenate(chunks).astype(np.float32))


def _unpack(spec: ModelSpec, values: np.ndarray):
    """Views of the flat vector as per-layer (W, b) pairs."""
    mats = []
    pos = 0
    for fan_in, fan_out in spec.layer_pairs():
        w = values[pos:pos + fan_in * fan_out].reshape(fan_out, fan_in)
        pos += fan_in * fan_out
        b = values[pos:pos + fan_out]
        pos += fan_out
        mats.append((w, b))
    return mats


def _softmax_cols(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


def _check_inputs(spec: ModelSpec, inputs: np.ndarray) -> np.ndarray:
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("inputs must be a 2-d matrix with one column per sample")
    if x.shape[0] != spec.n_inputs:
        raise ValueError(
            f"input rows ({x.shape[0]}) do not match model input size ({spec.n_inputs})"
        )
    return x


def _activations(spec: ModelSpec, values64: np.ndarray, x: np.ndarray):
    """All layer outputs, input included. Last entry is the softmax output."""
    mats = _unpack(spec, values64)
    acts = [x]
    a = x
    for i, (w, b) in enumerate(mats):
        z = w @ a + b[:, None]
        a = _softmax_cols(z) if i == len(mats) - 1 else np.maximum(z, 0.0)
        acts.append(a)
    return acts


def forward(model: ModelParams, inputs: np.ndarray) -> np.ndarray:
    """Class-probability columns (n_classes x n_samples, float32)."""
    x = _check_inputs(model.spec, inputs)
    acts = _activations(model.spec, model.values.astype(np.float64), x)
    return acts[-1].astype(np.float32)


def cross_entropy(predictions: np.ndarray, targets: np.ndarray) -> float:
    """Summed soft-target cross-entropy, -sum_i sum_n t_in * log p_in.

    Probabilities are clamped to [PROB_FLOOR, 1] so confident wrong
    predictions cannot produce an infinite loss.
    """
    p = np.asarray(predictions, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"prediction shape {p.shape} != target shape {t.shape}")
    p = np.clip(p, PROB_FLOOR, 1.0)
    return float(-(t * np.log(p)).sum())


def _loss_and_grad(spec: ModelSpec, values64: np.ndarray, x: np.ndarray, t: np.ndarray):
    """Summed cross-entropy and its gradient w.r.t. the flat parameters."""
    mats = _unpack(spec, values64)
    acts = _activations(spec, values64, x)
    p = acts[-1]
    loss = float(-(t * np.log(np.clip(p, PROB_FLOOR, 1.0))).sum())

    # d(summed CE)/dz for a softmax output with (possibly unnormalized)
    # target columns: p * colmass - t. For simplex targets this is p - t.
    col_mass = t.sum(axis=0, keepdims=True)
    delta = p * col_mass - t

    grad = np.empty_like(values64)
    pos = values64.size
    for i in range(len(mats) - 1, -1, -1):
        w, b = mats[i]
        a_prev = acts[i]
        gb = delta.sum(axis=1)
        gw = delta @ a_prev.T
        pos -= gb.size
        grad[pos:pos + gb.size] = gb
        gw_flat = gw.ravel()
        pos -= gw_flat.size
        grad[pos:pos + gw_flat.size] = gw_flat
        if i > 0:
            delta = (w.T @ delta) * (acts[i] > 0)
    return loss, grad


def _check_targets(spec: ModelSpec, x: np.ndarray, targets: np.ndarray) -> np.ndarray:
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != (spec.n_classes, x.shape[1]):
        raise ValueError(
            f"target shape {t.shape} does not match ({spec.n_classes}, {x.shape[1]})"
        )
    return t


def sgd_update(model: ModelParams, inputs: np.ndarray, targets: np.ndarray,
               cfg: TrainConfig) -> ModelParams:
    """Mini-batch SGD on the soft-target cross-entropy.

    Runs cfg.epochs passes; each epoch visits every sample once in an
    order drawn from SeedSequence([cfg.seed, epoch]), so the trajectory
    is a pure function of (model, data, cfg). The step uses the batch
    mean gradient, which keeps the reference learning rate stable across
    batch sizes.
    """
    x = _check_inputs(model.spec, inputs)
    t = _check_targets(model.spec, x, targets)
    n = x.shape[1]
    if n == 0:
        raise ValueError("cannot train on an empty dataset")

    w = model.values.astype(np.float64)
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, epoch]))
        perm = rng.permutation(n)
        for bi, start in enumerate(range(0, n, cfg.batch_size)):
            idx = perm[start:start + cfg.batch_size]
            loss, grad = _loss_and_grad(model.spec, w, x[:, idx], t[:, idx])
            if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
                raise TrainingDivergenceError(
                    f"non-finite loss or gradient in epoch {epoch}, batch {bi}"
                )
            w -= cfg.learning_rate * (grad / idx.size)

    out = w.astype(np.float32)
    if not np.all(np.isfinite(out)):
        raise TrainingDivergenceError("parameters became non-finite after the update")
    return ModelParams(model.spec, out)


def gradient_check(model: ModelParams, inputs: np.ndarray, targets: np.ndarray,
                   epsilon: float = 1e-4, *, n_coords: int = 120, seed: int = 0,
                   coords=None, grad_fn=None) -> float:
    """Largest relative disagreement between the analytic gradient and a
    central finite difference, over a random subset of coordinates.

    Coordinates whose probe points flip a relu activation (the loss is not
    differentiable across that kink, so a central difference says nothing)
    are skipped. grad_fn, when given, replaces the analytic gradient (used
    to prove the check catches a corrupted backprop); coords pins the
    tested subset.
    """
    if not (0 < epsilon <= 1e-2):
        raise ValueError("epsilon must be in (0, 1e-2]")
    x = _check_inputs(model.spec, inputs)
    t = _check_targets(model.spec, x, targets)
    w = model.values.astype(np.float64)

    if grad_fn is not None:
        analytic = np.asarray(grad_fn(w), dtype=np.float64)
    else:
        analytic = _loss_and_grad(model.spec, w, x, t)[1]

    def probe_at(vec):
        acts = _activations(model.spec, vec, x)
        loss = float(-(t * np.log(np.clip(acts[-1], PROB_FLOOR, 1.0))).sum())
        pattern = tuple((a > 0).tobytes() for a in acts[1:-1])
        return loss, pattern

    if coords is None:
        rng = np.random.default_rng(seed)
        k = min(w.size, max(n_coords, min(100, w.size)))
        coords = rng.choice(w.size, size=k, replace=False)

    worst = 0.0
    for c in np.asarray(coords, dtype=np.int64):
        probe = w.copy()
        probe[c] = w[c] + epsilon
        up, pattern_up = probe_at(probe)
        probe[c] = w[c] - epsilon
        down, pattern_down = probe_at(probe)
        if pattern_up != pattern_down:
            continue
        fd = (up - down) / (2.0 * epsilon)
        ga = analytic[c]
        rel = abs(ga - fd) / max(abs(ga), abs(fd), 1e-8)
        worst = max(worst, rel)
    return worst
