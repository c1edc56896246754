"""Logit mathematics: entropy, tempered softmax, SA, ERA, FD averaging.

A logit matrix here is an N_L x M float32 array whose columns are class
probability vectors (the protocols exchange post-softmax outputs, never
raw scores). Aggregations accumulate in float64 over clients in index
order and cast back to float32, the wire precision.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class TargetUndefinedError(ValueError):
    """Leave-one-out target requested for a class with fewer than 2 holders."""


@dataclass(frozen=True)
class EraConfig:
    """Temperature of the entropy-reducing softmax (reference value 0.1)."""

    temperature: float

    def __post_init__(self):
        if not (self.temperature > 0):
            raise ValueError("temperature must be positive")


@dataclass(frozen=True, eq=False)
class PerLabelLogits:
    """Per-class average logits, one column per class.

    holders[n] counts how many parties contributed to column n; columns
    with holders == 0 are all-zero placeholders for absent classes. Local
    matrices have holder counts of 0 or 1, the global aggregate carries
    the size of the holder set, which the leave-one-out target needs.
    """

    values: np.ndarray    # N_L x N_L float32, column n is the class-n logit
    holders: np.ndarray   # N_L int64 contributor counts

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float32)
        holders = np.asarray(self.holders, dtype=np.int64)
        n = values.shape[0] if values.ndim == 2 else -1
        if values.ndim != 2 or values.shape != (n, n):
            raise ValueError("per-label values must be a square N_L x N_L matrix")
        if holders.shape != (n,):
            raise ValueError("holders must have one entry per class")
        if holders.min(initial=0) < 0:
            raise ValueError("holder counts cannot be negative")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "holders", holders)

    @property
    def present(self) -> np.ndarray:
        return self.holders > 0

    @property
    def n_classes(self) -> int:
        return self.values.shape[0]


def entropy(column: np.ndarray) -> float:
    """Shannon entropy -sum t_n ln t_n of one probability vector.

    Natural logarithm, with 0 * ln 0 taken as 0. Rejects inputs that are
    not on the simplex within 1e-4.
    """
    t = np.asarray(column, dtype=np.float64)
    if t.ndim != 1:
        raise ValueError("entropy expects a single probability vector")
    if t.min(initial=0.0) < -1e-4 or abs(t.sum() - 1.0) > 1e-4:
        raise ValueError("input is not a probability vector (tolerance 1e-4)")
    t = np.clip(t, 0.0, None)
    nz = t[t > 0]
    return float(-(nz * np.log(nz)).sum())


def mean_entropy(matrix: np.ndarray) -> float:
    """Mean column entropy of a logit matrix; the per-round metric."""
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2 or m.shape[1] == 0:
        raise ValueError("mean_entropy expects a non-empty 2-d logit matrix")
    return float(np.mean([entropy(m[:, j]) for j in range(m.shape[1])]))


def softmax_temp(values: np.ndarray, temperature: float) -> np.ndarray:
    """exp(t_n / T) normalized, column-wise for 2-d input.

    Computed with max subtraction so large magnitudes cannot overflow.
    Returns float64; callers cast to the wire precision when broadcasting.
    """
    if not (temperature > 0):
        raise ValueError("temperature must be positive")
    v = np.asarray(values, dtype=np.float64) / temperature
    one_d = v.ndim == 1
    if one_d:
        v = v[:, None]
    v = v - v.max(axis=0, keepdims=True)
    e = np.exp(v)
    out = e / e.sum(axis=0, keepdims=True)
    return out[:, 0] if one_d else out


def _stacked_mean(local_logits) -> np.ndarray:
    mats = list(local_logits)
    if not mats:
        raise ValueError("need at least one local logit matrix")
    shape = np.asarray(mats[0]).shape
    acc = np.zeros(shape, dtype=np.float64)
    for m in mats:
        m = np.asarray(m)
        if m.shape != shape:
            raise ValueError(f"logit shape {m.shape} != {shape}")
        acc += m.astype(np.float64)
    return acc / len(mats)


def aggregate_sa(local_logits) -> np.ndarray:
    """Simple aggregation: the element-wise mean of the uploaded logits.

    Summation runs in float64 in client index order, so the result does
    not depend on which thread finished first.
    """
    return _stacked_mean(local_logits).astype(np.float32)


def aggregate_era(local_logits, cfg: EraConfig) -> np.ndarray:
    """Entropy reduction aggregation: tempered softmax of the SA mean,
    applied column by column. Sharpens every column toward its argmax
    without ever changing the argmax."""
    mean = _stacked_mean(local_logits)
    return softmax_temp(mean, cfg.temperature).astype(np.float32)


# ---------------------------------------------------------------------------
# FD per-label logits

def fd_local_perlabel(model, client_data) -> PerLabelLogits:
    """Mean prediction per class the client holds; zero columns otherwise."""
    from . import nn  # local import keeps module load order flexible

    n_l = client_data.n_classes
    values = np.zeros((n_l, n_l), dtype=np.float64)
    holders = np.zeros(n_l, dtype=np.int64)
    if client_data.n_samples:
        preds = nn.forward(model, client_data.samples).astype(np.float64)
        for c in range(n_l):
            mask = client_data.labels == c
            if mask.any():
                values[:, c] = preds[:, mask].mean(axis=1)
                holders[c] = 1
    return PerLabelLogits(values.astype(np.float32), holders)


def fd_global_perlabel(local_perlabel) -> PerLabelLogits:
    """Per-class mean over only the clients that hold the class."""
    locals_ = list(local_perlabel)
    if not locals_:
        raise ValueError("need at least one per-label logit")
    n_l = locals_[0].n_classes
    acc = np.zeros((n_l, n_l), dtype=np.float64)
    counts = np.zeros(n_l, dtype=np.int64)
    for pl in locals_:
        if pl.n_classes != n_l:
            raise ValueError("per-label logit class counts differ")
        held = pl.present
        acc[:, held] += pl.values[:, held].astype(np.float64)
        counts += held
    out = np.zeros((n_l, n_l), dtype=np.float64)
    held = counts > 0
    out[:, held] = acc[:, held] / counts[held]
    return PerLabelLogits(out.astype(np.float32), counts)


def fd_distill_target(global_pl: PerLabelLogits, own_pl: PerLabelLogits,
                      class_index: int) -> np.ndarray:
    """Leave-one-out distillation target (K*t_g - t_own) / (K - 1).

    K is the holder count of the class in the global aggregate. Exact
    algebra keeps the result on the simplex; if float drift pushes it
    further than 1e-6 off, the column is clipped and renormalized.
    Raises TargetUndefinedError when K <= 1 (callers fall back to the
    global column).
    """
    k = int(global_pl.holders[class_index])
    if k <= 1:
        raise TargetUndefinedError(
            f"class {class_index} has {k} holder(s); leave-one-out needs at least 2"
        )
    t_g = global_pl.values[:, class_index].astype(np.float64)
    t_own = own_pl.values[:, class_index].astype(np.float64)
    target = (k * t_g - t_own) / (k - 1)
    drift = max(abs(target.sum() - 1.0), float(-(target.min(initial=0.0))))
    if drift > 1e-6:
        target = np.clip(target, 0.0, None)
        total = target.sum()
        if total <= 0:
            raise TargetUndefinedError(
                f"class {class_index} leave-one-out target degenerated to zero mass"
            )
        target = target / total
    return target


def check_logit_matrix(matrix: np.ndarray, tol: float = 1e-5) -> None:
    """Assert the logit-matrix contract: entries in [0,1], columns sum to 1."""
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError("logit matrix must be 2-d")
    if m.min(initial=0.0) < -tol or m.max(initial=0.0) > 1.0 + tol:
        raise ValueError("logit entries outside [0, 1]")
    sums = m.sum(axis=0)
    if sums.size and np.abs(sums - 1.0).max() > tol:
        raise ValueError("logit columns must sum to 1")
