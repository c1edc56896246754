"""Byte-exact communication accounting and the derived experiment metrics.

The cost model is deliberately independent of the protocol engines: the
engines report the bytes they moved, this module predicts them from the
configuration alone, and a cross-check in the test suite keeps the two
honest. Downlink is counted once per round (multicast broadcast).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

BYTES_PER_SCALAR = 4  # 32-bit float scalars on the wire


@dataclass(frozen=True)
class CostModel:
    clients: int
    bytes_per_scalar: int = BYTES_PER_SCALAR
    broadcast_counts_once: bool = True

    def __post_init__(self):
        if self.bytes_per_scalar < 1:
            raise ValueError("bytes_per_scalar must be at least 1")
        if self.clients < 1:
            raise ValueError("need at least one client")


def round_cost(protocol: str, model_params_count: int, n_classes: int,
               open_per_round: int, n_clients: int,
               bytes_per_scalar: int = BYTES_PER_SCALAR) -> tuple[int, int]:
    """(uplink, downlink) bytes for one round of the given protocol.

    FL moves whole parameter vectors, FD moves N_L x N_L per-label logits,
    the open-data distillation protocols move N_L x |o_r| logit matrices.
    Only FL's cost depends on the model size.
    """
    if protocol == "fl":
        scalars = model_params_count
    elif protocol == "fd":
        scalars = n_classes * n_classes
    elif protocol in ("dsfl_sa", "dsfl_era"):
        scalars = n_classes * open_per_round
    else:
        raise ValueError(f"unknown protocol {protocol!r}")
    up = n_clients * bytes_per_scalar * scalars
    down = bytes_per_scalar * scalars
    return up, down


def initial_open_cost(n_open: int, n_features: int,
                      bytes_per_scalar: int = BYTES_PER_SCALAR) -> int:
    """One-time multicast cost of distributing the open dataset."""
    if n_open < 0 or n_features < 1:
        raise ValueError("invalid open dataset size")
    return bytes_per_scalar * n_features * n_open


@dataclass(frozen=True, eq=False)
class AccuracyCurve:
    """Per-round accuracy with cumulative byte counters."""

    rounds: np.ndarray          # strictly increasing round numbers
    accuracy: np.ndarray
    cum_uplink: np.ndarray      # non-decreasing
    cum_downlink: np.ndarray    # non-decreasing
    initial_cost: int

    def __post_init__(self):
        rounds = np.asarray(self.rounds, dtype=np.int64)
        acc = np.asarray(self.accuracy, dtype=np.float64)
        up = np.asarray(self.cum_uplink, dtype=np.int64)
        down = np.asarray(self.cum_downlink, dtype=np.int64)
        n = rounds.size
        if not (acc.size == up.size == down.size == n):
            raise ValueError("curve columns must have equal length")
        if n and np.any(np.diff(rounds) <= 0):
            raise ValueError("rounds must be strictly increasing")
        if np.any(np.diff(up) < 0) or np.any(np.diff(down) < 0):
            raise ValueError("cumulative bytes must be non-decreasing")
        if self.initial_cost < 0:
            raise ValueError("initial cost cannot be negative")
        for name, arr in (("rounds", rounds), ("accuracy", acc),
                          ("cum_uplink", up), ("cum_downlink", down)):
            object.__setattr__(self, name, arr)

    def __len__(self) -> int:
        return self.rounds.size


def comu_at(curve: AccuracyCurve, threshold: float):
    """Initial cost plus cumulative bytes at the first round reaching the
    threshold accuracy; None when the curve never gets there."""
    if not (0 < threshold < 1):
        raise ValueError("threshold must be in (0, 1)")
    hits = np.nonzero(curve.accuracy >= threshold)[0]
    if hits.size == 0:
        return None
    i = hits[0]
    return int(curve.initial_cost + curve.cum_uplink[i] + curve.cum_downlink[i])


def top_accuracy(curve: AccuracyCurve) -> float:
    """Highest accuracy seen over the whole run."""
    if len(curve) == 0:
        raise ValueError("empty curve")
    return float(curve.accuracy.max())
