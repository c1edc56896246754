"""Adversarial scenario transforms: label noise, open-set noise, poisoning.

Everything here is a pure data or parameter transform; the runner decides
when to apply what (per-client at setup for the data attacks, per round
through upload hooks for poisoning).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .data import LabeledDataset, UnlabeledDataset
from .nn import ModelParams


@dataclass(frozen=True)
class NoisyLabelSpec:
    """Per-client relabeling plan: C source classes map to C false classes.

    Source and false classes are disjoint draws from the label space,
    chosen independently per client via the seed. C = 0 is a no-op.
    """

    n_classes: int
    n_noisy: int
    seed: int
    source_classes: np.ndarray = field(init=False)
    false_classes: np.ndarray = field(init=False)

    def __post_init__(self):
        if self.n_noisy < 0 or 2 * self.n_noisy > self.n_classes:
            raise ValueError(
                f"need disjoint source and false classes: 0 <= C <= {self.n_classes // 2}"
            )
        rng = np.random.default_rng(self.seed)
        picked = rng.choice(self.n_classes, size=2 * self.n_noisy, replace=False)
        object.__setattr__(self, "source_classes", picked[:self.n_noisy].astype(np.int64))
        object.__setattr__(self, "false_classes", picked[self.n_noisy:].astype(np.int64))


def inject_label_noise(ds: LabeledDataset, spec: NoisyLabelSpec) -> LabeledDataset:
    """Relabel every sample of each source class to its false class.

    Samples and their order are untouched; only labels change, all at
    once through a lookup table so chained classes cannot double-map.
    """
    if spec.n_classes != ds.n_classes:
        raise ValueError("spec and dataset class counts differ")
    table = np.arange(ds.n_classes, dtype=np.int64)
    table[spec.source_classes] = spec.false_classes
    return LabeledDataset(ds.samples, table[ds.labels], ds.n_classes)


def inject_open_noise(open_ds: UnlabeledDataset, noise: UnlabeledDataset,
                      n_noise: int, seed: int) -> UnlabeledDataset:
    """Mix n_noise noise columns into the open data and shuffle.

    Every clean sample appears exactly once in the result; the noise
    contribution is the first n_noise columns of the noise source.
    """
    if noise.n_features != open_ds.n_features:
        raise ValueError("noise feature dimension does not match the open data")
    if n_noise > noise.n_samples:
        raise ValueError(f"asked for {n_noise} noise samples, source has {noise.n_samples}")
    merged = np.concatenate([open_ds.samples, noise.samples[:, :n_noise]], axis=1)
    perm = np.random.default_rng(seed).permutation(merged.shape[1])
    return UnlabeledDataset(merged[:, perm])


@dataclass(frozen=True)
class PoisonSpec:
    """A pre-trained malicious model and how often it strikes."""

    malicious_model: ModelParams
    attack_period: int

    def __post_init__(self):
        if self.attack_period < 1:
            raise ValueError("attack_period must be at least 1")


def poison_model_update(w_x: ModelParams, w_g: ModelParams, n_clients: int) -> ModelParams:
    """The replacement upload w_M = K * w_x - (K - 1) * w_g.

    Averaged with K - 1 benign uploads equal to w_g, one aggregation step
    lands exactly on the attacker's model.
    """
    if w_x.spec != w_g.spec:
        raise ValueError("malicious and global model specs differ")
    if n_clients < 2:
        raise ValueError("model replacement needs at least 2 clients")
    values = (n_clients * w_x.values.astype(np.float64)
              - (n_clients - 1) * w_g.values.astype(np.float64))
    return ModelParams(w_x.spec, values.astype(np.float32))


def poison_logits(w_x: ModelParams, open_subset: np.ndarray) -> np.ndarray:
    """The frozen attacker's upload: predictions of w_x on the open subset.

    The malicious client never trains, so for a fixed subset this payload
    never changes between rounds.
    """
    return nn.forward(w_x, open_subset)
