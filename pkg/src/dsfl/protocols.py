"""Round-level engines for FL, FD, and the distillation protocol.

Each *_round function is pure: it takes the current (server, clients)
states and returns fresh ones plus the round's metrics, mutating nothing.
A raised error therefore leaves the caller's states untouched, which is
the atomicity contract.

Per-client work inside a round (training, prediction) may run on a thread
pool; every client draws from its own derived seed stream and aggregation
always walks clients in index order, so the thread count cannot change
any result.

upload_hook, when given, is called as hook(round, client_id, payload) and
may substitute the payload a client uploads (model parameters for FL,
logit matrices for the distillation protocol). Attack scheduling lives in
the runner; the engines stay attack-agnostic.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from . import aggregation, nn
from .aggregation import EraConfig, PerLabelLogits, TargetUndefinedError
from .data import LabeledDataset, UnlabeledDataset, one_hot, sample_round_indices
from .nn import ModelParams, TrainConfig
from .seeding import derive_seed

BYTES_PER_SCALAR = 4  # 32-bit float payloads

PROTOCOLS = ("fl", "fd", "dsfl_sa", "dsfl_era")


@dataclass(frozen=True)
class ClientState:
    id: int
    model: ModelParams
    private_data: LabeledDataset
    fd_cache: PerLabelLogits | None = None


@dataclass(frozen=True)
class ServerState:
    global_model: ModelParams
    round: int
    rng_seed: int
    last_global_logit: np.ndarray | None = None


@dataclass(frozen=True)
class RoundConfig:
    protocol: str
    update_cfg: TrainConfig
    distill_cfg: TrainConfig
    era: EraConfig | None = None
    fd_gamma: float = 1.0
    open_per_round: int = 0

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"unknown protocol {self.protocol!r}")
        if self.protocol == "dsfl_era" and self.era is None:
            raise ValueError("dsfl_era requires an EraConfig")
        if self.fd_gamma < 0:
            raise ValueError("fd_gamma must be non-negative")
        if self.protocol in ("dsfl_sa", "dsfl_era") and self.open_per_round < 1:
            raise ValueError("distillation protocols need open_per_round >= 1")


@dataclass(frozen=True)
class RoundMetrics:
    round: int
    accuracy: float
    global_logit_entropy: float | None
    uplink_bytes: int
    downlink_bytes: int


def evaluate(model: ModelParams, test: LabeledDataset) -> float:
    """Argmax accuracy; ties resolve to the lowest class index."""
    if test.n_samples == 0:
        raise ValueError("cannot evaluate on an empty test set")
    preds = nn.forward(model, test.samples)
    picked = np.argmax(preds, axis=0)
    return float(np.mean(picked == test.labels))


def _map_clients(fn, clients, threads: int):
    """Apply fn to every client, preserving client order in the output."""
    if threads > 1 and len(clients) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, clients))
    return [fn(c) for c in clients]


def _train_cfg(cfg: TrainConfig, seed: int) -> TrainConfig:
    return replace(cfg, seed=seed)


# ---------------------------------------------------------------------------
# FL: parameter exchange

def fl_round(server: ServerState, clients, cfg: RoundConfig, test: LabeledDataset,
             *, threads: int = 1, upload_hook=None):
    """One FedAvg-style round.

    Clients train their current models (the previous broadcast) on their
    private shards, upload the parameters, the server averages them
    weighted by shard size and broadcasts the new global model back.
    """
    if cfg.protocol != "fl":
        raise ValueError("fl_round requires protocol 'fl'")
    r = server.round + 1

    def update(client: ClientState) -> ModelParams:
        tc = _train_cfg(cfg.update_cfg, derive_seed(server.rng_seed, "update", r, client.id))
        return nn.sgd_update(client.model, client.private_data.samples,
                             client.private_data.one_hot(), tc)

    uploads = _map_clients(update, clients, threads)
    if upload_hook is not None:
        uploads = [upload_hook(r, c.id, u) for c, u in zip(clients, uploads)]

    sizes = np.array([c.private_data.n_samples for c in clients], dtype=np.float64)
    total = sizes.sum()
    if total <= 0:
        raise ValueError("clients hold no data")
    acc = np.zeros(server.global_model.values.size, dtype=np.float64)
    for weight, upload in zip(sizes / total, uploads):
        if upload.spec != server.global_model.spec:
            raise ValueError("uploaded model spec does not match the global model")
        acc += weight * upload.values.astype(np.float64)
    new_global = ModelParams(server.global_model.spec, acc.astype(np.float32))

    params = new_global.spec.param_count()
    metrics = RoundMetrics(
        round=r,
        accuracy=evaluate(new_global, test),
        global_logit_entropy=None,
        uplink_bytes=len(clients) * BYTES_PER_SCALAR * params,
        downlink_bytes=BYTES_PER_SCALAR * params,
    )
    new_clients = [replace(c, model=new_global) for c in clients]
    new_server = replace(server, global_model=new_global, round=r)
    return new_server, new_clients, metrics


# ---------------------------------------------------------------------------
# FD: per-label logit exchange

def fd_build_targets(global_pl: PerLabelLogits, own_pl: PerLabelLogits,
                     labels: np.ndarray) -> np.ndarray:
    """Distillation target column for every sample, by its label.

    Uses the leave-one-out target where the class has 2+ holders and the
    global column as the fallback for singleton holders.
    """
    n_l = global_pl.n_classes
    per_class = np.zeros((n_l, n_l), dtype=np.float64)
    for c in np.unique(np.asarray(labels, dtype=np.int64)):
        try:
            per_class[:, c] = aggregation.fd_distill_target(global_pl, own_pl, int(c))
        except TargetUndefinedError:
            per_class[:, c] = global_pl.values[:, c].astype(np.float64)
    return per_class[:, np.asarray(labels, dtype=np.int64)]


def fd_round(server: ServerState, clients, cfg: RoundConfig, test: LabeledDataset,
             *, threads: int = 1):
    """One per-label distillation round.

    Assumes every client already ran its one-time local update before the
    first round. Clients exchange N_L x N_L per-label average logits and
    train on their own data against one-hot labels plus gamma-weighted
    leave-one-out targets. There is no server model; the reported accuracy
    is the mean over client models.
    """
    if cfg.protocol != "fd":
        raise ValueError("fd_round requires protocol 'fd'")
    r = server.round + 1

    def predict(client: ClientState) -> PerLabelLogits:
        return aggregation.fd_local_perlabel(client.model, client.private_data)

    local_pls = _map_clients(predict, clients, threads)
    global_pl = aggregation.fd_global_perlabel(local_pls)

    def distill(pair) -> ModelParams:
        client, own_pl = pair
        targets = fd_build_targets(global_pl, own_pl, client.private_data.labels)
        combined = client.private_data.one_hot().astype(np.float64) + cfg.fd_gamma * targets
        tc = _train_cfg(cfg.update_cfg, derive_seed(server.rng_seed, "distill", r, client.id))
        return nn.sgd_update(client.model, client.private_data.samples, combined, tc)

    new_models = _map_clients(distill, list(zip(clients, local_pls)), threads)
    new_clients = [replace(c, model=m, fd_cache=pl)
                   for c, m, pl in zip(clients, new_models, local_pls)]

    n_l = global_pl.n_classes
    held = global_pl.present
    ent = aggregation.mean_entropy(global_pl.values[:, held]) if held.any() else 0.0
    accs = _map_clients(lambda c: evaluate(c.model, test), new_clients, threads)
    metrics = RoundMetrics(
        round=r,
        accuracy=float(np.mean(accs)),
        global_logit_entropy=ent,
        uplink_bytes=len(clients) * BYTES_PER_SCALAR * n_l * n_l,
        downlink_bytes=BYTES_PER_SCALAR * n_l * n_l,
    )
    new_server = replace(server, round=r, last_global_logit=global_pl.values)
    return new_server, new_clients, metrics


def fd_initial_update(server: ServerState, clients, cfg: RoundConfig,
                      *, threads: int = 1):
    """The one-time local update run before the first FD round."""

    def update(client: ClientState) -> ClientState:
        tc = _train_cfg(cfg.update_cfg, derive_seed(server.rng_seed, "update", 0, client.id))
        model = nn.sgd_update(client.model, client.private_data.samples,
                              client.private_data.one_hot(), tc)
        return replace(client, model=model)

    return _map_clients(update, clients, threads)


# ---------------------------------------------------------------------------
# DS-FL: logit exchange over the shared open data

def open_indices_for_round(server_seed: int, round_no: int, n_open: int,
                           per_round: int):
    """The shared per-round open subset; any party can recompute it."""
    return sample_round_indices(n_open, per_round, round_no, server_seed)


def dsfl_round(server: ServerState, clients, cfg: RoundConfig,
               open_data: UnlabeledDataset, test: LabeledDataset,
               *, threads: int = 1, upload_hook=None):
    """One distillation round over the shared open data.

    Per round: every client trains on its private shard, predicts on the
    shared open subset o_r, uploads the logit matrix; the server averages
    (SA) or averages-and-sharpens (ERA), broadcasts the global logit, and
    every client plus the server runs a distillation update against it.
    Accuracy is measured on the server's global model after distillation.
    """
    if cfg.protocol not in ("dsfl_sa", "dsfl_era"):
        raise ValueError("dsfl_round requires protocol 'dsfl_sa' or 'dsfl_era'")
    r = server.round + 1
    idx = open_indices_for_round(server.rng_seed, r, open_data.n_samples,
                                 cfg.open_per_round)
    open_subset = open_data.samples[:, idx.indices]

    def update_and_predict(client: ClientState):
        tc = _train_cfg(cfg.update_cfg, derive_seed(server.rng_seed, "update", r, client.id))
        model = nn.sgd_update(client.model, client.private_data.samples,
                              client.private_data.one_hot(), tc)
        return model, nn.forward(model, open_subset)

    results = _map_clients(update_and_predict, clients, threads)
    updated = [m for m, _ in results]
    uploads = [p for _, p in results]
    if upload_hook is not None:
        uploads = [upload_hook(r, c.id, u) for c, u in zip(clients, uploads)]

    if cfg.protocol == "dsfl_era":
        global_logit = aggregation.aggregate_era(uploads, cfg.era)
    else:
        global_logit = aggregation.aggregate_sa(uploads)
    ent = aggregation.mean_entropy(global_logit)

    def distill(pair) -> ModelParams:
        client, model = pair
        tc = _train_cfg(cfg.distill_cfg, derive_seed(server.rng_seed, "distill", r, client.id))
        return nn.sgd_update(model, open_subset, global_logit, tc)

    new_models = _map_clients(distill, list(zip(clients, updated)), threads)
    server_tc = _train_cfg(cfg.distill_cfg, derive_seed(server.rng_seed, "distill-server", r))
    new_global = nn.sgd_update(server.global_model, open_subset, global_logit, server_tc)

    n_l = server.global_model.spec.n_classes
    metrics = RoundMetrics(
        round=r,
        accuracy=evaluate(new_global, test),
        global_logit_entropy=ent,
        uplink_bytes=len(clients) * BYTES_PER_SCALAR * n_l * cfg.open_per_round,
        downlink_bytes=BYTES_PER_SCALAR * n_l * cfg.open_per_round,
    )
    new_clients = [replace(c, model=m) for c, m in zip(clients, new_models)]
    new_server = replace(server, global_model=new_global, round=r,
                         last_global_logit=global_logit)
    return new_server, new_clients, metrics
