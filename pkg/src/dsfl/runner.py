"""Experiment orchestration: setup, round loop, attacks, metrics files.

run() executes one configured experiment and returns the full result; if
an output directory is involved it also writes metrics.csv (fixed schema,
see CSV_COLUMNS) and config.toml (an echo that reproduces the run when
parsed back). CSV rows are flushed as rounds complete and the file is
moved into place through a temp name, so an aborted run leaves the
completed rows behind and never a half-written file.

compare() runs several configs over the same dataset and lays out the
communication metrics side by side. selftest() runs the fast invariant
suites and reports per-suite pass/fail.
"""
from __future__ import annotations

import csv
import logging
import os
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import attacks, comms, protocols
from .aggregation import EraConfig
from .config import AttackConfig, RunConfig, echo_config
from .data import (LabeledDataset, UnlabeledDataset, load_idx, one_hot,
                   partition_iid, partition_noniid_shards, split_open_private,
                   synth_generate)
from .nn import ModelParams, ModelSpec, TrainConfig, init_params, sgd_update
from .protocols import (ClientState, RoundConfig, RoundMetrics, ServerState,
                        open_indices_for_round)
from .seeding import derive_seed

log = logging.getLogger("dsfl")

CSV_COLUMNS = ("round", "accuracy", "global_logit_entropy", "uplink_bytes",
               "downlink_bytes", "cum_uplink_bytes", "cum_downlink_bytes",
               "initial_cost_bytes", "wall_ms")

MALICIOUS_CLIENT = 0


class RunError(RuntimeError):
    """A run aborted; the message carries the failing round."""


@dataclass
class RunResult:
    config: RunConfig
    metrics: list
    wall_ms: list
    initial_cost_bytes: int
    server: ServerState
    clients: list
    backdoor_accuracy: list | None = None
    csv_path: Path | None = None

    @property
    def accuracies(self) -> list:
        return [m.accuracy for m in self.metrics]

    @property
    def entropies(self) -> list:
        return [m.global_logit_entropy for m in self.metrics]

    def curve(self) -> comms.AccuracyCurve:
        rounds = [m.round for m in self.metrics]
        acc = [m.accuracy for m in self.metrics]
        cum_up = np.cumsum([m.uplink_bytes for m in self.metrics])
        cum_down = np.cumsum([m.downlink_bytes for m in self.metrics])
        return comms.AccuracyCurve(np.array(rounds), np.array(acc), cum_up,
                                   cum_down, self.initial_cost_bytes)

    @property
    def top_accuracy(self) -> float:
        return comms.top_accuracy(self.curve())

    def comu(self, threshold: float):
        return comms.comu_at(self.curve(), threshold)


# ---------------------------------------------------------------------------
# Setup

def _build_datasets(cfg: RunConfig):
    if cfg.dataset.kind == "synthetic":
        s = cfg.dataset.synthetic
        pool = synth_generate(s.n_classes, s.n_features, s.n_per_class, s.spread,
                              derive_seed(cfg.seed, "data"))
        test = synth_generate(s.n_classes, s.n_features, s.test_per_class, s.spread,
                              derive_seed(cfg.seed, "test"))
    else:
        i = cfg.dataset.idx
        pool = load_idx(i.train_images, i.train_labels)
        test = load_idx(i.test_images, i.test_labels)
    return pool, test


def _backdoor_sets(cfg: RunConfig, n_features: int, n_classes: int):
    """Backdoor task for the poisoning scenario: the synthetic clusters
    shifted by a constant vector of length `offset`, with every cluster
    relabeled to the next class index. The shift keeps the backdoor
    inputs away from the main task and the relabeling makes sure a model
    that merely generalizes from the main clusters scores near zero."""
    bd = cfg.attack.backdoor
    shift = bd.offset / np.sqrt(n_features)
    train = synth_generate(n_classes, n_features, bd.n_per_class, bd.spread,
                           derive_seed(cfg.seed, "backdoor-data"))
    test = synth_generate(n_classes, n_features, bd.test_per_class, bd.spread,
                          derive_seed(cfg.seed, "backdoor-test"))
    train = LabeledDataset(train.samples + np.float32(shift),
                           (train.labels + 1) % n_classes, n_classes)
    test = LabeledDataset(test.samples + np.float32(shift),
                          (test.labels + 1) % n_classes, n_classes)
    return train, test


def _train_malicious(cfg: RunConfig, spec: ModelSpec, pool: LabeledDataset,
                     backdoor_train: LabeledDataset) -> ModelParams:
    """The attacker's model, fit on the whole private pool plus the
    backdoor set. The attacker aims for high accuracy on both tasks, so
    it trains on everything it can get; a weak attacker model would
    poison the main task more than the backdoor ever could."""
    merged = LabeledDataset(
        np.concatenate([pool.samples, backdoor_train.samples], axis=1),
        np.concatenate([pool.labels, backdoor_train.labels]),
        pool.n_classes,
    )
    tc = TrainConfig(cfg.update.learning_rate, cfg.attack.pretrain_epochs,
                     cfg.update.batch_size, seed=derive_seed(cfg.seed, "attacker-train"))
    w0 = init_params(spec, derive_seed(cfg.seed, "attacker-init"))
    return sgd_update(w0, merged.samples, merged.one_hot(), tc)


def _noise_source(cfg: RunConfig, n_features: int) -> UnlabeledDataset:
    a = cfg.attack
    if a.noise_source == "idx":
        # labels of the noise set are irrelevant; reuse the images as-is
        ds = load_idx(a.noise_images, a.noise_images)
        return UnlabeledDataset(ds.samples)
    rng = np.random.default_rng(derive_seed(cfg.seed, "open-noise-source"))
    return UnlabeledDataset(rng.random((n_features, a.noise_count), dtype=np.float64)
                            .astype(np.float32))


@dataclass
class _Prepared:
    spec: ModelSpec
    server: ServerState
    clients: list
    open_data: UnlabeledDataset
    test: LabeledDataset
    round_cfg: RoundConfig
    initial_cost: int
    w_x: ModelParams | None = None
    backdoor_test: LabeledDataset | None = None


def _setup(cfg: RunConfig) -> _Prepared:
    pool, test = _build_datasets(cfg)
    n_features, n_classes = pool.n_features, pool.n_classes
    spec = ModelSpec((n_features, *cfg.hidden_layers, n_classes))

    open_data, private = split_open_private(pool, cfg.split.open, cfg.split.private,
                                            derive_seed(cfg.seed, "split"))

    attack = cfg.attack
    if attack is not None and attack.kind == "noisy_open":
        noise = _noise_source(cfg, n_features)
        open_data = attacks.inject_open_noise(open_data, noise, attack.noise_count,
                                              derive_seed(cfg.seed, "open-noise"))

    if cfg.partition.mode == "iid":
        plan = partition_iid(private, cfg.partition.clients,
                             derive_seed(cfg.seed, "partition"))
    else:
        plan = partition_noniid_shards(private, cfg.partition.clients,
                                       cfg.partition.shards_per_client,
                                       derive_seed(cfg.seed, "partition"))

    shards = [private.subset(idx) for idx in plan.assignments]
    if attack is not None and attack.kind == "noisy_labels":
        shards = [
            attacks.inject_label_noise(
                ds, attacks.NoisyLabelSpec(n_classes, attack.noisy_classes,
                                           derive_seed(cfg.seed, "label-noise", k)))
            for k, ds in enumerate(shards)
        ]

    server_model = init_params(spec, derive_seed(cfg.seed, "server-init"))
    if cfg.protocol == "fl":
        # FL starts every client from the distributed initial model
        clients = [ClientState(k, server_model, ds) for k, ds in enumerate(shards)]
    else:
        clients = [ClientState(k, init_params(spec, derive_seed(cfg.seed, "init", k)), ds)
                   for k, ds in enumerate(shards)]
    server = ServerState(server_model, round=0, rng_seed=cfg.seed)

    round_cfg = RoundConfig(
        protocol=cfg.protocol,
        update_cfg=cfg.update,
        distill_cfg=cfg.distill,
        era=EraConfig(cfg.era_temperature) if cfg.protocol == "dsfl_era" else None,
        fd_gamma=cfg.fd_gamma,
        open_per_round=cfg.open_per_round if cfg.protocol.startswith("dsfl") else 0,
    )

    initial_cost = 0
    if cfg.protocol.startswith("dsfl"):
        initial_cost = comms.initial_open_cost(open_data.n_samples, n_features)

    prep = _Prepared(spec, server, clients, open_data, test, round_cfg, initial_cost)
    if attack is not None and attack.kind == "poisoning":
        backdoor_train, backdoor_test = _backdoor_sets(cfg, n_features, n_classes)
        prep.w_x = _train_malicious(cfg, spec, private, backdoor_train)
        prep.backdoor_test = backdoor_test
    return prep


def _poison_hook(cfg: RunConfig, prep: _Prepared, current_global: ModelParams):
    """Upload hook for the poisoning scenario, bound to this round's state."""
    attack = cfg.attack
    n_clients = cfg.partition.clients

    if cfg.protocol == "fl":
        def hook(round_no, client_id, payload):
            if client_id == MALICIOUS_CLIENT and round_no % attack.attack_period == 0:
                return attacks.poison_model_update(prep.w_x, current_global, n_clients)
            return payload
        return hook

    def hook(round_no, client_id, payload):
        # the frozen attacker substitutes its own predictions every round
        if client_id == MALICIOUS_CLIENT:
            idx = open_indices_for_round(cfg.seed, round_no,
                                         prep.open_data.n_samples,
                                         cfg.open_per_round)
            return attacks.poison_logits(prep.w_x, prep.open_data.samples[:, idx.indices])
        return payload
    return hook


# ---------------------------------------------------------------------------
# The round loop

def _format_row(m: RoundMetrics, cum_up: int, cum_down: int, initial: int,
                wall_ms: float) -> list:
    ent = "" if m.global_logit_entropy is None else repr(float(m.global_logit_entropy))
    return [m.round, repr(float(m.accuracy)), ent, m.uplink_bytes, m.downlink_bytes,
            cum_up, cum_down, initial, f"{wall_ms:.3f}"]


def _initial_accuracy(cfg: RunConfig, prep: _Prepared) -> float:
    if cfg.protocol == "fd":
        return float(np.mean([protocols.evaluate(c.model, prep.test)
                              for c in prep.clients]))
    return protocols.evaluate(prep.server.global_model, prep.test)


def run(cfg: RunConfig, *, threads: int = 1, out_dir=None) -> RunResult:
    """Execute the configured experiment; bit-reproducible for a fixed config.

    out_dir overrides cfg.output_dir; when neither is set nothing is
    written and the result lives only in memory.
    """
    prep = _setup(cfg)
    server, clients = prep.server, prep.clients

    if cfg.protocol == "fd":
        clients = protocols.fd_initial_update(server, clients, prep.round_cfg,
                                              threads=threads)
        prep.clients = clients

    target = Path(out_dir) if out_dir is not None else (
        Path(cfg.output_dir) if cfg.output_dir else None)
    writer = None
    tmp_path = csv_path = None
    handle = None
    if target is not None:
        target.mkdir(parents=True, exist_ok=True)
        csv_path = target / "metrics.csv"
        tmp_path = target / f".metrics.csv.tmp.{os.getpid()}"
        handle = open(tmp_path, "w", newline="")
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        handle.flush()
        (target / "config.toml").write_text(echo_config(cfg))

    metrics: list = []
    walls: list = []
    backdoor: list | None = [] if prep.w_x is not None else None
    cum_up = cum_down = 0

    def emit(m: RoundMetrics, wall_ms: float):
        if writer is not None:
            writer.writerow(_format_row(m, cum_up, cum_down, prep.initial_cost, wall_ms))
            handle.flush()
        ent = "" if m.global_logit_entropy is None else f" H={m.global_logit_entropy:.4f}"
        log.info("round %d acc=%.4f%s up=%dB down=%dB %.0fms",
                 m.round, m.accuracy, ent, m.uplink_bytes, m.downlink_bytes, wall_ms)

    try:
        if cfg.eval_round0:
            t0 = time.perf_counter()
            m0 = RoundMetrics(0, _initial_accuracy(cfg, prep), None, 0, 0)
            wall = (time.perf_counter() - t0) * 1000.0
            metrics.append(m0)
            walls.append(wall)
            if backdoor is not None:
                backdoor.append(protocols.evaluate(server.global_model, prep.backdoor_test))
            emit(m0, wall)

        for r in range(1, cfg.rounds + 1):
            hook = None
            if prep.w_x is not None:
                hook = _poison_hook(cfg, prep, server.global_model)
            t0 = time.perf_counter()
            try:
                if cfg.protocol == "fl":
                    server, clients, m = protocols.fl_round(
                        server, clients, prep.round_cfg, prep.test,
                        threads=threads, upload_hook=hook)
                elif cfg.protocol == "fd":
                    server, clients, m = protocols.fd_round(
                        server, clients, prep.round_cfg, prep.test, threads=threads)
                else:
                    server, clients, m = protocols.dsfl_round(
                        server, clients, prep.round_cfg, prep.open_data, prep.test,
                        threads=threads, upload_hook=hook)
            except Exception as exc:
                raise RunError(f"run failed in round {r}: {exc}") from exc
            wall = (time.perf_counter() - t0) * 1000.0
            cum_up += m.uplink_bytes
            cum_down += m.downlink_bytes
            metrics.append(m)
            walls.append(wall)
            if backdoor is not None:
                backdoor.append(protocols.evaluate(server.global_model, prep.backdoor_test))
            emit(m, wall)
    finally:
        if handle is not None:
            handle.close()
            os.replace(tmp_path, csv_path)

    if backdoor is not None and target is not None:
        with open(target / "backdoor.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["round", "backdoor_accuracy"])
            for m, acc in zip(metrics, backdoor):
                w.writerow([m.round, repr(float(acc))])

    return RunResult(config=cfg, metrics=metrics, wall_ms=walls,
                     initial_cost_bytes=prep.initial_cost, server=server,
                     clients=clients, backdoor_accuracy=backdoor, csv_path=csv_path)


# ---------------------------------------------------------------------------
# Comparison across configs

def compare(entries, *, thresholds=(0.7, 0.8), threads: int = 1, out_dir=None):
    """Run several configs over the same data and tabulate their costs.

    entries: sequence of (label, RunConfig). All configs must share the
    dataset and split sections. Returns (rows, text_table); when out_dir
    is set, also writes comparison.csv and each run's own outputs under
    out_dir/<label>/.
    """
    entries = list(entries)
    if not entries:
        raise ValueError("nothing to compare")
    first = entries[0][1]
    for label, cfg in entries[1:]:
        if cfg.dataset != first.dataset:
            raise ValueError(f"config {label!r} uses a different dataset")
        if cfg.split != first.split:
            raise ValueError(f"config {label!r} uses a different open/private split")

    target = Path(out_dir) if out_dir is not None else None
    rows = []
    for label, cfg in entries:
        sub = (target / label) if target is not None else None
        result = run(cfg, threads=threads, out_dir=sub)
        row = {
            "label": label,
            "protocol": cfg.protocol,
            "comu_initial_bytes": result.initial_cost_bytes,
            "top_accuracy": result.top_accuracy,
        }
        for thr in thresholds:
            row[_thr_key(thr)] = result.comu(thr)
        rows.append(row)

    table = render_comparison(rows, thresholds)
    if target is not None:
        target.mkdir(parents=True, exist_ok=True)
        header = ["label", "protocol", "comu_initial_bytes"]
        header += [_thr_key(t) for t in thresholds]
        header += ["top_accuracy"]
        with open(target / "comparison.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([row["label"], row["protocol"], row["comu_initial_bytes"],
                            *(_render_bytes(row[_thr_key(t)]) for t in thresholds),
                            repr(float(row["top_accuracy"]))])
    return rows, table


def _thr_key(threshold: float) -> str:
    return f"comu_at_{threshold:g}"


def _render_bytes(value) -> str:
    return "-" if value is None else str(value)


def render_comparison(rows, thresholds) -> str:
    headers = ["label", "protocol", "ComU@I"]
    headers += [f"ComU@{t:g}" for t in thresholds]
    headers += ["Top-Acc"]
    table = [headers]
    for row in rows:
        table.append([
            row["label"], row["protocol"], str(row["comu_initial_bytes"]),
            *(_render_bytes(row[_thr_key(t)]) for t in thresholds),
            f"{row['top_accuracy']:.4f}",
        ])
    widths = [max(len(r[i]) for r in table) for i in range(len(headers))]
    lines = []
    for i, r in enumerate(table):
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip())
        if i == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Selftest suites

def _selftest_gradients(rng) -> str:
    from . import nn
    worst = 0.0
    for _ in range(20):
        sizes = [int(rng.integers(3, 9))]
        for _ in range(int(rng.integers(0, 3))):
            sizes.append(int(rng.integers(2, 8)))
        sizes.append(int(rng.integers(2, 6)))
        spec = ModelSpec(tuple(sizes))
        model = init_params(spec, int(rng.integers(1 << 31)))
        m = int(rng.integers(2, 9))
        x = rng.standard_normal((spec.n_inputs, m))
        t = rng.random((spec.n_classes, m))
        t = t / t.sum(axis=0, keepdims=True)
        err = nn.gradient_check(model, x, t, 1e-4, seed=int(rng.integers(1 << 31)))
        worst = max(worst, err)
        if err >= 1e-3:
            raise AssertionError(f"gradient check failed: {err:.2e}")

    spec = ModelSpec((5, 4, 3))
    model = init_params(spec, 7)
    x = rng.standard_normal((5, 6))
    t = rng.random((3, 6))
    t = t / t.sum(axis=0, keepdims=True)

    def corrupted(w64):
        g = nn._loss_and_grad(spec, w64, np.asarray(x, float), np.asarray(t, float))[1]
        g = g.copy()
        g[3] *= 2.0
        return g

    err = nn.gradient_check(model, x, t, 1e-4, coords=[3], grad_fn=corrupted)
    if err <= 0.4:
        raise AssertionError(f"corrupted gradient slipped through: {err:.2e}")
    return f"max rel err {worst:.2e}, sentinel {err:.2f}"


def _selftest_aggregation(rng) -> str:
    from . import aggregation
    for _ in range(50):
        k = int(rng.integers(2, 6))
        n_l = int(rng.integers(2, 7))
        m = int(rng.integers(1, 6))
        mats = []
        for _ in range(k):
            a = rng.random((n_l, m))
            mats.append((a / a.sum(axis=0, keepdims=True)).astype(np.float32))
        sa = aggregation.aggregate_sa(mats)
        aggregation.check_logit_matrix(sa, 1e-4)
        t = float(rng.choice([0.5, 0.1, 0.01]))
        era = aggregation.aggregate_era(mats, EraConfig(t))
        aggregation.check_logit_matrix(era, 1e-4)
        mean = np.mean([m_.astype(np.float64) for m_ in mats], axis=0)
        for j in range(m):
            col = mean[:, j]
            if np.sum(col == col.max()) == 1 and np.argmax(era[:, j]) != np.argmax(col):
                raise AssertionError("ERA moved an argmax")
        sharp = aggregation.aggregate_era(mats, EraConfig(1e-3))
        for j in range(m):
            top_two = np.sort(mean[:, j])[-2:]
            if top_two[1] - top_two[0] < 0.02:
                continue  # near-tied max: the T->0 limit is not one-hot there
            if aggregation.entropy(sharp[:, j].astype(np.float64)
                                   / sharp[:, j].astype(np.float64).sum()) > 1e-2:
                raise AssertionError("low-temperature limit is not one-hot")

    # leave-one-out identity on random per-label instances
    for _ in range(20):
        n_l = int(rng.integers(2, 6))
        k = int(rng.integers(2, 6))
        locals_ = []
        for _ in range(k):
            vals = rng.random((n_l, n_l))
            vals = vals / vals.sum(axis=0, keepdims=True)
            locals_.append(aggregation.PerLabelLogits(vals.astype(np.float32),
                                                      np.ones(n_l, dtype=np.int64)))
        g = aggregation.fd_global_perlabel(locals_)
        for c in range(n_l):
            mean_t = np.mean([aggregation.fd_distill_target(g, pl, c) for pl in locals_],
                             axis=0)
            if np.abs(mean_t - g.values[:, c].astype(np.float64)).max() > 1e-6:
                raise AssertionError("leave-one-out identity violated")
    return "simplex closure, argmax invariance, T->0 limit, leave-one-out ok"


def _selftest_partitions(rng) -> str:
    for _ in range(10):
        n = int(rng.integers(40, 200))
        n_classes = int(rng.integers(2, 8))
        ds = synth_generate(n_classes, 3, (n + n_classes - 1) // n_classes, 0.5,
                            int(rng.integers(1 << 31)))
        k = int(rng.integers(1, 9))
        plan = partition_iid(ds, k, int(rng.integers(1 << 31)))
        sizes = [len(a) for a in plan.assignments]
        if max(sizes) - min(sizes) > 1:
            raise AssertionError("iid sizes differ by more than 1")
        merged = np.concatenate(plan.assignments)
        if len(np.unique(merged)) != len(merged):
            raise AssertionError("iid assignments overlap")
        spc = int(rng.integers(1, 4))
        if ds.n_samples // (k * spc) >= 1:
            plan = partition_noniid_shards(ds, k, spc, int(rng.integers(1 << 31)))
            merged = np.concatenate(plan.assignments)
            if len(np.unique(merged)) != len(merged):
                raise AssertionError("shard assignments overlap")
            if len(merged) + plan.dropped != ds.n_samples:
                raise AssertionError("shard coverage plus dropped != dataset size")
    return "iid and shard plans well formed"


def _selftest_determinism(_rng) -> str:
    from .config import parse_config
    text = """
seed = 5
rounds = 2
protocol = "dsfl_era"

[model]
hidden_layers = [8]

[dataset]
type = "synthetic"
n_classes = 3
n_features = 6
n_per_class = 30
spread = 0.3
test_per_class = 10

[split]
open = 30
private = 60

[partition]
mode = "noniid_shards"
clients = 3
shards_per_client = 2

[update]
learning_rate = 0.1
epochs = 2
batch_size = 10

[era]
temperature = 0.1

[open]
per_round = 10
"""
    cfg = parse_config(text)
    a = run(cfg)
    b = run(cfg)
    c = run(cfg, threads=3)
    for other in (b, c):
        if [m.accuracy for m in a.metrics] != [m.accuracy for m in other.metrics]:
            raise AssertionError("repeated runs disagree")
        if not np.array_equal(a.server.global_model.values,
                              other.server.global_model.values):
            raise AssertionError("final models disagree")
    for m in a.metrics:
        up, down = comms.round_cost(cfg.protocol, a.server.global_model.spec.param_count(),
                                    3, cfg.open_per_round, cfg.partition.clients)
        if (m.uplink_bytes, m.downlink_bytes) != (up, down):
            raise AssertionError("reported bytes disagree with the cost model")
    return "2-round run reproducible, bytes match cost model"


def selftest() -> list:
    """Run the invariant suites; returns (name, ok, detail) per suite."""
    suites = [
        ("gradient-check", _selftest_gradients),
        ("aggregation-invariants", _selftest_aggregation),
        ("partition-invariants", _selftest_partitions),
        ("determinism", _selftest_determinism),
    ]
    results = []
    for name, fn in suites:
        rng = np.random.default_rng(derive_seed("selftest", name))
        try:
            detail = fn(rng)
            results.append((name, True, detail))
        except Exception as exc:  # noqa: BLE001 - report, do not crash
            results.append((name, False, f"{type(exc).__name__}: {exc}"))
    return results
