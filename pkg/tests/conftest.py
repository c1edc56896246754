"""Shared test fixtures: the desk-scale experiment cache.

The acceptance tests drive overlapping sets of configured experiments, so
runs are cached for the whole session, keyed by everything except the
round count. A request for fewer rounds than a cached run reads a prefix:
every round draws from seeds derived from (run seed, round, client), so a
50-round run's first 10 rounds are bit-identical to a 10-round run.

The cache also cross-checks every logged round's byte counters against
the cost model, which is the "cost conservation in every acceptance run"
invariant; the acceptance suite reports the tally.
"""
import numpy as np
import pytest

from dsfl import comms
from dsfl.config import build_config
from dsfl.runner import run

# Desk-scale reference setup: 10 clients on an MNIST-shaped synthetic
# problem (10 classes, 784 features, 5000 open + 5000 private samples),
# dense 784-128-10 model, 500 open samples per round. The spread and
# learning rates were calibrated so that every protocol is in its
# informative regime: FL needs several rounds to converge, the
# distillation server reaches high accuracy within 50 rounds, and
# non-IID clients stay sharp enough for entropy comparisons.
DESK = {
    "n_classes": 10,
    "n_features": 784,
    "n_per_class": 1000,
    "spread": 0.18,
    "test_per_class": 200,
    "open": 5000,
    "private": 5000,
    "clients": 10,
    "shards_per_client": 2,
    "hidden_layers": [128],
    "open_per_round": 500,
    "era_temperature": 0.1,
    "update": {"learning_rate": 0.4, "epochs": 5, "batch_size": 100},
    "distill": {"learning_rate": 0.45, "epochs": 8, "batch_size": 100},
}

POISON_ATTACK = {
    "type": "poisoning", "period": 5, "pretrain_epochs": 25,
    "backdoor": {"n_per_class": 100, "spread": 0.15, "offset": 2.0,
                 "test_per_class": 100},
}

DESK_PARAMS = 784 * 128 + 128 + 128 * 10 + 10  # 101770


def desk_raw(protocol, seed, rounds, mode="noniid_shards", temperature=None,
             attack=None):
    """Raw config tree for one desk-scale experiment."""
    raw = {
        "seed": seed, "rounds": rounds, "protocol": protocol,
        "model": {"hidden_layers": list(DESK["hidden_layers"])},
        "dataset": {"type": "synthetic", "n_classes": DESK["n_classes"],
                    "n_features": DESK["n_features"],
                    "n_per_class": DESK["n_per_class"],
                    "spread": DESK["spread"],
                    "test_per_class": DESK["test_per_class"]},
        "split": {"open": DESK["open"], "private": DESK["private"]},
        "partition": {"mode": mode, "clients": DESK["clients"]},
        "update": dict(DESK["update"]),
        "distill": dict(DESK["distill"]),
    }
    if mode == "noniid_shards":
        raw["partition"]["shards_per_client"] = DESK["shards_per_client"]
    if protocol.startswith("dsfl"):
        raw["open"] = {"per_round": DESK["open_per_round"]}
    if protocol == "dsfl_era":
        raw["era"] = {"temperature": temperature if temperature is not None
                      else DESK["era_temperature"]}
    if attack is not None:
        raw["attack"] = attack
    return raw


def _attack_key(attack):
    if attack is None:
        return None
    if attack["type"] == "noisy_labels":
        return ("noisy_labels", attack["classes"])
    if attack["type"] == "poisoning":
        return ("poisoning", attack["period"])
    return ("noisy_open", attack.get("count"))


class DeskCache:
    def __init__(self):
        self._runs = {}
        self.rounds_cost_checked = 0

    def _verify_costs(self, protocol, result):
        open_pr = DESK["open_per_round"] if protocol.startswith("dsfl") else 0
        for m in result.metrics:
            want = comms.round_cost(protocol, DESK_PARAMS, DESK["n_classes"],
                                    open_pr, DESK["clients"])
            assert (m.uplink_bytes, m.downlink_bytes) == want, \
                f"round {m.round}: logged bytes disagree with the cost model"
            self.rounds_cost_checked += 1
        if protocol.startswith("dsfl"):
            assert result.initial_cost_bytes == comms.initial_open_cost(
                DESK["open"], DESK["n_features"])
        else:
            assert result.initial_cost_bytes == 0

    def get(self, protocol, seed, rounds, mode="noniid_shards",
            temperature=None, attack=None):
        key = (protocol, seed, mode, temperature, _attack_key(attack))
        hit = self._runs.get(key)
        if hit is not None and len(hit.metrics) >= rounds:
            return hit
        cfg = build_config(desk_raw(protocol, seed, rounds, mode=mode,
                                    temperature=temperature, attack=attack))
        result = run(cfg)
        if attack is None or attack["type"] != "noisy_open":
            self._verify_costs(protocol, result)
        self._runs[key] = result
        return result


_CACHE = DeskCache()
_CRITERION_LINES = []


@pytest.fixture(scope="session")
def desk_cache():
    return _CACHE


@pytest.fixture(scope="session")
def criterion():
    """Report one acceptance criterion outcome; returns ok for asserting."""

    def report(number, ok, detail):
        status = "PASS" if ok else "FAIL"
        _CRITERION_LINES.append(f"[{status}] criterion {number}: {detail}")
        return ok

    return report


def pytest_terminal_summary(terminalreporter):
    if _CRITERION_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERION_LINES:
            terminalreporter.write_line(line)


def pytest_collection_modifyitems(items):
    """Run the acceptance suite after the unit modules."""
    items.sort(key=lambda item: item.fspath.basename == "test_acceptance.py")
