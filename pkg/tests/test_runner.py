"""End-to-end run orchestration: metrics files, determinism, compare."""
import csv
from pathlib import Path

import numpy as np
import pytest

from dsfl import comms, protocols
from dsfl.config import parse_config, parse_raw, build_config
from dsfl.runner import CSV_COLUMNS, RunError, compare, run, selftest

TINY_DSFL = """
seed = 5
rounds = 3
protocol = "dsfl_era"

[model]
hidden_layers = [8]

[dataset]
type = "synthetic"
n_classes = 3
n_features = 6
n_per_class = 40
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


def tiny_cfg(**changes):
    raw = parse_raw(TINY_DSFL)
    for path, value in changes.items():
        node = raw
        keys = path.split("__")
        for k in keys[:-1]:
            node = node.setdefault(k, {})
        node[keys[-1]] = value
    return build_config(raw)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def strip_wall(path):
    """CSV bytes with the wall-clock column removed; timing is the one
    field that legitimately differs between identical runs."""
    rows = read_csv(path)
    return "\n".join(",".join(row[:-1]) for row in rows)


class TestRunBasics:
    def test_metrics_per_round(self):
        res = run(tiny_cfg())
        assert [m.round for m in res.metrics] == [1, 2, 3]
        assert all(0.0 <= m.accuracy <= 1.0 for m in res.metrics)
        assert len(res.wall_ms) == 3
        assert res.csv_path is None

    def test_eval_round0_prepends_free_row(self):
        res = run(tiny_cfg(eval_round0=True))
        assert res.metrics[0].round == 0
        assert res.metrics[0].uplink_bytes == 0
        assert res.metrics[0].downlink_bytes == 0
        assert len(res.metrics) == 4

    def test_initial_cost_is_open_set_size(self):
        res = run(tiny_cfg())
        assert res.initial_cost_bytes == comms.initial_open_cost(30, 6)

    def test_fl_has_no_initial_cost(self):
        res = run(tiny_cfg(protocol="fl"))
        assert res.initial_cost_bytes == 0

    def test_bytes_match_cost_model_every_round(self):
        for protocol in ("fl", "fd", "dsfl_sa", "dsfl_era"):
            cfg = tiny_cfg(protocol=protocol)
            res = run(cfg)
            params = res.server.global_model.spec.param_count()
            for m in res.metrics:
                up, down = comms.round_cost(protocol, params, 3,
                                            cfg.open_per_round, 3)
                assert (m.uplink_bytes, m.downlink_bytes) == (up, down)

    def test_curve_and_summaries(self):
        res = run(tiny_cfg())
        curve = res.curve()
        assert len(curve) == 3
        expect_up = np.cumsum([m.uplink_bytes for m in res.metrics])
        assert np.array_equal(curve.cum_uplink, expect_up)
        assert res.top_accuracy == max(res.accuracies)
        thr = res.metrics[0].accuracy  # reached at round 1 by construction
        if 0 < thr < 1:
            assert res.comu(thr) == res.initial_cost_bytes + \
                res.metrics[0].uplink_bytes + res.metrics[0].downlink_bytes

    def test_fl_clients_start_from_server_model(self):
        cfg = tiny_cfg(protocol="fl", rounds=0)
        res = run(cfg)
        for c in res.clients:
            assert np.array_equal(c.model.values, res.server.global_model.values)

    def test_distillation_clients_start_apart(self):
        cfg = tiny_cfg(rounds=0)
        res = run(cfg)
        for c in res.clients:
            assert not np.array_equal(c.model.values, res.server.global_model.values)

    def test_fd_runs_initial_update_before_round_one(self):
        # with zero rounds the FD clients are already trained once
        frozen = run(tiny_cfg(protocol="fd", rounds=0, update__learning_rate=0.0))
        trained = run(tiny_cfg(protocol="fd", rounds=0))
        changed = [not np.array_equal(a.model.values, b.model.values)
                   for a, b in zip(frozen.clients, trained.clients)]
        assert all(changed)


class TestCsvOutput:
    def test_header_and_shape(self, tmp_path):
        res = run(tiny_cfg(), out_dir=tmp_path)
        rows = read_csv(res.csv_path)
        assert tuple(rows[0]) == CSV_COLUMNS
        assert len(rows) == 4

    def test_rows_echo_metrics(self, tmp_path):
        res = run(tiny_cfg(), out_dir=tmp_path)
        rows = read_csv(res.csv_path)[1:]
        cum_up = 0
        for row, m in zip(rows, res.metrics):
            cum_up += m.uplink_bytes
            assert int(row[0]) == m.round
            assert float(row[1]) == m.accuracy
            assert float(row[2]) == m.global_logit_entropy
            assert int(row[3]) == m.uplink_bytes
            assert int(row[5]) == cum_up
            assert int(row[7]) == res.initial_cost_bytes

    def test_entropy_column_empty_for_fl(self, tmp_path):
        res = run(tiny_cfg(protocol="fl"), out_dir=tmp_path)
        for row in read_csv(res.csv_path)[1:]:
            assert row[2] == ""

    def test_zero_rounds_header_only(self, tmp_path):
        res = run(tiny_cfg(rounds=0), out_dir=tmp_path)
        assert read_csv(res.csv_path) == [list(CSV_COLUMNS)]

    def test_config_echo_reproduces_run(self, tmp_path):
        cfg = tiny_cfg()
        run(cfg, out_dir=tmp_path)
        assert parse_config((tmp_path / "config.toml").read_text()) == cfg

    def test_output_dir_from_config(self, tmp_path):
        target = tmp_path / "from_config"
        cfg = tiny_cfg(output_dir=str(target))
        res = run(cfg)
        assert res.csv_path == target / "metrics.csv"
        assert res.csv_path.exists()

    def test_out_dir_argument_wins(self, tmp_path):
        cfg = tiny_cfg(output_dir=str(tmp_path / "ignored"))
        res = run(cfg, out_dir=tmp_path / "explicit")
        assert res.csv_path == tmp_path / "explicit" / "metrics.csv"
        assert not (tmp_path / "ignored").exists()

    def test_no_temp_files_left(self, tmp_path):
        run(tiny_cfg(), out_dir=tmp_path)
        leftovers = [p for p in tmp_path.iterdir() if p.name.startswith(".metrics")]
        assert leftovers == []


class TestFailureHandling:
    def test_round_context_and_partial_rows(self, tmp_path, monkeypatch):
        real = protocols.dsfl_round
        calls = {"n": 0}

        def explode_on_second(*args, **kwargs):
            calls["n"] += 1
            if calls["n"] == 2:
                raise RuntimeError("simulated client dropout")
            return real(*args, **kwargs)

        monkeypatch.setattr(protocols, "dsfl_round", explode_on_second)
        with pytest.raises(RunError, match="run failed in round 2"):
            run(tiny_cfg(), out_dir=tmp_path)
        rows = read_csv(tmp_path / "metrics.csv")
        assert len(rows) == 2          # header plus the completed round 1
        assert rows[1][0] == "1"


class TestDeterminism:
    def test_rerun_is_byte_identical_outside_wall_clock(self, tmp_path):
        cfg = tiny_cfg()
        run(cfg, out_dir=tmp_path / "a")
        run(cfg, out_dir=tmp_path / "b")
        assert strip_wall(tmp_path / "a/metrics.csv") == \
            strip_wall(tmp_path / "b/metrics.csv")

    def test_threads_do_not_change_results(self, tmp_path):
        cfg = tiny_cfg()
        run(cfg, out_dir=tmp_path / "a")
        run(cfg, threads=4, out_dir=tmp_path / "b")
        assert strip_wall(tmp_path / "a/metrics.csv") == \
            strip_wall(tmp_path / "b/metrics.csv")

    def test_seed_changes_results(self):
        a = run(tiny_cfg())
        b = run(tiny_cfg(seed=6))
        assert a.accuracies != b.accuracies


class TestAttackRuns:
    def test_noisy_labels_passthrough(self):
        base = run(tiny_cfg(protocol="fl"))
        noisy = run(tiny_cfg(protocol="fl",
                             attack={"type": "noisy_labels", "classes": 1}))
        assert len(noisy.metrics) == len(base.metrics)
        assert noisy.accuracies != base.accuracies

    def test_noisy_open_grows_initial_cost(self):
        cfg = tiny_cfg(attack={"type": "noisy_open", "count": 12})
        res = run(cfg)
        assert res.initial_cost_bytes == comms.initial_open_cost(30 + 12, 6)

    def test_poisoning_records_backdoor_curve(self, tmp_path):
        cfg = tiny_cfg(
            protocol="fl",
            attack={"type": "poisoning", "period": 2, "pretrain_epochs": 1,
                    "backdoor": {"n_per_class": 5, "spread": 0.2,
                                 "test_per_class": 5}})
        res = run(cfg, out_dir=tmp_path)
        assert res.backdoor_accuracy is not None
        assert len(res.backdoor_accuracy) == len(res.metrics)
        assert all(0.0 <= a <= 1.0 for a in res.backdoor_accuracy)
        rows = read_csv(tmp_path / "backdoor.csv")
        assert rows[0] == ["round", "backdoor_accuracy"]
        assert len(rows) == len(res.metrics) + 1

    def test_unattacked_run_writes_no_backdoor_file(self, tmp_path):
        run(tiny_cfg(), out_dir=tmp_path)
        assert not (tmp_path / "backdoor.csv").exists()


class TestCompare:
    def entries(self):
        return [("era", tiny_cfg()), ("sa", tiny_cfg(protocol="dsfl_sa"))]

    def test_rows_and_table(self):
        rows, table = compare(self.entries(), thresholds=(0.2,))
        assert [r["label"] for r in rows] == ["era", "sa"]
        for r in rows:
            assert r["comu_initial_bytes"] == comms.initial_open_cost(30, 6)
            assert "comu_at_0.2" in r
        lines = table.splitlines()
        assert "ComU@0.2" in lines[0]
        assert len(lines) == 4          # header, rule, two rows

    def test_unreached_threshold_renders_dash(self):
        rows, table = compare(self.entries(), thresholds=(0.99,))
        assert all(r["comu_at_0.99"] is None for r in rows)
        assert "-" in table.splitlines()[2]

    def test_writes_comparison_and_subruns(self, tmp_path):
        compare(self.entries(), thresholds=(0.2, 0.5), out_dir=tmp_path)
        rows = read_csv(tmp_path / "comparison.csv")
        assert rows[0] == ["label", "protocol", "comu_initial_bytes",
                           "comu_at_0.2", "comu_at_0.5", "top_accuracy"]
        assert (tmp_path / "era" / "metrics.csv").exists()
        assert (tmp_path / "sa" / "metrics.csv").exists()

    def test_dataset_mismatch_rejected(self):
        other = tiny_cfg(dataset__spread=0.4)
        with pytest.raises(ValueError, match="different dataset"):
            compare([("a", tiny_cfg()), ("b", other)])

    def test_split_mismatch_rejected(self):
        other = tiny_cfg(split__open=20, split__private=60)
        with pytest.raises(ValueError, match="different open/private split"):
            compare([("a", tiny_cfg()), ("b", other)])

    def test_empty_entries_rejected(self):
        with pytest.raises(ValueError, match="nothing to compare"):
            compare([])


def test_selftest_all_suites_pass():
    results = selftest()
    assert [name for name, _, _ in results] == [
        "gradient-check", "aggregation-invariants",
        "partition-invariants", "determinism"]
    for name, ok, detail in results:
        assert ok, f"{name}: {detail}"
