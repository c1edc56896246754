"""Attack transforms: label noise, open-set noise, model replacement."""
import numpy as np
import pytest

from dsfl import nn
from dsfl.attacks import (NoisyLabelSpec, PoisonSpec, inject_label_noise,
                          inject_open_noise, poison_logits,
                          poison_model_update)
from dsfl.data import LabeledDataset, UnlabeledDataset
from dsfl.nn import ModelParams, ModelSpec, TrainConfig, init_params
from dsfl.protocols import ClientState, RoundConfig, ServerState, fl_round


def labeled(rng, n_classes=10, n_features=5, n=60):
    samples = rng.standard_normal((n_features, n)).astype(np.float32)
    labels = rng.integers(0, n_classes, size=n)
    return LabeledDataset(samples, labels, n_classes)


class TestNoisyLabelSpec:
    def test_source_and_false_are_disjoint(self):
        for seed in range(30):
            spec = NoisyLabelSpec(10, 4, seed)
            assert len(spec.source_classes) == 4
            assert len(spec.false_classes) == 4
            overlap = set(spec.source_classes.tolist()) & set(spec.false_classes.tolist())
            assert not overlap

    def test_zero_noisy_classes_is_empty_plan(self):
        spec = NoisyLabelSpec(10, 0, 3)
        assert spec.source_classes.size == 0
        assert spec.false_classes.size == 0

    def test_deterministic_by_seed(self):
        a = NoisyLabelSpec(10, 3, 42)
        b = NoisyLabelSpec(10, 3, 42)
        assert np.array_equal(a.source_classes, b.source_classes)
        assert np.array_equal(a.false_classes, b.false_classes)

    def test_seeds_give_different_plans(self):
        plans = {tuple(NoisyLabelSpec(10, 3, s).source_classes.tolist())
                 for s in range(12)}
        assert len(plans) > 1

    def test_too_many_noisy_classes(self):
        with pytest.raises(ValueError, match="disjoint"):
            NoisyLabelSpec(10, 6, 0)

    def test_negative_count(self):
        with pytest.raises(ValueError, match="disjoint"):
            NoisyLabelSpec(10, -1, 0)


class TestInjectLabelNoise:
    def test_samples_untouched(self):
        rng = np.random.default_rng(1)
        ds = labeled(rng)
        out = inject_label_noise(ds, NoisyLabelSpec(10, 3, 7))
        assert out.samples is ds.samples

    def test_remap_matches_plan(self):
        rng = np.random.default_rng(2)
        for seed in range(20):
            ds = labeled(rng)
            spec = NoisyLabelSpec(10, 3, seed)
            out = inject_label_noise(ds, spec)
            remap = dict(zip(spec.source_classes.tolist(), spec.false_classes.tolist()))
            for before, after in zip(ds.labels, out.labels):
                assert after == remap.get(int(before), int(before))

    def test_noop_plan_keeps_labels(self):
        rng = np.random.default_rng(3)
        ds = labeled(rng)
        out = inject_label_noise(ds, NoisyLabelSpec(10, 0, 5))
        assert np.array_equal(out.labels, ds.labels)

    def test_class_count_mismatch(self):
        rng = np.random.default_rng(4)
        ds = labeled(rng, n_classes=8)
        with pytest.raises(ValueError, match="class counts"):
            inject_label_noise(ds, NoisyLabelSpec(10, 2, 0))

    def test_no_double_mapping(self):
        # a false class that also appears as data keeps its own label: the
        # lookup table is applied once, never chained
        rng = np.random.default_rng(5)
        for seed in range(20):
            spec = NoisyLabelSpec(10, 3, seed)
            false0 = int(spec.false_classes[0])
            ds = LabeledDataset(np.zeros((2, 3), dtype=np.float32),
                                np.array([false0] * 3), 10)
            out = inject_label_noise(ds, spec)
            assert np.all(out.labels == false0)


def unlabeled(rng, n_features=4, n=10):
    return UnlabeledDataset(rng.standard_normal((n_features, n)).astype(np.float32))


def column_keys(ds):
    return sorted(ds.samples[:, j].tobytes() for j in range(ds.n_samples))


class TestInjectOpenNoise:
    def test_columns_preserved_and_extended(self):
        rng = np.random.default_rng(10)
        clean = unlabeled(rng, n=12)
        noise = unlabeled(rng, n=8)
        out = inject_open_noise(clean, noise, 5, seed=99)
        assert out.n_samples == 17
        want = sorted(column_keys(clean)
                      + [noise.samples[:, j].tobytes() for j in range(5)])
        assert column_keys(out) == want

    def test_shuffle_is_seeded(self):
        rng = np.random.default_rng(11)
        clean = unlabeled(rng, n=30)
        noise = unlabeled(rng, n=10)
        a = inject_open_noise(clean, noise, 10, seed=1)
        b = inject_open_noise(clean, noise, 10, seed=1)
        c = inject_open_noise(clean, noise, 10, seed=2)
        assert np.array_equal(a.samples, b.samples)
        assert not np.array_equal(a.samples, c.samples)

    def test_zero_noise_still_shuffles(self):
        rng = np.random.default_rng(12)
        clean = unlabeled(rng, n=40)
        out = inject_open_noise(clean, unlabeled(rng, n=1), 0, seed=3)
        assert out.n_samples == 40
        assert column_keys(out) == column_keys(clean)

    def test_noise_budget_exceeds_source(self):
        rng = np.random.default_rng(13)
        with pytest.raises(ValueError, match="noise samples"):
            inject_open_noise(unlabeled(rng), unlabeled(rng, n=3), 4, seed=0)

    def test_feature_mismatch(self):
        rng = np.random.default_rng(14)
        with pytest.raises(ValueError, match="feature dimension"):
            inject_open_noise(unlabeled(rng, n_features=4),
                              unlabeled(rng, n_features=5), 1, seed=0)


SPEC = ModelSpec((4, 6, 3))


class TestPoisonModelUpdate:
    def test_formula(self):
        w_x = init_params(SPEC, 1)
        w_g = init_params(SPEC, 2)
        out = poison_model_update(w_x, w_g, 10)
        want = (10 * w_x.values.astype(np.float64)
                - 9 * w_g.values.astype(np.float64)).astype(np.float32)
        assert np.array_equal(out.values, want)

    def test_single_shot_replacement(self):
        # averaging the malicious upload with K-1 benign copies of w_g
        # recovers the attacker's model up to float32 rounding
        for k in (2, 5, 10, 100):
            w_x = init_params(SPEC, 21)
            w_g = init_params(SPEC, 22)
            w_m = poison_model_update(w_x, w_g, k)
            mean = (w_m.values.astype(np.float64)
                    + (k - 1) * w_g.values.astype(np.float64)) / k
            err = np.abs(mean - w_x.values) / np.maximum(np.abs(w_x.values), 1e-8)
            assert err.max() < 1e-5

    def test_replacement_through_fl_round(self):
        # end to end: benign clients park on w_g (lr=0), the hook swaps in
        # the malicious upload, one aggregation lands on w_x
        rng = np.random.default_rng(30)
        w_g = init_params(SPEC, 40)
        w_x = init_params(SPEC, 41)
        k = 4
        clients = []
        for i in range(k):
            ds = LabeledDataset(rng.standard_normal((4, 6)).astype(np.float32),
                                rng.integers(0, 3, size=6), 3)
            clients.append(ClientState(i, w_g, ds))
        server = ServerState(w_g, round=0, rng_seed=9)
        tc = TrainConfig(0.0, 1, 6)
        cfg = RoundConfig("fl", tc, tc)

        def hook(round_no, client_id, payload):
            if client_id == 0:
                return poison_model_update(w_x, w_g, k)
            return payload

        test = LabeledDataset(rng.standard_normal((4, 9)).astype(np.float32),
                              rng.integers(0, 3, size=9), 3)
        new_server, _, _ = fl_round(server, clients, cfg, test, upload_hook=hook)
        got = new_server.global_model.values.astype(np.float64)
        err = np.abs(got - w_x.values) / np.maximum(np.abs(w_x.values), 1e-8)
        assert err.max() < 1e-5

    def test_spec_mismatch(self):
        w_x = init_params(SPEC, 1)
        w_g = init_params(ModelSpec((4, 3)), 2)
        with pytest.raises(ValueError, match="specs differ"):
            poison_model_update(w_x, w_g, 5)

    def test_needs_two_clients(self):
        w = init_params(SPEC, 1)
        with pytest.raises(ValueError, match="at least 2"):
            poison_model_update(w, w, 1)


class TestPoisonLogits:
    def test_matches_forward(self):
        rng = np.random.default_rng(50)
        w_x = init_params(SPEC, 5)
        subset = rng.standard_normal((4, 7)).astype(np.float32)
        np.testing.assert_array_equal(poison_logits(w_x, subset),
                                      nn.forward(w_x, subset))

    def test_frozen_attacker_repeats_itself(self):
        rng = np.random.default_rng(51)
        w_x = init_params(SPEC, 6)
        subset = rng.standard_normal((4, 5)).astype(np.float32)
        a = poison_logits(w_x, subset)
        b = poison_logits(w_x, subset)
        assert np.array_equal(a, b)


class TestPoisonSpec:
    def test_period_validation(self):
        w = init_params(SPEC, 1)
        with pytest.raises(ValueError, match="attack_period"):
            PoisonSpec(w, 0)
        assert PoisonSpec(w, 5).attack_period == 5
