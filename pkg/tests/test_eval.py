import csv
import io

import numpy as np
import pytest

from laoflab import eval as ev
from laoflab.envs import EnvConfig, generate_transitions
from laoflab.errors import UndefinedCorrelationError, UsageError
from laoflab.eval import ExperimentRow
from laoflab.experiments import episode_split_ids
from laoflab.models import PatchEncoder
from laoflab.training import EncodedData, StageConfig, build_model

GRID = EnvConfig()


class TestProbe:
    def test_separable_latents(self):
        rng = np.random.default_rng(0)
        a = rng.integers(0, 5, 2000)
        z = np.eye(5)[a] + rng.normal(0, 0.01, (2000, 5))
        probe = ev.train_probe(z, a, discrete=True)
        assert ev.eval_accuracy(probe.predict(z), a) == 1.0
        assert probe.steps == 3 * int(np.ceil(2000 / ev.PROBE_BATCH))

    def test_noise_latents_are_at_chance(self):
        rng = np.random.default_rng(1)
        z, a = rng.normal(size=(10000, 16)), rng.integers(0, 5, 10000)
        probe = ev.train_probe(z[:5000], a[:5000], discrete=True)
        assert ev.eval_accuracy(probe.predict(z[5000:]), a[5000:]) == pytest.approx(0.2, abs=0.05)

    def test_continuous_probe(self):
        rng = np.random.default_rng(2)
        a = rng.uniform(-3, 3, (3000, 2))
        z = np.concatenate([a, rng.normal(size=(3000, 3))], axis=1)
        probe = ev.train_probe(z, a, discrete=False)
        assert ev.eval_mse(probe.predict(z), a) < 0.5 < ev.eval_mse(np.zeros_like(a), a)

    def test_standardization_makes_scale_irrelevant(self):
        rng = np.random.default_rng(3)
        z, a = rng.normal(size=(500, 4)), rng.integers(0, 5, 500)
        p1 = ev.train_probe(z, a, discrete=True, seed=1)
        p2 = ev.train_probe(z * 1000 + 7, a, discrete=True, seed=1)
        np.testing.assert_allclose(p1.predict(z), p2.predict(z * 1000 + 7), atol=1e-3)

    def test_bad_inputs(self):
        with pytest.raises(UsageError):
            ev.train_probe(np.zeros((0, 3)), np.zeros(0), True)
        with pytest.raises(UsageError):
            ev.train_probe(np.zeros((4, 3)), np.zeros(3), True)

    def test_result_invariants(self):
        with pytest.raises(UsageError):
            ev.ProbeResult("accuracy", 1.5, 10, 0)
        with pytest.raises(UsageError):
            ev.ProbeResult("mse", 0.1, 0, 0)


class TestMetrics:
    def test_accuracy(self):
        assert ev.eval_accuracy([1, 2, 3], [1, 2, 0]) == pytest.approx(2 / 3)
        assert ev.eval_accuracy([4, 4], [4, 4]) == 1.0

    def test_logit_ties_go_low(self):
        assert ev.eval_accuracy(np.array([[0.5, 0.5, 0.1]]), np.array([0])) == 1.0

    def test_mse_squared_convention(self):
        truth = np.array([[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]])
        assert ev.eval_mse(truth, truth) == 0.0
        assert ev.eval_mse(np.zeros_like(truth), truth) == pytest.approx(1.0)

    def test_mismatch(self):
        with pytest.raises(UsageError):
            ev.eval_accuracy([1, 2], [1])
        with pytest.raises(UsageError):
            ev.eval_mse(np.zeros((2, 2)), np.zeros((3, 2)))


class TestRollouts:
    def test_expert_succeeds(self):
        assert ev.rollout_success(ev.expert_policy(), GRID, 100, 64, seed=0) >= 0.99

    def test_random_mostly_fails(self):
        assert ev.rollout_success(ev.uniform_policy(GRID, 0), GRID, 100, 64, seed=0) < 0.3

    def test_seeded(self):
        a = ev.rollout_success(ev.uniform_policy(GRID, 4), GRID, 30, 64, seed=2)
        b = ev.rollout_success(ev.uniform_policy(GRID, 4), GRID, 30, 64, seed=2)
        assert a == b

    def test_preconditions(self):
        with pytest.raises(UsageError):
            ev.rollout_success(ev.expert_policy(), GRID, 0, 64, seed=0)
        with pytest.raises(UsageError):
            ev.rollout_success(ev.expert_policy(), EnvConfig(goal_enabled=False), 5, 64, seed=0)


class TestPearson:
    def test_perfect(self):
        x = np.arange(10.0)
        assert ev.pearson(x, 2 * x + 1) == pytest.approx(1.0)
        assert ev.pearson(x, -x) == pytest.approx(-1.0)

    def test_matches_numpy(self):
        rng = np.random.default_rng(5)
        x, y = rng.normal(size=20), rng.normal(size=20)
        assert ev.pearson(x, y) == pytest.approx(np.corrcoef(x, y)[0, 1])

    def test_constant(self):
        with pytest.raises(UndefinedCorrelationError):
            ev.pearson([1, 1, 1], [1, 2, 3])

    def test_short(self):
        with pytest.raises(UsageError):
            ev.pearson([1], [2])


def rows(variant, values, ratio=0.0, lam=None, success=None):
    return [ExperimentRow(variant, ratio, s, "accuracy", v, success, lam=lam) for s, v in enumerate(values)]


class TestAggregate:
    def test_single_seed_has_zero_std(self):
        t = ev.aggregate_experiments(rows("LAOF", [0.4]))
        assert t.summary[0]["std"] == 0.0

    def test_improvement_over_lapo(self):
        t = ev.aggregate_experiments(rows("LAPO", [0.2, 0.4]) + rows("LAOF", [0.5, 0.7]))
        by = {c["variant"]: c for c in t.summary}
        assert by["LAPO"]["avg_impr"] == 0.0
        assert by["LAOF"]["avg_impr"] == pytest.approx(0.3)
        assert by["LAOF"]["std"] == pytest.approx(0.1)

    def test_missing_baseline_is_absent(self):
        t = ev.aggregate_experiments(rows("LAOF", [0.5]))
        assert t.summary[0]["avg_impr"] is None

    def test_duplicates_rejected(self):
        with pytest.raises(UsageError):
            ev.aggregate_experiments(rows("LAOF", [0.5]) + rows("LAOF", [0.6]))

    def test_lambda_cells_are_separate_and_labelled(self):
        rs = rows("LAOF-Action", [0.3, 0.4], 0.01, 0.01) + rows("LAOF-Action", [0.5], 0.01, 0.1)
        t = ev.aggregate_experiments(rs)
        assert len(t.summary) == 2
        table = list(csv.reader(io.StringIO(t.to_csv())))
        assert table[0] == ["variant", "action_ratio", "seed", "metric", "value"]
        assert table[1][0] == "LAOF-Action[lambda=0.01]"
        series = list(csv.reader(io.StringIO(t.series_csv("lambda"))))
        assert [r[2] for r in series[1:]] == ["0.01", "0.1"]

    def test_success_rows(self):
        t = ev.aggregate_experiments(rows("LAPO", [0.2], success=0.1) + rows("LAOF", [0.3], success=0.4))
        assert sum(1 for line in t.to_csv().splitlines() if ",success," in line) == 2
        by = {c["variant"]: c for c in t.summary}
        assert by["LAOF"]["avg_impr_success"] == pytest.approx(0.3)

    def test_csv_round_trips_values(self):
        t = ev.aggregate_experiments(rows("LAOF", [1 / 3]))
        assert float(t.to_csv().splitlines()[1].split(",")[-1]) == 1 / 3


class TestInvariants:
    def test_probe_does_not_touch_the_model(self):
        ts = generate_transitions(GRID, 200, seed=0)
        data = EncodedData.from_transitions(ts, PatchEncoder(32, 32), *episode_split_ids(ts, 0.3, 0))
        m = build_model(StageConfig(hidden=16, latent_dim=4), data, 256)
        before = {k: v.copy() for k, v in m.state_dict().items()}
        ev.probe_model(m, data, seed=1)
        assert all(np.array_equal(before[k], v) for k, v in m.state_dict().items())

    def test_accuracy_ignores_constant_logit_shift(self):
        rng = np.random.default_rng(6)
        logits, truth = rng.normal(size=(50, 5)), rng.integers(0, 5, 50)
        shift = np.full(5, 3.7)
        assert ev.eval_accuracy(logits, truth) == ev.eval_accuracy(logits + shift, truth)

    @pytest.mark.parametrize("a, b", [(2.5, -1.0), (-0.3, 4.0), (1e3, 0.0)])
    def test_pearson_of_affine_map(self, a, b):
        x = np.random.default_rng(7).normal(size=30)
        assert abs(ev.pearson(x, a * x + b) - np.sign(a)) <= 1e-9

    def test_aggregate_matches_brute_force(self):
        rng = np.random.default_rng(8)
        rs = []
        for v in ("LAPO", "LAOF", "CoMo"):
            rs += rows(v, rng.uniform(0, 1, 4).tolist())
        t = ev.aggregate_experiments(rs)
        for cell in t.summary:
            vals = [r.value for r in rs if r.variant == cell["variant"]]
            assert cell["mean"] == pytest.approx(sum(vals) / len(vals), abs=1e-12)
            mu = sum(vals) / len(vals)
            assert cell["std"] == pytest.approx((sum((v - mu) ** 2 for v in vals) / len(vals)) ** 0.5, abs=1e-12)
