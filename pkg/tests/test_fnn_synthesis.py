import numpy as np
import pytest

from core.exceptions import DimensionMismatchError, NonSingularityViolation
from core.experiment_setup import generate_models
from linalg.matrix_core import make_rng, numerical_rank, sample_in_ball
from models.fnn_model import FnnModel
from synthesis import fnn_synthesis as fs
from synthesis.linear_synthesis import RankBudget


class TestPartition:
    def test_uniform_partition_puts_remainder_last(self):
        p = fs.uniform_partition(7, 3)
        assert p.blocks == ((0, 1), (2, 3), (4, 5, 6))
        assert p.one_based() == ((1, 2), (3, 4), (5, 6, 7))
        assert p.frozen_depth == 7 and p.target_depth == 3

    def test_rejects_gaps_and_bad_depths(self):
        with pytest.raises(ValueError):
            fs.Partition(((0,), (2,)))
        with pytest.raises(ValueError):
            fs.uniform_partition(1, 2)

    def test_partition_must_match_models(self, fnn_pair):
        frozen, target = fnn_pair
        with pytest.raises(DimensionMismatchError):
            fs.synthesize(frozen, target, fs.uniform_partition(3, 1), RankBudget.of(1))


class TestConstruction:
    def setup_method(self):
        self.frozen, self.target = generate_models("fnn", dim=16, depth=4, target_depth=2, seed=0)
        self.partition = fs.uniform_partition(4, 2)
        rho = fs.default_input_radius(16)
        self.x = sample_in_ball(16, 512, rho, make_rng([0, 21]))

    def test_exact_at_full_rank(self):
        plan = fs.synthesize(self.frozen, self.target, self.partition, RankBudget.of(8))
        adapted = plan.adapted_model()
        mse = np.mean((adapted.forward(self.x) - self.target.forward(self.x)) ** 2)
        assert mse < 1e-12
        assert all(e == pytest.approx(0.0, abs=1e-9) for e in plan.per_block_predicted_error)

    def test_inner_layers_stay_linear_on_the_ball(self):
        plan = fs.synthesize(self.frozen, self.target, self.partition, RankBudget.of(3))
        assert plan.certified_pre_activation_margin(self.x) > 0.0
        assert plan.activation_offsets[1] is None and plan.activation_offsets[3] is None

    def test_error_shrinks_with_rank(self):
        errors = []
        for rank in (0, 2, 4, 8):
            adapted = fs.synthesize(self.frozen, self.target, self.partition, RankBudget.of(rank)) \
                .adapted_model()
            errors.append(np.mean((adapted.forward(self.x) - self.target.forward(self.x)) ** 2))
        assert errors[-1] < errors[0]
        assert errors[-1] < 1e-12

    def test_parameter_count(self):
        plan = fs.synthesize(self.frozen, self.target, self.partition, RankBudget.of(2))
        assert plan.parameter_count == 2 * 2 * 16 * 4 + 16 * 4
        assert fs.parameter_counts(16, 4, 2, 2) == (plan.parameter_count, 16 * 16 * 2 + 16 * 2)

    def test_required_rank(self):
        report = fs.required_rank(self.frozen, self.target, self.partition)
        assert report.per_block == (8, 8)
        assert report.overall == 8


class TestErrorBound:
    def test_bound_vanishes_at_full_rank(self):
        frozen, target = generate_models("fnn", dim=8, depth=2, target_depth=1, seed=1)
        report = fs.error_bound(frozen, target, fs.uniform_partition(2, 1), RankBudget.of(4))
        assert report.bound == pytest.approx(0.0, abs=1e-8)

    @pytest.mark.parametrize("rank", [1, 2])
    def test_squared_bound_holds_for_one_layer_target(self, rank):
        frozen, target = generate_models("fnn", dim=4, depth=2, target_depth=1, seed=3)
        partition = fs.uniform_partition(2, 1)
        budget = RankBudget.of(rank)
        report = fs.error_bound(frozen, target, partition, budget)
        adapted = fs.synthesize(frozen, target, partition, budget).adapted_model()
        x = make_rng([3, 5]).standard_normal((4, 20000))
        observed = np.mean(np.sum((adapted.forward(x) - target.forward(x)) ** 2, axis=0))
        assert report.squared_bound is not None
        assert observed <= report.squared_bound * 1.05

    def test_bound_decreases_with_rank(self):
        frozen, target = generate_models("fnn", dim=8, depth=4, target_depth=2, seed=4)
        partition = fs.uniform_partition(4, 2)
        bounds = [fs.error_bound(frozen, target, partition, RankBudget.of(r)).bound for r in range(5)]
        assert all(b1 >= b2 for b1, b2 in zip(bounds, bounds[1:]))


class TestAssumptions:
    def test_singular_block_is_tagged(self):
        frozen, target = generate_models("fnn", dim=4, depth=4, target_depth=2, seed=0)
        weights = list(frozen.weights)
        weights[2] = np.diag([1.0, 1.0, 1.0, 0.0])
        broken = FnnModel(tuple(weights), frozen.biases)
        with pytest.raises(NonSingularityViolation) as excinfo:
            fs.synthesize(broken, target, fs.uniform_partition(4, 2), RankBudget.of(1))
        assert excinfo.value.block == 2


class TestFinalLayerWitness:
    def test_witness_defeats_final_layer_tuning(self):
        frozen, target = generate_models("fnn", dim=4, depth=2, target_depth=1, seed=0)
        found = fs.final_layer_witness(frozen, target, search_budget=200_000, seed=0)
        assert found is not None
        x1, x2 = found
        assert fs.is_witness(frozen, target, x1, x2)
        # Anything stacked on the frozen first layer sees the same input for both points
        w1, b1 = frozen.weights[0], frozen.biases[0]
        assert np.all(w1 @ x1 + b1 <= 0) and np.all(w1 @ x2 + b1 <= 0)

    def test_identical_points_are_not_a_witness(self):
        frozen, target = generate_models("fnn", dim=4, depth=2, target_depth=1, seed=0)
        x = -100.0 * np.ones(4)
        assert not fs.is_witness(frozen, target, x, x)

    def test_needs_one_layer_target(self):
        frozen, target = generate_models("fnn", dim=4, depth=4, target_depth=2, seed=0)
        with pytest.raises(ValueError):
            fs.final_layer_witness(frozen, target)


@pytest.mark.parametrize("rank", [0, 1, 2])
def test_mean_error_stays_under_bound_for_two_layer_target(rank):
    frozen, target = generate_models("fnn", dim=4, depth=4, target_depth=2, seed=rank)
    partition = fs.uniform_partition(4, 2)
    budget = RankBudget.of(rank)
    report = fs.error_bound(frozen, target, partition, budget)
    adapted = fs.synthesize(frozen, target, partition, budget).adapted_model()
    x = make_rng([rank, 6]).standard_normal((4, 10_000))
    observed = np.mean(np.linalg.norm(adapted.forward(x) - target.forward(x), axis=0))
    assert observed <= report.bound


class TestJitterRetry:
    def setup_method(self):
        frozen, self.target = generate_models("fnn", dim=8, depth=2, target_depth=1, seed=0)
        weights = list(frozen.weights)
        weights[0] = np.diag([1.0] * 7 + [0.0])
        self.broken = FnnModel(tuple(weights), frozen.biases)
        self.partition = fs.uniform_partition(2, 1)

    def test_deltas_keep_their_rank_on_jittered_weights(self):
        plan = fs.synthesize(self.broken, self.target, self.partition, RankBudget.of(1), jitter=1e-3, seed=0)
        assert plan.jittered
        for delta in plan.deltas:
            assert numerical_rank(delta).numerical_rank <= 1

    def test_plan_records_the_jittered_base(self):
        plan = fs.synthesize(self.broken, self.target, self.partition, RankBudget.of(1), jitter=1e-3, seed=0)
        assert not np.array_equal(plan.frozen_weights[0], self.broken.weights[0])
        assert np.max(np.abs(plan.frozen_weights[0] - self.broken.weights[0])) < 1e-1
        adapted = plan.adapted_model()
        for w, base, delta in zip(adapted.weights, plan.frozen_weights, plan.deltas):
            np.testing.assert_array_equal(w, base + delta)

    def test_full_rank_is_exact_on_the_jittered_base(self):
        plan = fs.synthesize(self.broken, self.target, self.partition, RankBudget.of(4), jitter=1e-3, seed=0)
        x = sample_in_ball(8, 256, fs.default_input_radius(8), make_rng([0, 22]))
        np.testing.assert_allclose(plan.adapted_model().forward(x), self.target.forward(x), atol=1e-6)

    def test_without_jitter_the_violation_is_raised(self):
        with pytest.raises(NonSingularityViolation):
            fs.synthesize(self.broken, self.target, self.partition, RankBudget.of(1))


def test_forward_matches_scalar_loop():
    model, _ = generate_models("fnn", dim=4, depth=3, target_depth=1, seed=2)
    x = make_rng([2, 9]).standard_normal(4)
    z = list(x)
    for w, b in zip(model.weights, model.biases):
        z = [max(0.0, sum(w[i, j] * z[j] for j in range(4)) + b[i]) for i in range(4)]
    np.testing.assert_allclose(model.forward(x), z, atol=1e-12)


def test_random_instances_satisfy_assumptions():
    partition = fs.uniform_partition(2, 1)
    for seed in range(100):
        frozen, target = generate_models("fnn", dim=8, depth=2, target_depth=1, seed=seed)
        report = fs.check_assumptions(frozen, target, partition, RankBudget.of(4))
        assert report.satisfied, (seed, report.failures)


@pytest.mark.slow
@pytest.mark.parametrize("seed", range(5))
def test_exact_at_width_sixteen_across_seeds(seed):
    frozen, target = generate_models("fnn", dim=16, depth=4, target_depth=2, seed=seed)
    plan = fs.synthesize(frozen, target, fs.uniform_partition(4, 2), RankBudget.of(8))
    x = sample_in_ball(16, 256, fs.default_input_radius(16), make_rng([seed, 21]))
    deviation = np.abs(plan.adapted_model().forward(x) - target.forward(x))
    assert np.max(deviation) < 1e-6
    assert np.mean(deviation ** 2) < 1e-10


@pytest.mark.slow
def test_witness_found_for_most_wide_instances():
    found = 0
    for seed in range(20):
        frozen, target = generate_models("fnn", dim=16, depth=8, target_depth=1, seed=seed)
        pair = fs.final_layer_witness(frozen, target, search_budget=100_000, seed=seed)
        if pair is not None:
            assert fs.is_witness(frozen, target, *pair)
            found += 1
    assert found >= 19
