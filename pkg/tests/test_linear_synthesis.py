import numpy as np
import pytest
from numpy.testing import assert_allclose

from core.exceptions import DimensionMismatchError, NonSingularityViolation
from core.experiment_setup import generate_models
from linalg.matrix_core import best_rank_approx, sigma_k, spectral_norm
from models.linear_chain import LinearChain
from synthesis import linear_synthesis as ls
from synthesis.linear_synthesis import RankBudget


class TestRankBudget:
    def test_uniform_and_per_layer(self):
        assert RankBudget.of(3).layer_ranks(2) == (3, 3)
        assert RankBudget.layers([1, 2]).total(2) == 3
        assert RankBudget.layers([1, 2, 4]).slice([0, 2]).per_layer == (1, 4)

    def test_rejects_bad_budgets(self):
        with pytest.raises(ValueError):
            RankBudget.of(-1)
        with pytest.raises(DimensionMismatchError):
            RankBudget.layers([1, 2]).layer_ranks(3)
        with pytest.raises(ValueError):
            RankBudget.of(5).validate(2, 4)


class TestConstruction:
    def setup_method(self):
        self.chain, target = generate_models("linear", dim=16, depth=2, target_depth=1, seed=0)
        self.target = target.product()
        self.error = self.target - self.chain.product()

    @pytest.mark.parametrize("rank", [0, 1, 3, 5, 7])
    def test_reaches_optimal_spectral_error(self, rank):
        plan = ls.synthesize(self.chain, self.target, RankBudget.of(rank))
        achieved = spectral_norm(plan.adapted_chain().product() - self.target)
        assert_allclose(achieved, sigma_k(self.error, 2 * rank + 1), rtol=1e-6, atol=1e-9)
        assert_allclose(plan.achieved_spectral_error, plan.predicted_spectral_error, rtol=1e-6, atol=1e-9)

    def test_product_matches_truncated_error(self):
        plan = ls.synthesize(self.chain, self.target, RankBudget.of(3))
        expected = self.chain.product() + best_rank_approx(self.error, 6)
        assert_allclose(plan.adapted_chain().product(), expected, atol=1e-8)

    def test_exact_once_budget_covers_rank(self):
        plan = ls.synthesize(self.chain, self.target, RankBudget.of(8))
        assert_allclose(plan.adapted_chain().product(), self.target, atol=1e-8)
        assert plan.effective_rank_used == 16

    def test_deltas_respect_layer_ranks(self):
        plan = ls.synthesize(self.chain, self.target, RankBudget.layers([2, 5]))
        ranks = [np.linalg.matrix_rank(d, tol=1e-8) for d in plan.deltas]
        assert ranks[0] <= 2 and ranks[1] <= 5
        assert plan.parameter_count == 2 * 16 * 7

    def test_moving_budget_between_layers_keeps_the_optimum(self):
        a = ls.synthesize(self.chain, self.target, RankBudget.layers([1, 5]))
        b = ls.synthesize(self.chain, self.target, RankBudget.layers([5, 1]))
        assert_allclose(a.achieved_spectral_error, b.achieved_spectral_error, rtol=1e-6)

    def test_zero_rank_leaves_chain_unchanged(self):
        plan = ls.synthesize(self.chain, self.target, RankBudget.of(0))
        assert all(np.all(d == 0) for d in plan.deltas)
        assert_allclose(plan.predicted_spectral_error, spectral_norm(self.error))

    def test_target_equal_to_frozen_needs_no_update(self):
        plan = ls.synthesize(self.chain, self.chain.product(), RankBudget.of(4))
        assert plan.effective_rank_used == 0
        assert plan.predicted_spectral_error == pytest.approx(0.0, abs=1e-12)


class TestAssumptions:
    def test_singular_layer_is_reported(self):
        w = np.eye(4)
        w[3, 3] = 0.0
        chain = LinearChain((w, np.eye(4)))
        report = ls.check_assumptions(chain, 2 * np.eye(4), RankBudget.of(1))
        assert not report.satisfied
        assert "W_1" in report.failures
        with pytest.raises(NonSingularityViolation):
            ls.synthesize(chain, 2 * np.eye(4), RankBudget.of(1))

    def test_jitter_retries_once(self):
        w = np.eye(4)
        w[3, 3] = 0.0
        chain = LinearChain((w, np.eye(4)))
        plan = ls.synthesize(chain, 2 * np.eye(4), RankBudget.of(4), jitter=1e-3, seed=1)
        assert plan.jittered
        assert_allclose(plan.adapted_chain().product(), 2 * np.eye(4), atol=1e-8)

    def test_random_chain_passes(self):
        chain, target = generate_models("linear", dim=8, depth=3, target_depth=1, seed=2)
        assert ls.check_assumptions(chain, target.product(), RankBudget.of(2)).satisfied


class TestHelpers:
    def test_optimal_error(self, linear_pair):
        chain, target = linear_pair
        e = target.product() - chain.product()
        assert ls.optimal_error(chain, target.product(), RankBudget.of(2)) == pytest.approx(sigma_k(e, 5))

    def test_embed_wider_target(self, linear_pair):
        chain, _ = linear_pair
        narrow = np.arange(9.0).reshape(3, 3)
        embedded = ls.embed_wider_target(narrow, chain)
        assert_allclose(embedded[:3, :3], narrow)
        assert_allclose(embedded[3:, :], chain.product()[3:, :])
        with pytest.raises(DimensionMismatchError):
            ls.embed_wider_target(np.eye(9), chain)

    def test_parameter_count(self):
        assert ls.adapter_parameter_count(16, [2, 2]) == 128


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("rank", [1, 2, 3])
def test_budget_can_sit_in_either_layer(seed, rank):
    chain, target = generate_models("linear", dim=8, depth=2, target_depth=1, seed=seed)
    errors = [ls.synthesize(chain, target.product(), RankBudget.layers(split)).achieved_spectral_error
              for split in ((rank, rank), (2 * rank, 0), (0, 2 * rank))]
    assert_allclose(errors, errors[0], atol=1e-7)


def test_random_instances_satisfy_assumptions():
    for seed in range(100):
        chain, target = generate_models("linear", dim=8, depth=2, target_depth=1, seed=seed)
        report = ls.check_assumptions(chain, target.product(), RankBudget.of(4))
        assert report.satisfied, (seed, report.failures)
