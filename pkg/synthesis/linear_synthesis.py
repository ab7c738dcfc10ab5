"""
Closed-form LoRA adapters for a product of square matrices.

Given a frozen chain W_L ... W_1 and a target W̄, the construction spreads the
leading singular directions of E = W̄ - ∏W over the layers: layer l receives
the window of right singular vectors between its cumulative budgets, and its
update is solved against the already-updated prefix and the frozen suffix so
that ∏(W_l + ΔW_l) = ∏W + α_k(E) with k = min(ΣR_l, rank E).
"""
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from core.exceptions import DimensionMismatchError, NonSingularityViolation
from linalg.matrix_core import (CONDITION_CEILING, EXACTNESS_TOL, Matrix,
                                best_rank_approx, chain_product, condition_number,
                                numerical_rank, sigma_k, solve, solve_right,
                                spectral_norm, svd)
from models.linear_chain import LinearChain
from utils.log_main import logger

PLAN_ERROR_TOL = 1e-7


@dataclass(frozen=True)
class RankBudget:
    """Either one rank for every layer or an explicit per-layer sequence."""

    uniform: Optional[int] = None
    per_layer: Optional[Tuple[int, ...]] = None

    def __post_init__(self):
        if (self.uniform is None) == (self.per_layer is None):
            raise ValueError("Give exactly one of uniform or per_layer")
        if self.per_layer is not None:
            object.__setattr__(self, "per_layer", tuple(int(r) for r in self.per_layer))
            if any(r < 0 for r in self.per_layer):
                raise ValueError(f"Ranks must be nonnegative, got {self.per_layer}")
        elif self.uniform < 0:
            raise ValueError(f"Rank must be nonnegative, got {self.uniform}")

    @classmethod
    def of(cls, rank: int) -> "RankBudget":
        return cls(uniform=int(rank))

    @classmethod
    def layers(cls, ranks: Sequence[int]) -> "RankBudget":
        return cls(per_layer=tuple(ranks))

    def layer_ranks(self, depth: int) -> Tuple[int, ...]:
        if self.per_layer is None:
            return (self.uniform,) * depth
        if len(self.per_layer) != depth:
            raise DimensionMismatchError(f"Budget lists {len(self.per_layer)} ranks for a chain of depth {depth}")
        return self.per_layer

    def validate(self, depth: int, dim: int) -> Tuple[int, ...]:
        ranks = self.layer_ranks(depth)
        if any(r > dim for r in ranks):
            raise ValueError(f"Ranks {ranks} exceed the width {dim}")
        return ranks

    def total(self, depth: int) -> int:
        return sum(self.layer_ranks(depth))

    def slice(self, indices: Sequence[int]) -> "RankBudget":
        """Budget restricted to the given 0-based layers."""
        if self.per_layer is None:
            return self
        return RankBudget.layers([self.per_layer[i] for i in indices])


@dataclass(frozen=True)
class AssumptionReport:
    checked_matrices: Tuple[Tuple[str, float], ...]
    min_condition_margin: float
    satisfied: bool
    failures: Tuple[str, ...] = ()

    @classmethod
    def from_checks(cls, checks: Sequence[Tuple[str, float]]) -> "AssumptionReport":
        """Margin is CONDITION_CEILING / condition; a check fails below 1."""
        margins = [CONDITION_CEILING / c if np.isfinite(c) and c > 0 else 0.0 for _, c in checks]
        failures = tuple(name for (name, _), m in zip(checks, margins) if m < 1.0)
        return cls(checked_matrices=tuple(checks),
                   min_condition_margin=min(margins, default=float("inf")),
                   satisfied=not failures,
                   failures=failures)

    def merge(self, other: "AssumptionReport") -> "AssumptionReport":
        return AssumptionReport.from_checks(self.checked_matrices + other.checked_matrices)

    def worst(self) -> Tuple[str, float]:
        return max(self.checked_matrices, key=lambda item: item[1])


@dataclass(frozen=True)
class LinearAdapterPlan:
    deltas: Tuple[Matrix, ...]
    achieved_spectral_error: float
    predicted_spectral_error: float
    effective_rank_used: int
    layer_ranks: Tuple[int, ...]
    frozen_weights: Tuple[Matrix, ...]
    jittered: bool = False

    def adapted_chain(self) -> LinearChain:
        return LinearChain(tuple(w + d for w, d in zip(self.frozen_weights, self.deltas)))

    @property
    def parameter_count(self) -> int:
        return adapter_parameter_count(self.frozen_weights[0].shape[0], self.layer_ranks)


def adapter_parameter_count(dim: int, ranks: Sequence[int]) -> int:
    return int(sum(2 * r * dim for r in ranks))


def error_matrix(chain: LinearChain, target: Matrix) -> Matrix:
    if target.shape != (chain.dim, chain.dim):
        raise DimensionMismatchError(f"Target shape {target.shape} does not match chain width {chain.dim}")
    return target - chain.product()


def optimal_error(chain: LinearChain, target: Matrix, budget: RankBudget) -> float:
    """sigma_{ΣR_l + 1}(E): the smallest spectral error any budgeted adapter reaches."""
    return sigma_k(error_matrix(chain, target), budget.total(chain.depth) + 1)


def check_assumptions(chain: LinearChain, target: Matrix, budget: RankBudget) -> AssumptionReport:
    """Condition checks on every W_l and on ∏W + α_r(E) for r up to Σ_{l<L} R_l.

    α_r(E) stops changing once r reaches the numerical rank of E, so larger r
    repeat the last matrix and are not listed again.
    """
    ranks = budget.layer_ranks(chain.depth)
    checks = [(f"W_{l}", condition_number(w)) for l, w in enumerate(chain.weights, start=1)]
    e = error_matrix(chain, target)
    e_rank = numerical_rank(e).numerical_rank
    product = chain.product()
    for r in range(1, min(sum(ranks[:-1]), e_rank) + 1):
        checks.append((f"prod_W + alpha_{r}(E)", condition_number(product + best_rank_approx(e, r))))
    return AssumptionReport.from_checks(checks)


def _synthesize_once(chain: LinearChain, target: Matrix, budget: RankBudget) -> LinearAdapterPlan:
    ranks = budget.validate(chain.depth, chain.dim)
    e = error_matrix(chain, target)
    factors = svd(e, name="E")
    e_rank = numerical_rank(e).numerical_rank
    k_total = min(sum(ranks), e_rank)

    depth, d = chain.depth, chain.dim
    deltas: List[Matrix] = []
    prefix = np.eye(d)
    used = 0
    for l in range(depth):
        lo, hi = min(used, k_total), min(used + ranks[l], k_total)
        used += ranks[l]
        if hi <= lo:
            delta = np.zeros((d, d))
        else:
            # E' Q_l keeps only the singular triplets in the window
            window = (factors.u[:, lo:hi] * factors.singular_values[lo:hi]) @ factors.v[:, lo:hi].T
            suffix = chain_product(chain.weights[l + 1:], dim=d)
            try:
                left = solve(suffix, window, name=f"prod_W[{l + 2}..{depth}]")
                delta = solve_right(left, prefix, name=f"prod_(W+dW)[1..{l}]")
            except NonSingularityViolation as e_sing:
                raise NonSingularityViolation(e_sing.matrix_name, e_sing.condition, layer=l + 1, r=hi) from e_sing
        deltas.append(delta)
        updated = chain.weights[l] + delta
        if l < depth - 1:
            cond = condition_number(updated)
            if not np.isfinite(cond) or cond > CONDITION_CEILING:
                raise NonSingularityViolation(f"W_{l + 1} + dW_{l + 1}", cond, layer=l + 1, r=hi)
        prefix = updated @ prefix

    achieved = spectral_norm(prefix - target)
    predicted = sigma_k(e, sum(ranks) + 1)
    if abs(achieved - predicted) > PLAN_ERROR_TOL:
        logger.warning(f"Achieved spectral error {achieved:.3e} differs from optimum {predicted:.3e}",
                       extra={"msg_type": "system"})
    residual = np.linalg.norm(prefix - (chain.product() + best_rank_approx(e, k_total)), "fro")
    if residual > EXACTNESS_TOL * (1.0 + np.linalg.norm(target, "fro")):
        logger.warning(f"Adapted product deviates from prod_W + alpha_{k_total}(E) by {residual:.3e}",
                       extra={"msg_type": "system"})
    return LinearAdapterPlan(deltas=tuple(deltas),
                             achieved_spectral_error=achieved,
                             predicted_spectral_error=predicted,
                             effective_rank_used=k_total,
                             layer_ranks=ranks,
                             frozen_weights=chain.weights)


def jitter_chain(chain: LinearChain, scale: float, seed: int) -> LinearChain:
    rng = np.random.default_rng([seed, 7919])
    return LinearChain(tuple(w + scale * rng.standard_normal(w.shape) for w in chain.weights))


def synthesize(chain: LinearChain,
               target: Matrix,
               budget: RankBudget,
               jitter: Optional[float] = None,
               seed: int = 0) -> LinearAdapterPlan:
    """Builds the optimal budgeted adapters for (chain, target).

    Raises NonSingularityViolation when an assumption matrix is singular. With
    jitter > 0 the frozen chain is perturbed once and the construction retried;
    the returned plan then applies to the perturbed weights.
    """
    report = check_assumptions(chain, target, budget)
    try:
        if not report.satisfied:
            name, cond = report.worst()
            raise NonSingularityViolation(name, cond)
        return _synthesize_once(chain, target, budget)
    except NonSingularityViolation as e:
        if not jitter:
            raise
        logger.warning(f"{e}; retrying once with jitter {jitter}", extra={"msg_type": "system"})
        plan = _synthesize_once(jitter_chain(chain, jitter, seed), target, budget)
        return replace(plan, jittered=True)


def embed_wider_target(target: Matrix, chain: LinearChain) -> Matrix:
    """Pads a D̄ x D̄ target to the chain width using the chain's own product."""
    d_bar = target.shape[0]
    if target.shape != (d_bar, d_bar) or d_bar > chain.dim:
        raise DimensionMismatchError(f"Cannot embed a {target.shape} target into width {chain.dim}")
    embedded = chain.product().copy()
    embedded[:d_bar, :d_bar] = target
    return embedded
