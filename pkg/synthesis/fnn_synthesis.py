"""
LoRA construction for ReLU FNNs.

Frozen layers are grouped into consecutive blocks, one per target layer. Inside
a block every non-final layer is pushed into its linear regime by a large bias
offset, so the block acts on a bounded input as one affine map whose weight is
the adapted chain product; the final bias then cancels the accumulated offsets.
"""
import math
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from core.exceptions import DimensionMismatchError, NonSingularityViolation
from linalg.matrix_core import (CONDITION_CEILING, Matrix, chain_product, condition_number,
                                frobenius_norm, make_rng, solve,
                                numerical_rank, sigma_k, spectral_norm)
from models.fnn_model import FnnModel
from models.linear_chain import LinearChain
from synthesis.linear_synthesis import (AssumptionReport, LinearAdapterPlan,
                                        RankBudget, adapter_parameter_count)
from synthesis import linear_synthesis
from utils.log_main import logger

OFFSET_INFLATION = 1.1
DEFAULT_OFFSET_MARGIN = 1.0


def default_input_radius(dim: int) -> float:
    return 6.0 * math.sqrt(dim)


@dataclass(frozen=True)
class Partition:
    """Consecutive 0-based layer blocks, one per target layer."""

    blocks: Tuple[Tuple[int, ...], ...]

    def __post_init__(self):
        blocks = tuple(tuple(int(i) for i in b) for b in self.blocks)
        flat = [i for b in blocks for i in b]
        if not blocks or any(not b for b in blocks) or flat != list(range(len(flat))):
            raise ValueError(f"Blocks {blocks} do not cover consecutive layers starting at 0")
        object.__setattr__(self, "blocks", blocks)

    @property
    def frozen_depth(self) -> int:
        return self.blocks[-1][-1] + 1

    @property
    def target_depth(self) -> int:
        return len(self.blocks)

    def one_based(self) -> Tuple[Tuple[int, ...], ...]:
        return tuple(tuple(i + 1 for i in b) for b in self.blocks)


def uniform_partition(frozen_depth: int, target_depth: int) -> Partition:
    """Blocks of M = floor(L / L̄) layers; the last block takes the remainder."""
    if target_depth < 1 or frozen_depth < target_depth:
        raise ValueError(f"Need L >= L̄ >= 1, got L={frozen_depth}, L̄={target_depth}")
    m = frozen_depth // target_depth
    blocks = [tuple(range(i * m, (i + 1) * m)) for i in range(target_depth - 1)]
    blocks.append(tuple(range((target_depth - 1) * m, frozen_depth)))
    return Partition(tuple(blocks))


@dataclass(frozen=True)
class FnnBlockPlan:
    linear_plan: LinearAdapterPlan
    biases: Tuple[np.ndarray, ...]
    offsets: Tuple[Optional[float], ...]
    input_bound: float
    predicted_error: float


@dataclass(frozen=True)
class FnnAdapterPlan:
    deltas: Tuple[Matrix, ...]
    new_biases: Tuple[np.ndarray, ...]
    input_radius: float
    activation_offsets: Tuple[Optional[float], ...]
    per_block_predicted_error: Tuple[float, ...]
    block_input_bounds: Tuple[float, ...]
    partition: Partition
    layer_ranks: Tuple[int, ...]
    frozen_weights: Tuple[Matrix, ...]
    jittered: bool = False

    def adapted_model(self) -> FnnModel:
        """W_l + ΔW_l over the weights the deltas were built for (jittered ones after a retry)."""
        return FnnModel(tuple(w + d for w, d in zip(self.frozen_weights, self.deltas)), self.new_biases)

    @property
    def parameter_count(self) -> int:
        """Low-rank factors plus every retuned bias."""
        d = self.deltas[0].shape[0]
        return adapter_parameter_count(d, self.layer_ranks) + d * len(self.new_biases)

    def certified_pre_activation_margin(self, x: np.ndarray) -> float:
        """Smallest pre-activation over the non-final layers of every block."""
        pre = self.adapted_model().pre_activations(x)
        inner = [pre[i] for block in self.partition.blocks for i in block[:-1]]
        return min((float(np.min(a)) for a in inner), default=float("inf"))


@dataclass(frozen=True)
class ErrorBoundReport:
    beta: float
    per_block_error: Tuple[float, ...]
    bound: float
    squared_bound: Optional[float] = None


@dataclass(frozen=True)
class RequiredRankReport:
    per_block: Tuple[int, ...]
    overall: int


def synthesize_block(frozen_layers: LinearChain,
                     target_weight: Matrix,
                     target_bias: np.ndarray,
                     budget: RankBudget,
                     input_bound: float,
                     margin: float = DEFAULT_OFFSET_MARGIN,
                     jitter: Optional[float] = None,
                     seed: int = 0) -> FnnBlockPlan:
    plan = linear_synthesis.synthesize(frozen_layers, target_weight, budget, jitter=jitter, seed=seed)
    adapted = plan.adapted_chain().weights
    d, depth = frozen_layers.dim, frozen_layers.depth

    biases: List[np.ndarray] = []
    offsets: List[Optional[float]] = []
    offset_sum = np.zeros(d)
    bound = input_bound
    for l in range(depth - 1):
        spread = spectral_norm(adapted[l]) * bound
        c = OFFSET_INFLATION * spread + margin
        biases.append(np.full(d, c))
        offsets.append(c)
        offset_sum = adapted[l] @ offset_sum + biases[-1]
        bound = spread + c * math.sqrt(d)
    biases.append(np.asarray(target_bias, dtype=np.float64) - adapted[-1] @ offset_sum)
    offsets.append(None)

    return FnnBlockPlan(linear_plan=plan,
                        biases=tuple(biases),
                        offsets=tuple(offsets),
                        input_bound=input_bound,
                        predicted_error=plan.predicted_spectral_error)


def _block_gap(frozen: FnnModel, target: FnnModel, partition: Partition, i: int) -> Matrix:
    weights, _ = frozen.layers(partition.blocks[i])
    return target.weights[i] - chain_product(weights)


def _check_pairing(frozen: FnnModel, target: FnnModel, partition: Partition):
    if frozen.dim != target.dim:
        raise DimensionMismatchError(f"Frozen width {frozen.dim} differs from target width {target.dim}")
    if partition.frozen_depth != frozen.depth or partition.target_depth != target.depth:
        raise DimensionMismatchError(
            f"Partition maps {partition.frozen_depth} layers onto {partition.target_depth}; "
            f"models have {frozen.depth} and {target.depth}")


def check_assumptions(frozen: FnnModel, target: FnnModel, partition: Partition,
                      budget: RankBudget) -> AssumptionReport:
    _check_pairing(frozen, target, partition)
    report = AssumptionReport.from_checks(())
    for i, block in enumerate(partition.blocks):
        chain = LinearChain(frozen.layers(block)[0])
        block_report = linear_synthesis.check_assumptions(chain, target.weights[i], budget.slice(block))
        named = tuple((f"block {i + 1}: {name}", c) for name, c in block_report.checked_matrices)
        report = report.merge(AssumptionReport.from_checks(named))
    return report


def synthesize(frozen: FnnModel,
               target: FnnModel,
               partition: Partition,
               budget: RankBudget,
               rho: Optional[float] = None,
               jitter: Optional[float] = None,
               seed: int = 0) -> FnnAdapterPlan:
    """Adapts every block in turn; block i certifies inputs within B_{i-1}.

    B_0 = rho and B_i = (‖W̄_i‖_F + E_i)·B_{i-1} + ‖b̄_i‖, which bounds the
    adapted model's block outputs for inputs within rho.
    """
    _check_pairing(frozen, target, partition)
    rho = default_input_radius(frozen.dim) if rho is None else rho
    ranks = budget.validate(frozen.depth, frozen.dim)

    deltas: List[Matrix] = []
    base: List[Matrix] = []
    jittered = False
    biases: List[np.ndarray] = []
    offsets: List[Optional[float]] = []
    errors: List[float] = []
    bounds: List[float] = []
    bound = rho
    for i, block in enumerate(partition.blocks):
        chain = LinearChain(frozen.layers(block)[0])
        try:
            block_plan = synthesize_block(chain, target.weights[i], target.biases[i],
                                          budget.slice(block), bound, jitter=jitter, seed=seed + i)
        except NonSingularityViolation as e:
            raise e.in_block(i + 1) from e
        linear_plan = block_plan.linear_plan
        if linear_plan.jittered:
            jittered = True
            logger.warning(f"Block {i + 1} was synthesized on jittered weights", extra={"msg_type": "system"})
        deltas.extend(linear_plan.deltas)
        base.extend(linear_plan.frozen_weights)
        biases.extend(block_plan.biases)
        offsets.extend(block_plan.offsets)
        errors.append(block_plan.predicted_error)
        bounds.append(bound)
        bound = (frobenius_norm(target.weights[i]) + block_plan.predicted_error) * bound \
            + float(np.linalg.norm(target.biases[i]))

    return FnnAdapterPlan(deltas=tuple(deltas),
                          new_biases=tuple(biases),
                          input_radius=rho,
                          activation_offsets=tuple(offsets),
                          per_block_predicted_error=tuple(errors),
                          block_input_bounds=tuple(bounds),
                          partition=partition,
                          layer_ranks=ranks,
                          frozen_weights=tuple(base),
                          jittered=jittered)


def required_rank(frozen: FnnModel, target: FnnModel, partition: Partition) -> RequiredRankReport:
    _check_pairing(frozen, target, partition)
    per_block = tuple(
        math.ceil(numerical_rank(_block_gap(frozen, target, partition, i)).numerical_rank / len(block))
        for i, block in enumerate(partition.blocks))
    return RequiredRankReport(per_block=per_block, overall=max(per_block))


def error_bound(frozen: FnnModel,
                target: FnnModel,
                partition: Partition,
                budget: RankBudget,
                sigma: Optional[Matrix] = None) -> ErrorBoundReport:
    """Upper bound on E‖f(x) - f̄(x)‖ for inputs with second moment sigma.

    E_i = σ_{ΣR_l + 1} of block i's gap. For a one-layer target the squared
    form ‖Σ‖_F·E_1² is reported as well.
    """
    _check_pairing(frozen, target, partition)
    sigma = np.eye(frozen.dim) if sigma is None else sigma
    ranks = budget.layer_ranks(frozen.depth)
    errors = tuple(sigma_k(_block_gap(frozen, target, partition, i), sum(ranks[j] for j in block) + 1)
                   for i, block in enumerate(partition.blocks))

    w_norms = [frobenius_norm(w) for w in target.weights]
    b_norms = [float(np.linalg.norm(b)) for b in target.biases]
    root_sigma = math.sqrt(frobenius_norm(sigma))
    n = target.depth
    beta = root_sigma
    for i in range(n):
        term = root_sigma * math.prod(w_norms[:i + 1])
        term += sum(math.prod(w_norms[j + 1:i]) * b_norms[j] for j in range(i + 1))
        beta = max(beta, term)

    growth = max(w + e for w, e in zip(w_norms, errors))
    bound = beta * sum(growth ** (n - (i + 1)) * errors[i] for i in range(n))
    squared = frobenius_norm(sigma) * errors[0] ** 2 if n == 1 else None
    return ErrorBoundReport(beta=beta, per_block_error=errors, bound=bound, squared_bound=squared)


def parameter_counts(dim: int, frozen_depth: int, target_depth: int, rank: int) -> Tuple[int, int]:
    """(adapted LoRA + bias parameters, parameters of the target model)."""
    return 2 * rank * dim * frozen_depth + dim * frozen_depth, dim * dim * target_depth + dim * target_depth


# --- Final-layers impossibility witness ---

def is_witness(frozen: FnnModel, target: FnnModel, x1: np.ndarray, x2: np.ndarray,
               require_full_activation: bool = False) -> bool:
    """True when both points are silenced by the frozen first layer but told apart by the target.

    require_full_activation also asks the target layer to be active on every
    coordinate of both points. That region is tiny, and from D >= 16 on such a
    pair is almost never found; the default check is the one that rules out
    final-layer tuning.
    """
    w1, b1 = frozen.weights[0], frozen.biases[0]
    wt, bt = target.weights[0], target.biases[0]
    for x in (x1, x2):
        if np.any(w1 @ x + b1 > 0):
            return False
        if require_full_activation and np.any(wt @ x + bt <= 0):
            return False
    if np.array_equal(x1, x2):
        return False
    return not np.allclose(target.forward(x1), target.forward(x2), rtol=0.0, atol=1e-12)


def final_layer_witness(frozen: FnnModel,
                        target: FnnModel,
                        search_budget: int = 100_000,
                        seed: int = 0,
                        require_full_activation: bool = False,
                        chunk: int = 1024) -> Optional[Tuple[np.ndarray, np.ndarray]]:
    """Searches the frozen first layer's dead region for two inputs the target separates.

    Candidates are drawn in pre-activation space, y = -|g|·s with g Gaussian,
    and mapped back through x = W_1^{-1}(y - b_1); each partner point pushes y
    slightly further into the dead region. Returns None when nothing is found
    within search_budget candidates. With require_full_activation the search
    rarely succeeds for D >= 16 (see is_witness).
    """
    if frozen.dim < 2 or target.depth != 1:
        raise ValueError("Witness search needs D >= 2 and a one-layer target")
    rng = make_rng([seed, 104729])
    w1, b1 = frozen.weights[0], frozen.biases[0]
    wt, bt = target.weights[0], target.biases[0]
    d = frozen.dim
    invertible = np.isfinite(condition_number(w1)) and condition_number(w1) <= CONDITION_CEILING
    if not invertible:
        logger.warning("Frozen W_1 is singular; witness search falls back to plain Gaussian draws",
                       extra={"msg_type": "system"})

    drawn = 0
    while drawn < search_budget:
        n = min(chunk, search_budget - drawn)
        drawn += n
        if invertible:
            y = -np.abs(rng.standard_normal((d, n))) * rng.uniform(0.5, 4.0, size=n)
            step = -np.abs(rng.standard_normal((d, n))) * 1e-2
            x1 = solve(w1, y - b1[:, None], name="W_1")
            x2 = solve(w1, y + step - b1[:, None], name="W_1")
        else:
            x1 = 4.0 * rng.standard_normal((d, n))
            x2 = 1.01 * x1
        ok = np.all(w1 @ x1 + b1[:, None] <= 0, axis=0) & np.all(w1 @ x2 + b1[:, None] <= 0, axis=0)
        if require_full_activation:
            ok &= np.all(wt @ x1 + bt[:, None] > 0, axis=0) & np.all(wt @ x2 + bt[:, None] > 0, axis=0)
        separation = np.max(np.abs(target.forward(x1) - target.forward(x2)), axis=0)
        ok &= separation > 1e-12
        hits = np.flatnonzero(ok)
        if hits.size:
            j = hits[0]
            return x1[:, j].copy(), x2[:, j].copy()
    return None
