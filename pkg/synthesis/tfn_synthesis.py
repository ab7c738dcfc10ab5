"""
LoRA construction for transformer networks.

Every adapted product pair (key/query, value/output or value/first
feedforward, output/last feedforward) is solved as a two-layer linear chain.
For blocks after the first, the pair targets are conjugated by
W̄_2 W_2^{-1} of the previous block, whose bias is rescaled so that the
adapted block output is an invertible linear image of the target's.
"""
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from core.exceptions import DimensionMismatchError, NonSingularityViolation
from core.interfaces import HEAD_TYPE_MULTI, HEAD_TYPE_SINGLE
from linalg.matrix_core import (CONDITION_CEILING, Matrix, best_rank_approx,
                                condition_number, numerical_rank, solve, solve_right)
from models.linear_chain import LinearChain
from models.tfn_model import TfnBlock, TfnModel
from synthesis import linear_synthesis
from synthesis.linear_synthesis import (AssumptionReport, LinearAdapterPlan, RankBudget,
                                        adapter_parameter_count)
from utils.log_main import logger


@dataclass(frozen=True)
class GapReport:
    gaps: Tuple[int, ...]
    required_rank: int


@dataclass(frozen=True, eq=False)
class TfnBlockDeltas:
    w_q: Tuple[Matrix, ...]
    w_k: Tuple[Matrix, ...]
    w_v: Tuple[Matrix, ...]
    w_1: Matrix
    w_2: Matrix
    w_o: Tuple[Matrix, ...] = field(default=())


@dataclass(frozen=True, eq=False)
class TfnAdapterPlan:
    blocks: Tuple[TfnBlockDeltas, ...]
    w_out: Matrix
    biases_1: Tuple[np.ndarray, ...]
    biases_2: Tuple[np.ndarray, ...]
    rank: int
    head_type: str
    base: TfnModel
    jittered: bool = False

    def adapted_model(self) -> TfnModel:
        """Deltas and new biases applied to the base (the frozen model, jittered where a pair needed it)."""
        blocks = []
        for block, delta, b1, b2 in zip(self.base.blocks, self.blocks, self.biases_1, self.biases_2):
            blocks.append(TfnBlock(
                w_q=tuple(w + d for w, d in zip(block.w_q, delta.w_q)),
                w_k=tuple(w + d for w, d in zip(block.w_k, delta.w_k)),
                w_v=tuple(w + d for w, d in zip(block.w_v, delta.w_v)),
                w_o=tuple(w + d for w, d in zip(block.w_o, delta.w_o)),
                w_1=block.w_1 + delta.w_1,
                w_2=block.w_2 + delta.w_2,
                b_1=b1, b_2=b2))
        return TfnModel(blocks=tuple(blocks), w_out=self.base.w_out + self.w_out, head_type=self.head_type)

    def named_deltas(self) -> Dict[str, Matrix]:
        named: Dict[str, Matrix] = {}
        for l, delta in enumerate(self.blocks, start=1):
            for h in range(len(delta.w_q)):
                named[f"W_Q_{l}_{h + 1}"] = delta.w_q[h]
                named[f"W_K_{l}_{h + 1}"] = delta.w_k[h]
                named[f"W_V_{l}_{h + 1}"] = delta.w_v[h]
                if delta.w_o:
                    named[f"W_O_{l}_{h + 1}"] = delta.w_o[h]
            named[f"W_1_{l}"] = delta.w_1
            named[f"W_2_{l}"] = delta.w_2
        named["W_o"] = self.w_out
        return named

    def adapted_names(self) -> Tuple[str, ...]:
        """Matrices that carry an adapter; every other delta is pinned to zero."""
        depth = len(self.blocks)
        names = []
        for l, delta in enumerate(self.blocks, start=1):
            for h in range(1, len(delta.w_q) + 1):
                names += [f"W_Q_{l}_{h}", f"W_K_{l}_{h}", f"W_V_{l}_{h}"]
                if self.head_type == HEAD_TYPE_MULTI:
                    names.append(f"W_O_{l}_{h}")
            if self.head_type == HEAD_TYPE_SINGLE:
                names.append(f"W_1_{l}")
        names += [f"W_2_{depth}", "W_o"]
        return tuple(names)

    @property
    def parameter_count(self) -> int:
        d = self.w_out.shape[0]
        biases = d * (len(self.biases_1) + len(self.biases_2))
        return adapter_parameter_count(d, [self.rank] * len(self.adapted_names())) + biases


def _check_pairing(frozen: TfnModel, target: TfnModel):
    if (frozen.dim, frozen.depth, frozen.heads, frozen.head_type) != \
            (target.dim, target.depth, target.heads, target.head_type):
        raise DimensionMismatchError("Frozen and target transformers must share (D, L, H, head_type)")


def _require_invertible(m: Matrix, name: str):
    cond = condition_number(m)
    if not np.isfinite(cond) or cond > CONDITION_CEILING:
        raise NonSingularityViolation(name, cond)


def _conjugator(frozen: TfnModel, target: TfnModel, l: int) -> Optional[Matrix]:
    """W̄_{2,l-1} W_{2,l-1}^{-1}, or None for the first block."""
    if l == 0:
        return None
    return solve_right(target.blocks[l - 1].w_2, frozen.blocks[l - 1].w_2, name=f"W_2_{l}")



Slot = Tuple[str, Optional[int]]


@dataclass(frozen=True, eq=False)
class _Pair:
    """Adapted form must satisfy (left + dL)(right + dR) = target."""

    name: str
    right: Matrix
    left: Matrix
    target: Matrix
    right_slot: Slot
    left_slot: Slot
    transpose_left: bool = False

    def store(self, sink: Dict, values: List[Matrix]):
        """Writes (right, left) values into their slots, undoing the transpose of the left one."""
        left = values[1].T if self.transpose_left else values[1]
        for (key, index), value in ((self.right_slot, values[0]), (self.left_slot, left)):
            if index is None:
                sink[key] = value
            else:
                sink[key][index] = value


def _block_pairs(frozen: TfnModel, target: TfnModel, l: int) -> List[_Pair]:
    """Product pairs of block l (0-based), each with the product its adapted form must equal."""
    fb, tb = frozen.blocks[l], target.blocks[l]
    conj = _conjugator(frozen, target, l)
    pairs = []
    for h in range(fb.heads):
        kq = tb.w_k[h].T @ tb.w_q[h]
        if conj is not None:
            kq = conj.T @ kq @ conj
        pairs.append(_Pair(f"W_K_{l + 1}_{h + 1}^T W_Q_{l + 1}_{h + 1}", fb.w_q[h], fb.w_k[h].T, kq,
                           right_slot=("w_q", h), left_slot=("w_k", h), transpose_left=True))
        if frozen.head_type == HEAD_TYPE_MULTI:
            value = solve(fb.w_1, tb.w_1 @ tb.w_o[h] @ tb.w_v[h], name=f"W_1_{l + 1}")
            name, left, left_slot = f"W_O_{l + 1}_{h + 1} W_V_{l + 1}_{h + 1}", fb.w_o[h], ("w_o", h)
        else:
            value = tb.w_1 @ tb.w_v[h]
            name, left, left_slot = f"W_1_{l + 1} W_V_{l + 1}_{h + 1}", fb.w_1, ("w_1", None)
        if conj is not None:
            value = value @ conj
        pairs.append(_Pair(name, fb.w_v[h], left, value, right_slot=("w_v", h), left_slot=left_slot))
    return pairs


def _output_pair(frozen: TfnModel, target: TfnModel) -> _Pair:
    return _Pair(f"W_o W_2_{frozen.depth}", frozen.blocks[-1].w_2, frozen.w_out,
                 target.w_out @ target.blocks[-1].w_2,
                 right_slot=("w_2", None), left_slot=("w_out", None))


def compute_gaps(frozen: TfnModel, target: TfnModel) -> GapReport:
    """Rank gaps G_1..G_{L+1} between target and frozen product pairs.

    For blocks after the first both sides are conjugated by the previous
    block's W_2 (target side by W̄_2), which needs both to be invertible.
    """
    _check_pairing(frozen, target)
    rank = lambda m: numerical_rank(m).numerical_rank
    gaps = []
    for l, (fb, tb) in enumerate(zip(frozen.blocks, target.blocks)):
        if l > 0:
            _require_invertible(frozen.blocks[l - 1].w_2, f"frozen W_2_{l}")
            _require_invertible(target.blocks[l - 1].w_2, f"target W_2_{l}")
            f2, t2 = frozen.blocks[l - 1].w_2, target.blocks[l - 1].w_2
        else:
            f2 = t2 = np.eye(frozen.dim)
        g = 0
        for h in range(fb.heads):
            g = max(g, rank(t2.T @ tb.w_k[h].T @ tb.w_q[h] @ t2 - f2.T @ fb.w_k[h].T @ fb.w_q[h] @ f2))
            if frozen.head_type == HEAD_TYPE_MULTI:
                value_gap = tb.w_1 @ tb.w_o[h] @ tb.w_v[h] @ t2 - fb.w_1 @ fb.w_o[h] @ fb.w_v[h] @ f2
            else:
                value_gap = tb.w_1 @ tb.w_v[h] @ t2 - fb.w_1 @ fb.w_v[h] @ f2
            g = max(g, rank(value_gap))
        gaps.append(g)
    gaps.append(rank(target.w_out @ target.blocks[-1].w_2 - frozen.w_out @ frozen.blocks[-1].w_2))
    return GapReport(gaps=tuple(gaps), required_rank=math.ceil(max(gaps) / 2))


def check_assumptions(frozen: TfnModel, target: TfnModel, rank: int) -> AssumptionReport:
    """Conditions every weight of both models and every pair product plus α_r of its gap, r <= rank."""
    _check_pairing(frozen, target)
    checks = [(f"frozen {name}", condition_number(w)) for name, w in frozen.named_weights().items()]
    checks += [(f"target {name}", condition_number(w)) for name, w in target.named_weights().items()]
    pairs: List[_Pair] = []
    for l in range(frozen.depth):
        try:
            pairs += _block_pairs(frozen, target, l)
        except NonSingularityViolation as e:
            logger.debug(f"Skipping pair checks of block {l + 1}: {e}", extra={"msg_type": "system"})
    pairs.append(_output_pair(frozen, target))
    for pair in pairs:
        product = pair.left @ pair.right
        gap = pair.target - product
        for r in range(1, min(rank, numerical_rank(gap).numerical_rank) + 1):
            checks.append((f"{pair.name} + alpha_{r}", condition_number(product + best_rank_approx(gap, r))))
    return AssumptionReport.from_checks(checks)


def _synthesize_pair(pair: _Pair, rank: int, jitter: Optional[float], seed: int) -> LinearAdapterPlan:
    """Two-layer plan for the pair; its deltas apply to plan.frozen_weights (right, left)."""
    try:
        plan = linear_synthesis.synthesize(LinearChain((pair.right, pair.left)), pair.target,
                                           RankBudget.of(rank), jitter=jitter, seed=seed)
    except NonSingularityViolation as e:
        raise NonSingularityViolation(f"{pair.name}: {e.matrix_name}", e.condition, layer=e.layer, r=e.r) from e
    return plan


def _weight_slots(block: TfnBlock) -> Dict:
    return {"w_q": list(block.w_q), "w_k": list(block.w_k), "w_v": list(block.w_v),
            "w_o": list(block.w_o), "w_1": block.w_1, "w_2": block.w_2}


def synthesize(frozen: TfnModel, target: TfnModel, rank: int,
               jitter: Optional[float] = None, seed: int = 0) -> TfnAdapterPlan:
    """Closed-form adapters of rank <= rank; exact once rank >= ceil(max G_i / 2).

    A pair retried on jittered weights keeps its deltas relative to those
    weights, and the plan's base model carries them.
    """
    _check_pairing(frozen, target)
    if not 0 <= rank <= frozen.dim:
        raise ValueError(f"Rank {rank} outside [0, {frozen.dim}]")
    d, heads, depth = frozen.dim, frozen.heads, frozen.depth
    zero = lambda: np.zeros((d, d))

    sinks: List[Dict] = []
    bases: List[Dict] = []
    biases_1: List[np.ndarray] = []
    biases_2: List[np.ndarray] = []
    jittered = False

    def apply(pair: _Pair, sink: Dict, base: Dict, pair_seed: int):
        nonlocal jittered
        plan = _synthesize_pair(pair, rank, jitter, pair_seed)
        pair.store(sink, list(plan.deltas))
        pair.store(base, list(plan.frozen_weights))
        if plan.jittered:
            jittered = True
            logger.warning(f"Pair {pair.name} was synthesized on jittered weights", extra={"msg_type": "system"})

    for l in range(depth):
        sink = {"w_q": [zero() for _ in range(heads)], "w_k": [zero() for _ in range(heads)],
                "w_v": [zero() for _ in range(heads)], "w_o": [zero() for _ in range(heads)],
                "w_1": zero(), "w_2": zero()}
        base = _weight_slots(frozen.blocks[l])
        for j, pair in enumerate(_block_pairs(frozen, target, l)):
            apply(pair, sink, base, seed + 100 * l + j)
        biases_1.append(target.blocks[l].b_1.copy())
        if l < depth - 1:
            # Ẑ_l = W_2 W̄_2^{-1} Z̄_l
            fb, tb = frozen.blocks[l], target.blocks[l]
            biases_2.append(fb.w_2 @ solve(tb.w_2, tb.b_2, name=f"target W_2_{l + 1}"))
        sinks.append(sink)
        bases.append(base)

    bases[-1]["w_out"] = frozen.w_out
    apply(_output_pair(frozen, target), sinks[-1], bases[-1], seed + 100 * depth)
    w_out_delta = sinks[-1].pop("w_out")
    w_out_base = bases[-1].pop("w_out")
    biases_2.append(solve(w_out_base + w_out_delta, target.w_out @ target.blocks[-1].b_2, name="W_o + dW_o"))

    multi = frozen.head_type == HEAD_TYPE_MULTI
    blocks = tuple(TfnBlockDeltas(w_q=tuple(s["w_q"]), w_k=tuple(s["w_k"]), w_v=tuple(s["w_v"]),
                                  w_o=tuple(s["w_o"]) if multi else (), w_1=s["w_1"], w_2=s["w_2"])
                   for s in sinks)
    base_model = TfnModel(
        blocks=tuple(TfnBlock(w_q=tuple(b["w_q"]), w_k=tuple(b["w_k"]), w_v=tuple(b["w_v"]),
                              w_o=tuple(b["w_o"]), w_1=b["w_1"], w_2=b["w_2"],
                              b_1=fb.b_1, b_2=fb.b_2)
                     for b, fb in zip(bases, frozen.blocks)),
        w_out=w_out_base, head_type=frozen.head_type)
    return TfnAdapterPlan(blocks=blocks, w_out=w_out_delta,
                          biases_1=tuple(biases_1), biases_2=tuple(biases_2),
                          rank=rank, head_type=frozen.head_type,
                          base=base_model, jittered=jittered)


def intermediate_deviation(plan: TfnAdapterPlan, target: TfnModel, x: np.ndarray) -> Tuple[float, ...]:
    """max |Ĥ_l - H̄_l| per block; the first large entry localizes a failed pair."""
    adapted = plan.adapted_model().block_outputs(x)
    reference = target.block_outputs(x)
    return tuple(float(np.max(np.abs(a[0] - r[0]))) for a, r in zip(adapted, reference))
