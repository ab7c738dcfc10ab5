"""
Gradient-based baselines: LoRA fine-tuning, final-layers tuning, and the
pretraining protocol that produces the "pretrained" frozen variant.

Every run draws its data from seeded streams derived from TrainConfig.seed, so
two runs with the same config (and the same grid cell) see identical batches.
"""
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Mapping, Optional, Tuple

import numpy as np

from core.exceptions import (DimensionMismatchError, PretrainingCapExceeded,
                             TrainingDivergedError)
from core.interfaces import MODEL_KIND_FNN, MODEL_KIND_LINEAR, MODEL_KIND_TFN
from linalg.matrix_core import make_rng
from models.base_model import BaseModel
from training.adam import Adam
from training.graphs import forward_graph, lora_keys, materialize
from training.tape import Node, Tape, grad
from utils.log_main import logger

LOSS_MSE = "mse"
LOSS_CROSS_ENTROPY = "cross_entropy"

# Independent random streams per seed
STREAM_INIT = 1
STREAM_BATCHES = 2
STREAM_VALIDATION = 3
STREAM_PRETRAIN = 4


@dataclass(frozen=True)
class TrainConfig:
    learning_rates: Tuple[float, ...] = (1e-2, 1e-3, 1e-4)
    weight_decays: Tuple[float, ...] = (0.0, 1e-2, 1e-3, 1e-4)
    iterations: int = 5000
    batch: int = 256
    validation_size: int = 256
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0
    tokens: int = 10
    pretrain_learning_rate: float = 1e-3
    pretrain_check_every: int = 50
    pretrain_cap: int = 50000
    pretrain_eval_size: int = 1024

    def __post_init__(self):
        object.__setattr__(self, "learning_rates", tuple(float(v) for v in self.learning_rates))
        object.__setattr__(self, "weight_decays", tuple(float(v) for v in self.weight_decays))
        if not self.learning_rates or not self.weight_decays:
            raise ValueError("The hyperparameter grid must not be empty")
        if self.batch <= 0 or self.validation_size <= 0:
            raise ValueError(f"batch and validation_size must be positive, got {self.batch}, {self.validation_size}")
        if self.iterations < 0:
            raise ValueError(f"iterations must be nonnegative, got {self.iterations}")

    @classmethod
    def from_dict(cls, values: Mapping[str, Any]) -> "TrainConfig":
        return cls(**dict(values))

    def with_seed(self, seed: int) -> "TrainConfig":
        return replace(self, seed=int(seed))

    def optimizer(self, lr: float, weight_decay: float) -> Adam:
        return Adam(lr=lr, beta1=self.beta1, beta2=self.beta2, epsilon=self.epsilon, weight_decay=weight_decay)


@dataclass(frozen=True, eq=False)
class LoraParam:
    a: np.ndarray
    b: np.ndarray

    @property
    def rank(self) -> int:
        return self.a.shape[1]

    @property
    def delta(self) -> np.ndarray:
        return self.a @ self.b.T


@dataclass(frozen=True)
class LossCurve:
    losses: Tuple[float, ...]
    learning_rate: float
    weight_decay: float
    validation_loss: float


@dataclass(frozen=True)
class GridCell:
    learning_rate: float
    weight_decay: float
    validation_loss: float
    diverged: bool = False


@dataclass(frozen=True, eq=False)
class TrainResult:
    model: BaseModel
    curve: LossCurve
    params: Dict[str, np.ndarray]
    params_tunable: int
    grid: Tuple[GridCell, ...] = ()

    @property
    def adapters(self) -> Dict[str, LoraParam]:
        out = {}
        for key in self.params:
            if key.endswith(".A"):
                name = key[:-2]
                out[name] = LoraParam(self.params[key], self.params[lora_keys(name)[1]])
        return out


@dataclass(frozen=True, eq=False)
class PretrainResult:
    model: BaseModel
    initial_mse: float
    final_mse: float
    iterations: int
    checkpoints: Tuple[Tuple[int, float], ...] = field(default=())

    @property
    def ratio(self) -> float:
        return self.final_mse / self.initial_mse if self.initial_mse > 0 else 0.0


# --- Data ---

def draw_inputs(model: BaseModel, count: int, rng: np.random.Generator, tokens: int) -> np.ndarray:
    """Standard Gaussian inputs: (D, count) columns, or (count, D, tokens) sequences for transformers."""
    if model.kind == MODEL_KIND_TFN:
        return rng.standard_normal((count, model.dim, tokens))
    return rng.standard_normal((model.dim, count))


def finite_train_inputs(model: BaseModel, count: int, config: TrainConfig) -> np.ndarray:
    """The fixed training set used when training on finitely many samples."""
    return draw_inputs(model, int(count), make_rng([config.seed, STREAM_BATCHES, 1]), config.tokens)


def _take(x: np.ndarray, idx: np.ndarray, kind: str) -> np.ndarray:
    return x[idx] if kind == MODEL_KIND_TFN else x[:, idx]


def _input_count(x: np.ndarray, kind: str) -> int:
    return x.shape[0] if kind == MODEL_KIND_TFN else x.shape[1]


def head_output(model: BaseModel, x: np.ndarray, head: Optional[np.ndarray]) -> np.ndarray:
    out = model.forward(x)
    return out if head is None else head @ out


def class_labels(outputs: np.ndarray) -> np.ndarray:
    """Argmax class per column of a (C, n) output."""
    return np.argmax(outputs, axis=-2)


class _Objective:
    """Loss of frozen-with-params against the target on a given input batch."""

    def __init__(self, frozen: BaseModel, target: BaseModel, loss: str, head: Optional[np.ndarray]):
        if loss not in (LOSS_MSE, LOSS_CROSS_ENTROPY):
            raise ValueError(f"Unknown loss '{loss}'")
        if loss == LOSS_CROSS_ENTROPY and frozen.kind == MODEL_KIND_TFN:
            raise ValueError("Cross-entropy training is defined for column outputs (linear and FNN models)")
        self.frozen, self.target, self.loss, self.head = frozen, target, loss, head

    def reference(self, x: np.ndarray) -> np.ndarray:
        out = head_output(self.target, x, self.head)
        return class_labels(out) if self.loss == LOSS_CROSS_ENTROPY else out

    def build(self, x: np.ndarray, reference: np.ndarray):
        def _build(tape: Tape, nodes: Dict[str, Node]) -> Node:
            out = forward_graph(tape, self.frozen, x, nodes)
            if self.head is not None:
                out = tape.matmul(tape.constant(self.head), out)
            if self.loss == LOSS_CROSS_ENTROPY:
                return tape.cross_entropy(out, reference)
            return tape.mse(out, reference)
        return _build

    def evaluate(self, params: Dict[str, np.ndarray], x: np.ndarray, reference: np.ndarray) -> float:
        tape = Tape()
        nodes = {k: tape.constant(v) for k, v in params.items()}
        return float(self.build(x, reference)(tape, nodes).value)


def _check_pair(frozen: BaseModel, target: BaseModel):
    if frozen.dim != target.dim:
        raise DimensionMismatchError(f"Frozen width {frozen.dim} differs from target width {target.dim}")


def _optimize(objective: _Objective, init: Dict[str, np.ndarray], lr: float, wd: float,
              config: TrainConfig, train_x: Optional[np.ndarray],
              val_x: np.ndarray, val_ref: np.ndarray) -> Tuple[Dict[str, np.ndarray], List[float], float]:
    """One grid cell. Returns (params, per-iteration losses, validation loss); nan loss on divergence."""
    params = {k: v.copy() for k, v in init.items()}
    optimizer = config.optimizer(lr, wd)
    rng = make_rng([config.seed, STREAM_BATCHES])
    kind = objective.frozen.kind
    train_ref = objective.reference(train_x) if train_x is not None else None
    losses: List[float] = []
    for _ in range(config.iterations):
        if train_x is None:
            x = draw_inputs(objective.frozen, config.batch, rng, config.tokens)
            ref = objective.reference(x)
        else:
            n = _input_count(train_x, kind)
            idx = rng.choice(n, size=min(config.batch, n), replace=False)
            x = _take(train_x, idx, kind)
            ref = train_ref[idx] if kind == MODEL_KIND_TFN else train_ref[..., idx]
        loss, grads = grad(objective.build(x, ref), params)
        if not np.isfinite(loss):
            return params, losses, float("nan")
        losses.append(loss)
        optimizer.step(params, grads)
    return params, losses, objective.evaluate(params, val_x, val_ref)


def _grid_search(objective: _Objective, init: Dict[str, np.ndarray], config: TrainConfig,
                 train_x: Optional[np.ndarray], label: str) -> Tuple[Dict[str, np.ndarray], LossCurve, Tuple[GridCell, ...]]:
    val_x = draw_inputs(objective.frozen, config.validation_size, make_rng([config.seed, STREAM_VALIDATION]),
                        config.tokens)
    val_ref = objective.reference(val_x)
    grid = [(lr, wd) for lr in config.learning_rates for wd in config.weight_decays]
    if not init:
        # Nothing to optimize; one cell suffices
        grid = grid[:1]

    best: Optional[Tuple[Dict[str, np.ndarray], LossCurve]] = None
    cells: List[GridCell] = []
    for lr, wd in grid:
        params, losses, val_loss = _optimize(objective, init, lr, wd, config, train_x, val_x, val_ref)
        diverged = not np.isfinite(val_loss)
        cells.append(GridCell(lr, wd, val_loss, diverged))
        if diverged:
            logger.warning(f"{label}: run lr={lr} wd={wd} diverged after {len(losses)} iterations; skipped",
                           extra={"msg_type": "training", "learning_rate": lr, "weight_decay": wd,
                                  "iteration": len(losses)})
            continue
        logger.debug(f"{label}: lr={lr} wd={wd} validation loss {val_loss:.4e}",
                     extra={"msg_type": "training", "learning_rate": lr, "weight_decay": wd})
        if best is None or val_loss < best[1].validation_loss:
            best = (params, LossCurve(tuple(losses), lr, wd, val_loss))
    if best is None:
        raise TrainingDivergedError(f"{label}: every run in the {len(grid)}-cell grid diverged")
    logger.info(f"{label}: selected lr={best[1].learning_rate} wd={best[1].weight_decay} "
                f"(validation loss {best[1].validation_loss:.4e})",
                extra={"msg_type": "training", "learning_rate": best[1].learning_rate,
                       "weight_decay": best[1].weight_decay})
    return best[0], best[1], tuple(cells)


def init_lora_params(model: BaseModel, rank: int, rng: np.random.Generator) -> Dict[str, np.ndarray]:
    """A ~ N(0, 1/R) entries and B = 0 for every weight matrix, so every delta starts at zero."""
    params: Dict[str, np.ndarray] = {}
    if rank == 0:
        return params
    for name, w in model.named_weights().items():
        key_a, key_b = lora_keys(name)
        params[key_a] = rng.normal(0.0, 1.0 / np.sqrt(rank), size=(w.shape[0], rank))
        params[key_b] = np.zeros((w.shape[1], rank))
    return params


def train_lora(frozen: BaseModel,
               target: BaseModel,
               rank: int,
               config: TrainConfig,
               train_biases: bool = False,
               loss: str = LOSS_MSE,
               fixed_output_layer: Optional[np.ndarray] = None,
               finite_train_set: Optional[int] = None) -> TrainResult:
    """Fits LoRA adapters on every weight matrix of frozen toward target.

    Runs the full learning-rate x weight-decay grid and keeps the run with the
    lowest loss on an independent validation set. Raises TrainingDivergedError
    when every run diverges.
    """
    _check_pair(frozen, target)
    if not 0 <= rank <= frozen.dim:
        raise ValueError(f"Rank {rank} outside [0, {frozen.dim}]")
    head = None if fixed_output_layer is None else np.asarray(fixed_output_layer, dtype=np.float64)
    objective = _Objective(frozen, target, loss, head)

    init = init_lora_params(frozen, rank, make_rng([config.seed, STREAM_INIT]))
    if train_biases:
        init.update({name: b.copy() for name, b in frozen.named_biases().items()})
    train_x = None
    if finite_train_set is not None:
        train_x = finite_train_inputs(frozen, finite_train_set, config)

    label = f"LoRA R={rank}{' +bias' if train_biases else ''}"
    params, curve, cells = _grid_search(objective, init, config, train_x, label)
    return TrainResult(model=materialize(frozen, params), curve=curve, params=params,
                       params_tunable=int(sum(v.size for v in init.values())), grid=cells)


def train_final_layers(frozen: BaseModel,
                       target: BaseModel,
                       k_tuned_layers: int,
                       config: TrainConfig,
                       fixed_output_layer: Optional[np.ndarray] = None) -> TrainResult:
    """Retrains the full weights and biases of the last k layers; the first L - k stay frozen."""
    _check_pair(frozen, target)
    if frozen.kind not in (MODEL_KIND_LINEAR, MODEL_KIND_FNN):
        raise ValueError(f"Final-layers tuning is defined for layered models, got '{frozen.kind}'")
    if not 1 <= k_tuned_layers < frozen.depth:
        raise ValueError(f"k must satisfy 1 <= k < {frozen.depth}, got {k_tuned_layers}")
    head = None if fixed_output_layer is None else np.asarray(fixed_output_layer, dtype=np.float64)
    objective = _Objective(frozen, target, LOSS_MSE, head)

    tuned = range(frozen.depth - k_tuned_layers + 1, frozen.depth + 1)
    weights, biases = frozen.named_weights(), frozen.named_biases()
    init: Dict[str, np.ndarray] = {}
    for l in tuned:
        init[f"W_{l}"] = weights[f"W_{l}"].copy()
        if f"b_{l}" in biases:
            init[f"b_{l}"] = biases[f"b_{l}"].copy()

    params, curve, cells = _grid_search(objective, init, config, None, f"final layers k={k_tuned_layers}")
    return TrainResult(model=materialize(frozen, params), curve=curve, params=params,
                       params_tunable=int(sum(v.size for v in init.values())), grid=cells)


def model_mse(model: BaseModel, target: BaseModel, x: np.ndarray) -> float:
    """Per-coordinate mean squared output difference."""
    return float(np.mean((model.forward(x) - target.forward(x)) ** 2))


def pretrain_toward(frozen: BaseModel,
                    target: BaseModel,
                    config: TrainConfig,
                    reduction_factor: float = 1.0 / 3.0) -> PretrainResult:
    """Full-rank Adam on every frozen weight and bias until the MSE drops by reduction_factor.

    The error is measured every pretrain_check_every iterations on a fixed
    evaluation set and the best checkpoint so far is kept, so the logged ratios
    never increase. Raises PretrainingCapExceeded after pretrain_cap iterations.
    """
    _check_pair(frozen, target)
    if not 0.0 < reduction_factor < 1.0:
        raise ValueError(f"reduction_factor must lie in (0, 1), got {reduction_factor}")
    rng = make_rng([config.seed, STREAM_PRETRAIN])
    eval_x = draw_inputs(frozen, config.pretrain_eval_size, rng, config.tokens)
    initial = model_mse(frozen, target, eval_x)
    if initial <= np.finfo(np.float64).tiny:
        return PretrainResult(frozen, initial, initial, 0, ((0, 0.0),))

    goal = (1.0 - reduction_factor) * initial
    objective = _Objective(frozen, target, LOSS_MSE, None)
    params = {**{k: v.copy() for k, v in frozen.named_weights().items()},
              **{k: v.copy() for k, v in frozen.named_biases().items()}}
    optimizer = config.optimizer(config.pretrain_learning_rate, 0.0)
    best_params = {k: v.copy() for k, v in params.items()}
    best = initial
    checkpoints: List[Tuple[int, float]] = [(0, 1.0)]

    for iteration in range(1, config.pretrain_cap + 1):
        x = draw_inputs(frozen, config.batch, rng, config.tokens)
        loss, grads = grad(objective.build(x, objective.reference(x)), params)
        if not np.isfinite(loss):
            break
        optimizer.step(params, grads)
        if iteration % config.pretrain_check_every:
            continue
        current = model_mse(materialize(frozen, params), target, eval_x)
        if current < best:
            best = current
            best_params = {k: v.copy() for k, v in params.items()}
        checkpoints.append((iteration, best / initial))
        logger.debug(f"Pretraining iteration {iteration}: MSE ratio {best / initial:.4f}",
                     extra={"msg_type": "training", "iteration": iteration, "mse": best})
        if best <= goal:
            logger.info(f"Pretraining reached ratio {best / initial:.4f} after {iteration} iterations",
                        extra={"msg_type": "training", "iteration": iteration, "mse": best})
            return PretrainResult(materialize(frozen, best_params), initial, best, iteration, tuple(checkpoints))

    raise PretrainingCapExceeded(best / initial, config.pretrain_cap)
