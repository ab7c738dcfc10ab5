from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, List, Mapping, Optional, Tuple

import numpy as np

from core.exceptions import ConfigError
from core.interfaces import (EXPERIMENT_ABLATE_BIAS, EXPERIMENT_CLASSIFY, EXPERIMENT_CURVES,
                             EXPERIMENT_FINAL_LAYERS, EXPERIMENT_GENERALIZATION, EXPERIMENT_KINDS,
                             EXPERIMENT_SWEEP_FNN, EXPERIMENT_SWEEP_LINEAR, EXPERIMENT_SWEEP_TFN,
                             HEAD_TYPE_MULTI, HEAD_TYPE_SINGLE, METHODS, MODEL_KIND_FNN, MODEL_KIND_LINEAR, MODEL_KIND_TFN, MODEL_KINDS,
                             VARIANT_PRETRAINED, VARIANT_RANDOM)
from linalg.matrix_core import (SCHEME_STANDARD_GAUSSIAN, SCHEME_XAVIER_UNIFORM, make_rng,
                                random_matrix, uniform_bias)
from models.base_model import BaseModel
from models.fnn_model import FnnModel
from models.linear_chain import LinearChain
from models.tfn_model import TfnBlock, TfnModel
from synthesis.linear_synthesis import embed_wider_target
from training.trainer import TrainConfig, pretrain_toward
from utils.log_main import logger

CLASSES_MULTI = "multi"
CLASSES_BINARY = "binary"

# Random streams for model generation
STREAM_FROZEN = 11
STREAM_TARGET = 12

_DEFAULT_KIND = {
    EXPERIMENT_SWEEP_LINEAR: MODEL_KIND_LINEAR,
    EXPERIMENT_SWEEP_FNN: MODEL_KIND_FNN,
    EXPERIMENT_SWEEP_TFN: MODEL_KIND_TFN,
    EXPERIMENT_FINAL_LAYERS: MODEL_KIND_FNN,
    EXPERIMENT_ABLATE_BIAS: MODEL_KIND_FNN,
    EXPERIMENT_CLASSIFY: MODEL_KIND_FNN,
    EXPERIMENT_GENERALIZATION: MODEL_KIND_FNN,
    EXPERIMENT_CURVES: MODEL_KIND_FNN,
}


@dataclass(frozen=True)
class ExperimentConfig:
    """Fully resolved settings of one experiment run."""

    experiment: str
    model_kind: Optional[str] = None
    dim: int = 16
    depth: int = 2
    target_depth: int = 1
    heads: int = 1
    head_type: str = HEAD_TYPE_MULTI
    ranks: Tuple[int, ...] = ()
    methods: Tuple[str, ...] = ()
    seeds: int = 5
    seed_base: int = 0
    variant: str = VARIANT_RANDOM
    test_samples: int = 1024
    input_radius: Optional[float] = None
    train_samples: Optional[int] = None
    target_dim: Optional[int] = None
    final_layer_depths: Tuple[int, ...] = ()
    classes: str = CLASSES_MULTI
    jitter: Optional[float] = None
    timeout_seconds: float = 600.0
    max_workers: int = 1
    out_dir: str = "results"
    run_name: Optional[str] = None
    train: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.experiment not in EXPERIMENT_KINDS:
            raise ConfigError(f"Unknown experiment '{self.experiment}'. Expected one of {EXPERIMENT_KINDS}")
        kind = self.model_kind or _DEFAULT_KIND[self.experiment]
        object.__setattr__(self, "model_kind", kind)
        object.__setattr__(self, "ranks", tuple(int(r) for r in self.ranks))
        object.__setattr__(self, "methods", tuple(self.methods))
        object.__setattr__(self, "final_layer_depths", tuple(int(k) for k in self.final_layer_depths))
        if kind not in MODEL_KINDS:
            raise ConfigError(f"Unknown model_kind '{kind}'")
        if self.dim < 1 or self.depth < 1 or self.target_depth < 1 or self.heads < 1:
            raise ConfigError("dim, depth, target_depth and heads must be positive")
        if any(r < 0 or r > self.dim for r in self.ranks):
            raise ConfigError(f"Ranks {list(self.ranks)} must lie in [0, {self.dim}]")
        if self.seeds < 1:
            raise ConfigError(f"seeds must be at least 1, got {self.seeds}")
        unknown = [m for m in self.methods if m not in METHODS]
        if unknown:
            raise ConfigError(f"Unknown methods {unknown}. Expected a subset of {METHODS}")
        if self.variant not in (VARIANT_RANDOM, VARIANT_PRETRAINED):
            raise ConfigError(f"Unknown variant '{self.variant}'")
        if self.head_type not in (HEAD_TYPE_SINGLE, HEAD_TYPE_MULTI):
            raise ConfigError(f"Unknown head_type '{self.head_type}'")
        if kind == MODEL_KIND_TFN and self.head_type == HEAD_TYPE_SINGLE and self.heads != 1:
            raise ConfigError("Single-head transformers carry exactly one head")
        if kind in (MODEL_KIND_FNN, MODEL_KIND_TFN) and self.target_depth > self.depth:
            raise ConfigError(f"target_depth {self.target_depth} exceeds depth {self.depth}")
        if self.target_dim is not None and (kind != MODEL_KIND_LINEAR or not 1 <= self.target_dim <= self.dim):
            raise ConfigError("target_dim applies to linear models and must lie in [1, dim]")
        if any(not 0 <= k < self.depth for k in self.final_layer_depths):
            raise ConfigError(f"final_layer_depths must lie in [0, {self.depth - 1}]")
        if self.classes not in (CLASSES_MULTI, CLASSES_BINARY):
            raise ConfigError(f"Unknown classes '{self.classes}'")
        if self.classes == CLASSES_BINARY and self.dim % 2:
            raise ConfigError("The binary head needs an even width")
        if self.test_samples < 1:
            raise ConfigError("test_samples must be positive")
        try:
            self.train_config()
        except (TypeError, ValueError) as e:
            raise ConfigError(f"Invalid train settings: {e}") from e

    @property
    def effective_target_depth(self) -> int:
        # Transformer targets share the frozen depth
        return self.depth if self.model_kind == MODEL_KIND_TFN else self.target_depth

    @property
    def seed_list(self) -> List[int]:
        return [self.seed_base + s for s in range(self.seeds)]

    def train_config(self, seed: Optional[int] = None) -> TrainConfig:
        config = TrainConfig.from_dict(self.train)
        return config if seed is None else config.with_seed(seed)

    def to_dict(self) -> Dict[str, Any]:
        out = asdict(self)
        for key, value in out.items():
            if isinstance(value, tuple):
                out[key] = list(value)
        return out

    @classmethod
    def from_dict(cls, values: Mapping[str, Any]) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"Unknown configuration keys: {unknown}")
        if "experiment" not in values:
            raise ConfigError("The configuration does not name an experiment")
        return cls(**dict(values))


def binary_head(dim: int) -> np.ndarray:
    """2 x D block head: row one sums the first half of the output, row two the second."""
    head = np.zeros((2, dim))
    head[0, :dim // 2] = 1.0
    head[1, dim // 2:] = 1.0
    return head


def _random_fnn(dim: int, depth: int, rng: np.random.Generator) -> FnnModel:
    weights = tuple(random_matrix(dim, SCHEME_XAVIER_UNIFORM, rng=rng) for _ in range(depth))
    biases = tuple(uniform_bias(dim, dim, rng) for _ in range(depth))
    return FnnModel(weights, biases)


def _random_tfn(dim: int, depth: int, heads: int, head_type: str, rng: np.random.Generator) -> TfnModel:
    gaussian = lambda: random_matrix(dim, SCHEME_STANDARD_GAUSSIAN, rng=rng)
    xavier = lambda: random_matrix(dim, SCHEME_XAVIER_UNIFORM, rng=rng)
    blocks = []
    for _ in range(depth):
        blocks.append(TfnBlock(
            w_q=tuple(gaussian() for _ in range(heads)),
            w_k=tuple(gaussian() for _ in range(heads)),
            w_v=tuple(gaussian() for _ in range(heads)),
            w_o=tuple(gaussian() for _ in range(heads)) if head_type == HEAD_TYPE_MULTI else (),
            w_1=xavier(), w_2=xavier(),
            b_1=uniform_bias(dim, dim, rng), b_2=uniform_bias(dim, dim, rng)))
    return TfnModel(tuple(blocks), xavier(), head_type=head_type)


def random_model(kind: str, dim: int, depth: int, seed_stream: List[int],
                 heads: int = 1, head_type: str = HEAD_TYPE_MULTI) -> BaseModel:
    rng = make_rng(seed_stream)
    if kind == MODEL_KIND_LINEAR:
        return LinearChain(tuple(random_matrix(dim, SCHEME_XAVIER_UNIFORM, rng=rng) for _ in range(depth)))
    if kind == MODEL_KIND_FNN:
        return _random_fnn(dim, depth, rng)
    if kind == MODEL_KIND_TFN:
        return _random_tfn(dim, depth, heads, head_type, rng)
    raise ConfigError(f"Unknown model kind '{kind}'")


def generate_models(kind: str,
                    dim: int,
                    depth: int,
                    target_depth: int,
                    heads: int = 1,
                    variant: str = VARIANT_RANDOM,
                    seed: int = 0,
                    head_type: str = HEAD_TYPE_MULTI,
                    target_dim: Optional[int] = None,
                    train_config: Optional[TrainConfig] = None) -> Tuple[BaseModel, BaseModel]:
    """Seeded (frozen, target) pair.

    Linear and FNN weights are Xavier-uniform with default uniform biases;
    transformer attention matrices are standard Gaussian. The pretrained
    variant moves the random frozen model a third of the way toward the target.
    """
    if kind == MODEL_KIND_TFN:
        target_depth = depth
    frozen = random_model(kind, dim, depth, [seed, STREAM_FROZEN], heads, head_type)
    if kind == MODEL_KIND_LINEAR and target_dim is not None:
        narrow = random_model(kind, target_dim, target_depth, [seed, STREAM_TARGET])
        target = LinearChain((embed_wider_target(narrow.product(), frozen),))
    else:
        target = random_model(kind, dim, target_depth, [seed, STREAM_TARGET], heads, head_type)

    if variant == VARIANT_PRETRAINED:
        config = (train_config or TrainConfig()).with_seed(seed)
        result = pretrain_toward(frozen, target, config)
        logger.info(f"Pretrained {kind} frozen model (seed {seed}) to MSE ratio {result.ratio:.4f}",
                    extra={"msg_type": "system", "seed": seed})
        frozen = result.model
    return frozen, target
