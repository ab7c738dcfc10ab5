from abc import ABC, abstractmethod
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, Optional

import numpy as np

# --- Model kinds ---
MODEL_KIND_LINEAR = "linear"
MODEL_KIND_FNN = "fnn"
MODEL_KIND_TFN = "tfn"
MODEL_KINDS = (MODEL_KIND_LINEAR, MODEL_KIND_FNN, MODEL_KIND_TFN)
# -------------------

# --- TFN head types ---
HEAD_TYPE_SINGLE = "single"
HEAD_TYPE_MULTI = "multi"
# ----------------------

# --- Adaptation methods ---
METHOD_CONSTRUCTION = "construction"
METHOD_GRADIENT = "gradient"
METHOD_GRADIENT_BIAS = "gradient-bias"
METHOD_FINAL_LAYERS = "final-layers"
METHODS = (METHOD_CONSTRUCTION, METHOD_GRADIENT, METHOD_GRADIENT_BIAS, METHOD_FINAL_LAYERS)
# --------------------------

# --- Frozen model variants ---
VARIANT_RANDOM = "random"
VARIANT_PRETRAINED = "pretrained"
# -----------------------------

# --- Experiment kinds ---
EXPERIMENT_SWEEP_LINEAR = "sweep-linear"
EXPERIMENT_SWEEP_FNN = "sweep-fnn"
EXPERIMENT_SWEEP_TFN = "sweep-tfn"
EXPERIMENT_FINAL_LAYERS = "compare-final-layers"
EXPERIMENT_ABLATE_BIAS = "ablate-bias"
EXPERIMENT_CLASSIFY = "classify"
EXPERIMENT_GENERALIZATION = "generalization"
EXPERIMENT_CURVES = "curves"
EXPERIMENT_KINDS = (EXPERIMENT_SWEEP_LINEAR, EXPERIMENT_SWEEP_FNN, EXPERIMENT_SWEEP_TFN,
                    EXPERIMENT_FINAL_LAYERS, EXPERIMENT_ABLATE_BIAS, EXPERIMENT_CLASSIFY,
                    EXPERIMENT_GENERALIZATION, EXPERIMENT_CURVES)
# ------------------------


class ModelInterface(ABC):
    """Interface shared by linear chains, ReLU FNNs and transformer networks."""

    kind: str

    @property
    @abstractmethod
    def dim(self) -> int:
        """Width D of every weight matrix."""
        pass

    @property
    @abstractmethod
    def depth(self) -> int:
        """Number of layers (FNN, linear) or transformer blocks (TFN)."""
        pass

    @abstractmethod
    def forward(self, x: np.ndarray) -> np.ndarray:
        """
        Evaluates the model.

        Args:
            x: Input of shape (D,) or (D, n) for linear/FNN models, (D, N) or
               (batch, D, N) for transformers.

        Returns:
            Output with the same leading layout as the input.
        """
        pass

    @abstractmethod
    def named_weights(self) -> Dict[str, np.ndarray]:
        """Canonical name -> weight matrix, in layer order."""
        pass

    @abstractmethod
    def named_biases(self) -> Dict[str, np.ndarray]:
        """Canonical name -> bias vector (empty for linear chains)."""
        pass

    @abstractmethod
    def describe(self) -> Dict[str, Any]:
        """Shape metadata written next to the weights in model files."""
        pass


# --- Results ---
RESULT_COLUMNS = ("experiment", "model_kind", "method", "rank", "seed", "train_mse", "test_mse",
                  "predicted_bound", "accuracy", "params_tunable", "elapsed_ms")

CELL_STATUS_OK = "ok"
CELL_STATUS_ERROR = "error"
CELL_STATUS_TIMEOUT = "timeout"
CELL_STATUS_SKIPPED = "skipped"


@dataclass(frozen=True)
class ResultRow:
    """One (method, rank, seed) cell. For final-layers rows, rank holds the number of tuned layers."""

    experiment: str
    model_kind: str
    method: str
    rank: int
    seed: int
    train_mse: Optional[float]
    test_mse: float
    predicted_bound: Optional[float]
    accuracy: Optional[float]
    params_tunable: int
    elapsed_ms: int

    @property
    def key(self) -> tuple:
        return self.experiment, self.method, self.rank, self.seed

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class RunManifest:
    config: Dict[str, Any]
    tool_version: str
    seeds: list
    started_at: str
    wall_clock_seconds: float = 0.0
    cells: Dict[str, Dict[str, Any]] = field(default_factory=dict)

    def record(self, cell_id: str, status: str, detail: Optional[str] = None):
        self.cells[cell_id] = {"status": status} if detail is None else {"status": status, "detail": detail}

    @property
    def failures(self) -> Dict[str, Dict[str, Any]]:
        return {k: v for k, v in self.cells.items() if v["status"] in (CELL_STATUS_ERROR, CELL_STATUS_TIMEOUT)}

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)
