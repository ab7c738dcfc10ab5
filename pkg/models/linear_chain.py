from dataclasses import dataclass
from typing import Any, ClassVar, Dict, Mapping, Sequence, Tuple

import numpy as np

from core.exceptions import DimensionMismatchError
from core.interfaces import MODEL_KIND_LINEAR
from linalg.matrix_core import as_matrix, chain_product
from models.base_model import BaseModel, as_columns


@dataclass(frozen=True, eq=False)
class LinearChain(BaseModel):
    """f(x) = W_L ... W_1 x with square weights; weights[0] is applied first."""

    weights: Tuple[np.ndarray, ...]
    kind: ClassVar[str] = MODEL_KIND_LINEAR

    def __post_init__(self):
        if len(self.weights) < 1:
            raise DimensionMismatchError("A linear chain needs at least one layer")
        weights = tuple(as_matrix(w, f"W_{i}") for i, w in enumerate(self.weights, start=1))
        d = weights[0].shape[0]
        for i, w in enumerate(weights, start=1):
            if w.shape != (d, d):
                raise DimensionMismatchError(f"W_{i} has shape {w.shape}, expected {(d, d)}")
        object.__setattr__(self, "weights", weights)

    @property
    def dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def depth(self) -> int:
        return len(self.weights)

    def product(self) -> np.ndarray:
        return chain_product(self.weights)

    def forward(self, x: np.ndarray) -> np.ndarray:
        squeeze = np.ndim(x) == 1
        out = self.product() @ as_columns(x, self.dim)
        return out[:, 0] if squeeze else out

    def named_weights(self) -> Dict[str, np.ndarray]:
        return {f"W_{i}": w for i, w in enumerate(self.weights, start=1)}

    def named_biases(self) -> Dict[str, np.ndarray]:
        return {}

    def describe(self) -> Dict[str, Any]:
        return {"kind": self.kind, "dim": self.dim, "depth": self.depth}

    def with_deltas(self, deltas: Sequence[np.ndarray]) -> "LinearChain":
        if len(deltas) != self.depth:
            raise DimensionMismatchError(f"Expected {self.depth} deltas, got {len(deltas)}")
        return LinearChain(tuple(w + d for w, d in zip(self.weights, deltas)))

    @classmethod
    def from_named(cls, meta: Mapping[str, Any], weights: Mapping[str, np.ndarray],
                   biases: Mapping[str, np.ndarray]) -> "LinearChain":
        depth = int(meta["depth"])
        return cls(tuple(weights[f"W_{i}"] for i in range(1, depth + 1)))
