from dataclasses import dataclass
from typing import Any, ClassVar, Dict, List, Mapping, Sequence, Tuple

import numpy as np

from core.exceptions import DimensionMismatchError
from core.interfaces import MODEL_KIND_FNN
from linalg.matrix_core import as_matrix
from models.base_model import BaseModel, as_columns, relu


@dataclass(frozen=True, eq=False)
class FnnModel(BaseModel):
    """Width-D ReLU network: z_l = ReLU(W_l z_{l-1} + b_l), output z_L."""

    weights: Tuple[np.ndarray, ...]
    biases: Tuple[np.ndarray, ...]
    kind: ClassVar[str] = MODEL_KIND_FNN

    def __post_init__(self):
        if len(self.weights) < 1 or len(self.weights) != len(self.biases):
            raise DimensionMismatchError(
                f"Expected matching non-empty weight/bias lists, got {len(self.weights)} and {len(self.biases)}")
        weights = tuple(as_matrix(w, f"W_{i}") for i, w in enumerate(self.weights, start=1))
        biases = tuple(np.asarray(b, dtype=np.float64).reshape(-1) for b in self.biases)
        d = weights[0].shape[0]
        for i, (w, b) in enumerate(zip(weights, biases), start=1):
            if w.shape != (d, d) or b.shape != (d,):
                raise DimensionMismatchError(f"Layer {i} has W {w.shape}, b {b.shape}; width is {d}")
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "biases", biases)

    @property
    def dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def depth(self) -> int:
        return len(self.weights)

    def pre_activations(self, x: np.ndarray) -> List[np.ndarray]:
        """W_l z_{l-1} + b_l for every layer, each of shape (D, n)."""
        z = as_columns(x, self.dim)
        out = []
        for w, b in zip(self.weights, self.biases):
            a = w @ z + b[:, None]
            out.append(a)
            z = relu(a)
        return out

    def forward(self, x: np.ndarray) -> np.ndarray:
        squeeze = np.ndim(x) == 1
        z = relu(self.pre_activations(x)[-1])
        return z[:, 0] if squeeze else z

    def named_weights(self) -> Dict[str, np.ndarray]:
        return {f"W_{i}": w for i, w in enumerate(self.weights, start=1)}

    def named_biases(self) -> Dict[str, np.ndarray]:
        return {f"b_{i}": b for i, b in enumerate(self.biases, start=1)}

    def describe(self) -> Dict[str, Any]:
        return {"kind": self.kind, "dim": self.dim, "depth": self.depth}

    def layers(self, indices: Sequence[int]) -> Tuple[Tuple[np.ndarray, ...], Tuple[np.ndarray, ...]]:
        """Weights and biases of the given 0-based layers."""
        return tuple(self.weights[i] for i in indices), tuple(self.biases[i] for i in indices)

    @classmethod
    def from_named(cls, meta: Mapping[str, Any], weights: Mapping[str, np.ndarray],
                   biases: Mapping[str, np.ndarray]) -> "FnnModel":
        depth = int(meta["depth"])
        return cls(tuple(weights[f"W_{i}"] for i in range(1, depth + 1)),
                   tuple(biases[f"b_{i}"] for i in range(1, depth + 1)))
