from typing import Dict

import numpy as np

from core.interfaces import ModelInterface


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def softmax_columns(x: np.ndarray) -> np.ndarray:
    """Softmax over the row axis (-2), so each column sums to one."""
    shifted = x - np.max(x, axis=-2, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-2, keepdims=True)


def as_columns(x: np.ndarray, dim: int) -> np.ndarray:
    """Promotes a length-D vector to a (D, 1) column and checks the row count."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[-2] != dim:
        raise ValueError(f"Input has {x.shape[-2]} rows, model width is {dim}")
    return x


class BaseModel(ModelInterface):
    """Helpers common to the three model families."""

    def parameter_count(self) -> int:
        weights = sum(w.size for w in self.named_weights().values())
        biases = sum(b.size for b in self.named_biases().values())
        return int(weights + biases)

    def max_abs_difference(self, other: "BaseModel") -> float:
        """Largest entrywise parameter difference against a same-shaped model."""
        mine: Dict[str, np.ndarray] = {**self.named_weights(), **self.named_biases()}
        theirs: Dict[str, np.ndarray] = {**other.named_weights(), **other.named_biases()}
        if mine.keys() != theirs.keys():
            raise ValueError("Models do not share a parameter layout")
        return max((float(np.max(np.abs(mine[k] - theirs[k]))) for k in mine), default=0.0)
