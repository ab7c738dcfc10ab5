"""
Transformer network without skip connections or layer norms.

Block l maps Z_{l-1} (D x N) to
    Attn_l = sum_h W_O^h W_V^h Z softmax((W_K^h Z)^T W_Q^h Z)
    H_l    = ReLU(W_1 Attn_l + b_1 1^T)
    Z_l    = W_2 H_l + b_2 1^T
and the network returns softmax(W_o Z_L). Softmax is taken column-wise and
the attention scores are not scaled by 1/sqrt(D). The single-head variant has
no W_O: Attn_l = W_V Z softmax(...).
"""
from dataclasses import dataclass, field
from typing import Any, ClassVar, Dict, List, Mapping, Tuple

import numpy as np

from core.exceptions import DimensionMismatchError
from core.interfaces import HEAD_TYPE_MULTI, HEAD_TYPE_SINGLE, MODEL_KIND_TFN
from linalg.matrix_core import as_matrix
from models.base_model import BaseModel, as_columns, relu, softmax_columns


@dataclass(frozen=True, eq=False)
class TfnBlock:
    w_q: Tuple[np.ndarray, ...]
    w_k: Tuple[np.ndarray, ...]
    w_v: Tuple[np.ndarray, ...]
    w_1: np.ndarray
    w_2: np.ndarray
    b_1: np.ndarray
    b_2: np.ndarray
    w_o: Tuple[np.ndarray, ...] = field(default=())

    @property
    def heads(self) -> int:
        return len(self.w_q)

    def attention(self, z: np.ndarray) -> np.ndarray:
        out = np.zeros_like(z)
        for h in range(self.heads):
            scores = np.swapaxes(self.w_k[h] @ z, -1, -2) @ (self.w_q[h] @ z)
            head = self.w_v[h] @ z @ softmax_columns(scores)
            if self.w_o:
                head = self.w_o[h] @ head
            out = out + head
        return out

    def forward(self, z: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Returns (H_l, Z_l)."""
        hidden = relu(self.w_1 @ self.attention(z) + self.b_1[:, None])
        return hidden, self.w_2 @ hidden + self.b_2[:, None]


@dataclass(frozen=True, eq=False)
class TfnModel(BaseModel):
    blocks: Tuple[TfnBlock, ...]
    w_out: np.ndarray
    head_type: str = HEAD_TYPE_MULTI
    kind: ClassVar[str] = MODEL_KIND_TFN

    def __post_init__(self):
        if not self.blocks:
            raise DimensionMismatchError("A transformer needs at least one block")
        w_out = as_matrix(self.w_out, "W_o")
        d = w_out.shape[1]
        heads = self.blocks[0].heads
        if self.head_type not in (HEAD_TYPE_SINGLE, HEAD_TYPE_MULTI):
            raise ValueError(f"Unknown head_type '{self.head_type}'")
        for l, block in enumerate(self.blocks, start=1):
            if block.heads != heads or len(block.w_k) != heads or len(block.w_v) != heads:
                raise DimensionMismatchError(f"Block {l} has inconsistent head counts")
            if self.head_type == HEAD_TYPE_SINGLE and (heads != 1 or block.w_o):
                raise DimensionMismatchError("Single-head blocks carry one head and no W_O")
            if self.head_type == HEAD_TYPE_MULTI and len(block.w_o) != heads:
                raise DimensionMismatchError(f"Block {l} needs one W_O per head")
            for name, w in _block_matrices(block, l).items():
                if np.shape(w) != (d, d):
                    raise DimensionMismatchError(f"{name} has shape {np.shape(w)}, width is {d}")
            if np.shape(block.b_1) != (d,) or np.shape(block.b_2) != (d,):
                raise DimensionMismatchError(f"Block {l} biases must have length {d}")
        object.__setattr__(self, "w_out", w_out)
        object.__setattr__(self, "blocks", tuple(self.blocks))

    @property
    def dim(self) -> int:
        return self.w_out.shape[1]

    @property
    def depth(self) -> int:
        return len(self.blocks)

    @property
    def heads(self) -> int:
        return self.blocks[0].heads

    def block_outputs(self, x: np.ndarray) -> List[Tuple[np.ndarray, np.ndarray]]:
        z = as_columns(x, self.dim)
        outputs = []
        for block in self.blocks:
            hidden, z = block.forward(z)
            outputs.append((hidden, z))
        return outputs

    def forward(self, x: np.ndarray) -> np.ndarray:
        z_last = self.block_outputs(x)[-1][1]
        return softmax_columns(self.w_out @ z_last)

    def named_weights(self) -> Dict[str, np.ndarray]:
        named: Dict[str, np.ndarray] = {}
        for l, block in enumerate(self.blocks, start=1):
            named.update(_block_matrices(block, l))
        named["W_o"] = self.w_out
        return named

    def named_biases(self) -> Dict[str, np.ndarray]:
        named: Dict[str, np.ndarray] = {}
        for l, block in enumerate(self.blocks, start=1):
            named[f"b_1_{l}"] = block.b_1
            named[f"b_2_{l}"] = block.b_2
        return named

    def describe(self) -> Dict[str, Any]:
        return {"kind": self.kind, "dim": self.dim, "depth": self.depth,
                "heads": self.heads, "head_type": self.head_type}

    @classmethod
    def from_named(cls, meta: Mapping[str, Any], weights: Mapping[str, np.ndarray],
                   biases: Mapping[str, np.ndarray]) -> "TfnModel":
        depth, heads = int(meta["depth"]), int(meta.get("heads", 1))
        head_type = meta.get("head_type", HEAD_TYPE_MULTI)
        blocks = []
        for l in range(1, depth + 1):
            per_head = lambda prefix: tuple(weights[f"{prefix}_{l}_{h}"] for h in range(1, heads + 1))
            blocks.append(TfnBlock(
                w_q=per_head("W_Q"), w_k=per_head("W_K"), w_v=per_head("W_V"),
                w_o=per_head("W_O") if head_type == HEAD_TYPE_MULTI else (),
                w_1=weights[f"W_1_{l}"], w_2=weights[f"W_2_{l}"],
                b_1=np.asarray(biases[f"b_1_{l}"], dtype=np.float64),
                b_2=np.asarray(biases[f"b_2_{l}"], dtype=np.float64)))
        return cls(blocks=tuple(blocks), w_out=weights["W_o"], head_type=head_type)


def _block_matrices(block: TfnBlock, l: int) -> Dict[str, np.ndarray]:
    named: Dict[str, np.ndarray] = {}
    for h in range(block.heads):
        named[f"W_Q_{l}_{h + 1}"] = block.w_q[h]
        named[f"W_K_{l}_{h + 1}"] = block.w_k[h]
        named[f"W_V_{l}_{h + 1}"] = block.w_v[h]
        if block.w_o:
            named[f"W_O_{l}_{h + 1}"] = block.w_o[h]
    named[f"W_1_{l}"] = block.w_1
    named[f"W_2_{l}"] = block.w_2
    return named
