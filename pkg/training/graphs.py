"""
Records a model's forward pass on a Tape.

Each weight is resolved against the trainable parameters: a full entry
`name` replaces the weight, a pair `name.A` / `name.B` adds the LoRA update
A·Bᵀ to the frozen value, anything else enters the tape as a constant.
Biases are either a trainable entry under their own name or constants.
"""
from typing import Dict, Mapping

import numpy as np

from core.exceptions import UnsupportedPrimitiveError
from core.interfaces import MODEL_KIND_FNN, MODEL_KIND_LINEAR, MODEL_KIND_TFN
from models.base_model import BaseModel
from training.tape import Node, Tape

A_SUFFIX = ".A"
B_SUFFIX = ".B"


def lora_keys(name: str):
    return name + A_SUFFIX, name + B_SUFFIX


def weight_node(tape: Tape, name: str, frozen: np.ndarray, params: Mapping[str, Node]) -> Node:
    if name in params:
        return params[name]
    key_a, key_b = lora_keys(name)
    base = tape.constant(frozen, name=name)
    if key_a in params:
        return tape.add(base, tape.matmul(params[key_a], params[key_b], transpose_b=True))
    return base


def bias_node(tape: Tape, name: str, frozen: np.ndarray, params: Mapping[str, Node]) -> Node:
    return params[name] if name in params else tape.constant(frozen, name=name)


def _linear_graph(tape, model, z, params):
    for name, w in model.named_weights().items():
        z = tape.matmul(weight_node(tape, name, w, params), z)
    return z


def _fnn_graph(tape, model, z, params):
    biases = model.named_biases()
    for l, (name, w) in enumerate(model.named_weights().items(), start=1):
        pre = tape.add_bias(tape.matmul(weight_node(tape, name, w, params), z),
                            bias_node(tape, f"b_{l}", biases[f"b_{l}"], params))
        z = tape.relu(pre)
    return z


def _tfn_graph(tape, model, z, params):
    weights, biases = model.named_weights(), model.named_biases()
    w = lambda name: weight_node(tape, name, weights[name], params)
    for l in range(1, model.depth + 1):
        attn = None
        for h in range(1, model.heads + 1):
            kz = tape.matmul(w(f"W_K_{l}_{h}"), z)
            qz = tape.matmul(w(f"W_Q_{l}_{h}"), z)
            scores = tape.softmax_columns(tape.matmul(kz, qz, transpose_a=True))
            head = tape.matmul(tape.matmul(w(f"W_V_{l}_{h}"), z), scores)
            if f"W_O_{l}_{h}" in weights:
                head = tape.matmul(w(f"W_O_{l}_{h}"), head)
            attn = head if attn is None else tape.add(attn, head)
        hidden = tape.relu(tape.add_bias(tape.matmul(w(f"W_1_{l}"), attn),
                                         bias_node(tape, f"b_1_{l}", biases[f"b_1_{l}"], params)))
        z = tape.add_bias(tape.matmul(w(f"W_2_{l}"), hidden),
                          bias_node(tape, f"b_2_{l}", biases[f"b_2_{l}"], params))
    return tape.softmax_columns(tape.matmul(w("W_o"), z))


_GRAPHS = {
    MODEL_KIND_LINEAR: _linear_graph,
    MODEL_KIND_FNN: _fnn_graph,
    MODEL_KIND_TFN: _tfn_graph,
}


def forward_graph(tape: Tape, model: BaseModel, x: np.ndarray, params: Mapping[str, Node]) -> Node:
    """Output node of model(x) with params substituted as described above."""
    if model.kind not in _GRAPHS:
        raise UnsupportedPrimitiveError(f"No tape graph for model kind '{model.kind}'")
    return _GRAPHS[model.kind](tape, model, tape.constant(x), params)


def materialize(model: BaseModel, params: Dict[str, np.ndarray]) -> BaseModel:
    """Concrete model with the trained parameters folded into its weights and biases."""
    weights = {}
    for name, w in model.named_weights().items():
        key_a, key_b = lora_keys(name)
        if name in params:
            weights[name] = params[name].copy()
        elif key_a in params:
            weights[name] = w + params[key_a] @ params[key_b].T
        else:
            weights[name] = w
    biases = {name: params[name].copy() if name in params else b
              for name, b in model.named_biases().items()}
    return type(model).from_named(model.describe(), weights, biases)
