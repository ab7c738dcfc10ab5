import json
from typing import Any, Dict

import numpy as np

from core.exceptions import ConfigError, MatrixError
from core.interfaces import MODEL_KIND_FNN, MODEL_KIND_LINEAR, MODEL_KIND_TFN
from linalg.matrix_core import matrix_from_json, matrix_to_json
from models.base_model import BaseModel
from models.fnn_model import FnnModel
from models.linear_chain import LinearChain
from models.tfn_model import TfnModel
from utils.log_main import logger

MODEL_CLASSES = {
    MODEL_KIND_LINEAR: LinearChain,
    MODEL_KIND_FNN: FnnModel,
    MODEL_KIND_TFN: TfnModel,
}


def model_to_json(model: BaseModel) -> Dict[str, Any]:
    return {**model.describe(),
            "weights": {name: matrix_to_json(w) for name, w in model.named_weights().items()},
            "biases": {name: np.asarray(b).tolist() for name, b in model.named_biases().items()}}


def model_from_json(obj: Dict[str, Any]) -> BaseModel:
    kind = obj.get("kind")
    if kind not in MODEL_CLASSES:
        raise ConfigError(f"Unknown model kind '{kind}'. Expected one of {sorted(MODEL_CLASSES)}")
    try:
        weights = {name: matrix_from_json(m, name) for name, m in obj.get("weights", {}).items()}
        biases = {name: np.asarray(b, dtype=np.float64) for name, b in obj.get("biases", {}).items()}
        return MODEL_CLASSES[kind].from_named(obj, weights, biases)
    except KeyError as e:
        raise MatrixError(f"Model file lacks parameter {e}") from e


def save_model(model: BaseModel, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(model_to_json(model), f)
    logger.debug(f"Saved {model.kind} model to {path}", extra={"msg_type": "system"})


def load_model(path: str) -> BaseModel:
    try:
        with open(path, "r", encoding="utf-8") as f:
            obj = json.load(f)
    except FileNotFoundError:
        logger.error(f"Model file not found at {path}", extra={"msg_type": "system"})
        raise
    except json.JSONDecodeError as e:
        logger.error(f"Error parsing model file {path}: {e}", extra={"msg_type": "system"})
        raise ConfigError(f"Model file {path} is not valid JSON: {e}") from e
    return model_from_json(obj)
