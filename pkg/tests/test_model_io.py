import json

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from core.exceptions import ConfigError, MatrixError
from core.experiment_setup import generate_models
from utils.model_io import load_model, model_from_json, model_to_json, save_model


@pytest.mark.parametrize("kind,head_type", [("linear", "multi"), ("fnn", "multi"),
                                            ("tfn", "single"), ("tfn", "multi")])
def test_saved_model_computes_the_same_function(tmp_path, kind, head_type):
    model, _ = generate_models(kind, dim=4, depth=2, target_depth=1, heads=1, head_type=head_type, seed=0)
    path = tmp_path / "model.json"
    save_model(model, str(path))
    loaded = load_model(str(path))
    assert loaded.kind == model.kind and loaded.describe() == model.describe()
    x = np.random.default_rng(0).standard_normal((3, 4, 5) if kind == "tfn" else (4, 5))
    assert_array_equal(loaded.forward(x), model.forward(x))


def test_unknown_kind():
    with pytest.raises(ConfigError):
        model_from_json({"kind": "rnn"})


def test_missing_parameter(fnn_pair):
    frozen, _ = fnn_pair
    obj = model_to_json(frozen)
    del obj["weights"]["W_2"]
    with pytest.raises(MatrixError):
        model_from_json(obj)


def test_invalid_json(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{not json")
    with pytest.raises(ConfigError):
        load_model(str(path))


def test_file_layout(tmp_path, linear_pair):
    chain, _ = linear_pair
    path = tmp_path / "chain.json"
    save_model(chain, str(path))
    obj = json.loads(path.read_text())
    assert obj["kind"] == "linear" and obj["depth"] == 2
    assert obj["weights"]["W_1"]["rows"] == 8
    assert obj["biases"] == {}
