import numpy as np
import pytest
from numpy.testing import assert_allclose

from core.exceptions import UnsupportedPrimitiveError
from core.experiment_setup import generate_models
from training.adam import Adam
from training.graphs import forward_graph, lora_keys, materialize
from training.tape import Tape, grad

EPS = 1e-6


def numeric_grad(build, params, name):
    """Central differences of the scalar built from params, w.r.t. params[name]."""
    out = np.zeros_like(params[name])
    for idx in np.ndindex(params[name].shape):
        values = []
        for sign in (1.0, -1.0):
            shifted = {k: v.copy() for k, v in params.items()}
            shifted[name][idx] += sign * EPS
            values.append(grad(build, shifted)[0])
        out[idx] = (values[0] - values[1]) / (2 * EPS)
    return out


def check_gradients(build, params, rtol=1e-5, atol=1e-7):
    _, grads = grad(build, params)
    for name in params:
        assert_allclose(grads[name], numeric_grad(build, params, name), rtol=rtol, atol=atol, err_msg=name)


class TestPrimitives:
    def setup_method(self):
        rng = np.random.default_rng(0)
        self.a = rng.standard_normal((3, 4))
        self.b = rng.standard_normal((4, 5))
        self.bias = rng.standard_normal(3)
        self.target = rng.standard_normal((3, 5))

    def test_matmul_bias_relu_mse(self):
        def build(tape, p):
            h = tape.relu(tape.add_bias(tape.matmul(p["a"], p["b"]), p["bias"]))
            return tape.mse(h, self.target)
        check_gradients(build, {"a": self.a, "b": self.b, "bias": self.bias})

    def test_transposed_matmul_and_softmax(self):
        def build(tape, p):
            scores = tape.softmax_columns(tape.matmul(p["a"], p["a"], transpose_a=True))
            return tape.mse(tape.matmul(p["a"], scores), np.zeros((3, 4)))
        check_gradients(build, {"a": self.a})

    def test_cross_entropy(self):
        labels = np.array([0, 2, 1, 1, 0])

        def build(tape, p):
            return tape.cross_entropy(tape.matmul(p["a"], p["b"]), labels)
        check_gradients(build, {"a": self.a, "b": self.b})

    def test_batched_matmul_unbroadcasts(self):
        z = np.random.default_rng(1).standard_normal((2, 4, 5))

        def build(tape, p):
            out = tape.matmul(p["a"], tape.constant(z))
            return tape.mse(out, np.zeros((2, 3, 5)))
        _, grads = grad(build, {"a": self.a})
        assert grads["a"].shape == self.a.shape
        check_gradients(build, {"a": self.a})

    def test_shared_parameter_accumulates(self):
        def build(tape, p):
            return tape.mse(tape.add(p["a"], p["a"]), np.zeros((3, 4)))
        _, grads = grad(build, {"a": self.a})
        assert_allclose(grads["a"], 8.0 * self.a / self.a.size)

    def test_unknown_primitive(self):
        tape = Tape()
        x = tape.variable(np.ones(2))
        with pytest.raises(UnsupportedPrimitiveError):
            tape.apply("tanh", x)

    def test_unused_parameter_gets_zero_gradient(self):
        def build(tape, p):
            return tape.mse(p["a"], np.zeros((3, 4)))
        _, grads = grad(build, {"a": self.a, "unused": self.b})
        assert np.all(grads["unused"] == 0)


class TestModelGraphs:
    def _lora_params(self, model, rank, seed):
        rng = np.random.default_rng(seed)
        params = {}
        for name, w in model.named_weights().items():
            key_a, key_b = lora_keys(name)
            params[key_a] = 0.1 * rng.standard_normal((w.shape[0], rank))
            params[key_b] = 0.1 * rng.standard_normal((w.shape[1], rank))
        return params

    @pytest.mark.parametrize("kind", ["linear", "fnn", "tfn"])
    def test_graph_matches_materialized_forward(self, kind):
        frozen, _ = generate_models(kind, dim=3, depth=2, target_depth=1, seed=0)
        params = self._lora_params(frozen, 2, 1)
        x = np.random.default_rng(2).standard_normal((4, 3, 3) if kind == "tfn" else (3, 6))
        tape = Tape()
        nodes = {k: tape.constant(v) for k, v in params.items()}
        out = forward_graph(tape, frozen, x, nodes)
        assert_allclose(out.value, materialize(frozen, params).forward(x), atol=1e-12)

    @pytest.mark.parametrize("kind", ["fnn", "tfn"])
    def test_lora_gradients(self, kind):
        frozen, target = generate_models(kind, dim=3, depth=2, target_depth=2 if kind == "tfn" else 1, seed=0)
        params = self._lora_params(frozen, 1, 3)
        x = np.random.default_rng(4).standard_normal((2, 3, 3) if kind == "tfn" else (3, 5))
        reference = target.forward(x)

        def build(tape, nodes):
            return tape.mse(forward_graph(tape, frozen, x, nodes), reference)
        check_gradients(build, params, rtol=1e-4, atol=1e-7)

    @pytest.mark.parametrize("kind", ["fnn", "tfn"])
    def test_sampled_coordinates_match_central_differences(self, kind):
        frozen, target = generate_models(kind, dim=4, depth=2, target_depth=2 if kind == "tfn" else 1,
                                         heads=2 if kind == "tfn" else 1, seed=7)
        params = self._lora_params(frozen, 2, 8)
        x = np.random.default_rng(9).standard_normal((3, 4, 4) if kind == "tfn" else (4, 8))
        reference = target.forward(x)

        def build(tape, nodes):
            return tape.mse(forward_graph(tape, frozen, x, nodes), reference)
        _, grads = grad(build, params)

        rng = np.random.default_rng(10)
        names = sorted(params)
        for _ in range(100):
            name = names[rng.integers(len(names))]
            idx = tuple(int(rng.integers(n)) for n in params[name].shape)
            values = []
            for sign in (1.0, -1.0):
                shifted = {k: v.copy() for k, v in params.items()}
                shifted[name][idx] += sign * EPS
                values.append(grad(build, shifted)[0])
            numeric = (values[0] - values[1]) / (2 * EPS)
            assert abs(grads[name][idx] - numeric) <= 1e-5 * abs(numeric) + 1e-8, (name, idx)

    def test_bias_parameters(self):
        frozen, target = generate_models("fnn", dim=3, depth=2, target_depth=1, seed=0)
        params = {"b_1": frozen.biases[0].copy(), "b_2": frozen.biases[1].copy()}
        x = np.random.default_rng(5).standard_normal((3, 5))
        reference = target.forward(x)

        def build(tape, nodes):
            return tape.mse(forward_graph(tape, frozen, x, nodes), reference)
        check_gradients(build, params)


class TestAdam:
    def test_first_step_moves_by_learning_rate(self):
        params = {"w": np.array([1.0, -2.0])}
        Adam(lr=0.1).step(params, {"w": np.array([3.0, -0.5])})
        assert_allclose(params["w"], [0.9, -1.9], rtol=1e-6)

    def test_weight_decay_pulls_toward_zero(self):
        params = {"w": np.array([5.0])}
        opt = Adam(lr=0.1, weight_decay=1.0)
        for _ in range(10):
            opt.step(params, {"w": np.zeros(1)})
        assert params["w"][0] < 5.0

    def test_minimizes_a_quadratic(self):
        params = {"w": np.array([3.0, -4.0])}
        opt = Adam(lr=0.05)
        for _ in range(2000):
            opt.step(params, {"w": 2.0 * params["w"]})
        assert_allclose(params["w"], 0.0, atol=1e-2)
