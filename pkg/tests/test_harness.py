import json
import os
import time

import numpy as np
import pandas as pd
import pytest
from numpy.testing import assert_allclose

from core.exceptions import CellTimeoutError, ConfigError
from core.experiment_setup import ExperimentConfig, binary_head, generate_models
from core.interfaces import CELL_STATUS_OK, CELL_STATUS_SKIPPED, RESULT_COLUMNS, ResultRow, RunManifest
from core import orchestrator as orchestrator_module
from core.orchestrator import Cell, ExperimentOrchestrator, execute_cell, held_out_inputs
from models.fnn_model import FnnModel
from training.trainer import TrainConfig, model_mse
from utils.analyze_results import summarize, summarize_frame
from utils.multiple_runs import run_cells, timed_call
from utils.utils import CURVES_DIR, MANIFEST_FILE, RESULTS_FILE, emit, load_manifest, load_rows

FAST_TRAIN = {"learning_rates": [1e-2], "weight_decays": [0.0], "iterations": 20,
              "batch": 16, "validation_size": 16, "tokens": 4}
PRETRAIN = {**FAST_TRAIN, "batch": 64, "pretrain_learning_rate": 1e-2, "pretrain_check_every": 10,
            "pretrain_cap": 5000, "pretrain_eval_size": 2048}


def make_config(**overrides):
    values = {"experiment": "sweep-linear", "dim": 8, "depth": 2, "ranks": [0, 2, 4],
              "methods": ["construction"], "seeds": 2, "test_samples": 64, "timeout_seconds": 0,
              "train": FAST_TRAIN}
    values.update(overrides)
    return ExperimentConfig.from_dict(values)


class TestExperimentConfig:
    def test_defaults(self):
        config = ExperimentConfig(experiment="sweep-fnn")
        assert config.model_kind == "fnn"
        assert config.dim == 16 and config.seeds == 5
        assert config.seed_list == [0, 1, 2, 3, 4]

    @pytest.mark.parametrize("values", [
        {"experiment": "sweep-everything"},
        {"experiment": "sweep-linear", "ranks": [17]},
        {"experiment": "sweep-linear", "methods": ["magic"]},
        {"experiment": "sweep-fnn", "depth": 1, "target_depth": 2},
        {"experiment": "sweep-tfn", "head_type": "single", "heads": 2},
        {"experiment": "classify", "classes": "binary", "dim": 5},
        {"experiment": "sweep-linear", "train": {"iterations": -1}},
        {"experiment": "sweep-linear", "colour": "blue"},
        {"dim": 4},
    ])
    def test_invalid_values(self, values):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict(values)

    def test_tfn_target_shares_depth(self):
        config = ExperimentConfig(experiment="sweep-tfn", depth=3, target_depth=1)
        assert config.effective_target_depth == 3


class TestModelGeneration:
    def test_is_deterministic_per_seed(self):
        a, _ = generate_models("fnn", dim=4, depth=2, target_depth=1, seed=5)
        b, _ = generate_models("fnn", dim=4, depth=2, target_depth=1, seed=5)
        c, _ = generate_models("fnn", dim=4, depth=2, target_depth=1, seed=6)
        assert a.max_abs_difference(b) == 0.0
        assert a.max_abs_difference(c) > 0.0

    def test_biases_are_uniform_on_fan_in(self):
        frozen, _ = generate_models("fnn", dim=16, depth=3, target_depth=1, seed=0)
        assert all(np.all(np.abs(b) <= 0.25) for b in frozen.biases)

    def test_narrow_linear_target_is_embedded(self):
        frozen, target = generate_models("linear", dim=8, depth=2, target_depth=1, seed=0, target_dim=3)
        assert target.dim == 8
        assert_allclose(target.product()[3:, :], frozen.product()[3:, :])

    def test_pretrained_variant_closes_a_third_of_the_gap(self):
        random, target = generate_models("linear", dim=4, depth=2, target_depth=1, seed=0)
        pretrained, same_target = generate_models("linear", dim=4, depth=2, target_depth=1, seed=0,
                                                  variant="pretrained", train_config=TrainConfig.from_dict(PRETRAIN))
        assert same_target.max_abs_difference(target) == 0.0
        x = np.random.default_rng(3).standard_normal((4, 4096))
        ratio = model_mse(pretrained, target, x) / model_mse(random, target, x)
        assert ratio < 0.75

    def test_binary_head(self):
        head = binary_head(4)
        assert_allclose(head @ np.arange(4.0), [1.0, 5.0])

    def test_held_out_inputs_lie_in_the_ball(self):
        config = make_config(input_radius=2.0)
        x = held_out_inputs(config, 0)
        assert x.shape == (8, 64)
        assert np.all(np.linalg.norm(x, axis=0) <= 2.0)
        tfn = make_config(experiment="sweep-tfn", dim=4, ranks=[1])
        assert held_out_inputs(tfn, 0).shape == (64, 4, 4)


class TestCells:
    def test_linear_construction_is_exact_at_full_budget(self):
        row = execute_cell((make_config(), Cell("construction", 4, 0))).row
        assert row.test_mse < 1e-12
        assert row.predicted_bound == pytest.approx(0.0, abs=1e-9)
        assert row.params_tunable == 2 * 2 * 4 * 8
        assert row.train_mse is None and row.accuracy is None

    def test_gradient_cell(self):
        outcome = execute_cell((make_config(methods=["gradient"]), Cell("gradient", 2, 0)))
        assert outcome.row.predicted_bound is None
        assert len(outcome.losses) == FAST_TRAIN["iterations"]

    def test_fnn_construction_cell(self):
        config = make_config(experiment="sweep-fnn", depth=2, target_depth=1)
        low = execute_cell((config, Cell("construction", 1, 0))).row
        full = execute_cell((config, Cell("construction", 4, 0))).row
        assert full.test_mse < 1e-12 < low.test_mse
        assert low.predicted_bound > 0.0

    def test_tfn_construction_cell(self):
        config = make_config(experiment="sweep-tfn", dim=4, ranks=[2], test_samples=16)
        row = execute_cell((config, Cell("construction", 2, 0))).row
        assert row.test_mse < 1e-10
        assert row.predicted_bound == 0.0

    def test_binary_classification_accuracy(self):
        config = make_config(experiment="classify", classes="binary", depth=2, target_depth=1)
        row = execute_cell((config, Cell("construction", 4, 0))).row
        assert row.accuracy == 1.0

    @pytest.mark.parametrize("seed", range(5))
    def test_multi_class_accuracy_at_full_budget(self, seed):
        config = make_config(experiment="classify", classes="multi", dim=16, depth=2, target_depth=1,
                             ranks=[8], test_samples=1024)
        row = execute_cell((config, Cell("construction", 8, seed))).row
        assert row.accuracy == 1.0

    def test_generalization_reports_train_mse(self):
        config = make_config(experiment="generalization", ranks=[2], train_samples=32)
        row = execute_cell((config, Cell("gradient", 2, 0))).row
        assert row.train_mse is not None

    def test_final_layers_with_no_tuned_layers(self):
        config = make_config(experiment="compare-final-layers", depth=3, final_layer_depths=[0, 1])
        row = execute_cell((config, Cell("final-layers", 0, 0))).row
        assert row.params_tunable == 0
        assert row.predicted_bound is None


class TestOrchestrator:
    def test_sweep_writes_every_row_once(self, tmp_path):
        orchestrator = ExperimentOrchestrator(make_config(), str(tmp_path), show_progress=False)
        rows, manifest = orchestrator.run()
        assert len(rows) == 6
        assert all(c["status"] == CELL_STATUS_OK for c in manifest.cells.values())
        frame = pd.read_csv(tmp_path / RESULTS_FILE)
        assert list(frame.columns) == list(RESULT_COLUMNS)
        assert len(frame) == 6
        for seed in (0, 1):
            by_rank = frame[frame.seed == seed].set_index("rank")["test_mse"]
            assert by_rank[0] > by_rank[2] > by_rank[4]
            assert by_rank[4] < 1e-12
        assert load_manifest(str(tmp_path / MANIFEST_FILE))["tool_version"] == "1.0.0"

    def test_resume_skips_finished_cells(self, tmp_path):
        ExperimentOrchestrator(make_config(), str(tmp_path), show_progress=False).run()
        rows, manifest = ExperimentOrchestrator(make_config(), str(tmp_path), show_progress=False).run()
        assert rows == []
        assert all(c["status"] == CELL_STATUS_SKIPPED for c in manifest.cells.values())
        assert len(pd.read_csv(tmp_path / RESULTS_FILE)) == 6

    def test_empty_rank_list(self, tmp_path):
        rows, manifest = ExperimentOrchestrator(make_config(ranks=[]), str(tmp_path), show_progress=False).run()
        assert rows == [] and manifest.cells == {}
        assert not os.path.exists(tmp_path / RESULTS_FILE)
        assert os.path.exists(tmp_path / MANIFEST_FILE)

    def test_plan_uses_final_layer_depths(self, tmp_path):
        config = make_config(experiment="compare-final-layers", depth=3, ranks=[1, 2],
                             final_layer_depths=[1], methods=[], seeds=1)
        cells = ExperimentOrchestrator(config, str(tmp_path), show_progress=False).plan_cells()
        assert Cell("final-layers", 1, 0) in cells
        assert Cell("gradient", 2, 0) in cells
        assert len(cells) == 3

    def test_curves_are_written(self, tmp_path):
        config = make_config(experiment="curves", ranks=[1], seeds=1, methods=[])
        ExperimentOrchestrator(config, str(tmp_path), show_progress=False).run()
        curves = os.listdir(tmp_path / CURVES_DIR)
        assert curves == ["curves-gradient-r1-s0.csv"]
        frame = pd.read_csv(tmp_path / CURVES_DIR / curves[0])
        assert list(frame.columns) == ["iteration", "loss"]
        assert len(frame) == FAST_TRAIN["iterations"]

    def test_final_layers_trail_lora_at_matched_budgets(self, tmp_path):
        config = make_config(experiment="compare-final-layers", depth=4, target_depth=1, ranks=[2],
                             final_layer_depths=[2], methods=["construction", "final-layers"], seeds=3)
        rows, _ = ExperimentOrchestrator(config, str(tmp_path), show_progress=False).run()
        frame = pd.DataFrame([r.to_dict() for r in rows])
        lora = frame[frame.method == "construction"]
        final = frame[frame.method == "final-layers"]
        assert len(lora) == len(final) == 3
        # 2 * R * D * L + D * L against k * (D * D + D)
        assert lora.params_tunable.iloc[0] == 160 and final.params_tunable.iloc[0] == 144
        assert final.test_mse.median() > lora.test_mse.median()

    def test_replay_reproduces_rows_and_manifest(self, tmp_path):
        config = make_config(methods=["construction", "gradient"], ranks=[1, 4])
        first_rows, first = ExperimentOrchestrator(config, str(tmp_path / "a"), show_progress=False).run()
        second_rows, second = ExperimentOrchestrator(config, str(tmp_path / "b"), show_progress=False).run()
        key = lambda r: r.key
        first_rows, second_rows = sorted(first_rows, key=key), sorted(second_rows, key=key)
        assert [r.key for r in first_rows] == [r.key for r in second_rows]
        assert [r.test_mse for r in first_rows] == [r.test_mse for r in second_rows]
        assert first.cells == second.cells
        assert first.config == second.config

    def test_jittered_construction_is_noted_in_the_manifest(self, tmp_path, monkeypatch):
        frozen, target = generate_models("fnn", dim=8, depth=2, target_depth=1, seed=0)
        broken = FnnModel((np.diag([1.0] * 7 + [0.0]), frozen.weights[1]), frozen.biases)
        monkeypatch.setattr(orchestrator_module, "models_for", lambda config, seed: (broken, target))
        config = make_config(experiment="sweep-fnn", depth=2, target_depth=1, ranks=[1], seeds=1, jitter=1e-3)
        rows, manifest = ExperimentOrchestrator(config, str(tmp_path), show_progress=False).run()
        assert len(rows) == 1
        assert manifest.cells["sweep-fnn-construction-r1-s0"] == {
            "status": CELL_STATUS_OK, "detail": "constructed on jittered weights"}

    def test_ablate_bias_needs_an_fnn(self, tmp_path):
        config = make_config(experiment="ablate-bias", model_kind="linear")
        with pytest.raises(ConfigError):
            ExperimentOrchestrator(config, str(tmp_path), show_progress=False).run()


def _square(x):
    if x < 0:
        raise ValueError("negative")
    return x * x


def _sleepy(x):
    time.sleep(x)
    return x


def _sleepy_with_budget(x):
    return timed_call(_sleepy, x, "slow" if x else "ok", 0.2)


class TestWorkPool:
    def test_failures_do_not_stop_the_sweep(self):
        outcomes = list(run_cells([("a", 2), ("b", -1), ("c", 3)], _square, show_progress=False))
        assert [o[0] for o in outcomes] == ["a", "b", "c"]
        assert outcomes[0][1] == 4 and outcomes[2][1] == 9
        assert isinstance(outcomes[1][2], ValueError)

    def test_process_pool(self):
        outcomes = list(run_cells([(str(i), i) for i in range(4)], _square, max_workers=2, show_progress=False))
        assert sorted(o[1] for o in outcomes) == [0, 1, 4, 9]

    def test_timeout(self):
        with pytest.raises(CellTimeoutError):
            timed_call(_sleepy, 2.0, "slow-cell", 0.2)
        assert timed_call(_sleepy, 0.0, "fast-cell", 1.0) == 0.0

    def test_worker_errors_cross_the_process_boundary(self):
        outcomes = list(run_cells([("ok", 0.0), ("slow", 2.0)], _sleepy_with_budget, max_workers=2,
                                  show_progress=False))
        errors = {cell_id: error for cell_id, _, error in outcomes}
        assert errors["ok"] is None
        assert isinstance(errors["slow"], CellTimeoutError)
        assert errors["slow"].cell_id == "slow"


def _row(seed, test_mse, accuracy=None):
    return ResultRow(experiment="classify", model_kind="fnn", method="gradient", rank=2, seed=seed,
                     train_mse=None, test_mse=test_mse, predicted_bound=None, accuracy=accuracy,
                     params_tunable=64, elapsed_ms=12)


class TestResultFiles:
    def test_emit_and_load(self, tmp_path):
        rows = [_row(0, 0.125), _row(1, 1.0 / 3.0, accuracy=0.75)]
        manifest = RunManifest(config={}, tool_version="1.0.0", seeds=[0, 1], started_at="now")
        manifest.record("classify-gradient-r2-s0", CELL_STATUS_OK)
        path = emit(rows, manifest, str(tmp_path))
        assert load_rows(path) == rows
        with open(tmp_path / MANIFEST_FILE) as f:
            assert json.load(f)["cells"]["classify-gradient-r2-s0"]["status"] == CELL_STATUS_OK

    def test_summary_takes_medians(self, tmp_path):
        rows = [_row(0, 1.0), _row(1, 2.0), _row(2, 10.0)]
        path = emit(rows, RunManifest(config={}, tool_version="1.0.0", seeds=[0, 1, 2], started_at="now"),
                    str(tmp_path))
        summary = summarize(path)
        assert len(summary) == 1
        assert summary.loc[0, "test_mse"] == 2.0
        assert summary.loc[0, "seeds"] == 3
        assert os.path.exists(tmp_path / "summary.csv")

    def test_empty_summary(self):
        frame = pd.DataFrame(columns=list(RESULT_COLUMNS))
        assert summarize_frame(frame).empty


@pytest.mark.slow
def test_pretrained_frozen_models_adapt_better():
    medians = {}
    for variant in ("random", "pretrained"):
        config = make_config(variant=variant, ranks=[1, 2, 3], seeds=3, test_samples=1024, train=PRETRAIN)
        rows = [execute_cell((config, Cell("construction", rank, seed))).row
                for rank in config.ranks for seed in config.seed_list]
        frame = pd.DataFrame([r.to_dict() for r in rows])
        medians[variant] = frame.groupby("rank").test_mse.median()
    assert (medians["pretrained"] < medians["random"]).all()
