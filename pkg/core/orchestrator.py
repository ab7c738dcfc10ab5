import os
import time
from dataclasses import dataclass
from datetime import datetime
from functools import lru_cache
from typing import List, Optional, Tuple

import numpy as np
from colorama import Fore, Style

from core.exceptions import CellTimeoutError, ConfigError
from core.experiment_setup import (CLASSES_BINARY, ExperimentConfig, binary_head,
                                   generate_models)
from core.interfaces import (CELL_STATUS_ERROR, CELL_STATUS_OK, CELL_STATUS_SKIPPED,
                             CELL_STATUS_TIMEOUT, EXPERIMENT_ABLATE_BIAS, EXPERIMENT_CLASSIFY,
                             EXPERIMENT_CURVES, EXPERIMENT_FINAL_LAYERS, EXPERIMENT_GENERALIZATION,
                             EXPERIMENT_SWEEP_FNN, EXPERIMENT_SWEEP_LINEAR, EXPERIMENT_SWEEP_TFN,
                             METHOD_CONSTRUCTION, METHOD_FINAL_LAYERS, METHOD_GRADIENT,
                             METHOD_GRADIENT_BIAS, MODEL_KIND_FNN, MODEL_KIND_LINEAR,
                             MODEL_KIND_TFN, ResultRow, RunManifest)
from linalg.matrix_core import make_rng, sample_in_ball
from models.base_model import BaseModel
from synthesis import fnn_synthesis, linear_synthesis, tfn_synthesis
from synthesis.linear_synthesis import RankBudget
from training.trainer import (LOSS_CROSS_ENTROPY, LOSS_MSE, TrainConfig, class_labels,
                              finite_train_inputs, head_output, train_final_layers, train_lora)
from utils.log_main import logger
from utils.multiple_runs import run_cells
from utils.utils import (MANIFEST_FILE, RESULTS_FILE, append_rows, load_rows, write_curve,
                         write_manifest)

TOOL_VERSION = "1.0.0"
STREAM_TEST = 21

DEFAULT_METHODS = {
    EXPERIMENT_SWEEP_LINEAR: (METHOD_CONSTRUCTION, METHOD_GRADIENT),
    EXPERIMENT_SWEEP_FNN: (METHOD_CONSTRUCTION, METHOD_GRADIENT),
    EXPERIMENT_SWEEP_TFN: (METHOD_CONSTRUCTION, METHOD_GRADIENT),
    EXPERIMENT_FINAL_LAYERS: (METHOD_GRADIENT, METHOD_FINAL_LAYERS),
    EXPERIMENT_ABLATE_BIAS: (METHOD_GRADIENT, METHOD_GRADIENT_BIAS),
    EXPERIMENT_CLASSIFY: (METHOD_CONSTRUCTION, METHOD_GRADIENT),
    EXPERIMENT_GENERALIZATION: (METHOD_GRADIENT,),
    EXPERIMENT_CURVES: (METHOD_GRADIENT,),
}


@dataclass(frozen=True)
class Cell:
    """One (method, rank, seed) unit of work. For final-layers cells, rank is the number of tuned layers."""

    method: str
    rank: int
    seed: int

    def cell_id(self, experiment: str) -> str:
        return f"{experiment}-{self.method}-r{self.rank}-s{self.seed}"


@dataclass(frozen=True)
class CellOutcome:
    row: ResultRow
    losses: Optional[Tuple[float, ...]] = None
    jittered: bool = False


# --- Per-cell evaluation (runs inside worker processes) ---

@lru_cache(maxsize=8)
def _cached_models(kind: str, dim: int, depth: int, target_depth: int, heads: int, variant: str,
                   seed: int, head_type: str, target_dim: Optional[int],
                   train_config: TrainConfig) -> Tuple[BaseModel, BaseModel]:
    return generate_models(kind, dim, depth, target_depth, heads=heads, variant=variant, seed=seed,
                           head_type=head_type, target_dim=target_dim, train_config=train_config)


def models_for(config: ExperimentConfig, seed: int) -> Tuple[BaseModel, BaseModel]:
    """Seeded model pair of a cell, reused across the cells of one worker process."""
    return _cached_models(config.model_kind, config.dim, config.depth, config.effective_target_depth,
                          config.heads, config.variant, seed, config.head_type, config.target_dim,
                          config.train_config())


def input_radius(config: ExperimentConfig) -> float:
    return config.input_radius if config.input_radius is not None \
        else fnn_synthesis.default_input_radius(config.dim)


def held_out_inputs(config: ExperimentConfig, seed: int) -> np.ndarray:
    """Held-out inputs: in-ball columns, or Gaussian token sequences for transformers."""
    rng = make_rng([seed, STREAM_TEST])
    if config.model_kind == MODEL_KIND_TFN:
        return rng.standard_normal((config.test_samples, config.dim, config.train_config().tokens))
    return sample_in_ball(config.dim, config.test_samples, input_radius(config), rng)


def output_head(config: ExperimentConfig) -> Optional[np.ndarray]:
    if config.experiment == EXPERIMENT_CLASSIFY and config.classes == CLASSES_BINARY:
        return binary_head(config.dim)
    return None


def _construct(config: ExperimentConfig, frozen: BaseModel, target: BaseModel,
               rank: int, seed: int) -> Tuple[BaseModel, Optional[float], int, bool]:
    """(adapted model, predicted bound, tunable parameters, jittered) of the closed-form adapters."""
    if config.model_kind == MODEL_KIND_LINEAR:
        plan = linear_synthesis.synthesize(frozen, target.product(), RankBudget.of(rank),
                                           jitter=config.jitter, seed=seed)
        return plan.adapted_chain(), plan.predicted_spectral_error, plan.parameter_count, plan.jittered
    if config.model_kind == MODEL_KIND_FNN:
        partition = fnn_synthesis.uniform_partition(config.depth, config.target_depth)
        budget = RankBudget.of(rank)
        plan = fnn_synthesis.synthesize(frozen, target, partition, budget, rho=input_radius(config),
                                        jitter=config.jitter, seed=seed)
        bound = fnn_synthesis.error_bound(frozen, target, partition, budget).bound
        return plan.adapted_model(), bound, plan.parameter_count, plan.jittered
    plan = tfn_synthesis.synthesize(frozen, target, rank, jitter=config.jitter, seed=seed)
    gaps = tfn_synthesis.compute_gaps(frozen, target)
    bound = 0.0 if rank >= gaps.required_rank else None
    return plan.adapted_model(), bound, plan.parameter_count, plan.jittered


def _mse(model: BaseModel, target: BaseModel, x: np.ndarray, head: Optional[np.ndarray]) -> float:
    return float(np.mean((head_output(model, x, head) - head_output(target, x, head)) ** 2))


def execute_cell(job: Tuple[ExperimentConfig, Cell]) -> CellOutcome:
    """Builds the seeded models, adapts them with the cell's method, and scores the result."""
    config, cell = job
    started = time.perf_counter()
    frozen, target = models_for(config, cell.seed)
    head = output_head(config)
    classify = config.experiment == EXPERIMENT_CLASSIFY
    train_config = config.train_config(cell.seed)
    losses = None
    train_x = None
    jittered = False

    if cell.method == METHOD_CONSTRUCTION:
        adapted, bound, params, jittered = _construct(config, frozen, target, cell.rank, cell.seed)
    elif cell.method == METHOD_FINAL_LAYERS:
        bound = None
        if cell.rank == 0:
            adapted, params = frozen, 0
        else:
            result = train_final_layers(frozen, target, cell.rank, train_config, fixed_output_layer=head)
            adapted, params, losses = result.model, result.params_tunable, result.curve.losses
    else:
        bound = None
        finite = None
        if config.experiment == EXPERIMENT_GENERALIZATION:
            finite = config.train_samples or 400 * config.target_depth
            train_x = finite_train_inputs(frozen, finite, train_config)
        result = train_lora(frozen, target, cell.rank, train_config,
                            train_biases=cell.method == METHOD_GRADIENT_BIAS,
                            loss=LOSS_CROSS_ENTROPY if classify else LOSS_MSE,
                            fixed_output_layer=head, finite_train_set=finite)
        adapted, params, losses = result.model, result.params_tunable, result.curve.losses

    x = held_out_inputs(config, cell.seed)
    accuracy = None
    if classify:
        accuracy = float(np.mean(class_labels(head_output(adapted, x, head))
                                 == class_labels(head_output(target, x, head))))
    row = ResultRow(experiment=config.experiment,
                    model_kind=config.model_kind,
                    method=cell.method,
                    rank=cell.rank,
                    seed=cell.seed,
                    train_mse=None if train_x is None else _mse(adapted, target, train_x, head),
                    test_mse=_mse(adapted, target, x, head),
                    predicted_bound=bound,
                    accuracy=accuracy,
                    params_tunable=int(params),
                    elapsed_ms=int(round((time.perf_counter() - started) * 1000)))
    return CellOutcome(row=row, losses=losses, jittered=jittered)


class ExperimentOrchestrator:
    """Plans the cells of one experiment, runs them through the work pool and writes every row once."""

    def __init__(self, config: ExperimentConfig, results_dir: str, show_progress: bool = True):
        self.config = config
        self.results_dir = results_dir
        self.show_progress = show_progress
        self.rows_path = os.path.join(results_dir, RESULTS_FILE)
        self.manifest_path = os.path.join(results_dir, MANIFEST_FILE)
        os.makedirs(results_dir, exist_ok=True)

    # --- Planning ---
    def methods(self) -> Tuple[str, ...]:
        return self.config.methods or DEFAULT_METHODS[self.config.experiment]

    def plan_cells(self) -> List[Cell]:
        cells = []
        for method in self.methods():
            levels = self.config.final_layer_depths if method == METHOD_FINAL_LAYERS else self.config.ranks
            for level in levels:
                for seed in self.config.seed_list:
                    cells.append(Cell(method, level, seed))
        return cells

    # --- Experiments ---
    def run(self) -> Tuple[List[ResultRow], RunManifest]:
        dispatch = {
            EXPERIMENT_FINAL_LAYERS: self.compare_final_layers,
            EXPERIMENT_ABLATE_BIAS: self.ablate_bias,
            EXPERIMENT_CLASSIFY: self.classify,
            EXPERIMENT_GENERALIZATION: self.generalization,
            EXPERIMENT_CURVES: self.training_curves,
        }
        return dispatch.get(self.config.experiment, self.run_sweep)()

    def compare_final_layers(self) -> Tuple[List[ResultRow], RunManifest]:
        """LoRA against last-k-layer tuning; rows carry params_tunable for alignment."""
        self._require(self.config.model_kind in (MODEL_KIND_FNN, MODEL_KIND_LINEAR),
                      "compare-final-layers needs a layered model")
        return self.run_sweep()

    def ablate_bias(self) -> Tuple[List[ResultRow], RunManifest]:
        """Paired gradient cells differing only in whether biases are trainable."""
        self._require(self.config.model_kind == MODEL_KIND_FNN, "ablate-bias needs an FNN")
        return self.run_sweep()

    def classify(self) -> Tuple[List[ResultRow], RunManifest]:
        self._require(self.config.model_kind == MODEL_KIND_FNN, "classify needs an FNN")
        return self.run_sweep()

    def generalization(self) -> Tuple[List[ResultRow], RunManifest]:
        """Gradient LoRA on a fixed training set; rows report train and test MSE."""
        return self.run_sweep()

    def training_curves(self) -> Tuple[List[ResultRow], RunManifest]:
        return self.run_sweep(write_curves=True)

    def _require(self, condition: bool, message: str):
        if not condition:
            raise ConfigError(message)

    # --- Execution ---
    def _completed_keys(self) -> set:
        if not os.path.exists(self.rows_path):
            return set()
        return {row.key for row in load_rows(self.rows_path)}

    def run_sweep(self, write_curves: bool = False) -> Tuple[List[ResultRow], RunManifest]:
        """Runs every planned cell; failed cells are recorded in the manifest and the sweep continues.

        Cells whose rows already exist in the run directory are skipped, so an
        interrupted sweep resumes where it stopped.
        """
        config = self.config
        manifest = RunManifest(config=config.to_dict(), tool_version=TOOL_VERSION,
                               seeds=config.seed_list, started_at=datetime.now().isoformat())
        done = self._completed_keys()
        jobs = []
        for cell in self.plan_cells():
            cell_id = cell.cell_id(config.experiment)
            if (config.experiment, cell.method, cell.rank, cell.seed) in done:
                manifest.record(cell_id, CELL_STATUS_SKIPPED, "row already present")
                continue
            jobs.append((cell_id, (config, cell)))
        logger.info(f"Running {len(jobs)} cells of {config.experiment} ({len(done)} already done)",
                    extra={"msg_type": "system", "experiment": config.experiment})

        started = time.perf_counter()
        rows: List[ResultRow] = []
        for cell_id, outcome, error in run_cells(jobs, execute_cell, config.max_workers,
                                                 config.timeout_seconds, self.show_progress):
            if error is not None:
                status = CELL_STATUS_TIMEOUT if isinstance(error, CellTimeoutError) else CELL_STATUS_ERROR
                manifest.record(cell_id, status, f"{type(error).__name__}: {error}")
                logger.error(f"Cell {cell_id} failed: {error}",
                             extra={"msg_type": "cell", "cell_id": cell_id, "status": status})
                continue
            row = outcome.row
            rows.append(row)
            append_rows([row], self.rows_path)
            if write_curves and outcome.losses is not None:
                write_curve(outcome.losses, self.results_dir, cell_id)
            detail = "constructed on jittered weights" if outcome.jittered else None
            manifest.record(cell_id, CELL_STATUS_OK, detail)
            logger.info(f"Cell {cell_id}: test MSE {row.test_mse:.4e}",
                        extra={"msg_type": "cell", "cell_id": cell_id, "experiment": row.experiment,
                               "method": row.method, "rank": row.rank, "seed": row.seed,
                               "status": CELL_STATUS_OK, "mse": row.test_mse})

        manifest.wall_clock_seconds = time.perf_counter() - started
        write_manifest(manifest, self.manifest_path)
        self._print_summary(rows, manifest)
        return rows, manifest

    def _print_summary(self, rows: List[ResultRow], manifest: RunManifest):
        if not self.show_progress:
            return
        failures = manifest.failures
        print(f"\n{'=' * 50}")
        print(f"{Style.BRIGHT}{self.config.experiment}{Style.RESET_ALL}: {len(rows)} rows, "
              f"{manifest.wall_clock_seconds:.1f} s")
        if failures:
            print(f"{Fore.RED}✗ {len(failures)} cells failed{Style.RESET_ALL}")
            for cell_id, info in failures.items():
                print(f"  {cell_id}: {info.get('detail', info['status'])}")
        else:
            print(f"{Fore.GREEN}✓ All cells completed{Style.RESET_ALL}")
        print(f"Results: {self.rows_path}")
