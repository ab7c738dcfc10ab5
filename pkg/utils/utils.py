import json
import math
import os
import shutil
from datetime import datetime
from typing import Iterable, List, Optional, Sequence

import pandas as pd
from filelock import FileLock

from core.interfaces import RESULT_COLUMNS, ResultRow, RunManifest
from utils.log_main import logger

RESULTS_FILE = "results.csv"
SUMMARY_FILE = "summary.csv"
MANIFEST_FILE = "manifest.json"
CURVES_DIR = "curves"
LOCK_TIMEOUT = 30


def create_results_directory(run_name: str, results_base: str = "results") -> str:
    """
    Create a timestamped results directory.

    Args:
        run_name: Custom name for this run
        results_base: Parent directory for all runs

    Returns:
        str: Path to the created results directory
    """
    timestamp = datetime.now().strftime("%Y%m%d_%H%M%S")
    results_dir = os.path.join(results_base, f"{timestamp}_{run_name}")
    os.makedirs(results_dir, exist_ok=True)
    logger.info(f"Created results directory: {results_dir}", extra={"msg_type": "system"})
    return results_dir


def _lock(path: str) -> FileLock:
    return FileLock(path + ".lock", timeout=LOCK_TIMEOUT)


def _rows_frame(rows: Iterable[ResultRow]) -> pd.DataFrame:
    return pd.DataFrame([r.to_dict() for r in rows], columns=list(RESULT_COLUMNS))


def append_rows(rows: Sequence[ResultRow], path: str) -> None:
    """Appends rows to the results CSV, writing the header when the file is new."""
    if not rows:
        return
    with _lock(path):
        new_file = not os.path.exists(path)
        _rows_frame(rows).to_csv(path, mode="w" if new_file else "a", header=new_file, index=False)


def write_manifest(manifest: RunManifest, path: str) -> None:
    with _lock(path):
        with open(path, "w", encoding="utf-8") as f:
            json.dump(manifest.to_dict(), f, indent=2, default=str)


def load_manifest(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def emit(rows: Sequence[ResultRow], manifest: RunManifest, results_dir: str) -> str:
    """Writes rows (fresh file) and the manifest into results_dir; returns the CSV path."""
    os.makedirs(results_dir, exist_ok=True)
    path = os.path.join(results_dir, RESULTS_FILE)
    with _lock(path):
        _rows_frame(rows).to_csv(path, index=False)
    write_manifest(manifest, os.path.join(results_dir, MANIFEST_FILE))
    return path


def _optional(value) -> Optional[float]:
    return None if value is None or (isinstance(value, float) and math.isnan(value)) else float(value)


def load_rows(path: str) -> List[ResultRow]:
    """Parses a results CSV back into rows; empty optional fields become None."""
    frame = pd.read_csv(path, dtype={"experiment": str, "model_kind": str, "method": str},
                        float_precision="round_trip")
    missing = [c for c in RESULT_COLUMNS if c not in frame.columns]
    if missing:
        raise ValueError(f"{path} lacks result columns {missing}")
    rows = []
    for record in frame.to_dict(orient="records"):
        rows.append(ResultRow(experiment=record["experiment"],
                              model_kind=record["model_kind"],
                              method=record["method"],
                              rank=int(record["rank"]),
                              seed=int(record["seed"]),
                              train_mse=_optional(record["train_mse"]),
                              test_mse=float(record["test_mse"]),
                              predicted_bound=_optional(record["predicted_bound"]),
                              accuracy=_optional(record["accuracy"]),
                              params_tunable=int(record["params_tunable"]),
                              elapsed_ms=int(record["elapsed_ms"])))
    return rows


def write_curve(losses: Sequence[float], results_dir: str, cell_id: str) -> str:
    curves_dir = os.path.join(results_dir, CURVES_DIR)
    os.makedirs(curves_dir, exist_ok=True)
    path = os.path.join(curves_dir, f"{cell_id}.csv")
    pd.DataFrame({"iteration": range(1, len(losses) + 1), "loss": list(losses)}).to_csv(path, index=False)
    return path


def copy_for_reproducibility(source: str, results_dir: str, name: Optional[str] = None) -> None:
    """Copies a settings or config file into the run directory."""
    if not source or not os.path.exists(source):
        logger.warning(f"File not found, not copied: {source}", extra={"msg_type": "system"})
        return
    dest = os.path.join(results_dir, name or os.path.basename(source))
    try:
        shutil.copy2(source, dest)
        logger.debug(f"Saved copy of {source} to {dest}", extra={"msg_type": "system"})
    except OSError as e:
        logger.error(f"Failed to copy {source}: {e}", extra={"msg_type": "system"})
