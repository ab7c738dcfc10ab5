"""
Median-across-seeds summary of a results CSV.

Raw rows stay untouched; the summary is written next to them as summary.csv.
"""
import os
from typing import Optional

import pandas as pd

from utils.log_main import logger
from utils.utils import SUMMARY_FILE

GROUP_COLUMNS = ["experiment", "model_kind", "method", "rank"]
METRIC_COLUMNS = ["train_mse", "test_mse", "predicted_bound", "accuracy", "params_tunable", "elapsed_ms"]


def summarize_frame(frame: pd.DataFrame) -> pd.DataFrame:
    """Medians per (experiment, model_kind, method, rank), with the number of seeds aggregated."""
    if frame.empty:
        return pd.DataFrame(columns=GROUP_COLUMNS + ["seeds"] + METRIC_COLUMNS)
    grouped = frame.groupby(GROUP_COLUMNS, sort=True)
    summary = grouped[METRIC_COLUMNS].median()
    summary.insert(0, "seeds", grouped["seed"].nunique())
    return summary.reset_index()


def summarize(rows_csv: str, output_path: Optional[str] = None) -> pd.DataFrame:
    frame = pd.read_csv(rows_csv, float_precision="round_trip")
    summary = summarize_frame(frame)
    output_path = output_path or os.path.join(os.path.dirname(os.path.abspath(rows_csv)), SUMMARY_FILE)
    summary.to_csv(output_path, index=False)
    logger.info(f"Wrote median summary of {len(frame)} rows to {output_path}", extra={"msg_type": "system"})
    return summary
