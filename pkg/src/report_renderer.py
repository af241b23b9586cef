#!/usr/bin/env python3
"""
Report rendering module for run artifacts.
Writes run logs, metrics, study tables and dream traces as TSV, dream images as
8-bit PNG, and formats the same tables for the terminal.
"""

import logging
from pathlib import Path
from typing import Dict, Any, List, Sequence, Union

import cv2
import numpy as np
import pandas as pd

try:
    from .metrics import MetricsReport
    from .tensor import Tensor
except ImportError:
    from metrics import MetricsReport
    from tensor import Tensor

# Configure logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

RUNLOG_FILE = 'runlog.tsv'
METRICS_FILE = 'metrics.tsv'
TRACE_FILE = 'dream_trace.tsv'
DREAM_IMAGE_FILE = 'dream.png'
CATALOG_FILE = 'catalog.tsv'
RESULTS_FILE = 'results.tsv'
METRIC_COLUMNS = ['accuracy', 'wing_loss', 'mae', 'mse', 'n_samples']


class ReportRenderer:
    """Renders run outputs into the fixed files under an output directory."""

    def __init__(self, out_dir: Union[str, Path], float_format: str = '%.6f'):
        self.out_dir = Path(out_dir)
        self.float_format = float_format

    def _path(self, name: str) -> Path:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        return self.out_dir / name

    def write_table(self, frame: pd.DataFrame, name: str) -> Path:
        """Write a frame as tab-separated text."""
        path = self._path(name)
        try:
            frame.to_csv(path, sep='\t', index=False, float_format=self.float_format)
        except OSError as e:
            logger.error(f"Error writing {path}: {e}")
            raise
        logger.info(f"Wrote {len(frame)} rows to {path}")
        return path

    def write_runlog(self, frame: pd.DataFrame) -> Path:
        return self.write_table(frame, RUNLOG_FILE)

    def write_metrics(self, reports: Dict[str, MetricsReport]) -> Path:
        """One row per labelled report (e.g. split name)."""
        return self.write_table(metrics_frame(reports), METRICS_FILE)

    def write_rows(self, rows: List[Dict[str, Any]], name: str) -> Path:
        return self.write_table(pd.DataFrame(rows), name)

    def write_trace(self, trace: Sequence[float], status: str) -> Path:
        frame = pd.DataFrame({'step': range(len(trace)), 'objective': list(trace)})
        frame['status'] = status
        return self.write_table(frame, TRACE_FILE)

    def write_image(self, image: Union[Tensor, np.ndarray], name: str = DREAM_IMAGE_FILE) -> Path:
        """H×W×3 values in [0, 1] to an 8-bit RGB PNG."""
        return write_png(image, self._path(name))


def metrics_frame(reports: Dict[str, MetricsReport]) -> pd.DataFrame:
    rows = [{'split': label, **report.to_dict()} for label, report in reports.items()]
    return pd.DataFrame(rows, columns=['split'] + METRIC_COLUMNS)


def write_png(image: Union[Tensor, np.ndarray], path: Union[str, Path]) -> Path:
    pixels = image.data if isinstance(image, Tensor) else np.asarray(image)
    pixels = np.clip(np.rint(pixels * 255.0), 0, 255).astype(np.uint8)
    if pixels.ndim == 3 and pixels.shape[2] == 3:
        pixels = cv2.cvtColor(pixels, cv2.COLOR_RGB2BGR)
    path = Path(path)
    if not cv2.imwrite(str(path), pixels, [cv2.IMWRITE_PNG_COMPRESSION, 6]):
        raise OSError(f"failed to write {path}")
    return path


def format_table(frame: pd.DataFrame, float_format: str = '{:.4f}') -> str:
    """Terminal rendering of a results table."""
    if frame.empty:
        return '(no rows)'
    return frame.to_string(index=False, float_format=float_format.format)


def format_metrics(reports: Dict[str, MetricsReport]) -> str:
    return format_table(metrics_frame(reports))
