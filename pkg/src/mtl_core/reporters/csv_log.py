import logging
from pathlib import Path
from typing import Any, Dict, Sequence

from .base import BaseReporter

log = logging.getLogger(__name__)

# table name -> RunLog frame method
TABLES = {
    "losses": "losses_frame",
    "betas": "betas_frame",
    "sparsity": "sparsity_frame",
    "thresholds": "thresholds_frame",
    "eval": "eval_frame",
}


class CsvLogReporter(BaseReporter):
    """
    Writes the per-epoch tables of a run as CSV files, plus `metrics.csv`
    (final metrics in the metric-table format read by `adapmtl report`).
    """

    def __init__(self, tables: Sequence[str] = tuple(TABLES), write_metrics: bool = True):
        unknown = [t for t in tables if t not in TABLES]
        if unknown:
            raise ValueError(f"unknown CSV tables {unknown}; expected a subset of {list(TABLES)}")
        self.tables = list(tables)
        self.write_metrics = write_metrics
        self.output_dir = None

    def on_start(self, context: Dict[str, Any]):
        out = context.get("output_dir")
        if out is None:
            log.warning("CsvLogReporter: no output_dir in context, CSV tables will not be written.")
            return
        self.output_dir = Path(out)

    def on_epoch(self, record, context: Dict[str, Any]):
        pass

    def on_finish(self, context: Dict[str, Any]):
        if self.output_dir is None:
            return
        run_log = context["run_log"]
        for name in self.tables:
            frame = getattr(run_log, TABLES[name])()
            frame.to_csv(self.output_dir / f"{name}.csv", index=False)
        if self.write_metrics:
            context["trainer"].metrics_frame().to_csv(self.output_dir / "metrics.csv", index=False)
        log.info(f"Wrote {len(self.tables) + int(self.write_metrics)} CSV tables to {self.output_dir}")
