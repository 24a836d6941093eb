import json
import logging
from pathlib import Path
from typing import Any, Dict

from .base import BaseReporter

log = logging.getLogger(__name__)


class JsonReportReporter(BaseReporter):
    """Writes the run summary (sparsity, FLOPs, final metrics, Δ scores) to `report.json`."""

    def __init__(self, filename: str = "report.json", include_config: bool = True):
        self.filename = filename
        self.include_config = include_config
        self.output_dir = None

    def on_start(self, context: Dict[str, Any]):
        out = context.get("output_dir")
        self.output_dir = Path(out) if out is not None else None

    def on_epoch(self, record, context: Dict[str, Any]):
        pass

    def on_finish(self, context: Dict[str, Any]):
        if self.output_dir is None:
            log.warning("JsonReportReporter: no output_dir in context, skipping report.")
            return
        run_log = context["run_log"]
        if run_log.report is None:
            log.warning("JsonReportReporter: run has no report.")
            return
        payload = run_log.report.to_json()
        payload["run_name"] = run_log.run_name
        if self.include_config:
            trainer = context["trainer"]
            payload["train"] = {
                k: getattr(trainer.config, k)
                for k in ("epochs", "batch_size", "lr", "weighting_lambda", "window_capacity", "freeze_cadence")
            }
        with open(self.output_dir / self.filename, "w") as f:
            json.dump(payload, f, indent=2, sort_keys=True)
