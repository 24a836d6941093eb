from .base import BaseReporter
from .csv_log import CsvLogReporter
from .report import JsonReportReporter

DEFAULT_REPORTERS = {
    "csv": {"_target_": "mtl_core.reporters.csv_log.CsvLogReporter"},
    "report": {"_target_": "mtl_core.reporters.report.JsonReportReporter"},
}

__all__ = ["BaseReporter", "CsvLogReporter", "JsonReportReporter", "DEFAULT_REPORTERS"]
