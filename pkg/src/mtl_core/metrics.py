"""
Relative performance against a dense baseline, sparsity reporting and
nnz-based FLOP estimates.

For a model row M, a dense baseline row DM and metrics j of one task:

    Δ_task = Σ_j (−1)^{l_j} · (M_j − DM_j) / DM_j · 100       (convention "sum")

with l_j = 1 when lower is better. Convention "mean" divides by the number
of metrics. Δ_T is the mean of the per-task values. Published comparison
tables follow the "sum" convention, so it is the default.
"""
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np
import pandas as pd

from .errors import ArtifactIOError, InsufficientDataError, MetricTableError
from .model import MultitaskModel

log = logging.getLogger(__name__)

CONVENTIONS = ("sum", "mean")
DIRECTION_ROW = "direction"
MODEL_COLUMN = "model"
FLOPS_PER_MUL_ADD = 2

# loss kind -> (eval metric, lower is better)
EVAL_METRICS = {
    "l1": ("l1", True),
    "mse": ("l1", True),
    "cross-entropy": ("accuracy", False),
    "negative-cosine": ("cosine", False),
}


@dataclass
class MetricTable:
    metrics: List[str]
    lower_is_better: Dict[str, bool]
    rows: Dict[str, Dict[str, float]]
    baseline: str

    def __post_init__(self):
        missing = [m for m in self.metrics if m not in self.lower_is_better]
        if missing:
            raise MetricTableError(f"no direction given for metrics {missing}")
        for name, values in self.rows.items():
            absent = [m for m in self.metrics if m not in values]
            if absent:
                raise MetricTableError(f"row '{name}' lacks metrics {absent}")
        if self.baseline not in self.rows:
            raise MetricTableError(f"baseline row '{self.baseline}' not in table rows {list(self.rows)}")

    @property
    def tasks(self) -> List[str]:
        out = []
        for m in self.metrics:
            task = task_of(m)
            if task not in out:
                out.append(task)
        return out

    def task_metrics(self, task: str) -> List[str]:
        return [m for m in self.metrics if task_of(m) == task]


def task_of(metric: str) -> str:
    """Metric columns are named `<task>/<metric>`; a bare name is its own task."""
    return metric.split("/", 1)[0]


def delta_task(table: MetricTable, model_row: str, task_metrics: Sequence[str], convention: str = "sum") -> float:
    if convention not in CONVENTIONS:
        raise MetricTableError(f"unknown convention '{convention}'; expected one of {CONVENTIONS}")
    if model_row not in table.rows:
        raise MetricTableError(f"row '{model_row}' not in table")
    if not task_metrics:
        raise MetricTableError("no metrics given for the task")
    base = table.rows[table.baseline]
    row = table.rows[model_row]
    total = 0.0
    for m in task_metrics:
        if m not in table.lower_is_better:
            raise MetricTableError(f"missing metric '{m}'")
        if base[m] == 0.0:
            raise MetricTableError(f"baseline value of '{m}' is zero")
        sign = -1.0 if table.lower_is_better[m] else 1.0
        total += sign * (row[m] - base[m]) / base[m] * 100.0
    return total / len(task_metrics) if convention == "mean" else total


def delta_overall(per_task_deltas: Sequence[float]) -> float:
    if len(per_task_deltas) == 0:
        raise InsufficientDataError("no per-task deltas to average")
    return float(np.mean(per_task_deltas))


def table_deltas(table: MetricTable, convention: str = "sum") -> pd.DataFrame:
    """One row per model: Δ per task followed by Δ_T."""
    records = []
    for name in table.rows:
        per_task = {t: delta_task(table, name, table.task_metrics(t), convention) for t in table.tasks}
        records.append({MODEL_COLUMN: name, **{f"delta_{t}": v for t, v in per_task.items()},
                        "delta_T": delta_overall(list(per_task.values()))})
    return pd.DataFrame.from_records(records)


def metric_table_from_frame(df: pd.DataFrame, baseline: Optional[str] = None) -> MetricTable:
    if MODEL_COLUMN not in df.columns:
        raise MetricTableError(f"metric table needs a '{MODEL_COLUMN}' column")
    df = df.astype({MODEL_COLUMN: str})
    direction_rows = df[df[MODEL_COLUMN] == DIRECTION_ROW]
    if len(direction_rows) != 1:
        raise MetricTableError(f"metric table needs exactly one '{DIRECTION_ROW}' row")
    metrics = [c for c in df.columns if c != MODEL_COLUMN]
    if not metrics:
        raise MetricTableError("metric table has no metric columns")

    directions = {}
    for m in metrics:
        d = str(direction_rows.iloc[0][m]).strip().lower()
        if d not in ("lower", "higher"):
            raise MetricTableError(f"direction of '{m}' must be 'lower' or 'higher', got '{d}'")
        directions[m] = d == "lower"

    body = df[df[MODEL_COLUMN] != DIRECTION_ROW]
    if body.empty:
        raise MetricTableError("metric table has no model rows")
    if body[MODEL_COLUMN].duplicated().any():
        raise MetricTableError(f"duplicate model rows: {body[MODEL_COLUMN][body[MODEL_COLUMN].duplicated()].tolist()}")
    try:
        values = body[metrics].apply(pd.to_numeric, errors="raise")
    except (ValueError, TypeError) as e:
        raise MetricTableError(f"non-numeric metric value: {e}") from e
    if values.isna().any().any():
        raise MetricTableError("metric table has empty cells")

    rows = {name: {m: float(v) for m, v in zip(metrics, vals)}
            for name, vals in zip(body[MODEL_COLUMN], values.to_numpy())}
    return MetricTable(metrics, directions, rows, baseline if baseline is not None else next(iter(rows)))


def read_metric_table(paths, baseline: Optional[str] = None) -> MetricTable:
    """
    Read one or more CSV tables and concatenate their model rows. The first
    file's direction row is kept; all files must share its columns.
    """
    if isinstance(paths, (str, Path)):
        paths = [paths]
    frames = []
    for p in paths:
        try:
            frames.append(pd.read_csv(p, dtype=str, skipinitialspace=True))
        except FileNotFoundError as e:
            raise ArtifactIOError(f"metric table not found: {p}") from e
        except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
            raise MetricTableError(f"malformed metric table {p}: {e}") from e
    first = frames[0]
    for p, f in zip(paths[1:], frames[1:]):
        if list(f.columns) != list(first.columns):
            raise MetricTableError(f"columns of {p} differ from {paths[0]}")
    merged = pd.concat([first] + [f[f[MODEL_COLUMN] != DIRECTION_ROW] for f in frames[1:]], ignore_index=True)
    return metric_table_from_frame(merged, baseline)


def metric_frame(rows: Mapping[str, Mapping[str, float]], lower_is_better: Mapping[str, bool]) -> pd.DataFrame:
    metrics = list(lower_is_better)
    records = [{MODEL_COLUMN: DIRECTION_ROW, **{m: "lower" if lower_is_better[m] else "higher" for m in metrics}}]
    for name, values in rows.items():
        records.append({MODEL_COLUMN: name, **{m: values[m] for m in metrics}})
    return pd.DataFrame.from_records(records, columns=[MODEL_COLUMN] + metrics)


def write_metric_table(rows: Mapping[str, Mapping[str, float]], lower_is_better: Mapping[str, bool], path):
    metric_frame(rows, lower_is_better).to_csv(path, index=False)


# ----------------------------------------------------------------------
# --- Sparsity and FLOPs ---
# ----------------------------------------------------------------------

def layer_nnz(model: MultitaskModel, pruner=None) -> Dict[str, int]:
    """Surviving weights per weight tensor: frozen mask, else the pruner's mask, else nonzeros."""
    out = {}
    for component in model.components:
        if component.mask_frozen:
            masks = component.frozen_mask
        elif pruner is not None:
            masks = pruner.component_masks(component)
        else:
            masks = {name: w.values != 0.0 for name, w in component.weights()}
        for name, m in masks.items():
            out[name] = int(np.count_nonzero(m))
    return out


def flops_estimate(model: MultitaskModel, snapshot) -> Dict[str, int]:
    """
    Per-sample FLOPs over backbone plus every head, counting
    2 FLOPs per mul-add: dense 2·in·out per layer, sparse 2·nnz.
    """
    by_component = snapshot.by_component()
    dense = sparse = 0
    for component in model.components:
        stats = by_component[component.name]
        dense += FLOPS_PER_MUL_ADD * component.weight_count()
        sparse += FLOPS_PER_MUL_ADD * stats.nnz
    return {"dense_flops": dense, "sparse_flops": sparse}


def path_mul_adds(model: MultitaskModel, nnz: Mapping[str, int], task_index: int) -> int:
    """Mul-adds of one sample through the backbone and one head."""
    return sum(nnz[layer.weight_name] for layer in model.path_layers(task_index))


# ----------------------------------------------------------------------
# --- Evaluation metrics ---
# ----------------------------------------------------------------------

def eval_metric(loss_kind: str, prediction: np.ndarray, target: np.ndarray) -> float:
    """
    Task metric of a prediction: accuracy, mean cosine, or L1 for regression.

    Regression reports the plain L1 with direction lower. Its relative change
    against a baseline equals that of the negated L1 taken relative to |baseline|;
    the negated value itself would flip the sign because the baseline is negative.
    """
    metric, _ = EVAL_METRICS[loss_kind]
    p = np.atleast_2d(prediction)
    if metric == "l1":
        return float(np.mean(np.abs(p - np.reshape(target, p.shape))))
    if metric == "accuracy":
        return float(np.mean(np.argmax(p, axis=1) == np.asarray(target).astype(np.int64)))
    y = np.reshape(target, p.shape)
    cos = np.sum(p * y, axis=1) / np.maximum(np.linalg.norm(p, axis=1) * np.linalg.norm(y, axis=1), 1e-300)
    return float(np.mean(cos))


def metric_name(task_name: str, loss_kind: str) -> str:
    return f"{task_name}/{EVAL_METRICS[loss_kind][0]}"


@dataclass
class RunReport:
    pruner_kind: str
    seed: int
    target_sparsity: float
    epochs_completed: int
    freeze_epoch: Optional[int]
    overall_sparsity: float
    sparsity: Dict[str, float]
    param_count: int
    dense_flops: int
    sparse_flops: int
    final_metrics: Dict[str, float]
    thresholds: Dict[str, float] = field(default_factory=dict)
    betas: Dict[str, float] = field(default_factory=dict)
    per_task_delta: Dict[str, float] = field(default_factory=dict)
    overall_delta: Optional[float] = None

    def attach_baseline(self, baseline_metrics: Mapping[str, float], lower_is_better: Mapping[str, bool],
                        convention: str = "sum"):
        """Score final metrics against a dense run's metrics (one task per metric column)."""
        rows = {"baseline": dict(baseline_metrics), "run": dict(self.final_metrics)}
        table = MetricTable(list(lower_is_better), dict(lower_is_better), rows, "baseline")
        self.per_task_delta = {t: delta_task(table, "run", table.task_metrics(t), convention) for t in table.tasks}
        self.overall_delta = delta_overall(list(self.per_task_delta.values()))

    def to_json(self) -> Dict:
        return asdict(self)
