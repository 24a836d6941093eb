"""
Adaptive task-loss weighting.

Each task keeps a sliding window of its recent losses. After warm-up, a
task's weight is inversely proportional to its relative loss deviation
r_t = avg_deviation_t / L_t, normalised by the mean over tasks and scaled by
λ · |backbone weights| / Σ|head weights|:

    β_t = (mean(r) / r_t) · λ · backbone_count / Σ head_counts

Tasks whose loss is stable relative to its level get larger weights.
"""
import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Union

import numpy as np

from .errors import DegenerateInputError, DimensionError, DivergenceError, InsufficientDataError
from .model import BACKBONE, head_component_name
from .tensor import Tensor, add_scalars, scale

log = logging.getLogger(__name__)

TINY = 1e-12
NORMALIZERS = ("window-mean", "current")


class LossWindow:
    """Ring buffer of the most recent losses of one task; oldest values are evicted first."""

    def __init__(self, task_name: str, capacity: int = 400):
        if capacity < 1:
            raise ValueError(f"window capacity must be >= 1, got {capacity}")
        self.task_name = task_name
        self.capacity = capacity
        self.buffer: deque = deque(maxlen=capacity)
        self.count = 0

    def push(self, value: float):
        self.buffer.append(float(value))
        self.count += 1

    def __len__(self):
        return len(self.buffer)

    def values(self) -> np.ndarray:
        return np.fromiter(self.buffer, dtype=np.float64, count=len(self.buffer))

    def mean(self) -> float:
        if not self.buffer:
            raise InsufficientDataError(f"window '{self.task_name}' is empty")
        return float(self.values().mean())


def avg_deviation(window: LossWindow) -> float:
    """Mean absolute deviation from the window mean."""
    if len(window) < 2:
        raise InsufficientDataError(
            f"window '{window.task_name}' holds {len(window)} value(s); at least 2 are needed"
        )
    v = window.values()
    return float(np.mean(np.abs(v - v.mean())))


@dataclass
class WeightingState:
    windows: Dict[str, LossWindow]
    weighting_lambda: float = 1.0
    warmup_epochs: int = 0
    loss_normalizer: str = "window-mean"
    betas: Dict[str, float] = field(default_factory=dict)
    # backbone weight; carried for completeness, never enters the loss
    beta_backbone: float = 1.0

    @classmethod
    def create(cls, task_names: Sequence[str], capacity: int = 400, weighting_lambda: float = 1.0,
               warmup_epochs: int = 0, loss_normalizer: str = "window-mean") -> "WeightingState":
        if loss_normalizer not in NORMALIZERS:
            raise ValueError(f"unknown loss normalizer '{loss_normalizer}'; expected one of {NORMALIZERS}")
        return cls(
            windows={t: LossWindow(t, capacity) for t in task_names},
            weighting_lambda=weighting_lambda,
            warmup_epochs=warmup_epochs,
            loss_normalizer=loss_normalizer,
            betas={t: 1.0 for t in task_names},
        )

    @property
    def task_names(self) -> List[str]:
        return list(self.windows)

    def in_warmup(self, epoch: int) -> bool:
        return epoch < self.warmup_epochs

    def beta_list(self) -> List[float]:
        return [self.betas[t] for t in self.task_names]


def push_loss(state: WeightingState, task: str, loss_value: float):
    value = float(loss_value)
    if not np.isfinite(value):
        raise DivergenceError(f"non-finite loss {value} for task '{task}'")
    if value < 0.0:
        raise DegenerateInputError(f"loss for task '{task}' must be >= 0 before windowing, got {value}")
    state.windows[task].push(value)


def parameter_ratio(param_counts: Mapping[str, int], task_names: Sequence[str]) -> float:
    heads = sum(param_counts[head_component_name(t)] for t in task_names)
    return param_counts[BACKBONE] / heads


def compute_betas(state: WeightingState, current_losses: Mapping[str, float],
                  param_counts: Mapping[str, int], epoch: Optional[int] = None) -> Dict[str, float]:
    """
    Refresh and return the per-task weights. During warm-up (when `epoch` is
    given and below `warmup_epochs`) every weight is exactly 1.
    """
    tasks = state.task_names
    if epoch is not None and state.in_warmup(epoch):
        state.betas = {t: 1.0 for t in tasks}
        return dict(state.betas)

    ratios = []
    for t in tasks:
        window = state.windows[t]
        deviation = avg_deviation(window)
        level = window.mean() if state.loss_normalizer == "window-mean" else float(current_losses[t])
        if level <= TINY:
            log.warning(f"Loss level {level:.3e} for task '{t}' clamped to {TINY}")
            level = TINY
        ratios.append(deviation / level)
    r = np.asarray(ratios)

    scale_factor = state.weighting_lambda * parameter_ratio(param_counts, tasks)
    # a constant window says nothing about stability: such a task gets the
    # weight of an average task and stays out of the mean
    varying = r > TINY
    normalized = np.ones_like(r)
    if np.any(varying):
        normalized[varying] = r[varying] / float(r[varying].mean())
        for t in (t for t, v in zip(tasks, varying) if not v):
            log.warning(f"Loss window of task '{t}' has no deviation; using the average task weight")

    state.betas = {t: float(scale_factor / n) for t, n in zip(tasks, normalized)}
    return dict(state.betas)


def weighted_total_loss(betas: Union[Sequence[float], Mapping[str, float]], losses: Sequence[Tensor]) -> Tensor:
    """Σ β_t·L_t; the weights are constants on the tape."""
    beta_values = list(betas.values()) if isinstance(betas, Mapping) else list(betas)
    if len(beta_values) != len(losses):
        raise DimensionError(f"{len(beta_values)} weights for {len(losses)} losses")
    return add_scalars([scale(loss, float(b)) for b, loss in zip(beta_values, losses)])


def weighting_rows(state: WeightingState, epoch: int, current_losses: Mapping[str, float]) -> List[Dict]:
    rows = []
    for t in state.task_names:
        window = state.windows[t]
        mad = avg_deviation(window) if len(window) >= 2 else float("nan")
        rows.append({
            "epoch": epoch,
            "task": t,
            "window_mad": mad,
            "current_loss": float(current_losses[t]),
            "beta": state.betas[t],
        })
    return rows


def state_dict(state: WeightingState):
    meta = {
        "betas": dict(state.betas),
        "counts": {t: w.count for t, w in state.windows.items()},
        "beta_backbone": state.beta_backbone,
    }
    arrays = {f"window/{t}": w.values() for t, w in state.windows.items()}
    return meta, arrays


def load_state_dict(state: WeightingState, meta, arrays):
    for t, window in state.windows.items():
        window.buffer.clear()
        window.buffer.extend(float(v) for v in arrays.get(f"window/{t}", ()))
        window.count = int(meta["counts"][t])
    state.betas = {t: float(b) for t, b in meta["betas"].items()}
    state.beta_backbone = float(meta.get("beta_backbone", 1.0))
