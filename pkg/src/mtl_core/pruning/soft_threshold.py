"""
Learnable soft-threshold pruning.

Each threshold group owns one scalar θ with α = sigmoid(θ); the effective
weight of every component in the group is S(w, α) = sign(w)·max(|w| − α, 0).
Loss gradients reach a weight only where the indicator mask B = [|w| > α]
is set, and θ follows the chain rule through α plus a sparsity drift.
Once the overall sparsity reaches the target the masks are frozen.

An explicit `theta_drift` is a constant. Otherwise the drift is calibrated
from the initial weights and re-solved after every epoch: from the uniform
logit shift that would put the current weights at the target sparsity,
spread over the iterations left until the calibration deadline (at least one
epoch), plus the mean loss-gradient pull on θ seen during the epoch.

Groupings:
    per-component   one θ for the backbone and one per head (T + 1 scalars)
    shared          a single θ for every component
    backbone-heads  one θ for the backbone, one shared by all heads
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit, logit

from ..config import TrainConfig
from ..errors import ConfigError, DimensionError, ThresholdError
from ..model import BACKBONE, Component, MultitaskModel
from ..optim import WeightOptimizer
from ..tensor import Tensor, soft_threshold, soft_threshold_values
from .base import BasePruner, SparsitySnapshot, measure_sparsity

log = logging.getLogger(__name__)

GROUPINGS = ("per-component", "shared", "backbone-heads")

__all__ = [
    "GROUPINGS",
    "PrunerState",
    "SoftThresholdPruner",
    "ThresholdGroup",
    "calibrate_drift",
    "indicator_mask",
    "maybe_freeze",
    "measure_sparsity",
    "soft_threshold",
    "sparsity_shift",
    "theta_grad_update",
    "theta_gradient",
    "theta_step",
]


def _check_alpha(alpha: float):
    if not (0.0 <= alpha < 1.0):
        raise ThresholdError(f"soft threshold alpha must lie in [0, 1), got {alpha}")


def indicator_mask(w, alpha: float) -> np.ndarray:
    """B[i] = |w[i]| > α; ties count as pruned."""
    _check_alpha(float(alpha))
    values = w.values if isinstance(w, Tensor) else np.asarray(w, dtype=np.float64)
    return np.abs(values) > alpha


def theta_gradient(theta: float, grads_wrt_s: Sequence[np.ndarray], masks: Sequence[np.ndarray],
                   weights: Sequence[np.ndarray]) -> float:
    """∂L/∂θ = −σ′(θ)·Σ sign(w)·(∂L/∂S)·B over every tensor the threshold covers."""
    if not (len(grads_wrt_s) == len(masks) == len(weights)):
        raise DimensionError("theta gradient needs one grad, mask and weight per tensor")
    total = 0.0
    for g, b, w in zip(grads_wrt_s, masks, weights):
        if not (g.shape == b.shape == w.shape):
            raise DimensionError(f"theta gradient shapes differ: grad {g.shape}, mask {b.shape}, w {w.shape}")
        total += float(np.sum(np.sign(w) * g * b))
    s = expit(theta)
    return -float(s * (1.0 - s)) * total


def theta_step(theta: float, grad: float, lr: float, weight_decay: float = 0.0, drift: float = 0.0,
               theta_max: float = np.inf) -> float:
    updated = theta - lr * grad - lr * weight_decay * theta + lr * drift
    return float(min(updated, theta_max))


def theta_grad_update(theta: float, grads_wrt_s: Sequence[np.ndarray], masks: Sequence[np.ndarray],
                      weights: Sequence[np.ndarray], lr: float, weight_decay: float = 0.0,
                      drift: float = 0.0, theta_max: float = np.inf) -> float:
    """θ − lr·∂L/∂θ − lr·wd·θ + lr·drift, clamped to θ_max."""
    grad = theta_gradient(theta, grads_wrt_s, masks, weights)
    return theta_step(theta, grad, lr, weight_decay, drift, theta_max)


def calibrate_drift(abs_weights: np.ndarray, target_sparsity: float, theta_init: float,
                    lr_theta: float, multiplier_sum: float) -> float:
    """
    Drift that carries θ from θ_init to logit(q) over the calibration window,
    q being the target-sparsity quantile of the initial |W|. `multiplier_sum`
    is the sum of the lr decay factors over the window.
    """
    if lr_theta <= 0.0 or multiplier_sum <= 0.0:
        return 0.0
    q = float(np.quantile(abs_weights, target_sparsity))
    q = float(np.clip(q, 1e-12, 1.0 - 1e-9))
    return max(0.0, (float(logit(q)) - theta_init) / (lr_theta * multiplier_sum))


def sparsity_shift(groups: Sequence[Tuple[float, Sequence[np.ndarray]]], target_sparsity: float,
                   max_shift: float = np.inf) -> float:
    """
    Smallest δ ≥ 0 such that adding δ to every group's θ prunes at least the
    target fraction of all weights. `groups` holds (θ, weight tensors) pairs.

    A weight w of a group at θ is pruned once θ + δ ≥ logit(|w|), so δ is an
    order statistic of logit(|w|) − θ over all weights.
    """
    needed = []
    for theta, tensors in groups:
        for w in tensors:
            a = np.clip(np.abs(np.asarray(w, dtype=np.float64)).ravel(), 0.0, 1.0)
            with np.errstate(divide="ignore"):
                needed.append(logit(a) - theta)
    needed = np.concatenate(needed) if needed else np.zeros(0)
    if needed.size == 0:
        return 0.0
    k = int(np.ceil(target_sparsity * needed.size)) - 1
    k = min(max(k, 0), needed.size - 1)
    shift = float(np.partition(needed, k)[k])
    return float(min(max(shift, 0.0), max_shift))


@dataclass
class ThresholdGroup:
    name: str
    components: List[str]
    theta: float

    @property
    def alpha(self) -> float:
        return float(expit(self.theta))


@dataclass
class PrunerState:
    groups: List[ThresholdGroup]
    target_sparsity: float
    theta_init: float = -20.0
    freeze_triggered: bool = False
    # None until calibrated at the start of training
    drift: Optional[float] = None
    masks: Dict[str, np.ndarray] = field(default_factory=dict)

    def group(self, name: str) -> ThresholdGroup:
        for g in self.groups:
            if g.name == name:
                return g
        raise KeyError(name)


def _build_groups(model: MultitaskModel, grouping: str, theta_init: float) -> List[ThresholdGroup]:
    names = [c.name for c in model.components]
    if grouping == "per-component":
        return [ThresholdGroup(n, [n], theta_init) for n in names]
    if grouping == "shared":
        return [ThresholdGroup("shared", names, theta_init)]
    if grouping == "backbone-heads":
        return [
            ThresholdGroup(BACKBONE, [BACKBONE], theta_init),
            ThresholdGroup("heads", [n for n in names if n != BACKBONE], theta_init),
        ]
    raise ConfigError(f"unknown threshold grouping '{grouping}'; expected one of {GROUPINGS}")


class SoftThresholdPruner(BasePruner):

    KIND_BY_GROUPING = {"per-component": "adapmtl", "shared": "shared-threshold", "backbone-heads": "two-threshold"}

    def __init__(self, model: MultitaskModel, config: TrainConfig, optimizer: WeightOptimizer,
                 grouping: str = "per-component"):
        super().__init__(model, config, optimizer)
        self.grouping = grouping
        self.kind = self.KIND_BY_GROUPING.get(grouping, grouping)
        self.state = PrunerState(
            groups=_build_groups(model, grouping, config.theta_init),
            target_sparsity=config.target_sparsity,
            theta_init=config.theta_init,
        )
        self._sync_thetas()
        self.iteration = 0
        self.steps_per_epoch = 1
        self.drift_deadline = 1
        self._group_sizes = {
            g.name: sum(model.component(cname).weight_count() for cname in g.components)
            for g in self.state.groups
        }
        self._pull_sum = 0.0
        self._pull_steps = 0

    @property
    def groups(self) -> List[ThresholdGroup]:
        return self.state.groups

    @property
    def adaptive_drift(self) -> bool:
        return self.config.theta_drift is None

    def _sync_thetas(self):
        for group in self.state.groups:
            for cname in group.components:
                self.model.component(cname).theta = group.theta

    def _multiplier_sum(self, start: int, length: int) -> float:
        cfg = self.config
        steps = np.arange(start, start + max(1, length))
        return float(np.sum(cfg.lr_decay ** (steps // cfg.lr_decay_interval)))

    def at_train_begin(self, total_iterations: int, steps_per_epoch: int):
        cfg = self.config
        self.steps_per_epoch = max(1, steps_per_epoch)
        self.drift_deadline = max(1, int(np.ceil(cfg.drift_target_fraction * total_iterations)))
        if self.state.drift is not None:
            return
        if cfg.theta_drift is not None:
            self.state.drift = float(cfg.theta_drift)
            return
        abs_weights = np.concatenate([np.abs(w.values).ravel() for _, w in self._weights()])
        self.state.drift = calibrate_drift(
            abs_weights, cfg.target_sparsity, cfg.theta_init, cfg.resolved_lr_theta(),
            self._multiplier_sum(0, self.drift_deadline),
        )
        log.info(
            f"Calibrated threshold drift {self.state.drift:.6g} over {self.drift_deadline} "
            f"of {total_iterations} iterations"
        )

    def after_training_iteration(self, iteration: int):
        self.iteration = iteration

    def at_epoch_end(self, epoch: int):
        if self.adaptive_drift and not self.state.freeze_triggered:
            self.recalibrate_drift(epoch)
        self._pull_sum = 0.0
        self._pull_steps = 0

    def recalibrate_drift(self, epoch: int = -1) -> float:
        """Re-solve the drift against the current weights and thresholds."""
        cfg = self.config
        groups = [
            (g.theta, [w.values for cname in g.components for _, w in self.model.component(cname).weights()])
            for g in self.state.groups
        ]
        max_shift = cfg.theta_max - min(g.theta for g in self.state.groups)
        shift = sparsity_shift(groups, self.state.target_sparsity, max_shift=max(max_shift, 0.0))
        window = max(self.steps_per_epoch, self.drift_deadline - self.iteration)
        pull = self._pull_sum / self._pull_steps if self._pull_steps else 0.0
        lr_theta = cfg.resolved_lr_theta()
        planned = shift / (lr_theta * self._multiplier_sum(self.iteration, window)) if lr_theta > 0.0 else 0.0
        self.state.drift = max(0.0, planned + pull)
        log.debug(
            f"Epoch {epoch}: logit shift to target {shift:.4g} over {window} iterations, "
            f"mean pull {pull:.4g}, drift {self.state.drift:.6g}"
        )
        return self.state.drift

    def component_masks(self, component: Component) -> Dict[str, np.ndarray]:
        if component.mask_frozen:
            return component.frozen_mask
        return {name: indicator_mask(w.values, component.alpha) for name, w in component.weights()}

    def effective_weights(self) -> Dict[str, np.ndarray]:
        out = {}
        for component in self.model.components:
            masks = self.component_masks(component)
            for name, w in component.weights():
                if component.mask_frozen:
                    out[name] = w.values * masks[name]
                else:
                    out[name] = soft_threshold_values(w.values, component.alpha)
                self._masks[name] = masks[name]
        self.state.masks = self._masks
        return out

    def theta_gradients(self, grads: Dict[str, np.ndarray]) -> Dict[str, float]:
        out = {}
        for group in self.state.groups:
            names, g, b, w = self._group_tensors(group, grads)
            out[group.name] = theta_gradient(group.theta, g, b, w)
        return out

    def _group_tensors(self, group: ThresholdGroup, grads: Dict[str, np.ndarray]):
        names, g, b, w = [], [], [], []
        for cname in group.components:
            for name, weight in self.model.component(cname).weights():
                names.append(name)
                g.append(grads[name])
                b.append(self._masks[name])
                w.append(weight.values)
        return names, g, b, w

    def apply(self, grads: Dict[str, np.ndarray], lr: float, lr_theta: float):
        if not self.state.freeze_triggered:
            drift = self.state.drift or 0.0
            wd = self.config.theta_weight_decay
            pull, total = 0.0, 0
            for group in self.state.groups:
                _, g, b, w = self._group_tensors(group, grads)
                grad = theta_gradient(group.theta, g, b, w)
                size = self._group_sizes[group.name]
                pull += size * (grad + wd * group.theta)
                total += size
                group.theta = theta_step(group.theta, grad, lr_theta, wd, drift, self.config.theta_max)
            self._pull_sum += pull / max(total, 1)
            self._pull_steps += 1
            self._sync_thetas()
        super().apply(grads, lr, lr_theta)

    def thresholds(self) -> Dict[str, float]:
        return {g.name: g.theta for g in self.state.groups}

    def maybe_freeze(self, snapshot: SparsitySnapshot) -> bool:
        if self.state.freeze_triggered or snapshot.overall < self.state.target_sparsity:
            return False
        self.freeze()
        log.info(
            f"Froze pruning masks at epoch {snapshot.epoch}: overall sparsity {snapshot.overall:.4f} "
            f">= target {self.state.target_sparsity}"
        )
        return True

    def freeze(self):
        super().freeze()
        self.state.freeze_triggered = True

    def _bake(self, component: Component, masks: Dict[str, np.ndarray]):
        # absorb the threshold so mask ⊙ w equals S(w, α) from here on
        for name, w in component.weights():
            w.values[...] = soft_threshold_values(w.values, component.alpha) * masks[name]

    def state_dict(self):
        meta = {
            "kind": self.kind,
            "grouping": self.grouping,
            "thetas": {g.name: g.theta for g in self.state.groups},
            "freeze_triggered": self.state.freeze_triggered,
            "drift": self.state.drift,
        }
        return meta, {}

    def load_state_dict(self, meta, arrays):
        if meta.get("grouping") != self.grouping:
            raise ConfigError(f"checkpoint grouping '{meta.get('grouping')}' does not match '{self.grouping}'")
        for name, theta in meta["thetas"].items():
            self.state.group(name).theta = float(theta)
        self.state.freeze_triggered = bool(meta["freeze_triggered"])
        self.state.drift = None if meta.get("drift") is None else float(meta["drift"])
        self._sync_thetas()


def maybe_freeze(pruner: BasePruner, snapshot: SparsitySnapshot) -> bool:
    """Freeze once the snapshot's overall sparsity reaches the target; idempotent."""
    return pruner.maybe_freeze(snapshot)
