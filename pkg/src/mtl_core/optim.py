"""
Learning-rate schedule and weight optimizers.

Every update receives the indicator mask B of its weight tensor; masked
positions never see a loss gradient, only weight decay.
"""
import logging
from typing import Dict, Tuple

import numpy as np

from .errors import ConfigError, DimensionError

log = logging.getLogger(__name__)

OPTIMIZERS = ("sgd", "adam")


def lr_multiplier(iteration: int, decay: float, interval: int) -> float:
    """decay^⌊n / interval⌋, the step-decay factor at iteration n."""
    return float(decay ** (iteration // interval))


def lr_at(base_lr: float, iteration: int, decay: float, interval: int) -> float:
    return base_lr * lr_multiplier(iteration, decay, interval)


def weight_grad_update(w: np.ndarray, grad_wrt_s: np.ndarray, mask: np.ndarray,
                       lr: float, weight_decay: float = 0.0) -> np.ndarray:
    """w − lr·(∂L/∂S ⊙ B) − lr·wd·w, returned as a new array."""
    if not (w.shape == grad_wrt_s.shape == mask.shape):
        raise DimensionError(
            f"weight update shapes differ: w {w.shape}, grad {grad_wrt_s.shape}, mask {mask.shape}"
        )
    return w - lr * (grad_wrt_s * mask) - lr * weight_decay * w


class WeightOptimizer:
    """Plain masked SGD; the literal per-step weight update."""

    kind = "sgd"

    def step(self, name: str, w: np.ndarray, grad: np.ndarray, mask: np.ndarray, lr: float, weight_decay: float):
        w[...] = weight_grad_update(w, grad, mask, lr, weight_decay)

    def prune_state(self, name: str, mask: np.ndarray):
        pass

    def state_dict(self) -> Tuple[Dict, Dict[str, np.ndarray]]:
        return {"kind": self.kind}, {}

    def load_state_dict(self, meta: Dict, arrays: Dict[str, np.ndarray]):
        pass


class AdamOptimizer(WeightOptimizer):
    """
    Adam on the masked gradient. The direction is re-masked so pruned
    positions move only through weight decay.
    """

    kind = "adam"

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.exp_avg: Dict[str, np.ndarray] = {}
        self.exp_avg_sq: Dict[str, np.ndarray] = {}
        self.steps: Dict[str, int] = {}

    def step(self, name, w, grad, mask, lr, weight_decay):
        if not (w.shape == grad.shape == mask.shape):
            raise DimensionError(f"adam step shapes differ for {name}")
        g = grad * mask
        m = self.exp_avg.setdefault(name, np.zeros_like(w))
        v = self.exp_avg_sq.setdefault(name, np.zeros_like(w))
        t = self.steps.get(name, 0) + 1
        self.steps[name] = t

        m *= self.beta1
        m += (1.0 - self.beta1) * g
        v *= self.beta2
        v += (1.0 - self.beta2) * g * g
        m_hat = m / (1.0 - self.beta1 ** t)
        v_hat = v / (1.0 - self.beta2 ** t)
        direction = m_hat / (np.sqrt(v_hat) + self.eps) * mask
        w[...] = w - lr * direction - lr * weight_decay * w

    def prune_state(self, name, mask):
        # moments of pruned weights must not move them later
        if name in self.exp_avg:
            self.exp_avg[name] *= mask
            self.exp_avg_sq[name] *= mask

    def state_dict(self):
        arrays = {}
        for name in self.exp_avg:
            arrays[f"exp_avg/{name}"] = self.exp_avg[name]
            arrays[f"exp_avg_sq/{name}"] = self.exp_avg_sq[name]
        return {"kind": self.kind, "steps": dict(self.steps)}, arrays

    def load_state_dict(self, meta, arrays):
        self.steps = {k: int(v) for k, v in meta.get("steps", {}).items()}
        self.exp_avg = {k[len("exp_avg/"):]: np.array(v) for k, v in arrays.items() if k.startswith("exp_avg/")}
        self.exp_avg_sq = {k[len("exp_avg_sq/"):]: np.array(v) for k, v in arrays.items() if k.startswith("exp_avg_sq/")}


def build_optimizer(kind: str, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> WeightOptimizer:
    if kind == "sgd":
        return WeightOptimizer()
    if kind == "adam":
        return AdamOptimizer(beta1, beta2, eps)
    raise ConfigError(f"unknown optimizer '{kind}'; expected one of {OPTIMIZERS}")
