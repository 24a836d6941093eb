import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from ..config import TrainConfig
from ..model import Component, MultitaskModel
from ..optim import WeightOptimizer

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ComponentSparsity:
    component: str
    nnz: int
    total: int

    @property
    def sparsity(self) -> float:
        return 1.0 - self.nnz / self.total if self.total else 0.0


@dataclass(frozen=True)
class SparsitySnapshot:
    epoch: int
    components: Tuple[ComponentSparsity, ...]

    @property
    def nnz(self) -> int:
        return sum(c.nnz for c in self.components)

    @property
    def total(self) -> int:
        return sum(c.total for c in self.components)

    @property
    def overall(self) -> float:
        return 1.0 - self.nnz / self.total if self.total else 0.0

    def by_component(self) -> Dict[str, ComponentSparsity]:
        return {c.component: c for c in self.components}

    def rows(self) -> List[Dict[str, Any]]:
        return [
            {"epoch": self.epoch, "component": c.component, "nnz": c.nnz, "total": c.total, "sparsity": c.sparsity}
            for c in self.components
        ]


class BasePruner(ABC):
    """
    Owns the pruning state of one model during training.

    The trainer drives it through these hooks, in order:
    `at_train_begin` once, then per batch `effective_weights` (forward) and
    `apply` (after backward), `after_training_iteration`, and per epoch
    `at_epoch_end`.
    """

    kind: str = ""

    def __init__(self, model: MultitaskModel, config: TrainConfig, optimizer: WeightOptimizer):
        self.model = model
        self.config = config
        self.optimizer = optimizer
        self._masks: Dict[str, np.ndarray] = {}

    @property
    def frozen(self) -> bool:
        return all(c.mask_frozen for c in self.model.components)

    def at_train_begin(self, total_iterations: int, steps_per_epoch: int):
        pass

    @abstractmethod
    def component_masks(self, component: Component) -> Dict[str, np.ndarray]:
        """Current indicator masks B of the component's weights (True = survives)."""
        raise NotImplementedError

    @abstractmethod
    def effective_weights(self) -> Dict[str, np.ndarray]:
        """
        Weights the forward pass uses, keyed by weight name. Also caches the
        masks `apply` will gate the gradients with.
        """
        raise NotImplementedError

    def apply(self, grads: Dict[str, np.ndarray], lr: float, lr_theta: float):
        """Masked weight updates from gradients w.r.t. the effective weights."""
        for name, w in self._weights():
            self.optimizer.step(name, w.values, grads[name], self._masks[name], lr, self.config.weight_decay)

    def after_training_iteration(self, iteration: int):
        pass

    def at_epoch_end(self, epoch: int):
        pass

    def thresholds(self) -> Dict[str, float]:
        return {}

    def snapshot(self, epoch: int) -> SparsitySnapshot:
        return measure_sparsity(self.model, self, epoch)

    def maybe_freeze(self, snapshot: SparsitySnapshot) -> bool:
        return False

    def freeze(self):
        """Fix the current masks permanently."""
        for component in self.model.components:
            if not component.mask_frozen:
                masks = self.component_masks(component)
                self._bake(component, masks)
                component.freeze(masks)
                for name, mask in masks.items():
                    self.optimizer.prune_state(name, mask)

    def _bake(self, component: Component, masks: Dict[str, np.ndarray]):
        for name, w in component.weights():
            w.values[...] = w.values * masks[name]

    def _weights(self):
        for component in self.model.components:
            yield from component.weights()

    def state_dict(self) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
        return {"kind": self.kind}, {}

    def load_state_dict(self, meta: Dict[str, Any], arrays: Dict[str, np.ndarray]):
        pass


def measure_sparsity(model: MultitaskModel, pruner: Optional[BasePruner] = None, epoch: int = -1) -> SparsitySnapshot:
    """Exact per-component counts of pruned weights; biases are never pruned."""
    stats = []
    for component in model.components:
        if component.mask_frozen:
            masks = component.frozen_mask
        elif pruner is not None:
            masks = pruner.component_masks(component)
        else:
            masks = {name: w.values != 0.0 for name, w in component.weights()}
        nnz = int(sum(np.count_nonzero(m) for m in masks.values()))
        stats.append(ComponentSparsity(component.name, nnz, component.weight_count()))
    return SparsitySnapshot(epoch, tuple(stats))
