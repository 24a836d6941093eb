from typing import Dict

import numpy as np

from ..model import Component
from .base import BasePruner


class DensePruner(BasePruner):
    """No pruning: raw weights, all-ones masks. `freeze` still works so dense models can be exported."""

    kind = "none"

    def component_masks(self, component: Component) -> Dict[str, np.ndarray]:
        if component.mask_frozen:
            return component.frozen_mask
        return {name: np.ones(w.shape, dtype=bool) for name, w in component.weights()}

    def effective_weights(self) -> Dict[str, np.ndarray]:
        out = {}
        for component in self.model.components:
            masks = self.component_masks(component)
            for name, w in component.weights():
                self._masks[name] = masks[name]
                out[name] = w.values * masks[name] if component.mask_frozen else w.values.copy()
        return out
