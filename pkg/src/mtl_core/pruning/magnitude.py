"""
Iterative magnitude pruning baseline.

Training is split into `rounds + 1` equal segments; at the end of each of
the first `rounds` segments the smallest-magnitude surviving weights are
removed globally until the round's cumulative sparsity is reached. The last
segment fine-tunes under the final, frozen masks.
"""
import logging
from typing import Dict

import numpy as np

from ..config import TrainConfig
from ..model import Component, MultitaskModel
from ..optim import WeightOptimizer
from .base import BasePruner

log = logging.getLogger(__name__)


def round_schedule(epochs: int, rounds: int, target_sparsity: float, fraction: float = None) -> Dict[int, float]:
    """
    Map of epoch index (0-based, pruning happens after it) to the cumulative
    sparsity reached there. Each round removes `fraction` of the survivors;
    by default the fraction that lands exactly on the target after the last
    round.
    """
    p = 1.0 - (1.0 - target_sparsity) ** (1.0 / rounds) if fraction is None else fraction
    round_len = epochs // (rounds + 1)
    return {k * round_len - 1: 1.0 - (1.0 - p) ** k for k in range(1, rounds + 1)}


def global_magnitude_masks(weights: Dict[str, np.ndarray], masks: Dict[str, np.ndarray],
                           sparsity: float) -> Dict[str, np.ndarray]:
    """
    Masks pruning exactly round(sparsity × total) weights: already-pruned
    positions first, then the smallest |w| among survivors.
    """
    names = list(weights)
    scores = np.concatenate([
        np.where(masks[n], np.abs(weights[n]), -1.0).ravel() for n in names
    ])
    n_prune = int(round(sparsity * scores.size))
    keep = np.ones(scores.size, dtype=bool)
    if n_prune > 0:
        order = np.argsort(scores, kind="stable")
        keep[order[:n_prune]] = False

    out, offset = {}, 0
    for n in names:
        size = weights[n].size
        out[n] = keep[offset:offset + size].reshape(weights[n].shape)
        offset += size
    return out


class MagnitudePruner(BasePruner):
    kind = "magnitude-iterative"

    def __init__(self, model: MultitaskModel, config: TrainConfig, optimizer: WeightOptimizer):
        super().__init__(model, config, optimizer)
        self.schedule = round_schedule(
            config.epochs, config.magnitude_rounds, config.target_sparsity, config.magnitude_fraction
        )
        self.rounds_done = 0
        self.masks: Dict[str, np.ndarray] = {
            name: np.ones(w.shape, dtype=bool) for name, w in self._weights()
        }

    def component_masks(self, component: Component) -> Dict[str, np.ndarray]:
        if component.mask_frozen:
            return component.frozen_mask
        return {name: self.masks[name] for name, _ in component.weights()}

    def effective_weights(self) -> Dict[str, np.ndarray]:
        out = {}
        for name, w in self._weights():
            self._masks[name] = self.masks[name]
            out[name] = w.values * self.masks[name]
        return out

    def at_epoch_end(self, epoch: int):
        if epoch not in self.schedule or self.frozen:
            return
        sparsity = self.schedule[epoch]
        weights = {name: w.values for name, w in self._weights()}
        self.masks = global_magnitude_masks(weights, self.masks, sparsity)
        for name, w in self._weights():
            w.values[...] = w.values * self.masks[name]
            self.optimizer.prune_state(name, self.masks[name])
        self.rounds_done += 1
        log.info(f"Magnitude round {self.rounds_done}/{len(self.schedule)} after epoch {epoch}: sparsity {sparsity:.4f}")
        if self.rounds_done == len(self.schedule):
            self.freeze()

    def state_dict(self):
        meta = {"kind": self.kind, "rounds_done": self.rounds_done}
        arrays = {f"mask/{name}": m.astype(np.uint8) for name, m in self.masks.items()}
        return meta, arrays

    def load_state_dict(self, meta, arrays):
        self.rounds_done = int(meta["rounds_done"])
        for name in self.masks:
            self.masks[name] = np.asarray(arrays[f"mask/{name}"]).astype(bool)
