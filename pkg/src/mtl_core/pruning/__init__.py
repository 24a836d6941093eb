from ..config import TrainConfig
from ..errors import ConfigError
from ..model import MultitaskModel
from ..optim import WeightOptimizer, build_optimizer
from .base import BasePruner, ComponentSparsity, SparsitySnapshot, measure_sparsity
from .dense import DensePruner
from .magnitude import MagnitudePruner
from .soft_threshold import SoftThresholdPruner

# pruner_kind -> (class, constructor kwargs)
PRUNERS = {
    "adapmtl": (SoftThresholdPruner, {"grouping": "per-component"}),
    "shared-threshold": (SoftThresholdPruner, {"grouping": "shared"}),
    "two-threshold": (SoftThresholdPruner, {"grouping": "backbone-heads"}),
    "magnitude-iterative": (MagnitudePruner, {}),
    "none": (DensePruner, {}),
}


def build_pruner(model: MultitaskModel, config: TrainConfig, optimizer: WeightOptimizer = None) -> BasePruner:
    if config.pruner_kind not in PRUNERS:
        raise ConfigError(f"unknown pruner_kind '{config.pruner_kind}'; expected one of {sorted(PRUNERS)}")
    if optimizer is None:
        optimizer = build_optimizer(config.optimizer, config.adam_beta1, config.adam_beta2, config.adam_eps)
    cls, kwargs = PRUNERS[config.pruner_kind]
    return cls(model, config, optimizer, **kwargs)
