"""
Training checkpoints as safetensors files.

Arrays (parameters, frozen masks, loss windows, optimizer moments, pruner
masks) are tensors; scalars and structured state (thresholds, RNG state,
task weights, run log, the run config) are JSON strings in the metadata.
"""
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np
import safetensors.numpy
from safetensors import safe_open

from . import weighting
from .config import RunConfig, config_hash, dump_run_config, parse_run_config
from .errors import ArtifactIOError, ConfigError
from .model import MultitaskModel, build_model
from .pruning import BasePruner, build_pruner
from .trainer import RunLog, Trainer

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    path: Path
    tensors: Dict[str, np.ndarray]
    meta: Dict[str, Any]
    run_config: RunConfig

    @property
    def epoch(self) -> int:
        return int(self.meta["epoch"])

    @property
    def frozen(self) -> bool:
        return bool(self.meta["frozen"])


def _section(tensors: Dict[str, np.ndarray], prefix: str) -> Dict[str, np.ndarray]:
    return {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}


def save_checkpoint(path, trainer: Trainer, run_config: RunConfig):
    """Snapshot everything the trainer needs to continue bit-identically."""
    model = trainer.model
    tensors: Dict[str, np.ndarray] = {}
    for name, p in model.parameters().items():
        tensors[f"param/{name}"] = p.values
    for component in model.components:
        if component.mask_frozen:
            for name, m in component.frozen_mask.items():
                tensors[f"frozen_mask/{name}"] = m.astype(np.uint8)

    pruner_meta, pruner_arrays = trainer.pruner.state_dict()
    optim_meta, optim_arrays = trainer.pruner.optimizer.state_dict()
    weighting_meta, window_arrays = weighting.state_dict(trainer.weighting)
    for prefix, arrays in (("pruner/", pruner_arrays), ("optim/", optim_arrays), ("weighting/", window_arrays)):
        for k, v in arrays.items():
            if v.size:
                tensors[prefix + k] = v

    meta = {
        "format_version": FORMAT_VERSION,
        "epoch": trainer.epoch,
        "iteration": trainer.iteration,
        "frozen": trainer.pruner.frozen,
        "config_hash": config_hash(run_config),
        "rng_state": trainer.rng.bit_generator.state,
        "pruner": pruner_meta,
        "optimizer": optim_meta,
        "weighting": weighting_meta,
        "run_log": trainer.log.to_json(),
        "raw_weight_forwards": model.raw_weight_forwards,
    }
    metadata = {k: json.dumps(v) for k, v in meta.items()}
    metadata["config_yaml"] = dump_run_config(run_config)

    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        safetensors.numpy.save_file(
            {k: np.ascontiguousarray(v) for k, v in tensors.items()}, str(path), metadata=metadata
        )
    except OSError as e:
        raise ArtifactIOError(f"could not write checkpoint {path}: {e}") from e
    log.info(f"Saved checkpoint at epoch {trainer.epoch} to {path}")


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise ArtifactIOError(f"checkpoint not found: {path}")
    try:
        with safe_open(str(path), framework="np") as f:
            raw_meta = f.metadata() or {}
            tensors = {k: f.get_tensor(k) for k in f.keys()}
    except Exception as e:
        raise ArtifactIOError(f"could not read checkpoint {path}: {e}") from e

    if "config_yaml" not in raw_meta:
        raise ArtifactIOError(f"{path} is not a training checkpoint")
    meta = {k: json.loads(v) for k, v in raw_meta.items() if k != "config_yaml"}
    if meta.get("format_version") != FORMAT_VERSION:
        raise ArtifactIOError(f"{path} has checkpoint format {meta.get('format_version')}, expected {FORMAT_VERSION}")
    run_config = parse_run_config(raw_meta["config_yaml"], validate=False)
    return Checkpoint(path, tensors, meta, run_config)


def restore_model(ckpt: Checkpoint) -> MultitaskModel:
    """Model with the checkpoint's parameters, thresholds and frozen masks."""
    run = ckpt.run_config
    model = build_model(run.model.to_spec(), theta_init=run.train.theta_init, seed=run.train.seed)
    params = _section(ckpt.tensors, "param/")
    for name, p in model.parameters().items():
        if name not in params or params[name].shape != p.shape:
            raise ArtifactIOError(f"checkpoint {ckpt.path} has no matching tensor for {name}")
        p.values[...] = params[name]

    masks = {k: v.astype(bool) for k, v in _section(ckpt.tensors, "frozen_mask/").items()}
    for component in model.components:
        names = [n for n, _ in component.weights()]
        if all(n in masks for n in names):
            component.freeze({n: masks[n] for n in names})
    model.raw_weight_forwards = int(ckpt.meta.get("raw_weight_forwards", 0))
    return model


def restore_pruner(ckpt: Checkpoint, model: MultitaskModel) -> BasePruner:
    pruner = build_pruner(model, ckpt.run_config.train)
    pruner.load_state_dict(ckpt.meta["pruner"], _section(ckpt.tensors, "pruner/"))
    pruner.optimizer.load_state_dict(ckpt.meta["optimizer"], _section(ckpt.tensors, "optim/"))
    return pruner


def resume_trainer(ckpt: Checkpoint, dataset, run_config: Optional[RunConfig] = None, **trainer_kwargs) -> Trainer:
    """
    Rebuild a trainer at the checkpoint's epoch. `run_config` may only differ
    from the stored one in fields that do not change results.
    """
    run = run_config if run_config is not None else ckpt.run_config
    if config_hash(run) != ckpt.meta["config_hash"]:
        raise ConfigError(f"config does not match the one checkpoint {ckpt.path} was trained with")

    model = restore_model(ckpt)
    pruner = restore_pruner(ckpt, model)
    trainer = Trainer(model, dataset, run.train, pruner=pruner, **trainer_kwargs)
    weighting.load_state_dict(trainer.weighting, ckpt.meta["weighting"], _section(ckpt.tensors, "weighting/"))
    trainer.rng.bit_generator.state = ckpt.meta["rng_state"]
    trainer.epoch = int(ckpt.meta["epoch"])
    trainer.iteration = int(ckpt.meta["iteration"])
    trainer.log = RunLog.from_json(ckpt.meta["run_log"])
    log.info(f"Resumed from {ckpt.path} at epoch {trainer.epoch}")
    return trainer
