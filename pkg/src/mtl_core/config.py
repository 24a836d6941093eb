"""
Run configuration: a Hydra-composed YAML tree merged onto an OmegaConf
structured schema.

The schema rejects unknown keys and ill-typed values at merge time;
`validate_run_config` then checks ranges and cross-section consistency and
reports every problem at once.
"""
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from hydra import compose, initialize_config_dir
from hydra.errors import HydraException
from omegaconf import OmegaConf
from omegaconf.errors import OmegaConfBaseException
import yaml

from .errors import ArtifactIOError, ConfigError, ModelSpecError
from .model import HeadSpec, ModelSpec, validate_spec
from .optim import OPTIMIZERS

log = logging.getLogger(__name__)

PRUNER_KINDS = ("adapmtl", "shared-threshold", "two-threshold", "magnitude-iterative", "none")
TASK_KINDS = ("regression", "classification", "direction")
LOSS_NORMALIZERS = ("window-mean", "current")
FREEZE_CADENCES = ("epoch", "batch")

# loss kinds a head may use for each task kind
COMPATIBLE_LOSSES = {
    "regression": ("l1", "mse"),
    "classification": ("cross-entropy",),
    "direction": ("negative-cosine",),
}


@dataclass
class HeadConfig:
    name: str = "???"
    widths: List[int] = field(default_factory=list)
    loss: str = "l1"


@dataclass
class ModelConfig:
    backbone: List[int] = field(default_factory=lambda: [16, 32, 32])
    heads: List[HeadConfig] = field(default_factory=list)

    def to_spec(self) -> ModelSpec:
        return ModelSpec(
            backbone=[int(w) for w in self.backbone],
            heads=[HeadSpec(h.name, [int(w) for w in h.widths], h.loss) for h in self.heads],
        )


@dataclass
class TaskConfig:
    name: str = "???"
    kind: str = "regression"
    output_dim: int = 1
    noise_level: float = 0.0


@dataclass
class DataConfig:
    # When set, the dataset is loaded from this file instead of generated.
    path: Optional[str] = None
    seed: int = 42
    n_samples: int = 2000
    input_dim: int = 16
    test_fraction: float = 0.2
    tasks: List[TaskConfig] = field(default_factory=list)


@dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = 64
    lr: float = 0.05
    lr_decay: float = 0.5
    lr_decay_interval: int = 4000
    lr_theta: Optional[float] = None
    weight_decay: float = 1e-4
    theta_weight_decay: float = 0.0
    theta_init: float = -20.0
    theta_max: float = 30.0
    theta_drift: Optional[float] = None
    drift_target_fraction: float = 0.6
    target_sparsity: float = 0.8
    weighting_lambda: float = 1.0
    window_capacity: int = 400
    loss_normalizer: str = "window-mean"
    warmup_epochs: Optional[int] = None
    seed: int = 0
    seeds: List[int] = field(default_factory=list)
    pruner_kind: str = "adapmtl"
    freeze_cadence: str = "epoch"
    optimizer: str = "sgd"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    magnitude_rounds: int = 3
    magnitude_fraction: Optional[float] = None
    checkpoint_interval: int = 0
    disable_progress_bar: bool = False
    baseline_report: Optional[str] = None

    def resolved_lr_theta(self) -> float:
        return 10.0 * self.lr if self.lr_theta is None else self.lr_theta

    def resolved_warmup_epochs(self) -> int:
        if self.warmup_epochs is None:
            return int(math.ceil(0.1 * self.epochs))
        return self.warmup_epochs


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    output_dir: str = "runs/reference"
    reporters: Dict[str, Any] = field(default_factory=dict)


TRAIN_KEYS = {f.name for f in fields(TrainConfig)}


def qualify_overrides(overrides: Sequence[str]) -> List[str]:
    """`target_sparsity=0.8` -> `train.target_sparsity=0.8`; anything dotted is left alone."""
    out = []
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"override '{item}' is not of the form key=value")
        prefix = ""
        while key and key[0] in "+~":
            prefix, key = prefix + key[0], key[1:]
        if "." not in key and key in TRAIN_KEYS:
            key = f"train.{key}"
        out.append(f"{prefix}{key}={value}")
    return out


def _structured(node) -> RunConfig:
    schema = OmegaConf.structured(RunConfig)
    try:
        merged = OmegaConf.merge(schema, node)
        return OmegaConf.to_object(merged)
    except OmegaConfBaseException as e:
        raise ConfigError(f"invalid run config: {e}") from e


def load_run_config(config_path, overrides: Sequence[str] = (), validate: bool = True) -> RunConfig:
    path = Path(config_path).resolve()
    if not path.is_file():
        raise ArtifactIOError(f"config file not found: {path}")
    qualified = qualify_overrides(overrides)
    try:
        with initialize_config_dir(version_base=None, config_dir=str(path.parent)):
            cfg = compose(config_name=path.stem, overrides=qualified)
    except (HydraException, OmegaConfBaseException) as e:
        raise ConfigError(f"could not compose {path}: {e}") from e

    run = _structured(cfg)
    if validate:
        validate_run_config(run)
    log.debug(f"Loaded run config from {path} with overrides {qualified}")
    return run


def parse_run_config(text: str, validate: bool = True) -> RunConfig:
    try:
        node = OmegaConf.create(text)
    except (OmegaConfBaseException, yaml.YAMLError) as e:
        raise ConfigError(f"malformed config text: {e}") from e
    run = _structured(node)
    if validate:
        validate_run_config(run)
    return run


def dump_run_config(run: RunConfig) -> str:
    return OmegaConf.to_yaml(OmegaConf.structured(run))


def config_hash(run: RunConfig) -> str:
    payload = {"model": asdict(run.model), "data": asdict(run.data), "train": asdict(run.train)}
    # fields that cannot change the result of a single run
    for key in ("disable_progress_bar", "checkpoint_interval", "baseline_report", "seeds"):
        payload["train"].pop(key)
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _check_train(t: TrainConfig, problems: List[str]):
    if t.epochs < 1:
        problems.append(f"train.epochs must be >= 1, got {t.epochs}")
    if t.batch_size < 1:
        problems.append(f"train.batch_size must be >= 1, got {t.batch_size}")
    if t.lr < 0:
        problems.append(f"train.lr must be >= 0, got {t.lr}")
    if t.lr_theta is not None and t.lr_theta < 0:
        problems.append(f"train.lr_theta must be >= 0, got {t.lr_theta}")
    if not (0.0 < t.lr_decay <= 1.0):
        problems.append(f"train.lr_decay must lie in (0, 1], got {t.lr_decay}")
    if t.lr_decay_interval < 1:
        problems.append(f"train.lr_decay_interval must be >= 1, got {t.lr_decay_interval}")
    if t.weight_decay < 0 or t.theta_weight_decay < 0:
        problems.append("train.weight_decay and train.theta_weight_decay must be >= 0")
    if not (0.0 <= t.target_sparsity < 1.0):
        problems.append(f"train.target_sparsity must lie in [0, 1), got {t.target_sparsity}")
    if t.theta_max <= t.theta_init:
        problems.append(f"train.theta_max ({t.theta_max}) must exceed train.theta_init ({t.theta_init})")
    if not (0.0 < t.drift_target_fraction <= 1.0):
        problems.append(f"train.drift_target_fraction must lie in (0, 1], got {t.drift_target_fraction}")
    if t.weighting_lambda <= 0:
        problems.append(f"train.weighting_lambda must be > 0, got {t.weighting_lambda}")
    if t.window_capacity < 2:
        problems.append(f"train.window_capacity must be >= 2, got {t.window_capacity}")
    if t.warmup_epochs is not None and t.warmup_epochs < 0:
        problems.append(f"train.warmup_epochs must be >= 0, got {t.warmup_epochs}")
    if t.loss_normalizer not in LOSS_NORMALIZERS:
        problems.append(f"train.loss_normalizer must be one of {LOSS_NORMALIZERS}, got '{t.loss_normalizer}'")
    if t.pruner_kind not in PRUNER_KINDS:
        problems.append(f"train.pruner_kind must be one of {PRUNER_KINDS}, got '{t.pruner_kind}'")
    if t.freeze_cadence not in FREEZE_CADENCES:
        problems.append(f"train.freeze_cadence must be one of {FREEZE_CADENCES}, got '{t.freeze_cadence}'")
    if t.optimizer not in OPTIMIZERS:
        problems.append(f"train.optimizer must be one of {OPTIMIZERS}, got '{t.optimizer}'")
    if t.magnitude_rounds < 1:
        problems.append(f"train.magnitude_rounds must be >= 1, got {t.magnitude_rounds}")
    if t.magnitude_fraction is not None and not (0.0 < t.magnitude_fraction < 1.0):
        problems.append(f"train.magnitude_fraction must lie in (0, 1), got {t.magnitude_fraction}")
    if t.pruner_kind == "magnitude-iterative" and t.epochs < t.magnitude_rounds + 1:
        problems.append(
            f"magnitude-iterative needs epochs >= magnitude_rounds + 1, "
            f"got {t.epochs} epochs for {t.magnitude_rounds} rounds"
        )
    if t.checkpoint_interval < 0:
        problems.append(f"train.checkpoint_interval must be >= 0, got {t.checkpoint_interval}")


def _check_data(d: DataConfig, problems: List[str]):
    if d.path is not None:
        return
    if d.n_samples < 10:
        problems.append(f"data.n_samples must be >= 10, got {d.n_samples}")
    if d.input_dim < 2:
        problems.append(f"data.input_dim must be >= 2, got {d.input_dim}")
    if not (0.0 < d.test_fraction < 1.0):
        problems.append(f"data.test_fraction must lie in (0, 1), got {d.test_fraction}")
    if not d.tasks:
        problems.append("data.tasks is empty")
    names = [t.name for t in d.tasks]
    if len(set(names)) != len(names):
        problems.append(f"data.tasks has duplicate names: {names}")
    for t in d.tasks:
        if t.kind not in TASK_KINDS:
            problems.append(f"task '{t.name}': kind must be one of {TASK_KINDS}, got '{t.kind}'")
        if t.output_dim < 1 or (t.kind == "classification" and t.output_dim < 2):
            problems.append(f"task '{t.name}': output_dim {t.output_dim} too small for kind '{t.kind}'")
        if t.noise_level < 0:
            problems.append(f"task '{t.name}': noise_level must be >= 0, got {t.noise_level}")


def check_model_matches_tasks(model: ModelConfig, tasks: Sequence[TaskConfig], input_dim: int, problems: List[str]):
    if model.backbone and model.backbone[0] != input_dim:
        problems.append(f"model.backbone input width {model.backbone[0]} != data.input_dim {input_dim}")
    head_names = [h.name for h in model.heads]
    task_names = [t.name for t in tasks]
    if head_names != task_names:
        problems.append(f"model heads {head_names} do not match data tasks {task_names} (same order required)")
        return
    for head, task in zip(model.heads, tasks):
        if head.widths and head.widths[-1] != task.output_dim:
            problems.append(f"head '{head.name}' output width {head.widths[-1]} != task output_dim {task.output_dim}")
        if task.kind in COMPATIBLE_LOSSES and head.loss not in COMPATIBLE_LOSSES[task.kind]:
            problems.append(f"head '{head.name}' loss '{head.loss}' does not fit task kind '{task.kind}'")


def validate_run_config(run: RunConfig):
    problems: List[str] = []
    try:
        validate_spec(run.model.to_spec())
    except ModelSpecError as e:
        problems.append(str(e))
    _check_train(run.train, problems)
    _check_data(run.data, problems)
    if run.data.path is None:
        check_model_matches_tasks(run.model, run.data.tasks, run.data.input_dim, problems)
    for name, reporter in run.reporters.items():
        if reporter is not None and "_target_" not in reporter:
            problems.append(f"reporter '{name}' has no _target_")
    if problems:
        raise ConfigError("invalid run config:\n  - " + "\n  - ".join(problems))
