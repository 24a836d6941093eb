"""
Multitask MLP: a shared backbone plus one head per task.

Parameters are partitioned into components (the backbone and each head);
a component is the unit that owns a soft threshold. Heads branch from the
final backbone layer.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from .errors import DimensionError, ModelSpecError, TaskIndexError
from .tensor import LOSS_KINDS, Tensor, add_bias, matmul, relu

log = logging.getLogger(__name__)

BACKBONE = "backbone"


def head_component_name(task_name: str) -> str:
    return f"head:{task_name}"


@dataclass
class HeadSpec:
    name: str
    widths: List[int]
    loss: str = "l1"


@dataclass
class ModelSpec:
    """
    backbone: layer widths including the input, e.g. [16, 32, 32].
    heads: per task, widths starting at the backbone output width, e.g. [32, 8, 2].
    """
    backbone: List[int]
    heads: List[HeadSpec]

    @property
    def input_dim(self) -> int:
        return self.backbone[0]


@dataclass
class Layer:
    name: str
    weight: Tensor
    bias: Tensor

    @property
    def weight_name(self) -> str:
        return f"{self.name}.weight"

    @property
    def bias_name(self) -> str:
        return f"{self.name}.bias"

    @property
    def fan_in(self) -> int:
        return self.weight.shape[0]

    @property
    def fan_out(self) -> int:
        return self.weight.shape[1]


@dataclass
class Component:
    name: str
    layers: List[Layer]
    theta: float
    mask_frozen: bool = False
    frozen_mask: Optional[Dict[str, np.ndarray]] = None

    @property
    def alpha(self) -> float:
        return float(expit(self.theta))

    @property
    def params(self) -> List[Tensor]:
        out = []
        for layer in self.layers:
            out.extend([layer.weight, layer.bias])
        return out

    def weights(self) -> List[Tuple[str, Tensor]]:
        return [(layer.weight_name, layer.weight) for layer in self.layers]

    def param_count(self) -> int:
        return sum(p.size for p in self.params)

    def weight_count(self) -> int:
        return sum(layer.weight.size for layer in self.layers)

    def freeze(self, masks: Dict[str, np.ndarray]):
        if self.mask_frozen:
            return
        for name, w in self.weights():
            if masks[name].shape != w.shape:
                raise DimensionError(f"frozen mask for {name} has shape {masks[name].shape}, weight {w.shape}")
        self.frozen_mask = {name: np.array(m, dtype=bool) for name, m in masks.items()}
        for m in self.frozen_mask.values():
            m.setflags(write=False)
        self.mask_frozen = True


@dataclass
class TaskHead:
    task_name: str
    component: Component
    loss: str
    output_dim: int


@dataclass
class MultitaskModel:
    spec: ModelSpec
    backbone: Component
    heads: List[TaskHead]
    # forwards that multiplied by raw (non-thresholded) weights
    raw_weight_forwards: int = field(default=0)

    @property
    def num_tasks(self) -> int:
        return len(self.heads)

    @property
    def input_dim(self) -> int:
        return self.spec.input_dim

    @property
    def task_names(self) -> List[str]:
        return [h.task_name for h in self.heads]

    @property
    def components(self) -> List[Component]:
        return [self.backbone] + [h.component for h in self.heads]

    def component(self, name: str) -> Component:
        for c in self.components:
            if c.name == name:
                return c
        raise KeyError(name)

    def task_index(self, task_name: str) -> int:
        try:
            return self.task_names.index(task_name)
        except ValueError:
            raise TaskIndexError(f"unknown task '{task_name}'; model has {self.task_names}")

    def layers(self) -> Iterator[Layer]:
        for c in self.components:
            yield from c.layers

    def parameters(self) -> Dict[str, Tensor]:
        out = {}
        for layer in self.layers():
            out[layer.weight_name] = layer.weight
            out[layer.bias_name] = layer.bias
        return out

    def weight_names(self) -> List[str]:
        return [layer.weight_name for layer in self.layers()]

    def path_layers(self, task_index: int) -> List[Layer]:
        _check_task(self, task_index)
        return list(self.backbone.layers) + list(self.heads[task_index].component.layers)


def _glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def _make_layers(prefix: str, widths: Sequence[int], rng: np.random.Generator) -> List[Layer]:
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        name = f"{prefix}.{i}"
        layers.append(Layer(
            name=name,
            weight=Tensor(_glorot_uniform(rng, fan_in, fan_out), requires_grad=True, name=f"{name}.weight"),
            bias=Tensor(np.zeros(fan_out), requires_grad=True, name=f"{name}.bias"),
        ))
    return layers


def validate_spec(spec: ModelSpec):
    if len(spec.backbone) < 2:
        raise ModelSpecError(f"backbone needs an input width and at least one layer, got {spec.backbone}")
    if not spec.heads:
        raise ModelSpecError("model spec has no task heads")
    if any(int(w) < 1 for w in spec.backbone):
        raise ModelSpecError(f"backbone widths must be >= 1, got {spec.backbone}")
    names = set()
    for head in spec.heads:
        if head.name in names:
            raise ModelSpecError(f"duplicate head name '{head.name}'")
        names.add(head.name)
        if len(head.widths) < 2:
            raise ModelSpecError(f"head '{head.name}' needs at least one layer, got {head.widths}")
        if any(int(w) < 1 for w in head.widths):
            raise ModelSpecError(f"head '{head.name}' widths must be >= 1, got {head.widths}")
        if head.widths[0] != spec.backbone[-1]:
            raise ModelSpecError(
                f"head '{head.name}' input width {head.widths[0]} does not match "
                f"backbone output width {spec.backbone[-1]}"
            )
        if head.loss not in LOSS_KINDS:
            raise ModelSpecError(f"head '{head.name}' has unknown loss '{head.loss}'")


def build_model(spec: ModelSpec, theta_init: float = -20.0, seed: Union[int, np.random.Generator] = 0) -> MultitaskModel:
    validate_spec(spec)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)

    backbone = Component(BACKBONE, _make_layers(BACKBONE, spec.backbone, rng), theta=float(theta_init))
    heads = []
    for head in spec.heads:
        cname = head_component_name(head.name)
        component = Component(cname, _make_layers(cname, head.widths, rng), theta=float(theta_init))
        heads.append(TaskHead(head.name, component, head.loss, int(head.widths[-1])))

    model = MultitaskModel(spec=spec, backbone=backbone, heads=heads)
    log.debug(f"Built model with {model.num_tasks} heads and {sum(param_counts(model).values())} parameters")
    return model


def _check_task(model: MultitaskModel, task_index: int):
    if not 0 <= task_index < model.num_tasks:
        raise TaskIndexError(f"task index {task_index} out of range for {model.num_tasks} tasks")


def _as_batch(model: MultitaskModel, x) -> Tensor:
    t = x if isinstance(x, Tensor) else Tensor(x)
    if t.values.ndim == 1:
        t = Tensor(t.values.reshape(1, -1))
    if t.values.ndim != 2 or t.shape[1] != model.input_dim:
        raise DimensionError(f"input of shape {t.shape} does not match input_dim {model.input_dim}")
    return t


def forward_task(model: MultitaskModel, x, task_index: int,
                 weights: Optional[Mapping[str, Tensor]] = None) -> Tensor:
    """
    Prediction of head `task_index` for a batch x[n×input_dim].

    `weights` maps weight names to the effective (thresholded or masked)
    weights; without it the raw weights are used and counted in
    `model.raw_weight_forwards`.
    """
    _check_task(model, task_index)
    h = _as_batch(model, x)
    if weights is None:
        model.raw_weight_forwards += 1

    backbone_layers = model.backbone.layers
    head_layers = model.heads[task_index].component.layers
    for i, layer in enumerate(list(backbone_layers) + list(head_layers)):
        w = layer.weight if weights is None else weights[layer.weight_name]
        h = add_bias(matmul(h, w), layer.bias)
        is_last = i == len(backbone_layers) + len(head_layers) - 1
        if not is_last:
            h = relu(h)
    return h


def param_counts(model: MultitaskModel) -> Dict[str, int]:
    return {c.name: c.param_count() for c in model.components}
