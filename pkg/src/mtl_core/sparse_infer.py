"""
Compressed-sparse-row export of a frozen model and an SpMV forward pass.

Each layer stores Wᵀ (out × in) so one CSR row produces one output unit.
Only surviving weights are stored; their values are the effective weights
the frozen model computes with.
"""
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
import safetensors.numpy
import scipy.sparse as sp
from safetensors import safe_open

from .errors import ArtifactIOError, DimensionError, StateError, TaskIndexError
from .model import MultitaskModel, forward_task
from .tensor import Tensor
from .utils import system_info

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


@dataclass(frozen=True)
class CsrMatrix:
    n_rows: int
    n_cols: int
    row_offsets: np.ndarray
    col_indices: np.ndarray
    values: np.ndarray

    @property
    def nnz(self) -> int:
        return int(self.values.size)

    @classmethod
    def from_masked(cls, dense: np.ndarray, mask: np.ndarray) -> "CsrMatrix":
        """Entries of `dense` where `mask` is set, in row-major order."""
        if dense.shape != mask.shape or dense.ndim != 2:
            raise DimensionError(f"cannot compress shape {dense.shape} with mask {mask.shape}")
        rows, cols = np.nonzero(mask)
        offsets = np.zeros(dense.shape[0] + 1, dtype=np.int64)
        np.cumsum(np.count_nonzero(mask, axis=1), out=offsets[1:])
        return cls(
            n_rows=dense.shape[0],
            n_cols=dense.shape[1],
            row_offsets=offsets,
            col_indices=cols.astype(np.int64),
            values=np.asarray(dense[rows, cols], dtype=np.float64),
        )

    def validate(self):
        o = self.row_offsets
        if o.shape != (self.n_rows + 1,) or o[0] != 0 or o[-1] != self.nnz or self.col_indices.size != self.nnz:
            raise DimensionError("CSR offsets do not match the stored entries")
        if np.any(np.diff(o) < 0):
            raise DimensionError("CSR row offsets decrease")
        if self.nnz and (self.col_indices.min() < 0 or self.col_indices.max() >= self.n_cols):
            raise DimensionError("CSR column index out of range")
        for r in range(self.n_rows):
            cols = self.col_indices[o[r]:o[r + 1]]
            if np.any(np.diff(cols) <= 0):
                raise DimensionError(f"CSR columns of row {r} are not strictly increasing")

    def to_scipy(self) -> sp.csr_matrix:
        return sp.csr_matrix((self.values, self.col_indices, self.row_offsets), shape=(self.n_rows, self.n_cols))

    def to_dense(self) -> np.ndarray:
        return self.to_scipy().toarray()

    def matvec(self, x: np.ndarray) -> np.ndarray:
        """Rows of x (n × n_cols) times this matrix's transpose: (n × n_rows)."""
        out = np.zeros((x.shape[0], self.n_rows))
        if self.nnz == 0:
            return out
        products = x[:, self.col_indices] * self.values
        nonempty = np.flatnonzero(np.diff(self.row_offsets))
        out[:, nonempty] = np.add.reduceat(products, self.row_offsets[nonempty], axis=1)
        return out


@dataclass(frozen=True)
class SparseLayer:
    name: str
    matrix: CsrMatrix
    bias: np.ndarray


@dataclass(frozen=True)
class SparseHead:
    task_name: str
    loss: str
    layers: List[SparseLayer]


@dataclass(frozen=True)
class SparseModel:
    input_dim: int
    backbone: List[SparseLayer]
    heads: List[SparseHead]

    @property
    def num_tasks(self) -> int:
        return len(self.heads)

    def layers(self) -> List[SparseLayer]:
        out = list(self.backbone)
        for h in self.heads:
            out.extend(h.layers)
        return out

    def path(self, task_index: int) -> List[SparseLayer]:
        if not 0 <= task_index < self.num_tasks:
            raise TaskIndexError(f"task index {task_index} out of range for {self.num_tasks} tasks")
        return list(self.backbone) + list(self.heads[task_index].layers)

    def path_nnz(self, task_index: int) -> int:
        return sum(layer.matrix.nnz for layer in self.path(task_index))

    def nnz_by_component(self) -> Dict[str, int]:
        out = {"backbone": sum(layer.matrix.nnz for layer in self.backbone)}
        for h in self.heads:
            out[f"head:{h.task_name}"] = sum(layer.matrix.nnz for layer in h.layers)
        return out


@dataclass
class MulAddCounter:
    mul_adds: int = 0
    samples: int = 0

    @property
    def per_sample(self) -> float:
        return self.mul_adds / self.samples if self.samples else 0.0


def export_sparse(model: MultitaskModel, pruner=None) -> SparseModel:
    """CSR copy of a frozen model. Raises StateError while any mask is still moving."""
    frozen = pruner.frozen if pruner is not None else all(c.mask_frozen for c in model.components)
    if not frozen:
        raise StateError("model must be frozen before sparse export")

    def convert(component) -> List[SparseLayer]:
        layers = []
        for layer in component.layers:
            mask = component.frozen_mask[layer.weight_name]
            effective = layer.weight.values * mask
            layers.append(SparseLayer(
                layer.name, CsrMatrix.from_masked(effective.T, mask.T), layer.bias.values.copy()
            ))
        return layers

    return SparseModel(
        input_dim=model.input_dim,
        backbone=convert(model.backbone),
        heads=[SparseHead(h.task_name, h.loss, convert(h.component)) for h in model.heads],
    )


def spmv_forward(sparse_model: SparseModel, x, task_index: int,
                 counter: Optional[MulAddCounter] = None) -> np.ndarray:
    layers = sparse_model.path(task_index)
    h = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if h.ndim != 2 or h.shape[1] != sparse_model.input_dim:
        raise DimensionError(f"input of shape {np.shape(x)} does not match input_dim {sparse_model.input_dim}")
    for i, layer in enumerate(layers):
        h = layer.matrix.matvec(h) + layer.bias
        if i < len(layers) - 1:
            h = np.maximum(h, 0.0)
        if counter is not None:
            counter.mul_adds += layer.matrix.nnz * h.shape[0]
    if counter is not None:
        counter.samples += h.shape[0]
    return h


def frozen_weights(model: MultitaskModel) -> Dict[str, Tensor]:
    out = {}
    for component in model.components:
        for name, w in component.weights():
            mask = component.frozen_mask[name] if component.mask_frozen else np.ones(w.shape, dtype=bool)
            out[name] = Tensor(w.values * mask)
    return out


@dataclass
class BenchReport:
    n_inputs: int
    tasks: List[Dict[str, Any]] = field(default_factory=list)
    system: Dict[str, Any] = field(default_factory=dict)

    @property
    def mul_add_ratio(self) -> float:
        dense = sum(t["dense_mul_adds"] for t in self.tasks)
        sparse = sum(t["sparse_mul_adds"] for t in self.tasks)
        return sparse / dense if dense else 1.0

    def to_json(self) -> Dict[str, Any]:
        return {"n_inputs": self.n_inputs, "mul_add_ratio": self.mul_add_ratio, "tasks": self.tasks,
                "system": self.system}


def bench(sparse_model: SparseModel, dense_model: MultitaskModel, n_inputs: int = 100, seed: int = 0) -> BenchReport:
    """
    Median single-input wall-clock time of both paths per task, plus exact
    mul-add counts. Only the counts are meaningful for comparison.
    """
    if n_inputs < 1:
        raise ValueError(f"n_inputs must be >= 1, got {n_inputs}")
    rng = np.random.default_rng(seed)
    xs = rng.standard_normal((n_inputs, sparse_model.input_dim))
    weights = frozen_weights(dense_model)
    report = BenchReport(n_inputs=n_inputs, system=system_info())

    for t, head in enumerate(sparse_model.heads):
        dense_times, sparse_times = [], []
        counter = MulAddCounter()
        for x in xs:
            start = time.perf_counter()
            forward_task(dense_model, x, t, weights)
            dense_times.append(time.perf_counter() - start)
            start = time.perf_counter()
            spmv_forward(sparse_model, x, t, counter)
            sparse_times.append(time.perf_counter() - start)
        dense_mul_adds = sum(layer.weight.size for layer in dense_model.path_layers(t))
        report.tasks.append({
            "task": head.task_name,
            "dense_median_s": float(np.median(dense_times)),
            "sparse_median_s": float(np.median(sparse_times)),
            "dense_mul_adds": dense_mul_adds,
            "sparse_mul_adds": int(counter.per_sample),
            "mul_add_ratio": counter.per_sample / dense_mul_adds,
        })
    return report


# ----------------------------------------------------------------------
# --- Persistence ---
# ----------------------------------------------------------------------

def _layer_header(layer: SparseLayer) -> Dict[str, Any]:
    m = layer.matrix
    return {"name": layer.name, "n_rows": m.n_rows, "n_cols": m.n_cols, "nnz": m.nnz}


def save_sparse_model(sparse_model: SparseModel, path):
    tensors = {}
    for layer in sparse_model.layers():
        m = layer.matrix
        tensors[f"{layer.name}/row_offsets"] = m.row_offsets.astype("<u8")
        tensors[f"{layer.name}/bias"] = layer.bias.astype("<f8")
        if m.nnz:
            tensors[f"{layer.name}/col_indices"] = m.col_indices.astype("<u8")
            tensors[f"{layer.name}/values"] = m.values.astype("<f8")
    header = {
        "format_version": FORMAT_VERSION,
        "input_dim": sparse_model.input_dim,
        "backbone": [_layer_header(layer) for layer in sparse_model.backbone],
        "heads": [
            {"task": h.task_name, "loss": h.loss, "layers": [_layer_header(layer) for layer in h.layers]}
            for h in sparse_model.heads
        ],
    }
    path = Path(path)
    try:
        safetensors.numpy.save_file(tensors, str(path), metadata={"header": json.dumps(header)})
    except OSError as e:
        raise ArtifactIOError(f"could not write sparse model {path}: {e}") from e


def load_sparse_model(path) -> SparseModel:
    path = Path(path)
    if not path.is_file():
        raise ArtifactIOError(f"sparse model not found: {path}")
    try:
        with safe_open(str(path), framework="np") as f:
            header = json.loads((f.metadata() or {})["header"])
            tensors = {k: f.get_tensor(k) for k in f.keys()}
    except Exception as e:
        raise ArtifactIOError(f"could not read sparse model {path}: {e}") from e
    if header.get("format_version") != FORMAT_VERSION:
        raise ArtifactIOError(f"{path} has sparse format {header.get('format_version')}, expected {FORMAT_VERSION}")

    def layer(h: Dict[str, Any]) -> SparseLayer:
        name = h["name"]
        empty = np.zeros(0)
        matrix = CsrMatrix(
            n_rows=int(h["n_rows"]),
            n_cols=int(h["n_cols"]),
            row_offsets=tensors[f"{name}/row_offsets"].astype(np.int64),
            col_indices=tensors.get(f"{name}/col_indices", empty).astype(np.int64),
            values=tensors.get(f"{name}/values", empty).astype(np.float64),
        )
        matrix.validate()
        return SparseLayer(name, matrix, tensors[f"{name}/bias"].astype(np.float64))

    return SparseModel(
        input_dim=int(header["input_dim"]),
        backbone=[layer(h) for h in header["backbone"]],
        heads=[SparseHead(h["task"], h["loss"], [layer(x) for x in h["layers"]]) for h in header["heads"]],
    )
