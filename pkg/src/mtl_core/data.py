"""
Synthetic multitask datasets with a shared latent structure.

Inputs x ~ N(0, 1); the latent z = tanh(G·x) is shared by every task and
each task reads it through its own fixed random transform:

    regression      A_t·z + ε
    classification  argmax(C_t·z + ε)
    direction       normalize(D_t·z + ε)

with ε ~ N(0, σ_t²). Everything is drawn from one seeded generator in a
fixed order, so (seed, specs) regenerates the dataset bit for bit.
"""
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ArtifactIOError, DatasetError

log = logging.getLogger(__name__)

MAGIC = b"AMTL"
GENERATOR_VERSION = 1
TASK_KINDS = ("regression", "classification", "direction")
SPLITS = ("train", "test")


@dataclass
class TaskSpec:
    name: str
    kind: str
    output_dim: int
    noise_level: float = 0.0
    # fixed at generation: output_dim × latent_dim
    transform: Optional[np.ndarray] = None

    def to_json(self) -> Dict:
        return {
            "name": self.name,
            "kind": self.kind,
            "output_dim": self.output_dim,
            "noise_level": self.noise_level,
            "transform": None if self.transform is None else self.transform.tolist(),
        }

    @classmethod
    def from_json(cls, d: Dict) -> "TaskSpec":
        t = d.get("transform")
        return cls(d["name"], d["kind"], int(d["output_dim"]), float(d.get("noise_level", 0.0)),
                   None if t is None else np.asarray(t, dtype=np.float64))


@dataclass
class SynthDataset:
    inputs: np.ndarray
    targets: Dict[str, np.ndarray]
    tasks: List[TaskSpec]
    train_idx: np.ndarray
    test_idx: np.ndarray
    seed: int
    latent_matrix: np.ndarray
    test_fraction: float = 0.2
    version: int = GENERATOR_VERSION

    @property
    def n_samples(self) -> int:
        return self.inputs.shape[0]

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]

    @property
    def task_names(self) -> List[str]:
        return [t.name for t in self.tasks]

    def split(self, name: str) -> np.ndarray:
        if name == "train":
            return self.train_idx
        if name == "test":
            return self.test_idx
        raise DatasetError(f"unknown split '{name}'; expected one of {SPLITS}")

    def split_arrays(self, name: str) -> Tuple[np.ndarray, List[np.ndarray]]:
        idx = self.split(name)
        return self.inputs[idx], [self.targets[t.name][idx] for t in self.tasks]


def _check_specs(n_samples: int, input_dim: int, task_specs: Sequence[TaskSpec]):
    if n_samples < 10:
        raise DatasetError(f"n_samples must be >= 10, got {n_samples}")
    if input_dim < 2:
        raise DatasetError(f"input_dim must be >= 2, got {input_dim}")
    if not task_specs:
        raise DatasetError("at least one task spec is required")
    names = [t.name for t in task_specs]
    if len(set(names)) != len(names):
        raise DatasetError(f"duplicate task names: {names}")
    for t in task_specs:
        if t.kind not in TASK_KINDS:
            raise DatasetError(f"task '{t.name}' has unknown kind '{t.kind}'")
        if t.output_dim < 1 or (t.kind == "classification" and t.output_dim < 2):
            raise DatasetError(f"task '{t.name}' output_dim {t.output_dim} too small for '{t.kind}'")
        if t.noise_level < 0:
            raise DatasetError(f"task '{t.name}' noise_level must be >= 0")


def generate(seed: int, n_samples: int, input_dim: int, task_specs: Sequence[TaskSpec],
             test_fraction: float = 0.2) -> SynthDataset:
    _check_specs(n_samples, input_dim, task_specs)
    if not (0.0 < test_fraction < 1.0):
        raise DatasetError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    rng = np.random.default_rng(seed)
    latent_dim = input_dim
    scale = 1.0 / np.sqrt(latent_dim)

    # draw order: G, task transforms, x, per-task noise, split
    G = rng.normal(0.0, 1.0 / np.sqrt(input_dim), size=(latent_dim, input_dim))
    tasks = [
        TaskSpec(t.name, t.kind, t.output_dim, t.noise_level,
                 rng.normal(0.0, scale, size=(t.output_dim, latent_dim)))
        for t in task_specs
    ]
    x = rng.standard_normal((n_samples, input_dim))
    z = np.tanh(x @ G.T)

    targets = {}
    for t in tasks:
        signal = z @ t.transform.T
        noisy = signal + t.noise_level * rng.standard_normal(signal.shape)
        if t.kind == "regression":
            targets[t.name] = noisy
        elif t.kind == "classification":
            targets[t.name] = np.argmax(noisy, axis=1).astype(np.int64)
        else:
            norms = np.linalg.norm(noisy, axis=1, keepdims=True)
            if np.any(norms == 0.0):
                raise DatasetError(f"direction task '{t.name}' produced a zero vector")
            targets[t.name] = noisy / norms

    n_test = max(1, int(round(test_fraction * n_samples)))
    perm = rng.permutation(n_samples)
    test_idx = np.sort(perm[:n_test])
    train_idx = np.sort(perm[n_test:])

    log.debug(f"Generated dataset seed={seed} n={n_samples} d={input_dim} tasks={[t.name for t in tasks]}")
    return SynthDataset(x, targets, tasks, train_idx, test_idx, seed, G, test_fraction)


def batch_indices(indices: np.ndarray, batch_size: int, epoch_seed: Optional[int] = None) -> List[np.ndarray]:
    if batch_size < 1:
        raise DatasetError(f"batch_size must be >= 1, got {batch_size}")
    if batch_size > len(indices):
        raise DatasetError(f"batch_size {batch_size} exceeds split size {len(indices)}")
    order = indices if epoch_seed is None else np.random.default_rng(epoch_seed).permutation(indices)
    return [order[i:i + batch_size] for i in range(0, len(order), batch_size)]


def batches(dataset: SynthDataset, split: str, batch_size: int,
            epoch_seed: Optional[int] = None) -> Iterator[Tuple[np.ndarray, List[np.ndarray]]]:
    """
    Yields (x, [y_1..y_T]) covering the split exactly once, shuffled by
    `epoch_seed` (in order when None); the last short batch is kept.
    """
    for idx in batch_indices(dataset.split(split), batch_size, epoch_seed):
        yield dataset.inputs[idx], [dataset.targets[t.name][idx] for t in dataset.tasks]


def _columns(dataset: SynthDataset) -> Tuple[List[str], np.ndarray]:
    names, cols = [], []
    for j in range(dataset.input_dim):
        names.append(f"x{j}")
        cols.append(dataset.inputs[:, j])
    for t in dataset.tasks:
        y = dataset.targets[t.name]
        if y.ndim == 1:
            names.append(f"{t.name}")
            cols.append(y.astype(np.float64))
        else:
            for k in range(y.shape[1]):
                names.append(f"{t.name}.{k}")
                cols.append(y[:, k])
    is_test = np.zeros(dataset.n_samples)
    is_test[dataset.test_idx] = 1.0
    names.append("is_test")
    cols.append(is_test)
    return names, np.stack(cols)


def sidecar_path(path) -> Path:
    return Path(str(path) + ".json")


def save_dataset(dataset: SynthDataset, path):
    path = Path(path)
    names, table = _columns(dataset)
    header = (
        MAGIC
        + np.array([dataset.version], dtype="<u4").tobytes()
        + np.array([dataset.n_samples, len(names)], dtype="<u8").tobytes()
    )
    meta = {
        "version": dataset.version,
        "seed": dataset.seed,
        "n_samples": dataset.n_samples,
        "input_dim": dataset.input_dim,
        "test_fraction": dataset.test_fraction,
        "columns": names,
        "tasks": [t.to_json() for t in dataset.tasks],
        "latent_matrix": dataset.latent_matrix.tolist(),
    }
    try:
        with open(path, "wb") as f:
            f.write(header)
            f.write(np.ascontiguousarray(table, dtype="<f8").tobytes())
        with open(sidecar_path(path), "w") as f:
            json.dump(meta, f, indent=2)
    except OSError as e:
        raise ArtifactIOError(f"could not write dataset to {path}: {e}") from e
    log.info(f"Saved dataset ({dataset.n_samples} samples, {len(names)} columns) to {path}")


def load_dataset(path) -> SynthDataset:
    path = Path(path)
    try:
        raw = path.read_bytes()
        meta = json.loads(sidecar_path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ArtifactIOError(f"could not read dataset {path}: {e}") from e

    if raw[:4] != MAGIC:
        raise ArtifactIOError(f"{path} is not a dataset file (bad magic)")
    version = int(np.frombuffer(raw[4:8], dtype="<u4")[0])
    if version != GENERATOR_VERSION:
        raise ArtifactIOError(f"{path} has dataset version {version}, expected {GENERATOR_VERSION}")
    n, n_cols = (int(v) for v in np.frombuffer(raw[8:24], dtype="<u8"))
    body = np.frombuffer(raw[24:], dtype="<f8")
    if body.size != n * n_cols or len(meta["columns"]) != n_cols:
        raise ArtifactIOError(f"{path} is truncated or does not match its sidecar")
    table = body.reshape(n_cols, n).astype(np.float64)

    d = int(meta["input_dim"])
    tasks = [TaskSpec.from_json(t) for t in meta["tasks"]]
    inputs = table[:d].T.copy()
    targets, row = {}, d
    for t in tasks:
        if t.kind == "classification":
            targets[t.name] = table[row].astype(np.int64)
            row += 1
        else:
            targets[t.name] = table[row:row + t.output_dim].T.copy()
            row += t.output_dim
    is_test = table[row] > 0.5
    return SynthDataset(
        inputs=inputs,
        targets=targets,
        tasks=tasks,
        train_idx=np.flatnonzero(~is_test),
        test_idx=np.flatnonzero(is_test),
        seed=int(meta["seed"]),
        latent_matrix=np.asarray(meta["latent_matrix"], dtype=np.float64),
        test_fraction=float(meta["test_fraction"]),
        version=version,
    )


def dataset_from_config(data_cfg) -> SynthDataset:
    """Load `data.path` when set, otherwise generate from the config's task list."""
    if data_cfg.path:
        return load_dataset(data_cfg.path)
    specs = [TaskSpec(t.name, t.kind, int(t.output_dim), float(t.noise_level)) for t in data_cfg.tasks]
    return generate(data_cfg.seed, data_cfg.n_samples, data_cfg.input_dim, specs, data_cfg.test_fraction)
