from pathlib import Path

import numpy as np
import pytest

from mtl_core.config import DataConfig, HeadConfig, ModelConfig, RunConfig, TaskConfig, TrainConfig
from mtl_core.data import TaskSpec, generate
from mtl_core.model import HeadSpec, ModelSpec, build_model

PROJECT_ROOT = Path(__file__).resolve().parents[1]
CONFIG_PATH = PROJECT_ROOT / "configs" / "config.yaml"
TABLES_DIR = PROJECT_ROOT / "tables"


# =============================================================================
# Small three-task setup: regression, classification and direction heads
# =============================================================================

SMALL_HEADS = [
    ("reg", "regression", 2, "l1", 0.0),
    ("cls", "classification", 3, "cross-entropy", 0.0),
    ("dir", "direction", 2, "negative-cosine", 0.1),
]


@pytest.fixture
def small_spec():
    """4 -> 6 -> 5 backbone, three 5 -> 3 -> out heads (147 parameters)."""
    return ModelSpec(
        backbone=[4, 6, 5],
        heads=[HeadSpec(name, [5, 3, out], loss) for name, _, out, loss, _ in SMALL_HEADS],
    )


@pytest.fixture
def small_model(small_spec):
    return build_model(small_spec, theta_init=-20.0, seed=0)


@pytest.fixture
def small_dataset():
    specs = [TaskSpec(name, kind, out, noise) for name, kind, out, _, noise in SMALL_HEADS]
    return generate(seed=3, n_samples=60, input_dim=4, task_specs=specs, test_fraction=0.2)


@pytest.fixture
def small_train_config():
    return TrainConfig(
        epochs=6,
        batch_size=16,
        lr=0.05,
        target_sparsity=0.5,
        warmup_epochs=1,
        window_capacity=10,
        disable_progress_bar=True,
        seed=0,
    )


@pytest.fixture
def small_run_config(small_train_config):
    return RunConfig(
        model=ModelConfig(
            backbone=[4, 6, 5],
            heads=[HeadConfig(name, [5, 3, out], loss) for name, _, out, loss, _ in SMALL_HEADS],
        ),
        data=DataConfig(
            seed=3,
            n_samples=60,
            input_dim=4,
            test_fraction=0.2,
            tasks=[TaskConfig(name, kind, out, noise) for name, kind, out, _, noise in SMALL_HEADS],
        ),
        train=small_train_config,
        output_dir="unused",
    )


@pytest.fixture
def rng():
    return np.random.default_rng(42)
