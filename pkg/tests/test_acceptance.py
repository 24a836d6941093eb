"""
Reference end-to-end runs: 3-task synthetic data, 300 epochs, five seeds,
target sparsity 0.8. Deselected by default; run with `pytest -m slow`.
"""
import dataclasses

import numpy as np
import pytest

from mtl_core.config import load_run_config
from mtl_core.data import dataset_from_config
from mtl_core.model import build_model, forward_task
from mtl_core.sparse_infer import bench, export_sparse, frozen_weights, spmv_forward
from mtl_core.trainer import Trainer

from conftest import CONFIG_PATH

pytestmark = pytest.mark.slow


def _train(run, kind, seed):
    train = dataclasses.replace(run.train, pruner_kind=kind, seed=seed, seeds=[], disable_progress_bar=True)
    model = build_model(run.model.to_spec(), theta_init=train.theta_init, seed=seed)
    trainer = Trainer(model, dataset_from_config(run.data), train)
    trainer.run()
    return trainer


@pytest.fixture(scope="module")
def reference_runs():
    run = load_run_config(CONFIG_PATH)
    runs = {}
    for seed in run.train.seeds:
        dense = _train(run, "none", seed)
        baseline = dense.log.epochs[-1].eval_metrics
        for kind in ("adapmtl", "shared-threshold"):
            trainer = _train(run, kind, seed)
            trainer.log.report = trainer.make_report(baseline)
            runs[(kind, seed)] = trainer
    return runs


def _adaptive(runs):
    return [t for (kind, _), t in runs.items() if kind == "adapmtl"]


def test_sparsity_at_freeze_hits_target(reference_runs):
    for trainer in _adaptive(reference_runs):
        freeze_epoch = trainer.log.freeze_epoch
        assert freeze_epoch is not None
        assert 0.78 <= trainer.log.epochs[freeze_epoch].snapshot.overall <= 0.82


def test_components_get_different_sparsity(reference_runs):
    for trainer in _adaptive(reference_runs):
        per_component = [c.sparsity for c in trainer.log.epochs[-1].snapshot.components]
        assert max(per_component) - min(per_component) >= 0.05


def test_adaptive_thresholds_beat_shared_threshold(reference_runs):
    def median_delta(kind):
        return np.median([t.log.report.overall_delta for (k, _), t in reference_runs.items() if k == kind])

    assert median_delta("adapmtl") > median_delta("shared-threshold")


def test_masks_are_conserved_after_freeze(reference_runs):
    for trainer in _adaptive(reference_runs):
        after = trainer.log.epochs[trainer.log.freeze_epoch:]
        nnz = {tuple(c.nnz for c in r.snapshot.components) for r in after}
        assert len(nnz) == 1
        for component in trainer.model.components:
            for name, w in component.weights():
                assert not np.any(w.values[~component.frozen_mask[name]])


def test_sparsity_never_drops_before_freeze(reference_runs):
    for trainer in _adaptive(reference_runs):
        warmup = trainer.config.resolved_warmup_epochs()
        overall = [r.snapshot.overall for r in trainer.log.epochs[warmup:trainer.log.freeze_epoch + 1]]
        assert all(b >= a - 0.005 for a, b in zip(overall, overall[1:]))


def test_sparse_export_matches_dense_path(reference_runs):
    trainer = _adaptive(reference_runs)[0]
    model = trainer.model
    sparse = export_sparse(model, trainer.pruner)
    xs = np.random.default_rng(0).standard_normal((1000, model.input_dim))
    weights = frozen_weights(model)
    for t in range(model.num_tasks):
        dense = forward_task(model, xs, t, weights).values
        np.testing.assert_allclose(spmv_forward(sparse, xs, t), dense, rtol=1e-12, atol=1e-12)
    report = bench(sparse, model, n_inputs=10)
    assert report.mul_add_ratio == pytest.approx(0.2, abs=0.03)
