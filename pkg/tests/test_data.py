import numpy as np
import pytest

from mtl_core.config import DataConfig, TaskConfig
from mtl_core.data import (
    MAGIC,
    TaskSpec,
    batch_indices,
    batches,
    dataset_from_config,
    generate,
    load_dataset,
    save_dataset,
    sidecar_path,
)
from mtl_core.errors import ArtifactIOError, DatasetError

REFERENCE_TASKS = [
    TaskSpec("clean", "regression", 2, 0.0),
    TaskSpec("noisy", "regression", 2, 0.3),
    TaskSpec("class", "classification", 4, 0.0),
]


class TestGenerate:

    def test_reference_shapes(self):
        ds = generate(42, 2000, 16, REFERENCE_TASKS)
        assert ds.inputs.shape == (2000, 16)
        assert ds.targets["clean"].shape == (2000, 2)
        assert ds.targets["class"].dtype == np.int64
        assert set(np.unique(ds.targets["class"])) <= {0, 1, 2, 3}
        assert len(ds.test_idx) == 400 and len(ds.train_idx) == 1600
        assert not set(ds.test_idx) & set(ds.train_idx)

    def test_bit_identical_for_same_seed(self):
        a = generate(42, 200, 16, REFERENCE_TASKS)
        b = generate(42, 200, 16, REFERENCE_TASKS)
        np.testing.assert_array_equal(a.inputs, b.inputs)
        for t in a.task_names:
            np.testing.assert_array_equal(a.targets[t], b.targets[t])
        np.testing.assert_array_equal(a.test_idx, b.test_idx)

    def test_different_seeds_differ(self):
        a = generate(1, 100, 4, REFERENCE_TASKS)
        b = generate(2, 100, 4, REFERENCE_TASKS)
        assert not np.array_equal(a.inputs, b.inputs)

    def test_noise_level_only_changes_its_task(self):
        quiet = generate(5, 300, 8, [TaskSpec("a", "regression", 2, 0.0), TaskSpec("b", "regression", 2, 0.0)])
        loud = generate(5, 300, 8, [TaskSpec("a", "regression", 2, 0.0), TaskSpec("b", "regression", 2, 0.3)])
        np.testing.assert_array_equal(quiet.targets["a"], loud.targets["a"])
        residual = loud.targets["b"] - quiet.targets["b"]
        assert residual.std() == pytest.approx(0.3, rel=0.1)

    def test_noise_dial_scales_only_its_task(self):
        def make(sigma):
            return generate(9, 2000, 8, [TaskSpec("a", "regression", 2, 0.0), TaskSpec("b", "regression", 2, sigma),
                                         TaskSpec("c", "classification", 3, 0.0)])

        base = make(0.0)
        stds = []
        for sigma in (0.05, 0.3, 1.0):
            ds = make(sigma)
            np.testing.assert_array_equal(ds.inputs, base.inputs)
            np.testing.assert_array_equal(ds.targets["a"], base.targets["a"])
            np.testing.assert_array_equal(ds.targets["c"], base.targets["c"])
            np.testing.assert_array_equal(ds.test_idx, base.test_idx)
            stds.append(float((ds.targets["b"] - base.targets["b"]).std()))
            assert stds[-1] == pytest.approx(sigma, rel=0.05)
        assert stds == sorted(stds)

    def test_direction_targets_are_unit(self, small_dataset):
        np.testing.assert_allclose(np.linalg.norm(small_dataset.targets["dir"], axis=1), 1.0, rtol=1e-12)

    @pytest.mark.parametrize("specs, n, d", [
        ([], 100, 4),
        ([TaskSpec("a", "regression", 1), TaskSpec("a", "regression", 1)], 100, 4),
        ([TaskSpec("a", "ranking", 1)], 100, 4),
        ([TaskSpec("a", "classification", 1)], 100, 4),
        ([TaskSpec("a", "regression", 1, -0.1)], 100, 4),
        ([TaskSpec("a", "regression", 1)], 5, 4),
        ([TaskSpec("a", "regression", 1)], 100, 1),
    ])
    def test_invalid_specs(self, specs, n, d):
        with pytest.raises(DatasetError):
            generate(0, n, d, specs)

    def test_from_config(self):
        cfg = DataConfig(seed=9, n_samples=50, input_dim=3, tasks=[TaskConfig("a", "regression", 1, 0.1)])
        ds = dataset_from_config(cfg)
        np.testing.assert_array_equal(ds.inputs, generate(9, 50, 3, [TaskSpec("a", "regression", 1, 0.1)]).inputs)


class TestBatches:

    def test_cover_split_exactly_once(self, small_dataset):
        seen = np.concatenate(batch_indices(small_dataset.train_idx, 16, epoch_seed=4))
        np.testing.assert_array_equal(np.sort(seen), small_dataset.train_idx)

    def test_last_short_batch_is_kept(self, small_dataset):
        sizes = [len(b) for b in batch_indices(small_dataset.train_idx, 20, epoch_seed=1)]
        assert sizes == [20, 20, 8]

    def test_same_epoch_seed_same_order(self, small_dataset):
        a = batch_indices(small_dataset.train_idx, 16, epoch_seed=3)
        b = batch_indices(small_dataset.train_idx, 16, epoch_seed=3)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)

    def test_batches_yield_all_tasks(self, small_dataset):
        x, ys = next(batches(small_dataset, "test", 4))
        assert x.shape == (4, 4)
        assert [y.shape[0] for y in ys] == [4, 4, 4]

    def test_batch_larger_than_split(self, small_dataset):
        with pytest.raises(DatasetError):
            batch_indices(small_dataset.test_idx, 100)

    def test_unknown_split(self, small_dataset):
        with pytest.raises(DatasetError):
            small_dataset.split("validation")


class TestPersistence:

    def test_round_trip(self, small_dataset, tmp_path):
        path = tmp_path / "ds.amtl"
        save_dataset(small_dataset, path)
        assert path.read_bytes()[:4] == MAGIC
        assert sidecar_path(path).is_file()
        loaded = load_dataset(path)
        np.testing.assert_array_equal(loaded.inputs, small_dataset.inputs)
        for t in small_dataset.task_names:
            np.testing.assert_array_equal(loaded.targets[t], small_dataset.targets[t])
        np.testing.assert_array_equal(loaded.train_idx, small_dataset.train_idx)
        np.testing.assert_array_equal(loaded.test_idx, small_dataset.test_idx)
        assert loaded.targets["cls"].dtype == np.int64

    def test_bad_magic(self, small_dataset, tmp_path):
        path = tmp_path / "ds.amtl"
        save_dataset(small_dataset, path)
        path.write_bytes(b"XXXX" + path.read_bytes()[4:])
        with pytest.raises(ArtifactIOError):
            load_dataset(path)

    def test_truncated(self, small_dataset, tmp_path):
        path = tmp_path / "ds.amtl"
        save_dataset(small_dataset, path)
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(ArtifactIOError):
            load_dataset(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ArtifactIOError):
            load_dataset(tmp_path / "nope.amtl")
