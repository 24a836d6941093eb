import dataclasses

import numpy as np
import pytest

from mtl_core.checkpoint import load_checkpoint, restore_model, resume_trainer, save_checkpoint
from mtl_core.config import config_hash
from mtl_core.data import dataset_from_config
from mtl_core.errors import ArtifactIOError, ConfigError
from mtl_core.model import build_model
from mtl_core.trainer import Trainer


def _run(run_config, out_dir=None, **kwargs):
    dataset = dataset_from_config(run_config.data)
    model = build_model(run_config.model.to_spec(), run_config.train.theta_init, seed=run_config.train.seed)

    def on_checkpoint(trainer):
        save_checkpoint(out_dir / f"epoch_{trainer.epoch:04d}.safetensors", trainer, run_config)

    trainer = Trainer(model, dataset, run_config.train, on_checkpoint=on_checkpoint if out_dir else None, **kwargs)
    trainer.run()
    return trainer


@pytest.fixture(params=["adapmtl", "magnitude-iterative"])
def resumable_config(request, small_run_config):
    train = dataclasses.replace(
        small_run_config.train, epochs=4, checkpoint_interval=2, pruner_kind=request.param, magnitude_rounds=1,
    )
    return dataclasses.replace(small_run_config, train=train)


class TestResume:

    def test_resumed_run_is_bit_identical(self, resumable_config, tmp_path):
        full = _run(resumable_config, tmp_path)
        ckpt = load_checkpoint(tmp_path / "epoch_0002.safetensors")
        assert ckpt.epoch == 2

        resumed = resume_trainer(ckpt, dataset_from_config(resumable_config.data))
        assert resumed.epoch == 2 and len(resumed.log) == 2
        resumed.run()

        for (name, a), b in zip(full.model.parameters().items(), resumed.model.parameters().values()):
            np.testing.assert_array_equal(a.values, b.values, err_msg=name)
        assert full.pruner.thresholds() == resumed.pruner.thresholds()
        assert full.weighting.betas == resumed.weighting.betas
        assert full.log.freeze_epoch == resumed.log.freeze_epoch
        assert [r.train_losses for r in full.log.epochs] == [r.train_losses for r in resumed.log.epochs]

    def test_progress_settings_do_not_block_resume(self, resumable_config, tmp_path):
        _run(resumable_config, tmp_path)
        ckpt = load_checkpoint(tmp_path / "epoch_0002.safetensors")
        quiet = dataclasses.replace(
            resumable_config, train=dataclasses.replace(resumable_config.train, disable_progress_bar=False,
                                                        checkpoint_interval=0),
        )
        assert config_hash(quiet) == ckpt.meta["config_hash"]
        resume_trainer(ckpt, dataset_from_config(quiet.data), quiet)

    def test_changed_config_is_rejected(self, resumable_config, tmp_path):
        _run(resumable_config, tmp_path)
        ckpt = load_checkpoint(tmp_path / "epoch_0002.safetensors")
        other = dataclasses.replace(resumable_config, train=dataclasses.replace(resumable_config.train, lr=0.01))
        with pytest.raises(ConfigError):
            resume_trainer(ckpt, dataset_from_config(other.data), other)


class TestCheckpointFile:

    def test_final_state_round_trip(self, small_run_config, tmp_path):
        trainer = _run(small_run_config)
        path = tmp_path / "final.safetensors"
        save_checkpoint(path, trainer, small_run_config)
        ckpt = load_checkpoint(path)
        assert ckpt.epoch == small_run_config.train.epochs
        assert ckpt.frozen == trainer.pruner.frozen
        assert config_hash(ckpt.run_config) == config_hash(small_run_config)

        model = restore_model(ckpt)
        for (name, a), b in zip(trainer.model.parameters().items(), model.parameters().values()):
            np.testing.assert_array_equal(a.values, b.values, err_msg=name)
        for original, restored in zip(trainer.model.components, model.components):
            assert original.mask_frozen == restored.mask_frozen
            if original.mask_frozen:
                for name, mask in original.frozen_mask.items():
                    np.testing.assert_array_equal(mask, restored.frozen_mask[name])

    def test_missing_file(self, tmp_path):
        with pytest.raises(ArtifactIOError):
            load_checkpoint(tmp_path / "absent.safetensors")

    def test_not_a_checkpoint(self, tmp_path):
        path = tmp_path / "junk.safetensors"
        path.write_bytes(b"\x00" * 32)
        with pytest.raises(ArtifactIOError):
            load_checkpoint(path)
