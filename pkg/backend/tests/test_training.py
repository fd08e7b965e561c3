import math

import pytest
import torch

from app.checkpoint_store import load_checkpoint
from app.config import BRIDGE, C_DIT, DIT_DIFFUSION
from app.exceptions import CorruptionError, TrainingDivergenceError
from app.training import Trainer, checkpoint_path, load_model, loss_log_path, state_path, step_seed, toy_source


@pytest.mark.parametrize("variant", [DIT_DIFFUSION, C_DIT, BRIDGE])
def test_short_run_writes_checkpoint_log_and_metadata(tiny_config, tmp_path, variant):
    result = Trainer(tiny_config, variant, 0, tmp_path).train(steps=6)
    assert result.steps == 6
    assert len(result.losses) == 6
    assert all(math.isfinite(loss) for loss in result.losses)

    assert result.checkpoint == checkpoint_path(tmp_path, variant, 0)
    assert state_path(result.checkpoint).exists()
    meta = load_checkpoint(result.checkpoint).meta
    assert meta["variant"] == variant
    assert meta["step"] == 6
    assert meta["config_hash"] == tiny_config.config_hash
    assert meta["data_hash"] == tiny_config.data_hash

    log = loss_log_path(result.checkpoint).read_text().splitlines()
    assert log[0] == f"# config_hash: {tiny_config.config_hash}"
    assert log[1] == "step,loss,lr"
    assert len(log) == 2 + 6


def test_same_seed_gives_identical_checkpoints(tiny_config, tmp_path):
    first = Trainer(tiny_config, DIT_DIFFUSION, 5, tmp_path / "a").train(steps=4).checkpoint
    second = Trainer(tiny_config, DIT_DIFFUSION, 5, tmp_path / "b").train(steps=4).checkpoint
    assert first.read_bytes() == second.read_bytes()


@pytest.mark.parametrize("variant", [DIT_DIFFUSION, C_DIT])
def test_resume_continues_the_same_trajectory(tiny_config, tmp_path, variant):
    straight = Trainer(tiny_config, variant, 1, tmp_path / "straight").train(steps=6).checkpoint

    Trainer(tiny_config, variant, 1, tmp_path / "resumed").train(steps=3)
    result = Trainer(tiny_config, variant, 1, tmp_path / "resumed").train(steps=6, resume=True)
    assert result.resumed_from == 3
    assert len(result.losses) == 3
    assert result.checkpoint.read_bytes() == straight.read_bytes()
    assert len(loss_log_path(result.checkpoint).read_text().splitlines()) == 2 + 6


def test_divergence_reports_step_and_last_checkpoint(tiny_config, tmp_path):
    trainer = Trainer(tiny_config, DIT_DIFFUSION, 0, tmp_path)
    trainer.train(steps=2)
    with torch.no_grad():
        trainer.model.network.blocks[0].mlp[0].weight.fill_(math.nan)
    with pytest.raises(TrainingDivergenceError) as excinfo:
        trainer.train(steps=4)
    assert excinfo.value.step == 2
    assert excinfo.value.last_checkpoint == str(checkpoint_path(tmp_path, DIT_DIFFUSION, 0))


def test_custom_batch_source_is_used(tiny_config, tmp_path):
    seen = []

    def source(batch_size, seed):
        seen.append(seed)
        generator = torch.Generator().manual_seed(seed)
        return torch.randn(batch_size, 16, 4, generator=generator), None

    Trainer(tiny_config, DIT_DIFFUSION, 2, tmp_path, source=source).train(steps=3)
    assert seen == [step_seed(2, step) for step in range(3)]


def test_load_model_restores_weights_and_needs_metadata(tiny_config, tmp_path):
    trainer = Trainer(tiny_config, BRIDGE, 0, tmp_path)
    trainer.train(steps=2)
    model, config, meta = load_model(trainer.checkpoint)
    assert config == tiny_config
    assert meta["variant"] == BRIDGE
    for (name, loaded), original in zip(model.named_parameters(), trainer.model.parameters()):
        assert torch.equal(loaded, original), name

    (tmp_path / f"{trainer.checkpoint.name}.meta.json").unlink()
    with pytest.raises(CorruptionError):
        load_model(trainer.checkpoint)


def test_toy_sources_are_seeded_and_unconditional():
    mixture = toy_source("mixture", 2, 2)
    clean, cond = mixture(500, 3)
    assert clean.shape == (500, 2, 2) and cond is None
    assert torch.equal(clean, mixture(500, 3)[0])
    assert clean.var().item() == pytest.approx(1.0, abs=0.2)

    gaussian, _ = toy_source("gaussian", 4, 2, scale=0.5)(800, 0)
    assert gaussian.std().item() == pytest.approx(0.5, abs=0.05)
    with pytest.raises(ValueError):
        toy_source("spiral", 2, 2)


def test_trainer_accepts_a_toy_source(tiny_config, tmp_path):
    result = Trainer(tiny_config, C_DIT, 0, tmp_path, source=toy_source("mixture", 16, 4)).train(steps=3)
    assert len(result.losses) == 3
    assert all(math.isfinite(loss) for loss in result.losses)
