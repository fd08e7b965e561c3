import numpy as np
import pytest
import torch

from app.config import (
    BRIDGE,
    C_DIT,
    DIT_DIFFUSION,
    ConsistencySettings,
    EvaluationSettings,
    ExperimentConfig,
    SamplingSettings,
    TrainSettings,
)
from app.consistency import ConsistencySchedule, multistep_sample
from app.edm import ode_sample
from app.embedding_service import GapSpace
from app.generation_service import bridge_gap_report
from app.metrics import frechet_distance
from app.models import EmbeddingSet
from app.numerics import TrainSchedule
from app.synth_data import gaussian_latents, mixture_latents
from app.training import Trainer, toy_source

from tests.factories import tiny_bridge, tiny_dit, tiny_experiment, tiny_synth

pytestmark = pytest.mark.slow

SEEDS = (0, 1, 2)
TOY_SHAPE = (2, 2)
POPULATION = 4000


def _schedule_settings(steps: int, batch_size: int, warmup: int = 100) -> TrainSettings:
    return TrainSettings(
        schedule=TrainSchedule(base_lr=1e-3, warmup_steps=warmup, total_steps=steps),
        diffusion_batch_size=batch_size,
        consistency_batch_size=batch_size,
        bridge_batch_size=batch_size,
        checkpoint_every=steps,
        log_every=500,
    )


def _toy_config(steps: int, channels: int = TOY_SHAPE[1], batch_size: int = 128) -> ExperimentConfig:
    return tiny_experiment(
        synth=tiny_synth(latent_channels=channels),
        dit=tiny_dit(model_dim=32, latent_channels=channels, context_channels=0, style_embed_dim=0),
        train=_schedule_settings(steps, batch_size),
        consistency=ConsistencySettings(schedule=ConsistencySchedule(total_steps=steps)),
    )


def _flat(latents: torch.Tensor) -> EmbeddingSet:
    return EmbeddingSet(latents.reshape(latents.shape[0], -1).double().numpy())


def _population_fd(samples: torch.Tensor, seed: int) -> float:
    reference = mixture_latents(torch.Generator().manual_seed(10_000 + seed), POPULATION, *TOY_SHAPE)
    return frechet_distance(_flat(samples), _flat(reference), "samples", "mixture")


@pytest.fixture(scope="module")
def mixture_runs(tmp_path_factory):
    """Diffusion and consistency models trained on the two-mode mixture, scored per seed"""
    source = toy_source("mixture", *TOY_SHAPE)
    diffusion_config = _toy_config(3000)
    consistency_config = _toy_config(5000)
    shape = (POPULATION,) + TOY_SHAPE
    runs = []
    for seed in SEEDS:
        out = tmp_path_factory.mktemp(f"mixture{seed}")
        dit = Trainer(diffusion_config, DIT_DIFFUSION, seed, out, source=source)
        dit.train()
        dit.model.eval()
        cdit = Trainer(consistency_config, C_DIT, seed, out, source=source)
        consistency_losses = cdit.train().losses
        cdit.model.eval()

        def draw(offset: int) -> torch.Generator:
            return torch.Generator().manual_seed(100 * seed + offset)

        runs.append({
            "ode_50": _population_fd(
                ode_sample(dit.model, None, shape, 50, 1.0, draw(1), diffusion_config.edm), seed),
            "cm_1": _population_fd(multistep_sample(cdit.model, None, shape, draw(2), 1), seed),
            "cm_5": _population_fd(multistep_sample(cdit.model, None, shape, draw(3), 5), seed),
            "early_loss": float(np.mean(consistency_losses[90:110])),
            "late_loss": float(np.mean(consistency_losses[-100:])),
        })
    return runs


def _median(runs, key: str) -> float:
    return float(np.median([run[key] for run in runs]))


def test_five_consistency_steps_beat_one(mixture_runs):
    assert _median(mixture_runs, "cm_5") < _median(mixture_runs, "cm_1")


def test_five_consistency_steps_stay_close_to_fifty_step_diffusion(mixture_runs):
    assert _median(mixture_runs, "cm_5") <= 3.0 * _median(mixture_runs, "ode_50")


def test_one_step_samples_stay_close_to_fifty_step_diffusion(mixture_runs):
    assert _median(mixture_runs, "cm_1") < 3.0 * _median(mixture_runs, "ode_50")


def test_consistency_loss_falls_tenfold_as_the_gap_shrinks(mixture_runs):
    for run in mixture_runs:
        assert run["late_loss"] * 10.0 <= run["early_loss"]


def test_trained_denoiser_matches_the_gaussian_posterior_mean(tmp_path):
    scale, length, channels = 1.0, 4, 4
    config = _toy_config(4000, channels=channels)
    trainer = Trainer(config, DIT_DIFFUSION, 0, tmp_path, source=toy_source("gaussian", length, channels, scale))
    trainer.train()
    trainer.model.eval()

    generator = torch.Generator().manual_seed(5)
    clean = gaussian_latents(generator, 2000, length, channels, scale)
    noise = torch.randn(clean.shape, generator=generator)
    for sigma in (0.2, 0.5, 1.0, 2.0):
        noisy = clean + sigma * noise
        expected = scale ** 2 / (scale ** 2 + sigma ** 2) * noisy
        with torch.no_grad():
            denoised = trainer.model(noisy, sigma, None)
        error = torch.linalg.norm(denoised - expected) / torch.linalg.norm(expected)
        assert error.item() < 0.05, f"sigma={sigma}"


def test_diffusion_loss_halves_on_the_synthetic_corpus(tmp_path):
    config = tiny_experiment(
        dit=tiny_dit(model_dim=32),
        train=_schedule_settings(2000, 32, warmup=200),
    )
    losses = Trainer(config, DIT_DIFFUSION, 0, tmp_path).train().losses
    assert len(losses) == 2000
    assert np.mean(losses[-100:]) < 0.5 * np.mean(losses[:100])


def test_trained_bridge_narrows_the_modality_gap(tmp_path):
    config = tiny_experiment(
        bridge=tiny_bridge(hidden_units=64),
        train=_schedule_settings(3000, 64),
        sampling=SamplingSettings(diffusion_steps=3, consistency_steps=2, bridge_steps=32),
        evaluation=EvaluationSettings(reference_size=200, batches=2, batch_size=200, nearest_k=5),
    )
    space = GapSpace(config.gap, config.synth)
    cosine_gains = []
    for seed in SEEDS:
        trainer = Trainer(config, BRIDGE, seed, tmp_path)
        trainer.train()
        trainer.model.eval()
        report = bridge_gap_report(trainer.model, config, space, seed=10 + seed)
        assert report.fad_after < report.fad_before
        assert report.coverage_after > report.coverage_before
        assert report.after.centroid_distance < report.before.centroid_distance
        cosine_gains.append(report.after.mean_pairwise_cosine - report.before.mean_pairwise_cosine)
    assert np.median(cosine_gains) >= 0.05
