import numpy as np
import pytest
import torch

from app.config import BRIDGE, C_DIT, DIT_DIFFUSION, SamplingSettings
from app.exceptions import UsageError
from app.generation_service import VariantModels, bridge_gap_report, generate, style_source, uses_context
from app.training import build_model

from tests.factories import tiny_experiment


@pytest.fixture
def models(tiny_config) -> VariantModels:
    torch.manual_seed(0)
    return VariantModels(
        dit=build_model(tiny_config, DIT_DIFFUSION),
        cdit=build_model(tiny_config, C_DIT),
        bridge=build_model(tiny_config, BRIDGE),
    )


def test_conditioning_names():
    assert uses_context("style+ctx") and uses_context("ctx")
    assert not uses_context("text-style")
    assert style_source("text-style+ctx") == "text"
    assert style_source("style") == "audio"
    assert style_source("uncond") is None


def test_consistency_variant_uses_five_evaluations_per_chunk(models, space):
    config = tiny_experiment(sampling=SamplingSettings(consistency_steps=5))
    result = generate(models, config, space, C_DIT, "style+ctx", 3, seed=0)
    assert result.evaluations == 5
    assert result.chunks == 1
    assert result.latents.shape == (3, 16, 4)
    assert result.audio.vectors.shape == (3, 16)
    assert result.context is not None


def test_diffusion_variant_uses_heun_evaluations_with_guidance(models, space, tiny_config):
    result = generate(models, tiny_config, space, DIT_DIFFUSION, "text-style+ctx", 3, seed=0, num_steps=50)
    assert result.evaluations == 99
    assert result.truth_text.shape == (3, 16)


def test_bridge_variant_samples_style_from_text(models, space, tiny_config):
    result = generate(models, tiny_config, space, BRIDGE, "text-style", 4, seed=1)
    assert result.latents.shape == (4, 16, 4)
    assert result.context is None
    assert models.bridge.evaluations == 2 * tiny_config.sampling.bridge_steps - 1


def test_generation_is_deterministic(models, space, tiny_config):
    first = generate(models, tiny_config, space, DIT_DIFFUSION, "style", 3, seed=4)
    second = generate(models, tiny_config, space, DIT_DIFFUSION, "style", 3, seed=4)
    assert torch.equal(first.latents, second.latents)
    np.testing.assert_array_equal(first.audio.vectors, second.audio.vectors)


def test_zero_count_returns_empty_result(models, space, tiny_config):
    result = generate(models, tiny_config, space, C_DIT, "uncond", 0, seed=0)
    assert result.latents.shape == (0, 16, 4)
    assert len(result.audio) == 0
    assert result.evaluations == 0


def test_unsupported_requests_raise_usage_errors(models, space, tiny_config):
    with pytest.raises(UsageError):
        generate(models, tiny_config, space, BRIDGE, "ctx", 2, seed=0)
    with pytest.raises(UsageError):
        generate(VariantModels(), tiny_config, space, DIT_DIFFUSION, "uncond", 2, seed=0)
    with pytest.raises(UsageError):
        generate(VariantModels(dit=models.dit), tiny_config, space, BRIDGE, "text-style", 2, seed=0)


def test_bridge_gap_report_fields(models, space, tiny_config):
    report = bridge_gap_report(models.bridge, tiny_config, space, seed=0)
    data = report.to_dict()
    assert data["pairs"] == tiny_config.evaluation.batch_size
    assert 0.0 <= data["coverage_before"] <= 1.0
    assert data["fad_before"] >= 0.0
    assert report.before.centroid_distance > 0.0
