"""
Generation Service
Builds conditioning from held-out track sets for each conditioning setting, runs
the variant's sampler and embeds the results for evaluation.
"""
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch

from .config import BRIDGE, C_DIT, DIT_DIFFUSION, ExperimentConfig
from .consistency import ConsistencyModel, multistep_sample
from .edm import EDMDenoiser, ode_sample
from .embedding_service import GapSpace, paired_embeddings, pairs_to_sets
from .exceptions import UsageError
from .gap_bridge import GapStats, bridge_sample, modality_gap_stats
from .metrics import density_coverage, frechet_distance
from .models import AUDIO_SIDE, GENERATED, REAL, ConditioningBundle, EmbeddingSet
from .synth_data import VALIDATION, TrackDataset, make_training_pair, stack_pairs

logger = logging.getLogger(__name__)

CHUNK_SIZE = 64
BRIDGE_CONDITIONINGS = ("style+ctx", "text-style+ctx", "style", "text-style")


@dataclass
class VariantModels:
    """Trained models available to the sampler"""
    dit: Optional[EDMDenoiser] = None
    cdit: Optional[ConsistencyModel] = None
    bridge: Optional[EDMDenoiser] = None


@dataclass
class GenerationResult:
    latents: torch.Tensor            # (count, window, channels)
    audio: EmbeddingSet              # generated audio-side embeddings
    truth_audio: np.ndarray          # embeddings of the held-out targets
    truth_text: np.ndarray           # text-side embeddings of the targets' tags
    context: Optional[EmbeddingSet]  # context embeddings (None when no context is used)
    evaluations: int = 0             # sampler network evaluations
    chunks: int = 0


def uses_context(conditioning: str) -> bool:
    return conditioning.endswith("ctx")


def style_source(conditioning: str) -> Optional[str]:
    """'audio', 'text' or None for the style slot"""
    if conditioning.startswith("text-style"):
        return "text"
    if conditioning.startswith("style"):
        return "audio"
    return None


def check_supported(config: ExperimentConfig, variant: str, conditioning: str, models: VariantModels) -> None:
    """Raise UsageError when the variant cannot serve the conditioning setting"""
    if variant == BRIDGE and conditioning not in BRIDGE_CONDITIONINGS:
        raise UsageError(f"the bridge variant only serves {', '.join(BRIDGE_CONDITIONINGS)}")
    if uses_context(conditioning) and config.dit.context_channels == 0:
        raise UsageError(f"{conditioning} needs context tokens but the DiT has context_channels=0")
    if style_source(conditioning) and config.dit.style_embed_dim == 0:
        raise UsageError(f"{conditioning} needs a style embedding but the DiT has style_embed_dim=0")
    needed = {DIT_DIFFUSION: models.dit, C_DIT: models.cdit, BRIDGE: models.dit}
    if needed.get(variant) is None:
        raise UsageError(f"no trained model available for variant {variant}")
    if variant == BRIDGE and models.bridge is None:
        raise UsageError("bridge variant needs a trained bridge checkpoint")


def _conditioning(
    variant: str,
    conditioning: str,
    context: torch.Tensor,
    audio_style: torch.Tensor,
    text_style: torch.Tensor,
    models: VariantModels,
    config: ExperimentConfig,
    generator: torch.Generator,
) -> Optional[ConditioningBundle]:
    if conditioning == "uncond":
        return None
    style = None
    source = style_source(conditioning)
    if variant == BRIDGE:
        prompts = text_style if source == "text" else None
        style = bridge_sample(
            models.bridge, prompts, audio_style.shape[0], config.sampling.bridge_steps, generator,
            config.sampling.bridge_guidance_weight,
        ).to(torch.float32)
    elif source == "text":
        style = text_style
    elif source == "audio":
        style = audio_style
    return ConditioningBundle(context=context if uses_context(conditioning) else None, style_embedding=style)


def generate(
    models: VariantModels,
    config: ExperimentConfig,
    space: GapSpace,
    variant: str,
    conditioning: str,
    count: int,
    seed: int,
    num_steps: Optional[int] = None,
) -> GenerationResult:
    """
    Sample `count` accompaniments for held-out contexts under one conditioning setting

    Args:
        models: Trained models (the bridge variant uses models.dit plus models.bridge)
        config: Experiment config
        space: Embedding space for style vectors and evaluation embeddings
        variant: dit-diffusion, c-dit or bridge
        conditioning: One of the six conditioning settings
        count: Number of samples
        seed: Seed for pair selection and sampler noise
        num_steps: Sampler steps (defaults: 50 Heun / 5 consistency)

    Returns:
        GenerationResult with latents, embeddings and the evaluation count
    """
    check_supported(config, variant, conditioning, models)
    synth = config.synth
    shape_tail = (synth.window, synth.latent_channels)
    if count == 0:
        empty = np.zeros((0, space.embedding_dim))
        return GenerationResult(
            latents=torch.zeros((0,) + shape_tail),
            audio=EmbeddingSet(empty, AUDIO_SIDE, GENERATED),
            truth_audio=empty, truth_text=empty, context=None,
        )

    dataset = TrackDataset(synth)
    indices = dataset.split_indices(VALIDATION)
    rng = np.random.default_rng([seed, 1])
    pairs = []
    for _ in range(count):
        index = indices[int(rng.integers(len(indices)))]
        pairs.append(make_training_pair(dataset.track_set(index), rng, synth, space))
    batch = stack_pairs(pairs)
    truth_audio = space.embed_audio_batch(batch.target)
    truth_text = space.embed_text_batch(batch.tags)

    sampler_model = models.cdit if variant == C_DIT else models.dit
    before = sampler_model.evaluations
    outputs: List[torch.Tensor] = []
    chunks = 0
    for start in range(0, count, CHUNK_SIZE):
        stop = min(count, start + CHUNK_SIZE)
        generator = torch.Generator().manual_seed(int(np.random.SeedSequence([seed, start]).generate_state(1)[0]))
        cond = _conditioning(
            variant, conditioning,
            batch.context[start:stop],
            batch.style[start:stop],
            torch.from_numpy(truth_text[start:stop].astype(np.float32)),
            models, config, generator,
        )
        shape = (stop - start,) + shape_tail
        if variant == C_DIT:
            steps = num_steps or config.sampling.consistency_steps
            outputs.append(multistep_sample(sampler_model, cond, shape, generator, steps))
        else:
            steps = num_steps or config.sampling.diffusion_steps
            outputs.append(ode_sample(
                sampler_model, cond, shape, steps, config.sampling.guidance_weight, generator, config.edm,
            ))
        chunks += 1

    latents = torch.cat(outputs).to(torch.float32)
    context = None
    if uses_context(conditioning):
        context = EmbeddingSet(space.embed_audio_batch(batch.context), AUDIO_SIDE, REAL)
    result = GenerationResult(
        latents=latents,
        audio=EmbeddingSet(space.embed_audio_batch(latents), AUDIO_SIDE, GENERATED),
        truth_audio=truth_audio,
        truth_text=truth_text,
        context=context,
        evaluations=sampler_model.evaluations - before,
        chunks=chunks,
    )
    logger.info(
        f"Generated {count} samples ({variant}, {conditioning}) with "
        f"{result.evaluations} network evaluations over {chunks} chunk(s)"
    )
    return result


@dataclass
class BridgeGapReport:
    """Text vs audio and bridged vs audio, on held-out matched pairs"""
    pairs: int
    before: GapStats
    after: GapStats
    fad_before: float
    fad_after: float
    coverage_before: float
    coverage_after: float

    def to_dict(self) -> Dict[str, float]:
        return {
            "pairs": self.pairs,
            "centroid_distance_before": self.before.centroid_distance,
            "centroid_distance_after": self.after.centroid_distance,
            "matched_cosine_before": self.before.mean_pairwise_cosine,
            "matched_cosine_after": self.after.mean_pairwise_cosine,
            "fad_before": self.fad_before,
            "fad_after": self.fad_after,
            "coverage_before": self.coverage_before,
            "coverage_after": self.coverage_after,
        }


def bridge_validation_pairs(config: ExperimentConfig, space: GapSpace, count: int,
                            seed: int) -> Tuple[EmbeddingSet, EmbeddingSet]:
    """(text-side, audio-side) matched sets drawn from the validation split"""
    dataset = TrackDataset(config.synth)
    indices = dataset.split_indices(VALIDATION)
    rng = np.random.default_rng([seed, 5])
    chosen = [indices[int(i)] for i in rng.integers(len(indices), size=count)]
    return pairs_to_sets(paired_embeddings(dataset, space, chosen, rng), space.embedding_dim)


def bridge_embeddings(bridge: EDMDenoiser, config: ExperimentConfig, text: EmbeddingSet, seed: int) -> EmbeddingSet:
    generator = torch.Generator().manual_seed(seed)
    prompts = torch.from_numpy(text.vectors.astype(np.float32))
    bridged = bridge_sample(
        bridge, prompts, len(text), config.sampling.bridge_steps, generator, config.sampling.bridge_guidance_weight,
    )
    return EmbeddingSet(bridged.double().numpy(), AUDIO_SIDE, GENERATED)


def bridge_gap_report(bridge: EDMDenoiser, config: ExperimentConfig, space: GapSpace,
                      seed: int, count: Optional[int] = None) -> BridgeGapReport:
    """Measure how far the bridge closes the gap on held-out pairs"""
    count = count or config.evaluation.batch_size
    text, audio = bridge_validation_pairs(config, space, count, seed)
    # independent audio-side reference draws
    _, reference = bridge_validation_pairs(config, space, config.evaluation.reference_size, seed + 1)
    bridged = bridge_embeddings(bridge, config, text, seed)
    k = config.evaluation.nearest_k
    _, coverage_before = density_coverage(reference, text, k)
    _, coverage_after = density_coverage(reference, bridged, k)
    report = BridgeGapReport(
        pairs=count,
        before=modality_gap_stats(text, audio),
        after=modality_gap_stats(bridged, audio),
        fad_before=frechet_distance(text, reference, "text", "reference"),
        fad_after=frechet_distance(bridged, reference, "bridged", "reference"),
        coverage_before=coverage_before,
        coverage_after=coverage_after,
    )
    logger.info(
        f"Bridge gap: centroid distance {report.before.centroid_distance:.4f} -> "
        f"{report.after.centroid_distance:.4f}, matched cosine "
        f"{report.before.mean_pairwise_cosine:.4f} -> {report.after.mean_pairwise_cosine:.4f}"
    )
    return report
