"""
Ablation harness
Evaluates every (model variant x conditioning) cell plus the real-data upper
bound and the white-noise / shuffled-pairing lower bounds, and writes the
MetricReport as CSV and as an aligned text table.
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple, Union

import numpy as np

from .config import BRIDGE, C_DIT, DIT_DIFFUSION, VARIANTS, ExperimentConfig
from .embedding_service import GapSpace, get_gap_space
from .exceptions import ConfigMismatchError
from .generation_service import BRIDGE_CONDITIONINGS, VariantModels, generate
from .metrics import BASE_METRICS, CandidateBatch, MetricCell, MetricReport, evaluation_protocol
from .models import AUDIO_SIDE, GENERATED, REAL, EmbeddingSet
from .settings import get_settings
from .synth_data import VALIDATION, TrackDataset, make_training_pair, stack_pairs
from .training import checkpoint_path, load_model

logger = logging.getLogger(__name__)

REAL_ROW = "real"
NOISE_ROW = "noise"
SHUFFLED_ROW = "shuffled"
BOUND_CONDITIONING = "-"
PAIRING_ONLY = ("cs_ta",)


@dataclass
class RealSample:
    audio: np.ndarray         # target windows
    style_audio: np.ndarray   # another window of each target
    text: np.ndarray
    context: np.ndarray


def real_sample(config: ExperimentConfig, space: GapSpace, count: int, seed: int) -> RealSample:
    """Held-out targets with their style windows, tags and contexts, embedded"""
    synth = config.synth
    dataset = TrackDataset(synth)
    indices = dataset.split_indices(VALIDATION)
    rng = np.random.default_rng([seed, 2])
    pairs = []
    for _ in range(count):
        index = indices[int(rng.integers(len(indices)))]
        pairs.append(make_training_pair(dataset.track_set(index), rng, synth, space))
    batch = stack_pairs(pairs)
    return RealSample(
        audio=space.embed_audio_batch(batch.target),
        style_audio=batch.style.double().numpy(),
        text=space.embed_text_batch(batch.tags),
        context=space.embed_audio_batch(batch.context),
    )


def reference_set(config: ExperimentConfig, space: GapSpace, seed: int) -> EmbeddingSet:
    sample = real_sample(config, space, config.evaluation.reference_size, seed + 1_000_000)
    return EmbeddingSet(sample.audio, AUDIO_SIDE, REAL)


def bound_batches(config: ExperimentConfig, space: GapSpace, row: str, seed: int) -> Iterator[CandidateBatch]:
    """Candidate batches for the real / noise / shuffled rows"""
    evaluation = config.evaluation
    for b in range(evaluation.batches):
        sample = real_sample(config, space, evaluation.batch_size, seed + b)
        context = EmbeddingSet(sample.context, AUDIO_SIDE, REAL)
        if row == REAL_ROW:
            yield CandidateBatch(EmbeddingSet(sample.audio, AUDIO_SIDE, REAL),
                                 sample.style_audio, sample.text, context)
        elif row == NOISE_ROW:
            noise = np.random.default_rng([seed, b, 3]).standard_normal((evaluation.batch_size, space.embedding_dim))
            yield CandidateBatch(EmbeddingSet(noise, AUDIO_SIDE, GENERATED), sample.style_audio, sample.text, context)
        else:
            order = np.random.default_rng([seed, b, 4]).permutation(evaluation.batch_size)
            yield CandidateBatch(EmbeddingSet(sample.audio, AUDIO_SIDE, REAL), None,
                                 sample.text[order], EmbeddingSet(sample.context[order], AUDIO_SIDE, REAL))


def model_batches(models: VariantModels, config: ExperimentConfig, space: GapSpace,
                  variant: str, conditioning: str, seed: int) -> Iterator[CandidateBatch]:
    evaluation = config.evaluation
    for b in range(evaluation.batches):
        result = generate(models, config, space, variant, conditioning, evaluation.batch_size, seed * 1000 + b)
        yield CandidateBatch(result.audio, result.truth_audio, result.truth_text, result.context)


def _load_checked(path: Path, config: ExperimentConfig):
    model, _, meta = load_model(path)
    if meta.get("data_hash") != config.data_hash:
        raise ConfigMismatchError(
            f"{path} was trained on data hash {meta.get('data_hash')}, this run uses {config.data_hash}"
        )
    return model


def load_variant_models(config: ExperimentConfig, checkpoint_dir: Union[str, Path], seed: int) -> VariantModels:
    """Load whichever checkpoints exist; absent ones stay None"""
    models = VariantModels()
    for variant, attribute in ((DIT_DIFFUSION, "dit"), (C_DIT, "cdit"), (BRIDGE, "bridge")):
        path = checkpoint_path(checkpoint_dir, variant, seed)
        if path.exists():
            setattr(models, attribute, _load_checked(path, config))
        else:
            logger.warning(f"Missing checkpoint {path}; its cells will be marked absent")
    return models


def _available(models: VariantModels, variant: str) -> bool:
    if variant == C_DIT:
        return models.cdit is not None
    if variant == BRIDGE:
        return models.dit is not None and models.bridge is not None
    return models.dit is not None


def report_header(config: ExperimentConfig) -> Dict[str, str]:
    evaluation = config.evaluation
    scale = "full" if (evaluation.reference_size, evaluation.batch_size) == (5000, 1000) else "desk"
    return {
        "config_hash": config.config_hash,
        "data_hash": config.data_hash,
        "reference_size": str(evaluation.reference_size),
        "batches": str(evaluation.batches),
        "batch_size": str(evaluation.batch_size),
        "nearest_k": str(evaluation.nearest_k),
        "scale": scale,
    }


def cmd_ablate(
    config: ExperimentConfig,
    checkpoint_dir: Optional[Union[str, Path]] = None,
    seed: Optional[int] = None,
    variants: Tuple[str, ...] = VARIANTS,
    models: Optional[VariantModels] = None,
) -> MetricReport:
    """
    Fill the variant x conditioning grid, bounded by the real, noise and shuffled rows

    Checkpoints are looked up as <checkpoint_dir>/<variant>_seed<seed>.lcl; a
    missing one marks its cells absent. Checkpoints built from a different data
    configuration abort the run.
    """
    seed = config.seeds[0] if seed is None else seed
    checkpoint_dir = Path(checkpoint_dir or config.output_dir)
    space = get_gap_space(config.gap, config.synth)
    if models is None:
        models = load_variant_models(config, checkpoint_dir, seed)
    evaluation = config.evaluation
    n_jobs = get_settings().eval_workers
    reference = reference_set(config, space, seed)

    report = MetricReport(header=report_header(config))

    def run(cell_variant: str, conditioning: str, batches) -> MetricCell:
        return evaluation_protocol(
            batches, reference, evaluation.batches, evaluation.batch_size, evaluation.nearest_k,
            variant=cell_variant, conditioning=conditioning, n_jobs=n_jobs,
        )

    report.add(run(REAL_ROW, BOUND_CONDITIONING, bound_batches(config, space, REAL_ROW, seed)))
    for variant in variants:
        settings = [c for c in config.conditioning if variant != BRIDGE or c in BRIDGE_CONDITIONINGS]
        for conditioning in settings:
            if not _available(models, variant):
                report.add(MetricCell(variant=variant, conditioning=conditioning, status="absent"))
                continue
            report.add(run(variant, conditioning, model_batches(models, config, space, variant, conditioning, seed)))
            logger.info(f"Evaluated {variant} / {conditioning}")

    report.add(run(NOISE_ROW, BOUND_CONDITIONING, bound_batches(config, space, NOISE_ROW, seed)))
    shuffled = run(SHUFFLED_ROW, BOUND_CONDITIONING, bound_batches(config, space, SHUFFLED_ROW, seed))
    for name in BASE_METRICS:
        if name not in PAIRING_ONLY:
            shuffled.means[name] = shuffled.stds[name] = None
    report.add(shuffled)
    return report


def write_report(report: MetricReport, out_dir: Union[str, Path]) -> List[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "report.csv"
    table_path = out / "report.txt"
    csv_path.write_text(report.to_csv(), encoding='utf-8')
    table_path.write_text(report.to_table(), encoding='utf-8')
    logger.info(f"Wrote {csv_path} and {table_path}")
    return [csv_path, table_path]
