"""
Synthetic multi-track data
Seeded stems (sums of enveloped sinusoids projected to latent channels), track
sets with genre/instrument labels, context/target training pairs with the
random-segment style window, train/validation splits and toy latent tasks.
"""
import json
import logging
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import TYPE_CHECKING, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .exceptions import ContractViolation
from .models import LatentSequence

if TYPE_CHECKING:
    from .embedding_service import GapSpace

logger = logging.getLogger(__name__)

PROTOTYPE_SALT = 20_240_917
DEFAULT_INSTRUMENTS = ["drums", "bass", "guitar", "keys", "strings", "vocals"]
TRAIN = "train"
VALIDATION = "validation"


class SynthConfig(BaseModel):
    """Generator settings for the synthetic track sets"""

    model_config = ConfigDict(extra="forbid")

    seed: int = 0
    num_track_sets: int = Field(2048, gt=1)
    min_stems: int = Field(2, ge=2)
    max_stems: int = Field(6, ge=2)
    track_length: int = Field(128, gt=0)
    window: int = Field(64, gt=0)
    latent_channels: int = Field(8, gt=0)
    num_components: int = Field(3, gt=0)
    num_genres: int = Field(4, gt=0)
    instruments: List[str] = Field(default_factory=lambda: list(DEFAULT_INSTRUMENTS))
    excluded_instruments: List[str] = Field(default_factory=lambda: ["vocals"])
    amplitude: float = Field(1.0, gt=0)
    freq_jitter: float = Field(0.05, ge=0)
    validation_fraction: float = Field(0.1, gt=0, lt=1)
    random_gains: bool = False

    @model_validator(mode="after")
    def _check(self) -> 'SynthConfig':
        if self.min_stems > self.max_stems:
            raise ValueError("min_stems must be <= max_stems")
        if self.max_stems > len(self.instruments):
            raise ValueError("max_stems cannot exceed the number of instruments")
        if self.window > self.track_length:
            raise ValueError("window must fit inside track_length")
        if not set(self.instruments) - set(self.excluded_instruments):
            raise ValueError("every instrument is excluded")
        return self

    @property
    def num_validation(self) -> int:
        return max(1, int(round(self.num_track_sets * self.validation_fraction)))

    @property
    def num_train(self) -> int:
        return self.num_track_sets - self.num_validation


@dataclass
class SynthTrackSet:
    """Stems of one synthetic multi-track recording"""
    seed: int
    stems: List[LatentSequence]
    genre_id: int
    instrument_ids: List[int]

    def tags(self, stem_index: int, config: SynthConfig) -> Tuple[str, ...]:
        return stem_tags(self.genre_id, self.instrument_ids[stem_index], config)


def stem_tags(genre_id: int, instrument_id: int, config: SynthConfig) -> Tuple[str, ...]:
    return (f"genre:{genre_id}", f"instrument:{config.instruments[instrument_id]}")


def parse_tags(tags: Sequence[str], config: SynthConfig) -> Tuple[int, int]:
    """(genre_id, instrument_id) from a tag set"""
    values: Dict[str, str] = {}
    for tag in tags:
        key, _, value = tag.partition(":")
        values[key] = value
    try:
        genre_id = int(values["genre"])
        instrument_id = config.instruments.index(values["instrument"])
    except (KeyError, ValueError) as e:
        raise ContractViolation(f"unrecognised tag set {list(tags)}") from e
    if not 0 <= genre_id < config.num_genres:
        raise ContractViolation(f"genre {genre_id} out of range")
    return genre_id, instrument_id


@dataclass
class StemPrototype:
    """Per (genre, instrument) sound: frequencies, weights, envelopes, channel mix"""
    frequencies: np.ndarray   # cycles per window, (components,)
    weights: np.ndarray       # (components,), sums to 1
    envelope_rates: np.ndarray
    projection: np.ndarray    # (components, channels), entries in [-1, 1]


@lru_cache(maxsize=256)
def _prototype(genre_id: int, instrument_id: int, components: int, channels: int) -> StemPrototype:
    rng = np.random.default_rng([PROTOTYPE_SALT, genre_id, instrument_id])
    low, high = 1.0 + 2.0 * instrument_id, 3.0 + 2.0 * instrument_id
    return StemPrototype(
        frequencies=rng.uniform(low, high, components) * (1.0 + 0.15 * genre_id),
        weights=rng.dirichlet(np.ones(components)),
        envelope_rates=rng.uniform(0.25, 1.0, components),
        projection=rng.uniform(-1.0, 1.0, (components, channels)),
    )


def render_stem(
    genre_id: int,
    instrument_id: int,
    config: SynthConfig,
    rng: Optional[np.random.Generator] = None,
    length: Optional[int] = None,
) -> np.ndarray:
    """
    Render one stem as a (length x channels) float64 array

    With rng=None the canonical rendering is produced (zero phases, no jitter);
    otherwise phases and frequency jitter are drawn from rng. Values are bounded by
    config.amplitude.
    """
    length = length or config.track_length
    proto = _prototype(genre_id, instrument_id, config.num_components, config.latent_channels)
    k = config.num_components
    if rng is None:
        phases = np.zeros(k)
        envelope_phases = np.full(k, np.pi / 2)
        jitter = np.ones(k)
    else:
        phases = rng.uniform(0.0, 2 * np.pi, k)
        envelope_phases = rng.uniform(0.0, 2 * np.pi, k)
        jitter = np.clip(1.0 + config.freq_jitter * rng.standard_normal(k), 0.5, 1.5)

    t = np.arange(length)[:, None] / config.window
    carrier = np.sin(2 * np.pi * proto.frequencies * jitter * t + phases)
    envelope = 0.5 * (1.0 + np.sin(2 * np.pi * proto.envelope_rates * t + envelope_phases))
    components = proto.weights * envelope * carrier          # (length, k)
    return config.amplitude * components @ proto.projection  # |value| <= amplitude


def gen_track_set(seed: int, num_stems: int, length: int, config: SynthConfig) -> SynthTrackSet:
    """Deterministic track set from (seed, config)"""
    if num_stems < 2:
        raise ContractViolation(f"a track set needs at least 2 stems, got {num_stems}")
    if num_stems > len(config.instruments):
        raise ContractViolation(f"{num_stems} stems but only {len(config.instruments)} instruments")
    rng = np.random.default_rng(seed)
    genre_id = int(rng.integers(config.num_genres))
    allowed = [i for i, name in enumerate(config.instruments) if name not in config.excluded_instruments]
    first = int(rng.choice(allowed))
    rest = [i for i in range(len(config.instruments)) if i != first]
    instrument_ids = [first] + [int(i) for i in rng.choice(rest, size=num_stems - 1, replace=False)]
    stems = [
        LatentSequence(torch.from_numpy(render_stem(genre_id, inst, config, rng, length).astype(np.float32)))
        for inst in instrument_ids
    ]
    return SynthTrackSet(seed=seed, stems=stems, genre_id=genre_id, instrument_ids=instrument_ids)


def track_seed(config: SynthConfig, index: int) -> int:
    return int(np.random.SeedSequence([config.seed, index]).generate_state(1)[0])


class TrackDataset:
    """Index-addressed track sets with a seed-range train/validation split"""

    def __init__(self, config: SynthConfig):
        self.config = config
        self._cache: Dict[int, SynthTrackSet] = {}

    def __len__(self) -> int:
        return self.config.num_track_sets

    def split_indices(self, split: str) -> range:
        if split == TRAIN:
            return range(0, self.config.num_train)
        if split == VALIDATION:
            return range(self.config.num_train, self.config.num_track_sets)
        raise ContractViolation(f"unknown split {split!r}")

    def track_set(self, index: int) -> SynthTrackSet:
        if not 0 <= index < self.config.num_track_sets:
            raise ContractViolation(f"track set index {index} out of range")
        if index not in self._cache:
            seed = track_seed(self.config, index)
            rng = np.random.default_rng(seed)
            num_stems = int(rng.integers(self.config.min_stems, self.config.max_stems + 1))
            self._cache[index] = gen_track_set(seed, num_stems, self.config.track_length, self.config)
        return self._cache[index]


@dataclass
class TrainingPair:
    context: LatentSequence
    target: LatentSequence
    style_embedding: Optional[np.ndarray]
    target_index: int
    context_indices: List[int]
    train_start: int
    style_start: int
    tags: Tuple[str, ...] = field(default_factory=tuple)


def _style_start(rng: np.random.Generator, length: int, window: int, train_start: int) -> int:
    starts = np.arange(length - window + 1)
    disjoint = starts[np.abs(starts - train_start) >= window]
    if disjoint.size:
        return int(rng.choice(disjoint))
    different = starts[starts != train_start]
    if different.size:
        return int(rng.choice(different))
    return train_start


def make_training_pair(
    track_set: SynthTrackSet,
    rng: np.random.Generator,
    config: SynthConfig,
    space: Optional['GapSpace'] = None,
) -> TrainingPair:
    """
    Context/target pair with a leakage-free style window

    The target is a random non-excluded stem; the context mixes a random nonempty
    subset of the others over the same window. The style embedding is taken from a
    different window of the target (a disjoint one when the stem is long enough).
    """
    num_stems = len(track_set.stems)
    if num_stems < 2:
        raise ContractViolation("training pairs need at least 2 stems")
    candidates = [
        i for i, inst in enumerate(track_set.instrument_ids)
        if config.instruments[inst] not in config.excluded_instruments
    ]
    target_index = int(rng.choice(candidates))
    others = [i for i in range(num_stems) if i != target_index]
    subset_size = int(rng.integers(1, len(others) + 1))
    context_indices = sorted(int(i) for i in rng.choice(others, size=subset_size, replace=False))

    target_stem = track_set.stems[target_index]
    window = config.window
    train_start = int(rng.integers(0, target_stem.length - window + 1))
    style_start = _style_start(rng, target_stem.length, window, train_start)

    mix = torch.stack([track_set.stems[i].frames for i in context_indices])
    if config.random_gains:
        gains = torch.from_numpy(rng.uniform(0.5, 1.5, len(context_indices)).astype(np.float32))
        context = (gains[:, None, None] * mix).sum(dim=0) / gains.sum()
    else:
        context = mix.mean(dim=0)

    style_embedding = None
    if space is not None:
        style_embedding = space.embed_audio(target_stem.window(style_start, window))
    return TrainingPair(
        context=LatentSequence(context[train_start:train_start + window]),
        target=target_stem.window(train_start, window),
        style_embedding=style_embedding,
        target_index=target_index,
        context_indices=context_indices,
        train_start=train_start,
        style_start=style_start,
        tags=track_set.tags(target_index, config),
    )


@dataclass
class PairBatch:
    """Stacked training pairs, batch first"""
    target: torch.Tensor            # (B, window, channels)
    context: torch.Tensor           # (B, window, channels)
    style: Optional[torch.Tensor]   # (B, embed_dim)
    tags: List[Tuple[str, ...]]


class PairSampler:
    """Draws batches of training pairs from one split"""

    def __init__(self, dataset: TrackDataset, split: str, seed: int, space: Optional['GapSpace'] = None):
        self.dataset = dataset
        self.indices = dataset.split_indices(split)
        self.rng = np.random.default_rng(seed)
        self.space = space

    def sample(self, batch_size: int) -> PairBatch:
        pairs = []
        for _ in range(batch_size):
            index = self.indices[int(self.rng.integers(len(self.indices)))]
            pairs.append(make_training_pair(self.dataset.track_set(index), self.rng, self.dataset.config, self.space))
        return stack_pairs(pairs)


def stack_pairs(pairs: List[TrainingPair]) -> PairBatch:
    style = None
    if pairs and pairs[0].style_embedding is not None:
        style = torch.from_numpy(np.stack([p.style_embedding for p in pairs]).astype(np.float32))
    return PairBatch(
        target=LatentSequence.stack([p.target for p in pairs]),
        context=LatentSequence.stack([p.context for p in pairs]),
        style=style,
        tags=[p.tags for p in pairs],
    )


def gaussian_latents(generator: torch.Generator, count: int, length: int, channels: int,
                     scale: float = 1.0, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Analytic N(0, scale^2 I) latents"""
    return scale * torch.randn((count, length, channels), generator=generator, dtype=dtype)


def mixture_latents(generator: torch.Generator, count: int, length: int, channels: int = 2,
                    separation: float = 0.8, spread: float = 0.6,
                    dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Two-mode Gaussian mixture with unit variance per coordinate (separation^2 + spread^2 = 1)"""
    modes = torch.randint(0, 2, (count, 1, 1), generator=generator).to(dtype) * 2 - 1
    return separation * modes + spread * torch.randn((count, length, channels), generator=generator, dtype=dtype)


def write_manifest(path: Union[str, Path], config: SynthConfig, data_hash: str, counts: Dict[str, int]) -> Path:
    """JSON manifest listing seed, data hash and split counts"""
    manifest = {
        "seed": config.seed,
        "data_hash": data_hash,
        "counts": counts,
        "synth": config.model_dump(),
    }
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding='utf-8')
    logger.info(f"Wrote dataset manifest to {out}")
    return out
