"""
Embedding Service for the synthetic joint space
Maps latent sequences (audio side) and tag sets (text side) to unit vectors that
sit on a shared cone but are pushed apart by a fixed modality offset.
"""
import hashlib
import logging
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field

from .exceptions import ContractViolation
from .models import AUDIO_SIDE, MODALITIES, TEXT_SIDE, EmbeddingPair, EmbeddingSet, LatentSequence, REAL
from .synth_data import SynthConfig, TrackDataset, parse_tags, render_stem

logger = logging.getLogger(__name__)


class GapSpaceConfig(BaseModel):
    """Geometry of the synthetic two-modality embedding space"""

    model_config = ConfigDict(extra="forbid")

    embed_dim: int = Field(64, gt=1)
    offset_norm: float = Field(0.5, ge=0)
    cone_angle: float = Field(0.8, ge=0, le=np.pi / 2)
    noise_scale: float = Field(0.05, ge=0)
    feature_bins: int = Field(24, gt=0)
    seed: int = 7


def _digest_seed(payload: bytes) -> int:
    return int.from_bytes(hashlib.sha256(payload).digest()[:8], 'little')


def _unit(vector: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(vector)
    if norm == 0:
        raise ContractViolation("cannot normalise a zero vector")
    return vector / norm


class GapSpace:
    """Service for embedding synthetic latents and tag sets"""

    def __init__(self, config: GapSpaceConfig, synth: SynthConfig):
        """
        Build the fixed projection, cone axis and offset direction

        Args:
            config: Space geometry
            synth: Generator settings (channels, window, canonical renderings)
        """
        self.config = config
        self.synth = synth
        rng = np.random.default_rng(config.seed)
        feature_dim = synth.latent_channels * (config.feature_bins + 1)
        self.projection = rng.standard_normal((config.embed_dim, feature_dim)) / np.sqrt(feature_dim)
        self.axis = _unit(rng.standard_normal(config.embed_dim))
        offset = rng.standard_normal(config.embed_dim)
        self.offset_direction = _unit(offset - offset.dot(self.axis) * self.axis)

    @property
    def embedding_dim(self) -> int:
        return self.config.embed_dim

    def spectral_features(self, frames: np.ndarray) -> np.ndarray:
        """Per-channel mean plus normalised magnitude spectrum (DC excluded), centred"""
        length = frames.shape[0]
        spectrum = np.abs(np.fft.rfft(frames - frames.mean(axis=0), axis=0)) / length
        bins = np.zeros((self.config.feature_bins, frames.shape[1]))
        usable = min(self.config.feature_bins, spectrum.shape[0] - 1)
        bins[:usable] = spectrum[1:usable + 1]
        features = np.concatenate([frames.mean(axis=0, keepdims=True), bins], axis=0).T.reshape(-1)
        return features - features.mean()

    def _place(self, features: np.ndarray, sign: float, noise_seed: int) -> np.ndarray:
        direction = self.projection @ features
        direction = direction - direction.dot(self.axis) * self.axis
        norm = np.linalg.norm(direction)
        if norm == 0:
            direction = self.offset_direction
        else:
            direction = direction / norm
        angle = self.config.cone_angle
        base = np.cos(angle) * self.axis + np.sin(angle) * direction
        shifted = base + sign * 0.5 * self.config.offset_norm * self.offset_direction
        if self.config.noise_scale > 0:
            noise = np.random.default_rng(noise_seed).standard_normal(self.config.embed_dim)
            shifted = shifted + self.config.noise_scale * noise / np.sqrt(self.config.embed_dim)
        return _unit(shifted)

    def _frames(self, seq: Union[LatentSequence, torch.Tensor, np.ndarray]) -> np.ndarray:
        if isinstance(seq, LatentSequence):
            seq = seq.frames
        frames = seq.detach().cpu().double().numpy() if isinstance(seq, torch.Tensor) else np.asarray(seq, np.float64)
        if frames.ndim != 2 or frames.shape[1] != self.synth.latent_channels:
            raise ContractViolation(f"expected (length, {self.synth.latent_channels}) frames, got {frames.shape}")
        return frames

    def embed_audio(self, seq: Union[LatentSequence, torch.Tensor, np.ndarray]) -> np.ndarray:
        """Audio-side unit embedding of a latent sequence"""
        frames = self._frames(seq)
        seed = _digest_seed(b"audio" + frames.astype('<f4').tobytes())
        return self._place(self.spectral_features(frames), +1.0, seed)

    def embed_text(
        self,
        tags: Sequence[str],
        recording: Optional[Union[LatentSequence, torch.Tensor, np.ndarray]] = None,
    ) -> np.ndarray:
        """
        Text-side unit embedding of a tag set

        A tag set annotating a known recording is placed from that recording, so a
        matched pair differs only by the modality offset and noise. Without one the
        canonical rendering of the tags stands in.
        """
        genre_id, instrument_id = parse_tags(tags, self.synth)
        if recording is None:
            frames = render_stem(genre_id, instrument_id, self.synth, rng=None, length=self.synth.window)
            frames = frames.astype(np.float32).astype(np.float64)
            payload = b""
        else:
            frames = self._frames(recording)
            payload = frames.astype('<f4').tobytes()
        seed = _digest_seed(("text|" + "|".join(sorted(tags))).encode('utf-8') + payload)
        return self._place(self.spectral_features(frames), -1.0, seed)

    def embed_audio_batch(self, batch: torch.Tensor) -> np.ndarray:
        """(B, length, channels) latents -> (B, embed_dim)"""
        if batch.shape[0] == 0:
            return np.zeros((0, self.embedding_dim))
        return np.stack([self.embed_audio(frames) for frames in batch])

    def embed_text_batch(
        self,
        tag_sets: List[Tuple[str, ...]],
        recordings: Optional[torch.Tensor] = None,
    ) -> np.ndarray:
        if not tag_sets:
            return np.zeros((0, self.embedding_dim))
        if recordings is None:
            return np.stack([self.embed_text(tags) for tags in tag_sets])
        if len(recordings) != len(tag_sets):
            raise ContractViolation(f"{len(tag_sets)} tag sets but {len(recordings)} recordings")
        return np.stack([self.embed_text(tags, frames) for tags, frames in zip(tag_sets, recordings)])

    def expected_centroid_distance(self) -> float:
        """Centroid separation the offset produces on unit vectors"""
        o = self.config.offset_norm
        return o / np.sqrt(1.0 + o * o / 4.0)


def synth_embedding(
    item: Union[LatentSequence, torch.Tensor, Sequence[str]],
    modality: str,
    space: GapSpace,
) -> np.ndarray:
    """Embed a latent sequence (audio side) or a tag set (text side)"""
    if modality not in MODALITIES:
        raise ContractViolation(f"unknown modality tag: {modality}")
    if modality == AUDIO_SIDE:
        return space.embed_audio(item)
    return space.embed_text(item)


def paired_embeddings(
    dataset: TrackDataset,
    space: GapSpace,
    indices: Sequence[int],
    rng: np.random.Generator,
) -> List[EmbeddingPair]:
    """Matched (text, audio) embeddings for a random target window of each track set"""
    config = dataset.config
    pairs: List[EmbeddingPair] = []
    for index in indices:
        track_set = dataset.track_set(index)
        allowed = [
            i for i, inst in enumerate(track_set.instrument_ids)
            if config.instruments[inst] not in config.excluded_instruments
        ]
        stem_index = int(rng.choice(allowed))
        stem = track_set.stems[stem_index]
        start = int(rng.integers(0, stem.length - config.window + 1))
        tags = track_set.tags(stem_index, config)
        window = stem.window(start, config.window)
        pairs.append(EmbeddingPair(
            text_side=space.embed_text(tags, window),
            audio_side=space.embed_audio(window),
            tags=list(tags),
        ))
    return pairs


def pairs_to_sets(pairs: List[EmbeddingPair], embed_dim: int,
                  source: str = REAL) -> Tuple[EmbeddingSet, EmbeddingSet]:
    """Split matched pairs into (text-side, audio-side) sets"""
    if not pairs:
        empty = np.zeros((0, embed_dim))
        return EmbeddingSet(empty, TEXT_SIDE, source), EmbeddingSet(empty, AUDIO_SIDE, source)
    text = np.stack([p.text_side for p in pairs])
    audio = np.stack([p.audio_side for p in pairs])
    return EmbeddingSet(text, TEXT_SIDE, source), EmbeddingSet(audio, AUDIO_SIDE, source)


_space_instance: Optional[GapSpace] = None


def get_gap_space(config: GapSpaceConfig, synth: SynthConfig) -> GapSpace:
    """Get or create the process-wide space for this configuration"""
    global _space_instance
    if _space_instance is None or _space_instance.config != config or _space_instance.synth != synth:
        _space_instance = GapSpace(config, synth)
    return _space_instance
