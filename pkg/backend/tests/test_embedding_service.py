import numpy as np
import pytest
import torch

from app.embedding_service import (
    GapSpace,
    GapSpaceConfig,
    get_gap_space,
    paired_embeddings,
    pairs_to_sets,
    synth_embedding,
)
from app.exceptions import ContractViolation
from app.gap_bridge import modality_gap_stats
from app.models import AUDIO_SIDE, TEXT_SIDE
from app.synth_data import SynthConfig, TrackDataset, render_stem, stem_tags

from tests.factories import tiny_synth


def _canonical(space: GapSpace, genre: int, instrument: int) -> torch.Tensor:
    frames = render_stem(genre, instrument, space.synth, None, space.synth.window)
    return torch.from_numpy(frames.astype(np.float32))


def _allowed_instruments(config: SynthConfig):
    return [i for i, name in enumerate(config.instruments) if name not in config.excluded_instruments]


def test_embeddings_are_deterministic_unit_vectors(space):
    frames = torch.randn(16, 4, generator=torch.Generator().manual_seed(0))
    first = synth_embedding(frames, AUDIO_SIDE, space)
    assert np.array_equal(first, synth_embedding(frames, AUDIO_SIDE, space))
    assert first.shape == (16,)
    assert np.linalg.norm(first) == pytest.approx(1.0)

    tags = stem_tags(1, 0, space.synth)
    text = synth_embedding(tags, TEXT_SIDE, space)
    assert np.array_equal(text, synth_embedding(tags, TEXT_SIDE, space))
    assert np.linalg.norm(text) == pytest.approx(1.0)


def test_unknown_modality_is_rejected(space):
    with pytest.raises(ContractViolation):
        synth_embedding(torch.zeros(16, 4), "video", space)


def test_wrong_channel_count_is_rejected(space):
    with pytest.raises(ContractViolation):
        space.embed_audio(torch.zeros(16, 3))


def test_zero_offset_and_noise_make_the_modalities_coincide():
    synth = tiny_synth()
    space = GapSpace(GapSpaceConfig(embed_dim=16, feature_bins=8, offset_norm=0.0, noise_scale=0.0), synth)
    for genre in range(synth.num_genres):
        for instrument in _allowed_instruments(synth):
            audio = space.embed_audio(_canonical(space, genre, instrument))
            text = space.embed_text(stem_tags(genre, instrument, synth))
            np.testing.assert_array_equal(audio, text)


def test_canonical_pairs_are_separated_by_the_offset():
    synth = SynthConfig()
    space = GapSpace(GapSpaceConfig(), synth)
    audio, text = [], []
    for genre in range(synth.num_genres):
        for instrument in _allowed_instruments(synth):
            audio.append(space.embed_audio(_canonical(space, genre, instrument)))
            text.append(space.embed_text(stem_tags(genre, instrument, synth)))
    distance = np.linalg.norm(np.mean(audio, axis=0) - np.mean(text, axis=0))
    assert 0.25 <= distance <= 0.5
    assert space.expected_centroid_distance() == pytest.approx(0.5 / np.sqrt(1.0625))


def test_sampled_pairs_show_a_gap_but_stay_matched():
    synth = SynthConfig(num_track_sets=64)
    space = GapSpace(GapSpaceConfig(), synth)
    dataset = TrackDataset(synth)
    rng = np.random.default_rng(0)
    indices = [int(i) for i in rng.integers(len(dataset), size=1000)]
    text, audio = pairs_to_sets(paired_embeddings(dataset, space, indices, rng), space.embedding_dim)
    stats = modality_gap_stats(text, audio)
    assert 0.25 <= stats.centroid_distance <= 0.5

    shuffled = text.vectors[rng.permutation(len(text))]
    random_cosine = float(np.mean(np.sum(shuffled * audio.vectors, axis=1)))
    assert stats.mean_pairwise_cosine > random_cosine + 0.1


def test_zero_gap_makes_sampled_pairs_identical():
    synth = tiny_synth()
    space = GapSpace(GapSpaceConfig(embed_dim=16, feature_bins=8, offset_norm=0.0, noise_scale=0.0), synth)
    dataset = TrackDataset(synth)
    pairs = paired_embeddings(dataset, space, list(range(8)), np.random.default_rng(1))
    assert len(pairs) == 8
    for pair in pairs:
        np.testing.assert_array_equal(pair.text_side, pair.audio_side)


def test_text_side_follows_the_annotated_recording(space):
    tags = stem_tags(1, 0, space.synth)
    recording = torch.randn(16, 4, generator=torch.Generator().manual_seed(3))
    annotated = space.embed_text(tags, recording)
    assert not np.array_equal(annotated, space.embed_text(tags))
    batch = space.embed_text_batch([tuple(tags)], recording[None])
    np.testing.assert_array_equal(batch[0], annotated)
    with pytest.raises(ContractViolation):
        space.embed_text_batch([tuple(tags)] * 2, recording[None])


def test_batch_helpers_handle_empty_input(space):
    assert space.embed_audio_batch(torch.zeros(0, 16, 4)).shape == (0, 16)
    assert space.embed_text_batch([]).shape == (0, 16)
    text, audio = pairs_to_sets([], 16)
    assert len(text) == 0 and text.modality == TEXT_SIDE
    assert len(audio) == 0 and audio.modality == AUDIO_SIDE


def test_shared_space_is_rebuilt_only_when_config_changes():
    synth = tiny_synth()
    first = get_gap_space(GapSpaceConfig(embed_dim=16), synth)
    assert get_gap_space(GapSpaceConfig(embed_dim=16), synth) is first
    assert get_gap_space(GapSpaceConfig(embed_dim=8), synth) is not first
