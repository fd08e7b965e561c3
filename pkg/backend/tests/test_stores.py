import json

import numpy as np
import pytest
import torch

from app.checkpoint_store import (
    decode_tensors,
    encode_tensors,
    load_checkpoint,
    load_into_module,
    module_tensors,
    save_checkpoint,
)
from app.embedding_store import HEADER, read_embeddings, write_embeddings
from app.exceptions import CorruptionError
from app.models import AUDIO_SIDE, GENERATED, TEXT_SIDE, EmbeddingSet


def test_checkpoint_preserves_names_order_and_values(tmp_path):
    tensors = {
        "b.weight": torch.arange(6, dtype=torch.float32).reshape(2, 3),
        "a.bias": torch.tensor([0.5, -1.25]),
        "scalar": torch.tensor(3.0),
    }
    path = save_checkpoint(tmp_path / "model.lcl", tensors, {"step": 7, "variant": "dit-diffusion"})
    loaded = load_checkpoint(path)
    assert list(loaded.tensors) == ["b.weight", "a.bias", "scalar"]
    for name, value in tensors.items():
        assert torch.equal(loaded.tensors[name], value)
    assert loaded.meta == {"step": 7, "variant": "dit-diffusion"}
    assert json.loads((tmp_path / "model.lcl.meta.json").read_text())["step"] == 7


def test_checkpoint_layout_starts_with_magic_and_first_name():
    payload = encode_tensors({"w": torch.ones(2)})
    assert payload[:4] == b"LCL1"
    assert int.from_bytes(payload[4:8], "little") == 1
    assert payload[8:9] == b"w"


def test_checkpoint_corruption_is_detected():
    payload = encode_tensors({"w": torch.ones(4, 4)})
    with pytest.raises(CorruptionError):
        decode_tensors(b"XXXX" + payload[4:])
    with pytest.raises(CorruptionError):
        decode_tensors(payload[:-3])


def test_module_round_trip_and_shape_mismatch(tmp_path):
    source = torch.nn.Linear(3, 2)
    path = save_checkpoint(tmp_path / "lin.lcl", module_tensors(source))
    target = torch.nn.Linear(3, 2)
    load_into_module(target, load_checkpoint(path).tensors)
    assert torch.equal(target.weight, source.weight)

    with pytest.raises(CorruptionError):
        load_into_module(torch.nn.Linear(4, 2), load_checkpoint(path).tensors)


def test_embedding_file_round_trip_keeps_tags(tmp_path):
    vectors = np.random.default_rng(0).standard_normal((5, 3)).astype(np.float32)
    path = write_embeddings(tmp_path / "set.emb", EmbeddingSet(vectors, TEXT_SIDE, GENERATED))
    loaded = read_embeddings(path)
    assert loaded.modality == TEXT_SIDE
    assert loaded.source == GENERATED
    np.testing.assert_array_equal(loaded.vectors, vectors.astype(np.float64))


def test_empty_embedding_set_writes_header_only(tmp_path):
    path = write_embeddings(tmp_path / "empty.emb", EmbeddingSet(np.zeros((0, 8)), AUDIO_SIDE))
    assert path.stat().st_size == HEADER.size
    loaded = read_embeddings(path)
    assert len(loaded) == 0
    assert loaded.dim == 8


def test_embedding_corruption_is_detected(tmp_path):
    path = write_embeddings(tmp_path / "set.emb", EmbeddingSet(np.ones((4, 2)), AUDIO_SIDE))
    payload = path.read_bytes()
    for broken in (b"EMB2" + payload[4:], payload[:-1], payload[:5]):
        (tmp_path / "broken.emb").write_bytes(broken)
        with pytest.raises(CorruptionError):
            read_embeddings(tmp_path / "broken.emb")
