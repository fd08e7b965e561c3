"""
Embedding Store
EMB1 binary files holding one EmbeddingSet each
"""
import logging
import struct
from pathlib import Path
from typing import Union

import numpy as np

from .exceptions import CorruptionError
from .models import AUDIO_SIDE, GENERATED, REAL, TEXT_SIDE, EmbeddingSet

logger = logging.getLogger(__name__)

MAGIC = b"EMB1"
HEADER = struct.Struct('<4sIIBB')

MODALITY_TAGS = {AUDIO_SIDE: 0, TEXT_SIDE: 1}
SOURCE_TAGS = {REAL: 0, GENERATED: 1}


def encode_embeddings(embeddings: EmbeddingSet) -> bytes:
    count, dim = embeddings.vectors.shape
    header = HEADER.pack(MAGIC, count, dim, MODALITY_TAGS[embeddings.modality], SOURCE_TAGS[embeddings.source])
    return header + embeddings.vectors.astype('<f4').tobytes(order='C')


def decode_embeddings(payload: bytes) -> EmbeddingSet:
    if len(payload) < HEADER.size:
        raise CorruptionError("embedding file shorter than its header")
    magic, count, dim, modality_tag, source_tag = HEADER.unpack_from(payload, 0)
    if magic != MAGIC:
        raise CorruptionError("not an EMB1 file (bad magic)")
    modalities = {v: k for k, v in MODALITY_TAGS.items()}
    sources = {v: k for k, v in SOURCE_TAGS.items()}
    if modality_tag not in modalities or source_tag not in sources:
        raise CorruptionError(f"unknown tags (modality={modality_tag}, source={source_tag})")
    expected = HEADER.size + 4 * count * dim
    if len(payload) != expected:
        raise CorruptionError(f"payload is {len(payload)} bytes, header implies {expected}")
    if count * dim == 0:
        return EmbeddingSet(np.zeros((count, dim)), modalities[modality_tag], sources[source_tag])
    vectors = np.frombuffer(payload, dtype='<f4', offset=HEADER.size).reshape(count, dim)
    return EmbeddingSet(vectors.astype(np.float64), modalities[modality_tag], sources[source_tag])


def write_embeddings(path: Union[str, Path], embeddings: EmbeddingSet) -> Path:
    """Write an EmbeddingSet as EMB1 (an empty set writes a header-only file)"""
    save_path = Path(path)
    save_path.parent.mkdir(parents=True, exist_ok=True)
    save_path.write_bytes(encode_embeddings(embeddings))
    logger.info(f"Wrote {len(embeddings)} {embeddings.modality} embeddings to {save_path}")
    return save_path


def read_embeddings(path: Union[str, Path]) -> EmbeddingSet:
    return decode_embeddings(Path(path).read_bytes())
