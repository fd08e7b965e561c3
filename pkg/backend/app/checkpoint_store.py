"""
Checkpoint Store
Binary LCL1 parameter files plus a JSON metadata sidecar
"""
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np
import torch

from .exceptions import CorruptionError

logger = logging.getLogger(__name__)

MAGIC = b"LCL1"
META_SUFFIX = ".meta.json"


@dataclass
class Checkpoint:
    """Named float32 tensors (file order) and their metadata"""
    tensors: Dict[str, torch.Tensor]
    meta: Dict[str, Any] = field(default_factory=dict)


def encode_tensors(named_tensors: Dict[str, torch.Tensor]) -> bytes:
    """Serialize tensors in the LCL1 layout (insertion order is preserved)"""
    chunks = [MAGIC]
    for name, tensor in named_tensors.items():
        encoded_name = name.encode('utf-8')
        array = tensor.detach().cpu().to(torch.float32).contiguous().numpy()
        chunks.append(struct.pack('<I', len(encoded_name)))
        chunks.append(encoded_name)
        chunks.append(struct.pack('<I', array.ndim))
        chunks.append(struct.pack(f'<{array.ndim}I', *array.shape))
        chunks.append(array.astype('<f4').tobytes(order='C'))
    return b"".join(chunks)


def decode_tensors(payload: bytes) -> Dict[str, torch.Tensor]:
    """Parse an LCL1 byte string"""
    if payload[:4] != MAGIC:
        raise CorruptionError("not an LCL1 checkpoint (bad magic)")
    tensors: Dict[str, torch.Tensor] = {}
    offset = 4
    total = len(payload)

    def take(size: int) -> bytes:
        nonlocal offset
        if offset + size > total:
            raise CorruptionError(f"truncated checkpoint at byte {offset}")
        chunk = payload[offset:offset + size]
        offset += size
        return chunk

    while offset < total:
        (name_length,) = struct.unpack('<I', take(4))
        name = take(name_length).decode('utf-8')
        (rank,) = struct.unpack('<I', take(4))
        dims = struct.unpack(f'<{rank}I', take(4 * rank)) if rank else ()
        count = int(np.prod(dims)) if dims else 1
        raw = take(4 * count)
        if count == 0:
            values = np.zeros(dims, dtype=np.float32)
        else:
            values = np.frombuffer(raw, dtype='<f4').reshape(dims)
        tensors[name] = torch.from_numpy(values.astype(np.float32))
    return tensors


def write_meta(path: Union[str, Path], meta: Dict[str, Any]) -> Path:
    """Write the <path>.meta.json sidecar for any artifact"""
    meta_path = Path(str(path) + META_SUFFIX)
    meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True), encoding='utf-8')
    return meta_path


def save_checkpoint(
    path: Union[str, Path],
    named_tensors: Dict[str, torch.Tensor],
    meta: Optional[Dict[str, Any]] = None,
) -> Path:
    """
    Save tensors to disk

    Args:
        path: Target .lcl file; the sidecar goes to <path>.meta.json
        named_tensors: Tensors to store, in the order they should appear
        meta: JSON-serializable metadata (config hash, variant, step...)

    Returns:
        The checkpoint path
    """
    save_path = Path(path)
    save_path.parent.mkdir(parents=True, exist_ok=True)
    save_path.write_bytes(encode_tensors(named_tensors))
    if meta is not None:
        write_meta(save_path, meta)
    logger.info(f"Saved checkpoint with {len(named_tensors)} tensors to {save_path}")
    return save_path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    """Load tensors (and the sidecar metadata when present)"""
    load_path = Path(path)
    tensors = decode_tensors(load_path.read_bytes())
    meta_path = Path(str(load_path) + META_SUFFIX)
    meta: Dict[str, Any] = {}
    if meta_path.exists():
        meta = json.loads(meta_path.read_text(encoding='utf-8'))
    logger.info(f"Loaded checkpoint {load_path} ({len(tensors)} tensors)")
    return Checkpoint(tensors=tensors, meta=meta)


def module_tensors(module: torch.nn.Module) -> Dict[str, torch.Tensor]:
    """Parameters of a module keyed by their qualified names"""
    return {name: param for name, param in module.named_parameters()}


def load_into_module(module: torch.nn.Module, tensors: Dict[str, torch.Tensor]) -> None:
    """Copy checkpoint tensors into a module's parameters (dtype follows the module)"""
    params = dict(module.named_parameters())
    missing = [name for name in params if name not in tensors]
    if missing:
        raise CorruptionError(f"checkpoint is missing parameters: {missing[:5]}")
    with torch.no_grad():
        for name, param in params.items():
            value = tensors[name]
            if tuple(value.shape) != tuple(param.shape):
                raise CorruptionError(
                    f"parameter {name} has shape {tuple(value.shape)} in checkpoint, expected {tuple(param.shape)}"
                )
            param.copy_(value.to(param.dtype))
