"""Checkpoint container for trained denoisers.

Layout (little-endian): magic ``GEMV``, version u32, metadata length u64,
UTF-8 JSON metadata with sorted keys, then one record per parameter in
``state_dict`` order: name length u32, name bytes, rank u32, dims u32 x rank,
float32 payload.
"""

import json
import logging
import os
import struct
from pathlib import Path
from typing import Dict, Literal, Optional, Tuple, Union

import numpy as np
import torch
from pydantic import BaseModel, Field

from .config import ArchitectureConfig, ScheduleConfig
from .denoiser import DenoiserModel, SliceModel
from .exceptions import (
    ContainerFormatError,
    MagicMismatchError,
    MissingArtifactError,
    TruncatedPayloadError,
    VersionMismatchError,
)
from .models import Stage

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"GEMV"
CHECKPOINT_VERSION = 1
_PREAMBLE = struct.Struct("<4sIQ")
_U32 = struct.Struct("<I")

Model = Union[DenoiserModel, SliceModel]


class CheckpointMetadata(BaseModel):
    """JSON metadata block of a checkpoint."""

    kind: Literal["denoiser", "slice"]
    descriptor: ArchitectureConfig
    schedule: ScheduleConfig
    step: int = Field(0, ge=0, description="Training iterations completed")
    seed: int = Field(0, ge=0)
    stage: Stage = Stage.SLICE
    slice_step: int = Field(0, ge=0, description="Slice-stage iterations behind the weights")


def _kind_of(model: Model) -> str:
    return "slice" if isinstance(model, SliceModel) else "denoiser"


def build_metadata(
    model: Model, schedule: ScheduleConfig, step: int = 0, seed: int = 0
) -> CheckpointMetadata:
    """Metadata describing ``model`` as trained under ``schedule``."""
    is_denoiser = isinstance(model, DenoiserModel)
    return CheckpointMetadata(
        kind=_kind_of(model),
        descriptor=model.descriptor,
        schedule=schedule,
        step=step,
        seed=seed,
        stage=model.stage if is_denoiser else Stage.SLICE,
        slice_step=model.slice_steps if is_denoiser else step,
    )


def encode_checkpoint(model: Model, metadata: CheckpointMetadata) -> bytes:
    """Serialize parameters and metadata to the container byte layout."""
    if metadata.kind != _kind_of(model):
        raise ValueError(
            f"metadata kind {metadata.kind!r} does not match a {_kind_of(model)} model"
        )
    meta = json.dumps(metadata.model_dump(mode="json"), sort_keys=True).encode("utf-8")
    parts = [_PREAMBLE.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(meta)), meta]
    for name, tensor in model.state_dict().items():
        array = tensor.detach().cpu().to(torch.float32).contiguous().numpy().astype("<f4")
        encoded = name.encode("utf-8")
        parts.append(_U32.pack(len(encoded)))
        parts.append(encoded)
        parts.append(_U32.pack(array.ndim))
        parts.append(struct.pack(f"<{array.ndim}I", *array.shape))
        parts.append(array.tobytes())
    return b"".join(parts)


def save_checkpoint(
    path: Union[str, Path], model: Model, metadata: CheckpointMetadata
) -> Path:
    """Write a checkpoint atomically (temp file then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = encode_checkpoint(model, metadata)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)
    logger.info(f"Saved {metadata.kind} checkpoint (step {metadata.step}) to {path}")
    return path


class _Reader:
    def __init__(self, data: bytes, path: Optional[Path]):
        self.data = data
        self.offset = 0
        self.path = path

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.data):
            raise TruncatedPayloadError(
                f"checkpoint ends at byte {len(self.data)}, expected {self.offset + size}",
                self.path,
            )
        chunk = self.data[self.offset : self.offset + size]
        self.offset += size
        return chunk

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]

    @property
    def exhausted(self) -> bool:
        return self.offset == len(self.data)


def decode_checkpoint(
    data: bytes, path: Optional[Path] = None
) -> Tuple[CheckpointMetadata, Dict[str, torch.Tensor]]:
    """Parse checkpoint bytes into metadata and an ordered state dict."""
    reader = _Reader(data, path)
    if len(data) < _PREAMBLE.size:
        raise TruncatedPayloadError("checkpoint shorter than its preamble", path)
    magic, version, meta_len = _PREAMBLE.unpack(reader.take(_PREAMBLE.size))
    if magic != CHECKPOINT_MAGIC:
        raise MagicMismatchError(f"expected magic {CHECKPOINT_MAGIC!r}, found {magic!r}", path)
    if version != CHECKPOINT_VERSION:
        raise VersionMismatchError(
            f"checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})", path
        )
    try:
        raw_meta = json.loads(reader.take(meta_len).decode("utf-8"))
        metadata = CheckpointMetadata.model_validate(raw_meta)
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ContainerFormatError(f"unreadable checkpoint metadata ({e})", path) from e

    state: Dict[str, torch.Tensor] = {}
    while not reader.exhausted:
        name = reader.take(reader.u32()).decode("utf-8")
        rank = reader.u32()
        dims = struct.unpack(f"<{rank}I", reader.take(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        array = np.frombuffer(reader.take(4 * count), dtype="<f4").reshape(dims)
        state[name] = torch.from_numpy(array.astype(np.float32))
    return metadata, state


def load_checkpoint(path: Union[str, Path]) -> Tuple[Model, CheckpointMetadata]:
    """Load a checkpoint and rebuild its model.

    Raises:
        MissingArtifactError: File does not exist
        MagicMismatchError, VersionMismatchError, TruncatedPayloadError: Bad container
    """
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"Checkpoint not found: {path}")
    metadata, state = decode_checkpoint(path.read_bytes(), path)
    if metadata.kind == "slice":
        model: Model = SliceModel(metadata.descriptor)
    else:
        model = DenoiserModel(metadata.descriptor, stage=metadata.stage)
        model.slice_steps = metadata.slice_step
    expected = list(model.state_dict().keys())
    if list(state.keys()) != expected:
        missing = sorted(set(expected) - set(state))
        extra = sorted(set(state) - set(expected))
        raise ContainerFormatError(
            f"checkpoint parameters do not match descriptor "
            f"(missing {missing}, unexpected {extra})",
            path,
        )
    model.load_state_dict(state, strict=True)
    model.eval()
    logger.debug(f"Loaded {metadata.kind} checkpoint from {path} (step {metadata.step})")
    return model, metadata
