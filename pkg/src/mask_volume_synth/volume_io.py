"""Volume and mask containers and their binary file format.

File layout (little-endian): magic (4 bytes, ``VOL1`` or ``MSK1``), version u32,
H u32, W u32, Z u32, dtype tag u8 (0=float32, 1=uint16), then the payload with
x varying fastest, then y, then z. In memory arrays are shaped (Z, H, W), so a
C-order dump is exactly the on-disk voxel order.
"""

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Tuple, Union

import numpy as np

from .exceptions import (
    ContainerFormatError,
    DimensionOverflowError,
    MagicMismatchError,
    ShapeContractError,
    TruncatedPayloadError,
    VersionMismatchError,
)

logger = logging.getLogger(__name__)

VOLUME_MAGIC = b"VOL1"
MASK_MAGIC = b"MSK1"
FORMAT_VERSION = 1
HEADER = struct.Struct("<4sIIIIB")

DTYPE_FLOAT32 = 0
DTYPE_UINT16 = 1
_DTYPES = {DTYPE_FLOAT32: np.dtype("<f4"), DTYPE_UINT16: np.dtype("<u2")}

MAX_EXTENT = 4096
MAX_VOXELS = 1 << 28


@dataclass(frozen=True)
class Volume:
    """Intensity volume in [-1, 1], stored as (Z, H, W) float32."""

    voxels: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.voxels, dtype=np.float32)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ShapeContractError(f"volume must be a non-empty (Z, H, W) array, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ShapeContractError("volume contains non-finite values")
        if arr.min() < -1.0 or arr.max() > 1.0:
            raise ShapeContractError("volume intensities must lie in [-1, 1]")
        object.__setattr__(self, "voxels", arr)

    @property
    def dims(self) -> Tuple[int, int, int]:
        """(H, W, Z)."""
        z, h, w = self.voxels.shape
        return h, w, z

    @property
    def depth(self) -> int:
        """Slice count Z."""
        return int(self.voxels.shape[0])

    def slice(self, k: int) -> np.ndarray:
        """Axial slice k as an (H, W) array."""
        return self.voxels[k]


@dataclass(frozen=True)
class MaskVolume:
    """Integer label volume aligned with a Volume, stored as (Z, H, W) uint16."""

    labels: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.labels)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ShapeContractError(f"mask must be a non-empty (Z, H, W) array, got {arr.shape}")
        if arr.size and (arr.min() < 0 or arr.max() > np.iinfo(np.uint16).max):
            raise ShapeContractError("mask labels must fit in uint16")
        object.__setattr__(self, "labels", arr.astype(np.uint16, copy=False))

    @property
    def dims(self) -> Tuple[int, int, int]:
        """(H, W, Z)."""
        z, h, w = self.labels.shape
        return h, w, z

    @property
    def depth(self) -> int:
        """Slice count Z."""
        return int(self.labels.shape[0])

    def label_set(self) -> set:
        """Labels present in the mask."""
        return {int(v) for v in np.unique(self.labels)}

    def window(self, start: int, length: int) -> np.ndarray:
        """Mask slices [start, start + length) as a (length, H, W) array."""
        return self.labels[start : start + length]


def write_volume(path: Union[str, Path], volume: Union[Volume, MaskVolume]) -> None:
    """Write a Volume (VOL1) or MaskVolume (MSK1) file.

    Args:
        path: Destination file
        volume: Volume or MaskVolume to write
    """
    path = Path(path)
    if isinstance(volume, Volume):
        magic, tag, payload = VOLUME_MAGIC, DTYPE_FLOAT32, volume.voxels
    elif isinstance(volume, MaskVolume):
        magic, tag, payload = MASK_MAGIC, DTYPE_UINT16, volume.labels
    else:
        raise TypeError(f"Cannot write {type(volume).__name__} as a volume file")

    h, w, z = volume.dims
    data = np.ascontiguousarray(payload, dtype=_DTYPES[tag])
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(HEADER.pack(magic, FORMAT_VERSION, h, w, z, tag))
        f.write(data.tobytes(order="C"))
    logger.debug(f"Wrote {magic.decode()} {h}x{w}x{z} to {path}")


def read_volume(path: Union[str, Path]) -> Union[Volume, MaskVolume]:
    """Read a VOL1 or MSK1 file.

    Args:
        path: Source file

    Returns:
        Volume for VOL1 files, MaskVolume for MSK1 files

    Raises:
        MagicMismatchError: Unknown magic bytes
        VersionMismatchError: Unsupported format version
        DimensionOverflowError: Zero or oversized dimensions
        TruncatedPayloadError: File shorter than the header declares
    """
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < HEADER.size:
        if len(raw) >= 4 and raw[:4] not in (VOLUME_MAGIC, MASK_MAGIC):
            raise MagicMismatchError("Not a volume file", path)
        raise TruncatedPayloadError("Header truncated", path)

    magic, version, h, w, z, tag = HEADER.unpack_from(raw, 0)
    if magic not in (VOLUME_MAGIC, MASK_MAGIC):
        raise MagicMismatchError(f"Unexpected magic {magic!r}", path)
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"Unsupported volume format version {version}", path)
    if min(h, w, z) < 1 or max(h, w, z) > MAX_EXTENT or h * w * z > MAX_VOXELS:
        raise DimensionOverflowError(f"Invalid dimensions {h}x{w}x{z}", path)
    expected_tag = DTYPE_FLOAT32 if magic == VOLUME_MAGIC else DTYPE_UINT16
    if tag != expected_tag:
        raise ContainerFormatError(f"dtype tag {tag} invalid for {magic.decode()}", path)

    dtype = _DTYPES[tag]
    expected = h * w * z * dtype.itemsize
    payload = raw[HEADER.size :]
    if len(payload) < expected:
        raise TruncatedPayloadError(
            f"Payload has {len(payload)} bytes, header declares {expected}", path
        )
    if len(payload) > expected:
        raise ContainerFormatError(f"{len(payload) - expected} trailing bytes", path)

    arr = np.frombuffer(payload, dtype=dtype).reshape(z, h, w)
    if magic == VOLUME_MAGIC:
        return Volume(arr.astype(np.float32))
    return MaskVolume(arr.astype(np.uint16))


def read_image_volume(path: Union[str, Path]) -> Volume:
    """Read a file that must hold an intensity volume."""
    volume = read_volume(path)
    if not isinstance(volume, Volume):
        raise MagicMismatchError("Expected a VOL1 intensity volume", path)
    return volume


def read_mask_volume(path: Union[str, Path]) -> MaskVolume:
    """Read a file that must hold a mask volume."""
    mask = read_volume(path)
    if not isinstance(mask, MaskVolume):
        raise MagicMismatchError("Expected an MSK1 mask volume", path)
    return mask
