"""Condition stacks: encoded mask windows plus a repeated informed slice."""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Optional, Tuple, Union

import numpy as np
import torch

from .config import ConditioningConfig, SamplerConfig
from .exceptions import MissingArtifactError, ShapeContractError
from .models import DatasetManifest, InformedPolicy, InformedProvenance
from .phantom import load_entry
from .volume_io import Volume, read_image_volume

if TYPE_CHECKING:
    from .denoiser import SliceModel
    from .schedule import NoiseSchedule

logger = logging.getLogger(__name__)


class Encoder:
    """Maps image slices and mask labels into model channel space.

    Only the identity kind exists: images pass through unchanged and masks are
    mapped to a normalized label channel (or one-hot channels).
    """

    def __init__(self, kind: str = "identity", mask_encoding: str = "scalar", label_max: int = 5):
        if kind != "identity":
            raise ValueError(f"unsupported encoder kind {kind!r}")
        if mask_encoding not in ("scalar", "onehot"):
            raise ValueError(f"unsupported mask encoding {mask_encoding!r}")
        if label_max < 1:
            raise ValueError("label_max must be >= 1")
        self.kind = kind
        self.mask_encoding = mask_encoding
        self.label_max = label_max

    @classmethod
    def from_config(cls, cfg: ConditioningConfig) -> "Encoder":
        return cls(cfg.encoder, cfg.mask_encoding, cfg.label_max)

    @property
    def mask_channels(self) -> int:
        return 1 if self.mask_encoding == "scalar" else self.label_max + 1

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        return x

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return z

    def encode_mask(self, labels: np.ndarray) -> torch.Tensor:
        """(n, h, w) integer labels -> (n, mask_channels, h, w) float32."""
        labels = np.asarray(labels)
        if labels.ndim != 3:
            raise ShapeContractError(f"mask window must be (n, h, w), got {labels.shape}")
        if labels.size and labels.max() > self.label_max:
            raise ShapeContractError(
                f"mask label {int(labels.max())} exceeds label_max={self.label_max}"
            )
        lab = torch.from_numpy(labels.astype(np.int64))
        if self.mask_encoding == "scalar":
            return (-1.0 + 2.0 * lab.to(torch.float32) / self.label_max)[:, None]
        onehot = torch.nn.functional.one_hot(lab, num_classes=self.label_max + 1)
        return onehot.permute(0, 3, 1, 2).to(torch.float32)


@dataclass(frozen=True)
class InformedSlice:
    """One image slice in [-1, 1] with its provenance."""

    pixels: np.ndarray
    provenance: InformedProvenance

    def __post_init__(self) -> None:
        arr = np.asarray(self.pixels, dtype=np.float32)
        if arr.ndim != 2:
            raise ShapeContractError(f"informed slice must be (h, w), got {arr.shape}")
        object.__setattr__(self, "pixels", arr)


@dataclass(frozen=True)
class ConditionStack:
    """Per-window condition c = [mask channels | informed channels]."""

    mask_channels: torch.Tensor
    informed_channels: torch.Tensor
    informed_provenance: InformedProvenance

    def __post_init__(self) -> None:
        m, i = self.mask_channels, self.informed_channels
        if m.ndim != 4 or i.ndim != 4:
            raise ShapeContractError("condition channels must be (n, c, h, w)")
        if m.shape[0] != i.shape[0] or m.shape[2:] != i.shape[2:]:
            raise ShapeContractError(
                f"mask channels {tuple(m.shape)} and informed channels {tuple(i.shape)} disagree"
            )
        if not torch.equal(i, i[:1].expand_as(i)):
            raise ShapeContractError("informed channels must repeat a single slice")

    @property
    def width(self) -> int:
        """Window length n."""
        return int(self.mask_channels.shape[0])

    @property
    def spatial(self) -> Tuple[int, int]:
        return tuple(self.mask_channels.shape[2:])

    def tensor(self) -> torch.Tensor:
        """(n, c_m + c_i, h, w) concatenation fed to the denoiser."""
        return torch.cat([self.mask_channels, self.informed_channels], dim=1)


def build_condition_stack(
    mask_window: np.ndarray, informed_slice: InformedSlice, encoder: Encoder
) -> ConditionStack:
    """Encode n mask slices and repeat the encoded informed slice n times.

    Args:
        mask_window: (n, h, w) integer labels
        informed_slice: Slice whose dims match the mask window
        encoder: Channel encoder

    Returns:
        ConditionStack of width n
    """
    mask_window = np.asarray(mask_window)
    if mask_window.ndim != 3 or mask_window.shape[0] < 1:
        raise ShapeContractError(f"mask window must be (n, h, w), got {mask_window.shape}")
    if informed_slice.pixels.shape != mask_window.shape[1:]:
        raise ShapeContractError(
            f"informed slice {informed_slice.pixels.shape} does not match mask slices "
            f"{mask_window.shape[1:]}"
        )
    n = mask_window.shape[0]
    informed = encoder.encode(torch.from_numpy(informed_slice.pixels)[None, None])
    return ConditionStack(
        mask_channels=encoder.encode_mask(mask_window),
        informed_channels=informed.expand(n, -1, -1, -1).contiguous(),
        informed_provenance=informed_slice.provenance,
    )


def slice_from_volume(
    volume: Volume, index: int, volume_id: Optional[str] = None, kind: str = "volume"
) -> InformedSlice:
    """Wrap slice ``index`` of ``volume`` as an informed slice."""
    if not 0 <= index < volume.depth:
        raise ShapeContractError(f"slice {index} outside volume of depth {volume.depth}")
    return InformedSlice(
        pixels=volume.slice(index).copy(),
        provenance=InformedProvenance(kind=kind, volume_id=volume_id, slice_index=index),
    )


def load_informed_file(spec: str) -> InformedSlice:
    """Resolve ``PATH`` or ``PATH#k`` to slice k (default central) of a volume file."""
    path_text, _, index_text = spec.partition("#")
    path = Path(path_text)
    if not path.exists():
        raise MissingArtifactError(f"Informed slice file not found: {path}", stage="informed")
    volume = read_image_volume(path)
    index = int(index_text) if index_text else volume.depth // 2
    return slice_from_volume(volume, index, volume_id=str(path), kind="file")


def select_informed_slice(
    manifest: DatasetManifest,
    policy: Union[InformedPolicy, str],
    seed: int,
    *,
    root: Optional[Union[str, Path]] = None,
    volume: Optional[Volume] = None,
    volume_id: Optional[str] = None,
    window: Optional[Tuple[int, int]] = None,
    p: Optional[float] = None,
    slice_model: Optional["SliceModel"] = None,
    schedule: Optional["NoiseSchedule"] = None,
    sampler_config: Optional[SamplerConfig] = None,
    spatial: Tuple[int, int] = (32, 32),
) -> InformedSlice:
    """Choose an informed slice under one of the selection policies.

    IC draws a volume uniformly from ``manifest`` and a slice uniformly from
    it. IG generates a slice at position ``p`` (uniform when omitted) with the
    position-conditioned slice model. SELF draws uniformly from ``window`` =
    (start, length) of ``volume``.

    Raises:
        ValueError: Empty manifest, or IG without a slice model
    """
    policy = InformedPolicy(policy)
    rng = np.random.default_rng(seed)

    if policy == InformedPolicy.IC:
        if manifest.N == 0:
            raise ValueError("cannot cross-select an informed slice from an empty manifest")
        if root is None:
            raise ValueError("IC selection needs the dataset root")
        entry = manifest.entries[int(rng.integers(manifest.N))]
        source, _ = load_entry(root, entry)
        index = int(rng.integers(source.depth))
        logger.debug(f"IC informed slice {entry.id}[{index}]")
        return slice_from_volume(source, index, volume_id=entry.id)

    if policy == InformedPolicy.IG:
        if slice_model is None or schedule is None:
            raise ValueError("IG selection requires a trained slice model and its schedule")
        from .sampler import sample_informed_slice

        if p is None:
            p = float(rng.uniform(0.0, 1.0))
        pixels = sample_informed_slice(
            slice_model,
            p,
            schedule,
            sampler_config or SamplerConfig(),
            int(rng.integers(2**31)),
            spatial=spatial,
        )
        return InformedSlice(
            pixels=pixels, provenance=InformedProvenance(kind="generated", position=p)
        )

    if volume is None or window is None:
        raise ValueError("self selection needs a volume and a (start, length) window")
    start, length = window
    if start < 0 or length < 1 or start + length > volume.depth:
        raise ShapeContractError(
            f"window ({start}, {length}) outside volume of depth {volume.depth}"
        )
    index = start + int(rng.integers(length))
    return slice_from_volume(volume, index, volume_id=volume_id, kind="window")
