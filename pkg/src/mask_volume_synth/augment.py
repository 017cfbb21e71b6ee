"""Whole-volume 3D mask augmentation: flip, small rotation, center-ward label translation."""

import logging
from typing import Optional, Tuple

import numpy as np
from scipy import ndimage

from .config import AugmentParams
from .volume_io import MaskVolume

logger = logging.getLogger(__name__)

# Array axes are (z, y, x).
AXIS_INDEX = {"z": 0, "y": 1, "x": 2}
# Plane rotated by a rotation about each axis.
ROTATION_PLANES = {"x": (0, 1), "y": (0, 2), "z": (1, 2)}
BODY_LABEL = 1
MAX_TRANSLATION_TRIES = 20


def flip_mask(labels: np.ndarray, axis: str) -> np.ndarray:
    """Mirror a (Z, H, W) label array along ``x``, ``y`` or ``z``."""
    return np.flip(labels, axis=AXIS_INDEX[axis]).copy()


def rotate_mask(labels: np.ndarray, angles_deg: Tuple[float, float, float]) -> np.ndarray:
    """Rotate about the volume center by (x, y, z) angles with nearest-neighbor resampling."""
    out = labels
    for axis, angle in zip(("x", "y", "z"), angles_deg):
        if angle == 0.0:
            continue
        out = ndimage.rotate(
            out, angle, axes=ROTATION_PLANES[axis], reshape=False, order=0, mode="constant", cval=0
        )
    return out


def _try_translate(labels: np.ndarray, label: int, shift: np.ndarray) -> Optional[np.ndarray]:
    coords = np.argwhere(labels == label)
    moved = coords + shift
    shape = np.array(labels.shape)
    if np.any(moved < 0) or np.any(moved >= shape):
        return None
    out = labels.copy()
    out[labels == label] = BODY_LABEL
    # Destination must stay inside the body.
    if np.any(out[tuple(moved.T)] == 0):
        return None
    out[tuple(moved.T)] = label
    if set(np.unique(out).tolist()) != set(np.unique(labels).tolist()):
        return None
    return out


def translate_label(
    labels: np.ndarray, label: int, max_translation_vox: int, rng: np.random.Generator
) -> np.ndarray:
    """Move one label's voxels toward the volume center by a uniform distance.

    Offsets that leave the body or erase another label are redrawn; after
    ``MAX_TRANSLATION_TRIES`` rejections the mask is returned unchanged.

    Raises:
        ValueError: ``label`` does not occur in the mask
    """
    coords = np.argwhere(labels == label)
    if coords.size == 0:
        raise ValueError(f"translate_label {label} is absent from the mask")
    center = (np.array(labels.shape) - 1) / 2.0
    direction = center - coords.mean(axis=0)
    norm = float(np.linalg.norm(direction))
    if norm < 1e-9 or max_translation_vox == 0:
        return labels
    direction /= norm
    for _ in range(MAX_TRANSLATION_TRIES):
        distance = min(rng.uniform(0.0, max_translation_vox), norm)
        shift = np.rint(direction * distance).astype(int)
        if not shift.any():
            return labels
        moved = _try_translate(labels, label, shift)
        if moved is not None:
            logger.debug(f"Translated label {label} by {shift.tolist()}")
            return moved
    logger.debug(f"No valid translation found for label {label}; leaving it in place")
    return labels


def augment_mask(mask: MaskVolume, params: AugmentParams, seed: int) -> MaskVolume:
    """Augment a whole mask volume: flip, then rotate, then translate.

    Args:
        mask: Input mask (left untouched)
        params: Augmentation parameters; ``rotation_only`` skips flip and translation
        seed: Augmentation seed

    Returns:
        Augmented MaskVolume with the same dims
    """
    rng = np.random.default_rng(seed)
    labels = mask.labels.copy()
    full = params.mode == "full"

    translate = params.translate_label
    if full and translate is not None and translate not in mask.label_set():
        raise ValueError(f"translate_label {translate} is absent from the mask")

    if full:
        for axis in params.flip_axes:
            if rng.random() < params.flip_probability:
                labels = flip_mask(labels, axis)

    angles = tuple(
        float(rng.uniform(-bound, bound)) if bound > 0 else 0.0 for bound in params.max_rotation_deg
    )
    rotated = rotate_mask(labels, angles)
    if set(np.unique(rotated).tolist()) == set(np.unique(labels).tolist()):
        labels = rotated
    else:
        logger.debug(f"Rotation by {angles} erased a label; keeping the unrotated mask")

    if full and translate is not None and np.any(labels == translate):
        labels = translate_label(labels, translate, params.max_translation_vox, rng)

    return MaskVolume(labels)
