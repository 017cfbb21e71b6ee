"""PNG montages of axial, coronal and sagittal sections."""

import logging
from pathlib import Path
from typing import Tuple, Union

import numpy as np
from PIL import Image

from .volume_io import Volume

logger = logging.getLogger(__name__)

AXIAL_FRACTIONS = (0.25, 0.5, 0.75)
GRID_COLUMNS = 3


def to_uint8(section: np.ndarray) -> np.ndarray:
    """Map [-1, 1] intensities to 0..255 (-1 is black)."""
    return np.rint((np.clip(section, -1.0, 1.0) + 1.0) / 2.0 * 255.0).astype(np.uint8)


def cell_size(volume: Volume) -> Tuple[int, int]:
    """(rows, cols) of one montage cell: large enough for every section."""
    height, width, depth = volume.dims
    return max(height, depth), max(width, height)


def build_montage(volume: Volume) -> np.ndarray:
    """2 x 3 grid of 8-bit sections.

    Row 1 holds axial slices at 25%, 50% and 75% depth; row 2 the central
    coronal and sagittal sections, with the last cell left black. Sections are
    anchored top-left and padded with black.
    """
    voxels = volume.voxels
    depth, height, width = voxels.shape
    rows, cols = cell_size(volume)
    canvas = np.zeros((2 * rows, GRID_COLUMNS * cols), dtype=np.uint8)

    axial = [voxels[int(round(f * (depth - 1)))] for f in AXIAL_FRACTIONS]
    second_row = [voxels[:, height // 2, :], voxels[:, :, width // 2]]
    for r, sections in enumerate((axial, second_row)):
        for c, section in enumerate(sections):
            h, w = section.shape
            canvas[r * rows : r * rows + h, c * cols : c * cols + w] = to_uint8(section)
    return canvas


def write_montage(volume: Volume, path: Union[str, Path]) -> Path:
    """Write ``build_montage(volume)`` as a grayscale PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(build_montage(volume)).save(path, format="PNG")
    logger.info(f"Wrote montage {path}")
    return path
