"""Tests for PNG section montages."""

import numpy as np
import pytest
from PIL import Image

from mask_volume_synth.montage import build_montage, to_uint8, write_montage
from mask_volume_synth.volume_io import Volume


@pytest.mark.unit
class TestMontage:
    """Test montage layout and intensity mapping."""

    def test_dimensions(self, tmp_path):
        """Two rows of cells sized to fit every section, three columns."""
        volume = Volume(np.zeros((10, 16, 12)))
        path = write_montage(volume, tmp_path / "m" / "v.png")
        with Image.open(path) as image:
            assert image.mode == "L"
            # Cells are max(H, Z) tall and max(W, H) wide.
            assert image.size == (3 * 16, 2 * 16)

    def test_constant_minus_one_is_black(self):
        """-1 maps to 0 everywhere."""
        canvas = build_montage(Volume(np.full((8, 16, 16), -1.0)))
        assert canvas.dtype == np.uint8
        assert not canvas.any()

    def test_intensity_mapping(self):
        """[-1, 1] maps linearly onto 0..255."""
        assert to_uint8(np.array([-1.0, 0.0, 1.0])).tolist() == [0, 128, 255]

    def test_sections_placed(self):
        """Axial slices at 25/50/75% depth fill the first row; the last cell stays black."""
        voxels = np.broadcast_to(np.linspace(-1, 1, 9)[:, None, None], (9, 8, 8))
        canvas = build_montage(Volume(voxels))
        rows, cols = 9, 8
        for c, k in enumerate((2, 4, 6)):
            assert np.all(canvas[:8, c * cols : c * cols + 8] == to_uint8(voxels[k]))
        assert not canvas[rows:, 2 * cols :].any()
        coronal = canvas[rows : rows + 9, :8]
        assert np.array_equal(coronal, to_uint8(voxels[:, 4, :]))

    def test_deterministic(self, tmp_path):
        """Same volume -> identical PNG pixels."""
        voxels = np.random.default_rng(0).uniform(-1, 1, (6, 12, 12))
        a = write_montage(Volume(voxels), tmp_path / "a.png")
        b = write_montage(Volume(voxels), tmp_path / "b.png")
        with Image.open(a) as first, Image.open(b) as second:
            assert np.array_equal(np.asarray(first), np.asarray(second))
