"""Tests for whole-volume mask augmentation."""

import numpy as np
import pytest
from pydantic import ValidationError

from mask_volume_synth.augment import augment_mask, flip_mask, rotate_mask
from mask_volume_synth.config import AugmentParams
from mask_volume_synth.models import PhantomSpec
from mask_volume_synth.phantom import generate_phantom

NO_ROTATION = (0.0, 0.0, 0.0)


@pytest.fixture(scope="module")
def phantom_mask():
    spec = PhantomSpec(lesion_probability=1.0)
    _, mask, _ = generate_phantom(spec, seed=11)
    return mask


@pytest.mark.unit
class TestAugmentMask:
    """Test augment_mask and its building blocks."""

    def test_zero_params_identity(self, phantom_mask):
        """No flips, rotation or translation -> identical mask."""
        out = augment_mask(phantom_mask, AugmentParams(max_rotation_deg=NO_ROTATION), seed=0)
        assert np.array_equal(out.labels, phantom_mask.labels)

    @pytest.mark.parametrize("axis", ["x", "y", "z"])
    def test_flip_is_involution(self, phantom_mask, axis):
        """Flipping twice restores the mask."""
        once = flip_mask(phantom_mask.labels, axis)
        assert not np.array_equal(once, phantom_mask.labels)
        assert np.array_equal(flip_mask(once, axis), phantom_mask.labels)

    def test_certain_flip(self, phantom_mask):
        """flip_probability = 1 always mirrors the listed axes."""
        params = AugmentParams(flip_axes=["x"], flip_probability=1.0, max_rotation_deg=NO_ROTATION)
        out = augment_mask(phantom_mask, params, seed=3)
        assert np.array_equal(out.labels, phantom_mask.labels[:, :, ::-1])

    def test_zero_angle_rotation_is_identity(self, phantom_mask):
        """rotate_mask with zero angles returns the labels unchanged."""
        assert np.array_equal(rotate_mask(phantom_mask.labels, NO_ROTATION), phantom_mask.labels)

    @pytest.mark.parametrize("seed", range(5))
    def test_label_set_and_counts_preserved(self, phantom_mask, seed):
        """Rotation at 2.5 degrees keeps every label and its voxel count.

        Labels of at least 500 voxels change by under 10%. Smaller organs and the
        lesion (down to one voxel) sit at the nearest-neighbor resolution limit,
        where a boundary voxel is a large fraction of the label, so they only
        get a loose bound of half their count plus two voxels.
        """
        out = augment_mask(phantom_mask, AugmentParams(max_rotation_deg=(2.5, 2.5, 2.5)), seed)
        assert out.label_set() == phantom_mask.label_set()
        assert out.labels.shape == phantom_mask.labels.shape
        before = np.bincount(phantom_mask.labels.ravel())
        after = np.bincount(out.labels.ravel(), minlength=before.size)
        for label in range(1, before.size):
            change = abs(int(after[label]) - int(before[label]))
            if before[label] >= 500:
                assert change < 0.1 * before[label]
            else:
                assert change <= 0.5 * before[label] + 2

    def test_translation_keeps_lesion_size(self, phantom_mask):
        """Translated lesions keep their voxel count and stay inside the body."""
        lesion = int(phantom_mask.labels.max())
        params = AugmentParams(
            max_rotation_deg=NO_ROTATION, translate_label=lesion, max_translation_vox=4
        )
        for seed in range(4):
            out = augment_mask(phantom_mask, params, seed)
            assert out.label_set() == phantom_mask.label_set()
            assert np.sum(out.labels == lesion) == np.sum(phantom_mask.labels == lesion)
            assert np.all(out.labels[phantom_mask.labels == 0] == 0)

    def test_absent_translate_label(self):
        """Translating a label the mask lacks is an error."""
        spec = PhantomSpec(lesion_probability=0.0)
        _, mask, _ = generate_phantom(spec, seed=2)
        assert spec.lesion_label not in mask.label_set()
        params = AugmentParams(max_rotation_deg=NO_ROTATION, translate_label=spec.lesion_label)
        with pytest.raises(ValueError, match="absent"):
            augment_mask(mask, params, seed=0)

    def test_deterministic(self, phantom_mask):
        """Same seed -> same augmentation."""
        params = AugmentParams(flip_axes=["x", "y"], translate_label=5)
        a = augment_mask(phantom_mask, params, seed=9)
        b = augment_mask(phantom_mask, params, seed=9)
        assert np.array_equal(a.labels, b.labels)

    def test_input_untouched(self, phantom_mask):
        """The source mask is never modified."""
        original = phantom_mask.labels.copy()
        augment_mask(phantom_mask, AugmentParams(flip_axes=["z"], flip_probability=1.0), seed=1)
        assert np.array_equal(phantom_mask.labels, original)

    def test_rotation_only_skips_flip_and_translation(self, phantom_mask):
        """rotation_only mode ignores flips and translation."""
        params = AugmentParams(
            flip_axes=["x"],
            flip_probability=1.0,
            max_rotation_deg=NO_ROTATION,
            translate_label=9,
            mode="rotation_only",
        )
        out = augment_mask(phantom_mask, params, seed=0)
        assert np.array_equal(out.labels, phantom_mask.labels)

    def test_negative_rotation_rejected(self):
        """Rotation bounds must be non-negative."""
        with pytest.raises(ValidationError):
            AugmentParams(max_rotation_deg=(-1.0, 0.0, 0.0))
