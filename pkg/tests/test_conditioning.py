"""Tests for condition stacks, the encoder and informed-slice selection."""

import numpy as np
import pytest
import torch

from mask_volume_synth.conditioning import (
    Encoder,
    InformedSlice,
    build_condition_stack,
    load_informed_file,
    select_informed_slice,
    slice_from_volume,
)
from mask_volume_synth.config import ConditioningConfig
from mask_volume_synth.denoiser import init_slice_model
from mask_volume_synth.exceptions import MissingArtifactError, ShapeContractError
from mask_volume_synth.models import DatasetManifest, InformedPolicy, InformedProvenance
from mask_volume_synth.phantom import load_entry, load_manifest
from mask_volume_synth.volume_io import Volume, write_volume


def _slice(value: float, h: int = 4, w: int = 4) -> InformedSlice:
    return InformedSlice(
        pixels=np.full((h, w), value), provenance=InformedProvenance(kind="file", volume_id="x")
    )


@pytest.mark.unit
class TestEncoder:
    """Test mask and image encoding."""

    def test_scalar_mask_encoding(self):
        """Label L maps to -1 + 2 L / L_max."""
        labels = np.arange(6).reshape(6, 1, 1)
        encoded = Encoder(label_max=5).encode_mask(labels)
        assert encoded.shape == (6, 1, 1, 1)
        expected = torch.tensor([-1.0, -0.6, -0.2, 0.2, 0.6, 1.0])
        assert torch.allclose(encoded.flatten(), expected)

    def test_onehot_encoding(self):
        """One-hot gives L_max + 1 channels with a single 1 per voxel."""
        encoder = Encoder(mask_encoding="onehot", label_max=3)
        encoded = encoder.encode_mask(np.array([[[0, 3], [1, 2]]]))
        assert encoder.mask_channels == 4
        assert encoded.shape == (1, 4, 2, 2)
        assert torch.equal(encoded.sum(dim=1), torch.ones(1, 2, 2))
        assert encoded[0, 3, 0, 1] == 1.0

    def test_identity_images(self):
        """Images pass through unchanged."""
        x = torch.randn(2, 1, 4, 4)
        encoder = Encoder()
        assert torch.equal(encoder.decode(encoder.encode(x)), x)

    def test_label_above_max(self):
        """Labels beyond L_max violate the contract."""
        with pytest.raises(ShapeContractError):
            Encoder(label_max=2).encode_mask(np.full((1, 2, 2), 3))

    def test_from_config(self):
        """Encoder settings come from the conditioning section."""
        encoder = Encoder.from_config(ConditioningConfig(mask_encoding="onehot", label_max=4))
        assert encoder.mask_channels == 5

    @pytest.mark.parametrize(
        "kwargs", [{"kind": "vae"}, {"mask_encoding": "rgb"}, {"label_max": 0}]
    )
    def test_invalid_settings(self, kwargs):
        """Unknown kinds and encodings are rejected."""
        with pytest.raises(ValueError):
            Encoder(**kwargs)


@pytest.mark.unit
class TestConditionStack:
    """Test build_condition_stack."""

    def test_informed_repeated_n_times(self, encoder):
        """n = 8 -> 8 identical informed entries."""
        stack = build_condition_stack(np.zeros((8, 4, 4), dtype=int), _slice(0.3), encoder)
        assert stack.width == 8
        assert stack.spatial == (4, 4)
        assert stack.tensor().shape == (8, 2, 4, 4)
        informed = stack.informed_channels
        assert all(torch.equal(informed[k], informed[0]) for k in range(8))
        assert torch.allclose(stack.informed_channels, torch.full((8, 1, 4, 4), 0.3))

    def test_swapping_informed_changes_only_informed_channels(self, encoder):
        """Mask channels depend on the mask alone."""
        labels = np.random.default_rng(0).integers(0, 6, size=(4, 4, 4))
        a = build_condition_stack(labels, _slice(-0.5), encoder)
        b = build_condition_stack(labels, _slice(0.5), encoder)
        assert torch.equal(a.mask_channels, b.mask_channels)
        assert not torch.equal(a.informed_channels, b.informed_channels)

    def test_provenance_carried(self, encoder):
        """The stack records where its informed slice came from."""
        stack = build_condition_stack(np.zeros((2, 4, 4), dtype=int), _slice(0.0), encoder)
        assert stack.informed_provenance.kind == "file"

    def test_spatial_mismatch(self, encoder):
        """Informed slice must match the mask slices."""
        with pytest.raises(ShapeContractError):
            build_condition_stack(np.zeros((2, 4, 4), dtype=int), _slice(0.0, 8, 8), encoder)

    def test_informed_must_be_2d(self):
        """Informed slices are (h, w)."""
        with pytest.raises(ShapeContractError):
            InformedSlice(pixels=np.zeros((1, 4, 4)), provenance=InformedProvenance(kind="file"))


@pytest.mark.unit
class TestInformedSelection:
    """Test informed-slice selection policies."""

    def test_cross_selection_single_volume(self, dataset_dir):
        """IC from a one-volume manifest picks a slice of that volume."""
        manifest = load_manifest(dataset_dir)
        single = DatasetManifest(entries=manifest.entries[:1])
        volume, _ = load_entry(dataset_dir, single.entries[0])
        chosen = select_informed_slice(single, InformedPolicy.IC, seed=4, root=dataset_dir)
        assert chosen.provenance.volume_id == single.entries[0].id
        k = chosen.provenance.slice_index
        assert 0 <= k < volume.depth
        assert np.array_equal(chosen.pixels, volume.slice(k))

    def test_cross_selection_deterministic(self, dataset_dir):
        """Same seed -> same slice."""
        manifest = load_manifest(dataset_dir)
        a = select_informed_slice(manifest, "ic", seed=1, root=dataset_dir)
        b = select_informed_slice(manifest, "ic", seed=1, root=dataset_dir)
        assert a.provenance == b.provenance
        assert np.array_equal(a.pixels, b.pixels)

    def test_cross_selection_empty_manifest(self, dataset_dir):
        """An empty manifest has nothing to select."""
        with pytest.raises(ValueError, match="empty"):
            select_informed_slice(DatasetManifest(), InformedPolicy.IC, seed=0, root=dataset_dir)

    def test_generated_requires_model(self):
        """IG without a slice model is an error."""
        with pytest.raises(ValueError, match="slice model"):
            select_informed_slice(DatasetManifest(), InformedPolicy.IG, seed=0)

    def test_generated_slice(self, tiny_architecture, tiny_schedule, tiny_sampler):
        """IG produces a slice of the requested size tagged with its position."""
        model = init_slice_model(tiny_architecture, 0)
        chosen = select_informed_slice(
            DatasetManifest(),
            InformedPolicy.IG,
            seed=0,
            p=0.25,
            slice_model=model,
            schedule=tiny_schedule,
            sampler_config=tiny_sampler,
            spatial=(8, 8),
        )
        assert chosen.pixels.shape == (8, 8)
        assert chosen.provenance.kind == "generated"
        assert chosen.provenance.position == 0.25

    @pytest.mark.parametrize("seed", range(10))
    def test_self_selection_within_window(self, seed):
        """SELF picks a slice inside the given window."""
        volume = Volume(np.broadcast_to(np.linspace(-1, 1, 12)[:, None, None], (12, 4, 4)))
        chosen = select_informed_slice(
            DatasetManifest(), InformedPolicy.SELF, seed, volume=volume, window=(5, 4)
        )
        assert 5 <= chosen.provenance.slice_index < 9
        assert chosen.provenance.kind == "window"

    def test_self_selection_window_out_of_range(self):
        """Windows must fit in the volume."""
        volume = Volume(np.zeros((6, 4, 4)))
        with pytest.raises(ShapeContractError):
            select_informed_slice(DatasetManifest(), "self", 0, volume=volume, window=(4, 4))


@pytest.mark.unit
class TestInformedFiles:
    """Test loading informed slices from volume files."""

    def test_central_slice_by_default(self, tmp_path):
        """PATH selects the central slice."""
        voxels = np.broadcast_to(np.linspace(-1, 1, 7)[:, None, None], (7, 4, 4))
        path = tmp_path / "informed.vol"
        write_volume(path, Volume(voxels))
        chosen = load_informed_file(str(path))
        assert chosen.provenance.slice_index == 3
        assert chosen.provenance.kind == "file"
        assert np.allclose(chosen.pixels, 0.0)

    def test_explicit_index(self, tmp_path):
        """PATH#k selects slice k."""
        voxels = np.broadcast_to(np.linspace(-1, 1, 7)[:, None, None], (7, 4, 4))
        path = tmp_path / "informed.vol"
        write_volume(path, Volume(voxels))
        assert np.allclose(load_informed_file(f"{path}#0").pixels, -1.0)

    def test_missing_file(self, tmp_path):
        """Absent files are missing artifacts."""
        with pytest.raises(MissingArtifactError):
            load_informed_file(str(tmp_path / "nope.vol"))

    def test_slice_index_out_of_range(self):
        """slice_from_volume rejects indices outside the volume."""
        with pytest.raises(ShapeContractError):
            slice_from_volume(Volume(np.zeros((3, 4, 4))), 3)
