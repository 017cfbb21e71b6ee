"""Tests for the GEMV checkpoint container."""

import struct

import pytest
import torch

from mask_volume_synth.checkpoint import (
    CHECKPOINT_VERSION,
    build_metadata,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    save_checkpoint,
)
from mask_volume_synth.config import ScheduleConfig
from mask_volume_synth.denoiser import init_denoiser, init_slice_model, predict_noise
from mask_volume_synth.exceptions import (
    ContainerFormatError,
    MagicMismatchError,
    MissingArtifactError,
    TruncatedPayloadError,
    VersionMismatchError,
)
from mask_volume_synth.models import Stage


@pytest.fixture
def denoiser(tiny_architecture):
    model = init_denoiser(tiny_architecture, 4)
    with torch.no_grad():
        for _, param in model.volumetric_parameters():
            param.normal_(0, 0.01, generator=torch.Generator().manual_seed(1))
    model.stage = Stage.VOLUMETRIC
    model.slice_steps = 12
    return model


@pytest.fixture
def schedule_config():
    return ScheduleConfig(T=50)


@pytest.mark.unit
class TestCheckpointRoundTrip:
    """Test save/load fidelity."""

    def test_save_load_save_identical_bytes(self, tmp_path, denoiser, schedule_config):
        """Re-saving a loaded checkpoint reproduces the file byte for byte."""
        first = save_checkpoint(
            tmp_path / "a.gemv", denoiser, build_metadata(denoiser, schedule_config, step=7, seed=3)
        )
        model, meta = load_checkpoint(first)
        second = save_checkpoint(tmp_path / "b.gemv", model, meta)
        assert first.read_bytes() == second.read_bytes()

    def test_metadata_preserved(self, tmp_path, denoiser, schedule_config):
        """Stage, steps, seed and schedule survive the round trip."""
        path = save_checkpoint(
            tmp_path / "m.gemv", denoiser, build_metadata(denoiser, schedule_config, step=7, seed=3)
        )
        model, meta = load_checkpoint(path)
        assert meta.kind == "denoiser"
        assert meta.step == 7
        assert meta.seed == 3
        assert meta.stage == Stage.VOLUMETRIC
        assert meta.slice_step == 12
        assert meta.schedule.T == 50
        assert model.stage == Stage.VOLUMETRIC
        assert model.slice_steps == 12

    def test_predictions_identical_after_load(
        self, tmp_path, denoiser, schedule_config, condition_factory
    ):
        """A loaded model predicts exactly what the saved one did."""
        meta = build_metadata(denoiser, schedule_config)
        path = save_checkpoint(tmp_path / "p.gemv", denoiser, meta)
        loaded, _ = load_checkpoint(path)
        denoiser.eval()
        window = torch.randn((4, 1, 8, 8), generator=torch.Generator().manual_seed(0))
        cond = condition_factory(4)
        with torch.no_grad():
            expected = predict_noise(denoiser, window, 9, cond)
            actual = predict_noise(loaded, window, 9, cond)
        assert torch.equal(expected, actual)

    def test_slice_model_round_trip(self, tmp_path, tiny_architecture, schedule_config):
        """Slice models load back as slice models."""
        model = init_slice_model(tiny_architecture, 2)
        path = save_checkpoint(
            tmp_path / "s.gemv", model, build_metadata(model, schedule_config, step=5)
        )
        loaded, meta = load_checkpoint(path)
        assert meta.kind == "slice"
        assert type(loaded).__name__ == "SliceModel"
        for key, value in model.state_dict().items():
            assert torch.equal(value, loaded.state_dict()[key])

    def test_no_temp_file_left(self, tmp_path, denoiser, schedule_config):
        """Atomic save leaves only the final file."""
        meta = build_metadata(denoiser, schedule_config)
        save_checkpoint(tmp_path / "ckpt" / "v.gemv", denoiser, meta)
        assert [p.name for p in (tmp_path / "ckpt").iterdir()] == ["v.gemv"]

    def test_kind_mismatch_rejected(self, tiny_architecture, denoiser, schedule_config):
        """Metadata kind must describe the model."""
        meta = build_metadata(init_slice_model(tiny_architecture, 0), schedule_config)
        with pytest.raises(ValueError):
            encode_checkpoint(denoiser, meta)


@pytest.mark.unit
class TestCheckpointErrors:
    """Test container failure modes."""

    @pytest.fixture
    def payload(self, denoiser, schedule_config):
        return encode_checkpoint(denoiser, build_metadata(denoiser, schedule_config))

    def test_missing_file(self, tmp_path):
        """Absent checkpoint -> MissingArtifactError."""
        with pytest.raises(MissingArtifactError):
            load_checkpoint(tmp_path / "nope.gemv")

    def test_bad_magic(self, payload):
        """Wrong magic -> MagicMismatchError."""
        with pytest.raises(MagicMismatchError):
            decode_checkpoint(b"XXXX" + payload[4:])

    def test_version_bump(self, payload):
        """Unknown version -> VersionMismatchError."""
        bumped = payload[:4] + struct.pack("<I", CHECKPOINT_VERSION + 1) + payload[8:]
        with pytest.raises(VersionMismatchError):
            decode_checkpoint(bumped)

    @pytest.mark.parametrize("keep", [3, 20, -1, -2])
    def test_truncated(self, payload, keep):
        """Cut anywhere -> TruncatedPayloadError."""
        with pytest.raises(TruncatedPayloadError):
            decode_checkpoint(payload[:keep])

    def test_descriptor_mismatch(self, tmp_path, denoiser, schedule_config, tiny_architecture):
        """Parameters that do not fit the descriptor are rejected."""
        meta = build_metadata(denoiser, schedule_config)
        meta.descriptor = tiny_architecture.model_copy(update={"volumetric_placements": ["mid"]})
        path = tmp_path / "bad.gemv"
        path.write_bytes(encode_checkpoint(denoiser, meta))
        with pytest.raises(ContainerFormatError, match="do not match"):
            load_checkpoint(path)

    def test_format_errors_name_the_file(self, tmp_path, payload):
        """Container errors carry the path."""
        path = tmp_path / "cut.gemv"
        path.write_bytes(payload[:-10])
        with pytest.raises(TruncatedPayloadError) as exc_info:
            load_checkpoint(path)
        assert exc_info.value.path == path
