"""Tests for two-stage training, the position slice model and gradient checks."""

import numpy as np
import pandas as pd
import pytest
import torch

from mask_volume_synth.config import TrainConfig
from mask_volume_synth.denoiser import init_denoiser
from mask_volume_synth.exceptions import MissingArtifactError
from mask_volume_synth.models import DatasetManifest, Split, Stage
from mask_volume_synth.phantom import load_manifest
from mask_volume_synth.training import (
    gradient_check,
    load_training_data,
    make_gradient_sample,
    sample_window_batch,
    train_position_slice_model,
    train_stage,
    write_loss_trace,
)


@pytest.fixture
def training_data(dataset_dir):
    return load_training_data(load_manifest(dataset_dir), dataset_dir)


@pytest.fixture
def model(tiny_architecture):
    return init_denoiser(tiny_architecture, 0)


@pytest.fixture
def volumetric_config(tiny_train_config):
    return tiny_train_config.model_copy(update={"stage": Stage.VOLUMETRIC, "seed": 1})


@pytest.mark.unit
class TestTrainingData:
    """Test loading and window sampling."""

    def test_loads_train_split(self, training_data, dataset_dir):
        """Only train entries are loaded."""
        manifest = load_manifest(dataset_dir)
        assert training_data.ids == [e.id for e in manifest.by_split(Split.TRAIN)]
        assert len(training_data) == 3

    def test_empty_split(self, dataset_dir):
        """An empty split is a missing dataset artifact."""
        manifest = load_manifest(dataset_dir)
        train_only = DatasetManifest(entries=manifest.by_split(Split.TRAIN))
        with pytest.raises(MissingArtifactError, match="empty") as info:
            load_training_data(train_only, dataset_dir, split=Split.TEST)
        assert info.value.stage == "dataset"

    def test_window_batch_shapes(self, training_data, encoder):
        """b_v windows of n slices with matching condition rows."""
        x0, cond = sample_window_batch(training_data, 4, 2, np.random.default_rng(0), encoder)
        assert x0.shape == (8, 1, 16, 16)
        assert cond.shape == (8, 2, 16, 16)
        for w in range(2):
            informed = cond[4 * w : 4 * w + 4, 1]
            assert torch.equal(informed, informed[:1].expand_as(informed))
            # Self-selected informed slice lies inside its own window.
            window = x0[4 * w : 4 * w + 4, 0]
            assert any(torch.equal(informed[0], window[k]) for k in range(4))


@pytest.mark.unit
class TestTrainStage:
    """Test both training stages."""

    @pytest.fixture
    def run(self, training_data, tiny_schedule, encoder):
        def train(model, config):
            return train_stage(model, training_data, tiny_schedule, config, encoder)

        return train

    def test_deterministic(self, tiny_architecture, run, tiny_train_config):
        """Same seed and config -> identical weights and losses."""
        results = [run(init_denoiser(tiny_architecture, 0), tiny_train_config) for _ in range(2)]
        assert results[0].losses == results[1].losses
        first, second = results[0].model.state_dict(), results[1].model.state_dict()
        for name, value in first.items():
            assert torch.equal(value, second[name]), name

    def test_slice_stage_result(self, model, run, tiny_train_config):
        """Loss trace has one finite entry per iteration; slice steps are counted."""
        result = run(model, tiny_train_config)
        assert result.iterations == 3
        assert all(torch.isfinite(torch.tensor(result.losses)))
        assert result.stage == "slice"
        assert model.slice_steps == 3
        assert all(p.requires_grad for p in model.parameters())

    def test_slice_stage_leaves_depth_layers_at_identity(self, model, run, tiny_train_config):
        """Depth-axis layers are not updated by the slice stage."""
        run(model, tiny_train_config)
        for name, param in model.volumetric_parameters():
            assert torch.count_nonzero(param) == 0, name

    def test_volumetric_stage_freezes_slice_weights(
        self, model, run, tiny_train_config, volumetric_config
    ):
        """Stage 2 leaves every slice-stage parameter bit-identical."""
        run(model, tiny_train_config)
        before = {n: p.detach().clone() for n, p in model.slice_parameters()}
        depth_before = {n: p.detach().clone() for n, p in model.volumetric_parameters()}

        result = run(model, volumetric_config)

        assert result.stage == "volumetric"
        assert model.stage == Stage.VOLUMETRIC
        assert model.slice_steps == 3
        for name, param in model.slice_parameters():
            assert torch.equal(param, before[name]), name
        assert any(
            not torch.equal(param, depth_before[name])
            for name, param in model.volumetric_parameters()
        )

    def test_volumetric_stage_requires_slice_training(self, model, run, volumetric_config):
        """Stage 2 on an untrained model names the missing slice stage."""
        with pytest.raises(MissingArtifactError) as exc_info:
            run(model, volumetric_config)
        assert exc_info.value.stage == "slice"

    def test_window_longer_than_volumes(self, model, run):
        """Windows longer than every volume violate the shape contract."""
        with pytest.raises(ValueError):
            run(model, TrainConfig(iterations=1, batch_volumes=1, window_length=12))

    def test_loss_trace_csv(self, tmp_path, model, run, tiny_train_config):
        """Loss trace is written as (iteration, loss) CSV."""
        result = run(model, tiny_train_config)
        frame = pd.read_csv(write_loss_trace(tmp_path / "trace" / "loss.csv", result))
        assert list(frame.columns) == ["iteration", "loss"]
        assert frame["iteration"].tolist() == [1, 2, 3]
        assert frame["loss"].tolist() == pytest.approx(result.losses)


@pytest.mark.unit
class TestPositionModelTraining:
    """Test the position-conditioned slice model trainer."""

    def test_trains_and_is_deterministic(
        self, training_data, tiny_schedule, tiny_train_config, tiny_architecture
    ):
        """Two runs with one seed agree; losses are finite."""
        args = (training_data, tiny_schedule, tiny_train_config, tiny_architecture)
        a = train_position_slice_model(*args)
        b = train_position_slice_model(*args)
        assert a.iterations == 3
        assert a.stage == "position"
        assert a.losses == b.losses
        assert all(torch.isfinite(torch.tensor(a.losses)))


@pytest.mark.unit
class TestGradientCheck:
    """Test the finite-difference gradient check."""

    def test_passes_on_tiny_model(self, model, tiny_schedule):
        """Analytic and numeric gradients agree for every layer type."""
        with torch.no_grad():
            for _, param in model.volumetric_parameters():
                param.normal_(0, 0.02, generator=torch.Generator().manual_seed(5))
        sample = make_gradient_sample(model, tiny_schedule, window_length=4, spatial=(8, 8))
        report = gradient_check(model, sample, tolerance=1e-3, n_params=100)
        assert report.passed, report.worst
        assert report.max_relative_error < 1e-3
        assert report.checked >= 100
        assert len(report.worst) == 5
        assert {"Conv2d", "Conv1d", "GroupNorm", "Linear"} <= set(report.layer_types)

    def test_every_tensor_checked(self, model, tiny_schedule):
        """At least one scalar per parameter tensor, even with a small budget."""
        report = gradient_check(model, make_gradient_sample(model, tiny_schedule), n_params=1)
        assert report.checked == len(list(model.parameters()))

    def test_model_left_untouched(self, model, tiny_schedule):
        """The check runs on a copy."""
        before = {k: v.clone() for k, v in model.state_dict().items()}
        gradient_check(model, make_gradient_sample(model, tiny_schedule), n_params=10)
        assert all(torch.equal(before[k], v) for k, v in model.state_dict().items())
        assert next(model.parameters()).dtype == torch.float32
        assert model.stage == Stage.SLICE

    def test_zero_loss_gradients_vanish(self, model, tiny_schedule):
        """With the target set to the model output both gradients are ~0."""
        sample = make_gradient_sample(model, tiny_schedule)
        report = gradient_check(model, sample, n_params=20, zero_loss=True)
        for entry in report.worst:
            assert abs(entry.analytic) < 1e-12
            assert abs(entry.numeric) < 1e-6
