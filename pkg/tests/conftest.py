"""Shared fixtures: tiny phantoms, a tiny denoiser and a short noise schedule."""

from pathlib import Path
from typing import Optional

import numpy as np
import pytest
import torch

from mask_volume_synth.conditioning import Encoder, InformedSlice, build_condition_stack
from mask_volume_synth.config import (
    ArchitectureConfig,
    CheckpointConfig,
    DatasetConfig,
    EvaluationConfig,
    RunConfig,
    SamplerConfig,
    TrainConfig,
)
from mask_volume_synth.models import InformedProvenance, PhantomSpec, Stage
from mask_volume_synth.phantom import generate_dataset, save_manifest, split_dataset
from mask_volume_synth.schedule import make_schedule


@pytest.fixture(autouse=True)
def _single_thread_torch():
    """Keep CPU math reproducible across runs."""
    threads = torch.get_num_threads()
    torch.set_num_threads(1)
    yield
    torch.set_num_threads(threads)


@pytest.fixture
def tiny_spec():
    """16x16 phantoms with 6 to 10 slices and a guaranteed lesion."""
    return PhantomSpec(height=16, width=16, depth_range=(6, 10), lesion_probability=1.0)


@pytest.fixture
def tiny_architecture():
    """Two-level denoiser with 8/16 channels."""
    return ArchitectureConfig(widths=[8, 16], time_embed_dim=16, groups=4, position_embed_dim=16)


@pytest.fixture
def tiny_schedule():
    """Linear schedule with 50 steps."""
    return make_schedule(T=50)


@pytest.fixture
def tiny_sampler():
    """Deterministic DDIM sampler over 4-slice windows."""
    return SamplerConfig(method="ddim", ddim_steps=10, eta=0.0, window_length=4, overlap=1)


@pytest.fixture
def encoder():
    """Identity encoder with scalar mask encoding."""
    return Encoder()


@pytest.fixture
def tiny_train_config():
    """Three slice-stage iterations on 2 windows of 4 slices."""
    return TrainConfig(iterations=3, batch_volumes=2, window_length=4, log_every=1, seed=0)


@pytest.fixture(scope="session")
def dataset_dir(tmp_path_factory) -> Path:
    """Six tiny phantoms split 3 train / 3 test (read-only for tests)."""
    spec = PhantomSpec(height=16, width=16, depth_range=(6, 10), lesion_probability=1.0)
    root = tmp_path_factory.mktemp("dataset")
    manifest = generate_dataset(spec, count=6, seed=0, root=root)
    save_manifest(root, split_dataset(manifest, 0.5, seed=0))
    return root


def make_tiny_config(root: Path, dataset: Path) -> RunConfig:
    """RunConfig sized for seconds-long CLI runs."""
    train = {"iterations": 2, "batch_volumes": 2, "window_length": 4, "log_every": 1}
    return RunConfig(
        dataset=DatasetConfig(
            path=dataset,
            count=6,
            train_fraction=0.5,
            phantom=PhantomSpec(height=16, width=16, depth_range=(6, 10), lesion_probability=1.0),
        ),
        schedule={"T": 20},
        architecture=ArchitectureConfig(
            widths=[8, 16], time_embed_dim=16, groups=4, position_embed_dim=16
        ),
        train_slice=TrainConfig(**train, seed=0),
        train_volume=TrainConfig(**train, stage=Stage.VOLUMETRIC, seed=1),
        train_position=TrainConfig(**train, seed=2),
        sampler=SamplerConfig(ddim_steps=5, window_length=4, overlap=1),
        evaluation=EvaluationConfig(ms_ssim_scales=1),
        checkpoints=CheckpointConfig(
            slice_model=root / "checkpoints" / "slice.gemv",
            volume_model=root / "checkpoints" / "volume.gemv",
            position_model=root / "checkpoints" / "position.gemv",
        ),
        output_dir=root / "output",
    )


@pytest.fixture
def tiny_config(tmp_path, dataset_dir) -> RunConfig:
    """Tiny run configuration over the shared dataset."""
    return make_tiny_config(tmp_path, dataset_dir)


@pytest.fixture
def condition_factory(encoder):
    """Build a random condition stack of n slices of h x w."""

    def make(n: int, h: int = 8, w: int = 8, seed: int = 0, informed_value: Optional[float] = None):
        rng = np.random.default_rng(seed)
        labels = rng.integers(0, 6, size=(n, h, w))
        if informed_value is None:
            pixels = rng.uniform(-1, 1, size=(h, w))
        else:
            pixels = np.full((h, w), informed_value)
        informed = InformedSlice(
            pixels=pixels,
            provenance=InformedProvenance(kind="volume", volume_id="x", slice_index=0),
        )
        return build_condition_stack(labels, informed, encoder)

    return make
