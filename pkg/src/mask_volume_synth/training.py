"""Two-stage denoiser training, position slice model training and gradient checks."""

import copy
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from torch import nn

from .conditioning import Encoder, build_condition_stack, slice_from_volume
from .config import ArchitectureConfig, TrainConfig
from .denoiser import DenoiserModel, SliceModel, init_slice_model, normalized_position
from .exceptions import MissingArtifactError, NumericFailureError, ShapeContractError
from .models import DatasetManifest, GradientCheckEntry, GradientCheckReport, Split, Stage
from .phantom import load_entry
from .schedule import NoiseSchedule
from .volume_io import MaskVolume, Volume

logger = logging.getLogger(__name__)

# Gradients below this magnitude are compared on an absolute scale.
GRADIENT_FLOOR = 1e-5


@dataclass
class TrainingData:
    """Train-split volumes held in memory."""

    ids: List[str]
    volumes: List[Volume]
    masks: List[MaskVolume]

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def min_depth(self) -> int:
        return min(v.depth for v in self.volumes)


@dataclass
class TrainingResult:
    """Trained model and its per-iteration loss trace."""

    model: nn.Module
    losses: List[float] = field(default_factory=list)
    stage: str = Stage.SLICE.value

    @property
    def iterations(self) -> int:
        return len(self.losses)


def load_training_data(
    manifest: DatasetManifest, root: Union[str, Path], split: Split = Split.TRAIN
) -> TrainingData:
    """Read every (volume, mask) pair of one split.

    Raises:
        MissingArtifactError: The split is empty
    """
    entries = manifest.by_split(split)
    if not entries:
        raise MissingArtifactError(f"{split.value} split of {root} is empty", stage="dataset")
    volumes, masks = [], []
    for entry in entries:
        volume, mask = load_entry(root, entry)
        if volume.voxels.shape != mask.labels.shape:
            raise ShapeContractError(f"volume and mask of {entry.id} have different dims")
        volumes.append(volume)
        masks.append(mask)
    logger.info(f"Loaded {len(entries)} {split.value} volumes from {root}")
    return TrainingData(ids=[e.id for e in entries], volumes=volumes, masks=masks)


def sample_window_batch(
    data: TrainingData,
    window_length: int,
    batch_volumes: int,
    rng: np.random.Generator,
    encoder: Encoder,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Draw b_v random windows with self-selected informed slices.

    Each window picks a volume uniformly, a start j uniformly in [0, Z - n] and
    an informed slice uniformly inside [j, j + n).

    Returns:
        (x0, cond) shaped (b_v * n, 1, h, w) and (b_v * n, c_cond, h, w)
    """
    n = window_length
    targets, conds = [], []
    for _ in range(batch_volumes):
        i = int(rng.integers(len(data)))
        volume, mask = data.volumes[i], data.masks[i]
        if volume.depth < n:
            raise ShapeContractError(
                f"volume {data.ids[i]} has {volume.depth} slices, window needs {n}"
            )
        j = int(rng.integers(volume.depth - n + 1))
        informed = slice_from_volume(volume, j + int(rng.integers(n)), data.ids[i], kind="window")
        stack = build_condition_stack(mask.window(j, n), informed, encoder)
        targets.append(encoder.encode(torch.from_numpy(volume.voxels[j : j + n]))[:, None])
        conds.append(stack.tensor())
    return torch.cat(targets), torch.cat(conds)


def _make_optimizer(params: Sequence[nn.Parameter], config: TrainConfig) -> torch.optim.Optimizer:
    if config.optimizer == "adamw":
        return torch.optim.AdamW(params, lr=config.learning_rate, weight_decay=config.weight_decay)
    return torch.optim.SGD(
        params, lr=config.learning_rate, momentum=config.momentum, weight_decay=config.weight_decay
    )


def _noised(
    x0: torch.Tensor, t: torch.Tensor, eps: torch.Tensor, schedule: NoiseSchedule
) -> torch.Tensor:
    alpha_bar = torch.tensor(schedule.alpha_bar, dtype=x0.dtype)[t - 1].view(-1, 1, 1, 1)
    return alpha_bar.sqrt() * x0 + (1.0 - alpha_bar).sqrt() * eps


def _step(
    loss: torch.Tensor,
    optimizer: torch.optim.Optimizer,
    params: Sequence[nn.Parameter],
    config: TrainConfig,
    iteration: int,
    label: str,
) -> float:
    if not torch.isfinite(loss):
        raise NumericFailureError(
            f"{label} loss became non-finite at iteration {iteration} "
            f"(lr={config.learning_rate}, optimizer={config.optimizer})"
        )
    optimizer.zero_grad()
    loss.backward()
    if config.grad_clip is not None:
        nn.utils.clip_grad_norm_(params, config.grad_clip)
    optimizer.step()
    return float(loss.item())


def _log_progress(label: str, iteration: int, losses: List[float], config: TrainConfig) -> None:
    if (iteration + 1) % config.log_every == 0 or iteration + 1 == config.iterations:
        recent = losses[-config.log_every :]
        logger.info(
            f"[{label}] iter {iteration + 1}/{config.iterations} loss {np.mean(recent):.5f}"
        )


def train_stage(
    model: DenoiserModel,
    data: TrainingData,
    schedule: NoiseSchedule,
    config: TrainConfig,
    encoder: Encoder,
) -> TrainingResult:
    """Minimize the noise-prediction MSE for one training stage.

    The slice stage draws an independent timestep per slice and updates every
    non-volumetric parameter. The volumetric stage shares one timestep across
    each window and only updates the depth-axis layers.

    Raises:
        MissingArtifactError: Volumetric stage on a model without slice training
        NumericFailureError: Loss became NaN or infinite
    """
    if len(data) == 0:
        raise ValueError("training data is empty")
    if encoder.mask_channels != model.descriptor.mask_channels:
        raise ShapeContractError(
            f"encoder yields {encoder.mask_channels} mask channels, model expects "
            f"{model.descriptor.mask_channels}"
        )
    volumetric = config.stage == Stage.VOLUMETRIC
    if volumetric and model.slice_steps == 0:
        raise MissingArtifactError(
            "volumetric tuning needs a slice-stage trained model", stage="slice"
        )
    model.stage = Stage(config.stage)

    trainable = model.volumetric_parameters() if volumetric else model.slice_parameters()
    params = [p for _, p in trainable]
    if not params:
        raise ValueError(f"no trainable parameters for the {config.stage.value} stage")
    for p in model.parameters():
        p.requires_grad_(False)
    for p in params:
        p.requires_grad_(True)

    optimizer = _make_optimizer(params, config)
    rng = np.random.default_rng(config.seed)
    generator = torch.Generator().manual_seed(config.seed)
    n, b_v = config.window_length, config.batch_volumes
    label = f"{config.stage.value} stage"
    losses: List[float] = []

    logger.info(
        f"Training {label}: {config.iterations} iterations, b_v={b_v}, n={n}, "
        f"{sum(p.numel() for p in params)} trainable parameters"
    )
    model.train()
    try:
        for iteration in range(config.iterations):
            x0, cond = sample_window_batch(data, n, b_v, rng, encoder)
            if volumetric:
                t = torch.randint(1, schedule.T + 1, (b_v,), generator=generator)
                t = t.repeat_interleave(n)
            else:
                t = torch.randint(1, schedule.T + 1, (b_v * n,), generator=generator)
            eps = torch.randn(x0.shape, generator=generator)
            x_t = _noised(x0, t, eps, schedule)
            pred = model(torch.cat([x_t, cond], dim=1), t, window_length=n, volumetric=volumetric)
            loss = F.mse_loss(pred, eps)
            losses.append(_step(loss, optimizer, params, config, iteration, label))
            _log_progress(label, iteration, losses, config)
    finally:
        for p in model.parameters():
            p.requires_grad_(True)
        model.eval()

    if not volumetric:
        model.slice_steps += config.iterations
    return TrainingResult(model=model, losses=losses, stage=config.stage.value)


def train_position_slice_model(
    data: TrainingData,
    schedule: NoiseSchedule,
    config: TrainConfig,
    descriptor: ArchitectureConfig,
    model: Optional[SliceModel] = None,
) -> TrainingResult:
    """Train the position-conditioned slice denoiser.

    Each iteration draws b_v * n slices uniformly over volumes and slice
    indices, with position p = k / (Z - 1).
    """
    if len(data) == 0:
        raise ValueError("training data is empty")
    if model is None:
        model = init_slice_model(descriptor, config.seed)
    params = list(model.parameters())
    optimizer = _make_optimizer(params, config)
    rng = np.random.default_rng(config.seed)
    generator = torch.Generator().manual_seed(config.seed)
    batch = config.slice_batch
    losses: List[float] = []

    logger.info(f"Training position slice model: {config.iterations} iterations, batch {batch}")
    model.train()
    for iteration in range(config.iterations):
        slices, positions = [], []
        for _ in range(batch):
            volume = data.volumes[int(rng.integers(len(data)))]
            k = int(rng.integers(volume.depth))
            slices.append(volume.slice(k))
            positions.append(normalized_position(k, volume.depth))
        x0 = torch.from_numpy(np.stack(slices))[:, None]
        p = torch.tensor(positions, dtype=torch.float32)
        t = torch.randint(1, schedule.T + 1, (batch,), generator=generator)
        eps = torch.randn(x0.shape, generator=generator)
        loss = F.mse_loss(model(_noised(x0, t, eps, schedule), t, p), eps)
        losses.append(_step(loss, optimizer, params, config, iteration, "position model"))
        _log_progress("position model", iteration, losses, config)
    model.eval()
    return TrainingResult(model=model, losses=losses, stage="position")


def write_loss_trace(path: Union[str, Path], result: TrainingResult) -> Path:
    """Write the loss trace as CSV (iteration, loss)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(
        {"iteration": np.arange(1, result.iterations + 1), "loss": result.losses}
    )
    frame.to_csv(path, index=False)
    return path


@dataclass
class GradientSample:
    """One fixed noisy window for gradient checking."""

    x_t: torch.Tensor
    cond: torch.Tensor
    t: torch.Tensor
    eps: torch.Tensor

    @property
    def window_length(self) -> int:
        return int(self.x_t.shape[0])


def make_gradient_sample(
    model: DenoiserModel,
    schedule: NoiseSchedule,
    window_length: int = 4,
    spatial: Tuple[int, int] = (8, 8),
    seed: int = 0,
) -> GradientSample:
    """Random window, condition and noise for a gradient check."""
    generator = torch.Generator().manual_seed(seed)
    n = window_length
    d = model.descriptor
    shape = (n, d.target_channels) + tuple(spatial)
    x0 = torch.rand(shape, generator=generator) * 2 - 1
    cond = torch.rand((n, d.condition_channels) + tuple(spatial), generator=generator) * 2 - 1
    t = torch.full((n,), int(torch.randint(1, schedule.T + 1, (1,), generator=generator)))
    eps = torch.randn(shape, generator=generator)
    x_t = _noised(x0, t, eps, schedule)
    return GradientSample(x_t=x_t, cond=cond, t=t, eps=eps)


def _layer_type(model: nn.Module, param_name: str) -> str:
    modules = dict(model.named_modules())
    owner = modules.get(param_name.rpartition(".")[0])
    return type(owner).__name__ if owner is not None else "Parameter"


def gradient_check(
    model: DenoiserModel,
    sample: GradientSample,
    tolerance: float = 1e-3,
    n_params: int = 100,
    step: float = 1e-4,
    seed: int = 0,
    zero_loss: bool = False,
) -> GradientCheckReport:
    """Compare autograd gradients of the denoising loss with central differences.

    Runs in float64 on a copy of ``model`` with depth-axis layers active. Every
    parameter tensor contributes at least one checked scalar; the rest are
    drawn at random up to ``n_params``.

    Args:
        model: Denoiser to check (left untouched)
        sample: Fixed noisy window, condition, timesteps and target noise
        tolerance: Pass threshold on the maximum relative error
        n_params: Minimum number of scalars to check
        step: Finite-difference step
        seed: Scalar selection seed
        zero_loss: Replace the target with the model output so the loss sits at 0
    """
    probe = copy.deepcopy(model).double()
    probe.stage = Stage.VOLUMETRIC
    x = torch.cat([sample.x_t, sample.cond], dim=1).double()
    n = sample.window_length
    target = sample.eps.double()
    if zero_loss:
        with torch.no_grad():
            target = probe(x, sample.t, window_length=n, volumetric=True).clone()

    def loss_fn() -> torch.Tensor:
        return F.mse_loss(probe(x, sample.t, window_length=n, volumetric=True), target)

    probe.zero_grad()
    loss_fn().backward()

    named = list(probe.named_parameters())
    rng = np.random.default_rng(seed)
    picks = [(name, int(rng.integers(p.numel()))) for name, p in named]
    sizes = np.array([p.numel() for _, p in named], dtype=np.float64)
    while len(picks) < n_params:
        k = int(rng.choice(len(named), p=sizes / sizes.sum()))
        picks.append((named[k][0], int(rng.integers(named[k][1].numel()))))

    params = dict(named)
    entries: List[GradientCheckEntry] = []
    for name, index in picks:
        param = params[name]
        analytic = float(param.grad.reshape(-1)[index])
        flat = param.data.view(-1)
        original = float(flat[index])
        with torch.no_grad():
            flat[index] = original + step
            plus = float(loss_fn())
            flat[index] = original - step
            minus = float(loss_fn())
            flat[index] = original
        numeric = (plus - minus) / (2 * step)
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), GRADIENT_FLOOR)
        entries.append(
            GradientCheckEntry(
                name=name,
                index=index,
                layer_type=_layer_type(probe, name),
                analytic=analytic,
                numeric=numeric,
                relative_error=rel,
            )
        )

    worst = sorted(entries, key=lambda e: e.relative_error, reverse=True)
    max_error = worst[0].relative_error if worst else 0.0
    report = GradientCheckReport(
        max_relative_error=max_error,
        tolerance=tolerance,
        passed=max_error < tolerance,
        checked=len(entries),
        layer_types=sorted({e.layer_type for e in entries}),
        worst=worst[:5],
    )
    logger.info(
        f"Gradient check: {report.checked} scalars, max relative error {max_error:.2e} "
        f"({'pass' if report.passed else 'FAIL'})"
    )
    return report
