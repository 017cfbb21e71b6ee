"""Reverse diffusion, pinned window sampling and bi-directional volume assembly."""

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from torch import nn

from .conditioning import ConditionStack, Encoder, InformedSlice, build_condition_stack
from .config import SamplerConfig
from .denoiser import DenoiserModel, SliceModel, predict_noise
from .exceptions import NumericFailureError, PlanError, ShapeContractError
from .models import AssemblyRecord, Direction, InformedProvenance, WindowJob, WindowPlan
from .schedule import NoiseSchedule
from .volume_io import MaskVolume, Volume

logger = logging.getLogger(__name__)

NoisePredictor = Callable[[torch.Tensor, int, ConditionStack], torch.Tensor]
Predictor = Union[DenoiserModel, NoisePredictor]


def _as_predictor(
    model: Predictor, volumetric: Optional[bool], T: Optional[int] = None
) -> NoisePredictor:
    if isinstance(model, nn.Module):
        return lambda w, t, cond: predict_noise(model, w, t, cond, volumetric=volumetric, T=T)
    return model


class GaussianOracle:
    """Closed-form optimal noise predictor for data x0 ~ Normal(mu, std^2).

    eps(x_t) = sqrt(1 - abar) (x_t - sqrt(abar) mu) / (abar std^2 + 1 - abar)
    """

    def __init__(self, mu: float, std: float, schedule: NoiseSchedule):
        self.mu = mu
        self.std = std
        self.schedule = schedule

    def __call__(
        self, w_t: torch.Tensor, t: int, cond: Optional[ConditionStack] = None
    ) -> torch.Tensor:
        ab = self.schedule.alpha_bar_at(t)
        return math.sqrt(1.0 - ab) * (w_t - math.sqrt(ab) * self.mu) / (ab * self.std**2 + 1.0 - ab)


def ddpm_update(
    w_t: torch.Tensor,
    eps_hat: torch.Tensor,
    alpha_t: float,
    alpha_bar_t: float,
    sigma_t: float,
    z: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """w_{t-1} = (w_t - (1 - a_t) / sqrt(1 - abar_t) eps) / sqrt(a_t) + sigma_t z."""
    if eps_hat.shape != w_t.shape:
        raise ShapeContractError(
            f"noise prediction {tuple(eps_hat.shape)} != latent {tuple(w_t.shape)}"
        )
    out = (w_t - (1.0 - alpha_t) / math.sqrt(1.0 - alpha_bar_t) * eps_hat) / math.sqrt(alpha_t)
    if z is not None:
        if z.shape != w_t.shape:
            raise ShapeContractError(f"noise z {tuple(z.shape)} != latent {tuple(w_t.shape)}")
        out = out + sigma_t * z
    return out


def ddim_update(
    w_t: torch.Tensor,
    eps_hat: torch.Tensor,
    alpha_bar_t: float,
    alpha_bar_prev: float,
    eta: float,
    z: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Generalized DDIM update from step t to an earlier step (abar_prev > abar_t)."""
    if eps_hat.shape != w_t.shape:
        raise ShapeContractError(
            f"noise prediction {tuple(eps_hat.shape)} != latent {tuple(w_t.shape)}"
        )
    x0_pred = (w_t - math.sqrt(1.0 - alpha_bar_t) * eps_hat) / math.sqrt(alpha_bar_t)
    sigma = (
        eta
        * math.sqrt((1.0 - alpha_bar_prev) / (1.0 - alpha_bar_t))
        * math.sqrt(max(1.0 - alpha_bar_t / alpha_bar_prev, 0.0))
    )
    direction = math.sqrt(max(1.0 - alpha_bar_prev - sigma**2, 0.0))
    out = math.sqrt(alpha_bar_prev) * x0_pred + direction * eps_hat
    if sigma > 0.0 and z is not None:
        out = out + sigma * z
    return out


@torch.no_grad()
def ddpm_step(
    model: Predictor,
    w_t: torch.Tensor,
    t: int,
    cond: ConditionStack,
    schedule: NoiseSchedule,
    z: Optional[torch.Tensor] = None,
    volumetric: Optional[bool] = None,
) -> torch.Tensor:
    """One ancestral step t -> t-1. The noise term is dropped at t = 1."""
    schedule.check_timestep(t)
    eps_hat = _as_predictor(model, volumetric, schedule.T)(w_t, t, cond)
    return ddpm_update(
        w_t,
        eps_hat,
        schedule.alpha_at(t),
        schedule.alpha_bar_at(t),
        schedule.sigma_at(t),
        None if t == 1 else z,
    )


@torch.no_grad()
def ddim_step(
    model: Predictor,
    w_t: torch.Tensor,
    t: int,
    t_prev: int,
    cond: ConditionStack,
    schedule: NoiseSchedule,
    eta: float = 0.0,
    z: Optional[torch.Tensor] = None,
    volumetric: Optional[bool] = None,
) -> torch.Tensor:
    """One DDIM step t -> t_prev (t_prev = 0 lands on the clean estimate)."""
    if t_prev >= t:
        raise ValueError(f"t_prev ({t_prev}) must be smaller than t ({t})")
    if eta < 0:
        raise ValueError("eta must be >= 0")
    schedule.check_timestep(t)
    eps_hat = _as_predictor(model, volumetric, schedule.T)(w_t, t, cond)
    alpha_bar, alpha_bar_prev = schedule.alpha_bar_at(t), schedule.alpha_bar_at(t_prev)
    return ddim_update(w_t, eps_hat, alpha_bar, alpha_bar_prev, eta, z)


@dataclass
class PinSpec:
    """Clean latents o_0 held fixed at window-local positions."""

    positions: List[int]
    latents: torch.Tensor

    def __post_init__(self) -> None:
        if self.latents.ndim != 4 or self.latents.shape[0] != len(self.positions):
            raise ShapeContractError(
                f"{len(self.positions)} pin positions but latents of shape "
                f"{tuple(self.latents.shape)}"
            )
        if len(set(self.positions)) != len(self.positions):
            raise PlanError("duplicate pin positions")


def _step_pairs(schedule: NoiseSchedule, config: SamplerConfig) -> List[Tuple[int, int]]:
    steps = schedule.sampling_timesteps(config.method, config.ddim_steps)
    return list(zip(steps, steps[1:] + [0]))


def _reverse_loop(
    predict: Callable[[torch.Tensor, int], torch.Tensor],
    shape: Tuple[int, ...],
    schedule: NoiseSchedule,
    config: SamplerConfig,
    generator: torch.Generator,
    pin: Optional[PinSpec] = None,
) -> torch.Tensor:
    w = torch.randn(shape, generator=generator)
    stochastic = config.method == "ddpm" or config.eta > 0
    for t, t_prev in _step_pairs(schedule, config):
        eps_hat = predict(w, t)
        if config.method == "ddpm":
            z = torch.randn(shape, generator=generator) if t > 1 else None
            w = ddpm_update(
                w, eps_hat, schedule.alpha_at(t), schedule.alpha_bar_at(t), schedule.sigma_at(t), z
            )
        else:
            z = torch.randn(shape, generator=generator) if config.eta > 0 else None
            w = ddim_update(
                w, eps_hat, schedule.alpha_bar_at(t), schedule.alpha_bar_at(t_prev), config.eta, z
            )
        if pin is not None:
            ab_prev = schedule.alpha_bar_at(t_prev)
            noised = math.sqrt(ab_prev) * pin.latents
            if stochastic and t_prev > 0:
                eps = torch.randn(pin.latents.shape, generator=generator)
                noised = noised + math.sqrt(1.0 - ab_prev) * eps
            w[pin.positions] = noised
    if not torch.all(torch.isfinite(w)):
        raise NumericFailureError("reverse diffusion produced non-finite values")
    return w


@torch.no_grad()
def sample_window(
    model: Predictor,
    cond: ConditionStack,
    config: SamplerConfig,
    pin: Optional[PinSpec],
    schedule: NoiseSchedule,
    seed: int,
    volumetric: Optional[bool] = None,
    channels: Optional[int] = None,
) -> torch.Tensor:
    """Reverse-sample one window of n slices, overwriting pinned latents every step.

    Args:
        model: Volume denoiser or any noise predictor callable
        cond: Condition stack of width n
        config: Sampler settings; pins are ignored when overlapped inpainting is off
        pin: Optional pinned clean latents
        schedule: Noise schedule
        seed: Seed of this window's noise stream
        volumetric: Run depth-axis layers (defaults to ``config.volumetric``)
        channels: Target channels (defaults to the model's, or 1 for callables)

    Returns:
        (n, channels, h, w) latents
    """
    n = cond.width
    if channels is None:
        channels = model.descriptor.target_channels if isinstance(model, DenoiserModel) else 1
    shape = (n, channels) + cond.spatial
    if pin is not None:
        bad = [pos for pos in pin.positions if not 0 <= pos < n]
        if bad:
            raise PlanError(f"pin positions {bad} outside window of length {n}")
        if tuple(pin.latents.shape[1:]) != shape[1:]:
            raise ShapeContractError(
                f"pinned latents {tuple(pin.latents.shape)} do not match window {shape}"
            )
    if not config.overlapped_inpainting:
        pin = None
    if volumetric is None:
        volumetric = config.volumetric
    predictor = _as_predictor(model, volumetric, schedule.T)
    generator = torch.Generator().manual_seed(seed)
    return _reverse_loop(
        lambda w, t: predictor(w, t, cond), shape, schedule, config, generator, pin
    )


@torch.no_grad()
def sample_informed_slice(
    slice_model: SliceModel,
    p: float,
    schedule: NoiseSchedule,
    config: SamplerConfig,
    seed: int,
    spatial: Tuple[int, int] = (32, 32),
) -> np.ndarray:
    """Reverse-sample one (h, w) slice at normalized position ``p``."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"position {p} outside [0, 1]")
    shape = (1, slice_model.descriptor.target_channels) + tuple(spatial)
    p_tensor = torch.tensor([p], dtype=torch.float32)
    generator = torch.Generator().manual_seed(seed)
    w = _reverse_loop(
        lambda x, t: slice_model(x, torch.full((1,), t), p_tensor),
        shape,
        schedule,
        config,
        generator,
    )
    return w[0, 0].clamp(-1.0, 1.0).numpy().astype(np.float32)


def window_plan(p: float, n: int, h: int, Z: int) -> WindowPlan:  # noqa: N803
    """Plan bi-directional propagation from a start window at floor(p Z).

    DOWN jobs advance by n - h and pin the leftmost overlap; UP jobs retreat by
    n - h and pin the rightmost. Terminal windows are clamped to the volume and
    pin every previously generated slice they cover. DOWN runs before UP.

    Raises:
        PlanError: Z < n, h outside [1, n), or p outside [0, 1]
    """
    if Z < n:
        raise PlanError(f"volume shorter than window (Z={Z} < n={n})")
    if not 1 <= h < n:
        raise PlanError(f"overlap h={h} must satisfy 1 <= h < n={n}")
    if not 0.0 <= p <= 1.0:
        raise PlanError(f"start position p={p} outside [0, 1]")

    stride = n - h
    first = min(max(math.floor(p * Z), 0), Z - n)
    jobs = [WindowJob(index=0, start=first, length=n, direction=Direction.INITIAL)]
    lo, hi = first, first + n

    start = first
    while hi < Z:
        start = min(start + stride, Z - n)
        pinned = list(range(start, hi))
        jobs.append(
            WindowJob(
                index=len(jobs),
                start=start,
                length=n,
                direction=Direction.DOWN,
                pinned=pinned,
                informed_index=max(pinned),
            )
        )
        hi = start + n

    start = first
    while lo > 0:
        start = max(start - stride, 0)
        pinned = list(range(lo, start + n))
        jobs.append(
            WindowJob(
                index=len(jobs),
                start=start,
                length=n,
                direction=Direction.UP,
                pinned=pinned,
                informed_index=min(pinned),
            )
        )
        lo = start

    return WindowPlan(jobs=jobs, total_z=Z, window_length=n, overlap=h)


def derive_seed(base_seed: int, job_index: int) -> int:
    """Independent per-job seed: sha256 of (base seed, job index)."""
    digest = hashlib.sha256(f"{base_seed}:{job_index}".encode("ascii")).digest()
    return int.from_bytes(digest[:4], "little") & 0x7FFFFFFF


@dataclass
class AssemblyResult:
    """Assembled volume plus its plan and per-job log."""

    volume: Volume
    plan: WindowPlan
    records: List[AssemblyRecord] = field(default_factory=list)
    latents: Optional[torch.Tensor] = field(default=None, repr=False)


def assemble_volume(
    model: Predictor,
    mask_volume: MaskVolume,
    p: float,
    informed: InformedSlice,
    config: SamplerConfig,
    schedule: NoiseSchedule,
    seed: int,
    encoder: Encoder,
    volumetric: Optional[bool] = None,
) -> AssemblyResult:
    """Generate a full volume for ``mask_volume`` by bi-directional propagation.

    The first window is conditioned on ``informed``; every later window reuses
    the generated slice at its frontier pin as its informed slice and pins all
    of its overlap with earlier output.

    Args:
        model: Volume denoiser (or noise predictor callable)
        mask_volume: Mask to follow, Z >= window length
        p: Normalized start position of the first window
        informed: Initial informed slice (resolved by the caller under IC/IG/file policies)
        config: Sampler settings
        schedule: Noise schedule
        seed: Base seed; job k samples with ``derive_seed(seed, k)``
        encoder: Condition encoder

    Returns:
        AssemblyResult with exactly Z slices clamped to [-1, 1]
    """
    depth = mask_volume.depth
    height, width = mask_volume.labels.shape[1:]
    n = config.window_length
    plan = window_plan(p, n, config.overlap, depth)
    channels = model.descriptor.target_channels if isinstance(model, DenoiserModel) else 1
    latents = torch.zeros((depth, channels, height, width))
    records: List[AssemblyRecord] = []

    for job in plan.jobs:
        if job.informed_index is None:
            current = informed
        else:
            pixels = encoder.decode(latents[job.informed_index, 0]).clamp(-1.0, 1.0).numpy()
            current = InformedSlice(
                pixels=pixels,
                provenance=InformedProvenance(kind="window", slice_index=job.informed_index),
            )
        cond = build_condition_stack(mask_volume.window(job.start, n), current, encoder)
        pin = PinSpec(job.local_pins, latents[job.pinned].clone()) if job.pinned else None
        job_seed = derive_seed(seed, job.index)
        window = sample_window(model, cond, config, pin, schedule, job_seed, volumetric, channels)
        for k in job.generated:
            latents[k] = window[k - job.start]
        records.append(
            AssemblyRecord(
                job_index=job.index,
                start=job.start,
                direction=job.direction,
                pinned_indices=list(job.pinned),
                informed_provenance=current.provenance,
                volume_informed_provenance=informed.provenance,
                seed=job_seed,
            )
        )
        logger.debug(
            f"Job {job.index} {job.direction.value} [{job.start}, {job.stop}) "
            f"pinned={len(job.pinned)} seed={job_seed}"
        )

    voxels = encoder.decode(latents[:, 0]).clamp(-1.0, 1.0).numpy()
    return AssemblyResult(volume=Volume(voxels), plan=plan, records=records, latents=latents)


def write_assembly_log(path: Union[str, Path], records: Sequence[AssemblyRecord]) -> Path:
    """Write one JSON object per job."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for record in records:
            f.write(json.dumps(record.model_dump(mode="json"), sort_keys=True) + "\n")
    return path


def read_assembly_log(path: Union[str, Path]) -> List[AssemblyRecord]:
    """Parse a JSON-lines assembly log."""
    with open(path, "r", encoding="utf-8") as f:
        return [AssemblyRecord.model_validate_json(line) for line in f if line.strip()]
