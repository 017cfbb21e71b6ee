"""Diffusion noise schedule and closed-form forward corruption.

Timesteps are 1-based (t in [1, T]); array index t-1 holds step t and
``alpha_bar_at(0) == 1``.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List

import numpy as np

from .config import ScheduleConfig
from .exceptions import ShapeContractError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class NoiseSchedule:
    """Immutable beta / alpha / alpha-bar / sigma tables."""

    kind: str
    T: int
    beta_start: float
    beta_end: float
    sigma_kind: str
    beta: np.ndarray = field(repr=False)
    alpha: np.ndarray = field(repr=False)
    alpha_bar: np.ndarray = field(repr=False)
    sigma: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        for name in ("beta", "alpha", "alpha_bar", "sigma"):
            getattr(self, name).setflags(write=False)
        if np.any(np.diff(self.alpha_bar) >= 0):
            raise ValueError("alpha_bar must be strictly decreasing")

    def check_timestep(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside [1, {self.T}]")

    def beta_at(self, t: int) -> float:
        self.check_timestep(t)
        return float(self.beta[t - 1])

    def alpha_at(self, t: int) -> float:
        self.check_timestep(t)
        return float(self.alpha[t - 1])

    def alpha_bar_at(self, t: int) -> float:
        """Cumulative product; 1.0 at t = 0."""
        if t == 0:
            return 1.0
        self.check_timestep(t)
        return float(self.alpha_bar[t - 1])

    def sigma_at(self, t: int) -> float:
        self.check_timestep(t)
        return float(self.sigma[t - 1])

    def sampling_timesteps(self, method: str, ddim_steps: int) -> List[int]:
        """Descending timesteps visited by a sampler (each followed by its successor, then 0)."""
        if method == "ddpm":
            return list(range(self.T, 0, -1))
        if not 1 <= ddim_steps <= self.T:
            raise ValueError(f"ddim_steps must lie in [1, {self.T}]")
        steps = np.unique(np.round(np.linspace(1, self.T, ddim_steps)).astype(int))
        return [int(t) for t in steps[::-1]]

    def to_metadata(self) -> Dict[str, Any]:
        """Parameters stored in checkpoint metadata."""
        return {
            "kind": self.kind,
            "T": self.T,
            "beta_start": self.beta_start,
            "beta_end": self.beta_end,
            "sigma_kind": self.sigma_kind,
        }


def make_schedule(
    kind: str = "linear",
    T: int = 1000,
    beta_start: float = 1e-4,
    beta_end: float = 2e-2,
    sigma_kind: str = "beta",
) -> NoiseSchedule:
    """Build a noise schedule.

    Args:
        kind: Schedule kind (only ``linear``)
        T: Number of diffusion steps (>= 2)
        beta_start: First beta, in (0, 1)
        beta_end: Last beta, in [beta_start, 1)
        sigma_kind: ``beta`` for sigma_t = sqrt(beta_t), ``posterior`` for the
            posterior variance beta_t (1 - abar_{t-1}) / (1 - abar_t)

    Returns:
        NoiseSchedule

    Raises:
        pydantic.ValidationError: Parameter bounds violated (names the field)
    """
    cfg = ScheduleConfig(
        kind=kind, T=T, beta_start=beta_start, beta_end=beta_end, sigma_kind=sigma_kind
    )
    beta = np.linspace(cfg.beta_start, cfg.beta_end, cfg.T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    if cfg.sigma_kind == "beta":
        sigma = np.sqrt(beta)
    else:
        alpha_bar_prev = np.concatenate([[1.0], alpha_bar[:-1]])
        sigma = np.sqrt(beta * (1.0 - alpha_bar_prev) / (1.0 - alpha_bar))
    logger.debug(f"Built {cfg.kind} schedule T={cfg.T}, alpha_bar_T={alpha_bar[-1]:.3e}")
    return NoiseSchedule(
        kind=cfg.kind,
        T=cfg.T,
        beta_start=cfg.beta_start,
        beta_end=cfg.beta_end,
        sigma_kind=cfg.sigma_kind,
        beta=beta,
        alpha=alpha,
        alpha_bar=alpha_bar,
        sigma=sigma,
    )


def schedule_from_config(cfg: ScheduleConfig) -> NoiseSchedule:
    """Build the schedule described by a config section or checkpoint metadata."""
    return make_schedule(cfg.kind, cfg.T, cfg.beta_start, cfg.beta_end, cfg.sigma_kind)


def forward_diffuse(x0, t: int, eps, schedule: NoiseSchedule):
    """Corrupt ``x0`` to step ``t``: sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.

    Works elementwise on numpy arrays and torch tensors alike.
    """
    if tuple(x0.shape) != tuple(eps.shape):
        raise ShapeContractError(f"x0 shape {tuple(x0.shape)} != eps shape {tuple(eps.shape)}")
    schedule.check_timestep(t)
    alpha_bar = schedule.alpha_bar_at(t)
    return math.sqrt(alpha_bar) * x0 + math.sqrt(1.0 - alpha_bar) * eps
