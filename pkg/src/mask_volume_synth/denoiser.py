"""Conditional volume denoiser and position-conditioned slice denoiser.

Both are small two-level encoder-decoder networks with skip connections and a
sinusoidal time embedding added in every residual block. The volume denoiser
takes the noisy target concatenated with its condition channels and carries
identity-initialized depth-axis layers; the slice denoiser adds a position
embedding to the time pathway instead.
"""

import logging
import math
from typing import TYPE_CHECKING, Dict, Iterator, List, Optional, Tuple, Union

import torch
import torch.nn.functional as F
from torch import nn

from .config import ArchitectureConfig
from .exceptions import ShapeContractError
from .models import Stage
from .volumetric import DepthConv

if TYPE_CHECKING:
    from .conditioning import ConditionStack

logger = logging.getLogger(__name__)

# Positions in [0, 1] are stretched onto the timestep range before embedding.
POSITION_SCALE = 1000.0


def sinusoidal_embedding(
    values: torch.Tensor, dim: int, max_period: float = 10000.0
) -> torch.Tensor:
    """Transformer-style sin/cos embedding of a 1D tensor of scalars."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(max_period) * torch.arange(half, dtype=torch.float64) / half
    ).to(values.device)
    args = values.to(torch.float64)[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1).to(torch.float32)


def normalized_position(index: int, depth: int) -> float:
    """Slice index -> p = index / (Z - 1) in [0, 1] (0 for single-slice volumes)."""
    if not 0 <= index < depth:
        raise ValueError(f"slice index {index} outside [0, {depth})")
    return index / (depth - 1) if depth > 1 else 0.0


def position_embedding(p: Union[float, torch.Tensor], width: int) -> torch.Tensor:
    """Sinusoidal embedding of normalized positions, shape (batch, width)."""
    values = torch.as_tensor(p, dtype=torch.float32).reshape(-1)
    if torch.any(values < 0) or torch.any(values > 1):
        raise ValueError("positions must lie in [0, 1]")
    return sinusoidal_embedding(values * POSITION_SCALE, width)


class _ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, emb_dim: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.emb = nn.Linear(emb_dim, out_ch)
        self.norm2 = nn.GroupNorm(groups, out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb(F.silu(emb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class _UNet(nn.Module):
    """Shared encoder-decoder backbone."""

    def __init__(self, descriptor: ArchitectureConfig, in_channels: int, placements: List[str]):
        super().__init__()
        self.descriptor = descriptor
        widths = descriptor.widths
        d = descriptor.time_embed_dim
        g = descriptor.groups
        levels = len(widths)

        self.time_mlp = nn.Sequential(nn.Linear(d, d), nn.SiLU(), nn.Linear(d, d))
        self.in_conv = nn.Conv2d(in_channels, widths[0], 3, padding=1)
        self.enc = nn.ModuleList(
            _ResBlock(widths[max(i - 1, 0)], widths[i], d, g) for i in range(levels)
        )
        self.down = nn.ModuleList(
            nn.Conv2d(widths[i], widths[i], 3, stride=2, padding=1) for i in range(levels - 1)
        )
        self.mid = _ResBlock(widths[-1], widths[-1], d, g)
        self.up = nn.ModuleList(
            nn.Conv2d(widths[i + 1], widths[i], 3, padding=1) for i in range(levels - 1)
        )
        self.dec = nn.ModuleList(_ResBlock(2 * widths[i], widths[i], d, g) for i in range(levels))
        self.out_norm = nn.GroupNorm(g, widths[0])
        self.out_conv = nn.Conv2d(widths[0], descriptor.target_channels, 3, padding=1)

        site_channels = {f"enc{i}": widths[i] for i in range(levels)}
        site_channels["mid"] = widths[-1]
        site_channels.update({f"dec{i}": widths[i] for i in range(levels)})
        self.volumetric = nn.ModuleDict(
            {site: DepthConv(site_channels[site]) for site in placements}
        )

    @property
    def spatial_multiple(self) -> int:
        """Slice height and width must be multiples of this."""
        return 2 ** (len(self.descriptor.widths) - 1)

    def _site(self, name: str, h: torch.Tensor, n: Optional[int]) -> torch.Tensor:
        if n is not None and name in self.volumetric:
            return self.volumetric[name](h, n)
        return h

    def _backbone(self, x: torch.Tensor, emb: torch.Tensor, n: Optional[int]) -> torch.Tensor:
        if x.shape[-1] % self.spatial_multiple or x.shape[-2] % self.spatial_multiple:
            raise ShapeContractError(
                f"slice size {tuple(x.shape[-2:])} not divisible by {self.spatial_multiple}"
            )
        levels = len(self.descriptor.widths)
        h = self.in_conv(x)
        skips = []
        for i in range(levels):
            h = self._site(f"enc{i}", self.enc[i](h, emb), n)
            skips.append(h)
            if i < levels - 1:
                h = self.down[i](h)
        h = self._site("mid", self.mid(h, emb), n)
        for i in reversed(range(levels)):
            if i < levels - 1:
                h = self.up[i](F.interpolate(h, scale_factor=2, mode="nearest"))
            h = self.dec[i](torch.cat([h, skips[i]], dim=1), emb)
            h = self._site(f"dec{i}", h, n)
        return self.out_conv(F.silu(self.out_norm(h)))

    def _time_embedding(self, t: torch.Tensor, batch: int, dtype: torch.dtype) -> torch.Tensor:
        t = torch.as_tensor(t).reshape(-1)
        if t.numel() == 1:
            t = t.expand(batch)
        if t.numel() != batch:
            raise ShapeContractError(f"{t.numel()} timesteps for a batch of {batch}")
        emb = sinusoidal_embedding(t.to(torch.float64), self.descriptor.time_embed_dim).to(dtype)
        return self.time_mlp(emb)


class DenoiserModel(_UNet):
    """Conditional volume denoiser.

    Input channels are [target | mask | informed]. In the slice stage the
    depth-axis layers are bypassed; in the volumetric stage they run over
    windows of ``window_length`` consecutive slices.
    """

    def __init__(self, descriptor: ArchitectureConfig, stage: Stage = Stage.SLICE):
        in_channels = descriptor.target_channels + descriptor.condition_channels
        super().__init__(descriptor, in_channels, descriptor.placements())
        self.stage = Stage(stage)
        # Slice-stage iterations behind these weights; volumetric tuning requires > 0.
        self.slice_steps = 0

    @property
    def in_channels(self) -> int:
        return self.descriptor.target_channels + self.descriptor.condition_channels

    def forward(
        self,
        x: torch.Tensor,
        t: torch.Tensor,
        window_length: Optional[int] = None,
        volumetric: Optional[bool] = None,
    ) -> torch.Tensor:
        """Predict noise for a (b_v * n, in_channels, h, w) batch.

        Args:
            x: Noisy target concatenated with condition channels
            t: One timestep per slice, or a single shared timestep
            window_length: Slices per window (defaults to the whole batch)
            volumetric: Run depth-axis layers (defaults to ``stage == volumetric``)
        """
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeContractError(
                f"expected (B, {self.in_channels}, h, w) input, got {tuple(x.shape)}"
            )
        if volumetric is None:
            volumetric = self.stage == Stage.VOLUMETRIC
        n = (window_length or x.shape[0]) if volumetric else None
        emb = self._time_embedding(t, x.shape[0], x.dtype)
        return self._backbone(x, emb, n)

    def volumetric_parameters(self) -> Iterator[Tuple[str, nn.Parameter]]:
        """Parameters of the depth-axis layers."""
        for name, param in self.named_parameters():
            if name.startswith("volumetric."):
                yield name, param

    def slice_parameters(self) -> Iterator[Tuple[str, nn.Parameter]]:
        """Every parameter that is not part of a depth-axis layer."""
        for name, param in self.named_parameters():
            if not name.startswith("volumetric."):
                yield name, param


class SliceModel(_UNet):
    """Unconditional slice denoiser guided by a normalized position embedding."""

    def __init__(self, descriptor: ArchitectureConfig):
        super().__init__(descriptor, descriptor.target_channels, placements=[])
        d = descriptor.time_embed_dim
        self.position_mlp = nn.Sequential(
            nn.Linear(descriptor.position_embed_dim, d), nn.SiLU(), nn.Linear(d, d)
        )

    @property
    def position_width(self) -> int:
        return self.descriptor.position_embed_dim

    def forward(self, x: torch.Tensor, t: torch.Tensor, p: torch.Tensor) -> torch.Tensor:
        """Predict noise for (B, target, h, w) slices at normalized positions ``p``."""
        if x.ndim != 4 or x.shape[1] != self.descriptor.target_channels:
            raise ShapeContractError(f"unexpected slice batch shape {tuple(x.shape)}")
        batch = x.shape[0]
        p = torch.as_tensor(p, dtype=torch.float32).reshape(-1)
        if p.numel() == 1:
            p = p.expand(batch)
        emb = self._time_embedding(t, batch, x.dtype)
        emb = emb + self.position_mlp(position_embedding(p, self.position_width).to(x.dtype))
        return self._backbone(x, emb, None)


def _seeded(seed: int, build):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return build()


def init_denoiser(descriptor: ArchitectureConfig, seed: int) -> DenoiserModel:
    """Deterministically initialize a volume denoiser (slice stage).

    Depth-axis layers start as exact identities.
    """
    descriptor = ArchitectureConfig.model_validate(descriptor.model_dump())
    model = _seeded(seed, lambda: DenoiserModel(descriptor))
    logger.debug(f"Initialized denoiser with {parameter_count(descriptor)} parameters")
    return model


def init_slice_model(descriptor: ArchitectureConfig, seed: int) -> SliceModel:
    """Deterministically initialize a position-conditioned slice denoiser."""
    descriptor = ArchitectureConfig.model_validate(descriptor.model_dump())
    return _seeded(seed, lambda: SliceModel(descriptor))


def predict_noise(
    model: DenoiserModel,
    noisy_window: torch.Tensor,
    t: int,
    cond: "ConditionStack",
    volumetric: Optional[bool] = None,
    T: Optional[int] = None,
) -> torch.Tensor:
    """Predict the noise of one window.

    Args:
        model: Volume denoiser
        noisy_window: (n, target_channels, h, w) latents at step ``t``
        t: Timestep in [1, T], shared by the window
        cond: Condition stack of width n
        volumetric: Override whether depth-axis layers run
        T: Schedule length; when given, ``t`` above it is rejected

    Returns:
        (n, target_channels, h, w) predicted noise
    """
    n = noisy_window.shape[0]
    if noisy_window.ndim != 4 or noisy_window.shape[1] != model.descriptor.target_channels:
        raise ShapeContractError(f"unexpected window shape {tuple(noisy_window.shape)}")
    if cond.width != n or cond.spatial != tuple(noisy_window.shape[-2:]):
        raise ShapeContractError(
            f"condition stack ({cond.width}, {cond.spatial}) does not match window "
            f"({n}, {tuple(noisy_window.shape[-2:])})"
        )
    if t < 1:
        raise ValueError(f"timestep {t} must be >= 1")
    if T is not None and t > T:
        raise ValueError(f"timestep {t} exceeds schedule length {T}")
    x = torch.cat([noisy_window, cond.tensor().to(noisy_window.dtype)], dim=1)
    out = model(x, torch.full((n,), t), window_length=n, volumetric=volumetric)
    return out


def _conv(cin: int, cout: int, k: int) -> int:
    return cin * cout * k * k + cout


def _linear(a: int, b: int) -> int:
    return a * b + b


def _resblock(cin: int, cout: int, d: int) -> int:
    count = 2 * cin + _conv(cin, cout, 3) + _linear(d, cout) + 2 * cout + _conv(cout, cout, 3)
    if cin != cout:
        count += _conv(cin, cout, 1)
    return count


def parameter_count(descriptor: ArchitectureConfig, kind: str = "denoiser") -> int:
    """Parameter count implied by a descriptor (``denoiser`` or ``slice``)."""
    w = descriptor.widths
    d = descriptor.time_embed_dim
    levels = len(w)
    in_ch = descriptor.target_channels
    if kind == "denoiser":
        in_ch += descriptor.condition_channels
    count = 2 * _linear(d, d) + _conv(in_ch, w[0], 3)
    count += sum(_resblock(w[max(i - 1, 0)], w[i], d) for i in range(levels))
    count += sum(_conv(w[i], w[i], 3) for i in range(levels - 1))
    count += _resblock(w[-1], w[-1], d)
    count += sum(_conv(w[i + 1], w[i], 3) for i in range(levels - 1))
    count += sum(_resblock(2 * w[i], w[i], d) for i in range(levels))
    count += 2 * w[0] + _conv(w[0], descriptor.target_channels, 3)
    if kind == "denoiser":
        channels: Dict[str, int] = {f"enc{i}": w[i] for i in range(levels)}
        channels["mid"] = w[-1]
        channels.update({f"dec{i}": w[i] for i in range(levels)})
        count += sum(3 * c * c + c for c in (channels[s] for s in descriptor.placements()))
    else:
        count += _linear(descriptor.position_embed_dim, d) + _linear(d, d)
    return count
