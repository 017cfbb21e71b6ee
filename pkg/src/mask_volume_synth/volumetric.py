"""Pseudo-3D (depth-axis) layers applied through einops rearrangement.

A feature block is a (b_v * n, c, h, w) tensor holding b_v windows of n slices
each. Depth-axis layers see it as (b_v * h * w, c, n): every spatial site of
every window becomes a separate 1D sequence along the slice axis.
"""

from typing import Callable

import torch
from einops import rearrange
from torch import nn

from .exceptions import ShapeContractError

DepthLayer = Callable[[torch.Tensor], torch.Tensor]


def rearrange_to_depth(f: torch.Tensor, n: int) -> torch.Tensor:
    """(b_v * n, c, h, w) -> (b_v * h * w, c, n)."""
    if f.ndim != 4 or n < 1 or f.shape[0] % n != 0:
        raise ShapeContractError(
            f"feature block of shape {tuple(f.shape)} is not a whole number of {n}-slice windows"
        )
    return rearrange(f, "(b n) c h w -> (b h w) c n", n=n)


def rearrange_from_depth(g: torch.Tensor, b_v: int, n: int, h: int, w: int) -> torch.Tensor:
    """(b_v * h * w, c, n) -> (b_v * n, c, h, w); exact inverse of ``rearrange_to_depth``."""
    if g.ndim != 3 or g.shape[0] != b_v * h * w or g.shape[2] != n:
        raise ShapeContractError(
            f"depth block of shape {tuple(g.shape)} does not match b_v={b_v}, n={n}, h={h}, w={w}"
        )
    return rearrange(g, "(b h w) c n -> (b n) c h w", b=b_v, h=h, w=w)


def apply_volumetric_layer(f: torch.Tensor, layer: DepthLayer, n: int) -> torch.Tensor:
    """Apply a depth-axis operator to a feature block.

    Spatial sites never mix: the layer only sees one (c, n) sequence per site.
    """
    b_v = f.shape[0] // n if n > 0 else 0
    _, _, h, w = f.shape
    g = rearrange_to_depth(f, n)
    out = layer(g)
    if out.shape != g.shape:
        raise ShapeContractError(
            f"depth layer returned shape {tuple(out.shape)}, expected {tuple(g.shape)}"
        )
    return rearrange_from_depth(out, b_v, n, h, w)


class DepthConv(nn.Module):
    """Residual 1D convolution along the slice axis, identity at initialization."""

    def __init__(self, channels: int, kernel_size: int = 3):
        super().__init__()
        self.conv = nn.Conv1d(channels, channels, kernel_size, padding=kernel_size // 2)
        nn.init.zeros_(self.conv.weight)
        nn.init.zeros_(self.conv.bias)

    def _residual(self, g: torch.Tensor) -> torch.Tensor:
        return g + self.conv(g)

    def forward(self, f: torch.Tensor, n: int) -> torch.Tensor:
        return apply_volumetric_layer(f, self._residual, n)
