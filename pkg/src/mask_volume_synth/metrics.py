"""Evaluation metrics: MS-SSIM, tri-axis Fréchet feature distance, Dice, consistency."""

import logging
from functools import lru_cache
from typing import Dict, Iterable, List, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F
from scipy import linalg

from .models import Direction, PhantomSpec, WindowPlan
from .phantom import BODY_BASE, expected_label_levels
from .volume_io import MaskVolume, Volume

logger = logging.getLogger(__name__)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
DATA_RANGE = 2.0
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)

FEATURE_GRID = 32
FEATURE_DIM = 64
COVARIANCE_SHRINKAGE = 1e-6
AXES = ("A", "C", "S")


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> torch.Tensor:
    coords = torch.arange(size, dtype=torch.float64) - (size - 1) / 2.0
    g = torch.exp(-(coords**2) / (2 * sigma**2))
    g = g / g.sum()
    return torch.outer(g, g)[None, None]


def _ssim_components(x: torch.Tensor, y: torch.Tensor, window: torch.Tensor):
    c1 = (SSIM_K1 * DATA_RANGE) ** 2
    c2 = (SSIM_K2 * DATA_RANGE) ** 2
    mu_x = F.conv2d(x, window)
    mu_y = F.conv2d(y, window)
    var_x = F.conv2d(x * x, window) - mu_x**2
    var_y = F.conv2d(y * y, window) - mu_y**2
    cov = F.conv2d(x * y, window) - mu_x * mu_y
    cs = (2 * cov + c2) / (var_x + var_y + c2)
    luminance = (2 * mu_x * mu_y + c1) / (mu_x**2 + mu_y**2 + c1)
    return (luminance * cs).mean(dim=(1, 2, 3)), cs.mean(dim=(1, 2, 3))


def ms_ssim(a: Volume, b: Volume, scales: int = 2) -> float:
    """Multi-scale SSIM averaged over aligned axial slice pairs.

    Uses the first ``scales`` standard scale weights, renormalized to sum to 1.

    Raises:
        ValueError: Dims differ, or slices are too small for ``scales`` levels
    """
    if a.voxels.shape != b.voxels.shape:
        raise ValueError(f"volume dims differ: {a.dims} vs {b.dims}")
    if not 1 <= scales <= len(MS_SSIM_WEIGHTS):
        raise ValueError(f"scales must lie in [1, {len(MS_SSIM_WEIGHTS)}]")
    _, height, width = a.voxels.shape
    if min(height, width) / 2 ** (scales - 1) < SSIM_WINDOW:
        raise ValueError(
            f"{height}x{width} slices are too small for {scales} MS-SSIM scales "
            f"(coarsest side must be >= {SSIM_WINDOW})"
        )
    weights = torch.tensor(MS_SSIM_WEIGHTS[:scales], dtype=torch.float64)
    weights = weights / weights.sum()
    window = _gaussian_window()

    x = torch.from_numpy(a.voxels.astype(np.float64))[:, None]
    y = torch.from_numpy(b.voxels.astype(np.float64))[:, None]
    factors = []
    for level in range(scales):
        ssim, cs = _ssim_components(x, y, window)
        factors.append(torch.relu(ssim if level == scales - 1 else cs))
        if level < scales - 1:
            x = F.avg_pool2d(x, 2)
            y = F.avg_pool2d(y, 2)
    stacked = torch.stack(factors, dim=1)
    per_slice = torch.prod(stacked ** weights[None, :], dim=1)
    return float(per_slice.mean())


class RandomProjector:
    """Fixed random 3-layer conv feature extractor (ReLU, global average pool, 64 dims)."""

    def __init__(self, seed: int):
        generator = torch.Generator().manual_seed(seed)
        channels = [1, 16, 32, FEATURE_DIM]
        self.weights = []
        for cin, cout in zip(channels[:-1], channels[1:]):
            fan_in = cin * 9
            w = torch.randn((cout, cin, 3, 3), generator=generator, dtype=torch.float64)
            self.weights.append(w * (2.0 / fan_in) ** 0.5)
        self.biases = [
            0.1 * torch.randn((c,), generator=generator, dtype=torch.float64) for c in channels[1:]
        ]

    @torch.no_grad()
    def __call__(self, slices: torch.Tensor) -> torch.Tensor:
        h = slices
        for w, b in zip(self.weights, self.biases):
            h = F.relu(F.conv2d(h, w, b, stride=2, padding=1))
        return h.mean(dim=(2, 3))


@lru_cache(maxsize=8)
def _projector(seed: int) -> RandomProjector:
    return RandomProjector(seed)


def axis_slices(volume: Volume, axis: str) -> np.ndarray:
    """Slices of ``volume`` along axial (A), coronal (C) or sagittal (S) direction."""
    voxels = volume.voxels  # (Z, H, W)
    if axis == "A":
        return voxels
    if axis == "C":
        return np.transpose(voxels, (1, 0, 2))
    if axis == "S":
        return np.transpose(voxels, (2, 0, 1))
    raise ValueError(f"axis must be one of {AXES}, got {axis!r}")


def extract_slice_features(
    volumes: Sequence[Volume], axis: str, projector_seed: int = 0, batch: int = 256
) -> np.ndarray:
    """Project every slice along ``axis`` to a 64-dim feature vector.

    Rows are ordered by volume, then slice index.

    Raises:
        ValueError: Empty volume set or unknown axis
    """
    if len(volumes) == 0:
        raise ValueError("cannot extract features from an empty volume set")
    projector = _projector(projector_seed)
    rows = []
    for volume in volumes:
        slices = torch.from_numpy(np.ascontiguousarray(axis_slices(volume, axis), dtype=np.float64))
        for start in range(0, slices.shape[0], batch):
            chunk = slices[start : start + batch, None]
            chunk = F.interpolate(
                chunk, size=(FEATURE_GRID, FEATURE_GRID), mode="bilinear", align_corners=False
            )
            rows.append(projector(chunk).numpy())
    return np.concatenate(rows, axis=0)


def _psd_sqrt(matrix: np.ndarray) -> np.ndarray:
    values, vectors = linalg.eigh(matrix)
    return (vectors * np.sqrt(np.clip(values, 0.0, None))) @ vectors.T


def frechet_distance_from_stats(
    mu_a: np.ndarray, cov_a: np.ndarray, mu_b: np.ndarray, cov_b: np.ndarray
) -> float:
    """||mu_a - mu_b||^2 + Tr(A + B - 2 (sqrt(A) B sqrt(A))^(1/2))."""
    mu_a, mu_b = np.atleast_1d(mu_a), np.atleast_1d(mu_b)
    cov_a, cov_b = np.atleast_2d(cov_a), np.atleast_2d(cov_b)
    root_a = _psd_sqrt(cov_a)
    middle = root_a @ cov_b @ root_a
    middle = (middle + middle.T) / 2.0
    trace_root = float(np.sqrt(np.clip(linalg.eigvalsh(middle), 0.0, None)).sum())
    diff = mu_a - mu_b
    value = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * trace_root)
    return max(value, 0.0)


def _moments(features: np.ndarray) -> tuple:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim == 1:
        features = features[:, None]
    if features.shape[0] < 2:
        raise ValueError("need at least two feature rows")
    if not np.all(np.isfinite(features)):
        raise ValueError("features contain non-finite values")
    cov = np.atleast_2d(np.cov(features, rowvar=False))
    cov = cov + COVARIANCE_SHRINKAGE * np.eye(cov.shape[0])
    return features.mean(axis=0), cov


def frechet_distance(features_a: np.ndarray, features_b: np.ndarray) -> float:
    """Fréchet distance between Gaussians fitted to two feature sets.

    Raises:
        ValueError: Non-finite features, fewer than two rows or mismatched widths
    """
    mu_a, cov_a = _moments(features_a)
    mu_b, cov_b = _moments(features_b)
    if mu_a.shape != mu_b.shape:
        raise ValueError(f"feature widths differ: {mu_a.shape[0]} vs {mu_b.shape[0]}")
    return frechet_distance_from_stats(mu_a, cov_a, mu_b, cov_b)


def tri_axis_frechet(
    generated: Sequence[Volume], reference: Sequence[Volume], projector_seed: int = 0
) -> Dict[str, float]:
    """Fréchet distance per axis (keys A, C, S)."""
    return {
        axis: frechet_distance(
            extract_slice_features(generated, axis, projector_seed),
            extract_slice_features(reference, axis, projector_seed),
        )
        for axis in AXES
    }


def _labels(mask: Union[MaskVolume, np.ndarray]) -> np.ndarray:
    return mask.labels if isinstance(mask, MaskVolume) else np.asarray(mask)


def dice(
    mask_a: Union[MaskVolume, np.ndarray], mask_b: Union[MaskVolume, np.ndarray], label: int
) -> float:
    """2|A & B| / (|A| + |B|) over voxels equal to ``label``; 1 when both are empty."""
    a, b = _labels(mask_a), _labels(mask_b)
    if a.shape != b.shape:
        raise ValueError(f"mask dims differ: {a.shape} vs {b.shape}")
    in_a, in_b = a == label, b == label
    total = int(in_a.sum()) + int(in_b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(in_a, in_b).sum()) / total


def volume_consistency(volume: Volume) -> float:
    """Mean |adjacent axial slice difference| over mean |in-slice gradient|.

    Lower is smoother along Z. A constant volume scores 0.

    Raises:
        ValueError: Fewer than two slices
    """
    v = volume.voxels.astype(np.float64)
    if v.shape[0] < 2:
        raise ValueError("volume_consistency needs at least two slices")
    through = float(np.abs(np.diff(v, axis=0)).mean())
    if through == 0.0:
        return 0.0
    in_plane = 0.5 * (
        float(np.abs(np.diff(v, axis=1)).mean()) + float(np.abs(np.diff(v, axis=2)).mean())
    )
    return through / (in_plane + 1e-8)


def seam_pairs(plan: WindowPlan) -> List[tuple]:
    """Adjacent slice pairs where a job's generated slices meet its frontier pin."""
    pairs = []
    for job in plan.jobs:
        if not job.pinned:
            continue
        if job.direction == Direction.DOWN:
            k = max(job.pinned)
            if k + 1 < plan.total_z:
                pairs.append((k, k + 1))
        elif job.direction == Direction.UP:
            k = min(job.pinned)
            if k > 0:
                pairs.append((k - 1, k))
    return pairs


def seam_discontinuity(volume: Volume, plan: WindowPlan) -> float:
    """Mean |slice difference| across window seams (0 for single-window plans)."""
    pairs = seam_pairs(plan)
    if not pairs:
        return 0.0
    v = volume.voxels.astype(np.float64)
    return float(np.mean([np.abs(v[b] - v[a]).mean() for a, b in pairs]))


def estimate_gain(
    volume: Volume, spec: PhantomSpec, reference_mask: Optional[MaskVolume] = None
) -> float:
    """Patient gain implied by a volume's intensities.

    With a mask, the median body intensity fixes the gain; without one the gain
    minimizing the distance of foreground voxels to their nearest label level is
    searched over the style range.
    """
    v = volume.voxels.astype(np.float64)
    if reference_mask is not None:
        body = reference_mask.labels == 1
        if body.any():
            return float(np.clip(np.median((v[body] + 1.0) / BODY_BASE), 0.5, 1.5))
    foreground = v[v > -0.95]
    if foreground.size == 0:
        return 1.0
    rng = np.random.default_rng(0)
    sample = rng.choice(foreground, size=min(foreground.size, 4096), replace=False)
    gains = np.linspace(0.5, 1.5, 101)
    costs = []
    for gain in gains:
        levels = expected_label_levels(spec, gain)[1:]
        costs.append(np.min(np.abs(sample[:, None] - levels[None, :]), axis=1).mean())
    return float(gains[int(np.argmin(costs))])


def recover_labels(
    volume: Volume,
    spec: PhantomSpec,
    reference_mask: Optional[MaskVolume] = None,
    gain: Optional[float] = None,
) -> MaskVolume:
    """Assign each voxel the label whose expected intensity band is nearest."""
    if gain is None:
        gain = estimate_gain(volume, spec, reference_mask)
    levels = expected_label_levels(spec, gain)
    v = volume.voxels.astype(np.float64)
    labels = np.argmin(np.abs(v[..., None] - levels[None, None, None, :]), axis=-1)
    return MaskVolume(labels.astype(np.uint16))


def dice_per_label(
    reference: MaskVolume, recovered: MaskVolume, labels: Optional[Iterable[int]] = None
) -> Dict[int, float]:
    """Dice for every non-background label present in either mask."""
    if labels is None:
        labels = sorted((reference.label_set() | recovered.label_set()) - {0})
    return {int(label): dice(reference, recovered, int(label)) for label in labels}
