"""Procedural (image, mask) phantoms with per-patient style, and the dataset container.

A dataset directory holds ``manifest.json`` plus ``volumes/<id>.vol`` and
``masks/<id>.msk`` files (see ``volume_io``).
"""

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
from scipy import ndimage

from .exceptions import ContainerFormatError, MissingArtifactError
from .models import DatasetEntry, DatasetManifest, PatientStyle, PhantomSpec, Split
from .volume_io import MaskVolume, Volume, read_image_volume, read_mask_volume, write_volume

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"

BACKGROUND_LEVEL = -1.0
BODY_BASE = 0.4
ORGAN_BASE_RANGE = (0.65, 1.15)
LESION_BASE = 1.35

BIAS_CONSTANT_RANGE = 0.01
BIAS_SPATIAL_RANGE = 0.04
TEXTURE_SIGMA = 1.0


def label_base_intensities(spec: PhantomSpec) -> np.ndarray:
    """Base intensity (above background, before gain) for every label id.

    Index 0 is background and stays 0.
    """
    bases = np.zeros(spec.label_max + 1, dtype=np.float64)
    bases[1] = BODY_BASE
    bases[2 : 2 + spec.organ_count] = np.linspace(*ORGAN_BASE_RANGE, spec.organ_count)
    bases[spec.lesion_label] = LESION_BASE
    return bases


def expected_label_levels(spec: PhantomSpec, gain: float) -> np.ndarray:
    """Noise-free intensity per label for a given gain (background at -1)."""
    levels = BACKGROUND_LEVEL + label_base_intensities(spec) * gain
    levels[0] = BACKGROUND_LEVEL
    return np.clip(levels, -1.0, 1.0)


def sample_style(spec: PhantomSpec, rng: np.random.Generator) -> PatientStyle:
    """Draw a patient style."""
    gain = float(rng.uniform(*spec.gain_range))
    bias = [float(rng.uniform(-BIAS_CONSTANT_RANGE, BIAS_CONSTANT_RANGE))]
    bias += [float(c) for c in rng.uniform(-BIAS_SPATIAL_RANGE, BIAS_SPATIAL_RANGE, size=5)]
    return PatientStyle(gain=gain, bias_coeffs=bias, texture_seed=int(rng.integers(0, 2**31 - 1)))


def _normalized_grid(shape: Tuple[int, int, int]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Voxel-center coordinates in [-1, 1] for a (Z, H, W) grid."""
    axes = [(np.arange(n) + 0.5) / n * 2.0 - 1.0 for n in shape]
    return np.meshgrid(*axes, indexing="ij")


def _inside_ellipsoid(grid, center, radii) -> np.ndarray:
    zz, yy, xx = grid
    cz, cy, cx = center
    rz, ry, rx = radii
    return ((zz - cz) / rz) ** 2 + ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def _point_in_ball(rng: np.random.Generator) -> np.ndarray:
    while True:
        p = rng.uniform(-1.0, 1.0, size=3)
        if p @ p <= 1.0:
            return p


def _build_labels(spec: PhantomSpec, depth: int, rng: np.random.Generator) -> np.ndarray:
    shape = (depth, spec.height, spec.width)
    grid = _normalized_grid(shape)
    labels = np.zeros(shape, dtype=np.uint16)

    body_center = np.array([0.0, *rng.uniform(-0.05, 0.05, size=2)])
    body_radii = np.array(
        [rng.uniform(0.9, 1.05), rng.uniform(0.7, 0.9), rng.uniform(0.7, 0.9)]
    )
    body = _inside_ellipsoid(grid, body_center, body_radii)
    labels[body] = 1

    placed: List[Tuple[np.ndarray, np.ndarray]] = []
    for k in range(spec.organ_count):
        radii = body_radii * np.array(
            [rng.uniform(0.25, 0.45), rng.uniform(0.2, 0.35), rng.uniform(0.2, 0.35)]
        )
        for _ in range(100):
            center = body_center + 0.5 * body_radii * _point_in_ball(rng)
            clear = all(
                np.linalg.norm(center - c) > 0.8 * (radii.max() + r.max()) for c, r in placed
            )
            if clear:
                break
        placed.append((center, radii))
        labels[_inside_ellipsoid(grid, center, radii) & body] = 2 + k

    if rng.random() < spec.lesion_probability:
        scale = rng.uniform(0.12, 0.2)
        radii = np.array([scale * spec.height / depth, scale, scale])
        radii[0] = max(radii[0], 1.5 / depth)
        center = body_center + 0.6 * body_radii * _point_in_ball(rng)
        lesion = _inside_ellipsoid(grid, center, radii) & body
        if not lesion.any():
            # Fall back to the body voxel nearest the lesion center
            idx = np.argwhere(body)
            coords = np.stack([g[body] for g in grid], axis=1)
            nearest = idx[np.argmin(((coords - center) ** 2).sum(axis=1))]
            lesion = np.zeros(shape, dtype=bool)
            lesion[tuple(nearest)] = True
        labels[lesion] = spec.lesion_label

    return labels


def render_image(spec: PhantomSpec, labels: np.ndarray, style: PatientStyle) -> np.ndarray:
    """Render intensities for a label grid under a patient style.

    image = -1 + base(label) * gain + bias field + texture inside the body,
    exactly -1 on background, clamped to [-1, 1].
    """
    zz, yy, xx = _normalized_grid(labels.shape)
    c = style.bias_coeffs
    bias = c[0] + c[1] * xx + c[2] * yy + c[3] * zz + c[4] * xx * zz + c[5] * yy * zz

    texture = np.random.default_rng(style.texture_seed).standard_normal(labels.shape)
    texture = ndimage.gaussian_filter(texture, sigma=TEXTURE_SIGMA, mode="reflect")
    std = texture.std()
    if std > 0:
        texture = texture / std
    texture *= spec.noise_amplitude

    bases = label_base_intensities(spec)
    image = BACKGROUND_LEVEL + bases[labels] * style.gain + bias + texture
    image[labels == 0] = BACKGROUND_LEVEL
    return np.clip(image, -1.0, 1.0).astype(np.float32)


def generate_phantom(
    spec: PhantomSpec, seed: int, style: Optional[PatientStyle] = None
) -> Tuple[Volume, MaskVolume, PatientStyle]:
    """Generate one paired phantom.

    Geometry and style come from independent streams of ``seed``, so passing an
    explicit ``style`` re-renders the same anatomy with another appearance.

    Args:
        spec: Phantom parameters
        seed: Non-negative generation seed
        style: Optional style override

    Returns:
        Tuple of (Volume, MaskVolume, PatientStyle)
    """
    spec = PhantomSpec.model_validate(spec.model_dump())
    geometry_seq, style_seq = np.random.SeedSequence(seed).spawn(2)
    geometry_rng = np.random.default_rng(geometry_seq)

    low, high = spec.depth_range
    depth = int(geometry_rng.integers(low, high + 1))
    labels = _build_labels(spec, depth, geometry_rng)

    if style is None:
        style = sample_style(spec, np.random.default_rng(style_seq))

    image = render_image(spec, labels, style)
    return Volume(image), MaskVolume(labels), style


def _entry_seeds(seed: int, count: int) -> List[int]:
    children = np.random.SeedSequence(seed).spawn(count)
    return [int(child.generate_state(1, dtype=np.uint32)[0]) for child in children]


def generate_dataset(
    spec: PhantomSpec,
    count: int,
    seed: int,
    root: Union[str, Path],
    jobs: int = 1,
) -> DatasetManifest:
    """Generate ``count`` phantoms into a dataset directory.

    Args:
        spec: Phantom parameters
        count: Number of phantoms (>= 2)
        seed: Dataset seed; each entry gets its own derived seed
        root: Dataset directory (created if missing)
        jobs: Phantoms generated concurrently

    Returns:
        The persisted DatasetManifest (all entries in the train split)
    """
    if count < 2:
        raise ValueError("count must be >= 2")
    root = Path(root)
    (root / "volumes").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)

    def build(index_and_seed: Tuple[int, int]) -> DatasetEntry:
        index, entry_seed = index_and_seed
        entry_id = f"phantom_{index:04d}"
        volume, mask, style = generate_phantom(spec, entry_seed)
        volume_rel = f"volumes/{entry_id}.vol"
        mask_rel = f"masks/{entry_id}.msk"
        write_volume(root / volume_rel, volume)
        write_volume(root / mask_rel, mask)
        return DatasetEntry(
            id=entry_id, volume=volume_rel, mask=mask_rel, z=volume.depth, style=style
        )

    work = list(enumerate(_entry_seeds(seed, count)))
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            entries = list(pool.map(build, work))
    else:
        entries = [build(item) for item in work]

    manifest = DatasetManifest(entries=entries)
    save_manifest(root, manifest)
    logger.info(f"Generated {count} phantoms in {root}")
    return manifest


def split_dataset(manifest: DatasetManifest, train_fraction: float, seed: int) -> DatasetManifest:
    """Assign train/test splits.

    floor(N * train_fraction) randomly chosen entries become train, the rest test.

    Args:
        manifest: Dataset manifest
        train_fraction: Fraction in (0, 1)
        seed: Permutation seed

    Returns:
        New manifest with splits assigned (entry order preserved)
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie in (0, 1)")
    if manifest.N < 2:
        raise ValueError(f"Cannot split a dataset with N={manifest.N} < 2")

    n_train = math.floor(manifest.N * train_fraction + 1e-9)
    order = np.random.default_rng(seed).permutation(manifest.N)
    train_idx = set(order[:n_train].tolist())
    entries = [
        entry.model_copy(update={"split": Split.TRAIN if i in train_idx else Split.TEST})
        for i, entry in enumerate(manifest.entries)
    ]
    logger.info(f"Split {manifest.N} entries into {n_train} train / {manifest.N - n_train} test")
    return DatasetManifest(entries=entries)


def save_manifest(root: Union[str, Path], manifest: DatasetManifest) -> Path:
    """Write ``manifest.json`` into a dataset directory."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    payload = {
        "N": manifest.N,
        "entries": [
            e.model_dump(mode="json", by_alias=True, exclude_none=True) for e in manifest.entries
        ],
    }
    path = root / MANIFEST_NAME
    path.write_text(json.dumps(payload, indent=2), encoding="utf-8")
    return path


def load_manifest(root: Union[str, Path], check_files: bool = True) -> DatasetManifest:
    """Read and validate a dataset directory's manifest.

    Raises:
        MissingArtifactError: Manifest or a referenced file is missing
        ContainerFormatError: Declared N disagrees with the entry count
    """
    root = Path(root)
    path = root / MANIFEST_NAME
    if not path.exists():
        raise MissingArtifactError(f"Dataset manifest not found: {path}", stage="dataset")
    data = json.loads(path.read_text(encoding="utf-8"))
    manifest = DatasetManifest(entries=data.get("entries", []))
    if "N" in data and data["N"] != manifest.N:
        raise ContainerFormatError(
            f"manifest N={data['N']} does not match {manifest.N} entries", path=path
        )
    if check_files:
        for entry in manifest.entries:
            for rel in (entry.volume, entry.mask):
                if not (root / rel).exists():
                    raise MissingArtifactError(
                        f"Dataset file missing: {root / rel}", stage="dataset"
                    )
    return manifest


def load_entry(root: Union[str, Path], entry: DatasetEntry) -> Tuple[Volume, MaskVolume]:
    """Read the (volume, mask) pair of one entry."""
    root = Path(root)
    return read_image_volume(root / entry.volume), read_mask_volume(root / entry.mask)
