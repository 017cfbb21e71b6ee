"""Pydantic models for phantom datasets, sampling plans and reports."""

from enum import Enum
from typing import Dict, List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

# Bias field magnitude bound as a fraction of the [-1, 1] intensity range.
MAX_BIAS_MAGNITUDE = 0.3
BIAS_COEFF_COUNT = 6


class Split(str, Enum):
    """Dataset split assignment."""

    TRAIN = "train"
    TEST = "test"


class Direction(str, Enum):
    """Propagation direction of a window job.

    DOWN moves toward higher slice indices and pins the leftmost slices of its
    window; UP moves toward index 0 and pins the rightmost ones.
    """

    INITIAL = "initial"
    UP = "up"
    DOWN = "down"


class Stage(str, Enum):
    """Training stage of the volume denoiser."""

    SLICE = "slice"
    VOLUMETRIC = "volumetric"


class InformedPolicy(str, Enum):
    """How the first informed slice of an assembly is chosen."""

    IC = "ic"  # cross-selected from the dataset
    IG = "ig"  # generated by the position-conditioned slice model
    SELF = "self"  # drawn from a given volume window (training, paired evaluation)


class PhantomSpec(BaseModel):
    """Geometry and appearance parameters for procedural phantoms."""

    model_config = ConfigDict(extra="forbid")

    height: int = Field(32, ge=8, description="Slice height in voxels")
    width: int = Field(32, ge=8, description="Slice width in voxels")
    depth_range: Tuple[int, int] = Field(
        (24, 48), description="Inclusive range the slice count Z is drawn from"
    )
    organ_count: int = Field(3, ge=1, description="Number of organ ellipsoids inside the body")
    lesion_probability: float = Field(
        0.5, ge=0.0, le=1.0, description="Probability that a lesion label is placed"
    )
    noise_amplitude: float = Field(
        0.03, ge=0.0, le=0.5, description="Texture noise amplitude (fraction of intensity range)"
    )
    gain_range: Tuple[float, float] = Field(
        (0.6, 1.4), description="Range patient gains are drawn from"
    )

    @field_validator("depth_range")
    @classmethod
    def validate_depth_range(cls, v: Tuple[int, int]) -> Tuple[int, int]:
        """Depth range must be ordered and at least two slices deep."""
        low, high = v
        if low < 2 or high < low:
            raise ValueError("depth_range must satisfy 2 <= min <= max")
        return v

    @field_validator("gain_range")
    @classmethod
    def validate_gain_range(cls, v: Tuple[float, float]) -> Tuple[float, float]:
        """Gains stay inside the patient style bounds."""
        low, high = v
        if not (0.5 <= low <= high <= 1.5):
            raise ValueError("gain_range must lie within [0.5, 1.5] and be ordered")
        return v

    @property
    def label_max(self) -> int:
        """Largest label id a phantom can carry (body, organs, lesion)."""
        return self.organ_count + 2

    @property
    def lesion_label(self) -> int:
        """Label id reserved for the lesion."""
        return self.organ_count + 2


class PatientStyle(BaseModel):
    """Latent per-patient appearance: intensity gain, bias field and texture."""

    model_config = ConfigDict(populate_by_name=True)

    gain: float = Field(..., ge=0.5, le=1.5, description="Intensity multiplier")
    bias_coeffs: List[float] = Field(
        ...,
        alias="bias",
        min_length=BIAS_COEFF_COUNT,
        max_length=BIAS_COEFF_COUNT,
        description="Coefficients of the low-frequency field over (1, x, y, z, xz, yz)",
    )
    texture_seed: int = Field(..., ge=0, description="Seed of the band-limited texture noise")

    @field_validator("bias_coeffs")
    @classmethod
    def validate_bias_magnitude(cls, v: List[float]) -> List[float]:
        """Bound the bias field over the normalized cube."""
        if sum(abs(c) for c in v) > MAX_BIAS_MAGNITUDE + 1e-12:
            raise ValueError(f"bias field magnitude exceeds {MAX_BIAS_MAGNITUDE}")
        return v


class InformedProvenance(BaseModel):
    """Where an informed slice came from."""

    kind: str = Field(..., description="volume | generated | window | file")
    volume_id: Optional[str] = Field(None, description="Source volume id")
    slice_index: Optional[int] = Field(None, ge=0, description="Source slice index")
    position: Optional[float] = Field(None, ge=0.0, le=1.0, description="Normalized position")

    @field_validator("kind")
    @classmethod
    def validate_kind(cls, v: str) -> str:
        """Validate provenance kind."""
        if v not in {"volume", "generated", "window", "file"}:
            raise ValueError("kind must be one of volume, generated, window, file")
        return v

    def describe(self) -> str:
        """Short human-readable form."""
        if self.kind == "generated":
            return f"generated(p={self.position:.3f})"
        return f"{self.kind}:{self.volume_id}[{self.slice_index}]"


class DatasetEntry(BaseModel):
    """One (volume, mask) pair of a dataset directory."""

    id: str = Field(..., min_length=1)
    volume: str = Field(..., description="Volume file path relative to the dataset root")
    mask: str = Field(..., description="Mask file path relative to the dataset root")
    z: int = Field(..., ge=1, description="Slice count Z_i")
    split: Split = Field(default=Split.TRAIN)
    style: Optional[PatientStyle] = Field(None, description="Generating style (phantoms only)")
    source_id: Optional[str] = Field(None, description="Source mask id for generated volumes")
    provenance: Optional[InformedProvenance] = Field(
        None, description="Informed slice that drove a generated volume"
    )


class DatasetManifest(BaseModel):
    """Contents of a dataset directory's manifest.json."""

    entries: List[DatasetEntry] = Field(default_factory=list)

    @model_validator(mode="after")
    def validate_unique_ids(self) -> "DatasetManifest":
        """Entry ids must be unique."""
        ids = [e.id for e in self.entries]
        if len(ids) != len(set(ids)):
            raise ValueError("dataset entry ids must be unique")
        return self

    @property
    def N(self) -> int:  # noqa: N802
        """Number of entries."""
        return len(self.entries)

    def by_split(self, split: Split) -> List[DatasetEntry]:
        """Entries of one split, in manifest order."""
        return [e for e in self.entries if e.split == split]

    def get(self, entry_id: str) -> DatasetEntry:
        """Look up an entry by id."""
        for entry in self.entries:
            if entry.id == entry_id:
                return entry
        raise KeyError(f"No dataset entry with id {entry_id!r}")


class WindowJob(BaseModel):
    """One window of a bi-directional assembly."""

    index: int = Field(..., ge=0)
    start: int = Field(..., ge=0)
    length: int = Field(..., ge=1)
    direction: Direction
    pinned: List[int] = Field(default_factory=list, description="Absolute pinned slice indices")
    informed_index: Optional[int] = Field(
        None, description="Pinned slice reused as the informed slice (None on the first job)"
    )

    @property
    def stop(self) -> int:
        """One past the last slice of the window."""
        return self.start + self.length

    @property
    def generated(self) -> List[int]:
        """Slices this job writes to the output volume."""
        pinned = set(self.pinned)
        return [k for k in range(self.start, self.stop) if k not in pinned]

    @property
    def local_pins(self) -> List[int]:
        """Pinned positions relative to the window start."""
        return [k - self.start for k in self.pinned]


class WindowPlan(BaseModel):
    """Ordered window jobs covering a volume of ``total_z`` slices."""

    jobs: List[WindowJob]
    total_z: int = Field(..., ge=1)
    window_length: int = Field(..., ge=1)
    overlap: int = Field(..., ge=0)

    @model_validator(mode="after")
    def validate_coverage(self) -> "WindowPlan":
        """Every slice generated exactly once; pins always refer to earlier output."""
        done: set = set()
        for job in self.jobs:
            if job.start < 0 or job.stop > self.total_z:
                raise ValueError(f"job {job.index} window [{job.start}, {job.stop}) out of bounds")
            pinned = set(job.pinned)
            if not pinned <= done:
                raise ValueError(f"job {job.index} pins slices that were never generated")
            if job.index > 0 and not pinned:
                raise ValueError(f"job {job.index} has no overlap with earlier output")
            fresh = set(job.generated)
            if fresh & done:
                raise ValueError(f"job {job.index} regenerates existing slices")
            done |= fresh
        if done != set(range(self.total_z)):
            raise ValueError("window plan does not cover the volume")
        return self


class AssemblyRecord(BaseModel):
    """One line of an assembly log.

    ``informed_provenance`` is the slice this job was conditioned on (a window
    slice for every job after the first); ``volume_informed_provenance`` is the
    slice that seeded the whole volume and is the same on every record.
    """

    job_index: int
    start: int
    direction: Direction
    pinned_indices: List[int]
    informed_provenance: InformedProvenance
    volume_informed_provenance: InformedProvenance
    seed: int


class GradientCheckEntry(BaseModel):
    """Analytic vs numeric gradient of one scalar parameter."""

    name: str
    index: int
    layer_type: str
    analytic: float
    numeric: float
    relative_error: float


class GradientCheckReport(BaseModel):
    """Outcome of a finite-difference gradient check."""

    max_relative_error: float = Field(..., ge=0.0)
    tolerance: float = Field(..., gt=0.0)
    passed: bool
    checked: int = Field(..., ge=0)
    layer_types: List[str] = Field(default_factory=list)
    worst: List[GradientCheckEntry] = Field(default_factory=list)


class MetricReport(BaseModel):
    """Evaluation of a generated dataset against a reference dataset."""

    fid_a: float = Field(..., ge=0.0, description="Axial Fréchet feature distance")
    fid_c: float = Field(..., ge=0.0, description="Coronal Fréchet feature distance")
    fid_s: float = Field(..., ge=0.0, description="Sagittal Fréchet feature distance")
    ms_ssim: Optional[float] = Field(None, ge=0.0, le=1.0, description="Paired mean MS-SSIM")
    ms_ssim_scales: int = Field(2, ge=1)
    dice_per_label: Dict[int, float] = Field(default_factory=dict)
    consistency: float = Field(..., ge=0.0, description="Mean volume consistency (lower=smoother)")
    reference_consistency: Optional[float] = Field(None, ge=0.0)
    generated_count: int = Field(..., ge=0)
    reference_count: int = Field(..., ge=0)
    slice_counts: Dict[str, int] = Field(default_factory=dict, description="Feature rows per axis")

    @field_validator("dice_per_label")
    @classmethod
    def validate_dice(cls, v: Dict[int, float]) -> Dict[int, float]:
        """Dice scores live in [0, 1]."""
        for label, score in v.items():
            if not 0.0 <= score <= 1.0:
                raise ValueError(f"dice for label {label} outside [0, 1]")
        return v

    @property
    def mean_dice(self) -> float:
        """Mean over labels (0 when empty)."""
        if not self.dice_per_label:
            return 0.0
        return sum(self.dice_per_label.values()) / len(self.dice_per_label)


class RunManifest(BaseModel):
    """Record of one CLI command run."""

    command: str
    config: Dict = Field(default_factory=dict, description="Resolved run configuration")
    input_hashes: Dict[str, str] = Field(default_factory=dict, description="sha256 per input file")
    outputs: List[str] = Field(default_factory=list)
    started_at: str
    wall_time_s: float = Field(..., ge=0.0)
    assembly_logs: Dict[str, List[AssemblyRecord]] = Field(default_factory=dict)
