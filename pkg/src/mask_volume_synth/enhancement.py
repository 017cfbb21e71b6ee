"""Sampling campaigns: enhancement, de-enhancement and single-mask sampling.

A campaign walks the source masks of a dataset (``repeats`` times each),
optionally augments every mask, resolves an informed slice under the chosen
policy, assembles a volume and writes it as a new dataset whose entries carry
their source id and informed-slice provenance.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np

from .augment import augment_mask
from .checkpoint import load_checkpoint
from .conditioning import (
    Encoder,
    InformedSlice,
    load_informed_file,
    select_informed_slice,
    slice_from_volume,
)
from .config import RunConfig, ScheduleConfig
from .denoiser import DenoiserModel, SliceModel
from .exceptions import MissingArtifactError
from .models import DatasetEntry, DatasetManifest, InformedPolicy, Split, Stage
from .phantom import load_entry, load_manifest, save_manifest
from .run_manifest import RunRecorder
from .sampler import assemble_volume, derive_seed, write_assembly_log
from .schedule import NoiseSchedule, schedule_from_config
from .volume_io import MaskVolume, read_mask_volume, write_volume

logger = logging.getLogger(__name__)


@dataclass
class CampaignModels:
    """Trained models a campaign samples with."""

    volume_model: DenoiserModel
    schedule: NoiseSchedule
    slice_model: Optional[SliceModel] = None


def _load(path: Path, stage: str, hint: str):
    if not path.exists():
        raise MissingArtifactError(
            f"Missing {stage} checkpoint {path} (run `volsynth {hint}` first)", stage=stage
        )
    return load_checkpoint(path)


def load_campaign_models(config: RunConfig, need_slice_model: bool) -> CampaignModels:
    """Load the volume denoiser (and the position slice model for IG).

    Raises:
        MissingArtifactError: A required checkpoint is absent (names the stage)
    """
    model, meta = _load(config.checkpoints.volume_model, "volume", "train-volume")
    if meta.kind != "denoiser":
        raise MissingArtifactError(
            f"{config.checkpoints.volume_model} holds a {meta.kind} model, not a denoiser",
            stage="volume",
        )
    if meta.stage != Stage.VOLUMETRIC:
        logger.warning(
            "Volume checkpoint has no volumetric tuning; sampling with slice-stage weights"
        )
    slice_model = None
    if need_slice_model:
        slice_model, slice_meta = _load(
            config.checkpoints.position_model, "position", "train-posmodel"
        )
        if slice_meta.kind != "slice":
            raise MissingArtifactError(
                f"{config.checkpoints.position_model} does not hold a slice model", stage="position"
            )
    return CampaignModels(
        volume_model=model,
        schedule=schedule_from_config(ScheduleConfig.model_validate(meta.schedule.model_dump())),
        slice_model=slice_model,
    )


def _informed_policy(spec: str) -> Tuple[Optional[InformedPolicy], Optional[str]]:
    if spec.startswith("file:"):
        return None, spec[len("file:") :]
    return InformedPolicy(spec), None


def _entries_for(manifest: DatasetManifest, split: str) -> List[DatasetEntry]:
    if split == "all":
        return list(manifest.entries)
    return manifest.by_split(Split(split))


def _cross_pool(manifest: DatasetManifest) -> DatasetManifest:
    train = manifest.by_split(Split.TRAIN)
    return DatasetManifest(entries=train) if train else manifest


@dataclass
class _Job:
    index: int
    entry: DatasetEntry
    repeat: int
    seed: int

    @property
    def output_id(self) -> str:
        return f"{self.entry.id}_r{self.repeat}"


class Campaign:
    """One enhancement or de-enhancement run over a source dataset."""

    def __init__(
        self,
        config: RunConfig,
        source_root: Union[str, Path],
        output_root: Union[str, Path],
        models: CampaignModels,
        de_enhance: Optional[bool] = None,
    ):
        self.config = config
        self.enhancement = config.enhancement
        self.source_root = Path(source_root)
        self.output_root = Path(output_root)
        self.models = models
        self.de_enhance = self.enhancement.de_enhance if de_enhance is None else de_enhance
        self.encoder = Encoder.from_config(config.conditioning)
        self.manifest = load_manifest(self.source_root)
        self.policy, self.informed_file = _informed_policy(self.enhancement.informed)
        self.fixed_informed: Optional[InformedSlice] = None
        if self.policy == InformedPolicy.IG and models.slice_model is None:
            raise MissingArtifactError(
                "IG informed slices need the position model", stage="position"
            )

    def _resolve_informed(self, job: _Job, mask: MaskVolume, p: float) -> InformedSlice:
        if self.informed_file is not None:
            return load_informed_file(self.informed_file)
        if self.policy == InformedPolicy.SELF:
            volume, _ = load_entry(self.source_root, job.entry)
            index = min(math.floor(p * volume.depth), volume.depth - 1)
            return slice_from_volume(volume, index, volume_id=job.entry.id)
        height, width = mask.labels.shape[1:]
        return select_informed_slice(
            _cross_pool(self.manifest),
            self.policy,
            derive_seed(job.seed, 1),
            root=self.source_root,
            p=p if self.policy == InformedPolicy.IG else None,
            slice_model=self.models.slice_model,
            schedule=self.models.schedule,
            sampler_config=self.config.sampler,
            spatial=(height, width),
        )

    def _fixed_informed(self) -> InformedSlice:
        if self.informed_file is not None:
            return load_informed_file(self.informed_file)
        policy = InformedPolicy.IC if self.policy == InformedPolicy.SELF else self.policy
        spec = self.config.dataset.phantom
        return select_informed_slice(
            _cross_pool(self.manifest),
            policy,
            derive_seed(self.config.seed, 10**6),
            root=self.source_root,
            p=0.5,
            slice_model=self.models.slice_model,
            schedule=self.models.schedule,
            sampler_config=self.config.sampler,
            spatial=(spec.height, spec.width),
        )

    def _run_job(self, job: _Job) -> Tuple[DatasetEntry, list]:
        _, source_mask = load_entry(self.source_root, job.entry)
        rng = np.random.default_rng(job.seed)
        mask = source_mask
        if self.enhancement.mask_augment:
            mask = augment_mask(source_mask, self.enhancement.augment, int(rng.integers(2**31)))
        p = float(rng.uniform(0.0, 1.0))
        informed = self.fixed_informed or self._resolve_informed(job, mask, p)

        result = assemble_volume(
            self.models.volume_model,
            mask,
            p,
            informed,
            self.config.sampler,
            self.models.schedule,
            derive_seed(job.seed, 2),
            self.encoder,
        )
        volume_rel = f"volumes/{job.output_id}.vol"
        mask_rel = f"masks/{job.output_id}.msk"
        write_volume(self.output_root / volume_rel, result.volume)
        write_volume(self.output_root / mask_rel, mask)
        write_assembly_log(self.output_root / "logs" / f"{job.output_id}.jsonl", result.records)
        logger.info(
            f"{job.output_id}: Z={result.volume.depth}, {len(result.plan.jobs)} windows, "
            f"informed {informed.provenance.describe()}"
        )
        entry = DatasetEntry(
            id=job.output_id,
            volume=volume_rel,
            mask=mask_rel,
            z=result.volume.depth,
            split=job.entry.split,
            source_id=job.entry.id,
            provenance=informed.provenance,
        )
        return entry, result.records

    def jobs(self) -> List[_Job]:
        entries = _entries_for(self.manifest, self.enhancement.split)
        if not entries:
            raise MissingArtifactError(
                f"no source masks in split {self.enhancement.split!r} of {self.source_root}",
                stage="dataset",
            )
        jobs = []
        for entry in entries:
            for repeat in range(self.enhancement.repeats):
                index = len(jobs)
                jobs.append(_Job(index, entry, repeat, derive_seed(self.config.seed, index)))
        return jobs

    def run(self, recorder: Optional[RunRecorder] = None) -> DatasetManifest:
        """Assemble every job and write the generated dataset."""
        jobs = self.jobs()
        if self.de_enhance:
            self.fixed_informed = self._fixed_informed()
            fixed = self.fixed_informed.provenance.describe()
            logger.info(f"De-enhancement with fixed informed slice {fixed}")
        mode = "de-enhancement" if self.de_enhance else "enhancement"
        logger.info(
            f"Running {mode} campaign: {len(jobs)} volumes, informed={self.enhancement.informed}"
        )

        if self.enhancement.jobs > 1:
            with ThreadPoolExecutor(max_workers=self.enhancement.jobs) as pool:
                results = list(pool.map(self._run_job, jobs))
        else:
            results = [self._run_job(job) for job in jobs]

        manifest = DatasetManifest(entries=[entry for entry, _ in results])
        manifest_path = save_manifest(self.output_root, manifest)
        if recorder is not None:
            recorder.add_outputs([manifest_path])
            for entry, records in results:
                recorder.add_outputs(
                    [self.output_root / entry.volume, self.output_root / entry.mask]
                )
                recorder.add_assembly_log(entry.id, records)
        return manifest


def sample_one(
    config: RunConfig,
    models: CampaignModels,
    mask_path: Union[str, Path],
    output_path: Union[str, Path],
    informed: InformedSlice,
    p: float,
    seed: int,
) -> Tuple[Path, list]:
    """Assemble one volume for a mask file and write it with its assembly log."""
    mask = read_mask_volume(mask_path)
    result = assemble_volume(
        models.volume_model,
        mask,
        p,
        informed,
        config.sampler,
        models.schedule,
        seed,
        Encoder.from_config(config.conditioning),
    )
    output_path = Path(output_path)
    write_volume(output_path, result.volume)
    write_assembly_log(output_path.with_suffix(".jsonl"), result.records)
    return output_path, result.records
