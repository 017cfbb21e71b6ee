#!/usr/bin/env python3
"""Directional ablation checks on a trained desk model.

Run after gen-data, split, train-slice and train-volume with the same config:

    python scripts/run_desk_experiment.py -c config/config.yaml --out runs/desk.json

Each check assembles the test masks twice under two settings and compares a
metric between them. Results are printed as a table and written as JSON.
"""

import json
import logging
import math
from pathlib import Path
from typing import Callable, Dict, List, Optional

import click
import numpy as np
from rich.console import Console
from rich.table import Table

from mask_volume_synth.augment import augment_mask
from mask_volume_synth.conditioning import (
    Encoder,
    InformedSlice,
    select_informed_slice,
    slice_from_volume,
)
from mask_volume_synth.config import RunConfig, load_config
from mask_volume_synth.enhancement import CampaignModels, load_campaign_models
from mask_volume_synth.logger import setup_logging
from mask_volume_synth.metrics import (
    dice_per_label,
    ms_ssim,
    recover_labels,
    seam_discontinuity,
    volume_consistency,
)
from mask_volume_synth.models import DatasetManifest, InformedProvenance, Split
from mask_volume_synth.phantom import load_entry, load_manifest, render_image
from mask_volume_synth.sampler import AssemblyResult, assemble_volume, derive_seed
from mask_volume_synth.volume_io import MaskVolume, Volume

logger = logging.getLogger(__name__)

INFORMED_MARGIN = 0.03
GAIN_LOW, GAIN_HIGH = 0.6, 1.4
GAIN_ORDER_FRACTION = 14 / 16
DE_ENHANCE_STD_DROP = 0.5
DICE_FLOOR = 0.6


class DeskExperiment:
    """Assembles the test split under paired settings and scores each check."""

    def __init__(self, config: RunConfig, models: CampaignModels):
        self.config = config
        self.models = models
        self.encoder = Encoder.from_config(config.conditioning)
        self.root = config.dataset.path
        self.manifest = load_manifest(self.root)
        self.train = DatasetManifest(entries=self.manifest.by_split(Split.TRAIN))
        self.test = self.manifest.by_split(Split.TEST)
        if not self.test or not self.train.entries:
            raise click.ClickException("dataset needs both train and test entries (run split)")
        self.spec = config.dataset.phantom

    def _assemble(
        self,
        mask: MaskVolume,
        p: float,
        informed: InformedSlice,
        seed: int,
        **sampler_updates,
    ) -> AssemblyResult:
        sampler = self.config.sampler.model_copy(update=sampler_updates)
        return assemble_volume(
            self.models.volume_model,
            mask,
            p,
            informed,
            sampler,
            self.models.schedule,
            seed,
            self.encoder,
        )

    def _cases(self):
        for index, entry in enumerate(self.test):
            volume, mask = load_entry(self.root, entry)
            seed = derive_seed(self.config.seed, index)
            p = float(np.random.default_rng(seed).uniform(0.0, 1.0))
            yield index, entry, volume, mask, seed, p

    def _true_slice(self, volume: Volume, entry_id: str, p: float) -> InformedSlice:
        index = min(math.floor(p * volume.depth), volume.depth - 1)
        return slice_from_volume(volume, index, volume_id=entry_id)

    def _cross_slice(self, seed: int) -> InformedSlice:
        return select_informed_slice(self.train, "ic", derive_seed(seed, 1), root=self.root)

    def informed_prior(self) -> Dict[str, float]:
        """True informed slice vs a cross-sampled one, scored by MS-SSIM to ground truth."""
        scales = self.config.evaluation.ms_ssim_scales
        true_scores, cross_scores = [], []
        for _, entry, volume, mask, seed, p in self._cases():
            true = self._assemble(mask, p, self._true_slice(volume, entry.id, p), seed)
            cross = self._assemble(mask, p, self._cross_slice(seed), seed)
            true_scores.append(ms_ssim(true.volume, volume, scales))
            cross_scores.append(ms_ssim(cross.volume, volume, scales))
        true_mean, cross_mean = float(np.mean(true_scores)), float(np.mean(cross_scores))
        return {
            "true_ms_ssim": true_mean,
            "cross_ms_ssim": cross_mean,
            "passed": true_mean - cross_mean >= INFORMED_MARGIN,
        }

    def consistency_ablation(self) -> Dict[str, float]:
        """Depth-axis layers and overlap pinning each against their ablation."""
        full_c, flat_c, pinned_s, free_s = [], [], [], []
        for _, entry, volume, mask, seed, p in self._cases():
            informed = self._true_slice(volume, entry.id, p)
            full = self._assemble(mask, p, informed, seed)
            flat = self._assemble(mask, p, informed, seed, volumetric=False)
            free = self._assemble(mask, p, informed, seed, overlapped_inpainting=False)
            full_c.append(volume_consistency(full.volume))
            flat_c.append(volume_consistency(flat.volume))
            pinned_s.append(seam_discontinuity(full.volume, full.plan))
            free_s.append(seam_discontinuity(free.volume, free.plan))
        result = {
            "consistency_full": float(np.mean(full_c)),
            "consistency_no_volumetric": float(np.mean(flat_c)),
            "seam_inpainted": float(np.mean(pinned_s)),
            "seam_no_overlap_inpaint": float(np.mean(free_s)),
        }
        result["passed"] = (
            result["consistency_full"] < result["consistency_no_volumetric"]
            and result["seam_inpainted"] < result["seam_no_overlap_inpaint"]
        )
        return result

    def _styled_slice(self, gain: float, seed: int) -> InformedSlice:
        rng = np.random.default_rng(seed)
        entry = self.train.entries[int(rng.integers(self.train.N))]
        _, mask = load_entry(self.root, entry)
        style = entry.style.model_copy(update={"gain": gain})
        image = render_image(self.spec, mask.labels, style)
        index = int(rng.integers(mask.depth))
        return InformedSlice(
            pixels=image[index],
            provenance=InformedProvenance(kind="volume", volume_id=entry.id, slice_index=index),
        )

    def style_transfer(self) -> Dict[str, float]:
        """Output intensity follows the informed slice's gain; one fixed slice flattens it."""
        ordered = 0
        fixed = self._cross_slice(derive_seed(self.config.seed, 10**6))
        true_means, fixed_means = [], []
        for _, _, volume, mask, seed, p in self._cases():
            low = self._assemble(mask, p, self._styled_slice(GAIN_LOW, seed), seed)
            high = self._assemble(mask, p, self._styled_slice(GAIN_HIGH, seed), seed)
            ordered += int(high.volume.voxels.mean() > low.volume.voxels.mean())
            true_means.append(float(volume.voxels.mean()))
            fixed_means.append(float(self._assemble(mask, p, fixed, seed).volume.voxels.mean()))
        true_std, fixed_std = float(np.std(true_means)), float(np.std(fixed_means))
        return {
            "gain_ordered": ordered,
            "cases": len(self.test),
            "true_mean_std": true_std,
            "de_enhanced_mean_std": fixed_std,
            "passed": ordered >= GAIN_ORDER_FRACTION * len(self.test)
            and fixed_std <= (1.0 - DE_ENHANCE_STD_DROP) * true_std,
        }

    def mask_adherence(self) -> Dict[str, float]:
        """Dice of labels recovered from outputs, on plain and augmented masks."""
        params = self.config.enhancement.augment
        plain, augmented = [], []
        for _, entry, volume, mask, seed, p in self._cases():
            informed = self._true_slice(volume, entry.id, p)
            moved = augment_mask(mask, params, derive_seed(seed, 3))
            for target, scores in ((mask, plain), (moved, augmented)):
                result = self._assemble(target, p, informed, seed)
                recovered = recover_labels(result.volume, self.spec, reference_mask=target)
                per_label = dice_per_label(target, recovered)
                scores.append(float(np.mean(list(per_label.values()))))
        result = {"dice": float(np.mean(plain)), "dice_augmented": float(np.mean(augmented))}
        result["passed"] = min(result.values()) >= DICE_FLOOR
        return result


CHECKS: Dict[str, Callable[[DeskExperiment], Dict[str, float]]] = {
    "informed-prior": DeskExperiment.informed_prior,
    "consistency": DeskExperiment.consistency_ablation,
    "style-transfer": DeskExperiment.style_transfer,
    "mask-adherence": DeskExperiment.mask_adherence,
}


def _print(results: Dict[str, Dict[str, float]], console: Console) -> None:
    table = Table(show_header=True, header_style="bold magenta", title="Desk experiment")
    table.add_column("Check", style="cyan")
    table.add_column("Values")
    table.add_column("Result", justify="center")
    for name, values in results.items():
        shown = ", ".join(
            f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}"
            for k, v in values.items()
            if k != "passed"
        )
        verdict = "[green]PASS[/green]" if values["passed"] else "[red]FAIL[/red]"
        table.add_row(name, shown, verdict)
    console.print(table)


@click.command()
@click.option("--config", "-c", type=click.Path(path_type=Path), required=True)
@click.option("--out", type=click.Path(path_type=Path), default=None, help="JSON results file")
@click.option(
    "--only",
    type=click.Choice(list(CHECKS)),
    multiple=True,
    help="Run only these checks (repeatable)",
)
@click.option("--verbose", "-v", is_flag=True)
def main(config: Path, out: Optional[Path], only: List[str], verbose: bool) -> None:
    """Run the directional checks against trained checkpoints."""
    run_config = load_config(config)
    setup_logging(logging.DEBUG if verbose else logging.INFO)
    experiment = DeskExperiment(run_config, load_campaign_models(run_config, False))

    results = {}
    for name in only or CHECKS:
        logger.info(f"Running {name} on {len(experiment.test)} test masks")
        results[name] = CHECKS[name](experiment)
    _print(results, Console())

    if out is not None:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(results, indent=2), encoding="utf-8")
        click.echo(f"Results written to {out}")
    if not all(r["passed"] for r in results.values()):
        raise SystemExit(1)


if __name__ == "__main__":
    main()
