"""Command-line interface for Mask Volume Synth."""

import functools
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Dict, Optional

import click
from pydantic import ValidationError

from mask_volume_synth import __version__
from mask_volume_synth.config import RunConfig, load_config
from mask_volume_synth.exceptions import (
    ConfigError,
    ContainerFormatError,
    MissingArtifactError,
    NumericFailureError,
    PlanError,
    ShapeContractError,
)
from mask_volume_synth.logger import setup_logging

logger = logging.getLogger(__name__)

EXIT_CODES = (
    (ConfigError, 2),
    (ValidationError, 2),
    (PlanError, 2),
    (ShapeContractError, 2),
    (MissingArtifactError, 3),
    (NumericFailureError, 4),
    (ContainerFormatError, 5),
    (OSError, 5),
)


def exit_code_for(error: BaseException) -> int:
    """Process exit code for an exception (1 when unmapped)."""
    for kind, code in EXIT_CODES:
        if isinstance(error, kind):
            return code
    return 1


def handle_errors(func: Callable) -> Callable:
    """Report command failures on stderr and exit with the mapped code."""

    @functools.wraps(func)
    def wrapper(*args: Any, **kwargs: Any) -> Any:
        try:
            return func(*args, **kwargs)
        except click.exceptions.ClickException:
            raise
        except Exception as e:  # noqa: BLE001
            code = exit_code_for(e)
            logger.debug("Command failed", exc_info=True)
            if isinstance(e, MissingArtifactError) and e.stage:
                click.echo(f"Error (missing {e.stage} artifact): {e}", err=True)
            else:
                click.echo(f"Error: {e}", err=True)
            sys.exit(code)

    return wrapper


def override(config: RunConfig, section: Optional[str] = None, **values: Any) -> RunConfig:
    """Return a re-validated copy of ``config`` with values replaced.

    ``None`` values are ignored so unset CLI options keep the configured value.
    """
    values = {k: v for k, v in values.items() if v is not None}
    if not values:
        return config
    data: Dict[str, Any] = config.model_dump()
    if section is None:
        data.update(values)
    else:
        data[section] = {**data[section], **values}
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"Invalid option values:\n{e}") from e


def _config(ctx: click.Context) -> RunConfig:
    return ctx.obj["config"]


def _seed(ctx: click.Context) -> Optional[int]:
    return ctx.obj.get("seed")


@click.group()
@click.version_option(version=__version__)
@click.option(
    "--config",
    "-c",
    type=click.Path(path_type=Path),
    default=None,
    help="Path to a YAML or JSON run configuration (defaults apply when omitted)",
)
@click.option("--seed", type=int, default=None, help="Override the command's seed")
@click.option(
    "--out",
    type=click.Path(path_type=Path),
    default=None,
    help="Output directory (overrides output_dir)",
)
@click.option(
    "--verbose",
    "-v",
    is_flag=True,
    help="Enable verbose logging",
)
@click.pass_context
def main(
    ctx: click.Context,
    config: Optional[Path],
    seed: Optional[int],
    out: Optional[Path],
    verbose: bool,
) -> None:
    """Mask Volume Synth - mask-conditioned volume diffusion on 3D phantoms.

    Typical flow: gen-data, split, train-slice, train-volume, train-posmodel,
    enhance, evaluate.
    """
    ctx.ensure_object(dict)

    try:
        run_config = load_config(config) if config is not None else RunConfig()
        run_config = override(run_config, output_dir=out)
    except ConfigError as e:
        setup_logging(logging.INFO)
        click.echo(f"Error: {e}", err=True)
        ctx.exit(2)

    log_level = logging.DEBUG if verbose else getattr(logging, run_config.logging.level)
    setup_logging(
        log_level,
        log_file=run_config.logging.file,
        log_format=run_config.logging.format,
        console_output=run_config.logging.console_output,
    )
    logger.info(f"Mask Volume Synth v{__version__}")
    if config is not None:
        logger.debug(f"Loaded configuration from {config}")

    ctx.obj["config"] = run_config
    ctx.obj["seed"] = seed


@main.command("gen-data")
@click.option("--count", type=int, default=None, help="Number of phantoms")
@click.option(
    "--jobs", type=int, default=1, show_default=True, help="Phantoms generated in parallel"
)
@click.pass_context
@handle_errors
def gen_data(ctx: click.Context, count: Optional[int], jobs: int) -> None:
    """Generate a procedural phantom dataset."""
    from mask_volume_synth.phantom import generate_dataset
    from mask_volume_synth.run_manifest import RunRecorder

    config = override(_config(ctx), "dataset", count=count, seed=_seed(ctx))
    ds = config.dataset
    recorder = RunRecorder("gen-data", config)
    manifest = generate_dataset(ds.phantom, ds.count, ds.seed, ds.path, jobs=jobs)
    recorder.add_outputs([ds.path / e.volume for e in manifest.entries])
    recorder.add_outputs([ds.path / e.mask for e in manifest.entries])
    recorder.write(ds.path, "run_manifest_gen-data.json")
    click.echo(f"Generated {manifest.N} phantoms in {ds.path}")


@main.command()
@click.option("--train-fraction", type=float, default=None, help="Fraction of entries for training")
@click.pass_context
@handle_errors
def split(ctx: click.Context, train_fraction: Optional[float]) -> None:
    """Assign train/test splits to the dataset."""
    from mask_volume_synth.models import Split
    from mask_volume_synth.phantom import load_manifest, save_manifest, split_dataset
    from mask_volume_synth.run_manifest import RunRecorder

    config = override(_config(ctx), "dataset", train_fraction=train_fraction, seed=_seed(ctx))
    ds = config.dataset
    recorder = RunRecorder("split", config)
    recorder.add_inputs([ds.path / "manifest.json"])
    manifest = split_dataset(load_manifest(ds.path), ds.train_fraction, ds.seed)
    recorder.add_outputs([save_manifest(ds.path, manifest)])
    recorder.write(ds.path, "run_manifest_split.json")
    click.echo(
        f"Split {manifest.N} entries: {len(manifest.by_split(Split.TRAIN))} train / "
        f"{len(manifest.by_split(Split.TEST))} test"
    )


def _train_denoiser(ctx: click.Context, section: str, iterations: Optional[int]) -> None:
    from mask_volume_synth.checkpoint import build_metadata, load_checkpoint, save_checkpoint
    from mask_volume_synth.conditioning import Encoder
    from mask_volume_synth.denoiser import DenoiserModel, init_denoiser
    from mask_volume_synth.phantom import load_manifest
    from mask_volume_synth.run_manifest import RunRecorder
    from mask_volume_synth.schedule import schedule_from_config
    from mask_volume_synth.training import load_training_data, train_stage, write_loss_trace

    config = override(_config(ctx), section, iterations=iterations, seed=_seed(ctx))
    train_cfg = getattr(config, section)
    command = section.replace("_", "-")
    recorder = RunRecorder(command, config)
    data = load_training_data(load_manifest(config.dataset.path), config.dataset.path)

    if section == "train_volume":
        source = config.checkpoints.slice_model
        if not source.exists():
            raise MissingArtifactError(
                f"Slice-stage checkpoint not found: {source} (run `volsynth train-slice` first)",
                stage="slice",
            )
        model, _ = load_checkpoint(source)
        if not isinstance(model, DenoiserModel):
            raise MissingArtifactError(f"{source} does not hold a volume denoiser", stage="slice")
        recorder.add_inputs([source])
        target = config.checkpoints.volume_model
    else:
        model = init_denoiser(config.architecture, train_cfg.seed)
        target = config.checkpoints.slice_model

    schedule = schedule_from_config(config.schedule)
    result = train_stage(model, data, schedule, train_cfg, Encoder.from_config(config.conditioning))
    metadata = build_metadata(model, config.schedule, step=result.iterations, seed=train_cfg.seed)
    save_checkpoint(target, model, metadata)
    trace = write_loss_trace(config.output_dir / f"{section}_loss.csv", result)
    recorder.add_outputs([target, trace])
    recorder.write(target.parent, f"run_manifest_{command}.json")
    click.echo(f"Saved {train_cfg.stage.value}-stage checkpoint to {target}")
    click.echo(f"Final loss {result.losses[-1]:.5f}; loss trace at {trace}")


@main.command("train-slice")
@click.option("--iterations", type=int, default=None, help="Override training iterations")
@click.pass_context
@handle_errors
def train_slice(ctx: click.Context, iterations: Optional[int]) -> None:
    """Train the volume denoiser's slice stage."""
    _train_denoiser(ctx, "train_slice", iterations)


@main.command("train-volume")
@click.option("--iterations", type=int, default=None, help="Override training iterations")
@click.pass_context
@handle_errors
def train_volume(ctx: click.Context, iterations: Optional[int]) -> None:
    """Tune the depth-axis layers on top of a slice-stage checkpoint."""
    _train_denoiser(ctx, "train_volume", iterations)


@main.command("train-posmodel")
@click.option("--iterations", type=int, default=None, help="Override training iterations")
@click.pass_context
@handle_errors
def train_posmodel(ctx: click.Context, iterations: Optional[int]) -> None:
    """Train the position-conditioned slice model used for IG informed slices."""
    from mask_volume_synth.checkpoint import build_metadata, save_checkpoint
    from mask_volume_synth.phantom import load_manifest
    from mask_volume_synth.run_manifest import RunRecorder
    from mask_volume_synth.schedule import schedule_from_config
    from mask_volume_synth.training import (
        load_training_data,
        train_position_slice_model,
        write_loss_trace,
    )

    config = override(_config(ctx), "train_position", iterations=iterations, seed=_seed(ctx))
    recorder = RunRecorder("train-posmodel", config)
    data = load_training_data(load_manifest(config.dataset.path), config.dataset.path)
    result = train_position_slice_model(
        data, schedule_from_config(config.schedule), config.train_position, config.architecture
    )
    target = config.checkpoints.position_model
    metadata = build_metadata(
        result.model, config.schedule, step=result.iterations, seed=config.train_position.seed
    )
    save_checkpoint(target, result.model, metadata)
    trace = write_loss_trace(config.output_dir / "train_position_loss.csv", result)
    recorder.add_outputs([target, trace])
    recorder.write(target.parent, "run_manifest_train-posmodel.json")
    click.echo(f"Saved position slice model to {target}")


def sampling_options(func: Callable) -> Callable:
    """Options shared by sample, enhance and de-enhance."""
    options = [
        click.option(
            "--informed",
            type=str,
            default=None,
            help="Informed slice policy: ic, ig, self or file:PATH[#k]",
        ),
        click.option(
            "--no-overlap-inpaint",
            is_flag=True,
            help="Ablation: ignore pinned overlap slices while sampling",
        ),
        click.option(
            "--no-volumetric",
            is_flag=True,
            help="Ablation: bypass the depth-axis layers while sampling",
        ),
    ]
    for option in reversed(options):
        func = option(func)
    return func


def _sampling_config(
    ctx: click.Context, informed: Optional[str], no_overlap_inpaint: bool, no_volumetric: bool
) -> RunConfig:
    config = override(_config(ctx), "enhancement", informed=informed)
    config = override(
        config,
        "sampler",
        overlapped_inpainting=False if no_overlap_inpaint else None,
        volumetric=False if no_volumetric else None,
        seed=_seed(ctx),
    )
    return override(config, seed=_seed(ctx))


@main.command()
@click.argument("mask_file", type=click.Path(path_type=Path))
@sampling_options
@click.option("--position", type=float, default=0.5, show_default=True, help="Start position p")
@click.option(
    "--source",
    type=click.Path(path_type=Path),
    default=None,
    help="Volume for --informed self",
)
@click.pass_context
@handle_errors
def sample(
    ctx: click.Context,
    mask_file: Path,
    informed: Optional[str],
    no_overlap_inpaint: bool,
    no_volumetric: bool,
    position: float,
    source: Optional[Path],
) -> None:
    """Assemble one volume for MASK_FILE."""
    import math

    from mask_volume_synth.conditioning import (
        load_informed_file,
        select_informed_slice,
        slice_from_volume,
    )
    from mask_volume_synth.enhancement import load_campaign_models, sample_one
    from mask_volume_synth.models import DatasetManifest, InformedPolicy
    from mask_volume_synth.phantom import load_manifest
    from mask_volume_synth.run_manifest import RunRecorder
    from mask_volume_synth.volume_io import read_image_volume, read_mask_volume

    config = _sampling_config(ctx, informed, no_overlap_inpaint, no_volumetric)
    policy = config.enhancement.informed
    if not mask_file.exists():
        raise MissingArtifactError(f"Mask file not found: {mask_file}", stage="mask")
    models = load_campaign_models(config, need_slice_model=policy == "ig")
    recorder = RunRecorder("sample", config)
    recorder.add_inputs([mask_file, config.checkpoints.volume_model])

    mask = read_mask_volume(mask_file)
    if policy.startswith("file:"):
        informed_slice = load_informed_file(policy[len("file:") :])
    elif policy == InformedPolicy.SELF.value:
        if source is None:
            raise ConfigError("--informed self needs --source VOLUME")
        volume = read_image_volume(source)
        index = min(math.floor(position * volume.depth), volume.depth - 1)
        informed_slice = slice_from_volume(volume, index, volume_id=str(source))
    else:
        informed_slice = select_informed_slice(
            load_manifest(config.dataset.path) if policy == "ic" else DatasetManifest(),
            policy,
            config.seed,
            root=config.dataset.path,
            p=position,
            slice_model=models.slice_model,
            schedule=models.schedule,
            sampler_config=config.sampler,
            spatial=tuple(mask.labels.shape[1:]),
        )

    output = config.output_dir / f"{mask_file.stem}_sampled.vol"
    path, records = sample_one(
        config, models, mask_file, output, informed_slice, position, config.seed
    )
    recorder.add_outputs([path, path.with_suffix(".jsonl")])
    recorder.add_assembly_log(mask_file.stem, records)
    recorder.write(config.output_dir, "run_manifest_sample.json")
    provenance = informed_slice.provenance.describe()
    click.echo(f"Wrote {path} ({len(records)} windows, informed {provenance})")


def _campaign(
    ctx: click.Context,
    command: str,
    de_enhance: bool,
    informed: Optional[str],
    no_overlap_inpaint: bool,
    no_volumetric: bool,
    mask_augment: Optional[bool],
    repeats: Optional[int],
    jobs: Optional[int],
    split_name: Optional[str],
) -> None:
    from mask_volume_synth.enhancement import Campaign, load_campaign_models
    from mask_volume_synth.run_manifest import RunRecorder

    config = _sampling_config(ctx, informed, no_overlap_inpaint, no_volumetric)
    config = override(
        config,
        "enhancement",
        mask_augment=mask_augment,
        repeats=repeats,
        jobs=jobs,
        split=split_name,
        de_enhance=de_enhance,
    )
    models = load_campaign_models(config, need_slice_model=config.enhancement.informed == "ig")
    output_root = config.output_dir / ("de_enhanced" if de_enhance else "enhanced")
    recorder = RunRecorder(command, config)
    recorder.add_inputs(
        [config.dataset.path / "manifest.json", config.checkpoints.volume_model]
        + ([config.checkpoints.position_model] if models.slice_model is not None else [])
    )
    manifest = Campaign(config, config.dataset.path, output_root, models, de_enhance).run(recorder)
    path = recorder.write(output_root)
    click.echo(f"Wrote {manifest.N} volumes to {output_root}; run manifest {path}")


def campaign_options(func: Callable) -> Callable:
    """Options shared by enhance and de-enhance."""
    options = [
        click.option("--mask-augment/--no-mask-augment", default=None, help="3D mask augmentation"),
        click.option("--repeats", type=int, default=None, help="Volumes per source mask"),
        click.option("--jobs", type=int, default=None, help="Volumes assembled concurrently"),
        click.option(
            "--split",
            "split_name",
            type=click.Choice(["train", "test", "all"]),
            default=None,
            help="Source masks to sample",
        ),
    ]
    for option in reversed(options):
        func = option(func)
    return func


@main.command()
@sampling_options
@campaign_options
@click.pass_context
@handle_errors
def enhance(ctx: click.Context, **options: Any) -> None:
    """Synthesize a new dataset from the source masks."""
    _campaign(ctx, "enhance", False, **options)


@main.command("de-enhance")
@sampling_options
@campaign_options
@click.pass_context
@handle_errors
def de_enhance(ctx: click.Context, **options: Any) -> None:
    """Re-synthesize the source masks with one fixed informed slice."""
    _campaign(ctx, "de-enhance", True, **options)


@main.command()
@click.option(
    "--generated", type=click.Path(path_type=Path), default=None, help="Generated dataset"
)
@click.option(
    "--reference", type=click.Path(path_type=Path), default=None, help="Reference dataset"
)
@click.option("--unpaired", is_flag=True, help="Skip paired MS-SSIM")
@click.option(
    "--format",
    "-f",
    "report_format",
    type=click.Choice(["table", "json", "csv", "markdown"]),
    default="table",
    help="Console/report format (metrics.json and per_volume.csv are always written)",
)
@click.pass_context
@handle_errors
def evaluate(
    ctx: click.Context,
    generated: Optional[Path],
    reference: Optional[Path],
    unpaired: bool,
    report_format: str,
) -> None:
    """Compare a generated dataset with a reference dataset."""
    from mask_volume_synth.evaluation import evaluate_datasets
    from mask_volume_synth.reporting import generate_report
    from mask_volume_synth.run_manifest import RunRecorder

    config = override(
        _config(ctx),
        "evaluation",
        generated=generated,
        reference=reference,
        paired=False if unpaired else None,
    )
    settings = config.evaluation
    generated_root = settings.generated or config.output_dir / "enhanced"
    reference_root = settings.reference or config.dataset.path
    roots = ((generated_root, "generated dataset"), (reference_root, "reference dataset"))
    for root, stage in roots:
        if not (root / "manifest.json").exists():
            raise MissingArtifactError(f"No dataset manifest in {root}", stage=stage)

    recorder = RunRecorder("evaluate", config)
    recorder.add_inputs([generated_root / "manifest.json", reference_root / "manifest.json"])
    report, rows = evaluate_datasets(
        generated_root, reference_root, config.dataset.phantom, settings
    )

    out_dir = config.output_dir
    metrics_path = out_dir / "metrics.json"
    rows_path = out_dir / "per_volume.csv"
    generate_report(report, format="json", output_path=metrics_path, per_volume=rows)
    generate_report(report, format="csv", output_path=rows_path, per_volume=rows)
    if report_format == "table":
        generate_report(report, format="table", per_volume=rows)
    elif report_format == "markdown":
        generate_report(report, format="markdown", output_path=out_dir / "metrics.md")
    recorder.add_outputs([metrics_path, rows_path])
    recorder.write(out_dir, "run_manifest_evaluate.json")
    click.echo(f"Metrics written to {metrics_path}")


@main.command()
@click.argument("volume_file", type=click.Path(path_type=Path))
@click.argument("output_png", type=click.Path(path_type=Path))
@click.pass_context
@handle_errors
def montage(ctx: click.Context, volume_file: Path, output_png: Path) -> None:
    """Render axial, coronal and sagittal sections of VOLUME_FILE as a PNG."""
    from mask_volume_synth.montage import write_montage
    from mask_volume_synth.volume_io import read_image_volume

    if not volume_file.exists():
        raise MissingArtifactError(f"Volume file not found: {volume_file}", stage="volume file")
    path = write_montage(read_image_volume(volume_file), output_png)
    click.echo(f"Montage written to {path}")


@main.command()
@click.option("--n-params", type=int, default=100, show_default=True, help="Scalars to check")
@click.option("--tolerance", type=float, default=1e-3, show_default=True)
@click.option(
    "--checkpoint", type=click.Path(path_type=Path), default=None, help="Denoiser to check"
)
@click.option(
    "--size", type=int, default=8, show_default=True, help="Slice side of the probe window"
)
@click.option("--strict", is_flag=True, help="Exit with code 4 when the check fails")
@click.pass_context
@handle_errors
def gradcheck(
    ctx: click.Context,
    n_params: int,
    tolerance: float,
    checkpoint: Optional[Path],
    size: int,
    strict: bool,
) -> None:
    """Compare analytic gradients with central finite differences."""
    from mask_volume_synth.checkpoint import load_checkpoint
    from mask_volume_synth.denoiser import DenoiserModel, init_denoiser
    from mask_volume_synth.reporting import print_gradient_report
    from mask_volume_synth.schedule import schedule_from_config
    from mask_volume_synth.training import gradient_check, make_gradient_sample

    config = _config(ctx)
    seed = _seed(ctx) or 0
    if checkpoint is not None:
        model, _ = load_checkpoint(checkpoint)
        if not isinstance(model, DenoiserModel):
            raise ConfigError(f"{checkpoint} does not hold a volume denoiser")
    else:
        model = init_denoiser(config.architecture, seed)
    schedule = schedule_from_config(config.schedule)
    sample = make_gradient_sample(model, schedule, window_length=4, spatial=(size, size), seed=seed)
    report = gradient_check(model, sample, tolerance=tolerance, n_params=n_params, seed=seed)
    print_gradient_report(report)
    if strict and not report.passed:
        raise NumericFailureError(
            f"gradient check failed: max relative error {report.max_relative_error:.2e}"
        )


if __name__ == "__main__":
    main()
