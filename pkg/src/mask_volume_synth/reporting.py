"""
Evaluation and diagnostics reporting in CLI table, JSON, CSV and Markdown formats.
"""

import json
import logging
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Optional

import pandas as pd
from rich.console import Console
from rich.panel import Panel
from rich.table import Table

from . import __version__
from .models import GradientCheckReport, MetricReport

logger = logging.getLogger(__name__)


class MetricReportGenerator:
    """
    Renders a MetricReport, optionally with its per-volume rows.

    Per-volume rows are a DataFrame with one row per generated volume
    (id, source_id, consistency, ms_ssim, mean_dice, mean_intensity).
    """

    def __init__(
        self,
        report: MetricReport,
        per_volume: Optional[pd.DataFrame] = None,
        console: Optional[Console] = None,
    ):
        """
        Initialize the report generator.

        Args:
            report: Aggregate metric report
            per_volume: Optional per-volume metric rows
            console: Console to print to (a new one by default)
        """
        self.report = report
        self.per_volume = per_volume
        self.console = console or Console()

    def _summary_rows(self) -> Dict[str, str]:
        r = self.report
        rows = {
            "FID-A": f"{r.fid_a:.4f}",
            "FID-C": f"{r.fid_c:.4f}",
            "FID-S": f"{r.fid_s:.4f}",
            "MS-SSIM": (
                f"{r.ms_ssim:.4f} ({r.ms_ssim_scales} scales)" if r.ms_ssim is not None else "n/a"
            ),
            "Consistency": f"{r.consistency:.4f}",
        }
        if r.reference_consistency is not None:
            rows["Consistency (reference)"] = f"{r.reference_consistency:.4f}"
        if r.dice_per_label:
            rows["Mean Dice"] = f"{r.mean_dice:.4f}"
        rows["Volumes (generated / reference)"] = f"{r.generated_count} / {r.reference_count}"
        return rows

    def generate_cli_table(self) -> None:
        """Display the report as rich tables."""
        title = Panel(
            f"[bold cyan]Volume Synthesis Evaluation[/bold cyan]\n"
            f"Generated: {datetime.now().strftime('%Y-%m-%d %H:%M:%S')}",
            expand=False,
        )
        self.console.print(title)

        summary = Table(show_header=True, header_style="bold magenta")
        summary.add_column("Metric", style="cyan")
        summary.add_column("Value", justify="right")
        for name, value in self._summary_rows().items():
            summary.add_row(name, value)
        self.console.print(summary)

        if self.report.dice_per_label:
            dice_table = Table(
                show_header=True, header_style="bold magenta", title="Dice per label"
            )
            dice_table.add_column("Label", justify="right", style="cyan")
            dice_table.add_column("Dice", justify="right")
            for label, score in sorted(self.report.dice_per_label.items()):
                dice_table.add_row(str(label), f"{score:.4f}")
            self.console.print(dice_table)

        if self.per_volume is not None and not self.per_volume.empty:
            self.console.print(
                f"[bold yellow]Per-volume rows:[/bold yellow] {len(self.per_volume)} "
                f"(worst consistency: {self.per_volume['consistency'].max():.4f})"
            )

    def generate_json_report(self, output_path: Optional[Path] = None) -> Dict[str, Any]:
        """
        Build the JSON report.

        Args:
            output_path: Optional path to write the JSON file

        Returns:
            Dict with metadata, metrics and per-volume rows
        """
        data: Dict[str, Any] = {
            "metadata": {
                "generated_at": datetime.now().isoformat(),
                "tool_version": __version__,
            },
            "metrics": self.report.model_dump(mode="json"),
        }
        if self.per_volume is not None:
            data["per_volume"] = json.loads(self.per_volume.to_json(orient="records"))

        if output_path:
            output_path.parent.mkdir(parents=True, exist_ok=True)
            with open(output_path, "w", encoding="utf-8") as f:
                json.dump(data, f, indent=2)
            logger.info(f"JSON report written to {output_path}")
        return data

    def generate_csv_export(self, output_path: Path) -> None:
        """
        Write per-volume rows (or the aggregate metrics when absent) as CSV.

        Args:
            output_path: Path to write CSV file
        """
        output_path.parent.mkdir(parents=True, exist_ok=True)
        if self.per_volume is not None:
            frame = self.per_volume
        else:
            frame = pd.DataFrame([{k: v for k, v in self._flat_metrics().items()}])
        frame.to_csv(output_path, index=False)
        logger.info(f"CSV export written to {output_path}")

    def _flat_metrics(self) -> Dict[str, Any]:
        flat = self.report.model_dump(exclude={"dice_per_label", "slice_counts"})
        for label, score in sorted(self.report.dice_per_label.items()):
            flat[f"dice_{label}"] = score
        return flat

    def generate_markdown_report(self, output_path: Path) -> None:
        """
        Write a Markdown summary.

        Args:
            output_path: Path to write Markdown file
        """
        output_path.parent.mkdir(parents=True, exist_ok=True)
        with open(output_path, "w", encoding="utf-8") as f:
            f.write("# Volume Synthesis Evaluation\n\n")
            f.write(f"**Generated:** {datetime.now().strftime('%Y-%m-%d %H:%M:%S')}\n\n")
            f.write("| Metric | Value |\n|---|---:|\n")
            for name, value in self._summary_rows().items():
                f.write(f"| {name} | {value} |\n")
            if self.report.dice_per_label:
                f.write("\n## Dice per label\n\n| Label | Dice |\n|---:|---:|\n")
                for label, score in sorted(self.report.dice_per_label.items()):
                    f.write(f"| {label} | {score:.4f} |\n")
        logger.info(f"Markdown report written to {output_path}")


def generate_report(
    report: MetricReport,
    format: str = "table",
    output_path: Optional[Path] = None,
    per_volume: Optional[pd.DataFrame] = None,
) -> Optional[Dict[str, Any]]:
    """
    Render a metric report in the requested format.

    Args:
        report: Aggregate metric report
        format: Output format ('table', 'json', 'csv', 'markdown')
        output_path: Optional output file path
        per_volume: Optional per-volume rows

    Returns:
        Dict for JSON format, None for others
    """
    generator = MetricReportGenerator(report, per_volume)

    if format == "table":
        generator.generate_cli_table()
        return None
    elif format == "json":
        return generator.generate_json_report(output_path)
    elif format == "csv":
        if not output_path:
            raise ValueError("output_path required for CSV format")
        generator.generate_csv_export(output_path)
        return None
    elif format == "markdown":
        if not output_path:
            raise ValueError("output_path required for Markdown format")
        generator.generate_markdown_report(output_path)
        return None
    else:
        raise ValueError(f"Unknown format: {format}")


def print_gradient_report(report: GradientCheckReport, console: Optional[Console] = None) -> None:
    """Show a gradient check outcome and its worst parameters."""
    console = console or Console()
    status = "[bold green]PASS[/bold green]" if report.passed else "[bold red]FAIL[/bold red]"
    console.print(
        f"Gradient check {status}: {report.checked} scalars, max relative error "
        f"{report.max_relative_error:.2e} (tolerance {report.tolerance:.0e})"
    )
    console.print(f"Layer types: {', '.join(report.layer_types)}")
    table = Table(show_header=True, header_style="bold magenta", title="Worst parameters")
    table.add_column("Parameter", style="cyan")
    table.add_column("Index", justify="right")
    table.add_column("Layer")
    table.add_column("Analytic", justify="right")
    table.add_column("Numeric", justify="right")
    table.add_column("Rel. error", justify="right")
    for entry in report.worst:
        table.add_row(
            entry.name,
            str(entry.index),
            entry.layer_type,
            f"{entry.analytic:.3e}",
            f"{entry.numeric:.3e}",
            f"{entry.relative_error:.2e}",
        )
    console.print(table)
