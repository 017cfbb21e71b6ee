"""Tests for report generation."""

import json
import tempfile
from pathlib import Path

import pandas as pd
import pytest
from rich.console import Console

from mask_volume_synth.models import GradientCheckEntry, GradientCheckReport, MetricReport
from mask_volume_synth.reporting import (
    MetricReportGenerator,
    generate_report,
    print_gradient_report,
)


@pytest.fixture
def sample_report():
    """Create a sample metric report for testing."""
    return MetricReport(
        fid_a=1.25,
        fid_c=2.5,
        fid_s=3.75,
        ms_ssim=0.8125,
        ms_ssim_scales=2,
        dice_per_label={1: 0.95, 2: 0.75, 3: 0.5},
        consistency=0.125,
        reference_consistency=0.0625,
        generated_count=2,
        reference_count=4,
        slice_counts={"A": 48, "C": 64, "S": 64},
    )


@pytest.fixture
def per_volume():
    """Per-volume rows as produced by evaluation."""
    return pd.DataFrame(
        [
            {
                "id": "vol0000_r0",
                "source_id": "vol0000",
                "z": 24,
                "mean_intensity": -0.5,
                "consistency": 0.1,
                "ms_ssim": 0.8,
                "mean_dice": 0.7,
            },
            {
                "id": "vol0001_r0",
                "source_id": "vol0001",
                "z": 24,
                "mean_intensity": -0.4,
                "consistency": 0.15,
                "ms_ssim": float("nan"),
                "mean_dice": 0.8,
            },
        ]
    )


@pytest.fixture
def gradient_report():
    """A passing gradient check with two entries."""
    return GradientCheckReport(
        max_relative_error=3.2e-6,
        tolerance=1e-4,
        passed=True,
        checked=40,
        layer_types=["Conv1d", "Conv2d", "GroupNorm", "Linear"],
        worst=[
            GradientCheckEntry(
                name="volumetric.enc0.conv.weight",
                index=2,
                layer_type="Conv1d",
                analytic=0.0125,
                numeric=0.0125,
                relative_error=3.2e-6,
            ),
            GradientCheckEntry(
                name="head.bias",
                index=0,
                layer_type="Conv2d",
                analytic=-0.5,
                numeric=-0.5,
                relative_error=1e-7,
            ),
        ],
    )


def test_generator_initialization(sample_report, per_volume):
    """Test MetricReportGenerator initialization."""
    generator = MetricReportGenerator(sample_report, per_volume)
    assert generator.report == sample_report
    assert generator.per_volume is per_volume
    assert generator.console is not None


def test_mean_dice(sample_report):
    """Test the mean Dice over labels."""
    assert sample_report.mean_dice == pytest.approx(0.7333333, abs=1e-6)


def test_json_report(sample_report, per_volume):
    """Test JSON report structure."""
    generator = MetricReportGenerator(sample_report, per_volume)
    report = generator.generate_json_report()

    assert set(report) == {"metadata", "metrics", "per_volume"}
    assert "generated_at" in report["metadata"]
    assert report["metrics"]["fid_a"] == 1.25
    assert report["metrics"]["ms_ssim"] == 0.8125
    assert len(report["per_volume"]) == 2
    assert report["per_volume"][0]["id"] == "vol0000_r0"
    assert report["per_volume"][1]["ms_ssim"] is None


def test_json_report_without_rows(sample_report):
    """Test JSON report without per-volume rows."""
    report = MetricReportGenerator(sample_report).generate_json_report()
    assert "per_volume" not in report


def test_json_report_file_output(sample_report, per_volume):
    """Test JSON report file output."""
    generator = MetricReportGenerator(sample_report, per_volume)

    with tempfile.TemporaryDirectory() as tmpdir:
        output_path = Path(tmpdir) / "reports" / "report.json"
        report = generator.generate_json_report(output_path)

        assert output_path.exists()
        with open(output_path, "r", encoding="utf-8") as f:
            file_content = json.load(f)

        assert file_content["metrics"]["fid_c"] == report["metrics"]["fid_c"]
        assert file_content["per_volume"] == report["per_volume"]


def test_csv_export_per_volume(sample_report, per_volume):
    """Test CSV export writes one row per volume."""
    generator = MetricReportGenerator(sample_report, per_volume)

    with tempfile.TemporaryDirectory() as tmpdir:
        output_path = Path(tmpdir) / "report.csv"
        generator.generate_csv_export(output_path)

        frame = pd.read_csv(output_path)
        assert list(frame["id"]) == ["vol0000_r0", "vol0001_r0"]
        assert frame["consistency"].tolist() == pytest.approx([0.1, 0.15])


def test_csv_export_aggregate(sample_report):
    """Test CSV export falls back to the aggregate metrics."""
    generator = MetricReportGenerator(sample_report)

    with tempfile.TemporaryDirectory() as tmpdir:
        output_path = Path(tmpdir) / "report.csv"
        generator.generate_csv_export(output_path)

        frame = pd.read_csv(output_path)
        assert len(frame) == 1
        assert frame.loc[0, "fid_s"] == pytest.approx(3.75)
        assert frame.loc[0, "dice_2"] == pytest.approx(0.75)
        assert "slice_counts" not in frame.columns


def test_markdown_report(sample_report):
    """Test Markdown report generation."""
    generator = MetricReportGenerator(sample_report)

    with tempfile.TemporaryDirectory() as tmpdir:
        output_path = Path(tmpdir) / "report.md"
        generator.generate_markdown_report(output_path)

        content = output_path.read_text(encoding="utf-8")
        assert "# Volume Synthesis Evaluation" in content
        assert "| FID-A | 1.2500 |" in content
        assert "## Dice per label" in content
        assert "| 3 | 0.5000 |" in content


def test_markdown_without_ms_ssim(sample_report):
    """Test unpaired reports show n/a for MS-SSIM."""
    report = sample_report.model_copy(update={"ms_ssim": None})

    with tempfile.TemporaryDirectory() as tmpdir:
        output_path = Path(tmpdir) / "report.md"
        MetricReportGenerator(report).generate_markdown_report(output_path)
        assert "| MS-SSIM | n/a |" in output_path.read_text(encoding="utf-8")


def test_cli_table(sample_report, per_volume, capsys):
    """Test CLI table generation."""
    generator = MetricReportGenerator(sample_report, per_volume)
    generator.generate_cli_table()

    captured = capsys.readouterr()
    assert "Volume Synthesis Evaluation" in captured.out
    assert "FID-S" in captured.out
    assert "Dice per label" in captured.out


def test_generate_report_table(sample_report, capsys):
    """Test generate_report with table format."""
    result = generate_report(sample_report, format="table")

    assert result is None
    captured = capsys.readouterr()
    assert "Volume Synthesis Evaluation" in captured.out


def test_generate_report_json(sample_report, per_volume):
    """Test generate_report with JSON format."""
    result = generate_report(sample_report, format="json", per_volume=per_volume)

    assert result is not None
    assert "metrics" in result
    assert len(result["per_volume"]) == 2


def test_generate_report_csv(sample_report, per_volume):
    """Test generate_report with CSV format."""
    with tempfile.TemporaryDirectory() as tmpdir:
        output_path = Path(tmpdir) / "report.csv"
        result = generate_report(sample_report, "csv", output_path, per_volume)

        assert result is None
        assert output_path.exists()


def test_generate_report_markdown(sample_report):
    """Test generate_report with Markdown format."""
    with tempfile.TemporaryDirectory() as tmpdir:
        output_path = Path(tmpdir) / "report.md"
        result = generate_report(sample_report, format="markdown", output_path=output_path)

        assert result is None
        assert output_path.exists()


def test_generate_report_invalid_format(sample_report):
    """Test generate_report with invalid format."""
    with pytest.raises(ValueError, match="Unknown format"):
        generate_report(sample_report, format="invalid")


@pytest.mark.parametrize("fmt", ["csv", "markdown"])
def test_generate_report_requires_output(sample_report, fmt):
    """Test file formats without an output path."""
    with pytest.raises(ValueError, match="output_path required"):
        generate_report(sample_report, format=fmt)


def test_print_gradient_report(gradient_report):
    """Test gradient check rendering."""
    console = Console(record=True, width=160)
    print_gradient_report(gradient_report, console)

    text = console.export_text()
    assert "PASS" in text
    assert "40 scalars" in text
    assert "Conv1d, Conv2d, GroupNorm, Linear" in text
    assert "volumetric.enc0.conv.weight" in text


def test_print_failed_gradient_report(gradient_report):
    """Test a failing gradient check is marked FAIL."""
    failed = gradient_report.model_copy(update={"passed": False, "max_relative_error": 0.5})
    console = Console(record=True, width=160)
    print_gradient_report(failed, console)

    assert "FAIL" in console.export_text()
