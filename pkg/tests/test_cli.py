"""Tests for the command-line interface."""

import json
import logging
from unittest.mock import patch

import numpy as np
import pytest
from click.testing import CliRunner
from pydantic import ValidationError

from til.cli import exit_code, main, prepare_output
from til.config import LabConfig, MatcherSpec, TemplateSourceSpec
from til.evaluation import attack_matrix, load_report
from til.exceptions import (
    ConfigurationError,
    DependencyError,
    GenerationError,
    IngestionError,
    NumericError,
    ParseError,
    ProtocolError,
)
from til.matchers import MatchScore, Matcher


class PixelMatcher(Matcher):
    """Raw-pixel similarity for CLI report fixtures."""

    def features(self, img):
        return np.asarray(img, dtype=np.float64)

    def compare(self, probe, gallery):
        return MatchScore(float(np.clip(1.0 - np.mean(np.abs(probe - gallery)) / 2.0, 0.0, 1.0)))


@pytest.fixture
def runner():
    return CliRunner()


@pytest.mark.parametrize(
    "error,code",
    [
        (DependencyError("missing", dependency="map-estimator"), 3),
        (ParseError("bad header", line_number=1), 2),
        (ConfigurationError("bad"), 2),
        (ProtocolError("overlap"), 2),
        (IngestionError("gaps", pair_ids=["a|b"]), 2),
        (NumericError("nan"), 4),
        (GenerationError("stuck"), 4),
        (RuntimeError("boom"), 4),
    ],
)
def test_exit_codes(error, code):
    """Test the mapping from errors to process exit codes."""
    assert exit_code(error) == code


def test_validation_error_exit_code():
    """Test that pydantic validation errors are configuration failures."""
    with pytest.raises(ValidationError) as info:
        TemplateSourceSpec(name="mnt", kind="classical")
    assert exit_code(info.value) == 2


def test_prepare_output_refuses_non_empty(tmp_path):
    """Test that a non-empty output needs --force."""
    (tmp_path / "stale.txt").write_text("x")
    with pytest.raises(ConfigurationError, match="--force"):
        prepare_output(tmp_path, force=False)
    prepare_output(tmp_path, force=True)
    assert list(tmp_path.iterdir()) == []


def test_version(runner):
    """Test the version flag."""
    result = runner.invoke(main, ["--version"])
    assert result.exit_code == 0
    assert "0.1.0" in result.output


def test_trace(runner):
    """Test printing a network trace."""
    result = runner.invoke(main, ["trace", "minutiae"])
    assert result.exit_code == 0
    lines = result.output.strip().splitlines()
    assert lines[0].split() == ["Input", "512", "x", "512", "x", "6"]
    assert "Non-Local Block (192 × 192)" in result.output
    assert lines[-1].split()[-5:] == ["512", "x", "512", "x", "1"]


def test_trace_reduced_deep(runner):
    """Test the reduced profile option."""
    result = runner.invoke(main, ["trace", "deep", "--profile", "reduced"])
    assert result.exit_code == 0
    assert result.output.strip().splitlines()[0].split() == ["Input", "192"]


def test_unknown_command_is_usage_error(runner):
    """Test that click usage errors exit with code 2."""
    result = runner.invoke(main, ["trace", "pixels"])
    assert result.exit_code == 2


def test_init_config(runner, tmp_path):
    """Test generating a sample configuration file."""
    output = tmp_path / "lab.yaml"
    result = runner.invoke(main, ["init-config", "--output", str(output)])
    assert result.exit_code == 0
    config = LabConfig.from_yaml(output)
    assert [s.kind for s in config.evaluate.sources] == ["classical", "estimator", "deep"]
    assert [m.name for m in config.evaluate.matchers] == ["minutiae", "embedder-a", "embedder-b"]


def test_train_missing_upstream_stage(runner, tmp_path, caplog):
    """Test that a stage without its upstream checkpoints exits 3 naming them."""
    with caplog.at_level(logging.ERROR, logger="til.cli"):
        result = runner.invoke(
            main,
            [
                "train",
                "invert-minutiae",
                "--set",
                f"checkpoint_dir={tmp_path / 'ckpt'}",
                "--dataset",
                str(tmp_path / "data"),
            ],
        )
    assert result.exit_code == 3
    assert "map-estimator" in caplog.text


def test_bad_override_exits_2(runner, tmp_path):
    """Test that an unknown override key is a configuration failure."""
    result = runner.invoke(main, ["synth", "--set", "synth.nope=1", "--out", str(tmp_path)])
    assert result.exit_code == 2


def test_missing_dataset_exits_3(runner, tmp_path):
    """Test that training without a dataset is a missing dependency."""
    result = runner.invoke(
        main,
        [
            "train",
            "map-estimator",
            "--set",
            f"checkpoint_dir={tmp_path / 'ckpt'}",
            "--dataset",
            str(tmp_path / "absent"),
        ],
    )
    assert result.exit_code == 3


class TestSynthCommand:
    """Tests for the synth command."""

    ARGS = [
        "synth",
        "--fingers",
        "2",
        "--impressions",
        "2",
        "--seed",
        "3",
        "--set",
        "synth.profile.resolution=64",
        "--set",
        "synth.workers=1",
    ]

    def test_writes_dataset_and_manifest(self, runner, tmp_path):
        """Test that synth writes a dataset with a run manifest."""
        out = tmp_path / "data"
        result = runner.invoke(main, self.ARGS + ["--out", str(out)])
        assert result.exit_code == 0, result.output
        manifest = json.loads((out / "run_manifest.json").read_text())
        assert manifest["command"] == "synth"
        assert manifest["seeds"] == {"synth": 3}
        assert manifest["config"]["synth"]["n_fingers"] == 2

    def test_refuses_existing_output(self, runner, tmp_path):
        """Test --force handling on a second run."""
        out = tmp_path / "data"
        assert runner.invoke(main, self.ARGS + ["--out", str(out)]).exit_code == 0
        assert runner.invoke(main, self.ARGS + ["--out", str(out)]).exit_code == 2
        assert runner.invoke(main, self.ARGS + ["--out", str(out), "--force"]).exit_code == 0

    def test_invalid_counts(self, runner, tmp_path):
        """Test that fewer than two impressions is rejected."""
        result = runner.invoke(
            main, ["synth", "--impressions", "1", "--out", str(tmp_path / "data")]
        )
        assert result.exit_code == 2


class TestReportCommand:
    """Tests for re-thresholding a stored report."""

    @pytest.fixture
    def report_dir(self, tiny_dataset, tmp_path):
        sources = [TemplateSourceSpec(name="gt-a", kind="ground_truth")]
        matchers = [MatcherSpec(name="pix-a", kind="minutiae")]
        with patch(
            "til.evaluation.create_matcher",
            side_effect=lambda spec, device="cpu": PixelMatcher(spec),
        ):
            report = attack_matrix(sources, matchers, tiny_dataset, far=0.5, workers=1)
        report.write(tmp_path / "report")
        return tmp_path / "report"

    def test_rethreshold(self, runner, report_dir):
        """Test that the report is re-rendered at the new FAR."""
        result = runner.invoke(main, ["report", str(report_dir), "--far", "0.1"])
        assert result.exit_code == 0, result.output
        assert load_report(report_dir, 0.1).to_markdown() in result.output
        out = report_dir / "far_0.1"
        assert (out / "run_manifest.json").exists()
        assert load_report(out).to_markdown() == load_report(report_dir, 0.1).to_markdown()

    def test_far_out_of_range(self, runner, report_dir):
        """Test that FAR must lie strictly between 0 and 1."""
        result = runner.invoke(main, ["report", str(report_dir), "--far", "1.5"])
        assert result.exit_code == 2
