"""
Test the CLI functionality.
"""

import json
from pathlib import Path

import pytest
import yaml
from click.testing import CliRunner

from conftest import threshold_model
from covid_ctseg.cli import main
from covid_ctseg.unet import save_weights
from covid_ctseg.volume_io import load_bundle

TINY_NET = ['--size', '16', '--depth', '1', '--base-filters', '2', '--max-epochs', '1']


def echo_values(path: Path) -> dict:
    lines = Path(str(path) + ".run.txt").read_text(encoding="utf-8").splitlines()
    return dict(line.split("=", 1) for line in lines)


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def phantom_dir(runner, tmp_path):
    out = tmp_path / "ph"
    result = runner.invoke(main, ['synth', '--slides', '16', '--seed', '7', '--out', str(out)])
    assert result.exit_code == 0, result.output
    return out


@pytest.fixture
def oracle_weights(tmp_path):
    path = tmp_path / "oracle.pt"
    save_weights(threshold_model(48), path)
    return path


class TestSynth:
    """Test the synth command."""

    def test_twice_identical(self, runner, tmp_path):
        """Test that identical flags give identical bundles."""
        for name in ("a", "b"):
            result = runner.invoke(main, ['synth', '--slides', '16', '--seed', '7', '--out', str(tmp_path / name)])
            assert result.exit_code == 0

        for file in (tmp_path / "a").iterdir():
            assert file.read_bytes() == (tmp_path / "b" / file.name).read_bytes()

    def test_echo_file(self, runner, tmp_path):
        """Test the run record next to the bundle."""
        runner.invoke(main, ['synth', '--slides', '4', '--seed', '3', '--out', str(tmp_path / "p")])

        values = echo_values(tmp_path / "p")

        assert values["command"] == "synth"
        assert values["seed"] == "3"
        assert values["slide_count"] == "4"
        assert "timestamp" in values

    def test_missing_out(self, runner):
        """Test that --out is required."""
        result = runner.invoke(main, ['synth', '--slides', '4'])

        assert result.exit_code == 2

    def test_infeasible_radius(self, runner, tmp_path):
        """Test a lesion too large for the lungs."""
        result = runner.invoke(main, ['synth', '--lesion-radius', '3', '40', '--out', str(tmp_path / "p")])

        assert result.exit_code == 1
        assert "Error:" in result.output
        assert "lesion radius" in result.output

    def test_bad_defect_flag(self, runner, tmp_path):
        """Test a malformed --inject-defect value."""
        result = runner.invoke(main, ['synth', '--inject-defect', 'nonsense', '--out', str(tmp_path / "p")])

        assert result.exit_code == 2

    def test_from_generated_config(self, runner, tmp_path):
        """Test synthesizing from a generated phantom config."""
        config = tmp_path / "phantom.yaml"
        result = runner.invoke(main, ['generate-config', str(config), '--kind', 'phantom'])
        assert result.exit_code == 0
        data = yaml.safe_load(config.read_text())
        data["slide_count"] = 3
        config.write_text(yaml.dump(data))

        result = runner.invoke(main, ['synth', '--config', str(config), '--out', str(tmp_path / "p")])

        assert result.exit_code == 0
        assert load_bundle(tmp_path / "p").slide_count == 3


class TestTrainCommands:
    """Test train and retrain."""

    def test_train_writes_weights_history_and_echo(self, runner, tmp_path, phantom_dir):
        """Test a one-epoch training run."""
        weights = tmp_path / "w.pt"

        result = runner.invoke(main, ['train', '--data', str(phantom_dir), '--weights-out', str(weights)] + TINY_NET)

        assert result.exit_code == 0, result.output
        assert weights.is_file()
        history = Path(str(weights) + ".history.csv").read_text().splitlines()
        assert history[0] == "epoch,train_loss,val_loss,val_f1"
        assert len(history) >= 2
        values = echo_values(weights)
        assert values["learning_rate"] == "0.0001"
        assert values["batch_size"] == "45"
        assert values["n_train"] == "8"
        assert values["n_val"] == "4"

    def test_train_from_split_file(self, runner, tmp_path, phantom_dir):
        """Test training on a saved split."""
        split = tmp_path / "split.csv"
        result = runner.invoke(main, ['split', '--data', str(phantom_dir), '--size', '16', '--n-train', '6',
                                      '--n-val', '2', '--out', str(split)])
        assert result.exit_code == 0, result.output
        assert "train: 6 slides (3 COVID / 3 non-COVID)" in result.output

        result = runner.invoke(main, ['train', '--data', str(phantom_dir), '--split', str(split),
                                      '--weights-out', str(tmp_path / "w.pt")] + TINY_NET)

        assert result.exit_code == 0, result.output
        assert echo_values(tmp_path / "w.pt")["n_train"] == "6"

    def test_retrain_budget(self, runner, tmp_path, phantom_dir):
        """Test retraining from saved weights."""
        first = tmp_path / "w1.pt"
        runner.invoke(main, ['train', '--data', str(phantom_dir), '--weights-out', str(first)] + TINY_NET)

        result = runner.invoke(main, ['retrain', '--data', str(phantom_dir), '--weights', str(first),
                                      '--max-epochs', '2', '--weights-out', str(tmp_path / "w2.pt")])

        assert result.exit_code == 0, result.output
        history = Path(str(tmp_path / "w2.pt") + ".history.csv").read_text().splitlines()
        assert 2 <= len(history) <= 3
        assert echo_values(tmp_path / "w2.pt")["max_epochs"] == "2"

    def test_retrain_requires_weights(self, runner, tmp_path, phantom_dir):
        """Test that --weights is mandatory."""
        result = runner.invoke(main, ['retrain', '--data', str(phantom_dir), '--weights-out', str(tmp_path / "w.pt")])

        assert result.exit_code == 2

    def test_infeasible_split(self, runner, tmp_path, phantom_dir):
        """Test more training slides than the bundle holds."""
        result = runner.invoke(main, ['train', '--data', str(phantom_dir), '--n-train', '440', '--n-val', '60',
                                      '--weights-out', str(tmp_path / "w.pt")] + TINY_NET)

        assert result.exit_code == 1
        assert "Error:" in result.output


    def test_negative_seed_is_usage_error(self, runner, tmp_path, phantom_dir):
        """Test that a negative split seed is rejected by option parsing."""
        result = runner.invoke(main, ['split', '--data', str(phantom_dir), '--size', '16', '--seed', '-1',
                                      '--out', str(tmp_path / "split.csv")])

        assert result.exit_code == 2
        assert "Traceback" not in result.output
        assert not (tmp_path / "split.csv").exists()

class TestEvaluate:
    """Test the evaluate command."""

    def test_oracle_report(self, runner, tmp_path, quiet_bundle_dir, oracle_weights):
        """Test an all-1.0 report from the threshold network."""
        report = tmp_path / "r.csv"

        result = runner.invoke(main, ['evaluate', '--weights', str(oracle_weights),
                                      '--data', str(quiet_bundle_dir), '--report', str(report)])

        assert result.exit_code == 0, result.output
        lines = report.read_text().splitlines()
        assert lines[-2] == "MACRO,,,,,,1.000000,1.000000,1.000000,1.000000"
        assert lines[-1].endswith(",1.000000,1.000000,1.000000,1.000000")
        assert echo_values(report)["f1_formula"] == "standard"

    def test_halved_f1_formula(self, runner, tmp_path, quiet_bundle_dir, oracle_weights):
        """Test that the alternative formula halves F1 when pre = rec."""
        report = tmp_path / "r.csv"

        result = runner.invoke(main, ['evaluate', '--weights', str(oracle_weights), '--data', str(quiet_bundle_dir),
                                      '--f1-formula', 'paper', '--report', str(report)])

        assert result.exit_code == 0, result.output
        assert report.read_text().splitlines()[-2].endswith(",1.000000,1.000000,1.000000,0.500000")

    def test_bad_weights_path(self, runner, tmp_path, quiet_bundle_dir):
        """Test a missing weight file."""
        result = runner.invoke(main, ['evaluate', '--weights', str(tmp_path / "nope.pt"),
                                      '--data', str(quiet_bundle_dir), '--report', str(tmp_path / "r.csv")])

        assert result.exit_code == 1
        assert "Error:" in result.output


class TestExport3d:
    """Test the export3d command."""

    def test_ct_rows_match_lung_pixels(self, runner, tmp_path):
        """Test a one-slide phantom export."""
        runner.invoke(main, ['synth', '--slides', '1', '--out', str(tmp_path / "p1")])
        out = tmp_path / "ct.csv"

        result = runner.invoke(main, ['export3d', '--data', str(tmp_path / "p1"), '--kind', 'ct', '--out', str(out)])

        assert result.exit_code == 0, result.output
        lines = out.read_text().splitlines()
        assert lines[0] == "x,y,z,value"
        assert len(lines) - 1 == int(load_bundle(tmp_path / "p1").lung_masks.sum())

    def test_prediction_with_oracle(self, runner, tmp_path, quiet_bundle_dir, oracle_weights, quiet_phantom):
        """Test predicted lesion points from the threshold network."""
        out = tmp_path / "pred.csv"

        result = runner.invoke(main, ['export3d', '--data', str(quiet_bundle_dir), '--kind', 'prediction',
                                      '--weights', str(oracle_weights), '--out', str(out)])

        assert result.exit_code == 0, result.output
        assert len(out.read_text().splitlines()) - 1 == int(quiet_phantom.covid_masks.sum())

    def test_prediction_requires_weights(self, runner, tmp_path, quiet_bundle_dir):
        """Test the usage contract of prediction kind."""
        result = runner.invoke(main, ['export3d', '--data', str(quiet_bundle_dir), '--kind', 'prediction',
                                      '--out', str(tmp_path / "p.csv")])

        assert result.exit_code == 2

    def test_zero_z_step(self, runner, tmp_path, quiet_bundle_dir):
        """Test z_step = 0."""
        result = runner.invoke(main, ['export3d', '--data', str(quiet_bundle_dir), '--z-step', '0',
                                      '--out', str(tmp_path / "p.csv")])

        assert result.exit_code == 1
        assert "z_step" in result.output


class TestQa:
    """Test the qa command exit codes."""

    def test_clean_phantom(self, runner, phantom_dir):
        """Test exit 0 and an empty listing."""
        result = runner.invoke(main, ['qa', '--data', str(phantom_dir)])

        assert result.exit_code == 0
        assert "Total issues: 0" in result.output

    def test_injected_defect(self, runner, tmp_path):
        """Test exit 2 and one issue line."""
        out = tmp_path / "bad"
        runner.invoke(main, ['synth', '--slides', '16', '--inject-defect', 'covid_outside_lung:5:3', '--out', str(out)])

        result = runner.invoke(main, ['qa', '--data', str(out)])

        assert result.exit_code == 2
        issue_lines = [l for l in result.output.splitlines() if "covid_outside_lung" in l]
        assert issue_lines == ["  covid_outside_lung phantom:5 pixels=3"]

    def test_json_listing_file(self, runner, tmp_path):
        """Test the machine-readable listing and its echo."""
        bundle = tmp_path / "bad"
        runner.invoke(main, ['synth', '--slides', '4', '--inject-defect', 'covid_without_lung_slide:1:2',
                             '--out', str(bundle)])
        listing = tmp_path / "qa.json"

        result = runner.invoke(main, ['qa', '--data', str(bundle), '--format', 'json', '--out', str(listing)])

        assert result.exit_code == 2
        stats = json.loads(listing.read_text())
        assert stats["by_kind"] == {"covid_without_lung_slide": 1}
        assert echo_values(listing)["command"] == "qa"

    def test_echo_beside_bundle_without_out(self, runner, tmp_path, phantom_dir):
        """Test that a listing on stdout still leaves a run record."""
        result = runner.invoke(main, ['qa', '--data', str(phantom_dir)])

        assert result.exit_code == 0
        values = echo_values(tmp_path / "ph.qa")
        assert values["command"] == "qa"
        assert values["out"] == ""

    def test_corrupt_bundle(self, runner, phantom_dir):
        """Test exit 1 on a truncated channel file."""
        ct = phantom_dir / "ct.raw"
        ct.write_bytes(ct.read_bytes()[:-2])

        result = runner.invoke(main, ['qa', '--data', str(phantom_dir)])

        assert result.exit_code == 1


class TestStatsAndConfig:
    """Test stats and generate-config."""

    def test_stats_json(self, runner, phantom_dir):
        """Test dataset counts."""
        result = runner.invoke(main, ['stats', '--data', str(phantom_dir), '--format', 'json'])

        assert result.exit_code == 0
        stats = json.loads(result.output)
        assert stats == {"volumes": 1, "slides": 16, "slides_with_lung": 16, "slides_with_covid": 8}

    def test_stats_echo(self, runner, tmp_path, phantom_dir):
        """Test the run record written beside the first bundle."""
        result = runner.invoke(main, ['stats', '--data', str(phantom_dir)])

        assert result.exit_code == 0
        values = echo_values(tmp_path / "ph.stats")
        assert values["command"] == "stats"
        assert values["format"] == "table"

    def test_generate_hyperparams(self, runner, tmp_path):
        """Test the default hyperparameter file."""
        config = tmp_path / "hp.json"

        result = runner.invoke(main, ['generate-config', str(config)])

        assert result.exit_code == 0
        data = json.loads(config.read_text())
        assert data["learning_rate"] == 0.0001
        assert data["batch_size"] == 45
        assert data["optimizer"] == "adam"


class TestTransfer:
    """Test the transfer command on tiny phantoms."""

    def test_summary_table(self, runner, tmp_path):
        """Test one epoch per stage and the three-row summary."""
        report = tmp_path / "transfer.csv"

        result = runner.invoke(main, ['transfer', '--slides', '8', '--size', '16', '--depth', '1',
                                      '--base-filters', '2', '--max-epochs', '1', '--retrain-epochs', '1',
                                      '--batch-size', '4', '--report', str(report)])

        assert result.exit_code == 0, result.output
        lines = report.read_text().splitlines()
        assert lines[0] == "stage,slides,acc,pre,rec,f1,reference_f1"
        assert [line.split(",")[0] for line in lines[1:]] == ["source", "zero_shot", "retrained"]
        assert "F1 change from retraining" in result.output
