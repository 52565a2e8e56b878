"""
Test configuration models and the run record.
"""

from datetime import datetime, timezone

import pytest
from pydantic import ValidationError

from covid_ctseg.config import Hyperparams, OptimizerKind, RunConfig, UNetConfig
from covid_ctseg.errors import IoError


class TestHyperparams:
    """Test optimization settings."""

    def test_defaults(self):
        """Test the published training defaults."""
        hp = Hyperparams()

        assert hp.learning_rate == 1e-4
        assert hp.batch_size == 45
        assert hp.max_epochs == 200
        assert hp.early_stop_patience == 10
        assert hp.optimizer == OptimizerKind.ADAM
        assert hp.max_pos_weight == 10.0

    @pytest.mark.parametrize("field,value", [
        ("learning_rate", 0.0),
        ("batch_size", 0),
        ("max_epochs", 0),
        ("early_stop_patience", 0),
        ("seed", -1),
        ("optimizer", "rmsprop"),
        ("max_pos_weight", 0.5),
    ])
    def test_rejects_invalid(self, field, value):
        """Test out-of-range settings."""
        with pytest.raises(ValidationError):
            Hyperparams(**{field: value})


class TestUNetConfig:
    """Test network topology settings."""

    def test_filters(self):
        """Test the per-level filter rule."""
        config = UNetConfig(base_filters=32, depth=4)

        assert [config.filters(level) for level in range(5)] == [32, 64, 128, 256, 512]

    def test_fixed_fields(self):
        """Test that kernel size and channel counts are pinned."""
        with pytest.raises(ValidationError):
            UNetConfig(kernel_size=5)
        with pytest.raises(ValidationError):
            UNetConfig(input_channels=3)


class TestRunConfig:
    """Test the key=value run record."""

    def test_echo_lines(self):
        """Test sorted parameters between command and timestamp."""
        run = RunConfig(command="train", seed=4, parameters={"zeta": 1, "alpha": [1, 2], "mode": OptimizerKind.SGD})
        stamp = datetime(2024, 1, 2, tzinfo=timezone.utc)

        lines = run.echo_lines(stamp)

        assert lines == [
            "command=train",
            "seed=4",
            "alpha=1,2",
            "mode=sgd",
            "zeta=1",
            "timestamp=2024-01-02T00:00:00+00:00",
        ]

    def test_write_echo_path(self, tmp_path):
        """Test the record lands beside the primary output."""
        path = RunConfig(command="qa").write_echo(tmp_path / "report.csv")

        assert path == tmp_path / "report.csv.run.txt"
        assert path.read_text().startswith("command=qa\n")

    def test_unwritable(self, tmp_path):
        """Test a record in a missing directory."""
        with pytest.raises(IoError):
            RunConfig(command="qa").write_echo(tmp_path / "missing" / "out.csv")
