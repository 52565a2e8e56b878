"""
Test the transfer protocol and the end-to-end training scenarios.
"""

import pytest

from covid_ctseg.config import Hyperparams, UNetConfig
from covid_ctseg.evaluation import ConfusionCounts, Metrics, MetricsReport, evaluate
from covid_ctseg.experiment import (
    REFERENCE_METRICS,
    SplitSizes,
    TransferResult,
    phantom_samples,
    run_transfer,
    shift_domain,
    source_phantom,
)
from covid_ctseg.phantom import synth_volume
from covid_ctseg.preprocess import DatasetSplit, make_split
from covid_ctseg.training import TrainHistory, train
from covid_ctseg.unet import build_unet


def _report(f1: float) -> MetricsReport:
    m = Metrics(accuracy=0.99, precision=f1, recall=f1, f1=f1)
    return MetricsReport(per_slide=[], macro=m, micro=m, micro_counts=ConfusionCounts(0, 0, 0, 0))


class TestDomainShift:
    """Test the source and target phantom definitions."""

    def test_source_radii(self):
        """Test the default source phantom."""
        spec = source_phantom(slide_count=8, seed=5)

        assert spec.slide_count == 8
        assert spec.seed == 5
        assert spec.lesion_radius_range == (2.0, 4.0)

    def test_overrides(self):
        """Test that keyword overrides reach the spec."""
        assert source_phantom(height=96, width=96).height == 96

    def test_shift(self):
        """Test brighter, larger lesions and a new seed."""
        base = source_phantom(seed=2)

        shifted = shift_domain(base)

        assert shifted.lesion_hu_mean == base.lesion_hu_mean + 150.0
        assert shifted.lesion_radius_range == (3.0, 6.0)
        assert shifted.seed == 3
        assert shift_domain(base, seed=9).seed == 9

    def test_shifted_phantom_is_feasible(self):
        """Test that the default target domain synthesizes."""
        volume = synth_volume(shift_domain(source_phantom(slide_count=8)))

        assert volume.slide_count == 8
        assert int(volume.covid_masks.sum()) > 0


class TestTransferResult:
    """Test the stage summary."""

    def test_summary_frame(self):
        """Test one row per stage with the reference F1 beside it."""
        result = TransferResult(
            model=build_unet(UNetConfig(depth=1, base_filters=1, input_size=16)),
            source_report=_report(0.8),
            zero_shot_report=_report(0.5),
            retrained_report=_report(0.7),
            train_history=TrainHistory(),
            retrain_history=TrainHistory(),
        )

        frame = result.summary_frame()

        assert list(frame["stage"]) == ["source", "zero_shot", "retrained"]
        assert list(frame["f1"]) == [0.8, 0.5, 0.7]
        assert frame["reference_f1"].iloc[1] == REFERENCE_METRICS["zero_shot"].f1
        assert result.improvement == pytest.approx(0.2)


@pytest.mark.slow
class TestScenarios:
    """Full training runs; deselected by default, run in CI with ``-m slow``."""

    def test_overfits_small_training_set(self):
        """Test that 16 slides (8 COVID / 8 clean) can be fit to a high training F1."""
        samples = phantom_samples(source_phantom(slide_count=32, seed=1), size=64, volume_id="fit")
        split = make_split(samples, 16, 0, seed=1)
        monitored = DatasetSplit(train=split.train, validation=split.train, test=[], seed=1)
        hp = Hyperparams(learning_rate=1e-4, batch_size=8, max_epochs=200, early_stop_patience=200, seed=1)

        model, history = train(build_unet(UNetConfig(depth=4, base_filters=8, input_size=64), seed=1), monitored, hp)

        assert sum(s.has_covid for s in split.train) == 8
        assert history.records[-1].train_loss < history.records[0].train_loss
        assert evaluate(model, split.train).macro.f1 >= 0.90

    def test_retraining_improves_target(self):
        """Test that 10 retraining epochs on 8 shifted-domain slides raise the target F1."""
        base = source_phantom(slide_count=32, seed=4)
        source = phantom_samples(base, size=64, volume_id="domain_a")
        target = phantom_samples(shift_domain(base), size=64, volume_id="domain_b")
        train_hp = Hyperparams(learning_rate=1e-3, batch_size=8, max_epochs=10, seed=4)
        retrain_hp = train_hp.model_copy(update={"batch_size": 2})

        result = run_transfer(
            source, target, UNetConfig(depth=4, base_filters=8, input_size=64),
            train_hp=train_hp, retrain_hp=retrain_hp,
            source_sizes=SplitSizes(16, 8), target_sizes=SplitSizes(8, 4), seed=4,
        )

        assert result.retrain_history.stopped_epoch == 10
        assert result.improvement >= 0.05
