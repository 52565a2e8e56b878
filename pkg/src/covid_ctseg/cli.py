"""
Command line interface for the segmentation pipeline.
"""

import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import click
import yaml
from pydantic import ValidationError

from .config import (
    CloudKind,
    DefectSpec,
    F1Formula,
    Hyperparams,
    OptimizerKind,
    PhantomSpec,
    QaIssueKind,
    Roi,
    RunConfig,
    UNetConfig,
)
from .errors import CovidSegError, InvalidArgument
from .evaluation import (
    predict_masks,
    evaluate as evaluate_samples,
    qa_annotations,
    summarize_issues,
    worst_slides,
    write_report,
)
from .experiment import SplitSizes, phantom_samples, run_transfer, shift_domain, source_phantom
from .phantom import synth_volume
from .preprocess import (
    DatasetSplit,
    SlideSample,
    make_split,
    read_split,
    samples_from_volume,
    summarize_dataset,
    write_split,
)
from .reconstruct3d import volume_to_points, write_csv
from .training import retrain as retrain_model
from .training import train as train_model
from .training import write_history
from .unet import build_unet, load_weights, save_weights
from .volume_io import CtVolume, load_bundle, write_bundle

# published split sizes; used when they fit the data
DEFAULT_N_TRAIN = 440
DEFAULT_N_VAL = 60


@click.group()
@click.version_option(package_name='covid-ct-segmentation')
@click.option('--verbose', '-v', count=True, help='Increase log detail (-v info, -vv debug)')
def main(verbose):
    """COVID-19 CT lesion segmentation pipeline."""
    level = logging.WARNING if verbose == 0 else logging.INFO if verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(asctime)s %(name)s %(levelname)s %(message)s")


def _fail(error: Exception) -> None:
    click.echo(f"Error: {error}", err=True)
    sys.exit(1)


def load_config(config_file: str) -> Dict[str, Any]:
    """Load configuration from file."""
    config_path = Path(config_file)

    try:
        if config_path.suffix.lower() in ['.yml', '.yaml']:
            with open(config_path, 'r', encoding='utf-8') as f:
                return yaml.safe_load(f) or {}
        else:
            with open(config_path, 'r', encoding='utf-8') as f:
                return json.load(f)
    except Exception as e:
        click.echo(f"Error loading config file: {e}", err=True)
        sys.exit(1)


def _parse_defect(text: str) -> DefectSpec:
    try:
        kind, slide, count = text.split(":")
        return DefectSpec(kind=QaIssueKind(kind), slide_index=int(slide), pixel_count=int(count))
    except (ValueError, ValidationError) as e:
        raise click.BadParameter(f"expected KIND:SLIDE:COUNT, got {text!r} ({e})")


def _load_volumes(paths: Sequence[str]) -> List[CtVolume]:
    return [load_bundle(path) for path in paths]


def _load_samples(paths: Sequence[str], size: int) -> List[SlideSample]:
    samples: List[SlideSample] = []
    for volume in _load_volumes(paths):
        samples.extend(samples_from_volume(volume, size=size))
    return samples


def _split_sizes(samples: Sequence[SlideSample], n_train: Optional[int], n_val: Optional[int]) -> Tuple[int, int]:
    """Requested sizes, or 440/60 capped at a half/quarter/quarter share of the balanced slides."""
    pairs = min(sum(s.has_covid for s in samples), sum(not s.has_covid for s in samples))
    val_pairs = pairs // 4
    if n_val is None:
        n_val = min(DEFAULT_N_VAL, 2 * val_pairs)
    if n_train is None:
        n_train = min(DEFAULT_N_TRAIN, 2 * (pairs - 2 * val_pairs))
    return n_train, n_val


def _resolve_split(
    samples: Sequence[SlideSample],
    split_file: Optional[str],
    n_train: Optional[int],
    n_val: Optional[int],
    seed: int,
) -> DatasetSplit:
    if split_file:
        return read_split(split_file, samples, seed=seed)
    n_train, n_val = _split_sizes(samples, n_train, n_val)
    return make_split(samples, n_train, n_val, seed)


def _hyperparams(config: Optional[str], **flags: Any) -> Hyperparams:
    if config:
        return Hyperparams(**load_config(config))
    return Hyperparams(**flags)


@main.command()
@click.option('--out', '-o', 'out', type=click.Path(), required=True, help='Bundle directory to create')
@click.option('--config', '-c', type=click.Path(exists=True), help='Phantom configuration file')
@click.option('--slides', type=int, default=16, help='Number of slides')
@click.option('--height', type=int, default=64, help='Slide height in pixels')
@click.option('--width', type=int, default=64, help='Slide width in pixels')
@click.option('--lung-hu-mean', type=float, default=-850.0)
@click.option('--lung-hu-std', type=float, default=25.0)
@click.option('--lesion-hu-mean', type=float, default=-500.0)
@click.option('--lesion-hu-std', type=float, default=40.0)
@click.option('--lesion-count', type=(int, int), default=(1, 3), help='Lesions per positive slide (MIN MAX)')
@click.option('--lesion-radius', type=(float, float), default=(3.0, 6.0), help='Lesion radius in pixels (MIN MAX)')
@click.option('--covid-fraction', type=float, default=0.5, help='Share of COVID-positive slides')
@click.option('--seed', type=click.IntRange(min=0), default=0, help='Generator seed')
@click.option('--volume-id', default='phantom', help='Identifier stored in the manifest')
@click.option('--inject-defect', multiple=True, help='Plant a defect, KIND:SLIDE:COUNT')
def synth(out, config, slides, height, width, lung_hu_mean, lung_hu_std, lesion_hu_mean,
          lesion_hu_std, lesion_count, lesion_radius, covid_fraction, seed, volume_id, inject_defect):
    """Synthesize a phantom CT bundle."""
    defects = [_parse_defect(text) for text in inject_defect]
    try:
        if config:
            spec = PhantomSpec(**load_config(config))
            if defects:
                spec = spec.model_copy(update={"defects": list(spec.defects) + defects})
        else:
            spec = PhantomSpec(
                slide_count=slides,
                height=height,
                width=width,
                lung_hu_mean=lung_hu_mean,
                lung_hu_std=lung_hu_std,
                lesion_hu_mean=lesion_hu_mean,
                lesion_hu_std=lesion_hu_std,
                lesion_count_range=lesion_count,
                lesion_radius_range=lesion_radius,
                covid_slide_fraction=covid_fraction,
                seed=seed,
                defects=defects,
            )
        write_bundle(synth_volume(spec, volume_id=volume_id), out)
        RunConfig(command="synth", seed=spec.seed, parameters={"volume_id": volume_id, **spec.model_dump()}).write_echo(Path(out))
    except (CovidSegError, ValidationError) as e:
        _fail(e)

    click.echo(f"Wrote phantom bundle to {out}")


@main.command()
@click.option('--data', '-d', multiple=True, required=True, type=click.Path(), help='Bundle directory (repeatable)')
@click.option('--out', '-o', 'out', type=click.Path(), required=True, help='Split file to write')
@click.option('--size', type=int, default=320, help='Sample side in pixels')
@click.option('--n-train', type=int, default=None, help='Training slides (default 440 or what fits)')
@click.option('--n-val', type=int, default=None, help='Validation slides (default 60 or what fits)')
@click.option('--seed', type=click.IntRange(min=0), default=0, help='Split seed')
def split(data, out, size, n_train, n_val, seed):
    """Build a balanced train/validation/test split and write it to a file."""
    try:
        samples = _load_samples(data, size)
        n_train, n_val = _split_sizes(samples, n_train, n_val)
        result = make_split(samples, n_train, n_val, seed)
        write_split(result, out)
        RunConfig(command="split", seed=seed, parameters={
            "data": list(data), "size": size, "n_train": n_train, "n_val": n_val,
        }).write_echo(Path(out))
    except (CovidSegError, ValidationError) as e:
        _fail(e)

    for name, items in result.partitions().items():
        positives = sum(s.has_covid for s in items)
        click.echo(f"{name}: {len(items)} slides ({positives} COVID / {len(items) - positives} non-COVID)")


def _training_options(func):
    options = [
        click.option('--data', '-d', multiple=True, required=True, type=click.Path(), help='Bundle directory (repeatable)'),
        click.option('--split', 'split_file', type=click.Path(), default=None, help='Existing split file'),
        click.option('--n-train', type=int, default=None, help='Training slides (default 440 or what fits)'),
        click.option('--n-val', type=int, default=None, help='Validation slides (default 60 or what fits)'),
        click.option('--seed', type=click.IntRange(min=0), default=0, help='Seed for split, shuffling and initialization'),
        click.option('--config', '-c', type=click.Path(exists=True), help='Hyperparameter file'),
        click.option('--lr', type=float, default=1e-4, help='Learning rate'),
        click.option('--batch-size', type=int, default=45, help='Minibatch size'),
        click.option('--patience', type=int, default=10, help='Early stopping patience'),
        click.option('--shuffle/--no-shuffle', default=True, help='Shuffle minibatches'),
        click.option('--optimizer', type=click.Choice([o.value for o in OptimizerKind]), default='adam'),
        click.option('--weights-out', type=click.Path(), required=True, help='Weight file to write'),
        click.option('--history-out', type=click.Path(), default=None, help='History file (default <weights-out>.history.csv)'),
    ]
    for option in reversed(options):
        func = option(func)
    return func


def _finish_training(command, model, history, hp, weights_out, history_out, parameters):
    save_weights(model, weights_out)
    history_path = history_out or f"{weights_out}.history.csv"
    write_history(history, history_path)
    RunConfig(command=command, seed=hp.seed, parameters={
        **parameters, **hp.model_dump(), "history_out": history_path,
    }).write_echo(Path(weights_out))
    click.echo(
        f"Trained {history.stopped_epoch} epochs ({history.stop_reason.value}), "
        f"best epoch {history.best_epoch}; weights saved to {weights_out}"
    )


@main.command()
@_training_options
@click.option('--size', type=int, default=320, help='Input side in pixels')
@click.option('--depth', type=int, default=4, help='U-Net levels')
@click.option('--base-filters', type=int, default=32, help='Filters at level 0')
@click.option('--max-epochs', type=int, default=200, help='Epoch budget')
def train(data, split_file, n_train, n_val, seed, config, lr, batch_size, patience, shuffle,
          optimizer, weights_out, history_out, size, depth, base_filters, max_epochs):
    """Train a fresh U-Net."""
    try:
        hp = _hyperparams(
            config, learning_rate=lr, batch_size=batch_size, max_epochs=max_epochs,
            early_stop_patience=patience, shuffle=shuffle, seed=seed, optimizer=optimizer,
        )
        unet_config = UNetConfig(depth=depth, base_filters=base_filters, input_size=size)
        samples = _load_samples(data, size)
        dataset = _resolve_split(samples, split_file, n_train, n_val, seed)
        model, history = train_model(build_unet(unet_config, seed), dataset, hp)
        _finish_training("train", model, history, hp, weights_out, history_out, {
            "data": list(data), "split": split_file or "", "n_train": len(dataset.train),
            "n_val": len(dataset.validation), **unet_config.model_dump(),
        })
    except (CovidSegError, ValidationError) as e:
        _fail(e)


@main.command()
@_training_options
@click.option('--weights', '-w', type=click.Path(), required=True, help='Weights to continue from')
@click.option('--max-epochs', type=int, default=50, help='Epoch budget')
def retrain(data, split_file, n_train, n_val, seed, config, lr, batch_size, patience, shuffle,
            optimizer, weights_out, history_out, weights, max_epochs):
    """Continue training existing weights on new data."""
    try:
        hp = _hyperparams(
            config, learning_rate=lr, batch_size=batch_size, max_epochs=max_epochs,
            early_stop_patience=patience, shuffle=shuffle, seed=seed, optimizer=optimizer,
        )
        state = load_weights(weights)
        samples = _load_samples(data, state.config.input_size)
        dataset = _resolve_split(samples, split_file, n_train, n_val, seed)
        model, history = retrain_model(state, dataset, hp)
        _finish_training("retrain", model, history, hp, weights_out, history_out, {
            "data": list(data), "split": split_file or "", "weights": weights,
            "n_train": len(dataset.train), "n_val": len(dataset.validation),
            "epochs_consumed": model.training_epochs_consumed,
        })
    except (CovidSegError, ValidationError) as e:
        _fail(e)


@main.command()
@click.option('--weights', '-w', type=click.Path(), required=True, help='Weight file')
@click.option('--data', '-d', multiple=True, required=True, type=click.Path(), help='Bundle directory (repeatable)')
@click.option('--report', '-o', type=click.Path(), required=True, help='Report file to write')
@click.option('--split', 'split_file', type=click.Path(), default=None, help='Restrict to one partition of a split file')
@click.option('--partition', type=click.Choice(['train', 'validation', 'test']), default='test')
@click.option('--threshold', '-t', type=float, default=0.5, help='Probability threshold')
@click.option('--f1-formula', type=click.Choice([f.value for f in F1Formula]), default='standard')
@click.option('--roi', type=click.Choice([r.value for r in Roi]), default='slide', help='Pixels counted')
@click.option('--worst', type=int, default=0, help='List the N lowest-F1 slides')
def evaluate(weights, data, report, split_file, partition, threshold, f1_formula, roi, worst):
    """Score a model on bundle slides and write a metrics report."""
    try:
        model = load_weights(weights)
        samples = _load_samples(data, model.config.input_size)
        if split_file:
            samples = read_split(split_file, samples).partitions()[partition]
        result = evaluate_samples(model, samples, threshold, F1Formula(f1_formula), Roi(roi))
        write_report(result, report)
        RunConfig(command="evaluate", parameters={
            "weights": weights, "data": list(data), "split": split_file or "",
            "partition": partition if split_file else "", "threshold": threshold,
            "f1_formula": f1_formula, "roi": roi,
        }).write_echo(Path(report))
    except (CovidSegError, ValidationError) as e:
        _fail(e)

    click.echo("Metric   Macro     Micro")
    for label, name in (("acc", "accuracy"), ("pre", "precision"), ("rec", "recall"), ("f1", "f1")):
        click.echo(f"{label:<8} {getattr(result.macro, name):.6f}  {getattr(result.micro, name):.6f}")
    for slide in worst_slides(result, worst) if worst > 0 else []:
        click.echo(f"  {slide.volume_id}:{slide.slide_index} f1={slide.metrics.f1:.4f}")
    click.echo(f"Report saved to {report}")


@main.command()
@click.option('--data', '-d', type=click.Path(), required=True, help='Bundle directory')
@click.option('--kind', '-k', type=click.Choice([k.value for k in CloudKind]), default='ct')
@click.option('--weights', '-w', type=click.Path(), default=None, help='Weight file (prediction kind)')
@click.option('--z-step', type=float, default=1.0, help='z distance between slides')
@click.option('--threshold', '-t', type=float, default=0.5, help='Probability threshold')
@click.option('--out', '-o', 'out', type=click.Path(), required=True, help='CSV file to write')
def export3d(data, kind, weights, z_step, threshold, out):
    """Export a volume channel as an x,y,z,value point table."""
    if kind == CloudKind.PREDICTION.value and not weights:
        raise click.UsageError("--kind prediction requires --weights")
    try:
        if z_step <= 0:
            raise InvalidArgument(f"z_step must be positive, got {z_step}")
        volume = load_bundle(data)
        masks = None
        if kind == CloudKind.PREDICTION.value:
            masks = predict_masks(load_weights(weights), volume, threshold)
        cloud = volume_to_points(volume, CloudKind(kind), masks=masks, z_step=z_step)
        write_csv(cloud, out)
        RunConfig(command="export3d", parameters={
            "data": data, "kind": kind, "weights": weights or "", "z_step": z_step, "threshold": threshold,
        }).write_echo(Path(out))
    except (CovidSegError, ValidationError) as e:
        _fail(e)

    click.echo(f"Exported {len(cloud)} points to {out}")


def _emit(stats: Dict[str, Any], format: str) -> None:
    if format == 'json':
        click.echo(json.dumps(stats, indent=2))
    else:
        click.echo(yaml.dump(stats, default_flow_style=False, sort_keys=False))


def _echo_target(out: Optional[str], data: Sequence[str], command: str) -> Path:
    """Primary output for the run record; without --out it sits beside the first bundle."""
    if out:
        return Path(out)
    first = Path(data[0]).resolve()
    return first.with_name(f"{first.name}.{command}")


@main.command()
@click.option('--data', '-d', multiple=True, required=True, type=click.Path(), help='Bundle directory (repeatable)')
@click.option('--format', '-f', type=click.Choice(['json', 'yaml', 'table']), default='table', help='Output format')
@click.option('--out', '-o', 'out', type=click.Path(), default=None, help='Also write the JSON listing here')
def qa(data, format, out):
    """Scan annotations for COVID marks outside the lung."""
    try:
        issues = []
        for volume in _load_volumes(data):
            issues.extend(qa_annotations(volume))
        stats = summarize_issues(issues)
        if out:
            Path(out).write_text(json.dumps(stats, indent=2) + "\n", encoding="utf-8")
        RunConfig(command="qa", parameters={"data": list(data), "format": format, "out": out or ""}).write_echo(
            _echo_target(out, data, "qa")
        )
    except (CovidSegError, ValidationError, OSError) as e:
        _fail(e)

    if format == 'table':
        click.echo("Annotation QA Results")
        click.echo("=====================")
        click.echo(f"Total issues: {stats['total_issues']}")
        for issue in stats["issues"]:
            click.echo(
                f"  {issue['kind']} {issue['volume_id']}:{issue['slide_index']} "
                f"pixels={issue['offending_pixel_count']}"
            )
    else:
        _emit(stats, format)
    sys.exit(2 if issues else 0)


@main.command()
@click.option('--data', '-d', multiple=True, required=True, type=click.Path(), help='Bundle directory (repeatable)')
@click.option('--format', '-f', type=click.Choice(['json', 'yaml', 'table']), default='table', help='Output format')
def stats(data, format):
    """Summarize slide counts per dataset."""
    try:
        summary = summarize_dataset(_load_volumes(data))
        RunConfig(command="stats", parameters={"data": list(data), "format": format}).write_echo(
            _echo_target(None, data, "stats")
        )
    except (CovidSegError, ValidationError) as e:
        _fail(e)

    values = {
        "volumes": summary.volumes,
        "slides": summary.slides,
        "slides_with_lung": summary.lung_slides,
        "slides_with_covid": summary.covid_slides,
    }
    if format == 'table':
        click.echo("Dataset Summary")
        click.echo("===============")
        for key, value in values.items():
            click.echo(f"  {key}: {value}")
    else:
        _emit(values, format)


@main.command()
@click.option('--source', multiple=True, type=click.Path(), help='Source-domain bundles (default: phantom)')
@click.option('--target', multiple=True, type=click.Path(), help='Target-domain bundles (default: shifted phantom)')
@click.option('--phantom-config', type=click.Path(exists=True), help='Source phantom configuration')
@click.option('--slides', type=int, default=32, help='Slides per phantom domain')
@click.option('--size', type=int, default=320, help='Input side in pixels')
@click.option('--depth', type=int, default=4)
@click.option('--base-filters', type=int, default=8)
@click.option('--lr', type=float, default=1e-4)
@click.option('--batch-size', type=int, default=45)
@click.option('--patience', type=int, default=10)
@click.option('--max-epochs', type=int, default=200, help='Source training budget')
@click.option('--retrain-epochs', type=int, default=50, help='Target retraining budget')
@click.option('--source-train', type=int, default=None)
@click.option('--source-val', type=int, default=None)
@click.option('--target-train', type=int, default=None)
@click.option('--target-val', type=int, default=None)
@click.option('--seed', type=click.IntRange(min=0), default=0)
@click.option('--report', '-o', type=click.Path(), required=True, help='Summary table to write')
@click.option('--weights-out', type=click.Path(), default=None, help='Save the retrained weights')
def transfer(source, target, phantom_config, slides, size, depth, base_filters, lr, batch_size,
             patience, max_epochs, retrain_epochs, source_train, source_val, target_train,
             target_val, seed, report, weights_out):
    """Train on one domain, then measure zero-shot and retrained scores on another."""
    try:
        base = PhantomSpec(**load_config(phantom_config)) if phantom_config else source_phantom(slides, seed)
        if source:
            source_samples = _load_samples(source, size)
        else:
            source_samples = phantom_samples(base, size, "domain_a")
        if target:
            target_samples = _load_samples(target, size)
        else:
            target_samples = phantom_samples(shift_domain(base), size, "domain_b")

        train_hp = Hyperparams(learning_rate=lr, batch_size=batch_size, max_epochs=max_epochs,
                               early_stop_patience=patience, seed=seed)
        retrain_hp = train_hp.model_copy(update={"max_epochs": retrain_epochs})
        source_sizes = SplitSizes(*_split_sizes(source_samples, source_train, source_val))
        target_sizes = SplitSizes(*_split_sizes(target_samples, target_train, target_val))
        result = run_transfer(
            source_samples, target_samples,
            UNetConfig(depth=depth, base_filters=base_filters, input_size=size),
            train_hp, retrain_hp, source_sizes, target_sizes, seed=seed,
        )
        summary = result.summary_frame()
        summary.to_csv(report, index=False, float_format="%.6f", lineterminator="\n")
        if weights_out:
            save_weights(result.model, weights_out)
        RunConfig(command="transfer", seed=seed, parameters={
            "source": list(source) or "phantom", "target": list(target) or "shifted_phantom",
            "size": size, "depth": depth, "base_filters": base_filters,
            "source_sizes": [source_sizes.n_train, source_sizes.n_val],
            "target_sizes": [target_sizes.n_train, target_sizes.n_val],
            **{f"train_{k}": v for k, v in train_hp.model_dump().items()},
            "retrain_max_epochs": retrain_epochs,
        }).write_echo(Path(report))
    except (CovidSegError, ValidationError, OSError) as e:
        _fail(e)

    click.echo(summary.to_string(index=False, float_format=lambda v: f"{v:.4f}"))
    click.echo(f"F1 change from retraining: {result.improvement:+.4f}")


@main.command()
@click.argument('output_file', type=click.Path())
@click.option('--kind', type=click.Choice(['phantom', 'hyperparams', 'unet']), default='hyperparams')
def generate_config(output_file, kind):
    """Generate a sample configuration file."""
    model = {"phantom": PhantomSpec, "hyperparams": Hyperparams, "unet": UNetConfig}[kind]()
    config_dict = model.model_dump(mode="json")

    output_path = Path(output_file)
    try:
        if output_path.suffix.lower() in ['.yml', '.yaml']:
            with open(output_path, 'w', encoding='utf-8') as f:
                yaml.dump(config_dict, f, default_flow_style=False)
        else:
            with open(output_path, 'w', encoding='utf-8') as f:
                json.dump(config_dict, f, indent=2)
    except Exception as e:
        click.echo(f"Error saving config file: {e}", err=True)
        sys.exit(1)

    click.echo(f"Sample configuration saved to {output_file}")


if __name__ == '__main__':
    main()
