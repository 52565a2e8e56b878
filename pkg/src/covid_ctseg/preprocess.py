"""
Turning raw volumes into training-ready slide samples and dataset splits.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .config import HU_WINDOW_MAX, HU_WINDOW_MIN
from .errors import InfeasibleSplit, InvalidArgument, IoError, NotFound
from .volume_io import CtVolume

logger = logging.getLogger(__name__)

SAMPLE_SIZE = 320

SampleKey = Tuple[str, int]


@dataclass(frozen=True, eq=False)
class SlideSample:
    """One preprocessed slide: ``input`` is HxWx2, ``target`` is HxWx1."""
    volume_id: str
    slide_index: int
    input: np.ndarray
    target: np.ndarray
    has_covid: bool

    @property
    def key(self) -> SampleKey:
        return (self.volume_id, self.slide_index)


@dataclass(frozen=True)
class DatasetSplit:
    """Train/validation/test partition of slide samples."""
    train: List[SlideSample]
    validation: List[SlideSample]
    test: List[SlideSample]
    seed: int

    def partitions(self) -> Dict[str, List[SlideSample]]:
        return {"train": self.train, "validation": self.validation, "test": self.test}


@dataclass(frozen=True)
class DatasetSummary:
    """Per-dataset slide counts."""
    volumes: int
    slides: int
    lung_slides: int
    covid_slides: int


def resize_nearest(slice_: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbor resize with ``src = floor(dst * in / out)``."""
    if out_h <= 0 or out_w <= 0:
        raise InvalidArgument(f"target size must be positive, got {out_h}x{out_w}")
    slice_ = np.asarray(slice_)
    if slice_.ndim != 2 or min(slice_.shape) < 1:
        raise InvalidArgument(f"expected a non-empty 2-D slice, got shape {slice_.shape}")
    in_h, in_w = slice_.shape
    rows = (np.arange(out_h) * in_h) // out_h
    cols = (np.arange(out_w) * in_w) // out_w
    return slice_[np.ix_(rows, cols)]


def normalize_hu(slice_: np.ndarray) -> np.ndarray:
    """Map HU to [0, 1] through the -970..-150 window, clamping outside it."""
    hu = np.asarray(slice_, dtype=np.float64)
    scaled = (hu - HU_WINDOW_MIN) / (HU_WINDOW_MAX - HU_WINDOW_MIN)
    return np.clip(scaled, 0.0, 1.0)


def build_sample(
    ct: np.ndarray,
    lung: np.ndarray,
    covid: np.ndarray,
    volume_id: str,
    slide_index: int,
    size: int = SAMPLE_SIZE,
) -> SlideSample:
    """Resize, normalize and stack one slide into a SlideSample."""
    ct, lung, covid = np.asarray(ct), np.asarray(lung), np.asarray(covid)
    if not (ct.shape == lung.shape == covid.shape):
        raise InvalidArgument(
            f"slide {volume_id}:{slide_index} channels disagree: ct {ct.shape}, lung {lung.shape}, covid {covid.shape}"
        )
    channel_ct = normalize_hu(resize_nearest(ct, size, size))
    channel_lung = resize_nearest(lung, size, size)
    target = resize_nearest(covid, size, size)

    stacked = np.stack([channel_ct, channel_lung], axis=-1).astype(np.float32)
    target = target.astype(np.float32)[..., np.newaxis]
    return SlideSample(
        volume_id=volume_id,
        slide_index=int(slide_index),
        input=stacked,
        target=target,
        has_covid=bool(target.any()),
    )


def filter_lung_slides(volume: CtVolume) -> List[int]:
    """Indices of slides whose lung mask is non-empty, in order."""
    flat = np.asarray(volume.lung_masks).reshape(volume.slide_count, -1)
    return [int(i) for i in np.flatnonzero(flat.any(axis=1))]


def samples_from_volume(volume: CtVolume, size: int = SAMPLE_SIZE) -> List[SlideSample]:
    """Build samples for every lung-bearing slide of ``volume``."""
    return [
        build_sample(
            volume.slices[i], volume.lung_masks[i], volume.covid_masks[i],
            volume.volume_id, i, size=size,
        )
        for i in filter_lung_slides(volume)
    ]


def summarize_dataset(volumes: Iterable[CtVolume]) -> DatasetSummary:
    """Count slides, lung-bearing slides and COVID-bearing lung slides."""
    volume_count = slides = lung_slides = covid_slides = 0
    for volume in volumes:
        volume_count += 1
        slides += volume.slide_count
        has_lung = np.asarray(volume.lung_masks).reshape(volume.slide_count, -1).any(axis=1)
        has_covid = np.asarray(volume.covid_masks).reshape(volume.slide_count, -1).any(axis=1)
        lung_slides += int(has_lung.sum())
        covid_slides += int((has_lung & has_covid).sum())
    return DatasetSummary(volume_count, slides, lung_slides, covid_slides)


def make_split(
    samples: Sequence[SlideSample],
    n_train: int,
    n_val: int,
    seed: int,
) -> DatasetSplit:
    """Balanced train/validation draw; everything else becomes the test set.

    Odd sizes give the extra slot to the COVID class.
    """
    if n_train < 0 or n_val < 0:
        raise InvalidArgument(f"split sizes must be non-negative, got {n_train}/{n_val}")
    if seed < 0:
        raise InvalidArgument(f"split seed must be non-negative, got {seed}")
    keys = [sample.key for sample in samples]
    if len(set(keys)) != len(keys):
        raise InvalidArgument("samples contain duplicate (volume_id, slide_index) keys")

    ordered = sorted(samples, key=lambda s: s.key)
    positives = [s for s in ordered if s.has_covid]
    negatives = [s for s in ordered if not s.has_covid]

    train_pos, train_neg = (n_train + 1) // 2, n_train // 2
    val_pos, val_neg = (n_val + 1) // 2, n_val // 2
    if train_pos + val_pos > len(positives):
        raise InfeasibleSplit(
            f"need {train_pos + val_pos} COVID slides, only {len(positives)} available"
        )
    if train_neg + val_neg > len(negatives):
        raise InfeasibleSplit(
            f"need {train_neg + val_neg} non-COVID slides, only {len(negatives)} available"
        )

    rng = np.random.default_rng(seed)
    shuffled_pos = [positives[i] for i in rng.permutation(len(positives))]
    shuffled_neg = [negatives[i] for i in rng.permutation(len(negatives))]

    train = shuffled_pos[:train_pos] + shuffled_neg[:train_neg]
    validation = (
        shuffled_pos[train_pos:train_pos + val_pos]
        + shuffled_neg[train_neg:train_neg + val_neg]
    )
    chosen = {s.key for s in train} | {s.key for s in validation}
    test = [s for s in ordered if s.key not in chosen]

    def by_key(items: List[SlideSample]) -> List[SlideSample]:
        return sorted(items, key=lambda s: s.key)

    split = DatasetSplit(train=by_key(train), validation=by_key(validation), test=test, seed=seed)
    logger.info(
        "split %d samples: train %d, validation %d, test %d",
        len(ordered), len(split.train), len(split.validation), len(split.test),
    )
    return split


def write_split(split: DatasetSplit, path: Union[str, Path]) -> None:
    """Persist the split as ``volume_id,slide_index,partition`` lines."""
    rows = [
        (sample.volume_id, sample.slide_index, partition)
        for partition, items in split.partitions().items()
        for sample in items
    ]
    frame = pd.DataFrame(rows, columns=["volume_id", "slide_index", "partition"])
    try:
        frame.to_csv(path, index=False, lineterminator="\n")
    except OSError as e:
        raise IoError(f"cannot write split file {path}: {e}") from e


def read_split(path: Union[str, Path], samples: Sequence[SlideSample], seed: int = 0) -> DatasetSplit:
    """Rebuild a split from a split file and the samples it refers to."""
    path = Path(path)
    if not path.is_file():
        raise NotFound(f"split file not found: {path}")
    frame = pd.read_csv(path, dtype={"volume_id": str, "slide_index": int, "partition": str})

    by_key = {sample.key: sample for sample in samples}
    parts: Dict[str, List[SlideSample]] = {"train": [], "validation": [], "test": []}
    for row in frame.itertuples(index=False):
        key = (row.volume_id, int(row.slide_index))
        if row.partition not in parts:
            raise InvalidArgument(f"unknown partition {row.partition!r} in {path}")
        if key not in by_key:
            raise InvalidArgument(f"split file names unknown slide {key[0]}:{key[1]}")
        parts[row.partition].append(by_key[key])
    return DatasetSplit(train=parts["train"], validation=parts["validation"], test=parts["test"], seed=seed)
