"""
Synthetic lung CT phantoms with paired lung and lesion masks.

Each slide holds a soft-tissue body ellipse over air, two elliptical lungs and,
on COVID-positive slides, disk-shaped lesions placed strictly inside a lung.
"""

import logging
import math
from typing import List, Tuple

import numpy as np
from scipy import ndimage
from skimage.draw import disk, ellipse

from .config import DefectSpec, PhantomSpec, QaIssueKind
from .errors import InfeasibleSpec, InvalidArgument
from .volume_io import CtVolume

logger = logging.getLogger(__name__)

AIR_HU = -1000.0
BODY_HU_MEAN = 40.0
BODY_HU_STD = 10.0

# lung geometry as fractions of the slide
LUNG_CENTER_ROW = 0.5
LUNG_CENTER_COLS = (0.3, 0.7)
LUNG_SEMI_ROWS = 0.3
LUNG_SEMI_COLS = 0.14
MIN_LUNG_SCALE = 0.8


def _lung_scale(index: int, count: int) -> float:
    # lungs are widest mid-volume and shrink toward apex and base
    return MIN_LUNG_SCALE + (1.0 - MIN_LUNG_SCALE) * math.sin(math.pi * (index + 0.5) / count)


def lung_semi_axes(spec: PhantomSpec, index: int) -> Tuple[float, float]:
    """Semi-axes (rows, cols) of each lung ellipse on slide ``index``."""
    scale = _lung_scale(index, spec.slide_count)
    return LUNG_SEMI_ROWS * spec.height * scale, LUNG_SEMI_COLS * spec.width * scale


def covid_slide_indices(spec: PhantomSpec, rng: np.random.Generator) -> np.ndarray:
    """Slides chosen as COVID-positive: floor(fraction x S) of them."""
    count = int(math.floor(spec.covid_slide_fraction * spec.slide_count))
    return np.sort(rng.permutation(spec.slide_count)[:count])


def _check_feasible(spec: PhantomSpec) -> None:
    smallest = min(
        min(lung_semi_axes(spec, index)) for index in range(spec.slide_count)
    )
    largest_radius = spec.lesion_radius_range[1]
    if largest_radius > smallest:
        raise InfeasibleSpec(
            f"lesion radius {largest_radius} exceeds the smallest lung semi-axis {smallest:.2f}"
        )
    for defect in spec.defects:
        if defect.slide_index >= spec.slide_count:
            raise InfeasibleSpec(
                f"defect slide {defect.slide_index} outside volume of {spec.slide_count} slides"
            )


def _synth_slide(
    spec: PhantomSpec,
    index: int,
    positive: bool,
    rng: np.random.Generator,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    shape = (spec.height, spec.width)
    hu = np.full(shape, AIR_HU)
    lung = np.zeros(shape, dtype=np.uint8)
    covid = np.zeros(shape, dtype=np.uint8)

    rr, cc = ellipse(spec.height / 2, spec.width / 2, 0.45 * spec.height, 0.45 * spec.width, shape=shape)
    hu[rr, cc] = rng.normal(BODY_HU_MEAN, BODY_HU_STD, size=rr.size)

    semi_rows, semi_cols = lung_semi_axes(spec, index)
    for center_col in LUNG_CENTER_COLS:
        rr, cc = ellipse(
            LUNG_CENTER_ROW * spec.height, center_col * spec.width,
            semi_rows, semi_cols, shape=shape,
        )
        lung[rr, cc] = 1
    lung_pixels = lung.astype(bool)
    hu[lung_pixels] = rng.normal(spec.lung_hu_mean, spec.lung_hu_std, size=int(lung_pixels.sum()))

    if positive:
        depth = ndimage.distance_transform_edt(lung_pixels)
        low, high = spec.lesion_count_range
        for _ in range(int(rng.integers(low, high + 1))):
            radius = float(rng.uniform(*spec.lesion_radius_range))
            candidates = np.argwhere(depth >= radius)
            if len(candidates) == 0:
                raise InfeasibleSpec(f"no room for a lesion of radius {radius:.2f} on slide {index}")
            row, col = candidates[int(rng.integers(len(candidates)))]
            rr, cc = disk((row, col), radius, shape=shape)
            covid[rr, cc] = 1
        lesion = covid.astype(bool)
        hu[lesion] = rng.normal(spec.lesion_hu_mean, spec.lesion_hu_std, size=int(lesion.sum()))

    ct = np.clip(np.rint(hu), np.iinfo(np.int16).min, np.iinfo(np.int16).max).astype(np.int16)
    return ct, lung, covid


def synth_volume(spec: PhantomSpec, volume_id: str = "phantom") -> CtVolume:
    """Generate a phantom volume; a pure function of ``spec``."""
    _check_feasible(spec)
    rng = np.random.default_rng(spec.seed)
    positives = set(covid_slide_indices(spec, rng).tolist())

    slices: List[np.ndarray] = []
    lungs: List[np.ndarray] = []
    covids: List[np.ndarray] = []
    for index in range(spec.slide_count):
        ct, lung, covid = _synth_slide(spec, index, index in positives, rng)
        slices.append(ct)
        lungs.append(lung)
        covids.append(covid)

    volume = CtVolume(
        volume_id=volume_id,
        slices=np.stack(slices),
        lung_masks=np.stack(lungs),
        covid_masks=np.stack(covids),
    )
    for defect in spec.defects:
        volume = inject_defect(volume, defect)
    logger.debug("synthesized %s: %d slides, %d COVID-positive", volume_id, spec.slide_count, len(positives))
    return volume


def inject_defect(volume: CtVolume, defect: DefectSpec) -> CtVolume:
    """Return a copy of ``volume`` carrying one annotation defect.

    Outside-lung defects mark the first ``pixel_count`` non-lung pixels of the
    slide in row-major order. Lungless defects clear the slide's lung and COVID
    masks, then mark its first ``pixel_count`` pixels as COVID.
    """
    if not 0 <= defect.slide_index < volume.slide_count:
        raise InvalidArgument(f"slide {defect.slide_index} outside volume of {volume.slide_count} slides")

    lung = np.array(volume.lung_masks)
    covid = np.array(volume.covid_masks)
    flat_lung = lung[defect.slide_index].reshape(-1)
    flat_covid = covid[defect.slide_index].reshape(-1)

    if defect.kind == QaIssueKind.COVID_OUTSIDE_LUNG:
        outside = np.flatnonzero((flat_lung == 0) & (flat_covid == 0))
        if len(outside) < defect.pixel_count:
            raise InvalidArgument(f"slide {defect.slide_index} has too few pixels outside the lung")
        flat_covid[outside[: defect.pixel_count]] = 1
    else:
        if defect.pixel_count > flat_covid.size:
            raise InvalidArgument(f"slide {defect.slide_index} has fewer than {defect.pixel_count} pixels")
        flat_lung[:] = 0
        flat_covid[:] = 0
        flat_covid[: defect.pixel_count] = 1

    return CtVolume(
        volume_id=volume.volume_id,
        slices=np.array(volume.slices),
        lung_masks=lung,
        covid_masks=covid,
    )
