"""
Export of volumes and masks as (x, y, z, value) point tables.

x is the column index and y the row index, origin at the top-left of each
slide; slide i sits at z = i * z_step. Only lung pixels are exported. CT clouds
carry the window-normalized intensity of every lung pixel, mask clouds carry
only their positive pixels with value 1.
"""

from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from .config import CloudKind
from .errors import InvalidArgument, IoError, NotFound, ShapeError
from .preprocess import normalize_hu
from .volume_io import CtVolume

CSV_COLUMNS = ["x", "y", "z", "value"]
DEFAULT_Z_STEP = 1.0


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Points of one channel kind, sorted by (z, y, x)."""
    kind: CloudKind
    points: pd.DataFrame
    z_step: float

    def __len__(self) -> int:
        return len(self.points)

    @property
    def rows(self) -> List[Tuple[int, int, float, float]]:
        return [
            (int(x), int(y), float(z), float(v))
            for x, y, z, v in self.points[CSV_COLUMNS].itertuples(index=False, name=None)
        ]


def volume_to_points(
    volume: CtVolume,
    kind: CloudKind,
    masks: Optional[np.ndarray] = None,
    z_step: float = DEFAULT_Z_STEP,
) -> PointCloud:
    """Collect lung-restricted points of ``kind`` from ``volume``.

    ``masks`` is the binary stack for mask kinds; ground truth defaults to the
    volume's own COVID masks, predictions must be supplied.
    """
    kind = CloudKind(kind)
    if not z_step > 0:
        raise InvalidArgument(f"z_step must be positive, got {z_step}")

    lung = np.asarray(volume.lung_masks).astype(bool)
    if kind == CloudKind.CT:
        selected = lung
        values_source = normalize_hu(volume.slices)
    else:
        if masks is None:
            if kind == CloudKind.PREDICTION:
                raise InvalidArgument("prediction clouds need a predicted mask stack")
            masks = volume.covid_masks
        masks = np.asarray(masks)
        if masks.shape != lung.shape:
            raise ShapeError(f"mask stack {masks.shape} is not aligned with volume {lung.shape}")
        selected = lung & (masks == 1)
        values_source = None

    # np.nonzero walks slide, row, column in C order, giving the (z, y, x) sort
    slide, row, col = np.nonzero(selected)
    values = values_source[slide, row, col] if values_source is not None else np.ones(len(slide))
    points = pd.DataFrame({
        "x": col.astype(np.int64),
        "y": row.astype(np.int64),
        "z": slide.astype(np.float64) * float(z_step),
        "value": values.astype(np.float64),
    }, columns=CSV_COLUMNS)
    return PointCloud(kind=kind, points=points, z_step=float(z_step))


def write_csv(cloud: PointCloud, path: Union[str, Path]) -> None:
    """Write ``x,y,z,value`` with six fractional digits for z and value."""
    frame = cloud.points[CSV_COLUMNS]
    try:
        frame.to_csv(path, index=False, float_format="%.6f", lineterminator="\n")
    except OSError as e:
        raise IoError(f"cannot write point cloud {path}: {e}") from e


def read_points(path: Union[str, Path], kind: CloudKind, z_step: float = DEFAULT_Z_STEP) -> PointCloud:
    """Load a CSV written by ``write_csv``."""
    path = Path(path)
    if not path.is_file():
        raise NotFound(f"point cloud not found: {path}")
    frame = pd.read_csv(path, dtype={"x": np.int64, "y": np.int64, "z": np.float64, "value": np.float64})
    if list(frame.columns) != CSV_COLUMNS:
        raise InvalidArgument(f"{path} does not start with the header {','.join(CSV_COLUMNS)}")
    return PointCloud(kind=CloudKind(kind), points=frame, z_step=z_step)
