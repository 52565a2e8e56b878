"""
Loading, writing and validating CT volumes stored as raw bundles.

A bundle is a directory holding ``manifest.txt`` (UTF-8 key=value lines) and
three little-endian raw arrays laid out slide-major then row-major:
``ct.raw`` (int16 HU), ``lung.raw`` (uint8) and ``covid.raw`` (uint8).
"""

import logging
import os
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np
from pydantic import BaseModel, Field, ValidationError

from .errors import CorruptBundle, InvalidArgument, InvalidMask, IoError, NotFound

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.txt"
CHANNEL_FILES = {"ct": "ct.raw", "lung": "lung.raw", "covid": "covid.raw"}
CHANNEL_DTYPES = {"ct": "int16", "lung": "uint8", "covid": "uint8"}
_NUMPY_DTYPES = {"int16": np.dtype("<i2"), "uint8": np.dtype("u1")}

MIN_SIDE = 8


def _frozen(array: np.ndarray, dtype: np.dtype, name: str) -> np.ndarray:
    """Private read-only copy of ``array`` as ``dtype``; lossy casts are rejected."""
    original = np.asarray(array)
    copy = np.array(original, dtype=dtype, copy=True)
    if original.dtype != copy.dtype and not np.array_equal(copy, original):
        raise InvalidArgument(f"{name} values do not fit {np.dtype(dtype).name} (dtype {original.dtype})")
    copy.flags.writeable = False
    return copy


@dataclass(frozen=True, eq=False)
class CtVolume:
    """A stack of HU slices with paired lung and COVID masks."""
    volume_id: str
    slices: np.ndarray
    lung_masks: np.ndarray
    covid_masks: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "slices", _frozen(self.slices, np.int16, "slices"))
        object.__setattr__(self, "lung_masks", _frozen(self.lung_masks, np.uint8, "lung_masks"))
        object.__setattr__(self, "covid_masks", _frozen(self.covid_masks, np.uint8, "covid_masks"))

    @property
    def slide_count(self) -> int:
        return int(self.slices.shape[0])

    @property
    def slice_height(self) -> int:
        return int(self.slices.shape[1])

    @property
    def slice_width(self) -> int:
        return int(self.slices.shape[2])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, CtVolume):
            return NotImplemented
        return (
            self.volume_id == other.volume_id
            and np.array_equal(self.slices, other.slices)
            and np.array_equal(self.lung_masks, other.lung_masks)
            and np.array_equal(self.covid_masks, other.covid_masks)
        )

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True)
class Violation:
    """One broken CtVolume invariant."""
    invariant: str
    slide_index: Optional[int]
    detail: str = field(default="")


class BundleManifest(BaseModel):
    """Header describing a bundle's channel files."""

    volume_id: str = Field(min_length=1)
    slide_count: int = Field(ge=1)
    height: int = Field(ge=MIN_SIDE)
    width: int = Field(ge=MIN_SIDE)
    byte_order: str = Field(default="little", pattern="^little$")
    dtypes: Dict[str, str] = Field(default_factory=lambda: dict(CHANNEL_DTYPES))

    def expected_bytes(self, channel: str) -> int:
        itemsize = _NUMPY_DTYPES[self.dtypes[channel]].itemsize
        return self.slide_count * self.height * self.width * itemsize

    def to_text(self) -> str:
        lines = [
            f"volume_id={self.volume_id}",
            f"slides={self.slide_count}",
            f"height={self.height}",
            f"width={self.width}",
            f"byte_order={self.byte_order}",
        ]
        lines += [f"{channel}_dtype={self.dtypes[channel]}" for channel in CHANNEL_FILES]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "BundleManifest":
        entries: Dict[str, str] = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise CorruptBundle(f"malformed manifest line: {line!r}")
            key, value = line.split("=", 1)
            entries[key.strip()] = value.strip()

        dtypes = dict(CHANNEL_DTYPES)
        for channel in CHANNEL_FILES:
            declared = entries.get(f"{channel}_dtype")
            if declared is not None:
                if declared != CHANNEL_DTYPES[channel]:
                    raise CorruptBundle(f"{channel} channel must be {CHANNEL_DTYPES[channel]}, got {declared}")
                dtypes[channel] = declared
        try:
            return cls(
                volume_id=entries["volume_id"],
                slide_count=int(entries["slides"]),
                height=int(entries["height"]),
                width=int(entries["width"]),
                byte_order=entries.get("byte_order", "little"),
                dtypes=dtypes,
            )
        except KeyError as e:
            raise CorruptBundle(f"manifest is missing key {e.args[0]!r}") from e
        except (ValueError, ValidationError) as e:
            raise CorruptBundle(f"invalid manifest: {e}") from e


def validate_bundle(volume: CtVolume) -> List[Violation]:
    """Check every CtVolume invariant; never raises."""
    violations: List[Violation] = []
    slices = np.asarray(volume.slices)

    if slices.ndim != 3:
        return [Violation("shape", None, f"slices must be 3-D, got shape {slices.shape}")]

    count, height, width = slices.shape
    if count < 1:
        violations.append(Violation("slide_count", None, "volume holds no slides"))
    if height < MIN_SIDE or width < MIN_SIDE:
        violations.append(
            Violation("min_size", None, f"slices are {height}x{width}, need at least {MIN_SIDE}x{MIN_SIDE}")
        )

    for name in ("lung_masks", "covid_masks"):
        mask = np.asarray(getattr(volume, name))
        if mask.shape != slices.shape:
            violations.append(
                Violation("shape", None, f"{name} shape {mask.shape} differs from slices {slices.shape}")
            )
            continue
        bad = (mask != 0) & (mask != 1)
        if bad.any():
            first = int(np.flatnonzero(bad.reshape(mask.shape[0], -1).any(axis=1))[0])
            values = sorted({int(v) for v in np.unique(mask[bad])})
            violations.append(
                Violation("binary_mask", first, f"{name} holds values {values}")
            )
    return violations


def write_bundle(volume: CtVolume, path: Union[str, Path]) -> None:
    """Write ``volume`` as a bundle directory at ``path``."""
    violations = validate_bundle(volume)
    if violations:
        raise InvalidArgument(f"refusing to write invalid volume: {violations[0]}")

    path = Path(path)
    manifest = BundleManifest(
        volume_id=volume.volume_id,
        slide_count=volume.slide_count,
        height=volume.slice_height,
        width=volume.slice_width,
    )
    arrays = {"ct": volume.slices, "lung": volume.lung_masks, "covid": volume.covid_masks}
    staging: Optional[Path] = None
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        staging = Path(tempfile.mkdtemp(prefix=f".{path.name}.", dir=path.parent))
        staging.chmod(0o755)
        for channel, filename in CHANNEL_FILES.items():
            dtype = _NUMPY_DTYPES[CHANNEL_DTYPES[channel]]
            (staging / filename).write_bytes(np.ascontiguousarray(arrays[channel], dtype=dtype).tobytes())
        (staging / MANIFEST_NAME).write_text(manifest.to_text(), encoding="utf-8")

        if path.exists():
            # manifest goes last so a reader never pairs it with stale channels
            for filename in [*CHANNEL_FILES.values(), MANIFEST_NAME]:
                os.replace(staging / filename, path / filename)
        else:
            os.replace(staging, path)
            staging = None
    except OSError as e:
        raise IoError(f"cannot write bundle {path}: {e}") from e
    finally:
        if staging is not None:
            shutil.rmtree(staging, ignore_errors=True)
    logger.info("wrote bundle %s (%d slides, %dx%d)", path, manifest.slide_count, manifest.height, manifest.width)


def load_bundle(path: Union[str, Path]) -> CtVolume:
    """Load and validate a bundle directory."""
    path = Path(path)
    manifest_path = path / MANIFEST_NAME
    if not manifest_path.is_file():
        raise NotFound(f"bundle manifest not found: {manifest_path}")
    for filename in CHANNEL_FILES.values():
        if not (path / filename).is_file():
            raise NotFound(f"bundle channel file not found: {path / filename}")

    try:
        manifest = BundleManifest.from_text(manifest_path.read_text(encoding="utf-8"))
        raw = {channel: (path / filename).read_bytes() for channel, filename in CHANNEL_FILES.items()}
    except UnicodeDecodeError as e:
        raise CorruptBundle(f"manifest is not UTF-8: {e}") from e
    except OSError as e:
        raise IoError(f"cannot read bundle {path}: {e}") from e

    shape = (manifest.slide_count, manifest.height, manifest.width)
    arrays = {}
    for channel, data in raw.items():
        expected = manifest.expected_bytes(channel)
        if len(data) != expected:
            raise CorruptBundle(
                f"{CHANNEL_FILES[channel]} holds {len(data)} bytes, manifest implies {expected}"
            )
        dtype = _NUMPY_DTYPES[manifest.dtypes[channel]]
        arrays[channel] = np.frombuffer(data, dtype=dtype).reshape(shape)

    for channel in ("lung", "covid"):
        mask = arrays[channel]
        bad = mask > 1
        if bad.any():
            first = int(np.flatnonzero(bad.reshape(shape[0], -1).any(axis=1))[0])
            raise InvalidMask(
                f"{channel} channel holds value {int(mask[bad].max())} at slide {first}"
            )

    logger.debug("loaded bundle %s", path)
    return CtVolume(
        volume_id=manifest.volume_id,
        slices=arrays["ct"].astype(np.int16),
        lung_masks=arrays["lung"].copy(),
        covid_masks=arrays["covid"].copy(),
    )
