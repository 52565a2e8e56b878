"""
Configuration classes for the segmentation pipeline.
"""

from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator

from .errors import IoError

# lung window, in Hounsfield units
HU_WINDOW_MIN = -970.0
HU_WINDOW_MAX = -150.0

MAX_SEED = 2**64 - 1


class OptimizerKind(str, Enum):
    """Available optimizers."""
    ADAM = "adam"
    SGD = "sgd"


class F1Formula(str, Enum):
    """How F1 is derived from precision and recall."""
    STANDARD = "standard"  # 2PR/(P+R)
    PAPER = "paper"        # PR/(P+R), kept for auditing


class Roi(str, Enum):
    """Pixels counted by the confusion matrix."""
    SLIDE = "slide"
    LUNG = "lung"


class CloudKind(str, Enum):
    """Channel exported as a point cloud."""
    CT = "ct"
    GROUND_TRUTH = "ground_truth"
    PREDICTION = "prediction"


class QaIssueKind(str, Enum):
    """Annotation defects found by the QA scanner."""
    COVID_OUTSIDE_LUNG = "covid_outside_lung"
    COVID_WITHOUT_LUNG_SLIDE = "covid_without_lung_slide"


class StopReason(str, Enum):
    """Why a training run ended."""
    EARLY_STOP = "early_stop"
    BUDGET_EXHAUSTED = "budget_exhausted"


class DefectSpec(BaseModel):
    """A deliberate annotation defect planted into a phantom."""

    model_config = ConfigDict(frozen=True)

    kind: QaIssueKind = Field(description="Which defect to plant")
    slide_index: int = Field(ge=0, description="Slide receiving the defect")
    pixel_count: int = Field(default=3, ge=1, description="Number of marked pixels")


class PhantomSpec(BaseModel):
    """Parameters of a synthetic lung CT volume."""

    model_config = ConfigDict(frozen=True)

    slide_count: int = Field(default=16, ge=1, description="Number of slides")
    height: int = Field(default=64, ge=8, description="Slide height in pixels")
    width: int = Field(default=64, ge=8, description="Slide width in pixels")

    lung_hu_mean: float = Field(default=-850.0, description="Mean lung parenchyma HU")
    lung_hu_std: float = Field(default=25.0, ge=0.0, description="Lung HU noise")
    lesion_hu_mean: float = Field(default=-500.0, description="Mean lesion HU")
    lesion_hu_std: float = Field(default=40.0, ge=0.0, description="Lesion HU noise")

    lesion_count_range: Tuple[int, int] = Field(
        default=(1, 3),
        description="Inclusive range of lesions per COVID-positive slide"
    )
    lesion_radius_range: Tuple[float, float] = Field(
        default=(3.0, 6.0),
        description="Range of lesion radii in pixels"
    )
    covid_slide_fraction: float = Field(
        default=0.5, ge=0.0, le=1.0,
        description="Share of slides carrying lesions"
    )
    seed: int = Field(default=0, ge=0, le=MAX_SEED, description="Generator seed")

    defects: List[DefectSpec] = Field(
        default_factory=list,
        description="Annotation defects planted after generation"
    )

    @field_validator("lung_hu_mean")
    @classmethod
    def _lung_inside_window(cls, value: float) -> float:
        if not HU_WINDOW_MIN <= value <= HU_WINDOW_MAX:
            raise ValueError(
                f"lung_hu_mean {value} outside [{HU_WINDOW_MIN}, {HU_WINDOW_MAX}]"
            )
        return value

    @field_validator("lesion_count_range")
    @classmethod
    def _count_range(cls, value: Tuple[int, int]) -> Tuple[int, int]:
        low, high = value
        if low < 1 or high < low:
            raise ValueError(f"lesion_count_range {value} must satisfy 1 <= low <= high")
        return value

    @field_validator("lesion_radius_range")
    @classmethod
    def _radius_range(cls, value: Tuple[float, float]) -> Tuple[float, float]:
        low, high = value
        if low <= 0 or high < low:
            raise ValueError(f"lesion_radius_range {value} must satisfy 0 < low <= high")
        return value


class UNetConfig(BaseModel):
    """Topology of the encoder-decoder network."""

    model_config = ConfigDict(frozen=True)

    depth: int = Field(default=4, ge=1, description="Number of down/up levels")
    base_filters: int = Field(default=32, ge=1, description="Filters at level 0")
    kernel_size: Literal[3] = 3
    inner_activation: Literal["relu"] = "relu"
    head_activation: Literal["sigmoid"] = "sigmoid"
    input_channels: Literal[2] = 2
    output_channels: Literal[1] = 1
    input_size: int = Field(default=320, ge=1, description="Square input side in pixels")

    def filters(self, level: int) -> int:
        """Filter count at a given level (the bottleneck is level ``depth``)."""
        return self.base_filters * 2 ** level


class Hyperparams(BaseModel):
    """Optimization settings for train and retrain."""

    model_config = ConfigDict(frozen=True, use_enum_values=True)

    learning_rate: float = Field(default=1e-4, gt=0.0, description="Optimizer step size")
    batch_size: int = Field(default=45, ge=1, description="Slides per minibatch")
    max_epochs: int = Field(default=200, ge=1, description="Epoch budget")
    early_stop_patience: int = Field(
        default=10, ge=1,
        description="Epochs without val_loss improvement before stopping"
    )
    shuffle: bool = Field(default=True, description="Reshuffle minibatches every epoch")
    seed: int = Field(default=0, ge=0, le=MAX_SEED, description="Shuffle seed")
    optimizer: OptimizerKind = Field(default=OptimizerKind.ADAM, description="Optimizer")
    max_pos_weight: float = Field(
        default=10.0, ge=1.0,
        description="Cap on the lesion-pixel loss weight; 1.0 trains on plain BCE"
    )


class RunConfig(BaseModel):
    """Effective parameters of one CLI invocation."""

    command: str
    parameters: Dict[str, Any] = Field(default_factory=dict)
    seed: Optional[int] = None

    def echo_lines(self, timestamp: Optional[datetime] = None) -> List[str]:
        stamp = (timestamp or datetime.now(timezone.utc)).isoformat()
        lines = [f"command={self.command}"]
        if self.seed is not None:
            lines.append(f"seed={self.seed}")
        for key in sorted(self.parameters):
            lines.append(f"{key}={_echo_value(self.parameters[key])}")
        lines.append(f"timestamp={stamp}")
        return lines

    def write_echo(self, primary_output: Path) -> Path:
        """Write the key=value record next to ``primary_output``."""
        primary_output = Path(primary_output)
        path = primary_output.with_name(primary_output.name + ".run.txt")
        try:
            path.write_text("\n".join(self.echo_lines()) + "\n", encoding="utf-8")
        except OSError as e:
            raise IoError(f"cannot write config echo {path}: {e}") from e
        return path


def _echo_value(value: Any) -> str:
    if isinstance(value, Enum):
        return str(value.value)
    if isinstance(value, (list, tuple)):
        return ",".join(_echo_value(v) for v in value)
    if isinstance(value, BaseModel):
        return ";".join(f"{k}:{_echo_value(v)}" for k, v in value.model_dump().items())
    return str(value)
