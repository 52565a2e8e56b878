"""
U-Net encoder-decoder, forward evaluation and weight serialization.

Per level L the encoder runs two same-padded 3x3 convolutions with
``base_filters * 2**L`` filters and ReLU, then 2x2 max pooling. The decoder
mirrors it: 2x nearest upsampling, a 3x3 convolution, concatenation with the
matching encoder output, and two 3x3 convolutions. A 1x1 convolution with a
sigmoid produces the lesion probability map.
"""

import logging
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Union

import numpy as np
import torch
from pydantic import ValidationError
from torch import nn

from .config import UNetConfig
from .errors import (
    CorruptWeights,
    IncompatibleWeights,
    InvalidConfig,
    IoError,
    NotFound,
    ShapeError,
)

logger = logging.getLogger(__name__)

WEIGHTS_FORMAT = "covid-ctseg-weights"
WEIGHTS_VERSION = 1

# inference outputs stay strictly inside (0, 1) in float32; training never sees the clamp
PROB_EPS = 1e-7


class DoubleConv(nn.Module):
    """Two same-padded convolutions, each followed by ReLU."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3):
        super().__init__()
        padding = kernel_size // 2
        self.conv1 = nn.Conv2d(in_channels, out_channels, kernel_size, padding=padding)
        self.conv2 = nn.Conv2d(out_channels, out_channels, kernel_size, padding=padding)
        self.relu = nn.ReLU()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.relu(self.conv2(self.relu(self.conv1(x))))


class UpConv(nn.Module):
    """2x nearest upsampling followed by a 3x3 convolution and ReLU."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3):
        super().__init__()
        self.upsample = nn.Upsample(scale_factor=2, mode="nearest")
        self.conv = nn.Conv2d(in_channels, out_channels, kernel_size, padding=kernel_size // 2)
        self.relu = nn.ReLU()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.relu(self.conv(self.upsample(x)))


class UNet(nn.Module):
    """Channels-first network: (N, 2, S, S) -> (N, 1, S, S) probabilities."""

    def __init__(self, config: UNetConfig):
        super().__init__()
        self.config = config
        k = config.kernel_size

        self.encoders = nn.ModuleList()
        in_channels = config.input_channels
        for level in range(config.depth):
            self.encoders.append(DoubleConv(in_channels, config.filters(level), k))
            in_channels = config.filters(level)
        self.pool = nn.MaxPool2d(kernel_size=2, stride=2)
        self.bottleneck = DoubleConv(in_channels, config.filters(config.depth), k)

        # ups[i] and decoders[i] serve level depth-1-i
        self.ups = nn.ModuleList()
        self.decoders = nn.ModuleList()
        for level in reversed(range(config.depth)):
            self.ups.append(UpConv(config.filters(level + 1), config.filters(level), k))
            self.decoders.append(DoubleConv(2 * config.filters(level), config.filters(level), k))

        self.head = nn.Conv2d(config.filters(0), config.output_channels, kernel_size=1)
        self._initialize_weights()

    def _initialize_weights(self) -> None:
        # He normal for ReLU layers, std sqrt(2 / fan_in); biases start at zero
        for module in self.modules():
            if isinstance(module, nn.Conv2d):
                if module is not self.head:
                    nn.init.kaiming_normal_(module.weight, mode="fan_in", nonlinearity="relu")
                nn.init.zeros_(module.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logits(x))

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        """Pre-sigmoid lesion scores, (N, 1, S, S)."""
        skips = []
        for encoder in self.encoders:
            x = encoder(x)
            skips.append(x)
            x = self.pool(x)
        x = self.bottleneck(x)
        for up, decoder, skip in zip(self.ups, self.decoders, reversed(skips)):
            x = decoder(torch.cat([skip, up(x)], dim=1))
        return self.head(x)


@dataclass
class ModelState:
    """A network with its configuration and training age."""
    config: UNetConfig
    network: UNet
    training_epochs_consumed: int = 0

    def weights(self) -> "OrderedDict[str, torch.Tensor]":
        """Named weight tensors in registration order."""
        return OrderedDict((name, tensor.detach().clone()) for name, tensor in self.network.state_dict().items())


def parameter_count(config: UNetConfig) -> int:
    """Closed-form number of trainable scalars for ``config``."""
    k2 = config.kernel_size ** 2

    def conv(cin: int, cout: int, kernel_area: int = k2) -> int:
        return kernel_area * cin * cout + cout

    total = 0
    in_channels = config.input_channels
    for level in range(config.depth):
        f = config.filters(level)
        total += conv(in_channels, f) + conv(f, f)
        in_channels = f
    bottom = config.filters(config.depth)
    total += conv(in_channels, bottom) + conv(bottom, bottom)
    for level in range(config.depth):
        f = config.filters(level)
        total += conv(config.filters(level + 1), f) + conv(2 * f, f) + conv(f, f)
    total += conv(config.filters(0), config.output_channels, kernel_area=1)
    return total


def _check_config(config: UNetConfig) -> None:
    factor = 2 ** config.depth
    if config.input_size % factor != 0:
        raise InvalidConfig(
            f"input size {config.input_size} is not divisible by 2**depth = {factor}"
        )


def build_unet(config: UNetConfig, seed: int = 0) -> ModelState:
    """Build a freshly initialized network; deterministic for a fixed seed."""
    _check_config(config)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        network = UNet(config)
    network.eval()
    logger.debug("built U-Net depth=%d base=%d (%d parameters)", config.depth, config.base_filters, parameter_count(config))
    return ModelState(config=config, network=network, training_epochs_consumed=0)


def to_tensor(batch: np.ndarray) -> torch.Tensor:
    """Channels-last numpy batch -> channels-first float32 tensor."""
    return torch.from_numpy(np.ascontiguousarray(batch, dtype=np.float32)).permute(0, 3, 1, 2)


def check_batch(config: UNetConfig, batch: np.ndarray) -> None:
    expected = (config.input_size, config.input_size, config.input_channels)
    if batch.ndim != 4 or tuple(batch.shape[1:]) != expected:
        raise ShapeError(f"batch shape {batch.shape} does not match (N, {expected[0]}, {expected[1]}, {expected[2]})")


def forward(model: ModelState, batch: np.ndarray) -> np.ndarray:
    """Evaluate the network on an N x S x S x 2 batch; returns N x S x S x 1."""
    batch = np.asarray(batch)
    check_batch(model.config, batch)
    model.network.eval()
    with torch.no_grad():
        output = model.network(to_tensor(batch)).clamp(PROB_EPS, 1.0 - PROB_EPS)
    return output.permute(0, 2, 3, 1).contiguous().numpy()


def predict(model: ModelState, batch: np.ndarray, batch_size: int = 8) -> np.ndarray:
    """``forward`` evaluated in chunks of ``batch_size`` samples."""
    batch = np.asarray(batch)
    check_batch(model.config, batch)
    chunks = [forward(model, batch[i:i + batch_size]) for i in range(0, len(batch), batch_size)]
    if not chunks:
        size = model.config.input_size
        return np.zeros((0, size, size, model.config.output_channels), dtype=np.float32)
    return np.concatenate(chunks, axis=0)


def save_weights(model: ModelState, path: Union[str, Path]) -> None:
    """Write config, training age and ordered tensors to one file."""
    payload: Dict[str, Any] = {
        "format": WEIGHTS_FORMAT,
        "version": WEIGHTS_VERSION,
        "config": model.config.model_dump(),
        "epochs_consumed": int(model.training_epochs_consumed),
        "tensors": model.weights(),
    }
    try:
        torch.save(payload, str(path))
    except OSError as e:
        raise IoError(f"cannot write weights {path}: {e}") from e
    logger.info("saved weights to %s", path)


def load_weights(path: Union[str, Path], config: Union[UNetConfig, None] = None) -> ModelState:
    """Load a weight file, optionally checking it against ``config``."""
    path = Path(path)
    if not path.is_file():
        raise NotFound(f"weight file not found: {path}")
    try:
        payload = torch.load(str(path), map_location="cpu", weights_only=True)
    except Exception as e:
        raise CorruptWeights(f"cannot decode weight file {path}: {e}") from e

    if not isinstance(payload, dict) or payload.get("format") != WEIGHTS_FORMAT:
        raise CorruptWeights(f"{path} is not a {WEIGHTS_FORMAT} file")
    if payload.get("version") != WEIGHTS_VERSION:
        raise CorruptWeights(f"unsupported weight file version {payload.get('version')}")
    try:
        stored = UNetConfig(**payload["config"])
        tensors = payload["tensors"]
        epochs = int(payload.get("epochs_consumed", 0))
    except (KeyError, TypeError, ValidationError) as e:
        raise CorruptWeights(f"weight file {path} has a malformed header: {e}") from e

    if config is not None and config != stored:
        raise IncompatibleWeights(
            f"weights were trained for depth={stored.depth}, base={stored.base_filters}, size={stored.input_size}; "
            f"requested depth={config.depth}, base={config.base_filters}, size={config.input_size}"
        )
    model = build_unet(stored)
    try:
        model.network.load_state_dict(tensors, strict=True)
    except RuntimeError as e:
        raise IncompatibleWeights(f"stored tensors do not fit the stored config: {e}") from e
    model.training_epochs_consumed = epochs
    return model
