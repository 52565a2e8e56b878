"""
Training and retraining of the U-Net with seeded minibatches and early stopping.
"""

import copy
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F

from .config import F1Formula, Hyperparams, OptimizerKind, StopReason, UNetConfig
from .errors import IncompatibleWeights, InvalidArgument, IoError, ShapeError
from .evaluation import score_predictions
from .preprocess import DatasetSplit, SlideSample
from .unet import PROB_EPS, ModelState, UNet, to_tensor

logger = logging.getLogger(__name__)

EVAL_BATCH = 16


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_f1: float


@dataclass
class TrainHistory:
    """Per-epoch records of one train or retrain call."""
    records: List[EpochRecord] = field(default_factory=list)
    stopped_epoch: int = 0
    stop_reason: StopReason = StopReason.BUDGET_EXHAUSTED
    best_epoch: int = 0

    @property
    def best_val_loss(self) -> float:
        return self.records[self.best_epoch - 1].val_loss

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [(r.epoch, r.train_loss, r.val_loss, r.val_f1) for r in self.records],
            columns=["epoch", "train_loss", "val_loss", "val_f1"],
        )


class EarlyStopping:
    """Stop once the monitored loss fails to strictly improve for ``patience`` epochs.

    Keeps a snapshot of whatever state was passed with the best loss so far.
    """

    def __init__(self, patience: int):
        if patience < 1:
            raise InvalidArgument(f"patience must be >= 1, got {patience}")
        self.patience = patience
        self.best_loss = float("inf")
        self.best_epoch = 0
        self.best_state: Optional[Dict[str, torch.Tensor]] = None
        self.wait = 0
        self.stopped = False

    def step(self, epoch: int, loss: float, state: Optional[Dict[str, torch.Tensor]] = None) -> bool:
        """Record one epoch; returns True when training should stop."""
        if loss < self.best_loss:
            self.best_loss = loss
            self.best_epoch = epoch
            self.best_state = copy.deepcopy(state) if state is not None else None
            self.wait = 0
        else:
            self.wait += 1
            if self.wait >= self.patience:
                self.stopped = True
        return self.stopped


def stopping_epoch(losses: Sequence[float], patience: int) -> Optional[int]:
    """1-based epoch at which the stopping rule fires on ``losses``, if any."""
    stopper = EarlyStopping(patience)
    for epoch, loss in enumerate(losses, start=1):
        if stopper.step(epoch, loss):
            return epoch
    return None


def bce_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean pixelwise binary cross-entropy of probabilities."""
    if pred.shape != target.shape:
        raise ShapeError(f"prediction shape {tuple(pred.shape)} differs from target {tuple(target.shape)}")
    return F.binary_cross_entropy(pred.clamp(PROB_EPS, 1.0 - PROB_EPS), target.to(pred.dtype))


def weighted_bce_with_logits(
    logits: torch.Tensor,
    target: torch.Tensor,
    pos_weight: float = 1.0,
    reduction: str = "mean",
) -> torch.Tensor:
    """BCE on pre-sigmoid scores with lesion pixels weighted by ``pos_weight``."""
    if logits.shape != target.shape:
        raise ShapeError(f"prediction shape {tuple(logits.shape)} differs from target {tuple(target.shape)}")
    weight = torch.tensor([pos_weight], dtype=logits.dtype)
    return F.binary_cross_entropy_with_logits(logits, target.to(logits.dtype), pos_weight=weight, reduction=reduction)


def estimate_pos_weight(samples: Sequence[SlideSample], cap: float) -> float:
    """Background-to-lesion pixel ratio of ``samples``, clipped to [1, cap]."""
    positive = sum(int(np.count_nonzero(s.target)) for s in samples)
    if positive == 0:
        return 1.0
    negative = sum(s.target.size for s in samples) - positive
    return float(min(max(negative / positive, 1.0), cap))


def _stack(samples: Sequence[SlideSample]) -> Tuple[torch.Tensor, torch.Tensor]:
    inputs = to_tensor(np.stack([s.input for s in samples]))
    targets = to_tensor(np.stack([s.target for s in samples]))
    return inputs, targets


def _monitor(network: UNet, samples: Sequence[SlideSample], pos_weight: float = 1.0) -> Tuple[float, np.ndarray]:
    """Mean weighted BCE over every pixel of ``samples`` plus the channels-last probabilities."""
    network.eval()
    total, pixels = 0.0, 0
    outputs = []
    with torch.no_grad():
        for start in range(0, len(samples), EVAL_BATCH):
            inputs, targets = _stack(samples[start:start + EVAL_BATCH])
            logits = network.logits(inputs)
            total += weighted_bce_with_logits(logits, targets, pos_weight, reduction="sum").item()
            pixels += targets.numel()
            outputs.append(torch.sigmoid(logits).permute(0, 2, 3, 1).numpy())
    return total / pixels, np.concatenate(outputs, axis=0)


def validation_loss(model: ModelState, samples: Sequence[SlideSample], pos_weight: float = 1.0) -> float:
    """Mean BCE of ``model`` over ``samples``, lesion pixels weighted by ``pos_weight``."""
    if not samples:
        raise InvalidArgument("cannot compute a loss over zero samples")
    _check_samples(model.config, samples, ShapeError)
    loss, _ = _monitor(model.network, samples, pos_weight)
    return loss


def _check_samples(config: UNetConfig, samples: Sequence[SlideSample], error: type) -> None:
    expected = (config.input_size, config.input_size, config.input_channels)
    for sample in samples:
        if sample.input.shape != expected:
            raise error(
                f"sample {sample.volume_id}:{sample.slide_index} has shape {sample.input.shape}, network expects {expected}"
            )


def _make_optimizer(network: UNet, hp: Hyperparams) -> torch.optim.Optimizer:
    if hp.optimizer == OptimizerKind.SGD:
        return torch.optim.SGD(network.parameters(), lr=hp.learning_rate)
    return torch.optim.Adam(network.parameters(), lr=hp.learning_rate)


def _fit(model: ModelState, split: DatasetSplit, hp: Hyperparams) -> Tuple[ModelState, TrainHistory]:
    if not split.train:
        raise InvalidArgument("training set is empty")

    network = copy.deepcopy(model.network)
    optimizer = _make_optimizer(network, hp)
    inputs, targets = _stack(split.train)
    monitored = split.validation
    if not monitored:
        logger.warning("validation set is empty; monitoring training loss instead")
        monitored = split.train

    pos_weight = estimate_pos_weight(split.train, hp.max_pos_weight)
    logger.info("lesion pixel weight %.3f", pos_weight)

    rng = np.random.default_rng(hp.seed)
    stopper = EarlyStopping(hp.early_stop_patience)
    history = TrainHistory()
    count = len(split.train)

    for epoch in range(1, hp.max_epochs + 1):
        network.train()
        order = rng.permutation(count) if hp.shuffle else np.arange(count)
        running = 0.0
        for start in range(0, count, hp.batch_size):
            index = torch.from_numpy(order[start:start + hp.batch_size])
            optimizer.zero_grad()
            loss = weighted_bce_with_logits(network.logits(inputs[index]), targets[index], pos_weight)
            loss.backward()
            optimizer.step()
            running += loss.item() * len(index)

        val_loss, predictions = _monitor(network, monitored, pos_weight)
        val_f1 = score_predictions(monitored, predictions, f1_formula=F1Formula.STANDARD).macro.f1
        record = EpochRecord(epoch, running / count, val_loss, val_f1)
        history.records.append(record)
        logger.info(
            "epoch %d: train_loss=%.6f val_loss=%.6f val_f1=%.4f",
            epoch, record.train_loss, record.val_loss, record.val_f1,
        )

        if stopper.step(epoch, val_loss, network.state_dict()):
            history.stop_reason = StopReason.EARLY_STOP
            logger.info("early stopping at epoch %d, best epoch %d", epoch, stopper.best_epoch)
            break

    history.stopped_epoch = len(history.records)
    history.best_epoch = stopper.best_epoch
    if stopper.best_state is not None:
        network.load_state_dict(stopper.best_state)
    network.eval()
    trained = ModelState(
        config=model.config,
        network=network,
        training_epochs_consumed=model.training_epochs_consumed + history.stopped_epoch,
    )
    return trained, history


def train(model: ModelState, split: DatasetSplit, hp: Hyperparams) -> Tuple[ModelState, TrainHistory]:
    """Train ``model`` on ``split``; the input state is left untouched."""
    _check_samples(model.config, split.train + split.validation, ShapeError)
    return _fit(model, split, hp)


def retrain(
    state: ModelState,
    split: DatasetSplit,
    hp: Hyperparams,
    config: Optional[UNetConfig] = None,
) -> Tuple[ModelState, TrainHistory]:
    """Continue training already-trained weights on a new split."""
    if config is not None and config != state.config:
        raise IncompatibleWeights(
            f"weights were built for {state.config.model_dump()}, retrain requested {config.model_dump()}"
        )
    _check_samples(state.config, split.train + split.validation, IncompatibleWeights)
    logger.info("retraining from %d consumed epochs", state.training_epochs_consumed)
    return _fit(state, split, hp)


def write_history(history: TrainHistory, path: Union[str, Path]) -> None:
    """One line per epoch: epoch, train_loss, val_loss, val_f1."""
    try:
        history.to_frame().to_csv(path, index=False, float_format="%.6f", lineterminator="\n")
    except OSError as e:
        raise IoError(f"cannot write history {path}: {e}") from e
