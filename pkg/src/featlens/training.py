from __future__ import annotations

__all__ = [
    "TrainLog",
    "LensTrainResult",
    "RotClassifierResult",
    "lr_at",
    "train_host",
    "train_lens",
    "train_lenses",
    "train_rot_classifier",
    "fit_rot_classifier",
    "rotation_accuracy",
    "train_xlayer",
    "train_dataaug",
]

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from ._constants import ROTATION_BINS
from ._utils import logged_run
from .data import Dataset, prepare_batch
from .errors import DivergenceError, HostDriftError, NonFiniteError, UnresolvedBinError
from .host import FrozenHost, HostConfig, HostModel, Taps, Xlayer, build_host
from .lenses import (
    LensConfig,
    LensType,
    RotationClassifier,
    ScalingLens,
    build_lens,
    content_taps,
)
from .losses import feature_loss
from .optim import SGD
from .tensor import Tensor, cross_entropy, no_grad
from .train_config import AugPolicy, TrainConfig
from .transforms import CanvasPolicy, TransformKind, TransformSpec, bin_to_spec
from .types import PathType


module_logger = logging.getLogger(__name__)
module_logger.addHandler(logging.NullHandler())


class TrainLog:
    """Per-step records: step, lr, loss and optional accuracy / mixing weights."""

    def __init__(self):
        self.rows: List[Dict[str, float]] = []

    def append(self, **row: float):
        self.rows.append(row)

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def losses(self) -> np.ndarray:
        return np.array([row["loss"] for row in self.rows])

    def smoothed(self, window: int = 20) -> np.ndarray:
        """Trailing moving average of the loss curve."""
        losses = self.losses
        if len(losses) == 0:
            return losses
        window = max(1, min(window, len(losses)))
        return np.convolve(losses, np.ones(window) / window, mode="valid")

    def to_frame(self) -> pd.DataFrame:
        columns = ["step", "lr", "loss"]
        for optional in ("accuracy", "w1", "w2"):
            if any(optional in row for row in self.rows):
                columns.append(optional)
        return pd.DataFrame(self.rows, columns=columns)

    def to_csv(self, path: PathType):
        self.to_frame().to_csv(path, index=False, lineterminator="\n")


@dataclass
class LensTrainResult:
    lens_bin: str
    # None for the identity bin
    lens: Optional[LensType]
    log: TrainLog = field(default_factory=TrainLog)


@dataclass
class RotClassifierResult:
    classifier: RotationClassifier
    log: TrainLog
    accuracy: float


def lr_at(config: TrainConfig, epoch: float) -> float:
    return config.lr_at(epoch)


def _schedule(size: int, config: TrainConfig) -> Iterator[Tuple[int, float, np.ndarray]]:
    """(step, lr, batch indices) over the configured epochs, reshuffled each epoch."""
    if size == 0:
        raise ValueError("cannot train on an empty dataset")
    rng = np.random.default_rng(config.seed)
    steps_per_epoch = math.ceil(size / config.batch_size)
    total = config.total_steps(size)
    step = 0
    while step < total:
        order = rng.permutation(size)
        for start in range(0, size, config.batch_size):
            if step >= total:
                return
            yield step, config.lr_at(step / steps_per_epoch), order[start : start + config.batch_size]
            step += 1


def _checked(loss: Tensor, step: int) -> float:
    value = float(loss.data)
    if not math.isfinite(value):
        raise DivergenceError(f"loss became {value} at step {step}")
    return value


def _step_log(tag: str, config: TrainConfig, step: int, row: Dict[str, float]):
    if step % config.log_every == 0:
        module_logger.info(
            f"{tag} step {step}: " + ", ".join(f"{k}={v:.6g}" for k, v in row.items() if k != "step")
        )


def _check_host(host: FrozenHost, checksum: str, tag: str):
    if host.checksum() != checksum:
        raise HostDriftError(f"frozen host parameters changed during {tag}")


def _supervised(
    tag: str,
    params: Sequence[Tensor],
    logits_fn: Callable[[np.ndarray, bool], Tensor],
    dataset: Dataset,
    input_hw: Tuple[int, int],
    config: TrainConfig,
    policy: Optional[AugPolicy] = None,
    canvas_policy: CanvasPolicy = CanvasPolicy.PAD,
) -> TrainLog:
    """Cross-entropy training; one transform drawn per batch when a policy is given."""
    log = TrainLog()
    optimizer = SGD(params, config.initial_lr, config.momentum)
    aug_rng = np.random.default_rng([config.seed, 1])
    for step, lr, idx in _schedule(len(dataset), config):
        spec = policy.sample(aug_rng) if policy is not None else None
        batch = prepare_batch(dataset.images[idx], input_hw, spec, canvas_policy)
        any_size = batch.shape[2:] != tuple(input_hw)
        try:
            logits = logits_fn(batch, any_size)
            loss = cross_entropy(logits, dataset.labels[idx])
            value = _checked(loss, step)
            loss.backward()
        except NonFiniteError as e:
            raise DivergenceError(f"{tag} diverged at step {step}: {e}") from e
        optimizer.step(lr)
        accuracy = float(np.mean(logits.data.argmax(axis=1) == dataset.labels[idx]))
        row = dict(step=step, lr=lr, loss=value, accuracy=accuracy)
        log.append(**row)
        _step_log(tag, config, step, row)
    return log


def _epoch_summary(log: TrainLog, dataset_size: int, config: TrainConfig) -> List[str]:
    if len(log) == 0:
        return ["no steps run"]
    frame = log.to_frame()
    steps_per_epoch = math.ceil(dataset_size / config.batch_size)
    lines = []
    for epoch, group in frame.groupby(frame["step"] // steps_per_epoch):
        line = f"epoch {epoch}: loss={group['loss'].mean():.4f}"
        if "accuracy" in group:
            line += f", accuracy={group['accuracy'].mean():.4f}"
        lines.append(line)
    return lines


def train_host(
    dataset: Dataset,
    host_config: Optional[HostConfig] = None,
    config: Optional[TrainConfig] = None,
) -> Tuple[HostModel, TrainLog]:
    """Supervised training of a fresh host on upright images."""
    return train_dataaug(dataset, None, host_config, config, tag="train_host")


def train_dataaug(
    dataset: Dataset,
    policy: Optional[AugPolicy],
    host_config: Optional[HostConfig] = None,
    config: Optional[TrainConfig] = None,
    tag: str = "train_dataaug",
) -> Tuple[HostModel, TrainLog]:
    """Supervised training of a fresh host with per-batch augmentation."""
    config = config or TrainConfig()
    model = build_host(host_config)
    settings = {"host": model.config.to_dict(), "train": config.to_dict()}
    if policy is not None:
        settings["aug"] = policy.to_dict()
    with logged_run(module_logger, tag, settings) as summary:
        log = _supervised(
            tag,
            model.parameters(),
            lambda batch, any_size: model.forward_with_taps(batch, any_size=any_size)[0],
            dataset,
            model.config.input_hw,
            config,
            policy,
        )
        summary.extend(_epoch_summary(log, len(dataset), config))
    return model, log


def train_xlayer(
    host: FrozenHost,
    dataset: Dataset,
    config: Optional[TrainConfig] = None,
    policy: Optional[AugPolicy] = None,
    family: TransformKind = TransformKind.ROTATION,
) -> Tuple[Xlayer, TrainLog]:
    """Train one extra block for a transform family; host and head stay frozen.

    Without a policy the dataset images are used as stored (already transformed).
    """
    config = config or TrainConfig()
    family = TransformKind.parse(family)
    xlayer = Xlayer(host.config, seed=config.seed)
    checksum = host.checksum()
    tag = f"train_xlayer[{family}]"
    settings = {"train": config.to_dict(), "aug": None if policy is None else policy.to_dict()}
    with logged_run(module_logger, tag, settings) as summary:
        log = _supervised(
            tag,
            xlayer.parameters(),
            lambda batch, any_size: xlayer.logits(host, batch, any_size=any_size),
            dataset,
            host.config.input_hw,
            config,
            policy,
        )
        _check_host(host, checksum, tag)
        summary.extend(_epoch_summary(log, len(dataset), config))
    return xlayer, log


def train_lens(
    host: FrozenHost,
    lens_bin: str,
    dataset: Dataset,
    config: Optional[TrainConfig] = None,
    lens_config: Optional[LensConfig] = None,
    spec: Optional[TransformSpec] = None,
) -> LensTrainResult:
    """Self-supervised lens training: reconstruct X of the original image from
    the taps of its transformed copy. Class labels are never read.
    """
    config = config or TrainConfig()
    lens_config = lens_config or LensConfig()
    spec = spec or bin_to_spec(lens_bin)
    if spec.lens_bin != lens_bin:
        raise UnresolvedBinError(f"{spec} bins to {spec.lens_bin}, not {lens_bin}")
    lens = None if lens_bin == "identity" else build_lens(lens_bin, host, lens_config)
    optimizer = None if lens is None else SGD(lens.parameters(), config.initial_lr, config.momentum)
    input_hw = host.config.input_hw
    checksum = host.checksum()
    tag = f"train_lens[{lens_bin}]"
    settings = {"spec": str(spec), "train": config.to_dict(), "lens": lens_config.to_dict()}
    log = TrainLog()
    with logged_run(module_logger, tag, settings) as summary:
        for step, lr, idx in _schedule(len(dataset), config):
            images = dataset.images[idx]
            _, taps = host.forward_with_taps(prepare_batch(images, input_hw))
            target = taps.X
            transformed = prepare_batch(images, input_hw, spec, lens_config.canvas_policy)
            any_size = transformed.shape[2:] != tuple(input_hw)
            _, taps_t = host.forward_with_taps(transformed, any_size=any_size)
            row: Dict[str, float] = dict(step=step, lr=lr)
            try:
                if lens is None:
                    output = taps_t.X
                elif isinstance(lens, ScalingLens):
                    output = lens(content_taps(taps_t, lens.scale, lens.canvas_policy), taps.feature_hw)
                else:
                    output = lens(taps_t)
                loss = feature_loss(target, output, config.loss)
                row["loss"] = _checked(loss, step)
                if optimizer is not None:
                    loss.backward()
            except NonFiniteError as e:
                raise DivergenceError(f"{tag} diverged at step {step}: {e}") from e
            if optimizer is not None:
                optimizer.step(lr)
            if isinstance(lens, ScalingLens):
                w1, w2 = lens.mixing_weights
                module_logger.debug(f"{tag} step {step}: w1={w1:.6f}, w2={w2:.6f}")
                row.update(w1=w1, w2=w2)
            log.append(**row)
            _step_log(tag, config, step, row)
        _check_host(host, checksum, tag)
        if len(log):
            smoothed = log.smoothed()
            summary.append(f"steps: {len(log)}")
            summary.append(f"smoothed loss: {smoothed[0]:.4f} -> {smoothed[-1]:.4f}")
    return LensTrainResult(lens_bin, lens, log)


def train_lenses(
    host: FrozenHost,
    lens_bins: Sequence[str],
    dataset: Dataset,
    config: Optional[TrainConfig] = None,
    lens_config: Optional[LensConfig] = None,
    workers: int = 1,
) -> Dict[str, LensTrainResult]:
    """Independent runs per bin, optionally in parallel threads."""
    if workers <= 1:
        return {b: train_lens(host, b, dataset, config, lens_config) for b in lens_bins}
    with ThreadPoolExecutor(max_workers=workers) as executor:
        futures = {b: executor.submit(train_lens, host, b, dataset, config, lens_config) for b in lens_bins}
        return {b: future.result() for b, future in futures.items()}


def _rotated_batch(
    images: np.ndarray,
    input_hw: Tuple[int, int],
    quarter_turns: np.ndarray,
    jitter: np.ndarray,
) -> np.ndarray:
    specs = [TransformSpec.rotation(90.0 * k + j) for k, j in zip(quarter_turns, jitter)]
    return prepare_batch(images, input_hw, specs)


def rotation_accuracy(
    host: FrozenHost,
    classifier: RotationClassifier,
    dataset: Dataset,
    batch_size: int = 256,
) -> float:
    """Bin accuracy with every image presented under all four exact rotations."""
    correct = 0
    total = 0
    for idx in dataset.batches(batch_size):
        for k in range(len(ROTATION_BINS)):
            turns = np.full(len(idx), k)
            batch = _rotated_batch(dataset.images[idx], host.config.input_hw, turns, np.zeros(len(idx)))
            _, taps = host.forward_with_taps(batch)
            with no_grad():
                predicted = classifier(taps).data.argmax(axis=1)
            correct += int(np.sum(predicted == k))
            total += len(idx)
    return correct / total if total else 0.0


def train_rot_classifier(
    host: FrozenHost,
    dataset: Dataset,
    config: Optional[TrainConfig] = None,
    jitter_deg: float = 0.0,
) -> RotClassifierResult:
    """4-way rotation-bin classifier trained on self-generated rotations.

    ``jitter_deg`` perturbs each rotation uniformly within +-jitter, staying in its bin.
    """
    config = config or TrainConfig()
    if not 0 <= jitter_deg < 45:
        raise ValueError(f"jitter must be in [0, 45) degrees, got {jitter_deg}")
    n = host.config.bottleneck_width
    classifier = RotationClassifier(5 * n, seed=config.seed)
    optimizer = SGD(classifier.parameters(), config.initial_lr, config.momentum)
    rng = np.random.default_rng([config.seed, 2])
    checksum = host.checksum()
    tag = "train_rot_classifier"
    log = TrainLog()
    with logged_run(module_logger, tag, {"train": config.to_dict(), "jitter_deg": jitter_deg}) as summary:
        for step, lr, idx in _schedule(len(dataset), config):
            turns = rng.integers(0, len(ROTATION_BINS), size=len(idx))
            jitter = rng.uniform(-jitter_deg, jitter_deg, size=len(idx))
            batch = _rotated_batch(dataset.images[idx], host.config.input_hw, turns, jitter)
            _, taps = host.forward_with_taps(batch)
            logits = classifier(taps)
            loss = cross_entropy(logits, turns)
            value = _checked(loss, step)
            loss.backward()
            optimizer.step(lr)
            accuracy = float(np.mean(logits.data.argmax(axis=1) == turns))
            row = dict(step=step, lr=lr, loss=value, accuracy=accuracy)
            log.append(**row)
            _step_log(tag, config, step, row)
        _check_host(host, checksum, tag)
        accuracy = rotation_accuracy(host, classifier, dataset)
        summary.append(f"rotation accuracy: {accuracy:.4f}")
    return RotClassifierResult(classifier, log, accuracy)


def fit_rot_classifier(
    taps: Taps,
    labels: np.ndarray,
    config: Optional[TrainConfig] = None,
    classifier: Optional[RotationClassifier] = None,
) -> Tuple[RotationClassifier, float]:
    """Train on precomputed taps with known bin labels; returns the final accuracy."""
    config = config or TrainConfig()
    labels = np.asarray(labels, dtype=np.int64)
    in_channels = taps.x2.shape[1] + taps.x0.shape[1]
    classifier = classifier or RotationClassifier(in_channels, seed=config.seed)
    optimizer = SGD(classifier.parameters(), config.initial_lr, config.momentum)
    arrays = {name: getattr(taps, name).data for name in ("x0", "x2", "x3", "X")}
    for step, lr, idx in _schedule(len(labels), config):
        sub = Taps(**{name: Tensor(value[idx]) for name, value in arrays.items()})
        loss = cross_entropy(classifier(sub), labels[idx])
        _checked(loss, step)
        loss.backward()
        optimizer.step(lr)
    with no_grad():
        predicted = classifier(Taps(**{k: Tensor(v) for k, v in arrays.items()})).data.argmax(axis=1)
    return classifier, float(np.mean(predicted == labels))
