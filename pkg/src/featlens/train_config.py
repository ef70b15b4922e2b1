from __future__ import annotations

__all__ = [
    "SelectMode",
    "TrainConfig",
    "AugPolicy",
    "EvalSpec",
    "ExperimentConfig",
]

import math
from dataclasses import asdict, dataclass, field, fields, replace
from enum import auto
from typing import Dict, Mapping, Optional, Tuple, Union

import numpy as np
from mergedeep import merge as merge_dict, Strategy

from ._constants import MNIST_ROT_FILTER
from ._io import load_config_file
from ._str_enum import AutoStrEnum
from .host import HostConfig
from .lenses import LensConfig
from .losses import LossConfig
from .transforms import TransformSpec
from .types import PathType


class SelectMode(AutoStrEnum):
    # lens bin from the transform actually applied
    TRUE = auto()
    # lens bin from the rotation classifier
    PREDICTED = auto()
    # plain frozen host, no lens
    NONE = auto()


@dataclass
class TrainConfig:
    epochs: float = 1
    batch_size: int = 64
    initial_lr: float = 0.01
    decay: float = 0.5
    # in epochs; fractions decay several times per epoch
    decay_period: float = 1.0
    momentum: float = 0.9
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    log_every: int = 50
    # hard cap on optimizer steps, None for no cap
    max_steps: Optional[int] = None

    def __setattr__(self, name: str, value: object):
        if name == "loss":
            if isinstance(value, Mapping):
                value = LossConfig.from_dict(value)
            elif not isinstance(value, LossConfig):
                raise ValueError(f"unsupported loss value: {value}")
        elif name in ("initial_lr", "decay_period"):
            if float(value) <= 0:  # type: ignore
                raise ValueError(f"{name} must be positive, got {value}")
        elif name == "decay":
            if not 0 < float(value) <= 1:  # type: ignore
                raise ValueError(f"decay must be in (0, 1], got {value}")
        elif name in ("batch_size", "log_every"):
            if int(value) < 1:  # type: ignore
                raise ValueError(f"{name} must be >= 1, got {value}")
        elif name == "epochs":
            if float(value) < 0:  # type: ignore
                raise ValueError(f"epochs must be >= 0, got {value}")
        super().__setattr__(name, value)

    def lr_at(self, epoch: float) -> float:
        if epoch < 0:
            raise ValueError(f"epoch must be >= 0, got {epoch}")
        return self.initial_lr * self.decay ** math.floor(epoch / self.decay_period)

    def total_steps(self, dataset_size: int) -> int:
        steps = math.ceil(self.epochs * math.ceil(dataset_size / self.batch_size))
        if self.max_steps is not None:
            steps = min(steps, self.max_steps)
        return steps

    @classmethod
    def from_dict(cls, obj: Mapping) -> TrainConfig:
        return cls(**{f.name: obj[f.name] for f in fields(cls) if f.name in obj})

    def to_dict(self) -> dict:
        obj = asdict(self)
        obj["loss"] = self.loss.to_dict()
        return obj

    def merge(self, other: Union[TrainConfig, Mapping]) -> TrainConfig:
        obj = self.to_dict()
        update = other.to_dict() if isinstance(other, TrainConfig) else other
        merge_dict(obj, update, strategy=Strategy.REPLACE)
        return TrainConfig.from_dict(obj)


AUG_CHOICES = ("none", "rot90", "rot180", "rot270", "scale2", "scale3")


@dataclass
class AugPolicy:
    probabilities: Dict[str, float] = field(default_factory=lambda: {"none": 1.0})

    def __post_init__(self):
        unknown = set(self.probabilities) - set(AUG_CHOICES)
        if unknown:
            raise ValueError(f"unsupported augmentations {sorted(unknown)}, choose from {AUG_CHOICES}")
        if any(p < 0 for p in self.probabilities.values()):
            raise ValueError(f"negative probability in {self.probabilities}")
        total = math.fsum(self.probabilities.values())
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"augmentation probabilities sum to {total}, expected 1")

    @classmethod
    def small_dataset(cls) -> AugPolicy:
        return cls({"none": 0.4, "rot90": 0.2, "rot180": 0.2, "rot270": 0.2})

    @classmethod
    def large_dataset(cls) -> AugPolicy:
        return cls(
            {
                "none": 0.5,
                "rot90": 0.1,
                "rot180": 0.1,
                "rot270": 0.1,
                "scale2": 0.1,
                "scale3": 0.1,
            }
        )

    @property
    def choices(self) -> Tuple[str, ...]:
        return tuple(c for c in AUG_CHOICES if c in self.probabilities)

    def sample(self, rng: np.random.Generator) -> Optional[TransformSpec]:
        """One draw; None stands for the untransformed image."""
        choices = self.choices
        p = np.array([self.probabilities[c] for c in choices])
        choice = choices[rng.choice(len(choices), p=p / p.sum())]
        return None if choice == "none" else TransformSpec.parse(choice)

    @classmethod
    def from_dict(cls, obj: Mapping) -> AugPolicy:
        if "preset" in obj:
            presets = {"small": cls.small_dataset, "large": cls.large_dataset}
            if obj["preset"] not in presets:
                raise ValueError(f"unsupported preset {obj['preset']!r}, choose from {list(presets)}")
            return presets[obj["preset"]]()
        return cls({str(k): float(v) for k, v in obj.get("probabilities", obj).items()})

    def to_dict(self) -> dict:
        return {"probabilities": dict(self.probabilities)}


@dataclass
class EvalSpec:
    # explicit transforms applied to every image, e.g. ("rot90", "rot180", "rot270");
    # empty: images are used as stored, with their recorded transforms
    transforms: Tuple[str, ...] = ()
    # inclusive angle window on the recorded rotation, None keeps everything
    angle_filter: Optional[Tuple[float, float]] = None
    select: SelectMode = SelectMode.TRUE
    batch_size: int = 256

    def __setattr__(self, name: str, value: object):
        if name == "select":
            value = SelectMode.parse(value)
        elif name == "transforms":
            value = tuple(str(TransformSpec.parse(t)) for t in value)  # type: ignore
        elif name == "angle_filter" and value is not None:
            low, high = (float(v) for v in value)  # type: ignore
            if not (0 <= low < 360 and 0 <= high < 360):
                raise ValueError(f"angle filter bounds must be within [0, 360), got {value}")
            value = (low, high)
        super().__setattr__(name, value)

    @classmethod
    def mnist_rot(cls, select: SelectMode = SelectMode.TRUE) -> EvalSpec:
        return cls(angle_filter=MNIST_ROT_FILTER, select=select)

    @classmethod
    def exact_rotations(cls, select: SelectMode = SelectMode.TRUE) -> EvalSpec:
        """The "Rot" protocol: every image under 90, 180 and 270 degrees."""
        return cls(transforms=("rot90", "rot180", "rot270"), select=select)

    @property
    def specs(self) -> Tuple[TransformSpec, ...]:
        return tuple(TransformSpec.parse(t) for t in self.transforms)

    def keeps(self, angles: np.ndarray) -> np.ndarray:
        """Boolean mask of the angles inside the filter window."""
        angles = np.mod(np.asarray(angles, dtype=np.float64), 360.0)
        if self.angle_filter is None:
            return np.ones(angles.shape, dtype=bool)
        low, high = self.angle_filter
        if low <= high:
            return (angles >= low) & (angles <= high)
        # window wrapping through 0
        return (angles >= low) | (angles <= high)

    @classmethod
    def from_dict(cls, obj: Mapping) -> EvalSpec:
        return cls(**{f.name: obj[f.name] for f in fields(cls) if f.name in obj})

    def to_dict(self) -> dict:
        return {
            "transforms": list(self.transforms),
            "angle_filter": None if self.angle_filter is None else list(self.angle_filter),
            "select": str(self.select),
            "batch_size": self.batch_size,
        }


@dataclass
class ExperimentConfig:
    """All settings of one run, loadable from a single config file."""

    host: HostConfig = field(default_factory=HostConfig)
    lens: LensConfig = field(default_factory=LensConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    aug: AugPolicy = field(default_factory=AugPolicy.small_dataset)
    eval: EvalSpec = field(default_factory=EvalSpec)

    _SECTIONS = {
        "host": HostConfig,
        "lens": LensConfig,
        "train": TrainConfig,
        "aug": AugPolicy,
        "eval": EvalSpec,
    }

    @classmethod
    def from_dict(cls, obj: Mapping) -> ExperimentConfig:
        unknown = set(obj) - set(cls._SECTIONS)
        if unknown:
            raise ValueError(f"unsupported config sections {sorted(unknown)}")
        return cls(**{name: kind.from_dict(obj[name]) for name, kind in cls._SECTIONS.items() if name in obj})

    @classmethod
    def from_file(cls, path: PathType) -> ExperimentConfig:
        return cls.from_dict(load_config_file(path))

    def to_dict(self) -> dict:
        return {name: getattr(self, name).to_dict() for name in self._SECTIONS}

    def merge(self, other: Mapping) -> ExperimentConfig:
        obj = self.to_dict()
        if "aug" in other:
            # a policy replaces the whole table
            obj.pop("aug")
        merge_dict(obj, other, strategy=Strategy.REPLACE)
        return ExperimentConfig.from_dict(obj)

    def with_seed(self, seed: int) -> ExperimentConfig:
        return replace(
            self,
            host=replace(self.host, seed=seed),
            lens=replace(self.lens, seed=seed),
            train=replace(self.train, seed=seed),
        )
