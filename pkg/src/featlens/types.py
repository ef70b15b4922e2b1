__all__ = [
    "PathType",
    "ArrayLike",
    "HW",
    "NamedTensors",
]

import sys
from os import PathLike
from typing import Dict, Tuple, Union

import numpy as np


if sys.version_info >= (3, 9):
    PathType = Union[str, PathLike[str]]
else:
    PathType = Union[str, PathLike]

ArrayLike = Union[np.ndarray, float, int, list, tuple]

HW = Tuple[int, int]

NamedTensors = Dict[str, np.ndarray]
