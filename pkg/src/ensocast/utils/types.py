"""Type definitions for ensocast utilities."""

from os import PathLike as _PathLike
from pathlib import Path
from typing import Union

import numpy as np
import numpy.typing as npt
from typing_extensions import TypeAlias

PathLike: TypeAlias = Union[str, _PathLike[str], Path]
"""Path-like object."""

FloatArray: TypeAlias = npt.NDArray[np.float64]
"""64-bit float array, the storage type of every tensor and field."""

BoolArray: TypeAlias = npt.NDArray[np.bool_]
"""Boolean array, used for region masks."""

__all__ = ["BoolArray", "FloatArray", "PathLike"]
