"""Input validation helpers used at public entry points.

All helpers return float64 numpy arrays so downstream numerics run in a
single, predictable precision.
"""

import numpy as np

from .errors import ShapeError


def as_vector(x, dim: int | None = None, name: str = "x") -> np.ndarray:
    """Coerce to a 1-D float64 array, optionally checking its length."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise ShapeError(f"{name} must be 1-D, got shape {arr.shape}")
    if dim is not None and arr.shape[0] != dim:
        raise ShapeError(f"{name} must have length {dim}, got {arr.shape[0]}")
    return arr


def as_matrix(x, shape: tuple[int | None, int | None] = (None, None), name: str = "x") -> np.ndarray:
    """Coerce to a 2-D float64 array, optionally checking each extent."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    for axis, want in enumerate(shape):
        if want is not None and arr.shape[axis] != want:
            raise ShapeError(f"{name} must have shape {shape}, got {arr.shape}")
    return arr


def check_finite(arr: np.ndarray, name: str = "array") -> np.ndarray:
    """Reject arrays containing NaN or infinity."""
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def check_positive(value: float, name: str = "value") -> float:
    value = float(value)
    if not np.isfinite(value) or value <= 0:
        raise ValueError(f"{name} must be positive and finite, got {value}")
    return value


def check_in_range(value: float, lo: float, hi: float, name: str = "value",
                   inclusive: tuple[bool, bool] = (True, True)) -> float:
    value = float(value)
    lo_ok = value >= lo if inclusive[0] else value > lo
    hi_ok = value <= hi if inclusive[1] else value < hi
    if not (np.isfinite(value) and lo_ok and hi_ok):
        lo_b = "[" if inclusive[0] else "("
        hi_b = "]" if inclusive[1] else ")"
        raise ValueError(f"{name} must lie in {lo_b}{lo}, {hi}{hi_b}, got {value}")
    return value


def ensure_rng(seed_or_rng) -> np.random.Generator:
    """Accept an integer seed, a SeedSequence, or an existing Generator."""
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return np.random.default_rng(seed_or_rng)
