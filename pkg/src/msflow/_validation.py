"""Input validation helpers shared across modules."""

import numbers

import numpy as np


def check_cloud(cloud, *, name="cloud", dtype=np.float64, batched=False):
    """Return ``cloud`` as a finite float array of shape (N, 3).

    With ``batched=True`` a leading batch axis is accepted, i.e. shapes
    (N, 3) or (B, N, 3) are both valid and the array is returned unchanged
    in rank.
    """
    arr = np.asarray(cloud, dtype=dtype)
    ok_ndim = (2, 3) if batched else (2,)
    if arr.ndim not in ok_ndim or arr.shape[-1] != 3:
        raise ValueError(f"{name} must have shape (N, 3), got {arr.shape}")
    if arr.shape[-2] == 0:
        raise ValueError(f"{name} is empty")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite coordinates")
    return arr


def check_clouds(clouds, *, name="clouds", dtype=np.float64):
    """Return a stack of equally sized clouds as an array of shape (B, N, 3)."""
    arr = np.asarray(clouds, dtype=dtype)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[-1] != 3:
        raise ValueError(f"{name} must have shape (n_clouds, N, 3), got {arr.shape}")
    if arr.shape[0] == 0 or arr.shape[1] == 0:
        raise ValueError(f"{name} is empty")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite coordinates")
    return arr


def check_positive_int(value, name, minimum=1):
    if isinstance(value, bool) or not isinstance(value, numbers.Integral):
        raise ValueError(f"{name} must be an integer, got {value!r}")
    if value < minimum:
        raise ValueError(f"{name} must be >= {minimum}, got {value}")
    return int(value)


def as_generator(seed):
    """Turn ``seed`` (None, int, SeedSequence or Generator) into a Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)
