"""Input checks shared by the estimator wrappers."""
from __future__ import annotations

import numpy as np
from sklearn.exceptions import NotFittedError

from .plants import Dataset


def check_array_2d(x, width=None, name="X"):
    """Float64 array of shape (rows, width); 1-D input is one row."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    if width is not None and arr.shape[1] != width:
        raise ValueError(f"{name} has {arr.shape[1]} columns, expected {width}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or Inf")
    return arr


def check_positive(value, name):
    if not (np.isscalar(value) and value > 0):
        raise ValueError(f"{name} must be a positive number, got {value!r}")
    return value


def check_dataset(ds, min_steps=2):
    if not isinstance(ds, Dataset):
        raise TypeError(f"expected a Dataset, got {type(ds).__name__}")
    if ds.T < min_steps:
        raise ValueError(f"trajectories have {ds.T} steps, need at least {min_steps}")
    if not (np.all(np.isfinite(ds.states)) and np.all(np.isfinite(ds.actions))):
        raise ValueError("dataset contains NaN or Inf")
    return ds


def check_fitted(est, attr="model_"):
    if getattr(est, attr, None) is None:
        raise NotFittedError(f"{type(est).__name__} is not fitted yet; call fit first")
    return getattr(est, attr)
