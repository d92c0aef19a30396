"""Input validation helpers in the spirit of ``sklearn.utils.validation``."""
from __future__ import annotations

import numpy as np

from .exceptions import ParameterError, ShapeError
from .tensor import check_finite


def check_images(X, input_shape=None, value_range=None, name="X") -> np.ndarray:
    """Validate a batch of NCHW images and return it as C-contiguous float32.

    Parameters
    ----------
    X : array-like of shape (n_samples, channels, height, width)
        A single ``(C, H, W)`` image is promoted to a batch of one.
    input_shape : tuple (C, H, W), optional
        Required per-sample shape.
    value_range : (low, high), optional
        Inclusive bounds every value must respect.
    """
    arr = np.ascontiguousarray(X, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise ShapeError(f"{name} must have shape (n_samples, channels, height, width), got {arr.shape}")
    if arr.shape[0] == 0:
        raise ShapeError(f"{name} holds no samples")
    if input_shape is not None and arr.shape[1:] != tuple(input_shape):
        raise ShapeError(f"{name} samples have shape {arr.shape[1:]}, expected {tuple(input_shape)}")
    check_finite(arr, name)
    if value_range is not None:
        lo, hi = value_range
        if arr.min() < lo or arr.max() > hi:
            raise ParameterError(f"{name} values must lie in [{lo}, {hi}]")
    return arr


def check_labels(y, n_samples: int, name="y") -> np.ndarray:
    arr = np.asarray(y)
    if arr.ndim != 1 or arr.shape[0] != n_samples:
        raise ShapeError(f"{name} must be 1-D with {n_samples} entries, got shape {arr.shape}")
    return arr


def check_is_fitted(estimator, attribute: str) -> None:
    if not hasattr(estimator, attribute):
        from sklearn.exceptions import NotFittedError

        raise NotFittedError(
            f"This {type(estimator).__name__} instance is not fitted yet; call 'fit' first."
        )
