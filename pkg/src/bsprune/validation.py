"""Input checks shared by the estimator and the CLI."""
from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array, column_or_1d

from .errors import ConfigError, ShapeError


def check_images(X, input_shape=None):
    """Coerce ``X`` to a float32 NHWC batch.

    Accepts (n, h, w) grayscale or (n, h, w, c). When ``input_shape`` is
    given the trailing extents must match it.
    """
    X = check_array(X, ensure_2d=False, allow_nd=True, dtype=np.float32)
    if X.ndim == 3:
        X = X[..., None]
    if X.ndim != 4:
        raise ShapeError(f"expected images of shape (n, h, w[, c]), got {X.shape}")
    if input_shape is not None and X.shape[1:] != tuple(input_shape):
        raise ShapeError(f"images have extent {X.shape[1:]}, model expects {tuple(input_shape)}")
    return X


def check_labels(y, n):
    y = column_or_1d(y, warn=True)
    if len(y) != n:
        raise ShapeError(f"{n} images but {len(y)} labels")
    return y


def parse_extent(text):
    """Parse ``HxWxC`` into a tuple of three positive ints."""
    parts = text.lower().split("x")
    try:
        extent = tuple(int(p) for p in parts)
    except ValueError:
        raise ConfigError(f"bad extent {text!r}; expected HxWxC such as 128x128x3") from None
    if len(extent) != 3 or min(extent) <= 0:
        raise ConfigError(f"bad extent {text!r}; expected three positive integers HxWxC")
    return extent


def check_fraction(value, name):
    if not 0 <= value < 1:
        raise ConfigError(f"{name} must be in [0, 1), got {value}")
    return float(value)
