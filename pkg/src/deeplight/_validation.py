"""Input checks shared by the estimators."""

from __future__ import annotations

import numpy as np

from .exceptions import ConfigError

N_CHANNELS = 7


def check_inputs(X, *, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    """Validate an (n, s, 7, R, C) window stack and return it as float32."""
    X = np.asarray(X, dtype=np.float32)
    if X.ndim == 4:
        X = X[None]
    if X.ndim != 5 or X.shape[2] != N_CHANNELS:
        raise ConfigError(f"X must have shape (n, s, {N_CHANNELS}, R, C), got {X.shape}")
    if X.shape[0] == 0:
        raise ConfigError("X holds no windows")
    if rows is not None and X.shape[-2:] != (rows, cols):
        raise ConfigError(f"X grid {X.shape[-2:]} does not match the fitted grid {(rows, cols)}")
    if not np.isfinite(X).all():
        raise ConfigError("X contains NaN or infinite values")
    return X


def check_targets(y, n: int | None = None) -> np.ndarray:
    """Validate an (n, h, R, C) binary target stack and return it as float32."""
    y = np.asarray(y, dtype=np.float32)
    if y.ndim == 3:
        y = y[None]
    if y.ndim != 4:
        raise ConfigError(f"y must have shape (n, h, R, C), got {y.shape}")
    if n is not None and y.shape[0] != n:
        raise ConfigError(f"X has {n} windows but y has {y.shape[0]}")
    if not np.isin(y, (0.0, 1.0)).all():
        raise ConfigError("y must be binary")
    return y


def check_Xy(X, y) -> tuple[np.ndarray, np.ndarray]:
    X = check_inputs(X)
    y = check_targets(y, X.shape[0])
    if X.shape[-2:] != y.shape[-2:]:
        raise ConfigError(f"X grid {X.shape[-2:]} and y grid {y.shape[-2:]} differ")
    return X, y
