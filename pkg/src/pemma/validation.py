"""Input checks for the estimator API, built on sklearn's validation helpers."""

from __future__ import annotations

import numpy as np
from sklearn.exceptions import NotFittedError as _SklearnNotFitted
from sklearn.utils.validation import check_array, check_consistent_length, check_is_fitted

from pemma.exceptions import DataError, NotFittedError, ShapeError

MODES = ("ct", "pet", "ctpet")


def check_volumes(X, n_channels: int | None = None, side: int | None = None) -> np.ndarray:
    """Return ``X`` as float64 (n, D, D, D, C).

    A 4-D array is read as single-channel volumes.  Values must be finite.
    """
    try:
        X = check_array(X, allow_nd=True, ensure_all_finite=True, dtype=np.float64, ensure_min_features=1)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    if X.ndim == 4:
        X = X[..., None]
    if X.ndim != 5:
        raise ShapeError(f"expected volumes shaped (n, D, D, D[, C]), got {X.shape}")
    if not X.shape[1] == X.shape[2] == X.shape[3]:
        raise ShapeError(f"volumes must be cubic, got {X.shape[1:4]}")
    if side is not None and X.shape[1] != side:
        raise ShapeError(f"volumes must have side {side}, got {X.shape[1]}")
    if n_channels is not None and X.shape[-1] != n_channels:
        raise ShapeError(f"expected {n_channels} channel(s), got {X.shape[-1]}")
    return X


def check_labels(y, shape: tuple[int, ...], n_classes: int = 3) -> np.ndarray:
    """Integer label volumes matching ``shape`` (n, D, D, D)."""
    y = np.asarray(y)
    if y.shape != tuple(shape):
        raise ShapeError(f"labels shaped {y.shape}, expected {tuple(shape)}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.isfinite(y)) or np.any(y != np.rint(y)):
            raise DataError("labels must be integers")
    y = y.astype(np.int64)
    if y.min() < 0 or y.max() >= n_classes:
        raise DataError(f"labels must lie in [0, {n_classes})")
    return y


def check_survival_y(y) -> tuple[np.ndarray, np.ndarray]:
    """(times, events) from an (n, 2) array or a structured array with ``time`` and ``event`` fields."""
    y = np.asarray(y)
    if y.dtype.names:
        names = set(y.dtype.names)
        if not {"time", "event"} <= names:
            raise DataError("structured survival targets need 'time' and 'event' fields")
        times, events = y["time"], y["event"]
    else:
        try:
            y = check_array(y, ensure_all_finite=True, dtype=np.float64)
        except ValueError as exc:
            raise DataError(str(exc)) from exc
        if y.shape[1] != 2:
            raise ShapeError(f"survival targets must be (n, 2) [time, event], got {y.shape}")
        times, events = y[:, 0], y[:, 1]
    times = np.asarray(times, dtype=np.float64)
    if not np.all(np.isfinite(times)) or np.any(times < 0):
        raise DataError("survival times must be finite and nonnegative")
    ev = np.asarray(events, dtype=np.float64)
    if not np.all(np.isin(ev, (0.0, 1.0))):
        raise DataError("event indicators must be 0 or 1")
    return times, ev.astype(bool)


def check_features(X, n_features: int | None = None) -> np.ndarray:
    try:
        X = check_array(X, ensure_all_finite=True, dtype=np.float64)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    if n_features is not None and X.shape[1] != n_features:
        raise ShapeError(f"expected {n_features} features, got {X.shape[1]}")
    return X


def check_mode(mode: str, allowed=MODES) -> str:
    if mode not in allowed:
        raise ValueError(f"mode must be one of {tuple(allowed)}, got {mode!r}")
    return mode


def ensure_fitted(estimator, attributes) -> None:
    try:
        check_is_fitted(estimator, attributes)
    except _SklearnNotFitted as exc:
        raise NotFittedError(str(exc)) from exc


__all__ = ["check_volumes", "check_labels", "check_survival_y", "check_features", "check_mode",
           "ensure_fitted", "check_consistent_length"]
