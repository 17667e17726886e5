"""Input checks shared by the estimators."""

from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array

from .exceptions import DimensionError, WindowTooShortError


def check_series(X, *, allow_nan: bool = False, n_segments: int | None = None, name: str = "X") -> np.ndarray:
    """A (T, M) float64 time-by-segment matrix; a trailing channel axis of 1 is dropped."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 3 and X.shape[-1] == 1:
        X = X[..., 0]
    X = check_array(X, dtype=np.float64, ensure_all_finite="allow-nan" if allow_nan else True,
                    input_name=name)
    if n_segments is not None and X.shape[1] != n_segments:
        raise DimensionError(f"{name} has {X.shape[1]} segments, expected {n_segments}")
    return X


def check_windows(X, n_history: int, n_segments: int, *, allow_nan: bool = False) -> tuple[np.ndarray, bool]:
    """Return the last ``n_history`` steps as a (B, N, M) array and whether the input was batched.

    Accepts (T, M), (B, T, M) or either with a trailing channel axis of 1.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim >= 3 and X.shape[-1] == 1 and X.shape[-2] == n_segments:
        X = X[..., 0]
    if X.ndim not in (2, 3):
        raise DimensionError(f"expected (T, M) or (B, T, M) history, got shape {X.shape}")
    batched = X.ndim == 3
    if not batched:
        X = X[None]
    if X.shape[2] != n_segments:
        raise DimensionError(f"history has {X.shape[2]} segments, expected {n_segments}")
    if X.shape[1] < n_history:
        raise WindowTooShortError(f"history has {X.shape[1]} steps, at least {n_history} are required")
    X = X[:, -n_history:]
    if not allow_nan and not np.all(np.isfinite(X)):
        raise ValueError("history contains NaN or infinite values")
    return X, batched
