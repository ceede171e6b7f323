"""Input checks for sequence batches and label vectors."""
from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.utils.validation import check_array, check_consistent_length, column_or_1d

from stam.errors import DimensionError


def check_sequences(X, n_frames: Optional[int] = None,
                    frame_size: Optional[tuple[int, int]] = None) -> np.ndarray:
    """Validate a batch of frame sequences and return it as float64 ``[B, n, H, W, 1]``.

    ``[B, n, H, W]`` input gets a trailing channel axis. Non-finite values,
    empty batches and mismatched ``n_frames`` / ``frame_size`` are rejected.
    """
    X = check_array(X, dtype=np.float64, allow_nd=True, ensure_2d=False, ensure_all_finite=True)
    if X.ndim == 4:
        X = X[..., None]
    if X.ndim != 5 or X.shape[-1] != 1:
        raise DimensionError(f"expected sequences shaped [B, n, H, W] or [B, n, H, W, 1], got {X.shape}")
    if n_frames is not None and X.shape[1] != n_frames:
        raise DimensionError(f"expected {n_frames} frames per sequence, got {X.shape[1]}")
    if frame_size is not None and tuple(X.shape[2:4]) != tuple(frame_size):
        raise DimensionError(f"expected {tuple(frame_size)} frames, got {tuple(X.shape[2:4])}")
    return X


def check_labels(y, n_samples: int) -> np.ndarray:
    y = column_or_1d(y, warn=True)
    check_consistent_length(np.empty(n_samples), y)
    return y
