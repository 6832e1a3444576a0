"""Input validation helpers in the style of ``sklearn.utils.validation``."""

import numpy as np
from sklearn.utils.validation import check_array

from .exceptions import ContractError


def check_pose_array(X, min_samples=1):
    """Return ``X`` as a finite float64 array of shape (n, 6)."""
    try:
        arr = check_array(X, dtype=np.float64, ensure_2d=True, ensure_min_samples=min_samples, copy=True)
    except ValueError as exc:
        raise ContractError(str(exc)) from None
    if arr.shape[1] != 6:
        raise ContractError(f"poses need 6 columns, got {arr.shape[1]}")
    return arr


def check_sequence_list(X, name="X"):
    """Coerce a single sequence or a list of sequences to a list of (n, 6) arrays."""
    from .trajectory import PoseSeq

    if isinstance(X, PoseSeq) or (isinstance(X, np.ndarray) and X.ndim == 2):
        X = [X]
    out = []
    for s in X:
        out.append(s.poses.copy() if isinstance(s, PoseSeq) else check_pose_array(s))
    if not out:
        raise ContractError(f"{name} is empty")
    return out


def check_positive(value, name):
    if not np.isfinite(value) or value <= 0:
        raise ContractError(f"{name} must be positive, got {value}")
    return float(value)
