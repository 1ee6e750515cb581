from __future__ import annotations

import numbers

import numpy as np

from .lattice import TokenLattice


def check_lattices(X, *, shape: tuple[int, int, int] | None = None) -> np.ndarray:
    """Return ``X`` as a float32 ``(n_samples, H, W, D)`` array.

    Accepts a single ``(H, W, D)`` array, a batch, a :class:`TokenLattice`
    or a list of lattices.
    """
    if isinstance(X, TokenLattice):
        X = X.data[None]
    elif isinstance(X, (list, tuple)) and X and isinstance(X[0], TokenLattice):
        X = np.stack([lat.data for lat in X])
    X = np.asarray(X)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4:
        raise ValueError(
            f"expected lattices of shape (H, W, D) or (n_samples, H, W, D), got {X.ndim}-d input"
        )
    if X.dtype.kind not in "fiu":
        raise TypeError(f"lattice values must be numeric, got dtype {X.dtype}")
    if min(X.shape) < 1:
        raise ValueError(f"empty lattice batch with shape {X.shape}")
    X = X.astype(np.float32, copy=False)
    if not np.isfinite(X).all():
        raise ValueError("lattice contains NaN or infinity")
    if shape is not None and tuple(X.shape[1:]) != tuple(shape):
        raise ValueError(f"estimator was fitted on lattices of shape {tuple(shape)}, got {tuple(X.shape[1:])}")
    return X


def check_block_lattices(X) -> np.ndarray:
    """Per-block inputs as ``(n_samples, n_blocks, H, W, D)``."""
    X = np.asarray(X)
    if X.ndim == 4:
        X = X[None]
    if X.ndim != 5:
        raise ValueError(f"expected (n_samples, n_blocks, H, W, D) input, got {X.ndim}-d")
    X = X.astype(np.float32, copy=False)
    if not np.isfinite(X).all():
        raise ValueError("lattice contains NaN or infinity")
    return X


def check_positive_int(name: str, value) -> int:
    if isinstance(value, bool) or not isinstance(value, numbers.Integral) or value < 1:
        raise ValueError(f"{name} must be a positive integer, got {value!r}")
    return int(value)


def check_ratio(name: str, value, *, closed_low: bool = True, closed_high: bool = True) -> float:
    if not isinstance(value, numbers.Real):
        raise TypeError(f"{name} must be a real number, got {type(value).__name__}")
    lo_ok = value >= 0 if closed_low else value > 0
    hi_ok = value <= 1 if closed_high else value < 1
    if not (lo_ok and hi_ok):
        raise ValueError(f"{name} must lie in {'[' if closed_low else '('}0, 1{']' if closed_high else ')'}, got {value}")
    return float(value)
