"""Seeded synthetic lattices with controllable local redundancy."""
from __future__ import annotations

import numpy as np

from .lattice import TokenLattice, new_lattice, partition

STRUCTURES = ("iid-gaussian", "grid-coherent", "mixed")


def iid_lattice(height: int, width: int, dim: int, seed: int = 0) -> TokenLattice:
    rng = np.random.default_rng(seed)
    return new_lattice(height, width, dim, rng.standard_normal((height, width, dim)))


def grid_coherent_lattice(
    height: int, width: int, dim: int, grid_width: int, sigma: float, seed: int = 0
) -> TokenLattice:
    """One Gaussian prototype per grid plus isotropic noise of std ``sigma``.

    ``sigma = 0`` makes every grid constant.
    """
    rng = np.random.default_rng(seed)
    part = partition((height, width), grid_width)
    protos = rng.standard_normal((part.n_grids, dim))
    noise = rng.standard_normal((height * width, dim))
    tokens = protos[part.token_to_grid] + sigma * noise
    return new_lattice(height, width, dim, tokens)


def mixed_lattice(
    height: int,
    width: int,
    dim: int,
    grid_width: int,
    sigma: float,
    seed: int = 0,
    iid_fraction: float = 0.25,
) -> TokenLattice:
    """Grid-coherent lattice where a fraction of grids hold i.i.d. tokens instead."""
    rng = np.random.default_rng(seed)
    part = partition((height, width), grid_width)
    protos = rng.standard_normal((part.n_grids, dim))
    noise = rng.standard_normal((height * width, dim))
    n_iid = int(round(iid_fraction * part.n_grids))
    noisy = np.zeros(part.n_grids, dtype=bool)
    noisy[rng.permutation(part.n_grids)[:n_iid]] = True
    tokens = protos[part.token_to_grid] + sigma * noise
    iid_tokens = noisy[part.token_to_grid]
    tokens[iid_tokens] = noise[iid_tokens]
    return new_lattice(height, width, dim, tokens)


def redundancy_lattice(
    height: int, width: int, dim: int, grid_width: int, rho: float, seed: int = 0
) -> TokenLattice:
    """Grid-coherent lattice whose large-grid coherence is about ``rho``.

    With unit-scale prototypes and noise of variance ``(1 - rho) / rho`` the
    expected cosine between two same-grid tokens is ``rho``.
    """
    if not 0.0 < rho <= 1.0:
        raise ValueError(f"rho must lie in (0, 1], got {rho}")
    return grid_coherent_lattice(height, width, dim, grid_width, np.sqrt((1.0 - rho) / rho), seed)


def make_lattice(
    structure: str,
    height: int,
    width: int,
    dim: int,
    seed: int = 0,
    grid_width: int = 8,
    sigma: float = 0.1,
) -> TokenLattice:
    if structure == "iid-gaussian":
        return iid_lattice(height, width, dim, seed)
    if structure == "grid-coherent":
        return grid_coherent_lattice(height, width, dim, grid_width, sigma, seed)
    if structure == "mixed":
        return mixed_lattice(height, width, dim, grid_width, sigma, seed)
    raise ValueError(f"unknown structure {structure!r}; expected one of {STRUCTURES}")
