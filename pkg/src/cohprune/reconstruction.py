"""Rebuild attention outputs of skipped tokens from retained sub-grid neighbours.

``reconstruct_exact`` weights neighbours by pairwise cosine similarity;
``reconstruct_sc`` replaces the pairwise term with the neighbour's own
coherence score, which is within ``||x̂_i - ĝ_i||`` of it for same-grid pairs.
"""
from __future__ import annotations

import numpy as np

from .coherence import DEFAULT_EPSILON, CoherenceMap, unit_rows
from .lattice import GridPartition, LatticeError, SubGridPartition, TokenLattice
from .selection import Selection

DEFAULT_FLOOR = 1e-6


class EmptyNeighbourhoodError(LatticeError):
    def __init__(self, token: int, subgrid: int):
        self.token = token
        self.subgrid = subgrid
        super().__init__(
            f"skipped token {token} has no retained neighbour in sub-grid {subgrid}; "
            "use stride <= sub_width or protect an anchor per sub-grid"
        )


def _scatter_retained(n: int, sel: Selection, outputs_retained) -> np.ndarray:
    y_r = np.asarray(outputs_retained, dtype=np.float64)
    if y_r.ndim != 2 or y_r.shape[0] != sel.retained.size:
        raise ValueError(
            f"expected {sel.retained.size} retained output rows, got shape {y_r.shape}"
        )
    if sel.n_tokens != n:
        raise ValueError(f"selection covers {sel.n_tokens} tokens, lattice has {n}")
    out = np.zeros((n, y_r.shape[1]), dtype=np.float64)
    out[sel.retained] = y_r
    return out


def neighbourhoods(sel: Selection, sub: SubGridPartition) -> list[tuple[int, np.ndarray]]:
    """``(skipped token, retained neighbours in its sub-grid)`` pairs."""
    retained = np.zeros(sub.n_tokens, dtype=bool)
    retained[sel.retained] = True
    plan = []
    for i in sel.skipped:
        g = int(sub.token_to_grid[i])
        cell = sub.cells[g]
        nbrs = cell[retained[cell]]
        if nbrs.size == 0:
            raise EmptyNeighbourhoodError(int(i), g)
        plan.append((int(i), nbrs))
    return plan


def _blend(weights: np.ndarray, values: np.ndarray, floor: float) -> np.ndarray:
    w = np.maximum(weights, floor)
    # dividing by the max makes equal weights exactly 1.0
    w = w / w.max()
    return (w @ values) / w.sum()


def normalized_weights(weights: np.ndarray, floor: float = DEFAULT_FLOOR) -> np.ndarray:
    w = np.maximum(np.asarray(weights, dtype=np.float64), floor)
    w = w / w.max()
    return w / w.sum()


def reconstruct_exact(
    lattice: TokenLattice,
    sel: Selection,
    outputs_retained,
    sub: SubGridPartition,
    floor: float = DEFAULT_FLOOR,
) -> np.ndarray:
    """Dense ``(N, D)`` outputs; skipped rows are cosine-weighted neighbour means."""
    out = _scatter_retained(lattice.n_tokens, sel, outputs_retained)
    unit, _ = unit_rows(lattice.tokens, DEFAULT_EPSILON)
    for i, nbrs in neighbourhoods(sel, sub):
        # row-wise products, not gemv: identical rows must give identical cosines
        cos = (unit[nbrs] * unit[i]).sum(axis=1)
        out[i] = _blend(cos, out[nbrs], floor)
    return out


def reconstruct_sc(
    coh: CoherenceMap,
    sel: Selection,
    outputs_retained,
    sub: SubGridPartition,
    floor: float = DEFAULT_FLOOR,
) -> np.ndarray:
    """Dense ``(N, D)`` outputs; skipped rows weighted by neighbour coherence."""
    out = _scatter_retained(len(coh), sel, outputs_retained)
    scores = np.asarray(coh.scores, dtype=np.float64)
    for i, nbrs in neighbourhoods(sel, sub):
        out[i] = _blend(scores[nbrs], out[nbrs], floor)
    return out


def passthrough_skip(lattice: TokenLattice, sel: Selection, outputs_retained) -> np.ndarray:
    """Zero attention output for skipped tokens (the residual carries their input)."""
    return _scatter_retained(lattice.n_tokens, sel, outputs_retained)


def approximation_residual(
    lattice: TokenLattice, part: GridPartition, i: int, j: int, epsilon: float = DEFAULT_EPSILON
) -> tuple[float, float]:
    """``(|cos(x_i, x_j) - SC(x_j)|, ||x̂_i - ĝ_i||)`` for a same-grid pair."""
    g = int(part.token_to_grid[i])
    if int(part.token_to_grid[j]) != g:
        raise LatticeError(f"tokens {i} and {j} lie in different grids")
    cell = part.cells[g]
    unit, _ = unit_rows(lattice.tokens[cell], epsilon)
    mean = unit.sum(axis=0) / cell.size
    pos = {int(t): k for k, t in enumerate(cell)}
    ui, uj = unit[pos[int(i)]], unit[pos[int(j)]]
    residual = abs(float(ui @ uj) - float(uj @ mean))
    return residual, float(np.linalg.norm(ui - mean))
