"""Spatial coherence: each token's mean cosine similarity to its grid.

Two routes are provided. :func:`coherence_fast` uses the grid-mean identity
``SC(x_i) = x̂_i · ĝ_i`` and costs O(N·D) for any grid width.
:func:`coherence_oracle` evaluates the pairwise cosine average directly and is
kept as the ground truth for tests.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .lattice import GridPartition, LatticeError, TokenLattice, new_lattice, write_tensor

DEFAULT_EPSILON = 1e-12


@dataclass(frozen=True)
class CoherenceMap:
    scores: np.ndarray = field(repr=False)
    grid_width: int
    degenerate: np.ndarray | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return self.scores.size

    def to_dict(self) -> dict:
        return {"grid_width": int(self.grid_width), "scores": [float(s) for s in self.scores]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "CoherenceMap":
        obj = json.loads(text)
        return cls(np.asarray(obj["scores"], dtype=np.float64), int(obj["grid_width"]))

    def to_lattice(self, height: int, width: int) -> TokenLattice:
        """Binary form: a ``D = 1`` lattice holding the scores."""
        return new_lattice(height, width, 1, self.scores)

    def write_binary(self, fh, height: int, width: int) -> None:
        write_tensor(fh, self.scores.reshape(height, width, 1))


@dataclass(frozen=True)
class GridMeans:
    means: np.ndarray = field(repr=False)
    counts: np.ndarray


def _check(lattice: TokenLattice, part: GridPartition) -> None:
    if (lattice.height, lattice.width) != (part.height, part.width):
        raise LatticeError(
            f"partition is for a {part.height}x{part.width} lattice, "
            f"got {lattice.height}x{lattice.width}"
        )


def unit_rows(tokens: np.ndarray, epsilon: float = DEFAULT_EPSILON) -> tuple[np.ndarray, np.ndarray]:
    """Row-normalise ``tokens`` in float64; rows with norm < epsilon become zero."""
    x = np.asarray(tokens)
    if x.dtype not in (np.float32, np.float64):
        x = x.astype(np.float64)
    norms = np.sqrt(np.einsum("nd,nd->n", x, x, dtype=np.float64))
    degenerate = norms < epsilon
    inv = 1.0 / np.where(degenerate, 1.0, norms)
    inv[degenerate] = 0.0
    return x * inv[:, None], degenerate


def normalize_tokens(
    lattice: TokenLattice, epsilon: float = DEFAULT_EPSILON
) -> tuple[TokenLattice, np.ndarray]:
    """Scale every token to unit L2 norm.

    Returns the normalised lattice and a boolean mask (length N) flagging
    tokens whose norm fell below ``epsilon``; those map to the zero vector.
    """
    if not epsilon > 0:
        raise ValueError(f"epsilon must be > 0, got {epsilon!r}")
    unit, degenerate = unit_rows(lattice.tokens, epsilon)
    return new_lattice(lattice.height, lattice.width, lattice.dim, unit), degenerate


def _strip_sums(a: np.ndarray, w: int, axis: int) -> np.ndarray:
    """Sum consecutive runs of ``w`` slices along ``axis``; the last run may be short."""
    a = np.moveaxis(a, axis, 0)
    n = a.shape[0]
    full = (n // w) * w
    parts = [a[:full].reshape(n // w, w, *a.shape[1:]).sum(axis=1)]
    if full < n:
        parts.append(a[full:].sum(axis=0, keepdims=True))
    return np.moveaxis(np.concatenate(parts), 0, axis)


def _grid_sums(unit: np.ndarray, part: GridPartition) -> np.ndarray:
    # rows of each grid first, then columns: a fixed order independent of threading
    w = part.grid_width
    x = unit.reshape(part.height, part.width, -1)
    sums = _strip_sums(_strip_sums(x, w, 0), w, 1)
    return sums.reshape(part.n_grids, -1)


def _dot_with_grid(unit: np.ndarray, per_grid: np.ndarray, part: GridPartition) -> np.ndarray:
    """``unit_i · per_grid[grid(i)]`` for every token, one row strip at a time."""
    w = part.grid_width
    x = unit.reshape(part.height, part.width, -1)
    g = per_grid.reshape(part.grid_rows, part.grid_cols, -1)
    cols = np.repeat(g, w, axis=1)[:, : part.width]
    out = np.empty((part.height, part.width))
    for a in range(part.grid_rows):
        rows = slice(a * w, (a + 1) * w)
        out[rows] = np.einsum("ijd,jd->ij", x[rows], cols[a])
    return out.reshape(-1)


def grid_means(normalized: TokenLattice, part: GridPartition) -> GridMeans:
    _check(normalized, part)
    unit = np.asarray(normalized.tokens, dtype=np.float64)
    counts = part.sizes()
    return GridMeans(_grid_sums(unit, part) / counts[:, None], counts)


def coherence_fast(
    lattice: TokenLattice, part: GridPartition, epsilon: float = DEFAULT_EPSILON
) -> CoherenceMap:
    _check(lattice, part)
    unit, degenerate = unit_rows(lattice.tokens, epsilon)
    means = _grid_sums(unit, part) / part.sizes()[:, None]
    scores = _dot_with_grid(unit, means, part)
    # a zero embedding carries no signal: treat it as fully redundant
    scores[degenerate] = 1.0
    return CoherenceMap(scores, part.grid_width, degenerate)


def coherence_oracle(
    lattice: TokenLattice, part: GridPartition, epsilon: float = DEFAULT_EPSILON
) -> CoherenceMap:
    _check(lattice, part)
    x = np.asarray(lattice.tokens, dtype=np.float64)
    norms = np.sqrt((x * x).sum(axis=1))
    degenerate = norms < epsilon
    scores = np.empty(lattice.n_tokens, dtype=np.float64)
    for cell in part.cells:
        xs, ns = x[cell], norms[cell]
        dots = xs @ xs.T
        denom = np.outer(ns, ns)
        cos = np.divide(dots, denom, out=np.zeros_like(dots), where=denom >= epsilon * epsilon)
        zero = degenerate[cell]
        cos[zero, :] = 0.0
        cos[:, zero] = 0.0
        scores[cell] = cos.sum(axis=1) / cell.size
    scores[degenerate] = 1.0
    return CoherenceMap(scores, part.grid_width, degenerate)


def grid_residuals(lattice: TokenLattice, part: GridPartition, epsilon: float = DEFAULT_EPSILON) -> np.ndarray:
    """Per-token distance ``||x̂_i - ĝ_i||`` between a token and its grid mean."""
    unit, _ = unit_rows(lattice.tokens, epsilon)
    means = _grid_sums(unit, part) / part.sizes()[:, None]
    return np.linalg.norm(unit - means[part.token_to_grid], axis=1)
