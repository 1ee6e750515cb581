"""Top-K token skipping by coherence, with m-stride protected positions."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .coherence import CoherenceMap
from .lattice import SubGridPartition


class BudgetError(ValueError):
    """More tokens requested for skipping than there are unprotected positions."""

    def __init__(self, requested: int, available: int):
        self.requested = requested
        self.available = available
        self.shortfall = requested - available
        super().__init__(
            f"cannot skip K={requested} tokens: only {available} unprotected "
            f"positions (short by {self.shortfall})"
        )


@dataclass(frozen=True)
class ProtectionPattern:
    stride: int
    block_index: int = 0

    def __post_init__(self):
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")

    def mask(self, height: int, width: int) -> np.ndarray:
        return protected_mask(height, width, self.block_index, self.stride)


@dataclass(frozen=True)
class Selection:
    retained: np.ndarray = field(repr=False)
    skipped: np.ndarray = field(repr=False)
    protected: np.ndarray = field(repr=False)

    @property
    def K(self) -> int:
        return int(self.skipped.size)

    @property
    def n_tokens(self) -> int:
        return int(self.retained.size + self.skipped.size)

    def to_dict(self) -> dict:
        return {
            "K": self.K,
            "skipped": self.skipped.tolist(),
            "retained": self.retained.tolist(),
            "protected": self.protected.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "Selection":
        obj = json.loads(text)
        sel = cls(*(np.asarray(obj[k], dtype=np.int64) for k in ("retained", "skipped", "protected")))
        if sel.K != obj["K"]:
            raise ValueError(f"K={obj['K']} disagrees with {sel.K} skipped indices")
        return sel


def _as_index_set(indices, n: int | None = None) -> np.ndarray:
    if isinstance(indices, (set, frozenset)):
        indices = sorted(indices)
    idx = np.unique(np.asarray(indices, dtype=np.int64).reshape(-1))
    if n is not None and idx.size and (idx[0] < 0 or idx[-1] >= n):
        raise IndexError(f"protected index out of range [0, {n})")
    return idx


def _build(n: int, skipped: np.ndarray, protected: np.ndarray) -> Selection:
    skipped = np.sort(skipped.astype(np.int64))
    keep = np.ones(n, dtype=bool)
    keep[skipped] = False
    return Selection(np.flatnonzero(keep), skipped, protected)


def protected_mask(height: int, width: int, block_index: int, stride: int) -> np.ndarray:
    """Linear indices of positions with ``(i + j - block_index) % stride == 0``."""
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    i, j = np.divmod(np.arange(height * width, dtype=np.int64), width)
    return np.flatnonzero((i + j - block_index) % stride == 0)


def anchor_mask(
    sub: SubGridPartition, block_index: int, stride: int
) -> np.ndarray:
    """Stride-protected positions plus one fallback anchor per uncovered sub-grid.

    Interior and edge strips of a ``w_s``-tiling always meet the stride pattern
    when ``stride <= w_s``; a ragged corner sub-grid of ``a x b`` tokens with
    ``a + b - 1 < stride`` can miss it. Such sub-grids get their first token
    protected so reconstruction always has an anchor.
    """
    base = protected_mask(sub.height, sub.width, block_index, stride)
    missing = uncovered_subgrids(sub, base)
    if not missing:
        return base
    extra = [sub.cells[g][0] for g in missing]
    return np.union1d(base, np.asarray(extra, dtype=np.int64))


def uncovered_subgrids(sub: SubGridPartition, protected) -> list[int]:
    """Sub-grid ids that contain no protected token."""
    flag = np.zeros(sub.n_tokens, dtype=np.int64)
    flag[np.asarray(protected, dtype=np.int64)] = 1
    order, offsets = sub.order()
    counts = np.add.reduceat(flag[order], offsets)
    return np.flatnonzero(counts == 0).tolist()


def select_tokens(coh: CoherenceMap, K: int, protected=()) -> Selection:
    """Skip the ``K`` highest-coherence unprotected tokens.

    Ties go to the lower linear index. Protected tokens are excluded outright,
    which matches pushing their score below every achievable coherence.
    """
    scores = np.asarray(coh.scores, dtype=np.float64)
    n = scores.size
    protected = _as_index_set(protected, n)
    available = n - protected.size
    if K < 0:
        raise ValueError(f"K must be non-negative, got {K}")
    if K > available:
        raise BudgetError(int(K), int(available))
    candidates = np.ones(n, dtype=bool)
    candidates[protected] = False
    cand = np.flatnonzero(candidates)
    # lexsort: last key is primary -> descending score, then ascending index
    order = cand[np.lexsort((cand, -scores[cand]))]
    return _build(n, order[: int(K)], protected)


def select_random(N: int, K: int, protected=(), seed: int = 0) -> Selection:
    protected = _as_index_set(protected, N)
    available = N - protected.size
    if K < 0:
        raise ValueError(f"K must be non-negative, got {K}")
    if K > available:
        raise BudgetError(int(K), int(available))
    candidates = np.ones(N, dtype=bool)
    candidates[protected] = False
    rng = np.random.default_rng(seed)
    skipped = rng.choice(np.flatnonzero(candidates), size=int(K), replace=False)
    return _build(N, skipped, protected)


def no_selection(N: int, protected=()) -> Selection:
    return _build(N, np.empty(0, dtype=np.int64), _as_index_set(protected, N))
