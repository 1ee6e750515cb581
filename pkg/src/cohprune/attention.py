"""Reference multi-head self-attention and the pruned transformer block.

Weight matrices act on column vectors (``q = wq @ x``), so for a row-major
token matrix ``X`` the projections are ``X @ wq.T``. The block is attention
plus a residual connection and nothing else.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .coherence import CoherenceMap, coherence_fast
from .lattice import (
    TokenLattice,
    atomic_write_bytes,
    new_lattice,
    partition,
    read_tensor,
    subpartition,
    write_tensor,
)
from .reconstruction import DEFAULT_FLOOR, passthrough_skip, reconstruct_exact, reconstruct_sc
from .selection import Selection, anchor_mask, no_selection, protected_mask, select_random, select_tokens

SELECTION_MODES = ("coherence", "random", "none")
RECONSTRUCTION_MODES = ("sc_weighted", "exact", "skip_passthrough")
_WEIGHT_NAMES = ("wq", "wk", "wv", "wo")


@dataclass(frozen=True)
class AttentionWeights:
    wq: np.ndarray = field(repr=False)
    wk: np.ndarray = field(repr=False)
    wv: np.ndarray = field(repr=False)
    wo: np.ndarray = field(repr=False)
    heads: int = 1

    def __post_init__(self):
        d = np.asarray(self.wq).shape[0]
        for name in _WEIGHT_NAMES:
            m = np.asarray(getattr(self, name), dtype=np.float64)
            if m.shape != (d, d):
                raise ValueError(f"{name} has shape {m.shape}, expected ({d}, {d})")
            if not np.isfinite(m).all():
                raise ValueError(f"{name} contains non-finite values")
            object.__setattr__(self, name, m)
        if self.heads < 1 or d % self.heads:
            raise ValueError(f"heads={self.heads} must divide dim={d}")

    @property
    def dim(self) -> int:
        return self.wq.shape[0]

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @classmethod
    def random(cls, dim: int, heads: int, seed: int = 0, scale: float = 1.0) -> "AttentionWeights":
        """Gaussian weights with std ``scale / sqrt(dim)``."""
        rng = np.random.default_rng(seed)
        mats = [rng.standard_normal((dim, dim)) * (scale / np.sqrt(dim)) for _ in _WEIGHT_NAMES]
        return cls(*mats, heads=heads)

    @classmethod
    def identity(cls, dim: int, heads: int = 1) -> "AttentionWeights":
        eye = np.eye(dim)
        return cls(eye, eye, eye, eye, heads=heads)

    @classmethod
    def zeros(cls, dim: int, heads: int = 1) -> "AttentionWeights":
        z = np.zeros((dim, dim))
        return cls(z, z, z, z, heads=heads)


def save_weights(weights: AttentionWeights, path: str | os.PathLike) -> Path:
    """Write ``path`` (CPRL sections) and ``path.json`` (manifest); returns the manifest path."""
    import io

    path = Path(path)
    buf = io.BytesIO()
    tensors = []
    for name in _WEIGHT_NAMES:
        m = getattr(weights, name)
        tensors.append({"name": name, "shape": list(m.shape), "offset": buf.tell()})
        write_tensor(buf, m.reshape(m.shape[0], m.shape[1], 1))
    atomic_write_bytes(path, buf.getvalue())
    manifest = path.with_name(path.name + ".json")
    doc = {"file": path.name, "heads": weights.heads, "tensors": tensors}
    atomic_write_bytes(manifest, (json.dumps(doc, indent=2) + "\n").encode())
    return manifest


def load_weights(manifest_path: str | os.PathLike) -> AttentionWeights:
    manifest_path = Path(manifest_path)
    doc = json.loads(manifest_path.read_text())
    mats = {}
    with open(manifest_path.with_name(doc["file"]), "rb") as fh:
        for entry in doc["tensors"]:
            fh.seek(entry["offset"])
            arr = read_tensor(fh)
            mats[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float64)
    return AttentionWeights(*(mats[n] for n in _WEIGHT_NAMES), heads=int(doc["heads"]))


def _softmax(scores: np.ndarray) -> np.ndarray:
    z = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _check_tokens(tokens, weights: AttentionWeights) -> np.ndarray:
    x = np.asarray(tokens, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] != weights.dim:
        raise ValueError(f"expected tokens of shape (n >= 1, {weights.dim}), got {x.shape}")
    return x


def _attention_probs(x: np.ndarray, weights: AttentionWeights) -> tuple[np.ndarray, np.ndarray]:
    n, h, dk = x.shape[0], weights.heads, weights.head_dim
    q = (x @ weights.wq.T).reshape(n, h, dk).transpose(1, 0, 2)
    k = (x @ weights.wk.T).reshape(n, h, dk).transpose(1, 0, 2)
    v = (x @ weights.wv.T).reshape(n, h, dk).transpose(1, 0, 2)
    probs = _softmax(q @ k.transpose(0, 2, 1) / np.sqrt(dk))
    return probs, v


def mhsa(tokens, weights: AttentionWeights) -> np.ndarray:
    """Multi-head self-attention over an ``(n, D)`` token matrix (float64 out)."""
    x = _check_tokens(tokens, weights)
    probs, v = _attention_probs(x, weights)
    heads_out = (probs @ v).transpose(1, 0, 2).reshape(x.shape[0], weights.dim)
    return heads_out @ weights.wo.T


def attention_column_importance(tokens, weights: AttentionWeights) -> np.ndarray:
    """Total attention each token receives (column sums), averaged over heads."""
    x = _check_tokens(tokens, weights)
    probs, _ = _attention_probs(x, weights)
    return probs.sum(axis=1).mean(axis=0)


@dataclass(frozen=True)
class BlockConfig:
    grid_width: int
    sub_width: int = 3
    stride: int = 2
    block_index: int = 0
    selection_mode: str = "coherence"
    reconstruction_mode: str = "sc_weighted"
    floor: float = DEFAULT_FLOOR
    seed: int = 0
    # add one anchor to sub-grids the stride pattern misses (ragged corners)
    fallback_anchors: bool = True

    def __post_init__(self):
        if self.selection_mode not in SELECTION_MODES:
            raise ValueError(f"selection_mode must be one of {SELECTION_MODES}, got {self.selection_mode!r}")
        if self.reconstruction_mode not in RECONSTRUCTION_MODES:
            raise ValueError(
                f"reconstruction_mode must be one of {RECONSTRUCTION_MODES}, got {self.reconstruction_mode!r}"
            )
        if not 1 <= self.sub_width <= self.grid_width:
            raise ValueError(f"sub_width={self.sub_width} must lie in [1, grid_width={self.grid_width}]")
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        if self.reconstruction_mode != "skip_passthrough" and self.stride > self.sub_width:
            raise ValueError(
                f"stride={self.stride} > sub_width={self.sub_width} leaves sub-grids without anchors"
            )

    def protected(self, height: int, width: int) -> np.ndarray:
        if self.fallback_anchors and self.reconstruction_mode != "skip_passthrough":
            return anchor_mask(subpartition((height, width), self.sub_width), self.block_index, self.stride)
        return protected_mask(height, width, self.block_index, self.stride)


def alternating_configs(n_blocks: int, grid_sizes: Sequence[int], **kwargs) -> list[BlockConfig]:
    """Block configs cycling through ``grid_sizes`` with ``block_index = l``."""
    return [
        BlockConfig(grid_width=grid_sizes[l % len(grid_sizes)], block_index=l, **kwargs)
        for l in range(n_blocks)
    ]


def _residual(lattice: TokenLattice, y: np.ndarray) -> TokenLattice:
    out = np.asarray(lattice.tokens, dtype=np.float64) + y
    return new_lattice(lattice.height, lattice.width, lattice.dim, out)


def block_forward_dense(lattice: TokenLattice, weights: AttentionWeights) -> TokenLattice:
    return _residual(lattice, mhsa(lattice.tokens, weights))


def select_for_block(lattice: TokenLattice, cfg: BlockConfig, K: int, coh: CoherenceMap) -> Selection:
    protected = cfg.protected(lattice.height, lattice.width)
    if cfg.selection_mode == "none":
        return no_selection(lattice.n_tokens, protected)
    if cfg.selection_mode == "random":
        return select_random(lattice.n_tokens, K, protected, seed=cfg.seed)
    return select_tokens(coh, K, protected)


def block_forward_pruned(
    lattice: TokenLattice, weights: AttentionWeights, cfg: BlockConfig, K: int
) -> tuple[TokenLattice, Selection, CoherenceMap]:
    """Score, skip ``K`` tokens, attend over the rest, rebuild, add residual."""
    coh = coherence_fast(lattice, partition(lattice, cfg.grid_width))
    sel = select_for_block(lattice, cfg, K, coh)
    y_r = mhsa(lattice.tokens[sel.retained], weights)
    if sel.K == 0:
        y = passthrough_skip(lattice, sel, y_r)
    elif cfg.reconstruction_mode == "skip_passthrough":
        y = passthrough_skip(lattice, sel, y_r)
    elif cfg.reconstruction_mode == "exact":
        y = reconstruct_exact(lattice, sel, y_r, subpartition(lattice, cfg.sub_width), cfg.floor)
    else:
        y = reconstruct_sc(coh, sel, y_r, subpartition(lattice, cfg.sub_width), cfg.floor)
    return _residual(lattice, y), sel, coh


def stack_forward(
    lattice: TokenLattice,
    blocks: Sequence[tuple[AttentionWeights, BlockConfig]],
    schedule=None,
    step: int = 1,
    *,
    record: list | None = None,
) -> TokenLattice:
    """Apply the blocks in order with ``K = effective_K(schedule, l, step)``.

    ``schedule=None`` runs every block dense. When ``record`` is a list, each
    block appends ``(block input, Selection, CoherenceMap)``.
    """
    from .scheduler import effective_K

    if schedule is not None and schedule.blocks != len(blocks):
        raise ValueError(f"schedule has {schedule.blocks} blocks, stack has {len(blocks)}")
    x = lattice
    for l, (weights, cfg) in enumerate(blocks):
        K = 0 if schedule is None else effective_K(schedule, l, step)
        if record is None and schedule is None:
            x = block_forward_dense(x, weights)
            continue
        y, sel, coh = block_forward_pruned(x, weights, cfg, K)
        if record is not None:
            record.append((x, sel, coh))
        x = y
    return x


def dense_stack(lattice: TokenLattice, blocks: Sequence[tuple[AttentionWeights, BlockConfig]]) -> TokenLattice:
    x = lattice
    for weights, _ in blocks:
        x = block_forward_dense(x, weights)
    return x


def relative_error(reference: TokenLattice, other: TokenLattice) -> float:
    a = np.asarray(reference.data, dtype=np.float64)
    b = np.asarray(other.data, dtype=np.float64)
    return float(np.linalg.norm(a - b) / np.linalg.norm(a))


def with_seed(cfg: BlockConfig, seed: int) -> BlockConfig:
    return replace(cfg, seed=seed)
