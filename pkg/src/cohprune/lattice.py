"""Token lattices, grid/sub-grid partitions and the binary lattice container.

Tokens are stored row-major: the token at spatial position ``(i, j)`` has the
linear index ``i * width + j``. Every other module relies on this convention.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Sequence

import numpy as np

MAGIC = b"CPRL"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIIII")


class LatticeError(ValueError):
    """Raised for malformed lattice data or an invalid partition request."""


@dataclass(frozen=True)
class TokenLattice:
    """An ``height x width`` grid of ``dim``-dimensional token embeddings."""

    height: int
    width: int
    dim: int
    data: np.ndarray = field(repr=False)

    @property
    def n_tokens(self) -> int:
        return self.height * self.width

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.height, self.width, self.dim)

    @property
    def tokens(self) -> np.ndarray:
        """``(N, D)`` view of the embeddings in linear-index order."""
        return self.data.reshape(self.n_tokens, self.dim)

    def linear_index(self, i: int, j: int) -> int:
        return i * self.width + j

    def token(self, i: int, j: int) -> np.ndarray:
        return self.data[i, j]

    @classmethod
    def from_array(cls, array) -> "TokenLattice":
        array = np.asarray(array)
        if array.ndim != 3:
            raise LatticeError(f"expected an (H, W, D) array, got shape {array.shape}")
        h, w, d = array.shape
        return new_lattice(h, w, d, array)

    @classmethod
    def from_tokens(cls, tokens, height: int, width: int) -> "TokenLattice":
        tokens = np.asarray(tokens)
        return new_lattice(height, width, tokens.shape[-1], tokens)


def new_lattice(height: int, width: int, dim: int, data) -> TokenLattice:
    """Validate ``data`` and wrap it as a float32 :class:`TokenLattice`."""
    for name, value in (("height", height), ("width", width), ("dim", dim)):
        if int(value) != value or value < 1:
            raise LatticeError(f"{name} must be a positive integer, got {value!r}")
    height, width, dim = int(height), int(width), int(dim)
    flat = np.asarray(data, dtype=np.float32).reshape(-1)
    expected = height * width * dim
    if flat.size != expected:
        raise LatticeError(
            f"data length {flat.size} != H*W*D = {height}*{width}*{dim} = {expected}"
        )
    bad = np.flatnonzero(~np.isfinite(flat))
    if bad.size:
        k = int(bad[0])
        token, channel = divmod(k, dim)
        i, j = divmod(token, width)
        raise LatticeError(
            f"non-finite value {flat[k]!r} at flat index {k} "
            f"(token ({i}, {j}), channel {channel})"
        )
    arr = flat.reshape(height, width, dim).copy()
    arr.setflags(write=False)
    return TokenLattice(height, width, dim, arr)


@dataclass(frozen=True)
class GridPartition:
    """Non-overlapping ``grid_width x grid_width`` tiling with ragged edges.

    ``cells[g]`` lists the linear indices of grid ``g`` in ascending order;
    grids are numbered row-major over grid coordinates ``(a, b)``.
    """

    grid_width: int
    height: int
    width: int
    cells: tuple[np.ndarray, ...] = field(repr=False)
    token_to_grid: np.ndarray = field(repr=False)

    @property
    def n_grids(self) -> int:
        return len(self.cells)

    @property
    def n_tokens(self) -> int:
        return self.height * self.width

    @property
    def grid_rows(self) -> int:
        return -(-self.height // self.grid_width)

    @property
    def grid_cols(self) -> int:
        return -(-self.width // self.grid_width)

    def sizes(self) -> np.ndarray:
        return np.array([c.size for c in self.cells], dtype=np.int64)

    def members(self, index: int) -> np.ndarray:
        """Indices sharing a grid with token ``index``."""
        return self.cells[int(self.token_to_grid[index])]

    def order(self) -> tuple[np.ndarray, np.ndarray]:
        """Tokens concatenated grid by grid, plus the start offset of each grid."""
        order = np.concatenate(self.cells)
        offsets = np.concatenate(([0], np.cumsum(self.sizes())[:-1]))
        return order, offsets

    def borders(self) -> frozenset[tuple[str, int]]:
        """Grid boundary lines as ``("row"|"col", coordinate)`` pairs."""
        rows = {("row", a * self.grid_width) for a in range(1, self.grid_rows)}
        cols = {("col", b * self.grid_width) for b in range(1, self.grid_cols)}
        return frozenset(rows | cols)


class SubGridPartition(GridPartition):
    """Finer tiling that defines reconstruction neighbourhoods."""

    @property
    def sub_width(self) -> int:
        return self.grid_width


def _tile(height: int, width: int, w: int, cls):
    if int(w) != w or not 1 <= w <= min(height, width):
        raise LatticeError(
            f"grid width must be an integer in [1, min(H, W)] = [1, {min(height, width)}], got {w!r}"
        )
    w = int(w)
    i, j = np.divmod(np.arange(height * width, dtype=np.int64), width)
    grid_cols = -(-width // w)
    token_to_grid = (i // w) * grid_cols + j // w
    # stable sort keeps ascending linear index inside each grid
    order = np.argsort(token_to_grid, kind="stable")
    bounds = np.flatnonzero(np.diff(token_to_grid[order])) + 1
    cells = tuple(np.split(order, bounds))
    for c in cells:
        c.setflags(write=False)
    token_to_grid.setflags(write=False)
    return cls(w, height, width, cells, token_to_grid)


def _dims(lattice) -> tuple[int, int]:
    if isinstance(lattice, TokenLattice):
        return lattice.height, lattice.width
    height, width = lattice
    return int(height), int(width)


def partition(lattice: TokenLattice | tuple[int, int], grid_width: int) -> GridPartition:
    """Tile the lattice (or an ``(H, W)`` shape) into ``grid_width``-sized grids."""
    return _tile(*_dims(lattice), grid_width, GridPartition)


def subpartition(lattice: TokenLattice | tuple[int, int], sub_width: int) -> SubGridPartition:
    """Tile the full lattice into ``sub_width``-sized sub-grids."""
    return _tile(*_dims(lattice), sub_width, SubGridPartition)


# -- binary container ---------------------------------------------------------


def write_tensor(fh: BinaryIO, array: np.ndarray) -> None:
    """Write one CPRL record; ``array`` must be 3-D ``(H, W, D)``."""
    h, w, d = array.shape
    fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, h, w, d))
    fh.write(np.ascontiguousarray(array, dtype="<f4").tobytes())


def read_tensor(fh: BinaryIO) -> np.ndarray:
    header = fh.read(_HEADER.size)
    if len(header) != _HEADER.size:
        raise LatticeError("truncated header")
    magic, version, h, w, d = _HEADER.unpack(header)
    if magic != MAGIC:
        raise LatticeError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise LatticeError(f"unsupported format version {version}")
    count = h * w * d
    payload = fh.read(4 * count)
    if len(payload) != 4 * count:
        raise LatticeError(f"truncated payload: expected {4 * count} bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype="<f4").reshape(h, w, d).astype(np.float32)


def atomic_write_bytes(path: str | os.PathLike, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def lattice_to_bytes(lattice: TokenLattice) -> bytes:
    import io

    buf = io.BytesIO()
    write_tensor(buf, lattice.data)
    return buf.getvalue()


def save_lattice(lattice: TokenLattice, path: str | os.PathLike) -> None:
    atomic_write_bytes(path, lattice_to_bytes(lattice))


def load_lattice(path: str | os.PathLike) -> TokenLattice:
    with open(path, "rb") as fh:
        arr = read_tensor(fh)
        if fh.read(1):
            raise LatticeError(f"{path}: trailing bytes after lattice payload")
    return TokenLattice.from_array(arr)


def stack_lattices(lattices: Sequence[TokenLattice]) -> np.ndarray:
    return np.stack([lat.data for lat in lattices])
