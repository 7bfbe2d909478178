"""Fixed 2D sine/cosine positional encoding for region grids."""

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class GridShape:
    height: int
    width: int

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ValueError(f"grid must be at least 1x1, got {self.height}x{self.width}")

    @property
    def size(self):
        return self.height * self.width

    def position(self, index):
        """(x, y) of a row-major region index."""
        return index % self.width, index // self.width


def _encode_axis(pos, dim_half):
    # sin/cos interleaved; frequency k is 1 / 10000^(4k/dim) with dim = 2*dim_half
    k = np.arange(dim_half // 2, dtype=np.float64)
    omega = 1.0 / 10000.0 ** (2.0 * k / dim_half)
    angles = np.outer(pos, omega)
    out = np.empty((len(pos), dim_half))
    out[:, 0::2] = np.sin(angles)
    out[:, 1::2] = np.cos(angles)
    return out


def pe_2d(grid, dim):
    """Encoding matrix of shape (grid.size, dim), rows in row-major grid order.

    The first half of each row encodes the column x, the second half the row y.
    """
    if dim <= 0 or dim % 4:
        raise ValueError("dim must be multiple of 4")
    idx = np.arange(grid.size)
    xs = (idx % grid.width).astype(np.float64)
    ys = (idx // grid.width).astype(np.float64)
    half = dim // 2
    return np.concatenate([_encode_axis(xs, half), _encode_axis(ys, half)], axis=1)


def add_pe(features, grid, preserve_zero_rows=False):
    """Add the grid encoding to ``features``.

    With ``preserve_zero_rows`` all-zero rows (a zero-filled absent view) are
    left at zero so they stay masked.
    """
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or f.shape[0] != grid.size:
        raise ValueError(
            f"features have {f.shape[0] if f.ndim == 2 else f.shape} rows, grid {grid.height}x{grid.width} needs {grid.size}"
        )
    pe = pe_2d(grid, f.shape[1])
    if preserve_zero_rows:
        keep = np.any(f != 0.0, axis=1)
        pe = pe * keep[:, None]
    return f + pe
