"""Splitting feature maps into a g x g patch grid and reassembling them.

Patches are non-overlapping rectangles in row-major grid order. When a
spatial dimension is not divisible by g, the last row/column of patches
absorbs the remainder pixels (no padding), so split/reassemble round-trips
bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .tensor import _accum, _as_tensor, _from_op


@dataclass(frozen=True)
class PatchGrid:
    g: int
    bounds: tuple  # p = g*g rectangles (r0, r1, c0, c1), row-major
    source_shape: tuple  # (H, W)


def make_grid(h, w, g):
    if g < 1:
        raise ConfigError("grid side g must be >= 1")
    if g > h or g > w:
        raise ConfigError(f"grid {g}x{g} does not fit a {h}x{w} map")
    rh, cw = h // g, w // g
    bounds = []
    for i in range(g):
        r0 = i * rh
        r1 = (i + 1) * rh if i < g - 1 else h
        for j in range(g):
            c0 = j * cw
            c1 = (j + 1) * cw if j < g - 1 else w
            bounds.append((r0, r1, c0, c1))
    return PatchGrid(g=g, bounds=tuple(bounds), source_shape=(h, w))


def split(f, g):
    """Split [N, C, H, W] into p = g*g patch tensors plus the grid geometry."""
    f = _as_tensor(f)
    _, _, h, w = f.data.shape
    grid = make_grid(h, w, g)
    patches = [f[:, :, r0:r1, c0:c1] for r0, r1, c0, c1 in grid.bounds]
    return patches, grid


def reassemble(patches, grid, out_channels=None):
    """Place processed patches back into a full [N, C_out, H, W] map."""
    patches = [_as_tensor(p) for p in patches]
    if len(patches) != len(grid.bounds):
        raise ValueError(f"expected {len(grid.bounds)} patches, got {len(patches)}")
    n = patches[0].data.shape[0]
    c = patches[0].data.shape[1] if out_channels is None else out_channels
    h, w = grid.source_shape
    out = np.empty((n, c, h, w))
    for p, (r0, r1, c0, c1) in zip(patches, grid.bounds):
        if p.data.shape != (n, c, r1 - r0, c1 - c0):
            raise ValueError(
                f"patch shape {p.data.shape} does not match grid cell "
                f"({n}, {c}, {r1 - r0}, {c1 - c0})"
            )
        out[:, :, r0:r1, c0:c1] = p.data

    def backward(g_out):
        for p, (r0, r1, c0, c1) in zip(patches, grid.bounds):
            _accum(p, g_out[:, :, r0:r1, c0:c1])

    return _from_op(out, tuple(patches), backward)
