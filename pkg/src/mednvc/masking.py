"""Patch masks and sparse (submanifold) convolution semantics.

A mask unit covers ``UNIT x UNIT`` pixels, which equals the encoder's total
stride, so each unit maps onto exactly one position of the final feature map.
Grids use ``True`` for masked cells throughout.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .diffcore import DimensionError, Tensor, conv2d, conv_output_size, mul

UNIT = 32
STRIDE_LEVELS = (4, 8, 16, 32)


@dataclass(frozen=True, eq=False)
class PatchMask:
    grid: np.ndarray
    mask_ratio: float
    seed: int

    @property
    def visible(self) -> np.ndarray:
        return ~self.grid

    @property
    def num_masked(self) -> int:
        return int(self.grid.sum())

    def __eq__(self, other) -> bool:
        return (isinstance(other, PatchMask) and self.mask_ratio == other.mask_ratio
                and self.seed == other.seed and np.array_equal(self.grid, other.grid))


def masked_count(ratio: float, cells: int) -> int:
    # Python's round() is half-to-even; masking counts round half up.
    return int(np.floor(cells * ratio + 0.5))


def generate_mask(seed: int, ratio: float, grid_size: int = 7) -> PatchMask:
    """Mask exactly ``round(cells * ratio)`` cells chosen uniformly at random."""
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"mask ratio must lie in [0, 1), got {ratio}")
    if grid_size < 1:
        raise ValueError(f"grid_size must be positive, got {grid_size}")
    cells = grid_size * grid_size
    k = masked_count(ratio, cells)
    rng = np.random.default_rng(seed)
    flat = np.zeros(cells, dtype=bool)
    flat[rng.permutation(cells)[:k]] = True
    return PatchMask(flat.reshape(grid_size, grid_size), float(ratio), int(seed))


def stack_masks(masks: Sequence[PatchMask]) -> np.ndarray:
    return np.stack([m.grid for m in masks])


def upsample_grid(grid: np.ndarray, factor: int) -> np.ndarray:
    """Nearest-neighbour upsampling of the last two axes by an integer factor."""
    if factor == 1:
        return grid
    return np.repeat(np.repeat(grid, factor, axis=-2), factor, axis=-1)


def grid_at(grid: np.ndarray, height: int, width: int) -> np.ndarray:
    """Resize a unit grid (``(gh, gw)`` or ``(N, gh, gw)``) to a feature resolution."""
    gh, gw = grid.shape[-2:]
    if height % gh or width % gw or height // gh != width // gw:
        raise DimensionError(
            f"mask grid {gh}x{gw} does not tile a {height}x{width} feature map (axes 2, 3)")
    return upsample_grid(grid, height // gh)


def mask_propagate(mask: Union[PatchMask, np.ndarray], stride_level: int) -> np.ndarray:
    """Masked-cell grid at the feature resolution of an encoder stride level."""
    if stride_level not in STRIDE_LEVELS:
        raise ValueError(f"stride level must be one of {STRIDE_LEVELS}, got {stride_level}")
    grid = mask.grid if isinstance(mask, PatchMask) else mask
    return upsample_grid(grid, UNIT // stride_level)


def visibility(grid: np.ndarray, height: int, width: int, dtype) -> np.ndarray:
    """Float 0/1 visibility map broadcastable against an NCHW tensor."""
    vis = ~grid_at(grid, height, width)
    if vis.ndim == 2:
        vis = vis[None]
    return vis[:, None].astype(dtype)


def apply_visibility(x: Tensor, grid: Optional[np.ndarray]) -> Tensor:
    """Zero masked positions of ``x``; identity when ``grid`` is None."""
    if grid is None:
        return x
    if grid.ndim == 3 and grid.shape[0] != x.shape[0]:
        raise DimensionError(f"mask batch axis {grid.shape[0]} != input batch axis {x.shape[0]}")
    return mul(x, Tensor(visibility(grid, x.shape[2], x.shape[3], x.dtype)))


def masked_conv2d(x: Tensor, grid: np.ndarray, weight: Tensor, bias: Optional[Tensor] = None,
                  stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """Convolution that only reads and writes visible positions.

    Masked input positions contribute nothing to any output and masked output
    positions are zero (and receive no gradient). This is a dense convolution
    over the zero-filled input followed by re-zeroing the masked outputs.
    """
    if x.ndim != 4:
        raise DimensionError(f"masked_conv2d: input must be NCHW, got {x.shape}")
    kh, kw = weight.shape[2:]
    ho = conv_output_size(x.shape[2], kh, stride, padding)
    wo = conv_output_size(x.shape[3], kw, stride, padding)
    grid_at(grid, x.shape[2], x.shape[3])
    grid_at(grid, ho, wo)
    y = conv2d(apply_visibility(x, grid), weight, bias, stride=stride, padding=padding, groups=groups)
    return apply_visibility(y, grid)
