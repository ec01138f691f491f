"""Point-to-voxel and voxel-to-point transport kernels with exact adjoints.

``voxelize`` scatters point features into a dense grid by averaging all
points whose floored grid coordinates land in the same cell; ``devoxelize``
reads features back at continuous coordinates through trilinear
interpolation.  Both forwards are linear in the features for fixed
coordinates, and both backward rules are the exact transposes of those
linear maps, so they are testable with adjoint dot-products as well as
finite differences.  No gradient ever flows into coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Array, Tensor, record_op
from .errors import ContractViolation

# Corner enumeration order used by every routine in this module: binary
# (dx, dy, dz) with z fastest, i.e. 000, 001, 010, 011, 100, 101, 110, 111.
_CORNERS = [(dx, dy, dz) for dx in (0, 1) for dy in (0, 1) for dz in (0, 1)]


@dataclass
class VoxelGrid:
    """Dense batched feature grid [B, C, r, r, r]; untouched voxels are zero."""

    features: Tensor
    resolution: int

    def __post_init__(self):
        r = self.resolution
        if r < 2:
            raise ContractViolation(f"voxel resolution must be >= 2, got {r}")
        shape = self.features.shape
        if len(shape) != 5 or shape[2:] != (r, r, r):
            raise ContractViolation(
                f"grid features shape {shape} does not match resolution {r}"
            )


@dataclass
class TrilinearStencil:
    """The 8 grid corners and weights interpolating one query coordinate."""

    corner_indices: Array  # [8, 3] ints in [0, r)
    weights: Array  # [8], nonnegative, summing to 1


def _check_coords(grid_coords: Array, resolution: int) -> Array:
    coords = np.asarray(grid_coords)
    if coords.ndim != 3 or coords.shape[2] != 3:
        raise ContractViolation(f"grid coords must be [B, N, 3], got {coords.shape}")
    hi = resolution - 1
    if np.any(coords < 0.0) or np.any(coords > hi):
        raise ContractViolation(
            f"grid coordinates outside [0, {hi}]; caller must clamp"
        )
    return coords


def _flat_cell_index(grid_coords: Array, resolution: int) -> Array:
    """Flat voxel index per point from floored coordinates, [B, N] int64."""
    idx = np.floor(grid_coords).astype(np.int64)
    np.minimum(idx, resolution - 1, out=idx)  # guard the exact top boundary
    return (idx[..., 0] * resolution + idx[..., 1]) * resolution + idx[..., 2]


def scatter_mean(features: Array, flat_index: Array, resolution: int):
    """Per-voxel mean of features [B, C, N] grouped by flat cell index.

    Returns (grid [B, C, r, r, r], counts [B, r^3]).  Sums accumulate in
    float64 in point-index order, then divide by the occupancy count;
    empty cells stay exactly zero.
    """
    b_dim, c_dim, n = features.shape
    r3 = resolution**3
    batched = (flat_index + np.arange(b_dim, dtype=np.int64)[:, None] * r3).ravel()
    counts = np.bincount(batched, minlength=b_dim * r3).reshape(b_dim, r3)
    sums = np.empty((c_dim, b_dim * r3), dtype=np.float64)
    for c in range(c_dim):
        sums[c] = np.bincount(
            batched, weights=features[:, c, :].ravel(), minlength=b_dim * r3
        )
    denom = np.maximum(counts, 1)[:, None, :]
    grid = (sums.reshape(c_dim, b_dim, r3).transpose(1, 0, 2) / denom).astype(features.dtype)
    return grid.reshape(b_dim, c_dim, resolution, resolution, resolution), counts


def scatter_mean_adjoint(grad_grid: Array, flat_index: Array, counts: Array) -> Array:
    """Transpose of ``scatter_mean`` in the features argument.

    Each point receives the gradient of its voxel divided by that voxel's
    occupancy count.
    """
    b_dim, c_dim = grad_grid.shape[:2]
    flat_grad = grad_grid.reshape(b_dim, c_dim, -1)
    inv = np.zeros(counts.shape, dtype=grad_grid.dtype)
    occupied = counts > 0
    inv[occupied] = 1.0 / counts[occupied]
    b_idx = np.arange(b_dim)[:, None]
    gathered = flat_grad[b_idx, :, flat_index]  # [B, N, C]
    return (gathered * inv[b_idx, flat_index][:, :, None]).transpose(0, 2, 1)


def voxelize(grid_coords: Array, features: Tensor, resolution: int) -> VoxelGrid:
    """Scatter-mean point features into a dense r x r x r grid.

    ``grid_coords`` [B, N, 3] must already be scaled into [0, r-1]; a point
    contributes to exactly the voxel given by its floored coordinates.  The
    backward rule routes each voxel gradient back to its contributing
    points, scaled by 1/count; coordinates receive no gradient.
    """
    coords = _check_coords(grid_coords, resolution)
    if features.data.ndim != 3:
        raise ContractViolation(f"features must be [B, C, N], got {features.shape}")
    if features.shape[0] != coords.shape[0] or features.shape[2] != coords.shape[1]:
        raise ContractViolation(
            f"features {features.shape} do not match coords {coords.shape}"
        )
    flat_index = _flat_cell_index(coords, resolution)
    grid, counts = scatter_mean(features.data, flat_index, resolution)
    out = Tensor(grid)

    def backward(g: Array):
        return (scatter_mean_adjoint(g, flat_index, counts),)

    record_op("voxelize", (features,), out, backward)
    return VoxelGrid(out, resolution)


def trilinear_stencil(coord, resolution: int) -> TrilinearStencil:
    """Interpolation stencil for a single coordinate triple in [0, r-1]^3.

    The lower corner is the floored coordinate, the upper corner is one
    step above clamped to the grid edge; weights are products of the
    per-axis fractional parts and always sum to 1.
    """
    c = np.asarray(coord, dtype=np.float64).reshape(3)
    hi = resolution - 1
    if np.any(c < 0.0) or np.any(c > hi):
        raise ContractViolation(f"coordinate {c} outside [0, {hi}]")
    lo = np.floor(c).astype(np.int64)
    np.minimum(lo, hi, out=lo)
    up = np.minimum(lo + 1, hi)
    frac = c - lo
    corners = np.empty((8, 3), dtype=np.int64)
    weights = np.empty(8, dtype=np.float64)
    for k, (dx, dy, dz) in enumerate(_CORNERS):
        corners[k] = (
            up[0] if dx else lo[0],
            up[1] if dy else lo[1],
            up[2] if dz else lo[2],
        )
        wx = frac[0] if dx else 1.0 - frac[0]
        wy = frac[1] if dy else 1.0 - frac[1]
        wz = frac[2] if dz else 1.0 - frac[2]
        weights[k] = wx * wy * wz
    return TrilinearStencil(corners, weights)


def _batched_stencil(coords: Array, resolution: int):
    """Vectorized stencils: corner flat indices [8, B, N], weights [8, B, N]."""
    hi = resolution - 1
    lo = np.floor(coords).astype(np.int64)
    np.minimum(lo, hi, out=lo)
    up = np.minimum(lo + 1, hi)
    frac = coords.astype(np.float64) - lo
    one_minus = 1.0 - frac
    idx = np.empty((8,) + coords.shape[:2], dtype=np.int64)
    wgt = np.empty((8,) + coords.shape[:2], dtype=np.float64)
    for k, (dx, dy, dz) in enumerate(_CORNERS):
        cx = up[..., 0] if dx else lo[..., 0]
        cy = up[..., 1] if dy else lo[..., 1]
        cz = up[..., 2] if dz else lo[..., 2]
        idx[k] = (cx * resolution + cy) * resolution + cz
        wx = frac[..., 0] if dx else one_minus[..., 0]
        wy = frac[..., 1] if dy else one_minus[..., 1]
        wz = frac[..., 2] if dz else one_minus[..., 2]
        wgt[k] = wx * wy * wz
    return idx, wgt


def trilinear_gather(grid: Array, coords: Array, resolution: int) -> tuple:
    """Forward interpolation: grid [B, C, r, r, r] at coords -> [B, C, N].

    Also returns the stencil (corner indices and weights) for the adjoint.
    """
    b_dim, c_dim = grid.shape[:2]
    idx, wgt = _batched_stencil(coords, resolution)
    flat = grid.reshape(b_dim, c_dim, -1)
    out = np.zeros((b_dim, c_dim, coords.shape[1]), dtype=grid.dtype)
    w = wgt.astype(grid.dtype)
    b_idx = np.arange(b_dim)[:, None]
    for k in range(8):
        gathered = flat[b_idx, :, idx[k]]  # [B, N, C]
        out += (gathered * w[k][:, :, None]).transpose(0, 2, 1)
    return out, (idx, w)


def trilinear_scatter_adjoint(
    grad_points: Array, stencil, resolution: int
) -> Array:
    """Transpose of ``trilinear_gather`` in the grid argument.

    Contributions from all corners and batch items are accumulated through
    one float64 bincount per channel, corner-major then point-major, a
    fixed order."""
    idx, w = stencil
    b_dim, c_dim, n = grad_points.shape
    r3 = resolution**3
    offsets = np.arange(b_dim, dtype=np.int64)[None, :, None] * r3
    flat_idx = (idx + offsets).reshape(-1)  # [8*B*N]
    weighted = grad_points[None, :, :, :] * w[:, :, None, :]  # [8, B, C, N]
    out = np.empty((c_dim, b_dim * r3), dtype=np.float64)
    for c in range(c_dim):
        out[c] = np.bincount(
            flat_idx, weights=weighted[:, :, c, :].ravel(), minlength=b_dim * r3
        )
    grid = out.reshape(c_dim, b_dim, r3).transpose(1, 0, 2).astype(grad_points.dtype)
    return grid.reshape(b_dim, c_dim, resolution, resolution, resolution)


def devoxelize(grid: VoxelGrid, grid_coords: Array) -> Tensor:
    """Trilinear interpolation of grid features back onto point coordinates.

    Backward scatters each point gradient, weighted by its stencil, onto
    the 8 surrounding voxels; coordinates receive no gradient.
    """
    r = grid.resolution
    coords = _check_coords(grid_coords, r)
    if grid.features.shape[0] != coords.shape[0]:
        raise ContractViolation(
            f"grid batch {grid.features.shape[0]} != coords batch {coords.shape[0]}"
        )
    values, stencil = trilinear_gather(grid.features.data, coords, r)
    out = Tensor(values)

    def backward(g: Array):
        return (trilinear_scatter_adjoint(g, stencil, r),)

    return record_op("devoxelize", (grid.features,), out, backward)
