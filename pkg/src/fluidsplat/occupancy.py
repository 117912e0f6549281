"""Gaussian-induced soft solid mask on a voxel grid.

Each Gaussian contributes alpha * exp(-0.5 d^T P d) at a query point (P is
its inverse covariance), clamped to [0, 1 - 1e-4] so overlapping Gaussians
never drive the union's product term to an exact zero. Contributions are
combined with the probabilistic union chi = 1 - prod(1 - a_i), accumulated
in ascending Gaussian index order always, which makes the result
independent of any parallel work division.

Evaluation is tiled: each Gaussian is culled to the tiles its kappa-sigma
bounding box touches. A kappa of infinity disables culling and is bitwise
identical to the dense evaluation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import ContractViolation, InvalidParameterError
from .mathutil import quat_to_rotmat_batch, rotmat_quat_jacobian_batch
from .scene import GaussianSet, GradBuffer

ALPHA_CEIL = _kernels.ALPHA_CEIL
DEFAULT_TILE = 8
DEFAULT_KAPPA = 3.0


@dataclass
class GridSpec:
    """Regular voxel grid: dims cells of edge h, cell (0,0,0) centered at origin."""

    dims: tuple
    h: float = 1.0
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if len(self.dims) != 3 or any(d < 1 for d in self.dims):
            raise InvalidParameterError(f"bad grid dims {self.dims}")
        if self.h <= 0:
            raise InvalidParameterError("grid spacing must be positive")
        self.origin = tuple(float(v) for v in self.origin)

    @property
    def cell_count(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    @property
    def cell_volume(self) -> float:
        return self.h ** 3

    def cell_centers(self) -> np.ndarray:
        """(3, nx, ny, nz) world coordinates of cell centers."""
        nx, ny, nz = self.dims
        ii, jj, kk = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
        out = np.empty((3, nx, ny, nz), dtype=np.float64)
        out[0] = self.origin[0] + self.h * ii
        out[1] = self.origin[1] + self.h * jj
        out[2] = self.origin[2] + self.h * kk
        return out

    def __eq__(self, other):
        return (isinstance(other, GridSpec) and self.dims == other.dims
                and self.h == other.h and self.origin == other.origin)


@dataclass
class OccupancyGrid:
    """Soft mask values plus the provenance needed to run the backward pass."""

    spec: GridSpec
    chi: np.ndarray
    tile_lo: np.ndarray = field(repr=False, default=None)
    tile_hi: np.ndarray = field(repr=False, default=None)
    offsets: np.ndarray = field(repr=False, default=None)
    contrib: np.ndarray = field(repr=False, default=None)
    transform: tuple = field(repr=False, default=None)  # (B, xt, xref[, pose_q]) or None

    @property
    def contributors(self):
        """Per-tile lists of contributing Gaussian indices (ascending)."""
        return [self.contrib[self.offsets[t]:self.offsets[t + 1]]
                for t in range(len(self.tile_lo))]


def contribution_at(mean, inv_cov, alpha, x) -> float:
    """Occupancy contribution of one Gaussian at one point (clamped)."""
    d = np.asarray(x, dtype=np.float64) - np.asarray(mean, dtype=np.float64)
    m = float(d @ np.asarray(inv_cov, dtype=np.float64) @ d)
    return min(float(alpha) * math.exp(-0.5 * m), ALPHA_CEIL)


def gaussian_contribution(gset: GaussianSet, index: int, x) -> float:
    """Contribution of Gaussian `index` of the set at world point x."""
    p6 = gset.inverse_covariances_packed()[index]
    P = np.array([[p6[0], p6[3], p6[4]],
                  [p6[3], p6[1], p6[5]],
                  [p6[4], p6[5], p6[2]]])
    return contribution_at(gset.means[index], P, gset.opacities[index], x)


def _tile_boxes(spec: GridSpec, tile: int):
    """(T,3) inclusive-lo / exclusive-hi cell index bounds of cubic tiles."""
    if tile < 1:
        raise InvalidParameterError("tile edge must be >= 1")
    nx, ny, nz = spec.dims
    los = []
    his = []
    for i0 in range(0, nx, tile):
        for j0 in range(0, ny, tile):
            for k0 in range(0, nz, tile):
                los.append((i0, j0, k0))
                his.append((min(i0 + tile, nx), min(j0 + tile, ny), min(k0 + tile, nz)))
    return np.array(los, dtype=np.int64), np.array(his, dtype=np.int64)


def gaussian_aabbs(gset: GaussianSet, kappa: float) -> tuple:
    """Conservative world AABBs mu +- kappa * sqrt(diag(Sigma)); (N,3) lo/hi."""
    R = quat_to_rotmat_batch(gset.rotations)
    s2 = np.exp(2.0 * gset.log_scales)
    diag = np.einsum("nab,nb->na", R * R, s2)  # diag(Sigma)
    ext = kappa * np.sqrt(diag)
    return gset.means - ext, gset.means + ext


def contributors_csr(aabb_lo, aabb_hi, spec: GridSpec, tile_lo, tile_hi,
                     box_lo=None, box_hi=None):
    """CSR contributor lists: Gaussian AABBs vs per-tile world boxes.

    box_lo/box_hi override the tile world boxes (used by posed masks whose
    tiles are transformed conservatively into the body frame).
    """
    ntiles = len(tile_lo)
    if box_lo is None:
        box_lo = np.asarray(spec.origin) + spec.h * tile_lo - 0.5 * spec.h
        box_hi = np.asarray(spec.origin) + spec.h * (tile_hi - 1) + 0.5 * spec.h
    lists = [[] for _ in range(ntiles)]
    n = aabb_lo.shape[0]
    for g in range(n):  # ascending order keeps per-tile lists sorted
        hit = np.all(aabb_lo[g] <= box_hi, axis=1) & np.all(aabb_hi[g] >= box_lo, axis=1)
        for t in np.nonzero(hit)[0]:
            lists[t].append(g)
    offsets = np.zeros(ntiles + 1, dtype=np.int64)
    for t in range(ntiles):
        offsets[t + 1] = offsets[t] + len(lists[t])
    contrib = np.concatenate([np.array(l, dtype=np.int64) for l in lists]) \
        if offsets[-1] else np.zeros(0, dtype=np.int64)
    return offsets, contrib


_IDENTITY3 = np.eye(3)
_ZERO3 = np.zeros(3)


def _evaluate(gset: GaussianSet, spec: GridSpec, tile_lo, tile_hi, offsets, contrib,
              transform=None) -> OccupancyGrid:
    chi = np.zeros(spec.dims, dtype=np.float64)
    if len(gset):
        mu = gset.means
        p6 = gset.inverse_covariances_packed()
        alpha = gset.opacities
        if transform is None:
            B, xt, xref = _IDENTITY3, _ZERO3, _ZERO3
            flag = False
        else:
            B, xt, xref = transform[:3]
            flag = True
        _kernels.mask_tiles_forward(mu, p6, alpha, tile_lo, tile_hi, offsets, contrib,
                                    np.asarray(spec.origin), spec.h, flag,
                                    np.ascontiguousarray(B, dtype=np.float64),
                                    np.asarray(xt, dtype=np.float64),
                                    np.asarray(xref, dtype=np.float64), chi)
    return OccupancyGrid(spec, chi, tile_lo, tile_hi, offsets, contrib, transform)


def dense_mask(gset: GaussianSet, spec: GridSpec) -> OccupancyGrid:
    """Evaluate chi at every cell over all Gaussians (no culling)."""
    tile_lo = np.zeros((1, 3), dtype=np.int64)
    tile_hi = np.array([spec.dims], dtype=np.int64)
    offsets = np.array([0, len(gset)], dtype=np.int64)
    contrib = np.arange(len(gset), dtype=np.int64)
    return _evaluate(gset, spec, tile_lo, tile_hi, offsets, contrib)


def tiled_mask(gset: GaussianSet, spec: GridSpec, tile: int = DEFAULT_TILE,
               kappa: float = DEFAULT_KAPPA, transform=None) -> OccupancyGrid:
    """Tile-culled mask evaluation; kappa = inf disables culling entirely."""
    if kappa <= 0:
        raise InvalidParameterError("kappa must be positive")
    tile_lo, tile_hi = _tile_boxes(spec, tile)
    ntiles = len(tile_lo)
    if not math.isfinite(kappa):
        offsets = np.arange(ntiles + 1, dtype=np.int64) * len(gset)
        contrib = np.tile(np.arange(len(gset), dtype=np.int64), ntiles)
    else:
        aabb_lo, aabb_hi = gaussian_aabbs(gset, kappa)
        if transform is not None:
            box_lo, box_hi = _transformed_tile_boxes(spec, tile_lo, tile_hi, transform)
            offsets, contrib = contributors_csr(aabb_lo, aabb_hi, spec, tile_lo, tile_hi,
                                                box_lo, box_hi)
        else:
            offsets, contrib = contributors_csr(aabb_lo, aabb_hi, spec, tile_lo, tile_hi)
    return _evaluate(gset, spec, tile_lo, tile_hi, offsets, contrib, transform)


def _transformed_tile_boxes(spec: GridSpec, tile_lo, tile_hi, transform):
    """Conservative body-frame AABBs of the world tiles under (B, xt, xref)."""
    B, xt, xref = transform[:3]
    w_lo = np.asarray(spec.origin) + spec.h * tile_lo - 0.5 * spec.h
    w_hi = np.asarray(spec.origin) + spec.h * (tile_hi - 1) + 0.5 * spec.h
    ntiles = len(tile_lo)
    box_lo = np.empty((ntiles, 3))
    box_hi = np.empty((ntiles, 3))
    corners = np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)], dtype=np.float64)
    for t in range(ntiles):
        pts = w_lo[t] + corners * (w_hi[t] - w_lo[t])
        body = (pts - xt) @ np.asarray(B).T + xref
        box_lo[t] = body.min(axis=0)
        box_hi[t] = body.max(axis=0)
    return box_lo, box_hi


def mask_backward_raw(grid: OccupancyGrid, dchi: np.ndarray, gset: GaussianSet):
    """Kernel-level backward: per-Gaussian partials plus pose accumulators."""
    n = len(gset)
    g_alpha = np.zeros(n)
    g_mu = np.zeros((n, 3))
    g_p6 = np.zeros((n, 6))
    g_y = np.zeros(3)
    g_outer = np.zeros((3, 3))
    if n == 0:
        return g_alpha, g_mu, g_p6, g_y, g_outer
    if grid.transform is None:
        B, xt, xref = _IDENTITY3, _ZERO3, _ZERO3
        flag = False
    else:
        B, xt, xref = grid.transform[:3]
        flag = True
    _kernels.mask_tiles_backward(gset.means, gset.inverse_covariances_packed(),
                                 gset.opacities, grid.tile_lo, grid.tile_hi,
                                 grid.offsets, grid.contrib,
                                 np.asarray(grid.spec.origin), grid.spec.h, flag,
                                 np.ascontiguousarray(B, dtype=np.float64),
                                 np.asarray(xt, dtype=np.float64),
                                 np.asarray(xref, dtype=np.float64),
                                 grid.chi, dchi, g_alpha, g_mu, g_p6, g_y, g_outer)
    return g_alpha, g_mu, g_p6, g_y, g_outer


def chain_to_params(gset: GaussianSet, g_alpha, g_mu, g_p6, grads: GradBuffer):
    """Chain raw (alpha, mu, inverse-covariance) partials into parameter space."""
    alpha = gset.opacities
    grads.opacity_logits += g_alpha * alpha * (1.0 - alpha)
    grads.means += g_mu
    # Full symmetric cotangent of P from the packed convention
    G = np.zeros((len(gset), 3, 3))
    G[:, 0, 0] = g_p6[:, 0]
    G[:, 1, 1] = g_p6[:, 1]
    G[:, 2, 2] = g_p6[:, 2]
    G[:, 0, 1] = G[:, 1, 0] = g_p6[:, 3] / 2.0
    G[:, 0, 2] = G[:, 2, 0] = g_p6[:, 4] / 2.0
    G[:, 1, 2] = G[:, 2, 1] = g_p6[:, 5] / 2.0
    R = quat_to_rotmat_batch(gset.rotations)
    Dv = np.exp(-2.0 * gset.log_scales)  # diag of P in the rotated frame
    # dL/dD_kk = (R^T G R)_kk ; dD/d log_s = -2 D
    RtGR = np.einsum("nba,nbc,ncd->nad", R, G, R)
    grads.log_scales += np.einsum("nkk->nk", RtGR) * (-2.0 * Dv)
    # dL/dR = 2 G R D
    dR = 2.0 * np.einsum("nab,nbc,nc->nac", G, R, Dv)
    Jq = rotmat_quat_jacobian_batch(gset.rotations)  # (N,4,3,3)
    grads.rotations += np.einsum("nab,nqab->nq", dR, Jq)


def mask_backward(grid: OccupancyGrid, dchi: np.ndarray, gset: GaussianSet,
                  grads: GradBuffer) -> None:
    """Accumulate d(loss)/d(Gaussian parameters) given per-cell mask cotangents."""
    dchi = np.asarray(dchi, dtype=np.float64)
    if dchi.shape != grid.chi.shape:
        raise ContractViolation(f"dchi shape {dchi.shape} != chi shape {grid.chi.shape}")
    if grads.means.shape != gset.means.shape:
        raise ContractViolation("GradBuffer does not match the GaussianSet")
    g_alpha, g_mu, g_p6, _, _ = mask_backward_raw(grid, dchi, gset)
    chain_to_params(gset, g_alpha, g_mu, g_p6, grads)
