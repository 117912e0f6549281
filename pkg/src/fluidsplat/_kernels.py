"""Compiled inner loops (single-threaded, deterministic).

Everything here is plain scalar code jitted with numba. All accumulations
run in a fixed sequential order, so results are independent of thread
count and bitwise reproducible. The Gaussian-mask kernels are shared by
the dense and tiled evaluation paths, which is what makes the two paths
bitwise-identical when tiling does not cull anything.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

ALPHA_CEIL = 1.0 - 1e-4  # clamp on per-Gaussian occupancy contributions


# ---------------------------------------------------------------------------
# Soft solid mask
# ---------------------------------------------------------------------------

@njit(cache=True)
def mask_tiles_forward(mu, p6, alpha, tile_lo, tile_hi, offsets, contrib,
                       origin, h, transform, B, xt, xref, chi):
    """Accumulate chi = 1 - prod(1 - alpha_hat) over per-tile contributor lists.

    tile_lo/tile_hi: (T,3) inclusive/exclusive cell index bounds per tile.
    contrib[offsets[t]:offsets[t+1]] lists contributing Gaussians for tile t
    in ascending index order. When `transform` is set, query points are
    mapped into the body frame: y = B (x - xt) + xref.
    """
    ntiles = tile_lo.shape[0]
    for t in range(ntiles):
        i0, j0, k0 = tile_lo[t, 0], tile_lo[t, 1], tile_lo[t, 2]
        i1, j1, k1 = tile_hi[t, 0], tile_hi[t, 1], tile_hi[t, 2]
        lo, hi = offsets[t], offsets[t + 1]
        if hi == lo:
            continue
        for i in range(i0, i1):
            for j in range(j0, j1):
                for k in range(k0, k1):
                    x0 = origin[0] + h * i
                    x1 = origin[1] + h * j
                    x2 = origin[2] + h * k
                    if transform:
                        r0 = x0 - xt[0]
                        r1 = x1 - xt[1]
                        r2 = x2 - xt[2]
                        y0 = B[0, 0] * r0 + B[0, 1] * r1 + B[0, 2] * r2 + xref[0]
                        y1 = B[1, 0] * r0 + B[1, 1] * r1 + B[1, 2] * r2 + xref[1]
                        y2 = B[2, 0] * r0 + B[2, 1] * r1 + B[2, 2] * r2 + xref[2]
                    else:
                        y0, y1, y2 = x0, x1, x2
                    prod = 1.0 - chi[i, j, k]
                    for c in range(lo, hi):
                        g = contrib[c]
                        dx = y0 - mu[g, 0]
                        dy = y1 - mu[g, 1]
                        dz = y2 - mu[g, 2]
                        m = (p6[g, 0] * dx * dx + p6[g, 1] * dy * dy
                             + p6[g, 2] * dz * dz
                             + 2.0 * (p6[g, 3] * dx * dy + p6[g, 4] * dx * dz
                                      + p6[g, 5] * dy * dz))
                        a = alpha[g] * math.exp(-0.5 * m)
                        if a > ALPHA_CEIL:
                            a = ALPHA_CEIL
                        prod *= 1.0 - a
                    chi[i, j, k] = 1.0 - prod


@njit(cache=True)
def mask_tiles_backward(mu, p6, alpha, tile_lo, tile_hi, offsets, contrib,
                        origin, h, transform, B, xt, xref, chi, dchi,
                        g_alpha, g_mu, g_p6, g_xt_body, g_pose_outer):
    """Backward pass of the mask: recompute contributions and accumulate grads.

    Outputs (all accumulated in place):
      g_alpha (N,), g_mu (N,3), g_p6 (N,6): per-Gaussian partials w.r.t.
        base opacity, mean and the packed inverse covariance.
      g_xt_body (3,): sum over cells of dL/dy (body-frame query cotangent),
        used by the posed-mask pose adjoint.
      g_pose_outer (3,3): sum of (x - xt) outer dL/dy for the orientation
        adjoint.
    """
    ntiles = tile_lo.shape[0]
    for t in range(ntiles):
        i0, j0, k0 = tile_lo[t, 0], tile_lo[t, 1], tile_lo[t, 2]
        i1, j1, k1 = tile_hi[t, 0], tile_hi[t, 1], tile_hi[t, 2]
        lo, hi = offsets[t], offsets[t + 1]
        if hi == lo:
            continue
        for i in range(i0, i1):
            for j in range(j0, j1):
                for k in range(k0, k1):
                    gc = dchi[i, j, k]
                    if gc == 0.0:
                        continue
                    x0 = origin[0] + h * i
                    x1 = origin[1] + h * j
                    x2 = origin[2] + h * k
                    if transform:
                        r0 = x0 - xt[0]
                        r1 = x1 - xt[1]
                        r2 = x2 - xt[2]
                        y0 = B[0, 0] * r0 + B[0, 1] * r1 + B[0, 2] * r2 + xref[0]
                        y1 = B[1, 0] * r0 + B[1, 1] * r1 + B[1, 2] * r2 + xref[1]
                        y2 = B[2, 0] * r0 + B[2, 1] * r1 + B[2, 2] * r2 + xref[2]
                    else:
                        y0, y1, y2 = x0, x1, x2
                    prod = 1.0 - chi[i, j, k]
                    for c in range(lo, hi):
                        g = contrib[c]
                        dx = y0 - mu[g, 0]
                        dy = y1 - mu[g, 1]
                        dz = y2 - mu[g, 2]
                        m = (p6[g, 0] * dx * dx + p6[g, 1] * dy * dy
                             + p6[g, 2] * dz * dz
                             + 2.0 * (p6[g, 3] * dx * dy + p6[g, 4] * dx * dz
                                      + p6[g, 5] * dy * dz))
                        e = math.exp(-0.5 * m)
                        a_raw = alpha[g] * e
                        if a_raw > ALPHA_CEIL:
                            continue  # zero subgradient through the clamp
                        # d chi / d a = product over the other Gaussians
                        g_a = gc * prod / (1.0 - a_raw)
                        g_alpha[g] += g_a * e
                        g_m = -0.5 * a_raw * g_a
                        pdx = p6[g, 0] * dx + p6[g, 3] * dy + p6[g, 4] * dz
                        pdy = p6[g, 3] * dx + p6[g, 1] * dy + p6[g, 5] * dz
                        pdz = p6[g, 4] * dx + p6[g, 5] * dy + p6[g, 2] * dz
                        g_mu[g, 0] += g_m * (-2.0 * pdx)
                        g_mu[g, 1] += g_m * (-2.0 * pdy)
                        g_mu[g, 2] += g_m * (-2.0 * pdz)
                        g_p6[g, 0] += g_m * dx * dx
                        g_p6[g, 1] += g_m * dy * dy
                        g_p6[g, 2] += g_m * dz * dz
                        g_p6[g, 3] += g_m * 2.0 * dx * dy
                        g_p6[g, 4] += g_m * 2.0 * dx * dz
                        g_p6[g, 5] += g_m * 2.0 * dy * dz
                        if transform:
                            ty0 = g_m * 2.0 * pdx
                            ty1 = g_m * 2.0 * pdy
                            ty2 = g_m * 2.0 * pdz
                            g_xt_body[0] += ty0
                            g_xt_body[1] += ty1
                            g_xt_body[2] += ty2
                            g_pose_outer[0, 0] += r0 * ty0
                            g_pose_outer[0, 1] += r0 * ty1
                            g_pose_outer[0, 2] += r0 * ty2
                            g_pose_outer[1, 0] += r1 * ty0
                            g_pose_outer[1, 1] += r1 * ty1
                            g_pose_outer[1, 2] += r1 * ty2
                            g_pose_outer[2, 0] += r2 * ty0
                            g_pose_outer[2, 1] += r2 * ty1
                            g_pose_outer[2, 2] += r2 * ty2


# ---------------------------------------------------------------------------
# Semi-Lagrangian advection
# ---------------------------------------------------------------------------

@njit(cache=True)
def advect_fields(srcs, ux, uy, uz, dth, outs):
    """Gather-style semi-Lagrangian transport of C fields by one carrier.

    Backtraced index positions are clamped to the cell-center box
    [0, n-1] per axis; interpolation is trilinear.
    """
    nc = srcs.shape[0]
    nx, ny, nz = ux.shape
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                fi = i - dth * ux[i, j, k]
                fj = j - dth * uy[i, j, k]
                fk = k - dth * uz[i, j, k]
                if fi < 0.0:
                    fi = 0.0
                elif fi > nx - 1.0:
                    fi = nx - 1.0
                if fj < 0.0:
                    fj = 0.0
                elif fj > ny - 1.0:
                    fj = ny - 1.0
                if fk < 0.0:
                    fk = 0.0
                elif fk > nz - 1.0:
                    fk = nz - 1.0
                i0 = int(fi)
                j0 = int(fj)
                k0 = int(fk)
                if i0 > nx - 2:
                    i0 = nx - 2
                if j0 > ny - 2:
                    j0 = ny - 2
                if k0 > nz - 2:
                    k0 = nz - 2
                if i0 < 0:
                    i0 = 0
                if j0 < 0:
                    j0 = 0
                if k0 < 0:
                    k0 = 0
                tx = fi - i0
                ty = fj - j0
                tz = fk - k0
                for c in range(nc):
                    s = srcs[c]
                    c00 = s[i0, j0, k0] * (1 - tx) + s[i0 + 1, j0, k0] * tx
                    c10 = s[i0, j0 + 1, k0] * (1 - tx) + s[i0 + 1, j0 + 1, k0] * tx
                    c01 = s[i0, j0, k0 + 1] * (1 - tx) + s[i0 + 1, j0, k0 + 1] * tx
                    c11 = s[i0, j0 + 1, k0 + 1] * (1 - tx) + s[i0 + 1, j0 + 1, k0 + 1] * tx
                    c0 = c00 * (1 - ty) + c10 * ty
                    c1 = c01 * (1 - ty) + c11 * ty
                    outs[c][i, j, k] = c0 * (1 - tz) + c1 * tz


@njit(cache=True)
def advect_fields_backward(gouts, srcs, ux, uy, uz, dth, gsrcs, gux, guy, guz):
    """Adjoint of advect_fields.

    Scatters output cotangents through the trilinear weights into gsrcs and
    accumulates the carrier-velocity cotangent (zero where the backtrace
    was clamped).
    """
    nc = srcs.shape[0]
    nx, ny, nz = ux.shape
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                fi = i - dth * ux[i, j, k]
                fj = j - dth * uy[i, j, k]
                fk = k - dth * uz[i, j, k]
                ci = fi < 0.0 or fi > nx - 1.0
                cj = fj < 0.0 or fj > ny - 1.0
                ck = fk < 0.0 or fk > nz - 1.0
                if fi < 0.0:
                    fi = 0.0
                elif fi > nx - 1.0:
                    fi = nx - 1.0
                if fj < 0.0:
                    fj = 0.0
                elif fj > ny - 1.0:
                    fj = ny - 1.0
                if fk < 0.0:
                    fk = 0.0
                elif fk > nz - 1.0:
                    fk = nz - 1.0
                i0 = int(fi)
                j0 = int(fj)
                k0 = int(fk)
                if i0 > nx - 2:
                    i0 = nx - 2
                if j0 > ny - 2:
                    j0 = ny - 2
                if k0 > nz - 2:
                    k0 = nz - 2
                if i0 < 0:
                    i0 = 0
                if j0 < 0:
                    j0 = 0
                if k0 < 0:
                    k0 = 0
                tx = fi - i0
                ty = fj - j0
                tz = fk - k0
                dudx = 0.0
                dudy = 0.0
                dudz = 0.0
                for c in range(nc):
                    g = gouts[c][i, j, k]
                    if g == 0.0:
                        continue
                    s = srcs[c]
                    gs = gsrcs[c]
                    w000 = (1 - tx) * (1 - ty) * (1 - tz)
                    w100 = tx * (1 - ty) * (1 - tz)
                    w010 = (1 - tx) * ty * (1 - tz)
                    w110 = tx * ty * (1 - tz)
                    w001 = (1 - tx) * (1 - ty) * tz
                    w101 = tx * (1 - ty) * tz
                    w011 = (1 - tx) * ty * tz
                    w111 = tx * ty * tz
                    gs[i0, j0, k0] += g * w000
                    gs[i0 + 1, j0, k0] += g * w100
                    gs[i0, j0 + 1, k0] += g * w010
                    gs[i0 + 1, j0 + 1, k0] += g * w110
                    gs[i0, j0, k0 + 1] += g * w001
                    gs[i0 + 1, j0, k0 + 1] += g * w101
                    gs[i0, j0 + 1, k0 + 1] += g * w011
                    gs[i0 + 1, j0 + 1, k0 + 1] += g * w111
                    # d(interp)/d(fractional index) per axis
                    dfx = (((s[i0 + 1, j0, k0] - s[i0, j0, k0]) * (1 - ty)
                            + (s[i0 + 1, j0 + 1, k0] - s[i0, j0 + 1, k0]) * ty) * (1 - tz)
                           + ((s[i0 + 1, j0, k0 + 1] - s[i0, j0, k0 + 1]) * (1 - ty)
                              + (s[i0 + 1, j0 + 1, k0 + 1] - s[i0, j0 + 1, k0 + 1]) * ty) * tz)
                    dfy = (((s[i0, j0 + 1, k0] - s[i0, j0, k0]) * (1 - tx)
                            + (s[i0 + 1, j0 + 1, k0] - s[i0 + 1, j0, k0]) * tx) * (1 - tz)
                           + ((s[i0, j0 + 1, k0 + 1] - s[i0, j0, k0 + 1]) * (1 - tx)
                              + (s[i0 + 1, j0 + 1, k0 + 1] - s[i0 + 1, j0, k0 + 1]) * tx) * tz)
                    dfz = (((s[i0, j0, k0 + 1] - s[i0, j0, k0]) * (1 - tx)
                            + (s[i0 + 1, j0, k0 + 1] - s[i0 + 1, j0, k0]) * tx) * (1 - ty)
                           + ((s[i0, j0 + 1, k0 + 1] - s[i0, j0 + 1, k0]) * (1 - tx)
                              + (s[i0 + 1, j0 + 1, k0 + 1] - s[i0 + 1, j0 + 1, k0]) * tx) * ty)
                    dudx += g * dfx
                    dudy += g * dfy
                    dudz += g * dfz
                if not ci:
                    gux[i, j, k] += dudx * (-dth)
                if not cj:
                    guy[i, j, k] += dudy * (-dth)
                if not ck:
                    guz[i, j, k] += dudz * (-dth)


# ---------------------------------------------------------------------------
# Pressure Poisson system
# ---------------------------------------------------------------------------
#
# The cell-centered gradient g uses central differences with mirrored end
# rows and the divergence is defined as -g^T. Pressure acts on velocity
# through the wall-masked gradient W g (zero normal component on boundary
# cells, the discrete Neumann condition), so the Poisson operator is
# A = g^T W g: symmetric positive semidefinite, consistent for every
# wall-respecting velocity. Checkerboard vectors lie in its nullspace but
# never enter CG iterates (the Krylov space is orthogonal to them) and
# produce no velocity either.

@njit(cache=True)
def _apply_g_axis0(p, out, inv2h):
    nx, ny, nz = p.shape
    for j in range(ny):
        for k in range(nz):
            if nx == 1:
                out[0, j, k] = 0.0
                continue
            out[0, j, k] = (p[1, j, k] - p[0, j, k]) * inv2h
            for i in range(1, nx - 1):
                out[i, j, k] = (p[i + 1, j, k] - p[i - 1, j, k]) * inv2h
            out[nx - 1, j, k] = (p[nx - 1, j, k] - p[nx - 2, j, k]) * inv2h


@njit(cache=True)
def _apply_g_axis1(p, out, inv2h):
    nx, ny, nz = p.shape
    for i in range(nx):
        for k in range(nz):
            if ny == 1:
                out[i, 0, k] = 0.0
                continue
            out[i, 0, k] = (p[i, 1, k] - p[i, 0, k]) * inv2h
            for j in range(1, ny - 1):
                out[i, j, k] = (p[i, j + 1, k] - p[i, j - 1, k]) * inv2h
            out[i, ny - 1, k] = (p[i, ny - 1, k] - p[i, ny - 2, k]) * inv2h


@njit(cache=True)
def _apply_g_axis2(p, out, inv2h):
    nx, ny, nz = p.shape
    for i in range(nx):
        for j in range(ny):
            if nz == 1:
                out[i, j, 0] = 0.0
                continue
            out[i, j, 0] = (p[i, j, 1] - p[i, j, 0]) * inv2h
            for k in range(1, nz - 1):
                out[i, j, k] = (p[i, j, k + 1] - p[i, j, k - 1]) * inv2h
            out[i, j, nz - 1] = (p[i, j, nz - 1] - p[i, j, nz - 2]) * inv2h


@njit(cache=True)
def _apply_gT_axis0(v, out, inv2h):
    nx, ny, nz = v.shape
    for j in range(ny):
        for k in range(nz):
            if nx == 1:
                continue
            out[0, j, k] -= v[0, j, k] * inv2h
            out[1, j, k] += v[0, j, k] * inv2h
            for i in range(1, nx - 1):
                out[i - 1, j, k] -= v[i, j, k] * inv2h
                out[i + 1, j, k] += v[i, j, k] * inv2h
            out[nx - 2, j, k] -= v[nx - 1, j, k] * inv2h
            out[nx - 1, j, k] += v[nx - 1, j, k] * inv2h


@njit(cache=True)
def _apply_gT_axis1(v, out, inv2h):
    nx, ny, nz = v.shape
    for i in range(nx):
        for k in range(nz):
            if ny == 1:
                continue
            out[i, 0, k] -= v[i, 0, k] * inv2h
            out[i, 1, k] += v[i, 0, k] * inv2h
            for j in range(1, ny - 1):
                out[i, j - 1, k] -= v[i, j, k] * inv2h
                out[i, j + 1, k] += v[i, j, k] * inv2h
            out[i, ny - 2, k] -= v[i, ny - 1, k] * inv2h
            out[i, ny - 1, k] += v[i, ny - 1, k] * inv2h


@njit(cache=True)
def _apply_gT_axis2(v, out, inv2h):
    nx, ny, nz = v.shape
    for i in range(nx):
        for j in range(ny):
            if nz == 1:
                continue
            out[i, j, 0] -= v[i, j, 0] * inv2h
            out[i, j, 1] += v[i, j, 0] * inv2h
            for k in range(1, nz - 1):
                out[i, j, k - 1] -= v[i, j, k] * inv2h
                out[i, j, k + 1] += v[i, j, k] * inv2h
            out[i, j, nz - 2] -= v[i, j, nz - 1] * inv2h
            out[i, j, nz - 1] += v[i, j, nz - 1] * inv2h


@njit(cache=True)
def _mask_axis0(v):
    nx = v.shape[0]
    v[0, :, :] = 0.0
    v[nx - 1, :, :] = 0.0


@njit(cache=True)
def _mask_axis1(v):
    ny = v.shape[1]
    v[:, 0, :] = 0.0
    v[:, ny - 1, :] = 0.0


@njit(cache=True)
def _mask_axis2(v):
    nz = v.shape[2]
    v[:, :, 0] = 0.0
    v[:, :, nz - 1] = 0.0


@njit(cache=True)
def gradient_op(p, h):
    """Cell-centered pressure gradient (3, nx, ny, nz), unmasked."""
    inv2h = 1.0 / (2.0 * h)
    out = np.empty((3,) + p.shape, dtype=np.float64)
    _apply_g_axis0(p, out[0], inv2h)
    _apply_g_axis1(p, out[1], inv2h)
    _apply_g_axis2(p, out[2], inv2h)
    return out


@njit(cache=True)
def gradient_masked_op(p, h):
    """Wall-masked pressure gradient W g p (zero normal entries at walls)."""
    out = gradient_op(p, h)
    _mask_axis0(out[0])
    _mask_axis1(out[1])
    _mask_axis2(out[2])
    return out


@njit(cache=True)
def divergence_op(u, h):
    """Discrete divergence, defined as the negative adjoint of gradient_op."""
    inv2h = 1.0 / (2.0 * h)
    out = np.zeros(u.shape[1:], dtype=np.float64)
    _apply_gT_axis0(u[0], out, inv2h)
    _apply_gT_axis1(u[1], out, inv2h)
    _apply_gT_axis2(u[2], out, inv2h)
    return -out


@njit(cache=True)
def apply_poisson(p, h):
    """A p with A = g^T W g (PSD; constants and checkerboards in the nullspace)."""
    inv2h = 1.0 / (2.0 * h)
    tmp = np.empty_like(p)
    out = np.zeros_like(p)
    _apply_g_axis0(p, tmp, inv2h)
    _mask_axis0(tmp)
    _apply_gT_axis0(tmp, out, inv2h)
    _apply_g_axis1(p, tmp, inv2h)
    _mask_axis1(tmp)
    _apply_gT_axis1(tmp, out, inv2h)
    _apply_g_axis2(p, tmp, inv2h)
    _mask_axis2(tmp)
    _apply_gT_axis2(tmp, out, inv2h)
    return out


@njit(cache=True)
def _dot(a, b):
    nx, ny, nz = a.shape
    s = 0.0
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                s += a[i, j, k] * b[i, j, k]
    return s


@njit(cache=True)
def _max_abs(a):
    nx, ny, nz = a.shape
    m = 0.0
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                v = abs(a[i, j, k])
                if v > m:
                    m = v
    return m


@njit(cache=True)
def cg_poisson(b, x0, h, tol, max_iters):
    """Conjugate gradients on A x = b with A = g^T g.

    Stops when the true sup-norm residual satisfies |r|_inf <= tol * |b|_inf.
    Returns (x, iterations, relative_residual).
    """
    b_inf = _max_abs(b)
    x = x0.copy()
    if b_inf == 0.0:
        return np.zeros_like(b), 0, 0.0
    r = b - apply_poisson(x, h)
    if _max_abs(r) <= tol * b_inf:
        return x, 0, _max_abs(r) / b_inf
    p = r.copy()
    rs = _dot(r, r)
    it = 0
    while it < max_iters:
        Ap = apply_poisson(p, h)
        pAp = _dot(p, Ap)
        if pAp <= 0.0:
            break
        a = rs / pAp
        nx, ny, nz = x.shape
        for i in range(nx):
            for j in range(ny):
                for k in range(nz):
                    x[i, j, k] += a * p[i, j, k]
                    r[i, j, k] -= a * Ap[i, j, k]
        it += 1
        if _max_abs(r) <= tol * b_inf:
            # guard against drift in the recurrence residual
            r_true = b - apply_poisson(x, h)
            if _max_abs(r_true) <= tol * b_inf:
                return x, it, _max_abs(r_true) / b_inf
            r = r_true
            p = r.copy()
            rs = _dot(r, r)
            continue
        rs_new = _dot(r, r)
        beta = rs_new / rs
        for i in range(nx):
            for j in range(ny):
                for k in range(nz):
                    p[i, j, k] = r[i, j, k] + beta * p[i, j, k]
        rs = rs_new
    return x, it, _max_abs(b - apply_poisson(x, h)) / b_inf
