"""Minimal differentiable Gaussian rasterizer and the visual loss.

Projection is linearized around each Gaussian mean (pinhole Jacobian),
screen-space footprints get a 0.3 px^2 dilation floor, and pixels composite
depth-sorted contributions front to back. Everything runs on the CPU at
desk resolutions; gradients are exact, including the second-order terms of
the projection Jacobian and the view-direction dependence of the SH color.

Pixel (row r, col c) samples the image plane at coordinates (u, v) = (c, r).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import ssim as ssim_mod
from .errors import ContractViolation
from .mathutil import quat_to_rotmat_batch, rotmat_quat_jacobian
from .scene import Camera, GaussianSet, GradBuffer

NEAR_PLANE = 0.01
COV2D_FLOOR = 0.3       # px^2 dilation added to screen-space covariance
CONTRIB_CUTOFF = 1.0 / 255.0
CULL_SIGMA = 3.0
SSIM_WEIGHT = 0.2

# Real spherical harmonics constants (common 3DGS ordering and signs)
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
         0.3731763325901154, -0.4570457994644658, 1.4453057213202769,
         -0.5900435899266435)


def sh_basis(degree: int, d: np.ndarray) -> np.ndarray:
    """Real SH basis values for a unit direction; shape ((L+1)^2,)."""
    x, y, z = d
    out = np.empty((degree + 1) ** 2, dtype=np.float64)
    out[0] = SH_C0
    if degree >= 1:
        out[1] = -SH_C1 * y
        out[2] = SH_C1 * z
        out[3] = -SH_C1 * x
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        out[4] = SH_C2[0] * x * y
        out[5] = SH_C2[1] * y * z
        out[6] = SH_C2[2] * (2.0 * zz - xx - yy)
        out[7] = SH_C2[3] * x * z
        out[8] = SH_C2[4] * (xx - yy)
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        out[9] = SH_C3[0] * y * (3.0 * xx - yy)
        out[10] = SH_C3[1] * x * y * z
        out[11] = SH_C3[2] * y * (4.0 * zz - xx - yy)
        out[12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
        out[13] = SH_C3[4] * x * (4.0 * zz - xx - yy)
        out[14] = SH_C3[5] * z * (xx - yy)
        out[15] = SH_C3[6] * x * (xx - 3.0 * yy)
    if degree >= 4:
        raise ContractViolation("SH degrees above 3 are not supported")
    return out


def sh_basis_grad(degree: int, d: np.ndarray) -> np.ndarray:
    """d(basis)/d(direction): shape ((L+1)^2, 3)."""
    x, y, z = d
    n = (degree + 1) ** 2
    out = np.zeros((n, 3), dtype=np.float64)
    if degree >= 1:
        out[1] = (0.0, -SH_C1, 0.0)
        out[2] = (0.0, 0.0, SH_C1)
        out[3] = (-SH_C1, 0.0, 0.0)
    if degree >= 2:
        out[4] = (SH_C2[0] * y, SH_C2[0] * x, 0.0)
        out[5] = (0.0, SH_C2[1] * z, SH_C2[1] * y)
        out[6] = (-2.0 * SH_C2[2] * x, -2.0 * SH_C2[2] * y, 4.0 * SH_C2[2] * z)
        out[7] = (SH_C2[3] * z, 0.0, SH_C2[3] * x)
        out[8] = (2.0 * SH_C2[4] * x, -2.0 * SH_C2[4] * y, 0.0)
    if degree >= 3:
        out[9] = (SH_C3[0] * 6.0 * x * y, SH_C3[0] * (3.0 * x * x - 3.0 * y * y), 0.0)
        out[10] = (SH_C3[1] * y * z, SH_C3[1] * x * z, SH_C3[1] * x * y)
        out[11] = (-2.0 * SH_C3[2] * x * y, SH_C3[2] * (4.0 * z * z - x * x - 3.0 * y * y),
                   8.0 * SH_C3[2] * y * z)
        out[12] = (-6.0 * SH_C3[3] * x * z, -6.0 * SH_C3[3] * y * z,
                   SH_C3[3] * (6.0 * z * z - 3.0 * x * x - 3.0 * y * y))
        out[13] = (SH_C3[4] * (4.0 * z * z - 3.0 * x * x - y * y), -2.0 * SH_C3[4] * x * y,
                   8.0 * SH_C3[4] * x * z)
        out[14] = (2.0 * SH_C3[5] * x * z, -2.0 * SH_C3[5] * y * z,
                   SH_C3[5] * (x * x - y * y))
        out[15] = (SH_C3[6] * (3.0 * x * x - 3.0 * y * y), -6.0 * SH_C3[6] * x * y, 0.0)
    return out


def sh_color(coeffs: np.ndarray, d: np.ndarray) -> np.ndarray:
    """Clamped RGB from SH coefficients (3, (L+1)^2) and a unit direction."""
    coeffs = np.asarray(coeffs, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    if abs(np.linalg.norm(d) - 1.0) > 1e-6:
        raise ContractViolation("viewing direction must be unit length")
    degree = int(round(math.sqrt(coeffs.shape[-1]))) - 1
    return np.clip(coeffs @ sh_basis(degree, d), 0.0, 1.0)


@dataclass
class ProjectedGaussian:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    color: np.ndarray
    alpha: float
    index: int = -1


@dataclass
class RenderTarget:
    rgb: np.ndarray            # H x W x 3 in [0,1]
    transmittance: np.ndarray  # H x W


@dataclass
class _Projection:
    """Vectorized projection of every Gaussian (pre-culling)."""

    mu_cam: np.ndarray
    mean2d: np.ndarray
    jc: np.ndarray
    cov2d: np.ndarray
    color_raw: np.ndarray
    color: np.ndarray
    dirs: np.ndarray
    wlen: np.ndarray
    alpha: np.ndarray
    valid: np.ndarray
    order: np.ndarray


def _project_all(gset: GaussianSet, cam: Camera) -> _Projection:
    n = len(gset)
    R = cam.rotation
    mu_cam = gset.means @ R.T + cam.translation
    z = mu_cam[:, 2]
    u = cam.fx * mu_cam[:, 0] / z + cam.cx
    v = cam.fy * mu_cam[:, 1] / z + cam.cy
    mean2d = np.stack([u, v], axis=1)
    jc = np.zeros((n, 2, 3))
    jc[:, 0, 0] = cam.fx / z
    jc[:, 0, 2] = -cam.fx * mu_cam[:, 0] / (z * z)
    jc[:, 1, 1] = cam.fy / z
    jc[:, 1, 2] = -cam.fy * mu_cam[:, 1] / (z * z)
    Rg = quat_to_rotmat_batch(gset.rotations)
    s2 = np.exp(2.0 * gset.log_scales)
    sigma = np.einsum("nab,nb,ncb->nac", Rg, s2, Rg)
    vcam = np.einsum("ab,nbc,dc->nad", R, sigma, R)
    cov2d = np.einsum("nab,nbc,ndc->nad", jc, vcam, jc) + COV2D_FLOOR * np.eye(2)
    # view direction from the Gaussian toward the camera
    wvec = cam.center[None, :] - gset.means
    wlen = np.linalg.norm(wvec, axis=1)
    wlen = np.where(wlen > 0, wlen, 1.0)
    dirs = wvec / wlen[:, None]
    basis = np.stack([sh_basis(gset.sh_degree, dirs[i]) for i in range(n)]) \
        if n else np.zeros((0, (gset.sh_degree + 1) ** 2))
    color_raw = np.einsum("ncb,nb->nc", gset.sh_coeffs, basis)
    color = np.clip(color_raw, 0.0, 1.0)
    alpha = gset.opacities
    # culling: near plane, then screen bound by CULL_SIGMA of the major axis
    tr = cov2d[:, 0, 0] + cov2d[:, 1, 1]
    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
    lam_max = 0.5 * tr + np.sqrt(np.maximum(0.25 * tr * tr - det, 0.0))
    radius = CULL_SIGMA * np.sqrt(np.maximum(lam_max, 0.0))
    valid = (z > NEAR_PLANE)
    valid &= (mean2d[:, 0] + radius >= 0) & (mean2d[:, 0] - radius <= cam.width - 1)
    valid &= (mean2d[:, 1] + radius >= 0) & (mean2d[:, 1] - radius <= cam.height - 1)
    idx = np.nonzero(valid)[0]
    order = idx[np.argsort(z[idx], kind="stable")]
    return _Projection(mu_cam, mean2d, jc, cov2d, color_raw, color, dirs, wlen,
                       alpha, valid, order)


def project_gaussian(gset: GaussianSet, index: int, cam: Camera):
    """Project one Gaussian; returns None when culled."""
    proj = _project_all(gset, cam)
    if not proj.valid[index]:
        return None
    return ProjectedGaussian(proj.mean2d[index], proj.cov2d[index],
                             float(proj.mu_cam[index, 2]), proj.color[index],
                             float(proj.alpha[index]), index)


@dataclass
class _Contribution:
    index: int
    x0: int
    x1: int
    y0: int
    y1: int
    a: np.ndarray       # alpha * G with the 1/255 cutoff applied (0 = skipped)
    gval: np.ndarray
    t_before: np.ndarray


@dataclass
class RenderTape:
    proj: _Projection
    contribs: list
    target: RenderTarget


def _rasterize(gset: GaussianSet, cam: Camera, keep: bool):
    proj = _project_all(gset, cam)
    h, w = cam.height, cam.width
    rgb = np.zeros((h, w, 3))
    T = np.ones((h, w))
    contribs = []
    for i in proj.order:
        mx, my = proj.mean2d[i]
        c2 = proj.cov2d[i]
        tr = c2[0, 0] + c2[1, 1]
        det = c2[0, 0] * c2[1, 1] - c2[0, 1] ** 2
        lam_max = 0.5 * tr + math.sqrt(max(0.25 * tr * tr - det, 0.0))
        r = CULL_SIGMA * math.sqrt(max(lam_max, 0.0))
        x0 = max(int(math.ceil(mx - r)), 0)
        x1 = min(int(math.floor(mx + r)), w - 1)
        y0 = max(int(math.ceil(my - r)), 0)
        y1 = min(int(math.floor(my + r)), h - 1)
        if x0 > x1 or y0 > y1:
            continue
        q00, q01, q11 = _conic(c2)
        xs = np.arange(x0, x1 + 1, dtype=np.float64) - mx
        ys = np.arange(y0, y1 + 1, dtype=np.float64) - my
        dx = xs[None, :]
        dy = ys[:, None]
        m = q00 * dx * dx + 2.0 * q01 * dx * dy + q11 * dy * dy
        gval = np.exp(-0.5 * m)
        a = proj.alpha[i] * gval
        a[a < CONTRIB_CUTOFF] = 0.0
        tb = T[y0:y1 + 1, x0:x1 + 1].copy()
        rgb[y0:y1 + 1, x0:x1 + 1] += (tb * a)[:, :, None] * proj.color[i][None, None, :]
        T[y0:y1 + 1, x0:x1 + 1] = tb * (1.0 - a)
        if keep:
            contribs.append(_Contribution(int(i), x0, x1, y0, y1, a, gval, tb))
    target = RenderTarget(rgb, T)
    return target, (RenderTape(proj, contribs, target) if keep else None)


def _conic(c2: np.ndarray):
    det = c2[0, 0] * c2[1, 1] - c2[0, 1] ** 2
    return c2[1, 1] / det, -c2[0, 1] / det, c2[0, 0] / det


def render(gset: GaussianSet, cam: Camera) -> RenderTarget:
    """Composite the scene front to back over a black background."""
    target, _ = _rasterize(gset, cam, keep=False)
    return target


def render_with_tape(gset: GaussianSet, cam: Camera):
    return _rasterize(gset, cam, keep=True)


def render_backward(tape: RenderTape, gset: GaussianSet, cam: Camera,
                    g_rgb: np.ndarray, grads: GradBuffer) -> None:
    """Accumulate d(loss)/d(parameters) for a rendered image cotangent."""
    proj = tape.proj
    h, w = cam.height, cam.width
    if g_rgb.shape != (h, w, 3):
        raise ContractViolation(f"image cotangent shape {g_rgb.shape} != {(h, w, 3)}")
    n = len(gset)
    g_mean2d = np.zeros((n, 2))
    g_cov2d = np.zeros((n, 2, 2))
    g_color = np.zeros((n, 3))
    g_alpha = np.zeros(n)
    behind = np.zeros((h, w, 3))
    for con in reversed(tape.contribs):
        i = con.index
        sl = (slice(con.y0, con.y1 + 1), slice(con.x0, con.x1 + 1))
        gC = g_rgb[sl]
        col = proj.color[i]
        bh = behind[sl]
        # dL/da = sum_c gC * T * (c - behind); dL/dc = sum_px gC * T * a
        ta = con.t_before * con.a
        g_a = np.einsum("yxc,yx,c->yx", gC, con.t_before, col) \
            - np.einsum("yxc,yxc->yx", gC, bh) * con.t_before
        g_color[i] += np.einsum("yxc,yx->c", gC, ta)
        # update running 'color behind' before moving to the nearer Gaussian
        behind[sl] = con.a[:, :, None] * col[None, None, :] + (1.0 - con.a[:, :, None]) * bh
        live = con.a > 0.0
        if not np.any(live):
            continue
        g_a = np.where(live, g_a, 0.0)
        g_alpha[i] += float(np.sum(g_a * con.gval))
        g_G = g_a * proj.alpha[i]
        q00, q01, q11 = _conic(proj.cov2d[i])
        xs = np.arange(con.x0, con.x1 + 1, dtype=np.float64) - proj.mean2d[i, 0]
        ys = np.arange(con.y0, con.y1 + 1, dtype=np.float64) - proj.mean2d[i, 1]
        dx = np.broadcast_to(xs[None, :], con.a.shape)
        dy = np.broadcast_to(ys[:, None], con.a.shape)
        gg = g_G * con.gval
        qdx = q00 * dx + q01 * dy
        qdy = q01 * dx + q11 * dy
        # dG/d(delta) = -G * Q delta ; delta = pix - mean2d
        g_mean2d[i, 0] += np.sum(gg * qdx)
        g_mean2d[i, 1] += np.sum(gg * qdy)
        # dG/dQ = -G/2 * delta delta^T, then dL/dC = -Q gQ Q
        gq00 = -0.5 * np.sum(gg * dx * dx)
        gq01 = -np.sum(gg * dx * dy)
        gq11 = -0.5 * np.sum(gg * dy * dy)
        gQ = np.array([[gq00, 0.5 * gq01], [0.5 * gq01, gq11]])
        Q = np.array([[q00, q01], [q01, q11]])
        g_cov2d[i] += -Q @ gQ @ Q
    _chain_projection(gset, cam, proj, g_mean2d, g_cov2d, g_color, g_alpha, grads)


def _chain_projection(gset: GaussianSet, cam: Camera, proj: _Projection,
                      g_mean2d, g_cov2d, g_color, g_alpha, grads: GradBuffer) -> None:
    """Chain screen-space cotangents back to the 3D Gaussian parameters."""
    n = len(gset)
    R = cam.rotation
    alpha = gset.opacities
    grads.opacity_logits += g_alpha * alpha * (1.0 - alpha)
    degree = gset.sh_degree
    Rg = quat_to_rotmat_batch(gset.rotations)
    s2 = np.exp(2.0 * gset.log_scales)
    sigma = np.einsum("nab,nb,ncb->nac", Rg, s2, Rg)
    for i in range(n):
        if not proj.valid[i]:
            continue
        touched = np.any(g_mean2d[i]) or np.any(g_cov2d[i]) or np.any(g_color[i])
        if not touched and g_alpha[i] == 0.0:
            continue
        g_mu = np.zeros(3)
        # color path: clamp subgradient, SH basis, view direction
        live = (proj.color_raw[i] > 0.0) & (proj.color_raw[i] < 1.0)
        gc = np.where(live, g_color[i], 0.0)
        if np.any(gc):
            basis = sh_basis(degree, proj.dirs[i])
            grads.sh_coeffs[i] += gc[:, None] * basis[None, :]
            dbasis = sh_basis_grad(degree, proj.dirs[i])
            g_dir = (gc @ gset.sh_coeffs[i]) @ dbasis
            d = proj.dirs[i]
            g_w = (g_dir - d * float(d @ g_dir)) / proj.wlen[i]
            g_mu -= g_w
        if np.any(g_mean2d[i]) or np.any(g_cov2d[i]):
            jc = proj.jc[i]
            gC = 0.5 * (g_cov2d[i] + g_cov2d[i].T)
            vcam = R @ sigma[i] @ R.T
            g_jc = 2.0 * gC @ jc @ vcam
            g_vcam = jc.T @ gC @ jc
            g_sigma = R.T @ g_vcam @ R
            # covariance chain (D = s^2 here)
            G = 0.5 * (g_sigma + g_sigma.T)
            RtGR = Rg[i].T @ G @ Rg[i]
            grads.log_scales[i] += np.diag(RtGR) * (2.0 * s2[i])
            dRg = 2.0 * G @ Rg[i] @ np.diag(s2[i])
            Jq = rotmat_quat_jacobian(gset.rotations[i])
            grads.rotations[i] += np.einsum("ab,qab->q", dRg, Jq)
            # mean path: projection + Jacobian second-order terms
            g_muc = jc.T @ g_mean2d[i]
            x, y, z = proj.mu_cam[i]
            fx, fy = cam.fx, cam.fy
            g_muc[0] += g_jc[0, 2] * (-fx / (z * z))
            g_muc[1] += g_jc[1, 2] * (-fy / (z * z))
            g_muc[2] += (g_jc[0, 0] * (-fx / (z * z))
                         + g_jc[0, 2] * (2.0 * fx * x / z ** 3)
                         + g_jc[1, 1] * (-fy / (z * z))
                         + g_jc[1, 2] * (2.0 * fy * y / z ** 3))
            g_mu += R.T @ g_muc
        grads.means[i] += g_mu


# ---------------------------------------------------------------------------
# Visual loss
# ---------------------------------------------------------------------------

def visual_loss(rendered, target: np.ndarray, w_ssim: float = SSIM_WEIGHT):
    """(1 - w) L1 + w (1 - SSIM); returns (loss, d(loss)/d(rendered), parts).

    L1 is the mean absolute difference over pixels and channels. The L1
    subgradient at exact ties is zero.
    """
    img = rendered.rgb if isinstance(rendered, RenderTarget) else np.asarray(rendered)
    target = np.asarray(target, dtype=np.float64)
    if img.shape != target.shape:
        raise ContractViolation(f"image shapes differ: {img.shape} vs {target.shape}")
    diff = img - target
    l1 = float(np.mean(np.abs(diff)))
    g_l1 = np.sign(diff) / diff.size
    sval, g_ssim = ssim_mod.ssim(img, target, grad=True)
    loss = (1.0 - w_ssim) * l1 + w_ssim * (1.0 - sval)
    grad = (1.0 - w_ssim) * g_l1 - w_ssim * g_ssim
    return loss, grad, {"l1": l1, "ssim": float(sval)}
