"""Quaternion and small-matrix helpers.

Quaternions are stored as (w, x, y, z). Rotation matrices follow the
standard unit-quaternion formula without internal renormalization, so
derivatives are exact at the current (near-unit) point.
"""

from __future__ import annotations

import numpy as np


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """3x3 rotation matrix for a single quaternion (w, x, y, z)."""
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ],
        dtype=np.float64,
    )


def quat_to_rotmat_batch(q: np.ndarray) -> np.ndarray:
    """(N,4) quaternions -> (N,3,3) rotation matrices."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((q.shape[0], 3, 3), dtype=np.float64)
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def rotmat_quat_jacobian(q: np.ndarray) -> np.ndarray:
    """dR/dq for a single quaternion: shape (4, 3, 3)."""
    w, x, y, z = q
    dRw = np.array([[0, -2 * z, 2 * y], [2 * z, 0, -2 * x], [-2 * y, 2 * x, 0]], dtype=np.float64)
    dRx = np.array([[0, 2 * y, 2 * z], [2 * y, -4 * x, -2 * w], [2 * z, 2 * w, -4 * x]], dtype=np.float64)
    dRy = np.array([[-4 * y, 2 * x, 2 * w], [2 * x, 0, 2 * z], [-2 * w, 2 * z, -4 * y]], dtype=np.float64)
    dRz = np.array([[-4 * z, -2 * w, 2 * x], [2 * w, -4 * z, 2 * y], [2 * x, 2 * y, 0]], dtype=np.float64)
    return np.stack([dRw, dRx, dRy, dRz])


def rotmat_quat_jacobian_batch(q: np.ndarray) -> np.ndarray:
    """(N,4) -> (N,4,3,3) stack of dR/dq_k."""
    q = np.asarray(q, dtype=np.float64)
    out = np.empty((q.shape[0], 4, 3, 3), dtype=np.float64)
    for i in range(q.shape[0]):
        out[i] = rotmat_quat_jacobian(q[i])
    return out


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a ⊗ b."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        dtype=np.float64,
    )


def quat_exp_map(omega: np.ndarray, dt: float) -> np.ndarray:
    """Incremental quaternion for rotating by omega*dt (exponential map).

    Uses a series expansion of sin(|w|dt/2)/|w| near zero so the map stays
    smooth (and differentiable) at omega = 0.
    """
    omega = np.asarray(omega, dtype=np.float64)
    n = float(np.linalg.norm(omega))
    half = 0.5 * dt
    theta = n * half
    if theta < 1e-6:
        # sin(theta)/n = half * (1 - theta^2/6 + theta^4/120)
        k = half * (1.0 - theta * theta / 6.0 + theta ** 4 / 120.0)
        w = 1.0 - theta * theta / 2.0 + theta ** 4 / 24.0
    else:
        k = np.sin(theta) / n
        w = np.cos(theta)
    return np.array([w, omega[0] * k, omega[1] * k, omega[2] * k], dtype=np.float64)


def quat_exp_map_jacobian(omega: np.ndarray, dt: float) -> np.ndarray:
    """d(quat_exp_map)/d(omega): shape (4, 3)."""
    omega = np.asarray(omega, dtype=np.float64)
    n = float(np.linalg.norm(omega))
    half = 0.5 * dt
    theta = n * half
    J = np.zeros((4, 3), dtype=np.float64)
    if theta < 1e-6:
        # w = 1 - (half^2/2) n^2 + ...; dw/domega = -half^2 * omega * (1 - theta^2/6)
        J[0, :] = -half * half * omega * (1.0 - theta * theta / 6.0)
        k = half * (1.0 - theta * theta / 6.0 + theta ** 4 / 120.0)
        # dk/domega = half * (-theta^2'/6 ...) -> -half^3/3 * omega at leading order
        dk = -(half ** 3) / 3.0 * (1.0 - theta * theta / 10.0)
        for a in range(3):
            J[1 + a, :] = dk * omega[a] * omega
            J[1 + a, a] += k
    else:
        u = omega / n
        sin_t, cos_t = np.sin(theta), np.cos(theta)
        J[0, :] = -sin_t * half * u
        k = sin_t / n
        dk_dn = cos_t * half / n - sin_t / (n * n)
        for a in range(3):
            J[1 + a, :] = dk_dn * omega[a] * u
            J[1 + a, a] += k
    return J


def normalize_backward(q_raw: np.ndarray, g_out: np.ndarray) -> np.ndarray:
    """Adjoint of q -> q/|q|: returns cotangent w.r.t. the raw quaternion."""
    n = float(np.linalg.norm(q_raw))
    qn = q_raw / n
    return (g_out - qn * float(np.dot(qn, g_out))) / n


def cross_matrix(v: np.ndarray) -> np.ndarray:
    """Skew matrix [v]x so that [v]x w = v × w."""
    return np.array(
        [[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]], dtype=np.float64
    )
