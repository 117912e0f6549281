"""Rigid-body state evolution coupled to the fluid through Brinkman reaction.

The body feels the negative of the fluid's Brinkman momentum change
(Newton's third law). Linear motion uses a first-order symplectic Euler
step with the realized reaction force; the angular update treats the
omega-dependent part of the reaction torque implicitly via a 3x3 solve,
which stays stable under strong coupling (an explicit angular update does
not). Masses and inertias are scenario constants, not derived from the
occupancy mask.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, FluidSplatError, InvalidParameterError
from .fluid import SimParams, FluidState, brinkman_step, step_core, step_core_backward
from .mathutil import (quat_exp_map, quat_exp_map_jacobian, quat_multiply,
                       quat_to_rotmat, rotmat_quat_jacobian, normalize_backward,
                       quat_normalize)
from .occupancy import GridSpec, OccupancyGrid, tiled_mask, DEFAULT_TILE, DEFAULT_KAPPA
from .scene import GaussianSet

MODES = ("static", "translating", "full")
IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])


@dataclass
class RigidState:
    x: np.ndarray
    v: np.ndarray
    q: np.ndarray
    L: np.ndarray
    m: float = 1.0
    I_body: np.ndarray = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64).reshape(3)
        self.v = np.asarray(self.v, dtype=np.float64).reshape(3)
        self.q = np.asarray(self.q, dtype=np.float64).reshape(4)
        self.L = np.asarray(self.L, dtype=np.float64).reshape(3)
        if self.I_body is None:
            self.I_body = np.eye(3)
        self.I_body = np.asarray(self.I_body, dtype=np.float64).reshape(3, 3)
        if self.m <= 0:
            raise InvalidParameterError("body mass must be positive")
        if np.abs(self.I_body - self.I_body.T).max() > 1e-9:
            raise InvalidParameterError("I_body must be symmetric")
        if np.any(np.linalg.eigvalsh(self.I_body) <= 0):
            raise InvalidParameterError("I_body must be positive definite")
        # loose bound only: finite-difference probes nudge q off the sphere;
        # the strict 1e-9 invariant is checked by validate() after updates
        if abs(np.linalg.norm(self.q) - 1.0) > 1e-3:
            raise InvalidParameterError("orientation quaternion must be unit norm")

    def validate(self):
        if abs(np.linalg.norm(self.q) - 1.0) > 1e-9:
            raise InvalidParameterError("orientation quaternion drifted from unit norm")

    def copy(self) -> "RigidState":
        return RigidState(self.x.copy(), self.v.copy(), self.q.copy(), self.L.copy(),
                          self.m, self.I_body.copy())


@dataclass
class BodyForces:
    """Hydrodynamic wrench pieces plus known external force.

    tau0 is the omega-independent torque part and K the symmetric
    negative-semidefinite coupling matrix of the implicit angular solve;
    for simple logging uses tau0 may hold the realized torque with K = 0.
    """

    f: np.ndarray
    tau0: np.ndarray
    K: np.ndarray
    f_ext: np.ndarray

    @classmethod
    def zero(cls) -> "BodyForces":
        return cls(np.zeros(3), np.zeros(3), np.zeros((3, 3)), np.zeros(3))


def world_inertia(state: RigidState) -> np.ndarray:
    R = quat_to_rotmat(state.q)
    return R @ state.I_body @ R.T


def angular_velocity(state: RigidState) -> np.ndarray:
    return np.linalg.solve(world_inertia(state), state.L)


def solid_velocity_field(state: RigidState, spec: GridSpec,
                         omega: np.ndarray | None = None) -> np.ndarray:
    """u_solid(x) = v + omega x (x - x_t) at cell centers."""
    if omega is None:
        omega = angular_velocity(state)
    cc = spec.cell_centers()
    r = cc - state.x[:, None, None, None]
    out = np.empty_like(cc)
    out[0] = state.v[0] + omega[1] * r[2] - omega[2] * r[1]
    out[1] = state.v[1] + omega[2] * r[0] - omega[0] * r[2]
    out[2] = state.v[2] + omega[0] * r[1] - omega[1] * r[0]
    return out


def solid_velocity_backward(g_us: np.ndarray, state: RigidState, spec: GridSpec,
                            omega: np.ndarray):
    """Adjoint of solid_velocity_field: returns (g_v, g_omega, g_xt)."""
    cc = spec.cell_centers()
    r = cc - state.x[:, None, None, None]
    g_v = g_us.sum(axis=(1, 2, 3))
    # d/d omega of (omega x r) against g: sum r x g
    g_omega = np.array([
        np.sum(r[1] * g_us[2] - r[2] * g_us[1]),
        np.sum(r[2] * g_us[0] - r[0] * g_us[2]),
        np.sum(r[0] * g_us[1] - r[1] * g_us[0]),
    ])
    # d/d x_t = -d/dr; d/dr against g is g x omega per cell -> sum omega x g
    g_xt = np.array([
        np.sum(omega[1] * g_us[2] - omega[2] * g_us[1]),
        np.sum(omega[2] * g_us[0] - omega[0] * g_us[2]),
        np.sum(omega[0] * g_us[1] - omega[1] * g_us[0]),
    ])
    return g_v, g_omega, g_xt


def is_identity_pose(state: RigidState, x_ref: np.ndarray) -> bool:
    return np.array_equal(state.x, x_ref) and np.array_equal(state.q, IDENTITY_QUAT)


def posed_mask(gset: GaussianSet, state: RigidState, spec: GridSpec,
               x_ref: np.ndarray | None = None, tile: int = DEFAULT_TILE,
               kappa: float = DEFAULT_KAPPA) -> OccupancyGrid:
    """Mask of the body-frame Gaussians under the rigid pose.

    Query points are re-evaluated at transformed locations (no grid
    resampling): chi_world(x) = chi_body(R(q)^T (x - x_t) + x_ref). The
    identity pose takes the untransformed path and is bitwise equal to
    tiled_mask.
    """
    if x_ref is None:
        x_ref = gset.means.mean(axis=0) if len(gset) else np.zeros(3)
    x_ref = np.asarray(x_ref, dtype=np.float64)
    if is_identity_pose(state, x_ref):
        return tiled_mask(gset, spec, tile, kappa)
    B = quat_to_rotmat(state.q).T
    return tiled_mask(gset, spec, tile, kappa,
                      transform=(B, state.x.copy(), x_ref, state.q.copy()))


def posed_mask_backward(grid: OccupancyGrid, dchi: np.ndarray, gset: GaussianSet,
                        grads):
    """Backward through a posed mask: Gaussian grads plus (g_xt, g_q).

    The body-frame reference point is a scenario constant, so no cotangent
    flows into it. For the identity-pose fast path the pose cotangents are
    zero (the pose there is a simulation input, not a learnable quantity).
    """
    from .occupancy import mask_backward_raw, chain_to_params

    g_alpha, g_mu, g_p6, g_y, g_outer = mask_backward_raw(grid, dchi, gset)
    chain_to_params(gset, g_alpha, g_mu, g_p6, grads)
    if grid.transform is None:
        return np.zeros(3), np.zeros(4)
    B = grid.transform[0]
    q = grid.transform[3]
    # y = B (x - xt) + xref with B = R(q)^T
    g_xt = -np.asarray(B).T @ g_y
    g_R = g_outer  # dL/dB = g_outer^T, and dL/dR = (dL/dB)^T
    Jq = rotmat_quat_jacobian(q)
    g_q = np.einsum("ab,qab->q", g_R, Jq)
    return g_xt, g_q


def reaction_wrench(u_tilde: np.ndarray, u_B: np.ndarray, state: RigidState,
                    spec: GridSpec, params: SimParams) -> BodyForces:
    """Net force and torque on the body from the Brinkman momentum exchange."""
    if u_tilde.shape != u_B.shape:
        raise ContractViolation("u_tilde and u_B shapes differ")
    c = params.rho0 * spec.cell_volume / params.dt
    du = u_B - u_tilde
    f = -c * du.sum(axis=(1, 2, 3))
    r = spec.cell_centers() - state.x[:, None, None, None]
    tau = -c * np.array([
        np.sum(r[1] * du[2] - r[2] * du[1]),
        np.sum(r[2] * du[0] - r[0] * du[2]),
        np.sum(r[0] * du[1] - r[1] * du[0]),
    ])
    return BodyForces(f, tau, np.zeros((3, 3)), np.zeros(3))


def reaction_wrench_backward(g_f: np.ndarray, g_tau: np.ndarray, u_tilde, u_B,
                             state: RigidState, spec: GridSpec, params: SimParams):
    """Adjoint of reaction_wrench: returns (g_u_tilde, g_u_B, g_xt)."""
    c = params.rho0 * spec.cell_volume / params.dt
    r = spec.cell_centers() - state.x[:, None, None, None]
    g_du = np.empty_like(u_B)
    # force part: dL/d du = -c * g_f, torque part: -c * (g_tau x r)
    g_du[0] = -c * (g_f[0] + g_tau[1] * r[2] - g_tau[2] * r[1])
    g_du[1] = -c * (g_f[1] + g_tau[2] * r[0] - g_tau[0] * r[2])
    g_du[2] = -c * (g_f[2] + g_tau[0] * r[1] - g_tau[1] * r[0])
    du = u_B - u_tilde
    # r-dependence: dL/dr = c (g_tau x du) per cell; g_xt = -sum dL/dr
    g_xt = -c * np.array([
        np.sum(g_tau[1] * du[2] - g_tau[2] * du[1]),
        np.sum(g_tau[2] * du[0] - g_tau[0] * du[2]),
        np.sum(g_tau[0] * du[1] - g_tau[1] * du[0]),
    ])
    return -g_du, g_du, g_xt


def brinkman_drag_coeff(chi: np.ndarray, params: SimParams) -> np.ndarray:
    """alpha(x) = rho0 lambda chi / (1 + dt lambda chi)."""
    return params.rho0 * params.lam * chi / (1.0 + params.dt * params.lam * chi)


def angular_coefficients(u_tilde: np.ndarray, chi: np.ndarray, state: RigidState,
                         spec: GridSpec, params: SimParams):
    """Split the Brinkman torque into (tau0, K) with tau(omega) = tau0 + K omega."""
    a = brinkman_drag_coeff(chi, params) * spec.cell_volume
    r = spec.cell_centers() - state.x[:, None, None, None]
    w = state.v[:, None, None, None] - u_tilde
    tau0 = -np.array([
        np.sum(a * (r[1] * w[2] - r[2] * w[1])),
        np.sum(a * (r[2] * w[0] - r[0] * w[2])),
        np.sum(a * (r[0] * w[1] - r[1] * w[0])),
    ])
    rr = np.empty((3, 3))
    for i in range(3):
        for j in range(i, 3):
            rr[i, j] = rr[j, i] = np.sum(a * r[i] * r[j])
    K = rr - np.trace(rr) * np.eye(3)
    return tau0, K


def angular_coefficients_backward(g_tau0, g_K, u_tilde, chi, state: RigidState,
                                  spec: GridSpec, params: SimParams):
    """Adjoint of angular_coefficients: returns (g_u_tilde, g_chi, g_v, g_xt)."""
    h3 = spec.cell_volume
    a = brinkman_drag_coeff(chi, params) * h3
    dlc = 1.0 + params.dt * params.lam * chi
    da_dchi = params.rho0 * params.lam / (dlc * dlc) * h3
    r = spec.cell_centers() - state.x[:, None, None, None]
    w = state.v[:, None, None, None] - u_tilde
    rxw = np.stack([r[1] * w[2] - r[2] * w[1],
                    r[2] * w[0] - r[0] * w[2],
                    r[0] * w[1] - r[1] * w[0]])
    gK = np.asarray(g_K, dtype=np.float64)
    gKs = gK + gK.T
    trg = np.trace(gK)
    # alpha cotangent from both terms
    g_a = -(g_tau0[0] * rxw[0] + g_tau0[1] * rxw[1] + g_tau0[2] * rxw[2])
    rKr = np.einsum("axyz,ab,bxyz->xyz", r, gK, r)
    r2 = r[0] ** 2 + r[1] ** 2 + r[2] ** 2
    g_a = g_a + rKr - trg * r2
    g_chi = g_a * da_dchi
    # w cotangent: dL/dw = -a (g_tau0 x r)
    g_w = np.empty_like(u_tilde)
    g_w[0] = -a * (g_tau0[1] * r[2] - g_tau0[2] * r[1])
    g_w[1] = -a * (g_tau0[2] * r[0] - g_tau0[0] * r[2])
    g_w[2] = -a * (g_tau0[0] * r[1] - g_tau0[1] * r[0])
    g_ut = -g_w
    g_v = g_w.sum(axis=(1, 2, 3))
    # r cotangent: tau0 part +a (g_tau0 x w); K part a ((gK + gK^T) r - 2 tr(gK) r)
    g_r = np.empty_like(u_tilde)
    g_r[0] = a * (g_tau0[1] * w[2] - g_tau0[2] * w[1])
    g_r[1] = a * (g_tau0[2] * w[0] - g_tau0[0] * w[2])
    g_r[2] = a * (g_tau0[0] * w[1] - g_tau0[1] * w[0])
    g_r += a * (np.einsum("ab,bxyz->axyz", gKs, r) - 2.0 * trg * r)
    g_xt = -g_r.sum(axis=(1, 2, 3))
    return g_ut, g_chi, g_v, g_xt


def integrate(state: RigidState, wrench: BodyForces, params: SimParams,
              mode: str = "full") -> RigidState:
    """Symplectic Euler translation plus the implicit angular-momentum update."""
    if mode not in MODES:
        raise ContractViolation(f"unknown mode '{mode}'")
    out = state.copy()
    if mode == "static":
        return out
    f_tot = wrench.f + wrench.f_ext
    out.v = state.v + params.dt * f_tot / state.m
    out.x = state.x + params.dt * out.v
    if mode == "translating":
        out.L = np.zeros(3)
        return out
    Iw = world_inertia(state)
    M = Iw - params.dt * wrench.K
    try:
        np.linalg.cholesky(0.5 * (M + M.T))  # SPD guarantee check
    except np.linalg.LinAlgError as e:
        raise FluidSplatError(
            f"implicit angular system lost positive definiteness "
            f"(cond {np.linalg.cond(M):.3e})") from e
    rhs = state.L + params.dt * wrench.tau0
    omega_next = np.linalg.solve(M, rhs)
    out.L = Iw @ omega_next
    dq = quat_exp_map(omega_next, params.dt)
    out.q = quat_normalize(quat_multiply(dq, state.q))
    return out


def integrate_backward(g_out: dict, state: RigidState, wrench: BodyForces,
                       params: SimParams, mode: str):
    """Adjoint of integrate.

    g_out holds cotangents for 'x', 'v', 'q', 'L' of the new state; returns
    (g_state dict with x/v/q/L, g_f, g_f_ext, g_tau0, g_K).
    """
    gx = np.asarray(g_out.get("x", np.zeros(3)), dtype=np.float64).copy()
    gv = np.asarray(g_out.get("v", np.zeros(3)), dtype=np.float64).copy()
    gq = np.asarray(g_out.get("q", np.zeros(4)), dtype=np.float64).copy()
    gL = np.asarray(g_out.get("L", np.zeros(3)), dtype=np.float64).copy()
    zero3 = np.zeros(3)
    if mode == "static":
        return ({"x": gx, "v": gv, "q": gq, "L": gL}, zero3.copy(), zero3.copy(),
                zero3.copy(), np.zeros((3, 3)))
    # x' = x + dt v'; v' = v + dt (f + f_ext)/m
    gv_new = gv + params.dt * gx
    g_f = params.dt / state.m * gv_new
    if mode == "translating":
        # q and L pass through unchanged (L held at zero)
        return ({"x": gx, "v": gv_new, "q": gq.copy(), "L": np.zeros(3)},
                g_f, g_f.copy(), zero3.copy(), np.zeros((3, 3)))
    g_state = {"x": gx, "v": gv_new, "q": np.zeros(4), "L": np.zeros(3)}

    # recompute the forward angular pieces
    Iw = world_inertia(state)
    M = Iw - params.dt * wrench.K
    rhs = state.L + params.dt * wrench.tau0
    omega_next = np.linalg.solve(M, rhs)
    Lnew = Iw @ omega_next
    dq = quat_exp_map(omega_next, params.dt)
    q_raw = quat_multiply(dq, state.q)

    # q' = normalize(dq (x) q)
    g_qraw = normalize_backward(q_raw, gq)
    # Hamilton product adjoints
    aw, ax, ay, az = dq
    bw, bx, by, bz = state.q
    # d(q_raw)/d(dq): rows of the product w.r.t. a-components
    Ma = np.array([
        [bw, -bx, -by, -bz],
        [bx, bw, bz, -by],
        [by, -bz, bw, bx],
        [bz, by, -bx, bw],
    ])
    # d(q_raw)/d(q)
    Mb = np.array([
        [aw, -ax, -ay, -az],
        [ax, aw, -az, ay],
        [ay, az, aw, -ax],
        [az, -ay, ax, aw],
    ])
    g_dq = Ma.T @ g_qraw
    g_state["q"] += Mb.T @ g_qraw
    g_omega = quat_exp_map_jacobian(omega_next, params.dt).T @ g_dq

    # L' = Iw omega'
    g_omega = g_omega + Iw.T @ gL
    g_Iw = np.outer(gL, omega_next)

    # omega' = M^{-1} rhs: adjoint solve with M^T
    lam = np.linalg.solve(M.T, g_omega)
    g_rhs = lam
    g_M = -np.outer(lam, omega_next)
    g_Iw += g_M
    g_K = -params.dt * g_M
    g_state["L"] += g_rhs
    g_tau0 = params.dt * g_rhs

    # Iw = R I_body R^T depends on q
    R = quat_to_rotmat(state.q)
    dR = (g_Iw + g_Iw.T) @ R @ state.I_body
    Jq = rotmat_quat_jacobian(state.q)
    g_state["q"] += np.einsum("ab,qab->q", dR, Jq)
    return g_state, g_f, g_f.copy(), g_tau0, g_K


@dataclass
class CoupledAux:
    """Per-step intermediates for the coupled backward sweep."""

    fluid_aux: object
    grid: OccupancyGrid
    state_in: RigidState
    omega: np.ndarray
    wrench: BodyForces


def coupled_step(fluid_state: FluidState, rigid_state: RigidState, gset: GaussianSet,
                 params: SimParams, spec: GridSpec, mode: str = "static",
                 f_ext=(0.0, 0.0, 0.0), x_ref=None, tile: int = DEFAULT_TILE,
                 kappa: float = DEFAULT_KAPPA, warm_start=None, want_aux: bool = False,
                 grid: OccupancyGrid | None = None):
    """Advance fluid and body together by one step.

    static: pose fixed, v = L = 0 held. translating: position evolves, L = 0
    held (wind-tunnel pose). full: implicit angular update as well. A
    precomputed occupancy grid for the current pose may be passed in (the
    static-mode rollout reuses one grid across steps).
    """
    if mode not in MODES:
        raise ContractViolation(f"unknown mode '{mode}'")
    if grid is None:
        grid = posed_mask(gset, rigid_state, spec, x_ref, tile, kappa)
    if mode == "static":
        omega = np.zeros(3)
        u_solid = None
    elif mode == "translating":
        omega = np.zeros(3)
        u_solid = np.broadcast_to(rigid_state.v[:, None, None, None],
                                  (3,) + spec.dims).copy()
    else:
        omega = angular_velocity(rigid_state)
        u_solid = solid_velocity_field(rigid_state, spec, omega)
    u_next, p, rho_next, fluid_aux = step_core(
        fluid_state.u, fluid_state.rho, grid.chi, u_solid, params, spec,
        warm_start, want_aux=True)
    wrench = reaction_wrench(fluid_aux.u_tilde, fluid_aux.u_B, rigid_state, spec, params)
    wrench.f_ext = np.asarray(f_ext, dtype=np.float64)
    if mode == "full":
        tau0, K = angular_coefficients(fluid_aux.u_tilde, grid.chi, rigid_state,
                                       spec, params)
        wrench = BodyForces(wrench.f, tau0, K, wrench.f_ext)
    rigid_next = integrate(rigid_state, wrench, params, mode)
    fluid_next = FluidState(u_next, p, rho_next, fluid_state.t + 1)
    aux = CoupledAux(fluid_aux, grid, rigid_state.copy(), omega, wrench) if want_aux else None
    return fluid_next, rigid_next, aux
