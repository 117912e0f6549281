"""Eulerian incompressible solver with soft-solid (Brinkman) coupling.

All fields are collocated at cell centers. One step applies, in order:
body forces, the semi-implicit Brinkman relaxation toward the solid
velocity, semi-Lagrangian self-advection of velocity, pressure projection,
and dye transport by the post-Brinkman velocity. The projection subtracts
the raw pressure gradient (the pressure absorbs the timestep).

The body force used by `step` is the dye-weighted gravity
f(x) = gravity * rho(x): a uniform force on an incompressible fluid in a
closed box is a pure pressure gradient and produces no motion, so the
transported dye is treated as the heavy phase that drives the flow.

Every primitive has a hand-written adjoint next to it; the projection is
differentiated through the implicit function (one extra Poisson solve on
the incoming cotangent, using the same tolerance).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import ContractViolation, SolverFailure
from .occupancy import GridSpec, OccupancyGrid


@dataclass
class SimParams:
    dt: float = 0.1
    lam: float = 1e3          # Brinkman strength
    rho0: float = 1.0         # fluid density
    gravity: tuple = (0.0, 0.0, 0.0)
    cg_tol: float = 1e-6      # Poisson relative sup-norm residual
    cg_max_iters: int = 0     # 0 = auto (10 * longest axis)

    def __post_init__(self):
        if self.dt <= 0:
            raise ContractViolation("dt must be positive")
        if self.lam < 0:
            raise ContractViolation("lambda must be >= 0")
        if not (0 < self.cg_tol < 1):
            raise ContractViolation("cg_tol must lie in (0, 1)")
        self.gravity = tuple(float(g) for g in self.gravity)

    def max_iters_for(self, spec: GridSpec) -> int:
        return self.cg_max_iters if self.cg_max_iters > 0 else 10 * max(spec.dims)


@dataclass
class FluidState:
    """Velocity (3,nx,ny,nz), pressure, dye density, and the step index."""

    u: np.ndarray
    p: np.ndarray
    rho: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, spec: GridSpec) -> "FluidState":
        return cls(np.zeros((3,) + spec.dims), np.zeros(spec.dims), np.zeros(spec.dims), 0)

    def copy(self) -> "FluidState":
        return FluidState(self.u.copy(), self.p.copy(), self.rho.copy(), self.t)


def _chi_array(chi) -> np.ndarray:
    return chi.chi if isinstance(chi, OccupancyGrid) else np.asarray(chi, dtype=np.float64)


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------

def apply_forces(u: np.ndarray, f, dt: float) -> np.ndarray:
    """u + dt * f; f may be a constant 3-vector or a (3,nx,ny,nz) field."""
    f = np.asarray(f, dtype=np.float64)
    if f.shape == (3,):
        return u + dt * f[:, None, None, None]
    if f.shape != u.shape:
        raise ContractViolation(f"force shape {f.shape} does not match velocity {u.shape}")
    return u + dt * f


def brinkman_step(u_tilde: np.ndarray, chi, u_solid: np.ndarray,
                  params: SimParams) -> np.ndarray:
    """Semi-implicit relaxation toward the solid velocity, stable for large lambda."""
    c = _chi_array(chi)
    dlc = params.dt * params.lam * c
    denom = 1.0 + dlc
    if u_solid is None:
        return u_tilde / denom
    return (u_tilde + dlc * u_solid) / denom


def brinkman_backward(g_uB: np.ndarray, u_tilde: np.ndarray, chi,
                      u_solid: np.ndarray, params: SimParams):
    """Adjoint of brinkman_step: returns (g_u_tilde, g_chi, g_u_solid)."""
    c = _chi_array(chi)
    dl = params.dt * params.lam
    dlc = dl * c
    denom = 1.0 + dlc
    uB = (u_tilde + dlc * u_solid) / denom if u_solid is not None else u_tilde / denom
    g_ut = g_uB / denom
    if u_solid is None:
        diff = -uB
        g_us = None
    else:
        diff = u_solid - uB
        g_us = g_uB * (dlc / denom)
    g_chi = np.sum(g_uB * (dl * diff / denom), axis=0)
    return g_ut, g_chi, g_us


def advect(fld: np.ndarray, u: np.ndarray, dt: float, spec: GridSpec) -> np.ndarray:
    """Semi-Lagrangian transport: sample the source at x - dt*u(x), trilinear."""
    fld = np.asarray(fld, dtype=np.float64)
    srcs = fld[None] if fld.ndim == 3 else fld
    outs = np.empty_like(srcs)
    _kernels.advect_fields(np.ascontiguousarray(srcs),
                           np.ascontiguousarray(u[0]), np.ascontiguousarray(u[1]),
                           np.ascontiguousarray(u[2]), dt / spec.h, outs)
    return outs[0] if fld.ndim == 3 else outs


def advect_backward(g_out: np.ndarray, fld: np.ndarray, u: np.ndarray, dt: float,
                    spec: GridSpec):
    """Adjoint of advect: returns (g_field, g_carrier)."""
    g_out = np.asarray(g_out, dtype=np.float64)
    scalar = fld.ndim == 3
    srcs = fld[None] if scalar else fld
    gouts = g_out[None] if scalar else g_out
    gsrcs = np.zeros_like(srcs)
    gu = np.zeros_like(u)
    _kernels.advect_fields_backward(np.ascontiguousarray(gouts),
                                    np.ascontiguousarray(srcs),
                                    np.ascontiguousarray(u[0]), np.ascontiguousarray(u[1]),
                                    np.ascontiguousarray(u[2]), dt / spec.h,
                                    gsrcs, gu[0], gu[1], gu[2])
    return (gsrcs[0] if scalar else gsrcs), gu


def enforce_walls(u: np.ndarray) -> np.ndarray:
    """Zero the wall-normal velocity component on boundary cells (closed box)."""
    out = u.copy()
    out[0, 0, :, :] = 0.0
    out[0, -1, :, :] = 0.0
    out[1, :, 0, :] = 0.0
    out[1, :, -1, :] = 0.0
    out[2, :, :, 0] = 0.0
    out[2, :, :, -1] = 0.0
    return out


def divergence(u: np.ndarray, spec: GridSpec) -> np.ndarray:
    """Discrete divergence (negative adjoint of the pressure gradient)."""
    return _kernels.divergence_op(np.ascontiguousarray(u), spec.h)


def gradient(p: np.ndarray, spec: GridSpec) -> np.ndarray:
    """Cell-centered central-difference gradient with mirrored boundary rows."""
    return _kernels.gradient_op(np.ascontiguousarray(p), spec.h)


def project(u_hat: np.ndarray, spec: GridSpec, params: SimParams,
            warm_start: np.ndarray | None = None):
    """Pressure projection: returns (u_next, p, cg_iterations).

    Wall-normal components of the input are zeroed, the Poisson system is
    solved by matrix-free conjugate gradients to a relative sup-norm
    residual of cg_tol (RHS mean-subtracted, pressure pinned to zero mean),
    and the wall-masked pressure gradient is subtracted. The result both
    respects the wall condition and is discretely divergence-free, so the
    operation is idempotent up to the solver tolerance.
    """
    uw = enforce_walls(u_hat)
    # div = -G^T, so div(grad p) = div(u) reads (G^T W G) p = -div(u).
    b = -divergence(uw, spec)
    b -= b.mean()
    x0 = warm_start if warm_start is not None else np.zeros_like(b)
    max_iters = params.max_iters_for(spec)
    p, iters, relres = _kernels.cg_poisson(b, np.ascontiguousarray(x0), spec.h,
                                           params.cg_tol, max_iters)
    if relres > params.cg_tol:
        raise SolverFailure(
            f"pressure solve stalled at relative residual {relres:.3e} "
            f"after {iters} iterations (tol {params.cg_tol:.1e})",
            residual=relres, iterations=iters)
    p = p - p.mean()
    u_next = uw - _kernels.gradient_masked_op(p, spec.h)
    return u_next, p, iters


def project_backward(g_u_next: np.ndarray, g_p, spec: GridSpec, params: SimParams,
                     warm_start: np.ndarray | None = None):
    """Adjoint of project (implicit-function route; self-adjoint Poisson solve)."""
    rhs = divergence(enforce_walls(g_u_next), spec)
    if g_p is not None and np.any(g_p):
        rhs += g_p - g_p.mean()
    rhs -= rhs.mean()
    x0 = warm_start if warm_start is not None else np.zeros_like(rhs)
    lam, iters, relres = _kernels.cg_poisson(rhs, np.ascontiguousarray(x0), spec.h,
                                             params.cg_tol, params.max_iters_for(spec))
    if relres > params.cg_tol:
        raise SolverFailure(
            f"adjoint pressure solve stalled at relative residual {relres:.3e}",
            residual=relres, iterations=iters)
    lam = lam - lam.mean()
    g_uhat = enforce_walls(g_u_next + gradient(lam, spec))
    return g_uhat, lam


# ---------------------------------------------------------------------------
# Full step
# ---------------------------------------------------------------------------

@dataclass
class StepAux:
    """Intermediates saved by step_core for the backward sweep."""

    rho_in: np.ndarray
    u_tilde: np.ndarray
    u_B: np.ndarray
    rho_adv: np.ndarray
    chi: np.ndarray
    u_solid: np.ndarray | None
    p: np.ndarray


def step_core(u, rho, chi, u_solid, params: SimParams, spec: GridSpec,
              warm_start=None, want_aux: bool = False):
    """One discrete update; returns (u_next, p, rho_next, aux or None)."""
    c = _chi_array(chi)
    g = np.array(params.gravity)
    if np.any(g):
        u_tilde = apply_forces(u, g[:, None, None, None] * rho[None], params.dt)
    else:
        u_tilde = u.copy()
    u_B = brinkman_step(u_tilde, c, u_solid, params)
    u_hat = advect(u_B, u_B, params.dt, spec)
    u_next, p, _ = project(u_hat, spec, params, warm_start)
    rho_adv = advect(rho, u_B, params.dt, spec)
    rho_next = np.maximum(rho_adv, 0.0)
    aux = StepAux(rho, u_tilde, u_B, rho_adv, c, u_solid, p) if want_aux else None
    return u_next, p, rho_next, aux


def step_core_backward(g_u_next, g_rho_next, g_p, aux: StepAux, params: SimParams,
                       spec: GridSpec, adj_warm=None):
    """Adjoint of step_core.

    Returns (g_u, g_rho, g_chi, g_u_solid, adjoint_pressure) where the
    gradients refer to the step inputs.
    """
    g_uB = np.zeros_like(aux.u_B)
    g_rho = np.zeros_like(aux.rho_in)

    # dye clamp + transport
    if g_rho_next is not None and np.any(g_rho_next):
        g_adv = np.where(aux.rho_adv >= 0.0, g_rho_next, 0.0)
        g_src, g_carrier = advect_backward(g_adv, aux.rho_in, aux.u_B, params.dt, spec)
        g_rho += g_src
        g_uB += g_carrier

    # projection
    g_uhat, lam = project_backward(g_u_next, g_p, spec, params, adj_warm)

    # velocity self-advection: u_B is both source and carrier
    g_src, g_carrier = advect_backward(g_uhat, aux.u_B, aux.u_B, params.dt, spec)
    g_uB += g_src + g_carrier

    # Brinkman
    g_ut, g_chi, g_us = brinkman_backward(g_uB, aux.u_tilde, aux.chi, aux.u_solid, params)

    # body force f = gravity * rho
    g_u = g_ut
    g = np.array(params.gravity)
    if np.any(g):
        g_rho += params.dt * np.einsum("c,cxyz->xyz", g, g_ut)
    return g_u, g_rho, g_chi, g_us, lam


def step(state: FluidState, chi, u_solid, params: SimParams, spec: GridSpec,
         warm_start=None) -> FluidState:
    """Advance one timestep; dye is advected by the post-Brinkman velocity."""
    u_next, p, rho_next, _ = step_core(state.u, state.rho, chi, u_solid, params,
                                       spec, warm_start)
    return FluidState(u_next, p, rho_next, state.t + 1)


def diagnostics(state: FluidState, spec: GridSpec, params: SimParams) -> dict:
    """Per-step scalar diagnostics appended to the simulate CSV."""
    div = divergence(state.u, spec)
    interior = div[1:-1, 1:-1, 1:-1] if min(spec.dims) > 2 else div
    return {
        "div_max_interior": float(np.abs(interior).max()) if interior.size else 0.0,
        "dye_mass": float(state.rho.sum() * spec.cell_volume),
        "kinetic_energy": float(0.5 * params.rho0 * np.sum(state.u ** 2) * spec.cell_volume),
    }
