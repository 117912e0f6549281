"""Reverse-mode differentiation of the unrolled simulation.

The rollout is recorded as a checkpointed tape: full (fluid, rigid) states
are stored every `stride` steps, and the backward sweep re-runs each block
forward (bitwise-identical; the pressure warm start is part of the state)
to regenerate per-step intermediates before applying the hand-written
adjoints in reverse order. Peak storage is ceil(T/stride) checkpoints plus
at most `stride` in-block states, tracked by an instrumentation counter.

Objectives feed the sweep through lazy per-state cotangent seeds, so no
dye field history is ever retained.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation
from .fluid import FluidState, SimParams, step_core_backward
from .objectives import (ObjectiveSpec, lift_loss_z_cotangent,
                         pour_loss_rho_cotangent, dye_height_sum)
from .occupancy import GridSpec, DEFAULT_TILE, DEFAULT_KAPPA
from .rigid import (RigidState, coupled_step, posed_mask, posed_mask_backward,
                    integrate_backward, angular_coefficients_backward,
                    reaction_wrench_backward, solid_velocity_backward,
                    world_inertia, rotmat_quat_jacobian)
from .scene import GaussianSet, GradBuffer


@dataclass
class RolloutResult:
    """Summaries produced by one forward rollout."""

    fluid_final: FluidState
    rigid_states: list
    dye_height_sums: np.ndarray
    dye_masses: np.ndarray
    wrenches: list
    trajectory: object = None


class SimTape:
    """Checkpointed forward rollout with an exact reverse sweep."""

    def __init__(self, gset: GaussianSet, spec: GridSpec, params: SimParams,
                 horizon: int, mode: str = "static", f_ext=(0.0, 0.0, 0.0),
                 x_ref=None, tile: int = DEFAULT_TILE, kappa: float = DEFAULT_KAPPA,
                 stride: int = 4):
        if horizon < 1:
            raise ContractViolation("simulation horizon must be >= 1")
        if stride < 1:
            raise ContractViolation("checkpoint stride must be >= 1")
        self.gset = gset
        self.spec = spec
        self.params = params
        self.horizon = horizon
        self.mode = mode
        self.f_ext = np.asarray(f_ext, dtype=np.float64)
        self.x_ref = (np.asarray(x_ref, dtype=np.float64) if x_ref is not None
                      else (gset.means.mean(axis=0) if len(gset) else np.zeros(3)))
        self.tile = tile
        self.kappa = kappa
        self.stride = stride
        self._checkpoints = {}
        self._static_grid = None
        self._result = None
        self.live_states = 0
        self.peak_live_states = 0

    # -- bookkeeping -------------------------------------------------------

    def _acquire(self, n=1):
        self.live_states += n
        self.peak_live_states = max(self.peak_live_states, self.live_states)

    def _release(self, n=1):
        self.live_states -= n

    # -- forward -----------------------------------------------------------

    def _step(self, fluid, rigidb, want_aux):
        grid = self._static_grid if self.mode == "static" else None
        return coupled_step(fluid, rigidb, self.gset, self.params, self.spec,
                            self.mode, self.f_ext, self.x_ref, self.tile,
                            self.kappa, warm_start=fluid.p, want_aux=want_aux,
                            grid=grid)

    def forward(self, fluid0: FluidState, rigid0: RigidState,
                record_states: bool = False) -> RolloutResult:
        self._checkpoints = {}
        self.live_states = 0
        self.peak_live_states = 0
        if self.mode == "static":
            self._static_grid = posed_mask(self.gset, rigid0, self.spec,
                                           self.x_ref, self.tile, self.kappa)
        spec = self.spec
        rigid_states = [rigid0.copy()]
        heights = [dye_height_sum(fluid0.rho, spec)]
        masses = [float(fluid0.rho.sum()) * spec.cell_volume]
        wrenches = []
        states = [fluid0.copy()] if record_states else None
        fluid, rigidb = fluid0.copy(), rigid0.copy()
        for t in range(self.horizon):
            if t % self.stride == 0:
                self._checkpoints[t] = (fluid.copy(), rigidb.copy())
                self._acquire()
            fluid, rigidb, aux = self._step(fluid, rigidb, want_aux=False)
            rigid_states.append(rigidb.copy())
            heights.append(dye_height_sum(fluid.rho, spec))
            masses.append(float(fluid.rho.sum()) * spec.cell_volume)
            if record_states:
                states.append(fluid.copy())
        traj = None
        if record_states:
            from .objectives import Trajectory
            traj = Trajectory(states, rigid_states, spec)
        self._result = RolloutResult(fluid, rigid_states, np.array(heights),
                                     np.array(masses), wrenches, traj)
        return self._result

    # -- backward ----------------------------------------------------------

    def backward(self, seeds) -> GradBuffer:
        """Reverse sweep. `seeds(t)` returns per-state cotangents as a dict
        with optional keys 'rho' (field), 'u' (field), and 'rigid'
        (dict over x/v/q/L); called once per state index, t = T..0."""
        if self._result is None:
            raise ContractViolation("backward called before forward (incomplete tape)")
        spec, params = self.spec, self.params
        grads = GradBuffer.zeros_like(self.gset)
        dchi_static = np.zeros(spec.dims) if self.mode == "static" else None

        def fetch(t):
            s = seeds(t) or {}
            return (s.get("u"), s.get("rho"), s.get("rigid") or {})

        gu_seed, grho_seed, grigid_seed = fetch(self.horizon)
        g_u = gu_seed.copy() if gu_seed is not None else np.zeros((3,) + spec.dims)
        g_rho = grho_seed.copy() if grho_seed is not None else np.zeros(spec.dims)
        g_rigid = {k: np.asarray(grigid_seed.get(k, np.zeros(4 if k == "q" else 3)),
                                 dtype=np.float64).copy()
                   for k in ("x", "v", "q", "L")}
        adj_warm = None

        block_starts = sorted(self._checkpoints.keys(), reverse=True)
        for ks in block_starts:
            block_end = min(ks + self.stride, self.horizon)
            # recompute the block forward, keeping aux
            fluid, rigidb = self._checkpoints[ks]
            auxes = []
            for t in range(ks, block_end):
                self._acquire()
                fluid, rigidb, aux = self._step(fluid, rigidb, want_aux=True)
                auxes.append(aux)
            # reverse through the block
            for t in range(block_end - 1, ks - 1, -1):
                aux = auxes.pop()
                g_u, g_rho, g_rigid, adj_warm = self._step_backward(
                    aux, g_u, g_rho, g_rigid, grads, dchi_static, adj_warm)
                self._release()
                gu_s, grho_s, grigid_s = fetch(t)
                if gu_s is not None:
                    g_u += gu_s
                if grho_s is not None:
                    g_rho += grho_s
                for k, v in grigid_s.items():
                    g_rigid[k] = g_rigid[k] + np.asarray(v, dtype=np.float64)
            self._release()  # checkpoint consumed
            del self._checkpoints[ks]

        if self.mode == "static" and self._static_grid is not None:
            _gxt, _gq = posed_mask_backward(self._static_grid, dchi_static,
                                            self.gset, grads)
        return grads

    def _step_backward(self, aux, g_u_next, g_rho_next, g_rigid_next, grads,
                       dchi_static, adj_warm):
        spec, params, mode = self.spec, self.params, self.mode
        state_in = aux.state_in
        g_chi = np.zeros(spec.dims)

        # rigid integrate
        g_state, g_f, _g_fext, g_tau0, g_K = integrate_backward(
            g_rigid_next, state_in, aux.wrench, params, mode)
        g_rigid = {k: np.asarray(v).copy() for k, v in g_state.items()}

        g_ut_extra = np.zeros((3,) + spec.dims)
        g_uB_extra = np.zeros((3,) + spec.dims)
        if mode != "static":
            if mode == "full" and (np.any(g_tau0) or np.any(g_K)):
                g_ut2, g_chi2, g_v2, g_xt2 = angular_coefficients_backward(
                    g_tau0, g_K, aux.fluid_aux.u_tilde, aux.grid.chi, state_in,
                    spec, params)
                g_ut_extra += g_ut2
                g_chi += g_chi2
                g_rigid["v"] += g_v2
                g_rigid["x"] += g_xt2
            if np.any(g_f):
                g_ut3, g_uB3, g_xt3 = reaction_wrench_backward(
                    g_f, np.zeros(3), aux.fluid_aux.u_tilde, aux.fluid_aux.u_B,
                    state_in, spec, params)
                g_ut_extra += g_ut3
                g_uB_extra += g_uB3
                g_rigid["x"] += g_xt3

        # fluid core
        g_u, g_rho, g_chi_f, g_us, lam = step_core_backward(
            g_u_next, g_rho_next, None, aux.fluid_aux, params, spec, adj_warm)
        g_chi += g_chi_f
        # extra velocity cotangents injected between the brinkman and force
        # stages: route them through the same chain manually
        if np.any(g_uB_extra):
            from .fluid import brinkman_backward
            g_ut4, g_chi4, g_us4 = brinkman_backward(
                g_uB_extra, aux.fluid_aux.u_tilde, aux.fluid_aux.chi,
                aux.fluid_aux.u_solid, params)
            g_ut_extra += g_ut4
            g_chi += g_chi4
            if g_us is not None and g_us4 is not None:
                g_us = g_us + g_us4
        if np.any(g_ut_extra):
            g_u = g_u + g_ut_extra
            gvec = np.array(params.gravity)
            if np.any(gvec):
                g_rho = g_rho + params.dt * np.einsum("c,cxyz->xyz", gvec, g_ut_extra)

        # solid velocity field
        if mode == "translating" and g_us is not None:
            g_rigid["v"] += g_us.sum(axis=(1, 2, 3))
        elif mode == "full" and g_us is not None:
            g_v5, g_omega, g_xt5 = solid_velocity_backward(g_us, state_in, spec,
                                                           aux.omega)
            g_rigid["v"] += g_v5
            g_rigid["x"] += g_xt5
            # omega = Iw^{-1} L
            Iw = world_inertia(state_in)
            lam_w = np.linalg.solve(Iw.T, g_omega)
            g_rigid["L"] += lam_w
            g_Iw = -np.outer(lam_w, aux.omega)
            from .mathutil import quat_to_rotmat
            Rq = quat_to_rotmat(state_in.q)
            dR = (g_Iw + g_Iw.T) @ Rq @ state_in.I_body
            Jq = rotmat_quat_jacobian(state_in.q)
            g_rigid["q"] += np.einsum("ab,qab->q", dR, Jq)

        # mask
        if mode == "static":
            dchi_static += g_chi
        else:
            g_xt6, g_q6 = posed_mask_backward(aux.grid, g_chi, self.gset, grads)
            g_rigid["x"] += g_xt6
            g_rigid["q"] += g_q6
        return g_u, g_rho, g_rigid, lam


# ---------------------------------------------------------------------------
# Objective adjoints over a rollout
# ---------------------------------------------------------------------------

def objective_value(objective: ObjectiveSpec, rollout: RolloutResult) -> float:
    n = len(rollout.rigid_states)
    if objective.kind == "lift":
        return -float(np.mean([rs.x[2] for rs in rollout.rigid_states]))
    m0 = rollout.dye_masses[0]
    if m0 <= 1e-12:
        from .errors import DegenerateScenarioError
        raise DegenerateScenarioError("pour objective needs nonzero initial dye mass")
    value = float(np.sum(rollout.dye_height_sums)) / (n * m0)
    return -value if objective.kind == "pour-hold" else value


def objective_seeds(objective: ObjectiveSpec, rollout: RolloutResult,
                    spec: GridSpec):
    """Per-state cotangent provider for SimTape.backward."""
    n = len(rollout.rigid_states)
    if objective.kind == "lift":
        gz = lift_loss_z_cotangent(n)

        def seeds(t):
            return {"rigid": {"x": np.array([0.0, 0.0, gz])}}
        return seeds
    m0 = rollout.dye_masses[0]

    def seeds(t):
        return {"rho": pour_loss_rho_cotangent(t, n, m0, spec, objective.kind)}
    return seeds


def simulate_objective(gset: GaussianSet, fluid0: FluidState, rigid0: RigidState,
                       spec: GridSpec, params: SimParams, objective: ObjectiveSpec,
                       horizon: int, mode: str, f_ext=(0.0, 0.0, 0.0), x_ref=None,
                       tile: int = DEFAULT_TILE, kappa: float = DEFAULT_KAPPA,
                       stride: int = 4, want_grad: bool = True):
    """Evaluate the physics objective; optionally also its parameter gradient."""
    tape = SimTape(gset, spec, params, horizon, mode, f_ext, x_ref, tile, kappa, stride)
    rollout = tape.forward(fluid0, rigid0)
    value = objective_value(objective, rollout)
    grads = None
    if want_grad:
        grads = tape.backward(objective_seeds(objective, rollout, spec))
    return value, grads, rollout, tape


# ---------------------------------------------------------------------------
# Finite-difference verification harness
# ---------------------------------------------------------------------------

REL_FLOOR = 1e-12


@dataclass
class GradReport:
    rows: list = field(default_factory=list)  # (group, index, analytic, numeric, rel)
    flagged: int = 0
    group_norms: dict = field(default_factory=dict)
    elapsed: float = 0.0

    @property
    def max_rel(self) -> float:
        vals = [r[4] for r in self.rows if math.isfinite(r[4])]
        return max(vals, default=0.0)

    @property
    def median_rel(self) -> float:
        vals = [r[4] for r in self.rows if math.isfinite(r[4])]
        return float(np.median(vals)) if vals else 0.0

    def write_csv(self, path):
        with open(path, "w") as f:
            f.write("group,index,analytic,numeric,rel_error\n")
            for g, i, a, n, r in self.rows:
                f.write(f"{g},{i},{a:.17g},{n:.17g},{r:.17g}\n")


def rel_error(a: float, b: float) -> float:
    if not (math.isfinite(a) and math.isfinite(b)):
        return float("nan")
    denom = max(abs(a), abs(b))
    if denom <= REL_FLOOR:
        return 0.0
    return abs(a - b) / denom


def gradcheck(loss_fn, grad_fn, gset: GaussianSet, eps: float = 1e-5,
              seed: int = 0, max_coords: int | None = None) -> GradReport:
    """Central-difference check of grad_fn against loss_fn.

    Samples up to max_coords coordinates per parameter group (all when
    None). Non-finite losses under perturbation flag the row instead of
    crashing.
    """
    t0 = time.time()
    report = GradReport()
    grads = grad_fn(gset)
    report.group_norms = grads.norms()
    rng = np.random.default_rng(seed)

    groups = [("means", gset.means, grads.means),
              ("rotations", gset.rotations, grads.rotations),
              ("log_scales", gset.log_scales, grads.log_scales),
              ("opacity_logits", gset.opacity_logits.reshape(-1, 1),
               grads.opacity_logits.reshape(-1, 1)),
              ("sh", gset.sh_coeffs, grads.sh_coeffs)]
    for name, arr, grad_arr in groups:
        flat = arr.reshape(-1)
        gflat = grad_arr.reshape(-1)
        idxs = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idxs = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + eps
            lp = loss_fn(gset)
            flat[i] = orig - eps
            lm = loss_fn(gset)
            flat[i] = orig
            if not (math.isfinite(lp) and math.isfinite(lm)):
                report.flagged += 1
                report.rows.append((name, int(i), float(gflat[i]), float("nan"),
                                    float("nan")))
                continue
            numeric = (lp - lm) / (2.0 * eps)
            r = rel_error(float(gflat[i]), numeric)
            if math.isnan(r):
                report.flagged += 1
            report.rows.append((name, int(i), float(gflat[i]), numeric, r))
    report.elapsed = time.time() - t0
    return report
