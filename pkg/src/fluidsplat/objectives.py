"""Trajectory functionals (physics objectives) and the parameter regularizer."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, DegenerateScenarioError
from .occupancy import GridSpec
from .scene import GaussianSet, GradBuffer

MASS_EPS = 1e-12
KINDS = ("pour-out", "pour-hold", "lift")


@dataclass
class ObjectiveSpec:
    kind: str
    weight: float = 0.0
    region: tuple | None = None   # ((x0,y0,z0), (x1,y1,z1)) world-space box

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractViolation(f"unknown objective kind '{self.kind}'")
        if self.weight < 0:
            raise ContractViolation("objective weight must be >= 0")
        if self.region is not None:
            lo, hi = self.region
            self.region = (tuple(float(v) for v in lo), tuple(float(v) for v in hi))

    def to_dict(self):
        return {"kind": self.kind, "weight": self.weight,
                "region": None if self.region is None else
                [list(self.region[0]), list(self.region[1])]}

    @classmethod
    def from_dict(cls, d):
        region = d.get("region")
        if region is not None:
            region = (tuple(region[0]), tuple(region[1]))
        return cls(d["kind"], float(d.get("weight", 0.0)), region)


@dataclass
class Trajectory:
    """Ordered (fluid, rigid) states over the horizon, t = 0..T."""

    fluid_states: list
    rigid_states: list
    spec: GridSpec

    def __post_init__(self):
        for t, fs in enumerate(self.fluid_states):
            if fs.t != t:
                raise ContractViolation("fluid state step indices are not consecutive")


def cell_heights(spec: GridSpec) -> np.ndarray:
    """World z-coordinate of every cell center, shape (nx, ny, nz)."""
    nz = spec.dims[2]
    z = spec.origin[2] + spec.h * np.arange(nz)
    return np.broadcast_to(z[None, None, :], spec.dims)


def dye_height_sum(rho: np.ndarray, spec: GridSpec) -> float:
    """Sum of rho * z * h^3 over the grid."""
    return float(np.sum(rho * cell_heights(spec)) * spec.cell_volume)


def pour_loss(traj: Trajectory, spec_obj: ObjectiveSpec) -> float:
    """Mass-normalized mean dye height over the horizon.

    Minimizing drives the tracked fluid downward and out; the pour-hold
    variant returns the negation (used for upright vessels that should
    retain their contents).
    """
    spec = traj.spec
    m0 = float(traj.fluid_states[0].rho.sum()) * spec.cell_volume
    if m0 <= MASS_EPS:
        raise DegenerateScenarioError("pour objective needs nonzero initial dye mass")
    total = sum(dye_height_sum(fs.rho, spec) for fs in traj.fluid_states)
    value = total / (len(traj.fluid_states) * max(m0, MASS_EPS))
    if spec_obj.kind == "pour-hold":
        return -value
    return value


def pour_loss_rho_cotangent(t: int, n_states: int, m0: float, spec: GridSpec,
                            kind: str) -> np.ndarray:
    """d(pour_loss)/d(rho_t): independent of rho, so computable lazily."""
    g = cell_heights(spec) * (spec.cell_volume / (n_states * max(m0, MASS_EPS)))
    return -g if kind == "pour-hold" else g.copy()


def lift_loss(traj: Trajectory) -> float:
    """Negative mean z-position of the body over the horizon."""
    zs = [rs.x[2] for rs in traj.rigid_states]
    return -float(np.mean(zs))


def lift_loss_z_cotangent(n_states: int) -> float:
    return -1.0 / n_states


def reg_loss(gset: GaussianSet, s_max: float, w_scale: float, w_opacity: float,
             grads: GradBuffer | None = None) -> float:
    """Quadratic hinge on scales above s_max plus a linear opacity penalty."""
    scales = np.exp(gset.log_scales)
    excess = np.maximum(scales - s_max, 0.0)
    alpha = gset.opacities
    value = w_scale * float(np.sum(excess ** 2)) + w_opacity * float(np.sum(alpha))
    if grads is not None:
        grads.log_scales += w_scale * 2.0 * excess * scales
        grads.opacity_logits += w_opacity * alpha * (1.0 - alpha)
    return value


def region_mask(spec: GridSpec, region) -> np.ndarray:
    """Boolean mask of cells whose centers fall inside an aabb region."""
    lo, hi = region
    cc = spec.cell_centers()
    m = np.ones(spec.dims, dtype=bool)
    for a in range(3):
        m &= (cc[a] >= lo[a]) & (cc[a] <= hi[a])
    return m


def dye_mass_split(rho: np.ndarray, spec: GridSpec, region) -> tuple:
    """(mass inside region, mass outside region)."""
    m = region_mask(spec, region)
    inside = float(rho[m].sum()) * spec.cell_volume
    total = float(rho.sum()) * spec.cell_volume
    return inside, total - inside
