"""Scenario configs and synthetic desk-scale scene generators.

Two hermetic generators stand in for captured datasets: `vessel` builds a
sealed hollow box with a decorative spout stub (the interior has no
opening, the classic appearance-only failure), `wing` builds a thin
pitched slab that can develop lift. `from-files` loads user-provided
PLY/JSON/PNG bundles in the documented formats.

World units are grid cells. The wing scenario places the world origin at
the body's initial center so trajectory z-values read as altitude gained.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from PIL import Image

from . import splat
from .errors import UsageError, ParseError
from .fluid import FluidState, SimParams
from .objectives import ObjectiveSpec, region_mask
from .occupancy import GridSpec, DEFAULT_TILE, DEFAULT_KAPPA
from .rigid import RigidState
from .scene import (Camera, GaussianSet, load_cameras, load_gaussians,
                    save_cameras, save_gaussians)

GENERATORS = ("vessel", "wing", "from-files")


@dataclass
class CameraRig:
    count: int = 20
    radius: float = 34.0
    elevation_deg: float = 18.0
    focal: float = 110.0
    width: int = 64
    height: int = 64
    holdout_every: int = 5

    def to_dict(self):
        return asdict(self)


@dataclass
class BodyConfig:
    mass: float = 1.0
    mode: str = "static"            # static | translating | full
    thrust: tuple = (0.0, 0.0, 0.0)
    gravity_z: float = 0.0          # acceleration applied to the body
    inertia_radius: float = 0.0     # 0 = derive from the Gaussian extent
    v0: tuple = (0.0, 0.0, 0.0)

    def to_dict(self):
        d = asdict(self)
        d["thrust"] = list(self.thrust)
        d["v0"] = list(self.v0)
        return d


@dataclass
class DyeConfig:
    region: tuple | None = None     # ((x0,y0,z0),(x1,y1,z1)) world box
    density: float = 1.0

    def to_dict(self):
        return {"region": None if self.region is None else
                [list(self.region[0]), list(self.region[1])],
                "density": self.density}


@dataclass
class TrainConfig:
    iters_vis: int = 500
    iters_joint: int = 300
    lr_means: float = 1.6e-3
    lr_rotations: float = 1e-3
    lr_log_scales: float = 5e-3
    lr_opacity: float = 5e-2
    lr_sh: float = 2.5e-3
    lambda_phys: float = 0.0
    phys_every: int = 1
    horizon: int = 40
    seed: int = 0
    stride: int = 4
    s_max: float = 2.0
    w_scale: float = 0.0
    w_opacity: float = 0.0
    checkpoint_every: int = 100

    def __post_init__(self):
        if self.iters_vis < 0 or self.iters_joint < 0:
            raise UsageError("iteration counts must be >= 0")
        if self.phys_every < 1:
            raise UsageError("phys_every must be >= 1")

    def to_dict(self):
        return asdict(self)


@dataclass
class ScenarioConfig:
    name: str = "scenario"
    generator: str = "vessel"
    seed: int = 0
    grid_dims: tuple = (24, 24, 24)
    grid_h: float = 1.0
    grid_origin: tuple = (0.0, 0.0, 0.0)
    sim: SimParams = field(default_factory=SimParams)
    objective: ObjectiveSpec = field(default_factory=lambda: ObjectiveSpec("pour-out"))
    body: BodyConfig = field(default_factory=BodyConfig)
    cameras: CameraRig = field(default_factory=CameraRig)
    dye: DyeConfig = field(default_factory=DyeConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    tile: int = DEFAULT_TILE
    kappa: float = DEFAULT_KAPPA
    files: dict | None = None

    def __post_init__(self):
        if self.generator not in GENERATORS:
            raise UsageError(f"unknown generator '{self.generator}' "
                             f"(expected one of {GENERATORS})")
        self.grid_dims = tuple(int(d) for d in self.grid_dims)
        self.grid_origin = tuple(float(v) for v in self.grid_origin)
        if isinstance(self.sim, dict):
            self.sim = SimParams(**self.sim)
        if isinstance(self.objective, dict):
            self.objective = ObjectiveSpec.from_dict(self.objective)
        if isinstance(self.body, dict):
            b = dict(self.body)
            for k in ("thrust", "v0"):
                if k in b:
                    b[k] = tuple(b[k])
            self.body = BodyConfig(**b)
        if isinstance(self.cameras, dict):
            self.cameras = CameraRig(**self.cameras)
        if isinstance(self.dye, dict):
            d = dict(self.dye)
            if d.get("region") is not None:
                d["region"] = (tuple(d["region"][0]), tuple(d["region"][1]))
            self.dye = DyeConfig(**d)
        if isinstance(self.train, dict):
            self.train = TrainConfig(**self.train)

    @property
    def spec(self) -> GridSpec:
        return GridSpec(self.grid_dims, self.grid_h, self.grid_origin)

    def to_dict(self):
        return {
            "name": self.name, "generator": self.generator, "seed": self.seed,
            "grid_dims": list(self.grid_dims), "grid_h": self.grid_h,
            "grid_origin": list(self.grid_origin),
            "sim": {"dt": self.sim.dt, "lam": self.sim.lam, "rho0": self.sim.rho0,
                    "gravity": list(self.sim.gravity), "cg_tol": self.sim.cg_tol,
                    "cg_max_iters": self.sim.cg_max_iters},
            "objective": self.objective.to_dict(),
            "body": self.body.to_dict(),
            "cameras": self.cameras.to_dict(),
            "dye": self.dye.to_dict(),
            "train": self.train.to_dict(),
            "tile": self.tile, "kappa": self.kappa,
            "files": self.files,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        d = dict(d)
        sim = d.pop("sim", {})
        objective = d.pop("objective", None)
        body = d.pop("body", {})
        cameras = d.pop("cameras", {})
        dye = d.pop("dye", {})
        train = d.pop("train", {})
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise UsageError(f"unknown config fields: {sorted(unknown)}")
        cfg = cls(**{k: v for k, v in d.items() if k in known and k not in
                     ("sim", "objective", "body", "cameras", "dye", "train")})
        cfg.sim = SimParams(**sim) if isinstance(sim, dict) else sim
        if objective is not None:
            cfg.objective = (ObjectiveSpec.from_dict(objective)
                             if isinstance(objective, dict) else objective)
        if isinstance(body, dict):
            body = dict(body)
            if "thrust" in body:
                body["thrust"] = tuple(body["thrust"])
            if "v0" in body:
                body["v0"] = tuple(body["v0"])
            cfg.body = BodyConfig(**body)
        if isinstance(cameras, dict):
            cfg.cameras = CameraRig(**cameras)
        if isinstance(dye, dict):
            dye = dict(dye)
            if dye.get("region") is not None:
                dye["region"] = (tuple(dye["region"][0]), tuple(dye["region"][1]))
            cfg.dye = DyeConfig(**dye)
        if isinstance(train, dict):
            cfg.train = TrainConfig(**train)
        return cfg

    @classmethod
    def load(cls, path) -> "ScenarioConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ParseError(f"{path}: invalid JSON ({e})") from e
        return cls.from_dict(data)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))


@dataclass
class Scenario:
    """A resolved scenario bundle ready for simulation and training."""

    config: ScenarioConfig
    ground_truth: GaussianSet
    initial_set: GaussianSet
    cameras: list
    images: list           # float arrays in [0,1], one per camera
    train_idx: list
    holdout_idx: list
    x_ref: np.ndarray
    body_template: RigidState

    @property
    def spec(self) -> GridSpec:
        return self.config.spec

    @property
    def params(self) -> SimParams:
        return self.config.sim

    @property
    def objective(self) -> ObjectiveSpec:
        return self.config.objective

    @property
    def mode(self) -> str:
        return self.config.body.mode

    @property
    def f_ext(self) -> np.ndarray:
        b = self.config.body
        return np.asarray(b.thrust, dtype=np.float64) + \
            np.array([0.0, 0.0, b.mass * b.gravity_z])

    def fluid0(self) -> FluidState:
        st = FluidState.zeros(self.spec)
        if self.config.dye.region is not None:
            m = region_mask(self.spec, self.config.dye.region)
            st.rho[m] = self.config.dye.density
        return st

    def rigid0(self) -> RigidState:
        return self.body_template.copy()


# ---------------------------------------------------------------------------
# Camera rigs and view rendering
# ---------------------------------------------------------------------------

def _look_at_camera(eye: np.ndarray, at: np.ndarray, rig: CameraRig) -> Camera:
    fwd = at - eye
    fwd = fwd / np.linalg.norm(fwd)
    up = np.array([0.0, 0.0, 1.0])
    if abs(fwd @ up) > 0.99:
        up = np.array([0.0, 1.0, 0.0])
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])  # world -> camera rows
    t = -R @ eye
    return Camera(R, t, rig.focal, rig.focal,
                  (rig.width - 1) / 2.0, (rig.height - 1) / 2.0,
                  rig.width, rig.height)


def orbit_cameras(center: np.ndarray, rig: CameraRig) -> list:
    cams = []
    elev = np.deg2rad(rig.elevation_deg)
    for k in range(rig.count):
        az = 2.0 * np.pi * k / rig.count
        eye = center + rig.radius * np.array([
            np.cos(az) * np.cos(elev), np.sin(az) * np.cos(elev), np.sin(elev)])
        cams.append(_look_at_camera(eye, center, rig))
    return cams


def save_png(img: np.ndarray, path):
    arr = np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


# ---------------------------------------------------------------------------
# Generators
# ---------------------------------------------------------------------------

def _shell_coords(lo, hi):
    """Integer lattice points on the faces of the closed box [lo, hi]."""
    pts = []
    for x in range(lo[0], hi[0] + 1):
        for y in range(lo[1], hi[1] + 1):
            for z in range(lo[2], hi[2] + 1):
                on = (x in (lo[0], hi[0]) or y in (lo[1], hi[1])
                      or z in (lo[2], hi[2]))
                if on:
                    pts.append((x, y, z))
    return np.array(pts, dtype=np.float64)


def _base_set(positions: np.ndarray, sigma, logit: float, base_rgb,
              rng: np.random.Generator, sh_degree: int = 1) -> GaussianSet:
    n = positions.shape[0]
    sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (n, 3))
    rot = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
    basis = (sh_degree + 1) ** 2
    sh = np.zeros((n, 3, basis))
    rgb = np.asarray(base_rgb, dtype=np.float64)
    jitter = rng.normal(0.0, 0.02, (n, 3))
    sh[:, :, 0] = (rgb[None, :] + jitter) / splat.SH_C0
    if basis > 1:
        sh[:, :, 1:] = rng.normal(0.0, 0.01, (n, 3, basis - 1))
    return GaussianSet(positions, rot, np.log(sigma), np.full(n, logit), sh, sh_degree)


def _rotate_about_y(pts: np.ndarray, center: np.ndarray, angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    d = pts - center
    out = d.copy()
    out[:, 0] = c * d[:, 0] + s * d[:, 2]
    out[:, 2] = -s * d[:, 0] + c * d[:, 2]
    return out + center


def build_vessel(config: ScenarioConfig, rng: np.random.Generator) -> GaussianSet:
    """Sealed hollow box with a solid spout stub on one wall.

    Placed in the upper half of the domain so poured dye has room to fall.
    """
    nx, ny, nz = config.grid_dims
    org = np.asarray(config.grid_origin)
    h = config.grid_h
    cx, cy = nx // 2, ny // 2
    half = max(3, min(nx, ny) // 6)
    z_hi = nz - 3
    z_lo = z_hi - 2 * half
    lo = (cx - half, cy - half, z_lo)
    hi = (cx + half, cy + half, z_hi)
    pts = _shell_coords(lo, hi)
    # decorative spout stub on the +x wall near the top: solid, not connected
    stub = []
    zs = hi[2] - 2
    for dx in (1, 2):
        for dy in (-1, 0, 1):
            for dz in (-1, 0, 1):
                stub.append((hi[0] + dx, cy + dy, zs + dz))
    pts = np.vstack([pts, np.array(stub, dtype=np.float64)])
    world = org[None, :] + h * pts
    gset = _base_set(world, 0.55 * h, 5.0, (0.35, 0.55, 0.65), rng)
    # metrics region: the outer vessel box; dye fill: the cavity
    config.objective.region = (tuple(org + h * (np.array(lo) - 0.5)),
                               tuple(org + h * (np.array(hi) + 0.5)))
    config.dye.region = (tuple(org + h * (np.array(lo) + 1.5)),
                         tuple(org + h * (np.array(hi) - 1.5)))
    return gset


def build_wing(config: ScenarioConfig, rng: np.random.Generator) -> GaussianSet:
    """Thin pitched slab, symmetric about the y = center plane."""
    nx, ny, nz = config.grid_dims
    org = np.asarray(config.grid_origin)
    h = config.grid_h
    chord = max(6, nx // 3)
    span = max(8, ny // 2)
    cxi = nx // 4 + chord // 2
    cyi = (ny - 1) / 2.0
    czi = (nz - 1) / 2.0
    xs = np.arange(chord) - (chord - 1) / 2.0
    ys = np.arange(span) - (span - 1) / 2.0
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    pts = np.stack([cxi + gx.ravel(), cyi + gy.ravel(),
                    np.full(gx.size, czi)], axis=1)
    center = np.array([cxi, cyi, czi])
    pitch = np.deg2rad(10.0)  # leading edge up
    pts = _rotate_about_y(pts, center, pitch)
    world = org[None, :] + h * pts
    gset = _base_set(world, (0.75 * h, 0.75 * h, 0.3 * h), 4.0, (0.75, 0.35, 0.3), rng)
    # tilt covariances with the slab so the thin axis follows the surface
    q = np.array([np.cos(pitch / 2.0), 0.0, np.sin(pitch / 2.0), 0.0])
    gset.rotations[:] = q
    return gset


def noised_initial(gset: GaussianSet, rng: np.random.Generator,
                   pos_sigma: float = 0.5, opacity_sigma: float = 0.75) -> GaussianSet:
    out = gset.copy()
    out.means += rng.normal(0.0, pos_sigma, out.means.shape)
    out.opacity_logits += rng.normal(0.0, opacity_sigma, out.opacity_logits.shape)
    return out


def gen_scenario(config: ScenarioConfig, out_dir=None) -> Scenario:
    """Build the scenario bundle; optionally write it to disk."""
    rng = np.random.default_rng(config.seed)
    if config.generator == "vessel":
        gt = build_vessel(config, rng)
    elif config.generator == "wing":
        gt = build_wing(config, rng)
    else:
        gt = _load_files_set(config)
    if config.generator == "from-files":
        cams, images, init = _load_files_rest(config, gt)
    else:
        center = gt.means.mean(axis=0)
        cams = orbit_cameras(center, config.cameras)
        images = [splat.render(gt, cam).rgb for cam in cams]
        # 8-bit quantization: training targets match what lands on disk
        images = [np.round(np.clip(img, 0, 1) * 255.0) / 255.0 for img in images]
        init = noised_initial(gt, rng)
    ho = config.cameras.holdout_every
    holdout = [i for i in range(len(cams)) if ho > 0 and i % ho == ho - 1]
    train = [i for i in range(len(cams)) if i not in holdout]
    x_ref = init.means.mean(axis=0) if len(init) else np.zeros(3)
    body = config.body
    r = body.inertia_radius
    if r <= 0:
        r = float(np.max(np.linalg.norm(init.means - x_ref, axis=1))) if len(init) else 1.0
    inertia = 0.4 * body.mass * r * r * np.eye(3)
    template = RigidState(x_ref.copy(), np.asarray(body.v0, dtype=np.float64),
                          np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3),
                          body.mass, inertia)
    scen = Scenario(config, gt, init, cams, images, train, holdout, x_ref, template)
    if out_dir is not None:
        write_bundle(scen, out_dir)
    return scen


def write_bundle(scen: Scenario, out_dir) -> list:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    def w(path):
        written.append(Path(path))
        return path

    save_gaussians(scen.ground_truth, w(out_dir / "ground_truth.ply"))
    save_gaussians(scen.initial_set, w(out_dir / "initial.ply"))
    save_cameras(scen.cameras, w(out_dir / "cameras.json"))
    views = out_dir / "views"
    views.mkdir(exist_ok=True)
    for i, img in enumerate(scen.images):
        save_png(img, w(views / f"view_{i:03d}.png"))
    scen.config.save(w(out_dir / "scenario.json"))
    return written


def _load_files_set(config: ScenarioConfig) -> GaussianSet:
    files = config.files or {}
    if "gaussians" not in files:
        raise UsageError("from-files generator needs files.gaussians (PLY path)")
    return load_gaussians(files["gaussians"])


def _load_files_rest(config: ScenarioConfig, gt: GaussianSet):
    files = config.files or {}
    if "cameras" not in files or "images_dir" not in files:
        raise UsageError("from-files generator needs files.cameras and files.images_dir")
    cams = load_cameras(files["cameras"])
    img_dir = Path(files["images_dir"])
    paths = sorted(img_dir.glob("*.png"))
    if len(paths) != len(cams):
        raise UsageError(f"{len(paths)} PNG views in {img_dir} but {len(cams)} cameras")
    images = [load_png(p) for p in paths]
    init = load_gaussians(files["initial"]) if "initial" in files else gt.copy()
    return cams, images, init
