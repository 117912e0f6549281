"""Gaussian scene parameters, cameras, and their serialized forms.

A scene is a set of anisotropic 3D Gaussians. Scales live in log space and
opacities in logit space so unconstrained optimizer steps cannot produce
invalid parameters; the constrained quantities are recovered on demand.
Lengths are in grid units (1 world unit = 1 voxel edge at the default
simulation resolution).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidParameterError, ParseError, ContractViolation
from .mathutil import quat_to_rotmat, quat_to_rotmat_batch

QUAT_UNIT_TOL = 1e-6


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


@dataclass
class GaussianSet:
    """Learnable scene parameters.

    means:          (N, 3) world positions
    rotations:      (N, 4) unit quaternions (w, x, y, z)
    log_scales:     (N, 3) log of per-axis scales
    opacity_logits: (N,)   logit of base opacity
    sh_coeffs:      (N, 3, (L+1)^2) spherical-harmonic color coefficients
    sh_degree:      maximum SH degree L >= 0
    """

    means: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    sh_coeffs: np.ndarray
    sh_degree: int = 1

    def __post_init__(self):
        self.means = np.ascontiguousarray(self.means, dtype=np.float64).reshape(-1, 3)
        n = self.means.shape[0]
        self.rotations = np.ascontiguousarray(self.rotations, dtype=np.float64).reshape(n, 4)
        self.log_scales = np.ascontiguousarray(self.log_scales, dtype=np.float64).reshape(n, 3)
        self.opacity_logits = np.ascontiguousarray(self.opacity_logits, dtype=np.float64).reshape(n)
        self.sh_coeffs = np.ascontiguousarray(self.sh_coeffs, dtype=np.float64).reshape(n, 3, -1)
        basis = (self.sh_degree + 1) ** 2
        if self.sh_coeffs.shape[2] != basis:
            raise ContractViolation(
                f"sh_coeffs has {self.sh_coeffs.shape[2]} basis terms, expected {basis} "
                f"for degree {self.sh_degree}")

    def __len__(self):
        return self.means.shape[0]

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    def copy(self) -> "GaussianSet":
        return GaussianSet(self.means.copy(), self.rotations.copy(),
                           self.log_scales.copy(), self.opacity_logits.copy(),
                           self.sh_coeffs.copy(), self.sh_degree)

    def renormalize_rotations(self):
        norms = np.linalg.norm(self.rotations, axis=1, keepdims=True)
        self.rotations /= norms

    def validate(self):
        """Check the stored invariants; raises InvalidParameterError."""
        if not np.all(np.isfinite(self.means)):
            raise InvalidParameterError("non-finite means")
        norms = np.linalg.norm(self.rotations, axis=1)
        if len(self) and np.max(np.abs(norms - 1.0)) > 1e-9:
            raise InvalidParameterError("rotations drifted from unit norm")

    def inverse_covariances_packed(self) -> np.ndarray:
        """(N, 6) packed inverse covariances [P00,P11,P22,P01,P02,P12]."""
        R = quat_to_rotmat_batch(self.rotations)
        inv_s2 = np.exp(-2.0 * self.log_scales)  # (N,3)
        P = np.einsum("nab,nb,ncb->nac", R, inv_s2, R)
        out = np.empty((len(self), 6), dtype=np.float64)
        out[:, 0] = P[:, 0, 0]
        out[:, 1] = P[:, 1, 1]
        out[:, 2] = P[:, 2, 2]
        out[:, 3] = P[:, 0, 1]
        out[:, 4] = P[:, 0, 2]
        out[:, 5] = P[:, 1, 2]
        return out

    def covariances(self) -> np.ndarray:
        """(N, 3, 3) covariance matrices."""
        R = quat_to_rotmat_batch(self.rotations)
        s2 = np.exp(2.0 * self.log_scales)
        return np.einsum("nab,nb,ncb->nac", R, s2, R)


def covariance(q: np.ndarray, s: np.ndarray) -> np.ndarray:
    """Assemble a covariance matrix from a unit quaternion and positive scales."""
    q = np.asarray(q, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    if abs(np.linalg.norm(q) - 1.0) > QUAT_UNIT_TOL:
        raise InvalidParameterError(f"quaternion norm {np.linalg.norm(q):.9f} is not 1")
    if np.any(s <= 0):
        raise InvalidParameterError("scales must be strictly positive")
    R = quat_to_rotmat(q)
    return (R * (s * s)) @ R.T


def inverse_covariance(q: np.ndarray, s: np.ndarray) -> np.ndarray:
    """Inverse covariance assembled directly (avoids a numerical inversion)."""
    q = np.asarray(q, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    if abs(np.linalg.norm(q) - 1.0) > QUAT_UNIT_TOL:
        raise InvalidParameterError(f"quaternion norm {np.linalg.norm(q):.9f} is not 1")
    if np.any(s <= 0):
        raise InvalidParameterError("scales must be strictly positive")
    R = quat_to_rotmat(q)
    return (R / (s * s)) @ R.T


@dataclass
class GradBuffer:
    """Accumulator for d(loss)/d(parameters), shaped like a GaussianSet."""

    means: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    sh_coeffs: np.ndarray

    @classmethod
    def zeros_like(cls, gset: GaussianSet) -> "GradBuffer":
        return cls(np.zeros_like(gset.means), np.zeros_like(gset.rotations),
                   np.zeros_like(gset.log_scales), np.zeros_like(gset.opacity_logits),
                   np.zeros_like(gset.sh_coeffs))

    def groups(self):
        return {"means": self.means, "rotations": self.rotations,
                "log_scales": self.log_scales, "opacity_logits": self.opacity_logits,
                "sh": self.sh_coeffs}

    def add(self, other: "GradBuffer"):
        self.means += other.means
        self.rotations += other.rotations
        self.log_scales += other.log_scales
        self.opacity_logits += other.opacity_logits
        self.sh_coeffs += other.sh_coeffs

    def scale(self, c: float):
        self.means *= c
        self.rotations *= c
        self.log_scales *= c
        self.opacity_logits *= c
        self.sh_coeffs *= c

    def norms(self):
        return {name: float(np.linalg.norm(g)) for name, g in self.groups().items()}

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(g)) for g in self.groups().values())


@dataclass
class Camera:
    """Pinhole camera: x_cam = rotation @ x_world + translation."""

    rotation: np.ndarray
    translation: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if self.width < 1 or self.height < 1:
            raise InvalidParameterError("camera image dimensions must be >= 1")
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if err > 1e-6:
            raise InvalidParameterError(f"camera rotation not orthonormal (err {err:.2e})")

    @property
    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation


def save_cameras(cams: list, path) -> None:
    data = [{"R": [float(v) for v in c.rotation.reshape(-1)],
             "t": [float(v) for v in c.translation],
             "fx": c.fx, "fy": c.fy, "cx": c.cx, "cy": c.cy,
             "width": c.width, "height": c.height} for c in cams]
    Path(path).write_text(json.dumps(data, indent=1))


def load_cameras(path) -> list:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ParseError(f"cameras file {path}: invalid JSON ({e})") from e
    cams = []
    for idx, rec in enumerate(data):
        for key in ("R", "t", "fx", "fy", "cx", "cy", "width", "height"):
            if key not in rec:
                raise ParseError(f"cameras file {path}: record {idx} missing field '{key}'")
        cams.append(Camera(np.array(rec["R"], dtype=np.float64).reshape(3, 3),
                           np.array(rec["t"], dtype=np.float64),
                           float(rec["fx"]), float(rec["fy"]),
                           float(rec["cx"]), float(rec["cy"]),
                           int(rec["width"]), int(rec["height"])))
    return cams


# ---------------------------------------------------------------------------
# PLY checkpoint format
# ---------------------------------------------------------------------------
#
# Properties follow the common 3DGS attribute naming (x,y,z, rot_0..3,
# scale_0..2 in log space, opacity as a logit, f_dc_0..2 and f_rest_*) so
# checkpoints interoperate with standard tooling. Values are written as
# doubles so save/load round-trips are bit-exact.

def _ply_property_names(sh_degree: int):
    basis = (sh_degree + 1) ** 2
    names = ["x", "y", "z"]
    names += [f"rot_{i}" for i in range(4)]
    names += [f"scale_{i}" for i in range(3)]
    names += ["opacity"]
    names += [f"f_dc_{i}" for i in range(3)]
    names += [f"f_rest_{i}" for i in range(3 * (basis - 1))]
    return names


def _flatten_records(gset: GaussianSet) -> np.ndarray:
    n = len(gset)
    basis = (gset.sh_degree + 1) ** 2
    cols = [gset.means, gset.rotations, gset.log_scales,
            gset.opacity_logits.reshape(n, 1), gset.sh_coeffs[:, :, 0]]
    if basis > 1:
        # channel-major rest coefficients, matching common 3DGS layout
        cols.append(gset.sh_coeffs[:, :, 1:].reshape(n, 3 * (basis - 1)))
    return np.concatenate(cols, axis=1)


def _unflatten_records(rec: np.ndarray, sh_degree: int) -> GaussianSet:
    n = rec.shape[0]
    basis = (sh_degree + 1) ** 2
    means = rec[:, 0:3]
    rotations = rec[:, 3:7]
    log_scales = rec[:, 7:10]
    opacity = rec[:, 10]
    sh = np.zeros((n, 3, basis), dtype=np.float64)
    sh[:, :, 0] = rec[:, 11:14]
    if basis > 1:
        sh[:, :, 1:] = rec[:, 14:14 + 3 * (basis - 1)].reshape(n, 3, basis - 1)
    return GaussianSet(means, rotations, log_scales, opacity, sh, sh_degree)


def save_gaussians(gset: GaussianSet, path, binary: bool = True) -> None:
    """Write a PLY checkpoint (binary little-endian by default)."""
    names = _ply_property_names(gset.sh_degree)
    rec = _flatten_records(gset)
    fmt = "binary_little_endian" if binary else "ascii"
    header = ["ply", f"format {fmt} 1.0", f"element vertex {len(gset)}"]
    header += [f"property double {nm}" for nm in names]
    header.append("end_header")
    htext = "\n".join(header) + "\n"
    path = Path(path)
    if binary:
        with open(path, "wb") as f:
            f.write(htext.encode("ascii"))
            f.write(np.ascontiguousarray(rec, dtype="<f8").tobytes())
    else:
        with open(path, "w") as f:
            f.write(htext)
            for row in rec:
                f.write(" ".join(f"{v:.17g}" for v in row) + "\n")


def load_gaussians(path) -> GaussianSet:
    """Read a PLY checkpoint written by save_gaussians (or compatible)."""
    path = Path(path)
    with open(path, "rb") as f:
        data = f.read()
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply") or end < 0:
        raise ParseError(f"{path}: not a PLY file (missing header)")
    header_lines = data[:end].decode("ascii", errors="replace").splitlines()
    body = data[end + len(b"end_header\n"):]

    fmt = None
    count = None
    props = []
    for line in header_lines:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            if parts[1] != "vertex":
                raise ParseError(f"{path}: unsupported element '{parts[1]}'")
            count = int(parts[2])
        elif parts[0] == "property":
            if parts[1] not in ("double", "float"):
                raise ParseError(f"{path}: unsupported property type '{parts[1]}' for field '{parts[-1]}'")
            props.append((parts[2], parts[1]))
    if fmt not in ("ascii", "binary_little_endian"):
        raise ParseError(f"{path}: unsupported format '{fmt}'")
    if count is None:
        raise ParseError(f"{path}: missing element vertex declaration")

    n_rest = sum(1 for nm, _ in props if nm.startswith("f_rest_"))
    if n_rest % 3:
        raise ParseError(f"{path}: f_rest_* property count {n_rest} not divisible by 3")
    basis = n_rest // 3 + 1
    degree = int(round(np.sqrt(basis))) - 1
    if (degree + 1) ** 2 != basis:
        raise ParseError(f"{path}: f_rest_* count {n_rest} implies non-square SH basis")
    expected = _ply_property_names(degree)
    names = [nm for nm, _ in props]
    for nm in expected:
        if nm not in names:
            raise ParseError(f"{path}: missing property '{nm}'")

    if fmt == "binary_little_endian":
        itemsize = sum(8 if ty == "double" else 4 for _, ty in props)
        if len(body) < count * itemsize:
            raise ParseError(f"{path}: truncated body, expected {count} records")
        dtype = np.dtype([(nm, "<f8" if ty == "double" else "<f4") for nm, ty in props])
        raw = np.frombuffer(body[:count * itemsize], dtype=dtype)
        table = {nm: np.asarray(raw[nm], dtype=np.float64) for nm, _ in props}
    else:
        text_rows = body.decode("ascii").split("\n")
        rows = [r for r in text_rows if r.strip()]
        if len(rows) != count:
            raise ParseError(f"{path}: body has {len(rows)} records, header declares {count}")
        vals = np.zeros((count, len(props)), dtype=np.float64)
        for i, r in enumerate(rows):
            fields = r.split()
            if len(fields) != len(props):
                raise ParseError(f"{path}: record {i} has {len(fields)} fields, expected {len(props)}")
            vals[i] = [float(v) for v in fields]
        table = {nm: vals[:, idx] for idx, (nm, _) in enumerate(props)}

    rec = np.stack([table[nm] for nm in expected], axis=1) if count else np.zeros((0, len(expected)))
    return _unflatten_records(rec, degree)
