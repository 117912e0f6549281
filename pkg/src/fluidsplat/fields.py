"""Raw field dumps: little-endian f32 in x-fastest order plus a JSON sidecar."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import ParseError
from .occupancy import GridSpec


def save_field(arr: np.ndarray, spec: GridSpec, name: str, path) -> Path:
    """Write `<path>.raw` and `<path>.json`; returns the raw path."""
    path = Path(path)
    raw = path.with_suffix(".raw")
    meta = path.with_suffix(".json")
    data = np.asarray(arr, dtype="<f4")
    if data.shape != spec.dims:
        raise ParseError(f"field shape {data.shape} does not match grid {spec.dims}")
    raw.write_bytes(np.ravel(data, order="F").tobytes())
    meta.write_text(json.dumps({
        "dims": list(spec.dims), "h": spec.h, "origin": list(spec.origin),
        "field_name": name,
    }, indent=1))
    return raw


def load_field(path) -> tuple:
    """Read a dump written by save_field; returns (array, GridSpec, name)."""
    path = Path(path)
    raw = path.with_suffix(".raw")
    meta = path.with_suffix(".json")
    try:
        info = json.loads(meta.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ParseError(f"{meta}: bad or missing sidecar ({e})") from e
    for key in ("dims", "h", "origin", "field_name"):
        if key not in info:
            raise ParseError(f"{meta}: sidecar missing field '{key}'")
    dims = tuple(int(d) for d in info["dims"])
    buf = raw.read_bytes()
    count = dims[0] * dims[1] * dims[2]
    if len(buf) != 4 * count:
        raise ParseError(f"{raw}: expected {4 * count} bytes for dims {dims}, "
                         f"got {len(buf)}")
    arr = np.frombuffer(buf, dtype="<f4").reshape(dims, order="F").astype(np.float64)
    spec = GridSpec(dims, float(info["h"]), tuple(info["origin"]))
    return arr, spec, info["field_name"]
