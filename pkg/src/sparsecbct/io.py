"""Raw little-endian float32 files with JSON sidecars, plus PNG previews.

Each artifact ``name.raw`` has a sidecar ``name.json`` describing its layout:

* volumes: ``x``-fastest, then ``y``, then ``z``
* projection sets: ``u``-fastest, then ``v``, then angle
* sinogram stacks: detector column fastest, then angle, then detector row
* DR stacks: same layout as projection sets

Sidecars carry the geometry (when relevant), an ``axes`` tag and the config
hash of the run that produced the file.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from .data import ProjectionSet, Volume3D
from .decouple import DR_AXES, SINO_AXES, DRStack, SinogramStack
from .geometry import ConeBeamGeometry

RAW_DTYPE = np.dtype("<f4")
FORMAT_VERSION = 1


class ArtifactError(RuntimeError):
    pass


def _paths(path):
    path = Path(path)
    base = path.with_suffix("") if path.suffix in (".raw", ".json") else path
    return base.with_suffix(".raw"), base.with_suffix(".json")


def _write(path, array_c_order: np.ndarray, meta: dict) -> Path:
    raw, side = _paths(path)
    raw.parent.mkdir(parents=True, exist_ok=True)
    np.ascontiguousarray(array_c_order, dtype=RAW_DTYPE).tofile(raw)
    meta = {"format_version": FORMAT_VERSION, "dtype": "float32-le", **meta}
    side.write_text(json.dumps(meta, indent=2) + "\n")
    return raw


def read_sidecar(path) -> dict:
    raw, side = _paths(path)
    if not side.exists() or not raw.exists():
        raise FileNotFoundError(f"missing artifact {raw} / {side}")
    meta = json.loads(side.read_text())
    if meta.get("format_version") != FORMAT_VERSION:
        raise ArtifactError(f"{side}: unsupported format version {meta.get('format_version')}")
    return meta


def _read(path, shape) -> np.ndarray:
    raw, _ = _paths(path)
    data = np.fromfile(raw, dtype=RAW_DTYPE)
    if data.size != int(np.prod(shape)):
        raise ArtifactError(f"{raw}: expected {int(np.prod(shape))} values, found {data.size}")
    return data.reshape(shape).astype(np.float64)


def save_volume(path, vol: Volume3D, config_hash: str = "", **extra) -> Path:
    # values[ix, iy, iz] -> z-major C array so x varies fastest on disk
    meta = {"kind": "volume", "axes": "x,y,z (x fastest)", **vol.grid_dict(), "config_hash": config_hash, **extra}
    return _write(path, vol.values.transpose(2, 1, 0), meta)


def load_volume(path) -> Volume3D:
    meta = read_sidecar(path)
    if meta.get("kind") != "volume":
        raise ArtifactError(f"{path}: not a volume artifact")
    nx, ny, nz = meta["dims"]
    data = _read(path, (nz, ny, nx)).transpose(2, 1, 0)
    return Volume3D(np.ascontiguousarray(data), meta["spacing"], meta["origin"])


def save_projections(path, ps: ProjectionSet, config_hash: str = "", **extra) -> Path:
    meta = {"kind": "projections", "axes": "angle,v,u (u fastest)", "geometry": ps.geom.to_dict(),
            "config_hash": config_hash, **extra}
    return _write(path, ps.data, meta)


def load_projections(path) -> ProjectionSet:
    meta = read_sidecar(path)
    if meta.get("kind") != "projections":
        raise ArtifactError(f"{path}: not a projection-set artifact")
    geom = ConeBeamGeometry.from_dict(meta["geometry"])
    return ProjectionSet(geom, _read(path, (geom.n_views, geom.det_rows, geom.det_cols)))


def save_stack(path, stack, config_hash: str = "", **extra) -> Path:
    if isinstance(stack, SinogramStack):
        kind, axes = "sinogram_stack", SINO_AXES
    elif isinstance(stack, DRStack):
        kind, axes = "dr_stack", DR_AXES
    else:
        raise TypeError(f"unsupported stack type {type(stack).__name__}")
    meta = {"kind": kind, "axes": axes, "shape": list(stack.data.shape), "geometry": stack.geom.to_dict(),
            "config_hash": config_hash, **extra}
    return _write(path, stack.data, meta)


def load_stack(path, expect: str | None = None):
    meta = read_sidecar(path)
    kind = meta.get("kind")
    if expect is not None and kind != expect:
        raise ArtifactError(f"{path}: expected a {expect}, found {kind}")
    geom = ConeBeamGeometry.from_dict(meta["geometry"])
    data = _read(path, tuple(meta["shape"]))
    if kind == "sinogram_stack":
        if meta["axes"] != SINO_AXES:
            raise ArtifactError(f"{path}: unexpected axis order {meta['axes']}")
        return SinogramStack(geom, data)
    if kind == "dr_stack":
        if meta["axes"] != DR_AXES:
            raise ArtifactError(f"{path}: unexpected axis order {meta['axes']}")
        return DRStack(geom, data)
    raise ArtifactError(f"{path}: not a stack artifact ({kind})")


def save_png(path, image) -> Path:
    """Write a 2-D array as 8-bit grayscale with min-max windowing."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("save_png expects a 2-D array")
    lo, hi = float(img.min()), float(img.max())
    scaled = np.zeros_like(img) if hi == lo else (img - lo) / (hi - lo)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.round(scaled * 255).astype(np.uint8)).save(path)
    return path
