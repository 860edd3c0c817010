"""Pipeline configuration: YAML file, defaults, validation and hashing.

A configuration file only needs the keys that differ from :data:`DEFAULTS`;
nested blocks are merged key by key. See ``configs/default.yaml`` for the full
annotated schema.
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

import yaml

from .metrics import DEFAULT_OMEGA

PROTOCOLS = {"23": 23, "50": 50}

_DIFFUSION_BLOCK = {
    "steps": 50,
    "base_width": 16,
    "epochs": 40,
    "batch": 8,
    "lr": 1.0e-3,
    "patch": 48,
    "noise_weight": 1.0,
    "include_final_noise_term": False,
    "inference_dtype": "float32",
}

DEFAULTS = {
    "seed": 0,
    "dataset": "shepp_logan_like",
    "output": "runs/default",
    "phantom": {"kind": "shepp_logan_like", "path": None, "scale_mm": 31.0, "mu": 0.02},
    "volume": {"dims": [64, 64, 64], "spacing": 1.0},
    "geometry": {
        "sod": 1000.0,
        "sdd": 1500.0,
        "det_rows": 96,
        "det_cols": 96,
        "pixel_pitch_u": 1.0,
        "pixel_pitch_v": 1.0,
        "det_offset_u": 0.0,
        "det_offset_v": 0.0,
    },
    "projection": {"n_sample": 128},
    "sparse": {"protocol": "23", "views": None, "subset_of_dense": False},
    "dense": {"views": 180},
    "naf": {
        "levels": 8,
        "table_size_log2": 15,
        "features_per_level": 2,
        "base_resolution": 8,
        "growth_factor": 1.38,
        "width": 64,
        "depth": 2,
        "out_scale": 0.02,
        "iters": 1500,
        "rays_per_batch": 1024,
        "lr_tables": 1.0e-2,
        "lr_decoder": 1.0e-2,
        "adam_eps": 1.0e-15,
        "lr_final_factor": 1.0,
        "n_sample": 64,
        "render_dtype": "float32",
    },
    "diffusion": {"sino": dict(_DIFFUSION_BLOCK), "dr": dict(_DIFFUSION_BLOCK)},
    "fdk": {"filter": "ramp", "pad_factor": 2, "interpolation": "bilinear", "constant_backprojection_weight": False},
    "fusion": {"omega": DEFAULT_OMEGA},
}

# keys that never influence results and are therefore left out of the hash
_UNHASHED = ("output",)


class ConfigError(ValueError):
    pass


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in (override or {}).items():
        where = f"{path}{k}"
        if k not in base:
            raise ConfigError(f"unknown config key '{where}'")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"config key '{where}' must be a mapping")
            out[k] = _merge(base[k], v, where + ".")
        else:
            out[k] = v
    return out


def sparse_views(cfg: dict) -> int:
    sp = cfg["sparse"]
    proto = str(sp["protocol"])
    if proto in PROTOCOLS:
        if sp["views"] not in (None, PROTOCOLS[proto]):
            raise ConfigError(f"protocol {proto} fixes sparse.views to {PROTOCOLS[proto]}, got {sp['views']}")
        return PROTOCOLS[proto]
    if proto != "custom":
        raise ConfigError(f"sparse.protocol must be 23, 50 or custom, got {proto!r}")
    if sp["views"] is None:
        raise ConfigError("sparse.views is required for the custom protocol")
    return int(sp["views"])


def validate(cfg: dict, base_dir: Path | None = None) -> dict:
    n = sparse_views(cfg)
    if n < 2:
        raise ConfigError("at least 2 sparse views are required")
    m = int(cfg["dense"]["views"])
    if m < n:
        raise ConfigError(f"dense.views ({m}) must be >= the sparse view count ({n})")
    omega = float(cfg["fusion"]["omega"])
    if not 0.0 <= omega <= 1.0:
        raise ConfigError(f"fusion.omega must lie in [0, 1], got {omega}")
    g = cfg["geometry"]
    if not (g["sod"] > 0 and g["sdd"] > g["sod"]):
        raise ConfigError("geometry needs 0 < sod < sdd")
    if cfg["phantom"]["kind"] not in ("shepp_logan_like", "volume"):
        raise ConfigError("phantom.kind must be shepp_logan_like or volume")
    if cfg["phantom"]["kind"] == "volume":
        p = cfg["phantom"]["path"]
        if not p:
            raise ConfigError("phantom.path is required when phantom.kind is volume")
        full = Path(p) if base_dir is None else (Path(base_dir) / p)
        if not full.with_suffix(".raw").exists():
            raise ConfigError(f"phantom.path {full} does not exist")
        cfg["phantom"]["path"] = str(full.resolve())
    if cfg["fdk"]["filter"] not in ("ramp", "ramp_hann"):
        raise ConfigError("fdk.filter must be ramp or ramp_hann")
    if cfg["fdk"]["interpolation"] not in ("bilinear", "nearest"):
        raise ConfigError("fdk.interpolation must be bilinear or nearest")
    for dom in ("sino", "dr"):
        if int(cfg["diffusion"][dom]["steps"]) < 1:
            raise ConfigError(f"diffusion.{dom}.steps must be >= 1")
    return cfg


def load_config(path=None, overrides: dict | None = None) -> dict:
    """Read a YAML file (or nothing), merge over the defaults, validate."""
    user = {}
    base_dir = None
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} not found")
        try:
            user = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        base_dir = path.parent
    cfg = _merge(DEFAULTS, user)
    if overrides:
        cfg = _merge(cfg, overrides)
    return validate(cfg, base_dir)


def config_hash(cfg: dict) -> str:
    """SHA-256 of the canonical JSON form of every result-affecting key."""
    body = {k: v for k, v in cfg.items() if k not in _UNHASHED}
    blob = json.dumps(body, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def dump_config(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=False)
