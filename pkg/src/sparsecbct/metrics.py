"""Dual-volume fusion and volume quality metrics."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np
from skimage.metrics import structural_similarity

from .data import Volume3D

PSNR_CAP_DB = 200.0
DEFAULT_OMEGA = 0.8


def _check_grids(a: Volume3D, b: Volume3D, op: str):
    if not a.same_grid(b):
        raise ValueError(f"{op}: volume grids differ ({a.grid_dict()} vs {b.grid_dict()})")


def fuse(v_sin: Volume3D, v_dr: Volume3D, omega: float = DEFAULT_OMEGA) -> Volume3D:
    """Voxel-wise ``omega * v_sin + (1 - omega) * v_dr``."""
    _check_grids(v_sin, v_dr, "fuse")
    if not 0.0 <= omega <= 1.0:
        raise ValueError(f"omega must lie in [0, 1], got {omega}")
    if omega == 1.0:
        return v_sin.with_values(v_sin.values.copy())
    if omega == 0.0:
        return v_dr.with_values(v_dr.values.copy())
    return v_sin.with_values(omega * v_sin.values + (1.0 - omega) * v_dr.values)


def _values(v):
    return v.values if isinstance(v, Volume3D) else np.asarray(v, dtype=np.float64)


def peak(ref) -> float:
    r = _values(ref)
    return float(r.max() - r.min())


def psnr(v, ref) -> float:
    """PSNR in dB with peak = dynamic range of ``ref``; capped at 200 dB."""
    if isinstance(v, Volume3D) and isinstance(ref, Volume3D):
        _check_grids(v, ref, "psnr")
    a, r = _values(v), _values(ref)
    if a.shape != r.shape:
        raise ValueError(f"psnr: shape mismatch {a.shape} vs {r.shape}")
    pk = peak(r)
    if pk == 0.0:
        raise ValueError("psnr: reference has zero dynamic range")
    mse = float(np.mean((a - r) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(pk * pk / mse))


def ssim(v, ref, data_range: float | None = None) -> float:
    """Mean of 2-D SSIM over axial (constant-z) slices.

    Gaussian 11x11 window with sigma 1.5, K1=0.01, K2=0.03; the dynamic range
    defaults to the range of ``ref``.
    """
    if isinstance(v, Volume3D) and isinstance(ref, Volume3D):
        _check_grids(v, ref, "ssim")
    a, r = _values(v), _values(ref)
    if a.shape != r.shape:
        raise ValueError(f"ssim: shape mismatch {a.shape} vs {r.shape}")
    if min(a.shape[0], a.shape[1]) < 11:
        raise ValueError("ssim needs at least 11 voxels along each transverse axis")
    dr = peak(r) if data_range is None else float(data_range)
    if dr == 0.0:
        raise ValueError("ssim: zero dynamic range")
    scores = [
        structural_similarity(
            a[:, :, k], r[:, :, k], data_range=dr, gaussian_weights=True, sigma=1.5,
            use_sample_covariance=False, K1=0.01, K2=0.03,
        )
        for k in range(a.shape[2])
    ]
    return float(np.mean(scores))


def evaluate(v, ref, **extra) -> dict:
    a, r = _values(v), _values(ref)
    record = {
        "psnr_db": psnr(v, ref),
        "ssim": ssim(v, ref),
        "mse": float(np.mean((a - r) ** 2)),
        "max_abs_err": float(np.max(np.abs(a - r))),
    }
    record.update(extra)
    return record


METRICS_FIELDS = ("dataset", "views", "stage", "psnr_db", "ssim", "mse", "max_abs_err", "config_hash", "seed")


def metrics_record(metrics: dict, *, dataset: str, views: int, stage: str, config_hash: str, seed: int) -> dict:
    rec = {"dataset": dataset, "views": int(views), "stage": stage}
    rec.update({k: metrics[k] for k in ("psnr_db", "ssim", "mse", "max_abs_err")})
    rec.update({"config_hash": config_hash, "seed": int(seed)})
    return rec


def write_metrics_json(path, records) -> None:
    Path(path).write_text(json.dumps(list(records), indent=2, sort_keys=False) + "\n")


def write_sweep_csv(path, parameter: str, rows) -> None:
    """One row per swept value: ``parameter, psnr_db, ssim`` plus any extra keys."""
    rows = list(rows)
    fields = [parameter, "psnr_db", "ssim"]
    for r in rows:
        fields += [k for k in r if k not in fields]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        w.writerows(rows)
