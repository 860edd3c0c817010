"""Feldkamp-Davis-Kress reconstruction for a full circular orbit.

Pipeline: cosine preweighting, row-wise ramp filtering on the detector rescaled
to the rotation axis, then voxel-driven backprojection with the ``sod^2 / U^2``
distance weight.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numba
import numpy as np

from .data import Projection, ProjectionSet, Volume3D
from .geometry import TWO_PI, ConeBeamGeometry

log = logging.getLogger(__name__)

KERNELS = ("ramp", "ramp_hann")


@dataclass(frozen=True)
class FilterSpec:
    kernel: str = "ramp"
    pad_factor: int = 2

    def __post_init__(self):
        if self.kernel not in KERNELS:
            raise ValueError(f"unknown filter kernel {self.kernel!r}; expected one of {KERNELS}")
        if self.pad_factor < 2:
            raise ValueError("pad_factor must be >= 2")

    def padded_length(self, n: int) -> int:
        return 1 << int(math.ceil(math.log2(self.pad_factor * n)))


@dataclass(frozen=True)
class ReconGrid:
    dims: tuple[int, int, int] = (64, 64, 64)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] | None = None

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(n) for n in self.dims))
        object.__setattr__(self, "spacing", tuple(float(s) for s in np.broadcast_to(self.spacing, (3,))))
        if any(n < 1 for n in self.dims) or any(s <= 0 for s in self.spacing):
            raise ValueError(f"invalid recon grid dims={self.dims} spacing={self.spacing}")
        if self.origin is None:
            origin = tuple(-0.5 * (n - 1) * s for n, s in zip(self.dims, self.spacing))
            object.__setattr__(self, "origin", origin)
        else:
            object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))

    @classmethod
    def like(cls, vol: Volume3D) -> "ReconGrid":
        return cls(vol.dims, vol.spacing, vol.origin)


def _ramp_taps(k, spacing):
    k = np.asarray(k)
    h = np.zeros(k.shape)
    h[k == 0] = 1.0 / (4.0 * spacing**2)
    odd = k % 2 == 1
    h[odd] = -1.0 / (math.pi * k[odd] * spacing) ** 2
    return h


def ramp_kernel(n: int, spacing: float = 1.0) -> np.ndarray:
    """Discrete ramp kernel ``h[k]`` for ``k = -n..n``."""
    return _ramp_taps(np.arange(-n, n + 1), spacing)


def frequency_response(length: int, spacing: float, kernel: str = "ramp") -> np.ndarray:
    """Real frequency response of the ramp kernel wrapped into ``length`` taps."""
    m = np.arange(length)
    taps = _ramp_taps(np.where(m <= length // 2, m, m - length), spacing)
    H = np.fft.fft(taps).real
    if kernel == "ramp_hann":
        f = np.abs(np.fft.fftfreq(length))  # cycles/sample, Nyquist at 0.5
        H = H * 0.5 * (1.0 + np.cos(2.0 * math.pi * f))
    return H


def filter_rows(proj, spec: FilterSpec = FilterSpec(), spacing: float = 1.0):
    """Convolve every detector row with the discrete ramp kernel.

    Accepts a :class:`Projection` or an array whose last axis is the detector
    row. The result is the plain discrete convolution ``sum_j x[j] h[i-j]``;
    the ``spacing`` integration factor is left to the caller.
    """
    pixels = proj.pixels if isinstance(proj, Projection) else np.asarray(proj, dtype=np.float64)
    n = pixels.shape[-1]
    length = spec.padded_length(n)
    H = frequency_response(length, spacing, spec.kernel)
    spectrum = np.fft.rfft(pixels, n=length, axis=-1)
    out = np.fft.irfft(spectrum * H[: length // 2 + 1], n=length, axis=-1)[..., :n]
    if isinstance(proj, Projection):
        return Projection(proj.theta, out)
    return out


def preweight(proj, geom: ConeBeamGeometry):
    """Scale pixels by ``sdd / sqrt(sdd^2 + u^2 + v^2)`` (mm, from the principal ray)."""
    um = geom.u_mm(np.arange(geom.det_cols))
    vm = geom.v_mm(np.arange(geom.det_rows))
    w = geom.sdd / np.sqrt(geom.sdd**2 + um[None, :] ** 2 + vm[:, None] ** 2)
    if isinstance(proj, Projection):
        return Projection(proj.theta, proj.pixels * w)
    return np.asarray(proj) * w


def angular_weights(angles) -> np.ndarray:
    """Per-view arc length; ``2 pi / M`` for uniformly spaced angles."""
    a = np.asarray(angles, dtype=np.float64)
    if a.size < 2:
        raise ValueError("backprojection needs at least two angles")
    nxt = np.roll(a, -1)
    nxt[-1] += TWO_PI
    prv = np.roll(a, 1)
    prv[0] -= TWO_PI
    return 0.5 * (nxt - prv)


@numba.njit(cache=True, parallel=True)
def _backproject(
    q, cos_t, sin_t, dtheta, xs, ys, zs, sod, sdd, pitch_u, pitch_v, cu, cv, off_u, off_v, legacy, nearest, out, missed
):
    n_views, n_rows, n_cols = q.shape
    for ix in numba.prange(xs.size):
        x = xs[ix]
        for iy in range(ys.size):
            y = ys[iy]
            for iz in range(zs.size):
                z = zs[iz]
                acc = 0.0
                miss = 0
                for k in range(n_views):
                    U = sod - (x * cos_t[k] + y * sin_t[k])
                    tang = -x * sin_t[k] + y * cos_t[k]
                    mag = sdd / U
                    fu = (tang * mag - off_u) / pitch_u + cu
                    fv = (z * mag - off_v) / pitch_v + cv
                    if nearest:
                        iu = int(math.floor(fu + 0.5))
                        iv = int(math.floor(fv + 0.5))
                        if iu < 0 or iu >= n_cols or iv < 0 or iv >= n_rows:
                            miss += 1
                            continue
                        val = q[k, iv, iu]
                    else:
                        if fu < 0.0 or fu > n_cols - 1 or fv < 0.0 or fv > n_rows - 1:
                            miss += 1
                            continue
                        u0 = min(int(math.floor(fu)), n_cols - 2) if n_cols > 1 else 0
                        v0 = min(int(math.floor(fv)), n_rows - 2) if n_rows > 1 else 0
                        u1 = u0 + 1 if n_cols > 1 else 0
                        v1 = v0 + 1 if n_rows > 1 else 0
                        wu = fu - u0
                        wv = fv - v0
                        val = (q[k, v0, u0] * (1.0 - wu) + q[k, v0, u1] * wu) * (1.0 - wv) + (
                            q[k, v1, u0] * (1.0 - wu) + q[k, v1, u1] * wu
                        ) * wv
                    if legacy:
                        w = sod * sod / ((sod + sdd) * (sod + sdd))
                    else:
                        w = sod * sod / (U * U)
                    acc += val * w * dtheta[k]
                out[ix, iy, iz] = acc
                missed[ix] += miss


def backproject(filtered: ProjectionSet, geom: ConeBeamGeometry | None = None, grid: ReconGrid = ReconGrid(),
                interpolation: str = "bilinear", constant_backprojection_weight: bool = False) -> Volume3D:
    """Distance-weighted backprojection of filtered views onto ``grid``.

    Voxels whose detector footprint falls outside the panel receive nothing
    from that view.
    """
    geom = filtered.geom if geom is None else geom
    if interpolation not in ("bilinear", "nearest"):
        raise ValueError(f"unknown interpolation {interpolation!r}")
    dtheta = angular_weights(geom.angles)
    xs, ys, zs = (o + s * np.arange(n) for o, s, n in zip(grid.origin, grid.spacing, grid.dims))
    out = np.zeros(grid.dims)
    missed = np.zeros(grid.dims[0], dtype=np.int64)
    _backproject(
        np.ascontiguousarray(filtered.data, dtype=np.float64),
        np.cos(geom.angles), np.sin(geom.angles), dtheta,
        xs, ys, zs, float(geom.sod), float(geom.sdd), float(geom.pixel_pitch_u), float(geom.pixel_pitch_v),
        0.5 * (geom.det_cols - 1), 0.5 * (geom.det_rows - 1), float(geom.det_offset_u), float(geom.det_offset_v),
        bool(constant_backprojection_weight), interpolation == "nearest", out, missed,
    )
    n_missed = int(missed.sum())
    if n_missed:
        log.info("backprojection: %d voxel-view footprints fell outside the detector", n_missed)
    return Volume3D(out, grid.spacing, grid.origin)


def fdk_reconstruct(ps: ProjectionSet, geom: ConeBeamGeometry | None = None, grid: ReconGrid = ReconGrid(),
                    spec: FilterSpec = FilterSpec(), interpolation: str = "bilinear",
                    constant_backprojection_weight: bool = False) -> Volume3D:
    geom = ps.geom if geom is None else geom
    # ramp filtering happens on the detector rescaled to the rotation axis
    du = geom.pixel_pitch_u * geom.sod / geom.sdd
    weighted = preweight(ps.data, geom)
    q = filter_rows(weighted, spec, du) * (0.5 * du)
    return backproject(ProjectionSet(geom, q), geom, grid, interpolation, constant_backprojection_weight)
