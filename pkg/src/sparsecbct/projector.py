"""Ray-driven cone-beam forward projection of voxel volumes.

Every pixel ray is integrated with the midpoint rule over its intersection with
the volume box. Each ray's samples are summed serially in order, so results do
not depend on how pixels are distributed over threads.
"""

from __future__ import annotations

import math

import numba
import numpy as np

from .data import Projection, ProjectionSet, Volume3D
from .geometry import ConeBeamGeometry, Ray, view_rays


@numba.njit(cache=True, inline="always")
def _axis_coord(f, n):
    # clamp a continuous index to the grid, return (i0, i1, weight of i1)
    if f < 0.0:
        f = 0.0
    elif f > n - 1:
        f = n - 1.0
    i0 = int(math.floor(f))
    if i0 > n - 2:
        i0 = n - 2 if n >= 2 else 0
    w = f - i0
    i1 = i0 + 1 if n >= 2 else 0
    return i0, i1, w


@numba.njit(cache=True)
def _trilinear(vals, ox, oy, oz, sx, sy, sz, px, py, pz):
    nx, ny, nz = vals.shape
    fx = (px - ox) / sx
    fy = (py - oy) / sy
    fz = (pz - oz) / sz
    if fx < -0.5 or fx > nx - 0.5 or fy < -0.5 or fy > ny - 0.5 or fz < -0.5 or fz > nz - 0.5:
        return 0.0
    x0, x1, wx = _axis_coord(fx, nx)
    y0, y1, wy = _axis_coord(fy, ny)
    z0, z1, wz = _axis_coord(fz, nz)
    c00 = vals[x0, y0, z0] * (1.0 - wx) + vals[x1, y0, z0] * wx
    c10 = vals[x0, y1, z0] * (1.0 - wx) + vals[x1, y1, z0] * wx
    c01 = vals[x0, y0, z1] * (1.0 - wx) + vals[x1, y0, z1] * wx
    c11 = vals[x0, y1, z1] * (1.0 - wx) + vals[x1, y1, z1] * wx
    c0 = c00 * (1.0 - wy) + c10 * wy
    c1 = c01 * (1.0 - wy) + c11 * wy
    return c0 * (1.0 - wz) + c1 * wz


@numba.njit(cache=True)
def _sample_points(vals, origin, spacing, pts, out):
    for i in range(pts.shape[0]):
        out[i] = _trilinear(
            vals, origin[0], origin[1], origin[2], spacing[0], spacing[1], spacing[2], pts[i, 0], pts[i, 1], pts[i, 2]
        )


@numba.njit(cache=True, parallel=True)
def _integrate_rays(vals, origin, spacing, src, dirs, t_near, t_far, n_sample, out):
    nx, ny, nz = vals.shape
    for r in numba.prange(dirs.shape[0]):
        length = t_far[r] - t_near[r]
        if length <= 0.0:
            out[r] = 0.0
            continue
        dt = length / n_sample
        # march in continuous voxel-index coordinates
        fx0 = (src[r, 0] - origin[0]) / spacing[0]
        fy0 = (src[r, 1] - origin[1]) / spacing[1]
        fz0 = (src[r, 2] - origin[2]) / spacing[2]
        dx = dirs[r, 0] / spacing[0]
        dy = dirs[r, 1] / spacing[1]
        dz = dirs[r, 2] / spacing[2]
        acc = 0.0
        for i in range(n_sample):
            t = t_near[r] + (i + 0.5) * dt
            fx = fx0 + t * dx
            fy = fy0 + t * dy
            fz = fz0 + t * dz
            if fx < -0.5 or fx > nx - 0.5 or fy < -0.5 or fy > ny - 0.5 or fz < -0.5 or fz > nz - 0.5:
                continue
            x0, x1, wx = _axis_coord(fx, nx)
            y0, y1, wy = _axis_coord(fy, ny)
            z0, z1, wz = _axis_coord(fz, nz)
            c00 = vals[x0, y0, z0] * (1.0 - wx) + vals[x1, y0, z0] * wx
            c10 = vals[x0, y1, z0] * (1.0 - wx) + vals[x1, y1, z0] * wx
            c01 = vals[x0, y0, z1] * (1.0 - wx) + vals[x1, y0, z1] * wx
            c11 = vals[x0, y1, z1] * (1.0 - wx) + vals[x1, y1, z1] * wx
            c0 = c00 * (1.0 - wy) + c10 * wy
            c1 = c01 * (1.0 - wy) + c11 * wy
            acc += c0 * (1.0 - wz) + c1 * wz
        out[r] = acc * dt


def default_n_sample(vol: Volume3D) -> int:
    return 2 * max(vol.dims)


def _grid_arrays(vol: Volume3D):
    vals = np.ascontiguousarray(vol.values, dtype=np.float64)
    return vals, np.asarray(vol.origin, dtype=np.float64), np.asarray(vol.spacing, dtype=np.float64)


def sample_volume(vol: Volume3D, p):
    """Trilinear lookup at world points ``p`` (..., 3); zero outside the volume box."""
    p = np.asarray(p, dtype=np.float64)
    flat = np.ascontiguousarray(p.reshape(-1, 3))
    out = np.empty(flat.shape[0])
    vals, origin, spacing = _grid_arrays(vol)
    _sample_points(vals, origin, spacing, flat, out)
    return out.reshape(p.shape[:-1]) if p.ndim > 1 else float(out[0])


def integrate_rays(vol: Volume3D, origins, dirs, t_near, t_far, n_sample: int) -> np.ndarray:
    """Midpoint-rule line integrals for a batch of rays."""
    if n_sample < 2:
        raise ValueError("n_sample must be >= 2")
    dirs = np.ascontiguousarray(np.asarray(dirs, dtype=np.float64).reshape(-1, 3))
    origins = np.ascontiguousarray(np.broadcast_to(np.asarray(origins, dtype=np.float64), dirs.shape))
    t_near = np.ascontiguousarray(np.asarray(t_near, dtype=np.float64).reshape(-1))
    t_far = np.ascontiguousarray(np.asarray(t_far, dtype=np.float64).reshape(-1))
    out = np.empty(dirs.shape[0])
    vals, origin, spacing = _grid_arrays(vol)
    _integrate_rays(vals, origin, spacing, origins, dirs, t_near, t_far, int(n_sample), out)
    return out


def integrate_ray(vol: Volume3D, ray: Ray, n_sample: int) -> float:
    if ray.t_near == ray.t_far:
        return 0.0
    return float(integrate_rays(vol, ray.origin[None], ray.direction[None], [ray.t_near], [ray.t_far], n_sample)[0])


def project_view(vol: Volume3D, geom: ConeBeamGeometry, theta: float, n_sample: int | None = None) -> Projection:
    n_sample = default_n_sample(vol) if n_sample is None else n_sample
    src, d, t_near, t_far, hit = view_rays(geom, theta, vol.bounds)
    t_far = np.where(hit, t_far, t_near)  # missed pixels integrate to 0
    pix = integrate_rays(vol, src[None], d, t_near, t_far, n_sample)
    return Projection(float(theta), pix.reshape(geom.det_rows, geom.det_cols))


def project_all(vol: Volume3D, geom: ConeBeamGeometry, n_sample: int | None = None) -> ProjectionSet:
    data = np.empty((geom.n_views, geom.det_rows, geom.det_cols))
    for k, theta in enumerate(geom.angles):
        data[k] = project_view(vol, geom, theta, n_sample).pixels
    return ProjectionSet(geom, data)


def transmittance(proj, I0: float):
    """Beer-Lambert intensity ``I0 exp(-P)`` for line integrals ``P``."""
    if not I0 > 0:
        raise ValueError("I0 must be positive")
    pixels = proj.pixels if isinstance(proj, Projection) else np.asarray(proj)
    return I0 * np.exp(-pixels)


def line_integrals_from_intensity(intensity, I0: float):
    return -np.log(np.asarray(intensity) / I0)
