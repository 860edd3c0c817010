"""Circular cone-beam acquisition geometry and per-pixel ray generation.

World frame: the rotation axis is z and the source orbits in the z=0 plane.
For view angle ``theta`` the source sits at ``(sod cos theta, sod sin theta, 0)``
and the flat detector is perpendicular to the source-center line at distance
``sdd`` from the source. Detector ``u`` runs along the in-plane tangent
``(-sin theta, cos theta, 0)`` and ``v`` runs along ``+z``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class Box:
    """Axis-aligned box ``[lo, hi]`` in world millimetres."""

    lo: tuple[float, float, float]
    hi: tuple[float, float, float]

    def __post_init__(self):
        if any(h <= l for l, h in zip(self.lo, self.hi)):
            raise ValueError(f"degenerate box lo={self.lo} hi={self.hi}")

    @classmethod
    def centered(cls, half_extent, center=(0.0, 0.0, 0.0)) -> "Box":
        h = np.broadcast_to(np.asarray(half_extent, dtype=float), (3,))
        c = np.asarray(center, dtype=float)
        return cls(tuple(map(float, c - h)), tuple(map(float, c + h)))

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (np.asarray(self.lo) + np.asarray(self.hi))

    @property
    def size(self) -> np.ndarray:
        return np.asarray(self.hi) - np.asarray(self.lo)

    def contains(self, p) -> bool:
        p = np.asarray(p, dtype=float)
        return bool(np.all(p >= self.lo) and np.all(p <= self.hi))


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float

    def point(self, t):
        return self.origin + t * self.direction


def uniform_angles(n_views: int, offset: float = 0.0) -> np.ndarray:
    """``n_views`` equally spaced angles on ``[0, 2 pi)`` starting at ``offset``."""
    if n_views < 1:
        raise ValueError("n_views must be >= 1")
    step = TWO_PI / n_views
    return np.mod(offset + step * np.arange(n_views), TWO_PI)


@dataclass(frozen=True, eq=False)
class ConeBeamGeometry:
    """Scanner description: distances in mm, detector grid and view angles."""

    sod: float
    sdd: float
    det_rows: int
    det_cols: int
    pixel_pitch_u: float = 1.0
    pixel_pitch_v: float = 1.0
    det_offset_u: float = 0.0
    det_offset_v: float = 0.0
    angles: np.ndarray = field(default_factory=lambda: uniform_angles(360))

    def __post_init__(self):
        angles = np.ascontiguousarray(np.asarray(self.angles, dtype=np.float64).reshape(-1))
        angles.setflags(write=False)
        object.__setattr__(self, "angles", angles)
        if not self.sod > 0:
            raise ValueError(f"sod must be positive, got {self.sod}")
        if not self.sdd > self.sod:
            raise ValueError(f"sdd ({self.sdd}) must exceed sod ({self.sod})")
        if self.pixel_pitch_u <= 0 or self.pixel_pitch_v <= 0:
            raise ValueError("pixel pitches must be positive")
        if self.det_rows < 1 or self.det_cols < 1:
            raise ValueError("detector needs at least one row and one column")
        if angles.size == 0:
            raise ValueError("geometry needs at least one view angle")
        if np.any(angles < 0) or np.any(angles >= TWO_PI):
            raise ValueError("angles must lie in [0, 2pi)")
        if np.any(np.diff(angles) <= 0):
            raise ValueError("angles must be strictly increasing")

    def __eq__(self, other):
        if not isinstance(other, ConeBeamGeometry):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    __hash__ = None

    @property
    def n_views(self) -> int:
        return int(self.angles.size)

    @property
    def magnification(self) -> float:
        return magnification(self)

    def with_angles(self, angles) -> "ConeBeamGeometry":
        d = self.to_dict()
        d["angles"] = angles
        return ConeBeamGeometry.from_dict(d)

    def to_dict(self) -> dict:
        return {
            "sod": float(self.sod),
            "sdd": float(self.sdd),
            "det_rows": int(self.det_rows),
            "det_cols": int(self.det_cols),
            "pixel_pitch_u": float(self.pixel_pitch_u),
            "pixel_pitch_v": float(self.pixel_pitch_v),
            "det_offset_u": float(self.det_offset_u),
            "det_offset_v": float(self.det_offset_v),
            "angles": [float(a) for a in self.angles],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ConeBeamGeometry":
        return cls(
            sod=float(d["sod"]),
            sdd=float(d["sdd"]),
            det_rows=int(d["det_rows"]),
            det_cols=int(d["det_cols"]),
            pixel_pitch_u=float(d.get("pixel_pitch_u", 1.0)),
            pixel_pitch_v=float(d.get("pixel_pitch_v", 1.0)),
            det_offset_u=float(d.get("det_offset_u", 0.0)),
            det_offset_v=float(d.get("det_offset_v", 0.0)),
            angles=np.asarray(d["angles"], dtype=np.float64),
        )

    # Detector coordinates in mm relative to the principal ray, offsets included.
    def u_mm(self, u):
        return (np.asarray(u, dtype=np.float64) - 0.5 * (self.det_cols - 1)) * self.pixel_pitch_u + self.det_offset_u

    def v_mm(self, v):
        return (np.asarray(v, dtype=np.float64) - 0.5 * (self.det_rows - 1)) * self.pixel_pitch_v + self.det_offset_v

    def source_position(self, theta: float) -> np.ndarray:
        c, s = _cos_sin(theta)
        return np.array([self.sod * c, self.sod * s, 0.0])

    def frame(self, theta: float):
        """Return ``(source, detector_center, e_u, e_v)`` for one view."""
        c, s = _cos_sin(theta)
        src = np.array([self.sod * c, self.sod * s, 0.0])
        toward = np.array([-c, -s, 0.0])
        det_center = src + self.sdd * toward
        e_u = np.array([-s, c, 0.0])
        e_v = np.array([0.0, 0.0, 1.0])
        return src, det_center, e_u, e_v

    def pixel_position(self, theta: float, u, v) -> np.ndarray:
        """World position of detector pixel centres; broadcasts over ``u``, ``v``."""
        _, det_center, e_u, e_v = self.frame(theta)
        um = np.asarray(self.u_mm(u))[..., None]
        vm = np.asarray(self.v_mm(v))[..., None]
        return det_center + um * e_u + vm * e_v


def _cos_sin(theta: float):
    # fmod keeps theta and theta + 2pi on the same code path
    t = math.fmod(float(theta), TWO_PI)
    if t < 0:
        t += TWO_PI
    return math.cos(t), math.sin(t)


def magnification(geom: ConeBeamGeometry) -> float:
    return geom.sdd / geom.sod


def clip_to_box(o, d, bounds: Box):
    """Slab-method intersection of the ray ``o + t d`` (t >= 0) with ``bounds``.

    Returns ``(t_near, t_far)`` or ``None`` when the ray misses.
    """
    o = np.asarray(o, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    t0, t1 = 0.0, math.inf
    for axis in range(3):
        lo, hi = bounds.lo[axis], bounds.hi[axis]
        if d[axis] == 0.0:
            if o[axis] < lo or o[axis] > hi:
                return None
            continue
        with np.errstate(over="ignore"):  # near-parallel components give +-inf, which is correct
            ta = (lo - o[axis]) / d[axis]
            tb = (hi - o[axis]) / d[axis]
        if ta > tb:
            ta, tb = tb, ta
        t0 = max(t0, ta)
        t1 = min(t1, tb)
    if t0 > t1:
        return None
    return t0, t1


def clip_to_box_batch(o, d, bounds: Box):
    """Vectorised :func:`clip_to_box` for ``(N, 3)`` origins and directions.

    Returns ``(t_near, t_far, hit)``; entries where ``hit`` is False are zero.
    """
    o = np.atleast_2d(np.asarray(o, dtype=np.float64))
    d = np.atleast_2d(np.asarray(d, dtype=np.float64))
    o, d = np.broadcast_arrays(o, d)
    lo = np.asarray(bounds.lo)
    hi = np.asarray(bounds.hi)
    with np.errstate(divide="ignore", invalid="ignore"):
        ta = (lo - o) / d
        tb = (hi - o) / d
    t_lo = np.minimum(ta, tb)
    t_hi = np.maximum(ta, tb)
    parallel = d == 0.0
    inside = (o >= lo) & (o <= hi)
    t_lo = np.where(parallel, np.where(inside, -np.inf, np.inf), t_lo)
    t_hi = np.where(parallel, np.where(inside, np.inf, -np.inf), t_hi)
    t_near = np.maximum(t_lo.max(axis=-1), 0.0)
    t_far = t_hi.min(axis=-1)
    hit = t_near <= t_far
    return np.where(hit, t_near, 0.0), np.where(hit, t_far, 0.0), hit


def make_ray(geom: ConeBeamGeometry, theta: float, u: float, v: float, bounds: Box):
    """Ray from the source through the centre of detector pixel ``(u, v)``.

    ``u`` is the column index and ``v`` the row index; fractional indices are
    accepted. Returns ``None`` when the ray misses ``bounds``.
    """
    if not (0 <= u < geom.det_cols and 0 <= v < geom.det_rows):
        raise IndexError(f"pixel ({u}, {v}) outside {geom.det_cols}x{geom.det_rows} detector")
    src = geom.source_position(theta)
    target = geom.pixel_position(theta, u, v)
    d = target - src
    d = d / np.linalg.norm(d)
    clipped = clip_to_box(src, d, bounds)
    if clipped is None:
        return None
    return Ray(src, d, clipped[0], clipped[1])


def view_rays(geom: ConeBeamGeometry, theta: float, bounds: Box):
    """All pixel rays of one view.

    Returns ``(origin, directions, t_near, t_far, hit)`` with per-pixel arrays
    shaped ``(det_rows, det_cols[, 3])``.
    """
    src = geom.source_position(theta)
    vv, uu = np.meshgrid(np.arange(geom.det_rows), np.arange(geom.det_cols), indexing="ij")
    target = geom.pixel_position(theta, uu, vv)
    d = target - src
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    flat = d.reshape(-1, 3)
    t_near, t_far, hit = clip_to_box_batch(src[None, :], flat, bounds)
    shape = (geom.det_rows, geom.det_cols)
    return src, d, t_near.reshape(shape), t_far.reshape(shape), hit.reshape(shape)
