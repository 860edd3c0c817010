"""Volume and projection containers shared across the pipeline."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Box, ConeBeamGeometry


class Volume3D:
    """Regular voxel grid of attenuation values indexed ``values[ix, iy, iz]``.

    ``origin`` is the world position (mm) of the centre of voxel ``(0, 0, 0)``.
    """

    def __init__(self, values, spacing=(1.0, 1.0, 1.0), origin=None):
        values = np.asarray(values)
        if values.ndim != 3 or min(values.shape) < 1:
            raise ValueError(f"volume must be 3-D with non-empty axes, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("volume contains non-finite values")
        spacing = tuple(float(s) for s in np.broadcast_to(np.asarray(spacing, dtype=float), (3,)))
        if any(s <= 0 for s in spacing):
            raise ValueError(f"spacing must be positive, got {spacing}")
        if origin is None:
            origin = tuple(-0.5 * (n - 1) * s for n, s in zip(values.shape, spacing))
        self.values = values
        self.spacing = spacing
        self.origin = tuple(float(o) for o in origin)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.values.shape)

    @property
    def bounds(self) -> Box:
        """Box enclosing every voxel (outer faces, not centres)."""
        o = np.asarray(self.origin)
        s = np.asarray(self.spacing)
        n = np.asarray(self.dims)
        return Box(tuple(o - 0.5 * s), tuple(o + (n - 0.5) * s))

    def same_grid(self, other: "Volume3D") -> bool:
        return self.dims == other.dims and self.spacing == other.spacing and self.origin == other.origin

    def with_values(self, values) -> "Volume3D":
        return Volume3D(values, self.spacing, self.origin)

    def grid_dict(self) -> dict:
        return {"dims": list(self.dims), "spacing": list(self.spacing), "origin": list(self.origin)}

    def voxel_centers(self, axis: int) -> np.ndarray:
        return self.origin[axis] + self.spacing[axis] * np.arange(self.dims[axis])


@dataclass(frozen=True)
class Projection:
    theta: float
    pixels: np.ndarray  # (det_rows, det_cols), line integrals


class ProjectionSet:
    """One detector image per geometry angle, stored as ``data[k, v, u]``."""

    def __init__(self, geom: ConeBeamGeometry, data):
        data = np.asarray(data)
        expected = (geom.n_views, geom.det_rows, geom.det_cols)
        if data.shape != expected:
            raise ValueError(f"projection data shape {data.shape} does not match geometry {expected}")
        if not np.all(np.isfinite(data)):
            raise ValueError("projection data contains non-finite values")
        self.geom = geom
        self.data = data

    def __len__(self):
        return self.geom.n_views

    def __getitem__(self, k) -> Projection:
        return Projection(float(self.geom.angles[k]), self.data[k])

    @property
    def projections(self) -> list[Projection]:
        return [self[k] for k in range(len(self))]

    @classmethod
    def from_projections(cls, geom: ConeBeamGeometry, projections) -> "ProjectionSet":
        projections = list(projections)
        if len(projections) != geom.n_views:
            raise ValueError("need one projection per geometry angle")
        for p, th in zip(projections, geom.angles):
            if p.theta != th:
                raise ValueError(f"projection angle {p.theta} does not match geometry angle {th}")
        return cls(geom, np.stack([p.pixels for p in projections]))

    def subset(self, indices) -> "ProjectionSet":
        indices = np.asarray(indices)
        return ProjectionSet(self.geom.with_angles(self.geom.angles[indices]), self.data[indices])

    def with_data(self, data) -> "ProjectionSet":
        return ProjectionSet(self.geom, data)
