"""Reorganise a dense projection set into sinogram and DR stacks and back.

A sinogram here is one detector row followed across all angles, shape
``(M, det_cols)``; stack index ``z`` is the detector row. A DR image is the
per-angle detector image unchanged, shape ``(det_rows, det_cols)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import ProjectionSet
from .geometry import ConeBeamGeometry

SINO_AXES = "row,angle,col"
DR_AXES = "angle,row,col"


@dataclass(frozen=True, eq=False)
class SinogramStack:
    geom: ConeBeamGeometry
    data: np.ndarray  # (det_rows, M, det_cols)
    axes: str = SINO_AXES

    def __post_init__(self):
        expected = (self.geom.det_rows, self.geom.n_views, self.geom.det_cols)
        if self.data.shape != expected:
            raise ValueError(f"sinogram stack shape {self.data.shape} does not match geometry {expected}")

    def __len__(self):
        return self.data.shape[0]

    def __getitem__(self, z):
        return self.data[z]

    def with_data(self, data) -> "SinogramStack":
        return SinogramStack(self.geom, np.asarray(data))


@dataclass(frozen=True, eq=False)
class DRStack:
    geom: ConeBeamGeometry
    data: np.ndarray  # (M, det_rows, det_cols)
    axes: str = DR_AXES

    def __post_init__(self):
        expected = (self.geom.n_views, self.geom.det_rows, self.geom.det_cols)
        if self.data.shape != expected:
            raise ValueError(f"DR stack shape {self.data.shape} does not match geometry {expected}")

    def __len__(self):
        return self.data.shape[0]

    def __getitem__(self, k):
        return self.data[k]

    def with_data(self, data) -> "DRStack":
        return DRStack(self.geom, np.asarray(data))


def to_sinograms(ps: ProjectionSet) -> SinogramStack:
    # S_z[k, u] = P_k[z, u]
    return SinogramStack(ps.geom, np.ascontiguousarray(ps.data.transpose(1, 0, 2)))


def from_sinograms(ss: SinogramStack) -> ProjectionSet:
    if ss.data.ndim != 3 or ss.data.shape[1] == 0:
        raise ValueError("sinogram stack must hold at least one angle")
    return ProjectionSet(ss.geom, np.ascontiguousarray(ss.data.transpose(1, 0, 2)))


def to_dr(ps: ProjectionSet) -> DRStack:
    return DRStack(ps.geom, ps.data.copy())


def from_dr(ds: DRStack) -> ProjectionSet:
    if ds.data.ndim != 3 or ds.data.shape[0] == 0:
        raise ValueError("DR stack must hold at least one angle")
    return ProjectionSet(ds.geom, ds.data.copy())
