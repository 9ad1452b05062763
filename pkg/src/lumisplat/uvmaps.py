"""Barycentric rasterization of mesh attributes into UV space.

Texel (row, col) covers the UV rectangle [col/res, (col+1)/res) x
[row/res, (row+1)/res) and is sampled at its center; row 0 sits at v = 0.
Coverage is first-write-wins in face order, which makes the maps
deterministic when triangles share edges.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .character import PosedMesh
from .errors import ParameterError
from .kinematics import vertex_normals as _vertex_normals

log = logging.getLogger(__name__)


@dataclass
class UvMaps:
    positions: np.ndarray   # (res, res, 3) interpolated surface points
    normals: np.ndarray     # (res, res, 3) unit where covered
    coverage: np.ndarray    # (res, res) bool
    face_index: np.ndarray  # (res, res) int, -1 where uncovered
    degenerate_count: int   # UV triangles skipped for zero area

    @property
    def resolution(self) -> int:
        return int(self.coverage.shape[0])


def rasterize_uv_maps(mesh: PosedMesh, resolution: int) -> UvMaps:
    """Interpolate positions and normals of ``mesh`` over its UV layout."""
    if resolution < 1:
        raise ParameterError("resolution must be >= 1")
    res = int(resolution)
    v = np.asarray(mesh.vertices, dtype=np.float64)
    n = np.asarray(mesh.vertex_normals, dtype=np.float64)
    faces = np.asarray(mesh.faces, dtype=np.int64)
    uv = np.asarray(mesh.uv_coords, dtype=np.float64)

    positions = np.zeros((res, res, 3))
    normals = np.zeros((res, res, 3))
    coverage = np.zeros((res, res), dtype=bool)
    face_index = np.full((res, res), -1, dtype=np.int64)
    degenerate = 0

    for f in range(len(faces)):
        a, b, c = uv[f]
        area2 = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        if abs(area2) < 1e-14:
            degenerate += 1
            continue
        lo = np.minimum(np.minimum(a, b), c)
        hi = np.maximum(np.maximum(a, b), c)
        c0 = max(int(np.floor(lo[0] * res - 0.5)), 0)
        c1 = min(int(np.ceil(hi[0] * res - 0.5)), res - 1)
        r0 = max(int(np.floor(lo[1] * res - 0.5)), 0)
        r1 = min(int(np.ceil(hi[1] * res - 0.5)), res - 1)
        if c1 < c0 or r1 < r0:
            continue
        cols = (np.arange(c0, c1 + 1) + 0.5) / res
        rows = (np.arange(r0, r1 + 1) + 0.5) / res
        pu, pv = np.meshgrid(cols, rows)
        # barycentric coordinates wrt corners a, b, c
        w_b = ((pu - a[0]) * (c[1] - a[1]) - (pv - a[1]) * (c[0] - a[0])) / area2
        w_c = ((pv - a[1]) * (b[0] - a[0]) - (pu - a[0]) * (b[1] - a[1])) / area2
        w_a = 1.0 - w_b - w_c
        eps = -1e-12
        inside = (w_a >= eps) & (w_b >= eps) & (w_c >= eps)
        if not inside.any():
            continue
        rr, cc = np.nonzero(inside)
        rr_g = rr + r0
        cc_g = cc + c0
        fresh = ~coverage[rr_g, cc_g]
        if not fresh.any():
            continue
        rr, cc, rr_g, cc_g = rr[fresh], cc[fresh], rr_g[fresh], cc_g[fresh]
        bary = np.stack([w_a[rr, cc], w_b[rr, cc], w_c[rr, cc]], axis=1)
        vi = faces[f]
        positions[rr_g, cc_g] = bary @ v[vi]
        nrm = bary @ n[vi]
        ln = np.linalg.norm(nrm, axis=1, keepdims=True)
        ln[ln < 1e-20] = 1.0
        normals[rr_g, cc_g] = nrm / ln
        coverage[rr_g, cc_g] = True
        face_index[rr_g, cc_g] = f

    if degenerate:
        log.warning("rasterize_uv_maps: skipped %d degenerate UV triangles", degenerate)
    return UvMaps(positions, normals, coverage, face_index, degenerate)


def mesh_uv_maps(vertices: np.ndarray, faces: np.ndarray, uv_coords: np.ndarray, resolution: int) -> UvMaps:
    """Convenience wrapper for raw arrays (normals recomputed area-weighted)."""
    mesh = PosedMesh(
        np.asarray(vertices, dtype=np.float64),
        _vertex_normals(vertices, faces),
        np.asarray(faces, dtype=np.int64),
        np.asarray(uv_coords, dtype=np.float64),
    )
    return rasterize_uv_maps(mesh, resolution)
