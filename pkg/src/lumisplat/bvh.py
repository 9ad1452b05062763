"""Bounding-volume hierarchy over triangles with watertight any-hit queries.

Traversal is a vectorized wavefront: each stack entry carries the surviving
ray subset, so the whole front advances with numpy slab tests instead of a
per-ray scalar loop. Shadow queries drop rays as soon as any hit is found.
The ray-triangle predicate follows the watertight shear formulation so edges
and grazing rays resolve consistently; the brute-force oracle in the tests
shares this predicate, which makes agreement checks meaningful.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError
from .util import thread_count

_LEAF_SIZE = 4
_AXES = np.array([[1, 2, 0], [2, 0, 1], [0, 1, 2]], dtype=np.int64)  # kx, ky given kz


def _ray_frames(directions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-ray (kx, ky, kz) permutation and shear constants (Sx, Sy, Sz)."""
    d = np.asarray(directions, dtype=np.float64)
    kz = np.argmax(np.abs(d), axis=-1)
    kx = _AXES[kz, 0]
    ky = _AXES[kz, 1]
    dz = np.take_along_axis(d, kz[:, None], axis=-1)[:, 0]
    swap = dz < 0.0
    kx2 = np.where(swap, ky, kx)
    ky2 = np.where(swap, kx, ky)
    perm = np.stack([kx2, ky2, kz], axis=1)
    dp = np.take_along_axis(d, perm, axis=-1)
    shear = np.empty_like(dp)
    shear[:, 0] = dp[:, 0] / dp[:, 2]
    shear[:, 1] = dp[:, 1] / dp[:, 2]
    shear[:, 2] = 1.0 / dp[:, 2]
    return perm, shear


def ray_triangle_any_hit(
    origins: np.ndarray,
    directions: np.ndarray,
    triangles: np.ndarray,
    perm: np.ndarray | None = None,
    shear: np.ndarray | None = None,
) -> np.ndarray:
    """Watertight test of R rays against K triangles, returns (R,) any-hit.

    Hits require t > 0; points exactly at the origin never count (callers
    offset origins off the surface themselves).
    """
    o = np.asarray(origins, dtype=np.float64)
    tri = np.asarray(triangles, dtype=np.float64)
    if perm is None or shear is None:
        perm, shear = _ray_frames(directions)
    # translate and permute: (R, K, 3 verts, 3 comps)
    rel = tri[None, :, :, :] - o[:, None, None, :]
    rel = np.take_along_axis(rel, perm[:, None, None, :], axis=-1)
    sx = shear[:, 0][:, None, None]
    sy = shear[:, 1][:, None, None]
    sz = shear[:, 2][:, None]
    ax = rel[..., 0, 0] - sx[..., 0] * rel[..., 0, 2]
    ay = rel[..., 0, 1] - sy[..., 0] * rel[..., 0, 2]
    bx = rel[..., 1, 0] - sx[..., 0] * rel[..., 1, 2]
    by = rel[..., 1, 1] - sy[..., 0] * rel[..., 1, 2]
    cx = rel[..., 2, 0] - sx[..., 0] * rel[..., 2, 2]
    cy = rel[..., 2, 1] - sy[..., 0] * rel[..., 2, 2]
    u = cx * by - cy * bx
    v = ax * cy - ay * cx
    w = bx * ay - by * ax
    same_side = ((u >= 0) & (v >= 0) & (w >= 0)) | ((u <= 0) & (v <= 0) & (w <= 0))
    det = u + v + w
    az = sz * rel[..., 0, 2]
    bz = sz * rel[..., 1, 2]
    cz = sz * rel[..., 2, 2]
    t_scaled = u * az + v * bz + w * cz
    hit = same_side & (det != 0.0) & (np.sign(det) * t_scaled > 0.0)
    return hit.any(axis=1)


def _aabb_hit(bmin: np.ndarray, bmax: np.ndarray, origins: np.ndarray, inv_dirs: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    tmin = np.zeros(len(origins))
    tmax = np.full(len(origins), np.inf)
    for axis in range(3):
        o = origins[:, axis]
        inv = inv_dirs[:, axis]
        nonzero = dirs[:, axis] != 0.0
        t1 = (bmin[axis] - o) * inv
        t2 = (bmax[axis] - o) * inv
        lo = np.where(nonzero, np.minimum(t1, t2), np.where((o >= bmin[axis]) & (o <= bmax[axis]), -np.inf, np.inf))
        hi = np.where(nonzero, np.maximum(t1, t2), np.where((o >= bmin[axis]) & (o <= bmax[axis]), np.inf, -np.inf))
        tmin = np.maximum(tmin, lo)
        tmax = np.minimum(tmax, hi)
    return tmax >= tmin


@dataclass
class _Node:
    bmin: np.ndarray
    bmax: np.ndarray
    left: int    # child index, or -1 for leaves
    right: int
    start: int   # leaf triangle range in the ordered index list
    count: int


class TriangleBvh:
    """Median-split BVH; immutable after construction, safe to share."""

    def __init__(self, vertices: np.ndarray, faces: np.ndarray):
        vertices = np.asarray(vertices, dtype=np.float64)
        faces = np.asarray(faces, dtype=np.int64)
        self.triangles = vertices[faces]  # (F, 3, 3)
        n = len(self.triangles)
        self._nodes: list[_Node] = []
        if n == 0:
            self._order = np.zeros(0, dtype=np.int64)
            return
        centroids = self.triangles.mean(axis=1)
        lo = self.triangles.min(axis=1)
        hi = self.triangles.max(axis=1)
        order = np.arange(n)

        def build(idx: np.ndarray) -> int:
            node_id = len(self._nodes)
            self._nodes.append(None)  # reserve
            bmin = lo[idx].min(axis=0)
            bmax = hi[idx].max(axis=0)
            if len(idx) <= _LEAF_SIZE:
                start = build.cursor
                self._order[start : start + len(idx)] = idx
                build.cursor += len(idx)
                self._nodes[node_id] = _Node(bmin, bmax, -1, -1, start, len(idx))
                return node_id
            axis = int(np.argmax(bmax - bmin))
            mid = len(idx) // 2
            part = idx[np.argsort(centroids[idx, axis], kind="stable")]
            left = build(part[:mid])
            right = build(part[mid:])
            self._nodes[node_id] = _Node(bmin, bmax, left, right, 0, 0)
            return node_id

        self._order = np.empty(n, dtype=np.int64)
        build.cursor = 0
        build(order)

    def occluded(self, origins: np.ndarray, directions: np.ndarray) -> np.ndarray:
        """(R,) bool: does any triangle block each ray (t > 0)?"""
        origins = np.asarray(origins, dtype=np.float64)
        directions = np.asarray(directions, dtype=np.float64)
        if origins.shape != directions.shape or origins.ndim != 2 or origins.shape[1] != 3:
            raise ParameterError("origins/directions must both be (R, 3)")
        n_rays = len(origins)
        hit = np.zeros(n_rays, dtype=bool)
        if not self._nodes or n_rays == 0:
            return hit
        workers = thread_count()
        if workers > 1 and n_rays >= 2 * workers:
            chunks = np.array_split(np.arange(n_rays), workers)
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(
                    pool.map(lambda c: self._occluded_chunk(origins[c], directions[c]), chunks)
                )
            for c, r in zip(chunks, results):
                hit[c] = r
            return hit
        return self._occluded_chunk(origins, directions)

    def _occluded_chunk(self, origins: np.ndarray, directions: np.ndarray) -> np.ndarray:
        perm, shear = _ray_frames(directions)
        with np.errstate(divide="ignore"):
            inv = 1.0 / directions
        hit = np.zeros(len(origins), dtype=bool)
        stack = [(0, np.arange(len(origins)))]
        while stack:
            node_id, rays = stack.pop()
            rays = rays[~hit[rays]]
            if len(rays) == 0:
                continue
            node = self._nodes[node_id]
            m = _aabb_hit(node.bmin, node.bmax, origins[rays], inv[rays], directions[rays])
            rays = rays[m]
            if len(rays) == 0:
                continue
            if node.left < 0:
                tris = self.triangles[self._order[node.start : node.start + node.count]]
                sub = ray_triangle_any_hit(
                    origins[rays], directions[rays], tris, perm[rays], shear[rays]
                )
                hit[rays[sub]] = True
            else:
                stack.append((node.left, rays))
                stack.append((node.right, rays))
        return hit


def brute_force_occluded(origins: np.ndarray, directions: np.ndarray, vertices: np.ndarray, faces: np.ndarray, chunk: int = 2048) -> np.ndarray:
    """All-triangle reference for occlusion; same predicate, no hierarchy."""
    tris = np.asarray(vertices, dtype=np.float64)[np.asarray(faces, dtype=np.int64)]
    origins = np.asarray(origins, dtype=np.float64)
    directions = np.asarray(directions, dtype=np.float64)
    out = np.zeros(len(origins), dtype=bool)
    for start in range(0, len(origins), chunk):
        sl = slice(start, start + chunk)
        out[sl] = ray_triangle_any_hit(origins[sl], directions[sl], tris)
    return out
