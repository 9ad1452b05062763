"""Physically-informed lighting features over a discretized light rig.

Direction convention (fixed for every environment-map consumer): right-handed,
y-up. Equirectangular lookup uses u = atan2(d_x, d_z) / 2pi + 0.5 and
v = acos(d_y) / pi, so v = 0 is the +y pole and the map center faces +z.

Per covered texel the features are: an L-bit visibility mask, a scalar
cosine-visibility sum (shadow map), an RGB intensity-weighted irradiance sum,
and for the top-r lights by Blinn-Phong importance a 6-vector ray encoding
{n.wi, n.wo, n.wh, visibility-masked clamped-cosine-weighted RGB intensity}.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass

import numpy as np

from .bvh import TriangleBvh
from .errors import DataError, ParameterError
from .util import atomic_write_bytes

log = logging.getLogger(__name__)

DEFAULT_RIG_SIZE = 331
DEFAULT_SELF_OCCLUSION_OFFSET = 1e-4
DEFAULT_RAY_COUNT = 32
DEFAULT_SPECULAR_EXPONENT = 8.0


@dataclass
class LightRig:
    directions: np.ndarray   # (L, 3) unit, pointing away from the surface
    intensities: np.ndarray  # (L, 3) linear RGB

    def __post_init__(self):
        self.directions = np.asarray(self.directions, dtype=np.float64)
        self.intensities = np.asarray(self.intensities, dtype=np.float64)
        norms = np.linalg.norm(self.directions, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ParameterError("rig directions must be unit length")
        if np.any(self.intensities < 0):
            raise ParameterError("rig intensities must be nonnegative")

    @property
    def size(self) -> int:
        return len(self.directions)


@dataclass
class EnvironmentLighting:
    envmap: np.ndarray  # (H, W, 3) linear radiance
    rig: LightRig


@dataclass
class AppearanceMaps:
    normal_map: np.ndarray    # (res, res, 3) unit where covered
    albedo_map: np.ndarray    # (res, res, 3) in [0, 1]
    position_map: np.ndarray  # (res, res, 3)
    coverage: np.ndarray      # (res, res) bool


@dataclass
class TransportFeatures:
    texel_indices: np.ndarray  # (T,) flat row*res+col of covered texels
    resolution: int
    visibility: np.ndarray     # (T, L) bool
    shadow_map: np.ndarray     # (T,)
    irradiance_map: np.ndarray  # (T, 3)
    selected_rays: np.ndarray  # (T, r) light indices
    ray_encodings: np.ndarray  # (T, r, 6)


def fibonacci_rig(count: int = DEFAULT_RIG_SIZE, intensity: float = 1.0) -> LightRig:
    """Deterministic near-uniform sphere covering used when no rig file is given."""
    i = np.arange(count)
    y = 1.0 - 2.0 * (i + 0.5) / count
    r = np.sqrt(np.maximum(0.0, 1.0 - y * y))
    golden = np.pi * (3.0 - np.sqrt(5.0))
    phi = golden * i
    dirs = np.stack([r * np.cos(phi), y, r * np.sin(phi)], axis=1)
    return LightRig(dirs, np.full((count, 3), float(intensity)))


def load_rig(path: str) -> LightRig:
    with open(path) as fh:
        entries = json.load(fh)
    if not isinstance(entries, list) or not entries:
        raise DataError(f"{path}: rig file must be a non-empty JSON list")
    dirs = np.asarray([e["dir"] for e in entries], dtype=np.float64)
    intens = np.asarray([e.get("intensity", [1.0, 1.0, 1.0]) for e in entries], dtype=np.float64)
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return LightRig(dirs, intens)


def save_rig(path: str, rig: LightRig) -> None:
    entries = [
        {"dir": d.tolist(), "intensity": e.tolist()}
        for d, e in zip(rig.directions, rig.intensities)
    ]
    atomic_write_bytes(path, json.dumps(entries).encode())


def envmap_directions(height: int, width: int) -> np.ndarray:
    """(H, W, 3) unit direction of every pixel center."""
    u = (np.arange(width) + 0.5) / width
    v = (np.arange(height) + 0.5) / height
    phi = (u - 0.5) * 2.0 * np.pi
    theta = v * np.pi
    sin_t = np.sin(theta)[:, None]
    d = np.empty((height, width, 3))
    d[:, :, 0] = sin_t * np.sin(phi)[None, :]
    d[:, :, 1] = np.cos(theta)[:, None] * np.ones(width)[None, :]
    d[:, :, 2] = sin_t * np.cos(phi)[None, :]
    return d


def direction_to_uv(directions: np.ndarray) -> np.ndarray:
    d = np.asarray(directions, dtype=np.float64)
    u = np.arctan2(d[..., 0], d[..., 2]) / (2.0 * np.pi) + 0.5
    v = np.arccos(np.clip(d[..., 1], -1.0, 1.0)) / np.pi
    return np.stack([u, v], axis=-1)


def pool_envmap_to_rig(envmap: np.ndarray, rig_directions: np.ndarray) -> np.ndarray:
    """Solid-angle-weighted mean radiance over each light's nearest-direction cell."""
    env = np.asarray(envmap, dtype=np.float64)
    if env.ndim != 3 or env.shape[2] != 3:
        raise ParameterError("envmap must be (H, W, 3)")
    h, w = env.shape[:2]
    weights, owner = _pooling_cells(h, w, rig_directions)
    flat = env.reshape(-1, 3)
    n_lights = len(rig_directions)
    sums = np.zeros((n_lights, 3))
    np.add.at(sums, owner, flat * weights[:, None])
    totals = np.zeros(n_lights)
    np.add.at(totals, owner, weights)
    empty = totals <= 0.0
    if np.any(empty):
        log.warning("pool_envmap_to_rig: %d lights own no pixels", int(empty.sum()))
    totals[empty] = 1.0
    return sums / totals[:, None]


def _pooling_cells(height: int, width: int, rig_directions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    dirs = envmap_directions(height, width).reshape(-1, 3)
    rig = np.asarray(rig_directions, dtype=np.float64)
    owner = np.argmax(dirs @ rig.T, axis=1)
    v = (np.arange(height) + 0.5) / height
    weights = np.repeat(np.sin(v * np.pi), width)  # = cos(latitude)
    return weights, owner


def pooling_matrix(height: int, width: int, rig_directions: np.ndarray) -> "np.ndarray":
    """Sparse (L, H*W) matrix P with e = P @ envmap_flat (per channel)."""
    from scipy import sparse

    weights, owner = _pooling_cells(height, width, rig_directions)
    n_lights = len(rig_directions)
    totals = np.zeros(n_lights)
    np.add.at(totals, owner, weights)
    totals[totals <= 0.0] = 1.0
    data = weights / totals[owner]
    cols = np.arange(height * width)
    return sparse.csr_matrix((data, (owner, cols)), shape=(n_lights, height * width))


def half_vector(incoming: np.ndarray, outgoing: np.ndarray) -> np.ndarray:
    """Normalized mean of the two directions; antipodal pairs are an error."""
    wi = np.asarray(incoming, dtype=np.float64)
    wo = np.asarray(outgoing, dtype=np.float64)
    s = wi + wo
    n = np.linalg.norm(s, axis=-1)
    if np.any(n < 1e-12):
        raise ParameterError("half vector undefined for antipodal directions")
    return s / n[..., None]


def trace_visibility(
    mesh,
    positions: np.ndarray,
    normals: np.ndarray,
    rig_directions: np.ndarray,
    offset: float = DEFAULT_SELF_OCCLUSION_OFFSET,
    bvh: TriangleBvh | None = None,
) -> np.ndarray:
    """(T, L) visibility: 1 iff the light is in the upper hemisphere and the
    ray from p + offset*n is unobstructed by the mesh."""
    if offset <= 0:
        raise ParameterError("self-intersection offset must be positive")
    p = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    n = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(rig_directions, dtype=np.float64)
    if bvh is None:
        bvh = TriangleBvh(mesh.vertices, mesh.faces)
    cos = n @ dirs.T  # (T, L)
    vis = np.zeros(cos.shape, dtype=bool)
    front = cos > 0.0
    t_idx, l_idx = np.nonzero(front)
    if len(t_idx):
        origins = p[t_idx] + offset * n[t_idx]
        hit = bvh.occluded(origins, dirs[l_idx])
        vis[t_idx, l_idx] = ~hit
    return vis


def diffuse_maps(
    visibility: np.ndarray, normals: np.ndarray, rig_directions: np.ndarray, intensities: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Shadow map rho and irradiance map chi (clamped-cosine sums)."""
    vis = np.asarray(visibility, dtype=np.float64)
    n = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
    cos = np.maximum(0.0, n @ np.asarray(rig_directions, dtype=np.float64).T)
    rho = (vis * cos).sum(axis=1)
    chi = (vis * cos) @ np.asarray(intensities, dtype=np.float64)
    return rho, chi


def specular_importance(
    normals: np.ndarray,
    incoming: np.ndarray,
    outgoing: np.ndarray,
    intensity_norm: np.ndarray,
    visibility: np.ndarray,
    exponent: float,
) -> np.ndarray:
    """Blinn-Phong importance (max(0, n.h))^a * vis * |e| * (n.wi)."""
    if exponent <= 0:
        raise ParameterError("specular exponent must be positive")
    n = np.asarray(normals, dtype=np.float64)
    h = half_vector(incoming, outgoing)
    ndh = np.maximum(0.0, np.sum(n * h, axis=-1))
    ndi = np.sum(n * np.asarray(incoming, dtype=np.float64), axis=-1)
    return ndh**exponent * np.asarray(visibility, dtype=np.float64) * np.asarray(intensity_norm, dtype=np.float64) * ndi


def top_r_indices(scores: np.ndarray, r: int) -> np.ndarray:
    """Indices of the r largest scores per row; ties resolved to lower index."""
    s = np.asarray(scores, dtype=np.float64)
    if r > s.shape[-1]:
        raise ParameterError(f"r={r} exceeds light count {s.shape[-1]}")
    order = np.argsort(-s, axis=-1, kind="stable")
    return order[..., :r]


def compute_transport_features(
    mesh,
    maps: AppearanceMaps,
    rig: LightRig,
    intensities: np.ndarray,
    view_origin: np.ndarray,
    ray_count: int = DEFAULT_RAY_COUNT,
    exponent: float = DEFAULT_SPECULAR_EXPONENT,
    offset: float = DEFAULT_SELF_OCCLUSION_OFFSET,
    bvh: TriangleBvh | None = None,
    visibility: np.ndarray | None = None,
) -> TransportFeatures:
    """Full per-texel feature extraction for one pose/illumination/view."""
    res = maps.coverage.shape[0]
    covered = np.nonzero(maps.coverage.reshape(-1))[0]
    p = maps.position_map.reshape(-1, 3)[covered]
    n = maps.normal_map.reshape(-1, 3)[covered]
    e = np.asarray(intensities, dtype=np.float64)
    if visibility is None:
        visibility = trace_visibility(mesh, p, n, rig.directions, offset, bvh=bvh)
    rho, chi = diffuse_maps(visibility, n, rig.directions, e)

    wo = np.asarray(view_origin, dtype=np.float64) - p
    wo /= np.linalg.norm(wo, axis=1, keepdims=True)
    dirs = rig.directions
    ndi = n @ dirs.T                                    # (T, L)
    ndo = np.sum(n * wo, axis=1)                        # (T,)
    hsum = wo[:, None, :] + dirs[None, :, :]            # (T, L, 3)
    hnorm = np.linalg.norm(hsum, axis=2)
    hnorm[hnorm < 1e-12] = 1.0
    ndh = np.einsum("ti,tli->tl", n, hsum) / hnorm
    e_norm = np.linalg.norm(e, axis=1)
    scores = np.maximum(0.0, ndh) ** exponent * visibility * e_norm[None, :] * ndi
    selected = top_r_indices(scores, ray_count)          # (T, r)

    rows = np.arange(len(covered))[:, None]
    masked = visibility[rows, selected, None] * e[selected] * np.maximum(0.0, ndi[rows, selected])[..., None]
    psi = np.concatenate(
        [
            ndi[rows, selected][..., None],
            np.broadcast_to(ndo[:, None, None], (len(covered), ray_count, 1)),
            ndh[rows, selected][..., None],
            masked,
        ],
        axis=2,
    )
    return TransportFeatures(covered, res, visibility, rho, chi, selected, psi)


def shade_analytic(
    features: TransportFeatures,
    maps: AppearanceMaps,
    view_outgoing: np.ndarray,
    material: dict,
    rig: LightRig,
    intensities: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Lambertian diffuse plus Blinn-Phong specular over the selected rays.

    c_diff = (albedo / pi) * chi;
    c_spec = sum over selected rays of k_s (max(0, n.h))^a * vis * e * max(0, n.wi).
    """
    k_s = float(material.get("specular_strength", 0.0))
    exponent = float(material.get("exponent", DEFAULT_SPECULAR_EXPONENT))
    if k_s < 0:
        raise ParameterError("specular strength must be >= 0")
    albedo = maps.albedo_map.reshape(-1, 3)[features.texel_indices]
    c_diff = albedo / np.pi * features.irradiance_map

    n = maps.normal_map.reshape(-1, 3)[features.texel_indices]
    wo = np.asarray(view_outgoing, dtype=np.float64)
    dirs = rig.directions
    e = np.asarray(intensities, dtype=np.float64)
    sel = features.selected_rays
    rows = np.arange(len(sel))[:, None]
    d_sel = dirs[sel]                                   # (T, r, 3)
    ndi = np.einsum("ti,tri->tr", n, d_sel)
    hsum = wo[:, None, :] + d_sel
    hnorm = np.linalg.norm(hsum, axis=2)
    hnorm[hnorm < 1e-12] = 1.0
    ndh = np.maximum(0.0, np.einsum("ti,tri->tr", n, hsum) / hnorm)
    vis = features.visibility[rows, sel]
    w = k_s * ndh**exponent * vis * np.maximum(0.0, ndi)  # (T, r)
    c_spec = np.einsum("tr,trc->tc", w, e[sel])
    return c_diff, c_spec


# --- LTFT1 feature container ---------------------------------------------------

_LTFT_MAGIC = b"LTFT1"


def save_transport_features(path: str, features: TransportFeatures) -> None:
    t = len(features.texel_indices)
    l_count = features.visibility.shape[1]
    r = features.selected_rays.shape[1]
    packed_vis = np.packbits(features.visibility.astype(np.uint8), axis=1)
    blob = b"".join(
        [
            _LTFT_MAGIC,
            struct.pack("<IIII", features.resolution, t, l_count, r),
            features.texel_indices.astype("<u4").tobytes(),
            packed_vis.tobytes(),
            features.shadow_map.astype("<f4").tobytes(),
            features.irradiance_map.astype("<f4").tobytes(),
            features.selected_rays.astype("<u4").tobytes(),
            features.ray_encodings.astype("<f4").tobytes(),
        ]
    )
    atomic_write_bytes(path, blob)


def load_transport_features(path: str) -> TransportFeatures:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:5] != _LTFT_MAGIC:
        raise DataError(f"{path}: bad magic, expected LTFT1")
    res, t, l_count, r = struct.unpack_from("<IIII", blob, 5)
    off = 21
    texels = np.frombuffer(blob, "<u4", t, off).astype(np.int64)
    off += 4 * t
    vis_bytes = (l_count + 7) // 8
    packed = np.frombuffer(blob, np.uint8, t * vis_bytes, off).reshape(t, vis_bytes)
    off += t * vis_bytes
    vis = np.unpackbits(packed, axis=1)[:, :l_count].astype(bool)
    rho = np.frombuffer(blob, "<f4", t, off).astype(np.float64)
    off += 4 * t
    chi = np.frombuffer(blob, "<f4", 3 * t, off).astype(np.float64).reshape(t, 3)
    off += 12 * t
    sel = np.frombuffer(blob, "<u4", t * r, off).astype(np.int64).reshape(t, r)
    off += 4 * t * r
    psi = np.frombuffer(blob, "<f4", t * r * 6, off).astype(np.float64).reshape(t, r, 6)
    return TransportFeatures(texels, res, vis, rho, chi, sel, psi)
