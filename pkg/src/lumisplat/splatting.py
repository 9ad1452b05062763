"""CPU reference rasterizer for UV-anchored 3D Gaussian primitives.

Screen covariance follows the EWA projection Sigma' = J W R S S^T R^T W^T J^T
(upper-left 2x2, +1e-9 I regularization). Compositing is exact front-to-back
per pixel inside 16x16 tiles: weight_i = sigma_i G_i prod_{j<i}(1 - sigma_j
G_j), pixel color = sum c_i weight_i, alpha = sum weight_i. Depth ties break
by splat (texel) index so permuting the input never changes the image.
Gaussians are truncated beyond their 3-sigma screen radius. Pixel centers sit
at integer + 0.5.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import rotations as rot
from .errors import DataError, ParameterError
from .util import atomic_write_bytes

COVARIANCE_EPS = 1e-9
TILE = 16
TRUNCATE_SIGMA = 3.0


@dataclass
class CameraView:
    width: int
    height: int
    focal: np.ndarray        # (2,) fx, fy in pixels
    principal: np.ndarray    # (2,) cx, cy in pixels
    world_to_camera: np.ndarray  # (4, 4) rigid
    near: float = 0.01
    far: float = 100.0

    def __post_init__(self):
        self.focal = np.atleast_1d(np.asarray(self.focal, dtype=np.float64))
        if self.focal.size == 1:
            self.focal = np.repeat(self.focal, 2)
        self.principal = np.asarray(self.principal, dtype=np.float64)
        self.world_to_camera = np.asarray(self.world_to_camera, dtype=np.float64)
        if np.any(self.focal <= 0):
            raise ParameterError("focal length must be positive")
        if not self.near < self.far:
            raise ParameterError("near plane must be below far plane")
        rot.check_rigid(self.world_to_camera)

    @property
    def camera_center(self) -> np.ndarray:
        r = self.world_to_camera[:3, :3]
        return -r.T @ self.world_to_camera[:3, 3]

    def to_json(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "focal": self.focal.tolist(),
            "principal": self.principal.tolist(),
            "world_to_camera": self.world_to_camera.tolist(),
            "near": self.near,
            "far": self.far,
        }

    @classmethod
    def from_json(cls, d: dict) -> "CameraView":
        return cls(
            int(d["width"]),
            int(d["height"]),
            np.asarray(d["focal"], dtype=np.float64),
            np.asarray(d["principal"], dtype=np.float64),
            np.asarray(d["world_to_camera"], dtype=np.float64),
            float(d.get("near", 0.01)),
            float(d.get("far", 100.0)),
        )


def load_camera(path: str) -> CameraView:
    with open(path) as fh:
        return CameraView.from_json(json.load(fh))


def save_camera(path: str, view: CameraView) -> None:
    atomic_write_bytes(path, json.dumps(view.to_json()).encode())


@dataclass
class SplatTexture:
    """One Gaussian per covered texel of a UV grid."""

    resolution: int
    texel_indices: np.ndarray  # (T,) flat row*res+col
    anchors: np.ndarray        # (T, 3) barycentric surface points p'
    offsets: np.ndarray        # (T, 3) delta p, meters
    rotations: np.ndarray      # (T, 4) unit quaternions (w, x, y, z)
    scales: np.ndarray         # (T, 3) meters, > 0
    opacities: np.ndarray      # (T,) in [0, 1]
    base_colors: np.ndarray = field(default=None)  # (T, 3), optional flat colors

    def __post_init__(self):
        self.texel_indices = np.asarray(self.texel_indices, dtype=np.int64)
        self.anchors = np.asarray(self.anchors, dtype=np.float64)
        self.offsets = np.asarray(self.offsets, dtype=np.float64)
        self.rotations = np.asarray(self.rotations, dtype=np.float64)
        self.scales = np.asarray(self.scales, dtype=np.float64)
        self.opacities = np.asarray(self.opacities, dtype=np.float64)
        if self.base_colors is None:
            self.base_colors = np.full((len(self.anchors), 3), 0.5)
        self.base_colors = np.asarray(self.base_colors, dtype=np.float64)

    def validate(self) -> None:
        qn = np.linalg.norm(self.rotations, axis=1)
        if np.any(np.abs(qn - 1.0) > 1e-6):
            raise ParameterError("splat quaternions must be unit length")
        if np.any(self.scales <= 0):
            raise ParameterError("splat scales must be positive")
        if np.any((self.opacities < 0) | (self.opacities > 1)):
            raise ParameterError("splat opacities must lie in [0, 1]")

    @property
    def count(self) -> int:
        return len(self.anchors)

    def world_positions(self) -> np.ndarray:
        """Anchor plus offset (the Gaussian means)."""
        return self.anchors + self.offsets


def project_covariance(
    quaternion: np.ndarray,
    scale: np.ndarray,
    mean_world: np.ndarray,
    view: CameraView,
    regularize: bool = True,
) -> np.ndarray:
    """Single-Gaussian screen covariance (2x2); raises if behind the near plane."""
    s = _project_covariances(
        np.asarray(quaternion, dtype=np.float64)[None],
        np.asarray(scale, dtype=np.float64)[None],
        np.asarray(mean_world, dtype=np.float64)[None],
        view,
        regularize,
    )
    return s[0]


def _project_covariances(
    quats: np.ndarray, scales: np.ndarray, means_world: np.ndarray, view: CameraView, regularize: bool = True
) -> np.ndarray:
    w = view.world_to_camera[:3, :3]
    cam = means_world @ w.T + view.world_to_camera[:3, 3]
    z = cam[:, 2]
    if np.any(z <= view.near):
        raise ParameterError("gaussian behind the near plane; cull before projecting")
    r = rot.quat_to_matrix(quats)                  # (T, 3, 3)
    m = r * scales[:, None, :]                     # R S
    cov3 = m @ np.swapaxes(m, 1, 2)                # R S S^T R^T
    cov_cam = np.einsum("ij,tjk,lk->til", w, cov3, w)
    fx, fy = view.focal
    x, y = cam[:, 0], cam[:, 1]
    j = np.zeros((len(z), 2, 3))
    j[:, 0, 0] = fx / z
    j[:, 0, 2] = -fx * x / (z * z)
    j[:, 1, 1] = fy / z
    j[:, 1, 2] = -fy * y / (z * z)
    cov2 = j @ cov_cam @ np.swapaxes(j, 1, 2)
    cov2 = 0.5 * (cov2 + np.swapaxes(cov2, 1, 2))  # exact symmetry
    if regularize:
        cov2[:, 0, 0] += COVARIANCE_EPS
        cov2[:, 1, 1] += COVARIANCE_EPS
    return cov2


def _project_all(splats: SplatTexture, view: CameraView):
    """Project positions and covariances, culling against near/far."""
    p = splats.world_positions()
    w2c = view.world_to_camera
    cam = p @ w2c[:3, :3].T + w2c[:3, 3]
    keep = (cam[:, 2] > view.near) & (cam[:, 2] < view.far)
    idx = np.nonzero(keep)[0]
    if len(idx) == 0:
        return idx, None, None, None
    cam = cam[idx]
    fx, fy = view.focal
    centers = np.stack(
        [fx * cam[:, 0] / cam[:, 2] + view.principal[0], fy * cam[:, 1] / cam[:, 2] + view.principal[1]],
        axis=1,
    )
    cov2 = _project_covariances(splats.rotations[idx], splats.scales[idx], p[idx], view)
    return idx, cam[:, 2], centers, cov2


def rasterize(
    splats: SplatTexture,
    colors: np.ndarray,
    view: CameraView,
    collect_weights: bool = False,
):
    """Alpha-composite splats into an RGBA image (H, W, 4), premultiplied,
    transparent background.

    With ``collect_weights`` also returns (pixel_flat_idx, splat_idx, weight)
    arrays describing the exact linear map from splat colors to pixels.
    """
    colors = np.asarray(colors, dtype=np.float64)
    if colors.shape != (splats.count, 3):
        raise ParameterError("colors must be (T, 3) matching the splat count")
    splats.validate()
    h, w = view.height, view.width
    image = np.zeros((h, w, 4))
    w_pix: list[np.ndarray] = []
    w_splat: list[np.ndarray] = []
    w_val: list[np.ndarray] = []
    idx, depth, centers, cov2 = _project_all(splats, view)
    if len(idx) == 0:
        if collect_weights:
            return image, (np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0))
        return image

    # conics and 3-sigma radii
    det = cov2[:, 0, 0] * cov2[:, 1, 1] - cov2[:, 0, 1] ** 2
    det = np.maximum(det, 1e-300)
    conic = np.stack([cov2[:, 1, 1] / det, -cov2[:, 0, 1] / det, cov2[:, 0, 0] / det], axis=1)
    tr_half = 0.5 * (cov2[:, 0, 0] + cov2[:, 1, 1])
    lam_max = tr_half + np.sqrt(np.maximum(0.0, tr_half**2 - det))
    radius = TRUNCATE_SIGMA * np.sqrt(lam_max)

    x0 = np.clip(np.floor((centers[:, 0] - radius - 0.5) / TILE).astype(np.int64), 0, (w - 1) // TILE)
    x1 = np.clip(np.floor((centers[:, 0] + radius - 0.5) / TILE).astype(np.int64), 0, (w - 1) // TILE)
    y0 = np.clip(np.floor((centers[:, 1] - radius - 0.5) / TILE).astype(np.int64), 0, (h - 1) // TILE)
    y1 = np.clip(np.floor((centers[:, 1] + radius - 0.5) / TILE).astype(np.int64), 0, (h - 1) // TILE)
    inside = (centers[:, 0] + radius >= 0.5) & (centers[:, 0] - radius < w - 0.5 + 1) & (
        centers[:, 1] + radius >= 0.5
    ) & (centers[:, 1] - radius < h - 0.5 + 1)

    tiles_x = (w + TILE - 1) // TILE
    tiles_y = (h + TILE - 1) // TILE
    # expand (splat, tile) pairs
    spans_x = np.where(inside, x1 - x0 + 1, 0)
    spans_y = np.where(inside, y1 - y0 + 1, 0)
    counts = spans_x * spans_y
    total = int(counts.sum())
    if total == 0:
        if collect_weights:
            return image, (np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0))
        return image
    splat_of_pair = np.repeat(np.arange(len(idx)), counts)
    offset_in_span = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    sx = spans_x[splat_of_pair]
    tile_x = x0[splat_of_pair] + offset_in_span % np.maximum(sx, 1)
    tile_y = y0[splat_of_pair] + offset_in_span // np.maximum(sx, 1)
    tile_id = tile_y * tiles_x + tile_x

    # canonical order: tile, then depth, then stable splat (texel) index
    global_id = splats.texel_indices[idx][splat_of_pair]
    order = np.lexsort((global_id, depth[splat_of_pair], tile_id))
    splat_of_pair = splat_of_pair[order]
    tile_id = tile_id[order]
    boundaries = np.nonzero(np.diff(tile_id))[0] + 1
    groups = np.split(np.arange(len(tile_id)), boundaries)

    ys, xs = np.meshgrid(np.arange(TILE), np.arange(TILE), indexing="ij")
    for g in groups:
        if len(g) == 0:
            continue
        t = tile_id[g[0]]
        ty, tx = divmod(int(t), tiles_x)
        px0, py0 = tx * TILE, ty * TILE
        tw = min(TILE, w - px0)
        th = min(TILE, h - py0)
        s = splat_of_pair[g]  # sorted front-to-back already
        cx = centers[s, 0]
        cy = centers[s, 1]
        px = px0 + xs[:th, :tw] + 0.5
        py = py0 + ys[:th, :tw] + 0.5
        dx = px.reshape(-1)[:, None] - cx[None, :]
        dy = py.reshape(-1)[:, None] - cy[None, :]
        a, b, c = conic[s, 0], conic[s, 1], conic[s, 2]
        q = a[None, :] * dx * dx + 2 * b[None, :] * dx * dy + c[None, :] * dy * dy
        g_val = np.where(q <= TRUNCATE_SIGMA**2, np.exp(-0.5 * q), 0.0)
        alpha = splats.opacities[idx][s][None, :] * g_val
        trans = np.cumprod(1.0 - alpha, axis=1)
        trans = np.concatenate([np.ones((alpha.shape[0], 1)), trans[:, :-1]], axis=1)
        weight = alpha * trans
        tile_rgb = weight @ colors[idx][s]
        tile_a = weight.sum(axis=1)
        image[py0 : py0 + th, px0 : px0 + tw, :3] += tile_rgb.reshape(th, tw, 3)
        image[py0 : py0 + th, px0 : px0 + tw, 3] += tile_a.reshape(th, tw)
        if collect_weights:
            pix_r, spl_c = np.nonzero(weight > 0.0)
            rr = py0 + pix_r // tw
            cc = px0 + pix_r % tw
            w_pix.append(rr * w + cc)
            w_splat.append(idx[s][spl_c])
            w_val.append(weight[pix_r, spl_c])

    if collect_weights:
        if w_pix:
            return image, (np.concatenate(w_pix), np.concatenate(w_splat), np.concatenate(w_val))
        return image, (np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0))
    return image


def composite_weight_matrix(splats: SplatTexture, view: CameraView):
    """Sparse (H*W, T) matrix so that image_flat = M @ colors (per channel)."""
    from scipy import sparse

    _, (pix, spl, val) = rasterize(splats, np.zeros((splats.count, 3)), view, collect_weights=True)
    return sparse.csr_matrix(
        (val, (pix, spl)), shape=(view.height * view.width, splats.count)
    )


def splats_from_maps(maps, resolution: int, scale, opacity: float = 1.0) -> SplatTexture:
    """One Gaussian per covered texel; identity rotation, zero offset.

    ``scale``: float (meters) or "auto" (0.75x the median nearest-anchor
    spacing, estimated from UV-neighbor distances).
    """
    covered = np.nonzero(maps.coverage.reshape(-1))[0]
    anchors = maps.position_map.reshape(-1, 3)[covered]
    t = len(covered)
    if scale == "auto":
        spacing = _median_neighbor_spacing(maps, covered)
        base = 0.75 * spacing
    else:
        base = float(scale)
    if base <= 0:
        raise ParameterError("splat scale must be positive")
    quats = np.zeros((t, 4))
    quats[:, 0] = 1.0
    return SplatTexture(
        resolution=resolution,
        texel_indices=covered,
        anchors=anchors,
        offsets=np.zeros((t, 3)),
        rotations=quats,
        scales=np.full((t, 3), base),
        opacities=np.full(t, float(opacity)),
    )


def _median_neighbor_spacing(maps, covered: np.ndarray) -> float:
    res = maps.coverage.shape[0]
    rows, cols = np.divmod(covered, res)
    pos = maps.position_map
    right = (cols + 1 < res) & maps.coverage[rows, np.minimum(cols + 1, res - 1)]
    down = (rows + 1 < res) & maps.coverage[np.minimum(rows + 1, res - 1), cols]
    d = []
    if right.any():
        d.append(np.linalg.norm(pos[rows[right], cols[right] + 1] - pos[rows[right], cols[right]], axis=1))
    if down.any():
        d.append(np.linalg.norm(pos[rows[down] + 1, cols[down]] - pos[rows[down], cols[down]], axis=1))
    if not d:
        return 0.01
    spacing = float(np.median(np.concatenate(d)))
    return spacing if spacing > 0 else 0.01


# --- LSPL1 splat container -----------------------------------------------------

_LSPL_MAGIC = b"LSPL1"


def save_splats(path: str, splats: SplatTexture) -> None:
    order = np.argsort(splats.texel_indices, kind="stable")
    blob = b"".join(
        [
            _LSPL_MAGIC,
            struct.pack("<II", splats.resolution, splats.count),
            splats.texel_indices[order].astype("<u4").tobytes(),
            splats.anchors[order].astype("<f4").tobytes(),
            splats.offsets[order].astype("<f4").tobytes(),
            splats.rotations[order].astype("<f4").tobytes(),
            splats.scales[order].astype("<f4").tobytes(),
            splats.opacities[order].astype("<f4").tobytes(),
            splats.base_colors[order].astype("<f4").tobytes(),
        ]
    )
    atomic_write_bytes(path, blob)


def load_splats(path: str) -> SplatTexture:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:5] != _LSPL_MAGIC:
        raise DataError(f"{path}: bad magic, expected LSPL1")
    res, t = struct.unpack_from("<II", blob, 5)
    off = 13

    def take(count, dtype, shape):
        nonlocal off
        a = np.frombuffer(blob, dtype, count, off)
        off += a.nbytes
        return a.astype(np.float64).reshape(shape) if dtype != "<u4" else a.astype(np.int64).reshape(shape)

    texels = take(t, "<u4", (t,))
    anchors = take(3 * t, "<f4", (t, 3))
    offsets = take(3 * t, "<f4", (t, 3))
    quats = take(4 * t, "<f4", (t, 4))
    norms = np.linalg.norm(quats, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    quats = quats / norms  # re-unitize after f32 storage
    scales = take(3 * t, "<f4", (t, 3))
    opac = take(t, "<f4", (t,))
    base = take(3 * t, "<f4", (t, 3))
    return SplatTexture(res, texels, anchors, offsets, quats, scales, opac, base)
