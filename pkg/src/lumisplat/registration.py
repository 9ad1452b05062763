"""Egocentric depth to surface registration.

Depth maps unproject into world-space oriented point clouds; clouds encode
into per-vertex conditioning displacements; and a direct optimizer fits the
embedded-graph parameters and vertex offsets to a cloud by minimizing

    w_eg Chamfer(V_eg, Z) + w_delta Chamfer(V_delta, Z)
    + w_arap ARAP + w_spatial ||L o||^2 + w_iso ISO

where V_eg uses zero vertex offsets, Chamfer is symmetric point-to-point
(squared meters, fixed denominators per direction) and correspondences with
normal disparity above the threshold are dropped. Because the pose is fixed,
skinning collapses to one constant rigid transform per vertex, so gradients
through the graph rotations reduce to the axis-angle apply-Jacobian.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, sparse
from scipy.spatial import cKDTree

from . import rotations as rot
from .character import DeformParams, SkeletonPose, TemplateCharacter
from .errors import DataError, NumericError, ParameterError
from .kinematics import (
    bone_transforms_from_fk,
    dqs_vertex_transforms,
    forward_kinematics,
    vertex_normals,
)
from .util import atomic_write_bytes

log = logging.getLogger(__name__)

DEFAULT_EPS_DISTANCE = 0.05   # meters
DEFAULT_EPS_NORMAL_COS = 0.5  # accept when n_v . n_z exceeds this


@dataclass
class DepthMap:
    depth: np.ndarray        # (H, W) meters, 0 marks invalid pixels
    intrinsics: np.ndarray   # (3, 3) K
    hand_eye: np.ndarray     # (4, 4) rigid, device frame -> camera frame
    head_pose: np.ndarray    # (4, 4) rigid, world -> device frame

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float64)
        self.intrinsics = np.asarray(self.intrinsics, dtype=np.float64)
        self.hand_eye = np.asarray(self.hand_eye, dtype=np.float64)
        self.head_pose = np.asarray(self.head_pose, dtype=np.float64)

    def validate(self) -> None:
        if np.any(self.depth < 0):
            raise ParameterError("depth values must be >= 0")
        if abs(np.linalg.det(self.intrinsics)) < 1e-12:
            raise ParameterError("camera intrinsics are singular")
        if self.intrinsics[0, 0] == 0.0 or self.intrinsics[1, 1] == 0.0:
            raise ParameterError("zero focal length")
        rot.check_rigid(self.hand_eye)
        rot.check_rigid(self.head_pose)

    @property
    def world_to_camera(self) -> np.ndarray:
        return self.hand_eye @ self.head_pose

    @property
    def camera_center(self) -> np.ndarray:
        w2c = self.world_to_camera
        return -w2c[:3, :3].T @ w2c[:3, 3]


@dataclass
class OrientedPointCloud:
    points: np.ndarray   # (N, 3)
    normals: np.ndarray  # (N, 3) unit

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.normals = np.asarray(self.normals, dtype=np.float64)

    def validate(self) -> None:
        if not np.all(np.isfinite(self.points)):
            raise NumericError("cloud contains non-finite points")
        n = np.linalg.norm(self.normals, axis=1)
        if np.any(np.abs(n - 1.0) > 1e-6):
            raise ParameterError("cloud normals must be unit length")


@dataclass
class DepthCondition:
    displacements: np.ndarray  # (V, 3) canonical-space, zero when rejected
    eps_normal: float
    eps_distance: float


def unproject_depth(depth_map: DepthMap) -> np.ndarray:
    """Valid pixels to world points through the inverse of K (hand_eye head)."""
    depth_map.validate()
    d = depth_map.depth
    rows, cols = np.nonzero(d > 0)
    z = d[rows, cols]
    pix = np.stack([cols.astype(np.float64), rows.astype(np.float64), np.ones(len(rows))], axis=1)
    rays = pix @ np.linalg.inv(depth_map.intrinsics).T
    cam = rays * z[:, None]
    c2w = rot.rigid_inverse(depth_map.world_to_camera)
    return rot.transform_points(c2w, cam)


def project_to_depth(points: np.ndarray, depth_map: DepthMap) -> tuple[np.ndarray, np.ndarray]:
    """World points to (u, v) pixels and depths (the inverse of unprojection)."""
    cam = rot.transform_points(depth_map.world_to_camera, np.asarray(points, dtype=np.float64))
    uvw = cam @ depth_map.intrinsics.T
    return uvw[:, :2] / uvw[:, 2:3], cam[:, 2]


def estimate_normals(
    points: np.ndarray, k: int, viewpoint: np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Plane-fit normals from k nearest neighbors.

    Returns (normals, valid); rank-deficient neighborhoods (collinear points)
    are flagged invalid. When a viewpoint is given, normals flip toward it.
    """
    p = np.asarray(points, dtype=np.float64)
    n_pts = len(p)
    if not 3 <= k <= n_pts:
        raise ParameterError("need N >= k >= 3 for normal estimation")
    tree = cKDTree(p)
    _, idx = tree.query(p, k=k)
    nb = p[idx]                          # (N, k, 3)
    centered = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k
    vals, vecs = np.linalg.eigh(cov)     # ascending eigenvalues
    normals = vecs[:, :, 0]
    valid = vals[:, 1] > max(1e-12, 0.0) * np.ones(n_pts)
    valid = vals[:, 1] > 1e-10 * np.maximum(vals[:, 2], 1e-30)
    if viewpoint is not None:
        to_view = np.asarray(viewpoint, dtype=np.float64) - p
        flip = np.einsum("ni,ni->n", normals, to_view) < 0.0
        normals = np.where(flip[:, None], -normals, normals)
    return normals, valid


def cloud_from_depth(depth_map: DepthMap, k: int = 16) -> OrientedPointCloud:
    points = unproject_depth(depth_map)
    normals, valid = estimate_normals(points, min(k, len(points)), depth_map.camera_center)
    return OrientedPointCloud(points[valid], normals[valid])


def fuse_point_clouds(clouds: list[OrientedPointCloud], target: int) -> OrientedPointCloud:
    """Concatenate and uniformly subsample to the target size (deterministic)."""
    pts = np.concatenate([c.points for c in clouds])
    nrm = np.concatenate([c.normals for c in clouds])
    if len(pts) > target:
        sel = np.linspace(0, len(pts) - 1, target).round().astype(np.int64)
        pts, nrm = pts[sel], nrm[sel]
    return OrientedPointCloud(pts, nrm)


def _normal_accept(nv: np.ndarray, nz: np.ndarray, eps: float, literal: bool) -> np.ndarray:
    dots = np.einsum("ni,ni->n", nv, nz)
    if literal:
        return np.abs(dots) < eps  # the stated inequality, kept behind a flag
    return dots > eps


def encode_depth_condition(
    posed_vertices: np.ndarray,
    posed_normals: np.ndarray,
    cloud: OrientedPointCloud,
    eps_normal: float = DEFAULT_EPS_NORMAL_COS,
    eps_distance: float = DEFAULT_EPS_DISTANCE,
    inverse_skinning_rotations: np.ndarray | None = None,
    literal_normal_filter: bool = False,
) -> DepthCondition:
    """Per-vertex displacement toward the nearest accepted cloud point,
    unwarped to canonical space; the (negated) point-to-surface L2 gradient."""
    v = np.asarray(posed_vertices, dtype=np.float64)
    nv = np.asarray(posed_normals, dtype=np.float64)
    if len(cloud.points) == 0:
        log.warning("encode_depth_condition: empty cloud, returning zeros")
        return DepthCondition(np.zeros_like(v), eps_normal, eps_distance)
    tree = cKDTree(cloud.points)
    dist, idx = tree.query(v)
    accept = (dist < eps_distance) & _normal_accept(
        nv, cloud.normals[idx], eps_normal, literal_normal_filter
    )
    delta = cloud.points[idx] - v
    if inverse_skinning_rotations is not None:
        r = np.asarray(inverse_skinning_rotations, dtype=np.float64)
        delta = np.einsum("vji,vj->vi", r, delta)  # R^-1 = R^T for rigid blends
    return DepthCondition(np.where(accept[:, None], delta, 0.0), eps_normal, eps_distance)


# --- deformation fitting -----------------------------------------------------------

@dataclass
class DeformFitWeights:
    chamfer_eg: float = 1.0
    chamfer_delta: float = 1.0
    arap: float = 0.5
    spatial: float = 0.1
    iso: float = 0.1
    eps_normal_cos: float = DEFAULT_EPS_NORMAL_COS
    literal_normal_filter: bool = False
    iterations: int = 200


@dataclass
class ChamferTerms:
    value: float
    accepted_forward: int   # surface -> cloud pairs kept
    accepted_backward: int  # cloud -> surface pairs kept
    total_forward: int
    total_backward: int


def chamfer_distance(
    surface: np.ndarray,
    surface_normals: np.ndarray,
    cloud: OrientedPointCloud,
    eps_normal_cos: float = DEFAULT_EPS_NORMAL_COS,
    literal: bool = False,
    cloud_tree: cKDTree | None = None,
) -> ChamferTerms:
    """Symmetric mean-squared point-to-point Chamfer with normal filtering.

    Each direction divides by its full source count, so dropping pairs can
    only shrink the value.
    """
    value, _, stats = _chamfer_grad(surface, surface_normals, cloud, eps_normal_cos, literal, cloud_tree)
    return ChamferTerms(value, *stats)


def _chamfer_grad(surface, surface_normals, cloud, eps, literal, cloud_tree=None):
    v = np.asarray(surface, dtype=np.float64)
    tree = cloud_tree if cloud_tree is not None else cKDTree(cloud.points)
    grad = np.zeros_like(v)

    d_vz, i_vz = tree.query(v)
    acc_v = _normal_accept(surface_normals, cloud.normals[i_vz], eps, literal)
    r_v = v - cloud.points[i_vz]
    fwd = float(np.sum(d_vz[acc_v] ** 2)) / len(v)
    grad[acc_v] += 2.0 * r_v[acc_v] / len(v)

    vtree = cKDTree(v)
    d_zv, i_zv = vtree.query(cloud.points)
    acc_z = _normal_accept(cloud.normals, surface_normals[i_zv], eps, literal)
    r_z = v[i_zv] - cloud.points
    bwd = float(np.sum(d_zv[acc_z] ** 2)) / len(cloud.points)
    np.add.at(grad, i_zv[acc_z], 2.0 * r_z[acc_z] / len(cloud.points))

    stats = (int(acc_v.sum()), int(acc_z.sum()), len(v), len(cloud.points))
    return fwd + bwd, grad, stats


def arap_energy(character: TemplateCharacter, params: DeformParams) -> float:
    return _arap_grad(character, params.node_rotations, params.node_translations)[0]


def _directed_node_edges(character: TemplateCharacter) -> tuple[np.ndarray, np.ndarray]:
    e = character.node_edges
    if len(e) == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    src = np.concatenate([e[:, 0], e[:, 1]])
    dst = np.concatenate([e[:, 1], e[:, 0]])
    return src, dst


def _arap_grad(character, alpha, beta):
    g = character.node_rest_positions
    src, dst = _directed_node_edges(character)
    g_alpha = np.zeros_like(alpha)
    g_beta = np.zeros_like(beta)
    if len(src) == 0:
        return 0.0, g_alpha, g_beta
    rel = g[dst] - g[src]
    rotated = rot.rotate_axis_angle(alpha[src], rel)
    r = rotated + g[src] + beta[src] - (g[dst] + beta[dst])
    value = float(np.sum(r * r))
    jac = rot.axis_angle_apply_jacobian(alpha[src], rel)  # (E, 3, 3)
    np.add.at(g_alpha, src, 2.0 * np.einsum("eij,ei->ej", jac, r))
    np.add.at(g_beta, src, 2.0 * r)
    np.add.at(g_beta, dst, -2.0 * r)
    return value, g_alpha, g_beta


def _mesh_edges(faces: np.ndarray) -> np.ndarray:
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e = np.sort(e, axis=1)
    return np.unique(e, axis=0)


def _laplacian(character: TemplateCharacter) -> sparse.csr_matrix:
    """Uniform Laplacian I - A/deg over mesh adjacency."""
    v = character.n_vertices
    e = _mesh_edges(character.faces)
    rows = np.concatenate([e[:, 0], e[:, 1]])
    cols = np.concatenate([e[:, 1], e[:, 0]])
    a = sparse.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(v, v))
    deg = np.asarray(a.sum(axis=1)).ravel()
    deg[deg == 0] = 1.0
    return sparse.eye(v, format="csr") - sparse.diags(1.0 / deg) @ a


@dataclass
class DeformFitResult:
    params: DeformParams
    objective_history: list[float]
    chamfer_final: float


def fit_deformation(
    character: TemplateCharacter,
    pose: SkeletonPose,
    cloud: OrientedPointCloud,
    init: DeformParams | None = None,
    weights: DeformFitWeights | None = None,
) -> DeformFitResult:
    """Direct minimization of the registration objective over (alpha, beta, o).

    The nearest-neighbor structure and the normal filter are refreshed every
    evaluation and treated as locally constant by the gradient. The objective
    is non-increasing over accepted iterations; ten consecutive increases
    abort with a diagnostic.
    """
    weights = weights or DeformFitWeights()
    init = init or DeformParams.zero(character)
    init.validate(character)
    cloud.validate()
    if len(cloud.points) == 0:
        raise ParameterError("cannot fit deformation to an empty cloud")

    n, v = character.n_nodes, character.n_vertices
    fk = forward_kinematics(character, pose)
    bones = bone_transforms_from_fk(character, fk)
    r_v, t_v = dqs_vertex_transforms(character, bones)  # fixed rigid per vertex

    # flattened (vertex, node, weight) attachment triples
    nvw = character.node_vertex_weights
    pairs_v = np.concatenate(
        [np.full(len(i), r, dtype=np.int64) for r, i in enumerate(nvw.indices)]
    )
    pairs_n = np.concatenate(nvw.indices)
    pairs_w = np.concatenate(nvw.weights)
    g = character.node_rest_positions
    local = character.vertices[pairs_v] - g[pairs_n]

    edges = _mesh_edges(character.faces)
    rest_len = np.linalg.norm(
        character.vertices[edges[:, 0]] - character.vertices[edges[:, 1]], axis=1
    )
    lap = _laplacian(character)
    faces = character.faces
    tree = cKDTree(cloud.points)

    def split(x):
        a = x[: 3 * n].reshape(n, 3)
        b = x[3 * n : 6 * n].reshape(n, 3)
        o = x[6 * n :].reshape(v, 3)
        return a, b, o

    def objective(x):
        alpha, beta, offs = split(x)
        rmats = rot.axis_angle_to_matrix(alpha)
        moved = (
            np.einsum("pij,pj->pi", rmats[pairs_n], local) + g[pairs_n] + beta[pairs_n]
        )
        c_base = np.zeros((v, 3))
        np.add.at(c_base, pairs_v, pairs_w[:, None] * moved)
        c_delta = c_base + offs
        v_eg = np.einsum("vij,vj->vi", r_v, c_base) + t_v
        v_delta = np.einsum("vij,vj->vi", r_v, c_delta) + t_v

        n_eg = vertex_normals(v_eg, faces)
        n_delta = vertex_normals(v_delta, faces)
        ch_eg, g_veg, _ = _chamfer_grad(v_eg, n_eg, cloud, weights.eps_normal_cos, weights.literal_normal_filter, tree)
        ch_dl, g_vdl, _ = _chamfer_grad(v_delta, n_delta, cloud, weights.eps_normal_cos, weights.literal_normal_filter, tree)

        e_arap, ga_arap, gb_arap = _arap_grad(character, alpha, beta)

        lo = lap @ offs
        e_spatial = float(np.sum(lo * lo))
        g_o_spatial = 2.0 * (lap.T @ lo)

        d_edge = c_delta[edges[:, 0]] - c_delta[edges[:, 1]]
        elen = np.linalg.norm(d_edge, axis=1)
        safe = np.where(elen > 0, elen, 1.0)
        e_iso = float(np.sum((elen - rest_len) ** 2))
        g_edge = (2.0 * (elen - rest_len) / safe)[:, None] * d_edge
        g_c_iso = np.zeros((v, 3))
        np.add.at(g_c_iso, edges[:, 0], g_edge)
        np.add.at(g_c_iso, edges[:, 1], -g_edge)

        value = (
            weights.chamfer_eg * ch_eg
            + weights.chamfer_delta * ch_dl
            + weights.arap * e_arap
            + weights.spatial * e_spatial
            + weights.iso * e_iso
        )
        if not np.isfinite(value):
            raise NumericError("deformation objective became non-finite")

        # pull gradients back to canonical space, then to parameters
        g_c_delta = (
            weights.chamfer_delta * np.einsum("vji,vj->vi", r_v, g_vdl)
            + weights.iso * g_c_iso
        )
        g_c_base = weights.chamfer_eg * np.einsum("vji,vj->vi", r_v, g_veg) + g_c_delta
        g_offs = g_c_delta + weights.spatial * g_o_spatial

        per_pair = pairs_w[:, None] * g_c_base[pairs_v]
        g_beta = np.zeros((n, 3))
        np.add.at(g_beta, pairs_n, per_pair)
        jac = rot.axis_angle_apply_jacobian(alpha[pairs_n], local)
        g_alpha = np.zeros((n, 3))
        np.add.at(g_alpha, pairs_n, np.einsum("pij,pi->pj", jac, per_pair))
        g_alpha += weights.arap * ga_arap
        g_beta += weights.arap * gb_arap
        return value, np.concatenate([g_alpha.ravel(), g_beta.ravel(), g_offs.ravel()])

    history: list[float] = []
    rising = [0]

    def callback(xk):
        f = objective(xk)[0]
        if history and f > history[-1] + 1e-12:
            rising[0] += 1
            if rising[0] >= 10:
                raise NumericError(
                    f"deformation fit diverged: objective rose 10 consecutive steps (now {f:.6g})"
                )
        else:
            rising[0] = 0
        history.append(f)

    x0 = np.concatenate(
        [init.node_rotations.ravel(), init.node_translations.ravel(), init.vertex_offsets.ravel()]
    )
    history.append(objective(x0)[0])
    res = optimize.minimize(
        objective,
        x0,
        jac=True,
        method="L-BFGS-B",
        callback=callback,
        options={"maxiter": weights.iterations, "maxcor": 20, "ftol": 1e-15, "gtol": 1e-12},
    )
    alpha, beta, offs = split(res.x)
    params = DeformParams(alpha, beta, offs)

    rmats = rot.axis_angle_to_matrix(alpha)
    moved = np.einsum("pij,pj->pi", rmats[pairs_n], local) + g[pairs_n] + beta[pairs_n]
    c = np.zeros((v, 3))
    np.add.at(c, pairs_v, pairs_w[:, None] * moved)
    v_final = np.einsum("vij,vj->vi", r_v, c + offs) + t_v
    ch = chamfer_distance(
        v_final, vertex_normals(v_final, faces), cloud, weights.eps_normal_cos, weights.literal_normal_filter, tree
    )
    return DeformFitResult(params, history, ch.value)


# --- PLY and depth-map files ---------------------------------------------------------

def save_ply(path: str, cloud: OrientedPointCloud) -> None:
    n = len(cloud.points)
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {n}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property float nx\nproperty float ny\nproperty float nz\n"
        "end_header\n"
    ).encode()
    body = np.concatenate([cloud.points, cloud.normals], axis=1).astype("<f4").tobytes()
    atomic_write_bytes(path, header + body)


def load_ply(path: str) -> OrientedPointCloud:
    with open(path, "rb") as fh:
        blob = fh.read()
    end = blob.index(b"end_header\n") + len(b"end_header\n")
    header = blob[:end].decode("ascii", "replace")
    if not header.startswith("ply"):
        raise DataError(f"{path}: not a PLY file")
    n = 0
    binary = "binary_little_endian" in header
    props = []
    for line in header.splitlines():
        if line.startswith("element vertex"):
            n = int(line.split()[2])
        elif line.startswith("property"):
            props.append(line.split()[2])
    wanted = ["x", "y", "z", "nx", "ny", "nz"]
    if props[:6] != wanted:
        raise DataError(f"{path}: expected float x y z nx ny nz layout")
    if binary:
        data = np.frombuffer(blob, "<f4", n * 6, end).reshape(n, 6).astype(np.float64)
    else:
        rows = blob[end:].decode().split()
        data = np.asarray(rows, dtype=np.float64).reshape(n, -1)[:, :6]
    nrm = data[:, 3:6]
    ln = np.linalg.norm(nrm, axis=1, keepdims=True)
    ln[ln == 0] = 1.0
    return OrientedPointCloud(data[:, :3], nrm / ln)


def save_depth_map(path_pfm: str, depth_map: DepthMap) -> None:
    from .images import write_pfm

    write_pfm(path_pfm, depth_map.depth.astype(np.float32))
    sidecar = {
        "K": depth_map.intrinsics.tolist(),
        "Pi": depth_map.hand_eye.tolist(),
        "H": depth_map.head_pose.tolist(),
    }
    atomic_write_bytes(_sidecar_path(path_pfm), json.dumps(sidecar).encode())


def load_depth_map(path_pfm: str) -> DepthMap:
    from .images import read_pfm

    depth = read_pfm(path_pfm)[:, :, 0].astype(np.float64)
    with open(_sidecar_path(path_pfm)) as fh:
        sc = json.load(fh)
    dm = DepthMap(
        depth,
        np.asarray(sc["K"], dtype=np.float64),
        np.asarray(sc["Pi"], dtype=np.float64),
        np.asarray(sc["H"], dtype=np.float64),
    )
    dm.validate()
    return dm


def _sidecar_path(path_pfm: str) -> str:
    return path_pfm[: -len(".pfm")] + ".json" if path_pfm.endswith(".pfm") else path_pfm + ".json"
