"""Procedural characters and synthetic scenes for demos and tests.

Everything here is deterministic given the seed; no binary assets ship with
the package. The reference character dimensions live in
``data/reference_character.json`` and are read, never hard-coded.
"""

from __future__ import annotations

import json
import os

import numpy as np
from scipy.spatial import cKDTree

from .character import (
    ROTATION,
    TRANSLATION,
    DofSpec,
    SparseWeights,
    TemplateCharacter,
)

_AXIS = {
    "x": np.array([1.0, 0.0, 0.0]),
    "y": np.array([0.0, 1.0, 0.0]),
    "z": np.array([0.0, 0.0, 1.0]),
}


def reference_dimensions() -> dict:
    path = os.path.join(os.path.dirname(__file__), "data", "reference_character.json")
    with open(path) as fh:
        return json.load(fh)


def root_dofs(order: str = "tttrrr") -> list[DofSpec]:
    """Free 6-DoF root: three translations then three rotations."""
    kinds = {"t": TRANSLATION, "r": ROTATION}
    axes = "xyzxyz"
    return [DofSpec(0, _AXIS[a], kinds[k]) for k, a in zip(order, axes)]


def _nearest_weights(points: np.ndarray, anchors: np.ndarray, k: int) -> SparseWeights:
    """Inverse-distance weights over the k nearest anchors, rows sum to 1."""
    k = min(k, len(anchors))
    tree = cKDTree(anchors)
    dist, idx = tree.query(points, k=k)
    if k == 1:
        dist = dist[:, None]
        idx = idx[:, None]
    w = 1.0 / np.maximum(dist, 1e-9)
    w /= w.sum(axis=1, keepdims=True)
    return SparseWeights(list(idx.astype(np.int64)), list(w), len(anchors))


def _default_limits(dof_map: list[DofSpec]) -> np.ndarray:
    lim = np.empty((len(dof_map), 2))
    for i, d in enumerate(dof_map):
        lim[i] = (-5.0, 5.0) if d.kind == TRANSLATION else (-2.8, 2.8)
    return lim


def _graph_from_vertices(vertices: np.ndarray, node_ids: np.ndarray, k_attach: int = 4):
    nodes = np.asarray(node_ids, dtype=np.int64)
    pos = vertices[nodes]
    weights = _nearest_weights(vertices, pos, k_attach)
    k_edge = min(3, len(nodes) - 1)
    edges = set()
    if k_edge > 0:
        tree = cKDTree(pos)
        _, nb = tree.query(pos, k=k_edge + 1)
        for i, row in enumerate(nb):
            for j in row[1:]:
                edges.add((min(i, int(j)), max(i, int(j))))
    edge_arr = np.asarray(sorted(edges), dtype=np.int64).reshape(-1, 2)
    return nodes, weights, edge_arr


# --- octahedral sphere -----------------------------------------------------------

def octahedral_decode(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """UV square -> unit sphere (y-up octahedral mapping), bijective a.e."""
    px = 2.0 * np.asarray(u, dtype=np.float64) - 1.0
    pz = 2.0 * np.asarray(v, dtype=np.float64) - 1.0
    y = 1.0 - np.abs(px) - np.abs(pz)
    fold = y < 0.0
    sx = np.where(px >= 0.0, 1.0, -1.0)
    sz = np.where(pz >= 0.0, 1.0, -1.0)
    x = np.where(fold, sx * (1.0 - np.abs(pz)), px)
    z = np.where(fold, sz * (1.0 - np.abs(px)), pz)
    d = np.stack([x, y, z], axis=-1)
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def build_sphere_character(grid: int = 64, radius: float = 1.0, node_stride: int = 8) -> TemplateCharacter:
    """Unit-ish sphere whose UV layout is the full square (octahedral map).

    Every UV texel is covered, which makes it the canonical relighting test
    body. Single 6-DoF root, all skinning weight on the root bone.
    """
    n = grid
    ii, jj = np.meshgrid(np.arange(n + 1), np.arange(n + 1), indexing="ij")
    u = jj / n
    v = ii / n
    verts = radius * octahedral_decode(u, v).reshape(-1, 3)

    def vid(r, c):
        return r * (n + 1) + c

    faces = []
    uvf = []
    for r in range(n):
        for c in range(n):
            # split along the local fold direction so crease edges stay sharp
            cu = (c + 0.5) / n - 0.5
            cv = (r + 0.5) / n - 0.5
            quad = [(r, c), (r, c + 1), (r + 1, c + 1), (r + 1, c)]
            if cu * cv > 0:
                tris = [(0, 1, 2), (0, 2, 3)]
            else:
                tris = [(0, 1, 3), (1, 2, 3)]
            for tri in tris:
                faces.append([vid(*quad[t]) for t in tri])
                uvf.append([[quad[t][1] / n, quad[t][0] / n] for t in tri])
    faces = np.asarray(faces, dtype=np.int64)
    uvf = np.asarray(uvf, dtype=np.float64)

    dof_map = root_dofs()
    v_count = len(verts)
    skin = SparseWeights([np.array([0])] * v_count, [np.array([1.0])] * v_count, 1)
    rr, cc = np.meshgrid(
        np.arange(0, n + 1, node_stride), np.arange(0, n + 1, node_stride), indexing="ij"
    )
    node_ids = (rr * (n + 1) + cc).reshape(-1)
    nodes, nvw, edges = _graph_from_vertices(verts, node_ids)
    return TemplateCharacter(
        vertices=verts,
        faces=faces,
        uv_coords=uvf,
        skeleton_joints=np.zeros((1, 3)),
        joint_parents=np.array([-1]),
        dof_map=dof_map,
        skinned_bones=np.array([0]),
        skinning_weights=skin,
        graph_nodes=nodes,
        node_vertex_weights=nvw,
        node_edges=edges,
        dof_limits=_default_limits(dof_map),
        dof_mean=np.zeros(len(dof_map)),
    )


def build_octahedron_character() -> TemplateCharacter:
    """Eight-triangle octahedron; the smallest closed body with a full UV chart."""
    verts = np.array(
        [
            [0.0, 1.0, 0.0],   # top
            [1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0],
            [-1.0, 0.0, 0.0],
            [0.0, 0.0, -1.0],
            [0.0, -1.0, 0.0],  # bottom
        ]
    )
    # (face, per-corner uv); the UV square folds exactly onto the octahedron
    c = 0.5
    faces = np.array(
        [
            [0, 1, 2], [0, 2, 3], [0, 3, 4], [0, 4, 1],
            [5, 2, 1], [5, 3, 2], [5, 4, 3], [5, 1, 4],
        ],
        dtype=np.int64,
    )
    uv_top = {1: (1.0, c), 2: (c, 1.0), 3: (0.0, c), 4: (c, 0.0), 0: (c, c)}
    uvs = []
    for f in faces[:4]:
        uvs.append([uv_top[int(i)] for i in f])
    # bottom vertex unfolds to the four square corners
    corners = {(1, 2): (1.0, 1.0), (2, 3): (0.0, 1.0), (3, 4): (0.0, 0.0), (4, 1): (1.0, 0.0)}
    for f in faces[4:]:
        a, b = int(f[1]), int(f[2])
        corner = corners[(b, a)] if (b, a) in corners else corners[(a, b)]
        uvs.append([corner, uv_top[a], uv_top[b]])
    uvf = np.asarray(uvs, dtype=np.float64)

    dof_map = root_dofs()
    v_count = len(verts)
    skin = SparseWeights([np.array([0])] * v_count, [np.array([1.0])] * v_count, 1)
    nodes, nvw, edges = _graph_from_vertices(verts, np.arange(v_count))
    return TemplateCharacter(
        vertices=verts,
        faces=faces,
        uv_coords=uvf,
        skeleton_joints=np.zeros((1, 3)),
        joint_parents=np.array([-1]),
        dof_map=dof_map,
        skinned_bones=np.array([0]),
        skinning_weights=skin,
        graph_nodes=nodes,
        node_vertex_weights=nvw,
        node_edges=edges,
        dof_limits=_default_limits(dof_map),
        dof_mean=np.zeros(len(dof_map)),
    )


# --- kinematic chains ------------------------------------------------------------

def build_chain_character(
    n_rotation_dofs: int = 14,
    link_length: float = 0.1,
    limits: tuple[float, float] = (-2.8, 2.8),
) -> TemplateCharacter:
    """Root 6-DoF plus a chain of single-rotation joints along +x.

    With the default 14 rotation DoFs this is the 20-DoF test chain. A thin
    triangle ribbon along the chain serves as the mesh.
    """
    n_joints = n_rotation_dofs + 1
    joints = np.zeros((n_joints, 3))
    joints[:, 0] = np.arange(n_joints) * link_length
    parents = np.arange(-1, n_joints - 1)
    dof_map = root_dofs()
    axes = "zyx"
    for j in range(1, n_joints):
        dof_map.append(DofSpec(j, _AXIS[axes[(j - 1) % 3]], ROTATION))
    lim = _default_limits(dof_map)
    lim[6:] = limits

    # ribbon mesh: two verts per joint, offset in +-y
    top = joints + np.array([0.0, 0.02, 0.0])
    bot = joints - np.array([0.0, 0.02, 0.0])
    verts = np.concatenate([top, bot])
    faces = []
    uvf = []
    for j in range(n_joints - 1):
        a, b = j, j + 1
        c, d = n_joints + j, n_joints + j + 1
        faces.append([a, c, b])
        faces.append([b, c, d])
        u0, u1 = j / (n_joints - 1), (j + 1) / (n_joints - 1)
        uvf.append([[u0, 1.0], [u0, 0.0], [u1, 1.0]])
        uvf.append([[u1, 1.0], [u0, 0.0], [u1, 0.0]])
    faces = np.asarray(faces, dtype=np.int64)
    uvf = np.asarray(uvf, dtype=np.float64)

    skinned = np.arange(n_joints)
    skin = _nearest_weights(verts, joints, 2)
    nodes, nvw, edges = _graph_from_vertices(verts, np.arange(0, len(verts), 4))
    return TemplateCharacter(
        vertices=verts,
        faces=faces,
        uv_coords=uvf,
        skeleton_joints=joints,
        joint_parents=parents,
        dof_map=dof_map,
        skinned_bones=skinned,
        skinning_weights=skin,
        graph_nodes=nodes,
        node_vertex_weights=nvw,
        node_edges=edges,
        dof_limits=lim,
        dof_mean=np.zeros(len(dof_map)),
    )


def build_hand_character(hand_dofs: int = 14) -> tuple[TemplateCharacter, dict]:
    """Root plus two finger chains of ``hand_dofs`` rotation joints each.

    Returns the character and {"left": dof indices, "right": dof indices}.
    """
    n_joints = 1 + 2 * hand_dofs
    joints = np.zeros((n_joints, 3))
    parents = np.full(n_joints, -1, dtype=np.int64)
    dof_map = root_dofs()
    hand_dof_idx = {"left": [], "right": []}
    jid = 1
    for side, sign in (("left", -1.0), ("right", 1.0)):
        prev = 0
        for k in range(hand_dofs):
            joints[jid] = joints[prev] + np.array([sign * 0.05, 0.0, 0.0])
            parents[jid] = prev
            hand_dof_idx[side].append(len(dof_map))
            dof_map.append(DofSpec(jid, _AXIS["zy"[k % 2]], ROTATION))
            prev = jid
            jid += 1

    verts = np.concatenate([joints + [0, 0.01, 0], joints - [0, 0.01, 0]])
    faces = np.array([[0, n_joints, 1], [1, n_joints, n_joints + 1]], dtype=np.int64)
    uvf = np.asarray(
        [[[0.1, 0.9], [0.1, 0.1], [0.9, 0.9]], [[0.9, 0.9], [0.1, 0.1], [0.9, 0.1]]]
    )
    skin = _nearest_weights(verts, joints, 1)
    nodes, nvw, edges = _graph_from_vertices(verts, np.arange(0, len(verts), 6))
    character = TemplateCharacter(
        vertices=verts,
        faces=faces,
        uv_coords=uvf,
        skeleton_joints=joints,
        joint_parents=parents,
        dof_map=dof_map,
        skinned_bones=np.arange(n_joints),
        skinning_weights=skin,
        graph_nodes=nodes,
        node_vertex_weights=nvw,
        node_edges=edges,
        dof_limits=_default_limits(dof_map),
        dof_mean=np.zeros(len(dof_map)),
    )
    return character, {k: np.asarray(v, dtype=np.int64) for k, v in hand_dof_idx.items()}


def build_reference_character() -> TemplateCharacter:
    """Synthetic character matching the reference dimensions on file."""
    dims = reference_dimensions()
    n_joints = dims["joints"]
    n_dofs = dims["dofs"]
    n_verts = dims["vertices"]
    n_bones = dims["skinned_bones"]
    n_nodes = dims["graph_nodes"]

    j = np.arange(n_joints)
    joints = np.stack(
        [0.2 * np.cos(j / 8.0), 0.01 * j, 0.2 * np.sin(j / 8.0)], axis=1
    )
    parents = np.concatenate([[-1], (np.arange(1, n_joints) - 1) // 2])
    dof_map = root_dofs()
    axes = "xyz"
    jid = 1
    while len(dof_map) < n_dofs:
        dof_map.append(DofSpec(jid, _AXIS[axes[jid % 3]], ROTATION))
        jid += 1

    # cylinder grid sized to the vertex budget
    rows = n_verts // 30
    assert rows * 30 == n_verts, "vertex budget must factor as rows x 30"
    rr, cc = np.meshgrid(np.arange(rows), np.arange(30), indexing="ij")
    ang = cc / 30.0 * 2 * np.pi
    verts = np.stack(
        [0.25 * np.cos(ang), rr * (1.7 / rows), 0.25 * np.sin(ang)], axis=2
    ).reshape(-1, 3)
    faces = []
    uvf = []
    for r in range(rows - 1):
        for c in range(30):
            c2 = (c + 1) % 30
            a, b = r * 30 + c, r * 30 + c2
            d, e = (r + 1) * 30 + c, (r + 1) * 30 + c2
            faces.append([a, d, b])
            faces.append([b, d, e])
            u0, u1 = c / 30.0, (c + 1) / 30.0
            v0, v1 = r / (rows - 1.0), (r + 1) / (rows - 1.0)
            uvf.append([[u0, v0], [u0, v1], [u1, v0]])
            uvf.append([[u1, v0], [u0, v1], [u1, v1]])
    faces = np.asarray(faces, dtype=np.int64)
    uvf = np.asarray(uvf, dtype=np.float64)

    bone_ids = np.round(np.linspace(0, n_joints - 1, n_bones)).astype(np.int64)
    skin = _nearest_weights(verts, joints[bone_ids], 2)
    node_ids = np.arange(0, n_verts, n_verts // n_nodes)[:n_nodes]
    nodes, nvw, edges = _graph_from_vertices(verts, node_ids)
    return TemplateCharacter(
        vertices=verts,
        faces=faces,
        uv_coords=uvf,
        skeleton_joints=joints,
        joint_parents=parents,
        dof_map=dof_map,
        skinned_bones=bone_ids,
        skinning_weights=skin,
        graph_nodes=nodes,
        node_vertex_weights=nvw,
        node_edges=edges,
        dof_limits=_default_limits(dof_map),
        dof_mean=np.zeros(len(dof_map)),
    )


# --- synthetic motion ------------------------------------------------------------

def synthesize_motion(
    character: TemplateCharacter,
    n_frames: int,
    amplitude: float = 0.25,
    seed: int = 0,
) -> np.ndarray:
    """Smooth sinusoid motion around the mean pose, inside the DoF limits."""
    rng = np.random.default_rng(seed)
    d = character.n_dofs
    t = np.arange(n_frames) / max(n_frames - 1, 1)
    freq = rng.uniform(0.5, 1.5, d)
    phase = rng.uniform(0, 2 * np.pi, d)
    amp = rng.uniform(0.3, 1.0, d) * amplitude
    thetas = character.dof_mean + amp * np.sin(2 * np.pi * freq * t[:, None] + phase)
    lo = character.dof_limits[:, 0] + 1e-3
    hi = character.dof_limits[:, 1] - 1e-3
    return np.clip(thetas, lo, hi)


def keypoints_from_motion(character: TemplateCharacter, thetas: np.ndarray, noise: float = 0.0, seed: int = 0):
    """Keypoints at every joint via forward kinematics, optional Gaussian noise."""
    from .ik import KeypointSequence
    from .kinematics import forward_kinematics_batch

    pos = forward_kinematics_batch(character, thetas).joint_positions.copy()
    if noise > 0:
        rng = np.random.default_rng(seed)
        pos += rng.normal(0.0, noise, pos.shape)
    t, j = pos.shape[:2]
    return KeypointSequence(pos, np.ones((t, j)), np.arange(j))
