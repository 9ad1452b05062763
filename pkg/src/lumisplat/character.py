"""Person-specific character assets: template mesh, skeleton, skinning, graph.

A character lives on disk as one directory:

    template.obj    triangle mesh with per-corner UVs
    skeleton.json   joints, parents, dof_map, limits, mean pose, skinned bones
    skinning.lskw   row-compressed sparse skinning weights (LSKW1, little-endian)
    graph.json      embedded-graph nodes, edges, vertex attachment weights

All weight rows are partitions of unity (sum to 1 within 1e-6).
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, NumericError, ParameterError

ROTATION = "rotation"
TRANSLATION = "translation"


@dataclass
class DofSpec:
    """One degree of freedom: a rotation or translation about/along an axis."""

    joint: int
    axis: np.ndarray  # unit 3-vector in the joint's local frame
    kind: str  # ROTATION | TRANSLATION


@dataclass
class SparseWeights:
    """Row-sparse nonnegative weights; every row sums to 1."""

    indices: list[np.ndarray]  # per row: column indices (int array)
    weights: list[np.ndarray]  # per row: float weights, same length
    n_cols: int

    def __post_init__(self):
        self.indices = [np.asarray(i, dtype=np.int64) for i in self.indices]
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]

    @property
    def n_rows(self) -> int:
        return len(self.indices)

    def validate(self, what: str) -> None:
        for r, (idx, w) in enumerate(zip(self.indices, self.weights)):
            if idx.shape != w.shape:
                raise DataError(f"{what}: row {r} index/weight length mismatch")
            if len(idx) and (idx.min() < 0 or idx.max() >= self.n_cols):
                raise DataError(f"{what}: row {r} column index out of range")
            if np.any(w < -1e-12):
                raise DataError(f"{what}: row {r} has negative weights")
            if abs(w.sum() - 1.0) > 1e-6:
                raise DataError(f"{what}: row {r} sums to {w.sum():.8f}, expected 1")

    def padded(self) -> tuple[np.ndarray, np.ndarray]:
        """Dense (rows, k) index/weight arrays padded with zero weights."""
        k = max((len(i) for i in self.indices), default=1)
        k = max(k, 1)
        idx = np.zeros((self.n_rows, k), dtype=np.int64)
        w = np.zeros((self.n_rows, k))
        for r, (i, v) in enumerate(zip(self.indices, self.weights)):
            idx[r, : len(i)] = i
            w[r, : len(v)] = v
        return idx, w

    def to_dense(self) -> np.ndarray:
        m = np.zeros((self.n_rows, self.n_cols))
        for r, (i, v) in enumerate(zip(self.indices, self.weights)):
            m[r, i] = v
        return m


@dataclass
class TemplateCharacter:
    vertices: np.ndarray          # (V, 3) canonical template positions, meters
    faces: np.ndarray             # (F, 3) triangle vertex indices
    uv_coords: np.ndarray         # (F, 3, 2) per-corner UVs in [0, 1]^2
    skeleton_joints: np.ndarray   # (J, 3) rest-pose joint positions
    joint_parents: np.ndarray     # (J,) parent index, -1 for the root
    dof_map: list[DofSpec]        # length D
    skinned_bones: np.ndarray     # (B,) joint indices carrying skinning transforms
    skinning_weights: SparseWeights      # V rows over B bone columns
    graph_nodes: np.ndarray       # (N,) vertex indices of embedded-graph nodes
    node_vertex_weights: SparseWeights   # V rows over N node columns
    node_edges: np.ndarray        # (E, 2) undirected edges between node indices
    dof_limits: np.ndarray        # (D, 2) [min, max] per DoF
    dof_mean: np.ndarray          # (D,) mean pose used by the IK prior
    joint_names: list[str] = field(default_factory=list)

    @property
    def n_vertices(self) -> int:
        return int(self.vertices.shape[0])

    @property
    def n_joints(self) -> int:
        return int(self.skeleton_joints.shape[0])

    @property
    def n_dofs(self) -> int:
        return len(self.dof_map)

    @property
    def n_nodes(self) -> int:
        return int(self.graph_nodes.shape[0])

    @property
    def node_rest_positions(self) -> np.ndarray:
        return self.vertices[self.graph_nodes]

    def validate(self) -> None:
        v, f = self.n_vertices, self.faces
        if f.size and (f.min() < 0 or f.max() >= v):
            raise DataError("face index out of vertex range")
        if self.uv_coords.shape != (len(f), 3, 2):
            raise DataError("uv_coords must be per-corner, shape (F, 3, 2)")
        parents = self.joint_parents
        for j, p in enumerate(parents):
            if p >= j:
                raise DataError(f"joint {j} parent {p} breaks topological order")
            if j == 0 and p != -1:
                raise DataError("joint 0 must be the root (parent -1)")
        for d in self.dof_map:
            if not 0 <= d.joint < self.n_joints:
                raise DataError(f"dof references joint {d.joint} out of range")
            if d.kind not in (ROTATION, TRANSLATION):
                raise DataError(f"unknown dof kind {d.kind!r}")
        if np.any(self.skinned_bones < 0) or np.any(self.skinned_bones >= self.n_joints):
            raise DataError("skinned_bones index out of joint range")
        if self.skinning_weights.n_rows != v or self.skinning_weights.n_cols != len(self.skinned_bones):
            raise DataError("skinning weight shape does not match vertices x bones")
        if self.node_vertex_weights.n_rows != v or self.node_vertex_weights.n_cols != self.n_nodes:
            raise DataError("node weight shape does not match vertices x nodes")
        if np.any(self.graph_nodes < 0) or np.any(self.graph_nodes >= v):
            raise DataError("graph node vertex index out of range")
        if self.dof_limits.shape != (self.n_dofs, 2) or self.dof_mean.shape != (self.n_dofs,):
            raise DataError("dof limits/mean length does not match dof_map")
        self.skinning_weights.validate("skinning_weights")
        self.node_vertex_weights.validate("node_vertex_weights")


@dataclass
class SkeletonPose:
    dof_values: np.ndarray  # (D,) radians for rotations, meters for translations

    def __post_init__(self):
        self.dof_values = np.asarray(self.dof_values, dtype=np.float64)

    def validate(self, character: TemplateCharacter) -> None:
        if self.dof_values.shape != (character.n_dofs,):
            raise ParameterError(
                f"pose length {self.dof_values.shape} does not match {character.n_dofs} DoF"
            )
        if not np.all(np.isfinite(self.dof_values)):
            raise NumericError("pose contains non-finite values")


@dataclass
class DeformParams:
    node_rotations: np.ndarray     # (N, 3) axis-angle per graph node
    node_translations: np.ndarray  # (N, 3) meters
    vertex_offsets: np.ndarray     # (V, 3) meters

    def __post_init__(self):
        self.node_rotations = np.asarray(self.node_rotations, dtype=np.float64)
        self.node_translations = np.asarray(self.node_translations, dtype=np.float64)
        self.vertex_offsets = np.asarray(self.vertex_offsets, dtype=np.float64)

    @classmethod
    def zero(cls, character: TemplateCharacter) -> "DeformParams":
        n, v = character.n_nodes, character.n_vertices
        return cls(np.zeros((n, 3)), np.zeros((n, 3)), np.zeros((v, 3)))

    def validate(self, character: TemplateCharacter) -> None:
        n, v = character.n_nodes, character.n_vertices
        if self.node_rotations.shape != (n, 3) or self.node_translations.shape != (n, 3):
            raise ParameterError("node parameter shape does not match graph node count")
        if self.vertex_offsets.shape != (v, 3):
            raise ParameterError("vertex offset shape does not match vertex count")
        for a in (self.node_rotations, self.node_translations, self.vertex_offsets):
            if not np.all(np.isfinite(a)):
                raise NumericError("deformation parameters contain non-finite values")


@dataclass
class PosedMesh:
    vertices: np.ndarray       # (V, 3)
    vertex_normals: np.ndarray  # (V, 3) unit
    faces: np.ndarray          # shared with the template
    uv_coords: np.ndarray      # shared with the template


# --- OBJ -------------------------------------------------------------------

def load_obj(path: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Minimal triangle OBJ reader returning (vertices, faces, per-corner uvs)."""
    verts, uvs, faces, corner_uv = [], [], [], []
    with open(path, "r") as fh:
        for line in fh:
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "vt":
                uvs.append([float(x) for x in parts[1:3]])
            elif parts[0] == "f":
                if len(parts) != 4:
                    raise DataError(f"{path}: only triangle faces are supported")
                vi, ti = [], []
                for token in parts[1:]:
                    fields = token.split("/")
                    vi.append(int(fields[0]) - 1)
                    if len(fields) > 1 and fields[1]:
                        ti.append(int(fields[1]) - 1)
                faces.append(vi)
                corner_uv.append(ti if len(ti) == 3 else [0, 0, 0])
    v = np.asarray(verts, dtype=np.float64)
    f = np.asarray(faces, dtype=np.int64)
    if uvs:
        vt = np.asarray(uvs, dtype=np.float64)
        uv = vt[np.asarray(corner_uv, dtype=np.int64)]
    else:
        uv = np.zeros((len(f), 3, 2))
    return v, f, uv


def save_obj(path: str, vertices: np.ndarray, faces: np.ndarray, uv_coords: np.ndarray) -> None:
    lines = []
    for p in vertices:
        lines.append(f"v {p[0]:.9g} {p[1]:.9g} {p[2]:.9g}")
    # one vt per corner keeps the writer trivial; readers re-index anyway
    for tri in uv_coords:
        for uv in tri:
            lines.append(f"vt {uv[0]:.9g} {uv[1]:.9g}")
    for i, tri in enumerate(faces):
        t = 3 * i
        lines.append(f"f {tri[0]+1}/{t+1} {tri[1]+1}/{t+2} {tri[2]+1}/{t+3}")
    from .util import atomic_write_bytes

    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode())


# --- LSKW1 sparse weight container ------------------------------------------

_LSKW_MAGIC = b"LSKW1"


def save_sparse_weights(path: str, sw: SparseWeights) -> None:
    counts = np.array([len(i) for i in sw.indices], dtype="<u4")
    idx = np.concatenate(sw.indices).astype("<u4") if sw.n_rows else np.zeros(0, "<u4")
    w = np.concatenate(sw.weights).astype("<f4") if sw.n_rows else np.zeros(0, "<f4")
    blob = b"".join(
        [
            _LSKW_MAGIC,
            struct.pack("<II", sw.n_rows, sw.n_cols),
            counts.tobytes(),
            idx.tobytes(),
            w.tobytes(),
        ]
    )
    from .util import atomic_write_bytes

    atomic_write_bytes(path, blob)


def load_sparse_weights(path: str) -> SparseWeights:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:5] != _LSKW_MAGIC:
        raise DataError(f"{path}: bad magic, expected LSKW1")
    n_rows, n_cols = struct.unpack_from("<II", blob, 5)
    off = 13
    counts = np.frombuffer(blob, "<u4", n_rows, off)
    off += 4 * n_rows
    total = int(counts.sum())
    idx = np.frombuffer(blob, "<u4", total, off).astype(np.int64)
    off += 4 * total
    w = np.frombuffer(blob, "<f4", total, off).astype(np.float64)
    splits = np.cumsum(counts)[:-1]
    return SparseWeights(np.split(idx, splits), np.split(w, splits), n_cols)


# --- container -------------------------------------------------------------

def save_character(directory: str, character: TemplateCharacter) -> None:
    os.makedirs(directory, exist_ok=True)
    save_obj(os.path.join(directory, "template.obj"), character.vertices, character.faces, character.uv_coords)
    skeleton = {
        "joints": character.skeleton_joints.tolist(),
        "parents": character.joint_parents.tolist(),
        "dof_map": [
            {"joint": int(d.joint), "axis": np.asarray(d.axis).tolist(), "type": d.kind}
            for d in character.dof_map
        ],
        "theta_min": character.dof_limits[:, 0].tolist(),
        "theta_max": character.dof_limits[:, 1].tolist(),
        "theta_mean": character.dof_mean.tolist(),
        "skinned_bones": character.skinned_bones.tolist(),
        "joint_names": character.joint_names,
    }
    graph = {
        "nodes": character.graph_nodes.tolist(),
        "edges": character.node_edges.tolist(),
        "vertex_weights": {
            "indices": [i.tolist() for i in character.node_vertex_weights.indices],
            "weights": [w.tolist() for w in character.node_vertex_weights.weights],
        },
    }
    from .util import atomic_write_bytes

    atomic_write_bytes(
        os.path.join(directory, "skeleton.json"),
        json.dumps(skeleton, sort_keys=True).encode(),
    )
    atomic_write_bytes(
        os.path.join(directory, "graph.json"), json.dumps(graph, sort_keys=True).encode()
    )
    save_sparse_weights(os.path.join(directory, "skinning.lskw"), character.skinning_weights)


def load_character(directory: str) -> TemplateCharacter:
    verts, faces, uv = load_obj(os.path.join(directory, "template.obj"))
    with open(os.path.join(directory, "skeleton.json")) as fh:
        sk = json.load(fh)
    with open(os.path.join(directory, "graph.json")) as fh:
        gr = json.load(fh)
    sw = load_sparse_weights(os.path.join(directory, "skinning.lskw"))
    dof_map = [
        DofSpec(int(d["joint"]), np.asarray(d["axis"], dtype=np.float64), d["type"])
        for d in sk["dof_map"]
    ]
    nvw = SparseWeights(
        [np.asarray(i, dtype=np.int64) for i in gr["vertex_weights"]["indices"]],
        [np.asarray(w, dtype=np.float64) for w in gr["vertex_weights"]["weights"]],
        len(gr["nodes"]),
    )
    character = TemplateCharacter(
        vertices=verts,
        faces=faces,
        uv_coords=uv,
        skeleton_joints=np.asarray(sk["joints"], dtype=np.float64),
        joint_parents=np.asarray(sk["parents"], dtype=np.int64),
        dof_map=dof_map,
        skinned_bones=np.asarray(sk["skinned_bones"], dtype=np.int64),
        skinning_weights=sw,
        graph_nodes=np.asarray(gr["nodes"], dtype=np.int64),
        node_vertex_weights=nvw,
        node_edges=np.asarray(gr["edges"], dtype=np.int64).reshape(-1, 2),
        dof_limits=np.stack(
            [np.asarray(sk["theta_min"], dtype=np.float64), np.asarray(sk["theta_max"], dtype=np.float64)],
            axis=1,
        ),
        dof_mean=np.asarray(sk["theta_mean"], dtype=np.float64),
        joint_names=list(sk.get("joint_names", [])),
    )
    character.validate()
    return character
