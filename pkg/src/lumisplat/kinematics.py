"""Posed character geometry: forward kinematics, dual quaternion skinning,
embedded-graph deformation, and their composition.

All functions are pure; nothing mutates its inputs. Forward kinematics also
records per-DoF world axes and pivots so energy gradients elsewhere can use
the geometric Jacobian (rotation DoF: a x (p - pivot), translation DoF: a).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rotations as rot
from .character import ROTATION, DeformParams, PosedMesh, SkeletonPose, TemplateCharacter
from .errors import NumericError, ParameterError


@dataclass
class FkResult:
    joint_transforms: np.ndarray  # (..., J, 4, 4) world transforms
    joint_positions: np.ndarray   # (..., J, 3)
    dof_axes: np.ndarray          # (..., D, 3) world-space DoF axes
    dof_pivots: np.ndarray        # (..., D, 3) world-space DoF pivots


def _dofs_by_joint(character: TemplateCharacter) -> list[list[int]]:
    per_joint: list[list[int]] = [[] for _ in range(character.n_joints)]
    for d, spec in enumerate(character.dof_map):
        per_joint[spec.joint].append(d)
    return per_joint


def forward_kinematics_batch(character: TemplateCharacter, dof_values: np.ndarray) -> FkResult:
    """FK over a (..., D) stack of pose vectors."""
    theta = np.asarray(dof_values, dtype=np.float64)
    if theta.shape[-1] != character.n_dofs:
        raise ParameterError(
            f"pose length {theta.shape[-1]} does not match {character.n_dofs} DoF"
        )
    if not np.all(np.isfinite(theta)):
        raise NumericError("pose contains non-finite values")
    batch = theta.shape[:-1]
    j_count = character.n_joints
    transforms = np.zeros(batch + (j_count, 4, 4))
    axes = np.zeros(batch + (character.n_dofs, 3))
    pivots = np.zeros(batch + (character.n_dofs, 3))
    per_joint = _dofs_by_joint(character)
    joints = character.skeleton_joints
    parents = character.joint_parents
    eye = np.broadcast_to(np.eye(4), batch + (4, 4))

    for j in range(j_count):
        rest_offset = joints[j] - (joints[parents[j]] if parents[j] >= 0 else 0.0)
        local = np.array(np.broadcast_to(np.eye(4), batch + (4, 4)))
        local[..., :3, 3] = rest_offset
        t = (transforms[..., parents[j], :, :] if parents[j] >= 0 else eye) @ local
        for d in per_joint[j]:
            spec = character.dof_map[d]
            axes[..., d, :] = np.einsum("...ij,j->...i", t[..., :3, :3], spec.axis)
            pivots[..., d, :] = t[..., :3, 3]
            step = np.zeros(batch + (4, 4))
            step[..., 3, 3] = 1.0
            if spec.kind == ROTATION:
                step[..., :3, :3] = rot.axis_angle_to_matrix(
                    theta[..., d, None] * spec.axis
                )
            else:
                step[..., :3, :3] = np.eye(3)
                step[..., :3, 3] = theta[..., d, None] * spec.axis
            t = t @ step
        transforms[..., j, :, :] = t

    return FkResult(transforms, transforms[..., :3, 3], axes, pivots)


def forward_kinematics(character: TemplateCharacter, pose: SkeletonPose) -> FkResult:
    pose.validate(character)
    return forward_kinematics_batch(character, pose.dof_values)


def bone_transforms_from_fk(character: TemplateCharacter, fk: FkResult) -> np.ndarray:
    """Skinning transforms (canonical -> posed) for the transform-carrying bones.

    Binding happens at the zero pose, where every joint transform is a pure
    translation by its rest position.
    """
    t = fk.joint_transforms[..., character.skinned_bones, :, :]
    unbind = np.broadcast_to(np.eye(4), t.shape).copy()
    unbind[..., :3, 3] = -character.skeleton_joints[character.skinned_bones]
    return t @ unbind


def dqs_vertex_transforms(
    character: TemplateCharacter, bone_transforms: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Per-vertex blended rigid transform (R, t) from dual quaternion skinning.

    Dual quaternions are sign-aligned to each vertex's heaviest-weight bone
    before blending, then the weighted sum is renormalized.
    """
    bone_transforms = np.asarray(bone_transforms, dtype=np.float64)
    rot.check_rigid(bone_transforms)
    if bone_transforms.shape[0] != character.skinning_weights.n_cols:
        raise ParameterError("bone transform count does not match skinning weight columns")
    dq = rot.dualquat_from_rigid(bone_transforms)  # (B, 8)
    idx, w = character.skinning_weights.padded()   # (V, k)
    pivot = idx[np.arange(len(idx)), np.argmax(w, axis=1)]
    gathered = dq[idx]  # (V, k, 8)
    sign = np.sign(np.einsum("vkq,vq->vk", gathered[..., :4], dq[pivot, :4]))
    sign[sign == 0.0] = 1.0
    blended = np.einsum("vk,vkq->vq", w * sign, gathered)
    return rot.dualquat_to_rigid(blended)


def skin_dqs(
    character: TemplateCharacter,
    canonical_vertices: np.ndarray,
    bone_transforms: np.ndarray,
) -> np.ndarray:
    """Dual quaternion skinning of canonical vertices by rigid bone transforms."""
    v = np.asarray(canonical_vertices, dtype=np.float64)
    if v.shape != (character.n_vertices, 3):
        raise ParameterError("canonical vertex array shape mismatch")
    r, t = dqs_vertex_transforms(character, bone_transforms)
    return np.einsum("vij,vj->vi", r, v) + t


def deform_embedded_graph(character: TemplateCharacter, params: DeformParams) -> np.ndarray:
    """Sumner-style graph deformation: per-node rigid motions blended onto
    vertices plus free per-vertex offsets."""
    params.validate(character)
    idx, w = character.node_vertex_weights.padded()  # (V, k)
    g = character.node_rest_positions                # (N, 3)
    rmats = rot.axis_angle_to_matrix(params.node_rotations)  # (N, 3, 3)
    vbar = character.vertices
    local = vbar[:, None, :] - g[idx]                          # (V, k, 3)
    moved = np.einsum("vkij,vkj->vki", rmats[idx], local) + g[idx] + params.node_translations[idx]
    return np.einsum("vk,vki->vi", w, moved) + params.vertex_offsets


def vertex_normals(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Area-weighted vertex normals (degenerate accumulations fall back to +z)."""
    v = np.asarray(vertices, dtype=np.float64)
    f = np.asarray(faces, dtype=np.int64)
    fn = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])  # 2*area weighted
    acc = np.zeros_like(v)
    for c in range(3):
        np.add.at(acc, f[:, c], fn)
    n = np.linalg.norm(acc, axis=1, keepdims=True)
    bad = n[:, 0] < 1e-20
    acc[bad] = (0.0, 0.0, 1.0)
    n[bad] = 1.0
    return acc / n


def pose_character(
    character: TemplateCharacter, pose: SkeletonPose, deform: DeformParams | None = None
) -> PosedMesh:
    """Full geometry evaluation: graph deformation, then DQS with FK transforms."""
    if deform is None:
        deform = DeformParams.zero(character)
    canonical = deform_embedded_graph(character, deform)
    fk = forward_kinematics(character, pose)
    bones = bone_transforms_from_fk(character, fk)
    posed = skin_dqs(character, canonical, bones)
    return PosedMesh(posed, vertex_normals(posed, character.faces), character.faces, character.uv_coords)
