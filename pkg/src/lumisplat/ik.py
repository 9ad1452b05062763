"""Hierarchical inverse kinematics over a keypoint sequence.

The solver minimizes

    E = E_data + w_t E_temporal + w_lim E_doflimit + w_reg E_meanpose

over the whole sequence in three stages with cumulative active sets: the
root 6-DoF block, then root+body, then per-hand PCA coefficients (hand DoF
= mean + basis @ eta). Every term uses non-squared Euclidean norms as its
unit of energy, with the subgradient at zero taken to be zero. Gradients are
analytic; the data term uses the geometric Jacobian recorded by forward
kinematics (rotation DoF: axis x (p - pivot), translation DoF: axis).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from .character import ROTATION, SkeletonPose, TemplateCharacter
from .errors import DataError, NumericError, ParameterError
from .kinematics import forward_kinematics_batch

STAGE_GLOBAL = "global6d"
STAGE_BODY = "body"
STAGE_HANDS = "hands"


@dataclass
class KeypointSequence:
    positions: np.ndarray       # (T, K, 3) meters
    confidences: np.ndarray     # (T, K) in [0, 1]
    joint_correspondence: np.ndarray  # (K,) skeleton joint index per keypoint
    frame_rate: float = 30.0

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.confidences = np.asarray(self.confidences, dtype=np.float64)
        self.joint_correspondence = np.asarray(self.joint_correspondence, dtype=np.int64)

    @property
    def n_frames(self) -> int:
        return self.positions.shape[0]

    def validate(self, character: TemplateCharacter) -> None:
        t, k = self.positions.shape[:2]
        if self.confidences.shape != (t, k):
            raise ParameterError("confidence shape does not match keypoints")
        if np.any((self.confidences < 0) | (self.confidences > 1)):
            raise ParameterError("confidences must lie in [0, 1]")
        if self.joint_correspondence.shape != (k,):
            raise ParameterError("joint correspondence length mismatch")
        if np.any(self.joint_correspondence < 0) or np.any(
            self.joint_correspondence >= character.n_joints
        ):
            raise ParameterError("joint correspondence index out of range")


@dataclass
class HandSubspace:
    name: str
    dof_indices: np.ndarray  # (14,) DoF indices this hand owns
    mean: np.ndarray         # (14,)
    basis: np.ndarray        # (14, 6), orthonormal columns

    def __post_init__(self):
        self.dof_indices = np.asarray(self.dof_indices, dtype=np.int64)
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.basis = np.asarray(self.basis, dtype=np.float64)

    def validate(self) -> None:
        gram = self.basis.T @ self.basis
        if np.abs(gram - np.eye(self.basis.shape[1])).max() > 1e-6:
            raise DataError(f"hand {self.name}: PCA basis columns are not orthonormal")
        if self.mean.shape != (self.basis.shape[0],) or self.dof_indices.shape != (
            self.basis.shape[0],
        ):
            raise DataError(f"hand {self.name}: mean/basis/dof length mismatch")


@dataclass
class HandPcaModel:
    hands: list[HandSubspace]

    def validate(self, character: TemplateCharacter) -> None:
        for h in self.hands:
            h.validate()
            if np.any(h.dof_indices >= character.n_dofs):
                raise DataError(f"hand {h.name}: DoF index out of range")


def fit_hand_pca(corpus: np.ndarray, n_components: int = 6) -> tuple[np.ndarray, np.ndarray]:
    """Plain PCA of a (M, D) pose corpus: center, eigendecompose, keep top k."""
    x = np.asarray(corpus, dtype=np.float64)
    mean = x.mean(axis=0)
    cov = np.cov(x - mean, rowvar=False)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1][:n_components]
    return mean, vecs[:, order]


@dataclass
class IkStage:
    name: str
    iterations: int = 100
    w_temporal: float = 3.0
    w_reg: float = 0.01
    w_doflimit: float = 0.1
    restarts: int = 1  # extra L-BFGS runs from the current point (Hessian reset)


@dataclass
class IkConfig:
    stages: list[IkStage] = field(
        default_factory=lambda: [
            IkStage(STAGE_GLOBAL, 100, 3.0, 0.01, 0.1),
            IkStage(STAGE_BODY, 100, 3.0, 0.01, 0.1),
            IkStage(STAGE_HANDS, 100, 30.0, 0.01, 0.1),
        ]
    )
    body_temporal: bool = True  # second-difference prior on non-hand stages

    def validate(self) -> None:
        for s in self.stages:
            if s.iterations < 1:
                raise ParameterError(f"stage {s.name}: iterations must be >= 1")
            if min(s.w_temporal, s.w_reg, s.w_doflimit) < 0:
                raise ParameterError(f"stage {s.name}: weights must be >= 0")


# --- energy terms (value + gradient wrt the full (T, D) theta stack) -----------

def keypoint_energy(
    character: TemplateCharacter, thetas: np.ndarray, keypoints: KeypointSequence
) -> float:
    return _keypoint_energy_grad(character, thetas, keypoints)[0]


def _subtree_mask(character: TemplateCharacter) -> np.ndarray:
    """(D, J) bool: does DoF d sit on the chain from the root to joint j?"""
    j_count = character.n_joints
    children: list[list[int]] = [[] for _ in range(j_count)]
    for j, p in enumerate(character.joint_parents):
        if p >= 0:
            children[p].append(j)
    mask = np.zeros((character.n_dofs, j_count), dtype=bool)
    for d, spec in enumerate(character.dof_map):
        stack = [spec.joint]
        while stack:
            j = stack.pop()
            mask[d, j] = True
            stack.extend(children[j])
    return mask


def _keypoint_energy_grad(
    character: TemplateCharacter, thetas: np.ndarray, keypoints: KeypointSequence
) -> tuple[float, np.ndarray]:
    fk = forward_kinematics_batch(character, thetas)
    corr = keypoints.joint_correspondence
    p = fk.joint_positions[:, corr]                          # (T, K, 3)
    r = p - keypoints.positions
    dist = np.linalg.norm(r, axis=2)
    energy = float(np.sum(keypoints.confidences * dist))
    safe = np.where(dist > 0.0, dist, 1.0)
    u = keypoints.confidences[:, :, None] * r / safe[:, :, None]
    u[dist == 0.0] = 0.0

    affects = _subtree_mask(character)[:, corr]              # (D, K)
    is_rot = np.array([s.kind == ROTATION for s in character.dof_map])
    diff = p[:, None, :, :] - fk.dof_pivots[:, :, None, :]   # (T, D, K, 3)
    jac = np.where(
        is_rot[None, :, None, None],
        np.cross(fk.dof_axes[:, :, None, :], diff),
        np.broadcast_to(fk.dof_axes[:, :, None, :], diff.shape),
    )
    jac = jac * affects[None, :, :, None]
    grad = np.einsum("tdki,tki->td", jac, u)
    return energy, grad


def second_difference_energy(values: np.ndarray) -> float:
    return _second_difference_grad(values)[0]


def _second_difference_grad(values: np.ndarray) -> tuple[float, np.ndarray]:
    """sum_t ||2 x_t - x_{t-1} - x_{t+1}||_2 over interior frames; (T, C) input."""
    x = np.asarray(values, dtype=np.float64)
    grad = np.zeros_like(x)
    if x.shape[0] < 3:
        return 0.0, grad
    r = 2.0 * x[1:-1] - x[:-2] - x[2:]
    norms = np.linalg.norm(r, axis=1)
    safe = np.where(norms > 0.0, norms, 1.0)
    u = r / safe[:, None]
    u[norms == 0.0] = 0.0
    grad[1:-1] += 2.0 * u
    grad[:-2] -= u
    grad[2:] -= u
    return float(norms.sum()), grad


def e_temporal_hand(eta_sequences: list[np.ndarray]) -> float:
    """Second-difference smoothness of per-hand PCA coefficient tracks."""
    return float(sum(second_difference_energy(e) for e in eta_sequences))


def dof_limit_energy(character: TemplateCharacter, thetas: np.ndarray) -> float:
    return _dof_limit_grad(character, thetas)[0]


def _dof_limit_grad(character: TemplateCharacter, thetas: np.ndarray) -> tuple[float, np.ndarray]:
    lo = character.dof_limits[:, 0]
    hi = character.dof_limits[:, 1]
    over = thetas - hi
    under = lo - thetas
    v = np.maximum(np.maximum(over, under), 0.0)
    grad = np.where(over > 0.0, 1.0, 0.0) - np.where(under > 0.0, 1.0, 0.0)
    return float(v.sum()), grad


def mean_pose_energy(character: TemplateCharacter, thetas: np.ndarray) -> float:
    return _mean_pose_grad(character, thetas)[0]


def _mean_pose_grad(character: TemplateCharacter, thetas: np.ndarray) -> tuple[float, np.ndarray]:
    d = thetas - character.dof_mean
    return float(np.abs(d).sum()), np.sign(d)


# --- solver ---------------------------------------------------------------------

@dataclass
class StageReport:
    name: str
    energy_initial: float
    energy_final: float
    iterations: int


@dataclass
class IkSolution:
    thetas: np.ndarray                 # (T, D)
    eta: dict[str, np.ndarray]         # hand name -> (T, 6)
    stage_reports: list[StageReport]

    def poses(self) -> list[SkeletonPose]:
        return [SkeletonPose(row) for row in self.thetas]


def _dof_groups(character: TemplateCharacter, hand_pca: HandPcaModel | None):
    root_joint = int(np.nonzero(character.joint_parents == -1)[0][0])
    root = np.array([d for d, s in enumerate(character.dof_map) if s.joint == root_joint], dtype=np.int64)
    hand = (
        np.concatenate([h.dof_indices for h in hand_pca.hands])
        if hand_pca and hand_pca.hands
        else np.zeros(0, dtype=np.int64)
    )
    body = np.array(
        [d for d in range(character.n_dofs) if d not in set(root.tolist()) | set(hand.tolist())],
        dtype=np.int64,
    )
    return root, body, hand


def solve_ik(
    character: TemplateCharacter,
    keypoints: KeypointSequence,
    hand_pca: HandPcaModel | None = None,
    config: IkConfig | None = None,
) -> IkSolution:
    """Three-stage energy minimization; returns poses, hand coefficients, and
    the achieved energy per stage. Raises NumericError naming the offending
    term if any energy goes non-finite."""
    config = config or IkConfig()
    config.validate()
    keypoints.validate(character)
    if hand_pca is not None:
        hand_pca.validate(character)
    if keypoints.n_frames < 1:
        raise ParameterError("keypoint sequence is empty")

    t = keypoints.n_frames
    thetas = np.tile(character.dof_mean, (t, 1))
    root, body, _ = _dof_groups(character, hand_pca)
    eta: dict[str, np.ndarray] = {}
    if hand_pca is not None:
        for h in hand_pca.hands:
            eta[h.name] = np.zeros((t, h.basis.shape[1]))

    reports = []
    for stage in config.stages:
        if stage.name == STAGE_GLOBAL:
            active = root
        elif stage.name == STAGE_BODY:
            active = np.concatenate([root, body])
        elif stage.name == STAGE_HANDS:
            if hand_pca is None or not hand_pca.hands:
                continue
            active = None
        else:
            raise ParameterError(f"unknown IK stage {stage.name!r}")

        if active is not None and len(active) == 0:
            continue
        if active is not None:
            thetas, report = _solve_block_stage(character, keypoints, thetas, active, stage, config)
        else:
            thetas, eta, report = _solve_hand_stage(character, keypoints, thetas, hand_pca, eta, stage)
        reports.append(report)
    return IkSolution(thetas, eta, reports)


def _check_finite(value: float, term: str):
    if not np.isfinite(value):
        raise NumericError(f"IK energy term {term} became non-finite")


def _solve_block_stage(character, keypoints, thetas, active, stage, config):
    t = thetas.shape[0]
    base = thetas.copy()

    def objective(x):
        th = base.copy()
        th[:, active] = x.reshape(t, len(active))
        e_data, g_data = _keypoint_energy_grad(character, th, keypoints)
        _check_finite(e_data, "e_data")
        e_lim, g_lim = _dof_limit_grad(character, th)
        e_reg, g_reg = _mean_pose_grad(character, th)
        grad = g_data + stage.w_doflimit * g_lim + stage.w_reg * g_reg
        value = e_data + stage.w_doflimit * e_lim + stage.w_reg * e_reg
        if config.body_temporal:
            e_t, g_t = _second_difference_grad(th[:, active])
            value += stage.w_temporal * e_t
            grad_active = grad[:, active] + stage.w_temporal * g_t
        else:
            grad_active = grad[:, active]
        _check_finite(value, "stage total")
        return value, grad_active.reshape(-1)

    x0 = base[:, active].reshape(-1)
    f0 = objective(x0)[0]
    x, fun, nit = _minimize_stage(objective, x0, stage)
    out = base.copy()
    out[:, active] = x.reshape(t, len(active))
    return out, StageReport(stage.name, f0, fun, nit)


def _minimize_stage(objective, x0, stage: IkStage):
    x = x0
    best_f = objective(x0)[0]
    best_x = x0
    total_it = 0
    for _ in range(max(1, stage.restarts)):
        res = optimize.minimize(
            objective,
            x,
            jac=True,
            method="L-BFGS-B",
            options={"maxiter": stage.iterations, "maxcor": 20, "ftol": 1e-15, "gtol": 1e-12},
        )
        x = res.x
        total_it += int(res.nit)
        if res.fun <= best_f:
            best_f = float(res.fun)
            best_x = res.x
    return best_x, best_f, total_it


def _solve_hand_stage(character, keypoints, thetas, hand_pca, eta, stage):
    t = thetas.shape[0]
    base = thetas.copy()
    hands = hand_pca.hands
    sizes = [h.basis.shape[1] for h in hands]
    splits = np.cumsum([t * s for s in sizes])[:-1]

    def unpack(x):
        chunks = np.split(x, splits)
        return [c.reshape(t, s) for c, s in zip(chunks, sizes)]

    def apply(etas):
        th = base.copy()
        for h, e in zip(hands, etas):
            th[:, h.dof_indices] = h.mean + e @ h.basis.T
        return th

    def objective(x):
        etas = unpack(x)
        th = apply(etas)
        e_data, g_data = _keypoint_energy_grad(character, th, keypoints)
        _check_finite(e_data, "e_data")
        e_lim, g_lim = _dof_limit_grad(character, th)
        e_reg, g_reg = _mean_pose_grad(character, th)
        g_theta = g_data + stage.w_doflimit * g_lim + stage.w_reg * g_reg
        value = e_data + stage.w_doflimit * e_lim + stage.w_reg * e_reg
        grads = []
        for h, e in zip(hands, etas):
            e_t, g_t = _second_difference_grad(e)
            value += stage.w_temporal * e_t
            grads.append(g_theta[:, h.dof_indices] @ h.basis + stage.w_temporal * g_t)
        _check_finite(value, "stage total")
        return value, np.concatenate([g.reshape(-1) for g in grads])

    x0 = np.concatenate([eta[h.name].reshape(-1) for h in hands])
    f0 = objective(x0)[0]
    x, fun, nit = _minimize_stage(objective, x0, stage)
    etas = unpack(x)
    out_eta = {h.name: e for h, e in zip(hands, etas)}
    # hand DoF are exactly mean + basis @ eta by construction
    return apply(etas), out_eta, StageReport(stage.name, f0, fun, nit)


def mean_per_joint_error(
    character: TemplateCharacter, thetas_a: np.ndarray, thetas_b: np.ndarray
) -> float:
    """MP-JPE between two motion sequences (meters)."""
    pa = forward_kinematics_batch(character, thetas_a).joint_positions
    pb = forward_kinematics_batch(character, thetas_b).joint_positions
    return float(np.mean(np.linalg.norm(pa - pb, axis=2)))


# --- JSONL interchange ------------------------------------------------------------

def load_keypoints_jsonl(path: str) -> KeypointSequence:
    """One frame per line: {"t": int, "kp": [[x,y,z],...], "conf": [...]}."""
    frames = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                frames.append(json.loads(line))
    if not frames:
        raise DataError(f"{path}: no keypoint frames")
    frames.sort(key=lambda f: f.get("t", 0))
    kp = np.asarray([f["kp"] for f in frames], dtype=np.float64)
    conf = np.asarray(
        [f.get("conf", [1.0] * kp.shape[1]) for f in frames], dtype=np.float64
    )
    corr = frames[0].get("joints", list(range(kp.shape[1])))
    return KeypointSequence(kp, conf, np.asarray(corr, dtype=np.int64))


def save_motion_jsonl(path: str, thetas: np.ndarray) -> None:
    """One JSON array of DoF values per line."""
    lines = [json.dumps([float(v) for v in row]) for row in np.asarray(thetas)]
    from .util import atomic_write_bytes

    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode())


def load_motion_jsonl(path: str) -> np.ndarray:
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    if not rows:
        raise DataError(f"{path}: no motion frames")
    return np.asarray(rows, dtype=np.float64)


def load_hand_pca(path: str) -> HandPcaModel:
    with open(path) as fh:
        data = json.load(fh)
    hands = [
        HandSubspace(
            h["name"],
            np.asarray(h["dof_indices"], dtype=np.int64),
            np.asarray(h["mean"], dtype=np.float64),
            np.asarray(h["basis"], dtype=np.float64),
        )
        for h in data["hands"]
    ]
    return HandPcaModel(hands)


def save_hand_pca(path: str, model: HandPcaModel) -> None:
    data = {
        "hands": [
            {
                "name": h.name,
                "dof_indices": h.dof_indices.tolist(),
                "mean": h.mean.tolist(),
                "basis": h.basis.tolist(),
            }
            for h in model.hands
        ]
    }
    from .util import atomic_write_bytes

    atomic_write_bytes(path, json.dumps(data).encode())
