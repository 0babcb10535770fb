"""Articulated capsule body with a 10-dimensional linear shape space.

The body frame shares its axes with the camera: x points to image right,
y points down and z points away from the camera. A body with identity root
orientation faces the camera (its front looks along -z), so its right side
sits at negative x.

Bone lengths and capsule radii are linear in the shape coefficients, with
bases in meters. Column 1 of the length basis is proportional to the template
so it scales every bone, column 2 of the radius basis likewise scales every
radius (girth), and the remaining columns add up to 2 cm per unit to the
lengths or radii of one body region each.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

N_BETAS = 10
N_JOINTS = 17
BETA_BOUND = 5.0
MIN_SIZE = 0.01  # floor for bone lengths and radii, meters

TEMPLATE_HEIGHT = 1.70
LENGTH_SCALE = 0.05  # per unit beta_1
GIRTH_SCALE = -0.15  # per unit beta_2; negative beta_2 is heavier
REGION_STEP = 0.02  # meters per unit of the regional length columns
RADIUS_STEP = 0.015  # meters per unit of the regional radius columns

JOINT_NAMES = (
    "pelvis", "spine", "chest", "neck", "head_top",
    "r_hip", "r_knee", "r_ankle",
    "l_hip", "l_knee", "l_ankle",
    "r_shoulder", "r_elbow", "r_wrist",
    "l_shoulder", "l_elbow", "l_wrist",
)
PARENTS = (-1, 0, 1, 2, 3, 0, 5, 6, 0, 8, 9, 2, 11, 12, 2, 14, 15)
JOINT_INDEX = {name: i for i, name in enumerate(JOINT_NAMES)}

# Row 0 of the length tables is the ankle-to-sole drop (the pelvis has no
# incoming bone); row j > 0 is the bone parent(j) -> j.
_REST_OFFSETS = np.array([
    [0.0, 0.07, 0.0],     # sole below ankle
    [0.0, -0.12, 0.0],    # pelvis -> spine
    [0.0, -0.20, 0.0],    # spine -> chest
    [0.0, -0.15, 0.0],    # chest -> neck
    [0.0, -0.26, 0.0],    # neck -> head_top
    [-0.09, 0.06, 0.0],   # pelvis -> r_hip
    [0.0, 0.42, 0.0],     # thigh
    [0.0, 0.42, 0.0],     # shin
    [0.09, 0.06, 0.0],    # pelvis -> l_hip
    [0.0, 0.42, 0.0],
    [0.0, 0.42, 0.0],
    [-0.16, -0.10, 0.0],  # chest -> r_shoulder
    [-0.28, 0.0, 0.0],    # upper arm
    [-0.25, 0.0, 0.0],    # forearm
    [0.16, -0.10, 0.0],
    [0.28, 0.0, 0.0],
    [0.25, 0.0, 0.0],
])

CAPSULE_NAMES = (
    "pelvis", "abdomen", "chest", "shoulders", "neck", "head",
    "r_thigh", "r_shin", "l_thigh", "l_shin",
    "r_upper_arm", "r_forearm", "l_upper_arm", "l_forearm",
)
CAPSULE_JOINTS = np.array([
    (5, 8), (0, 1), (1, 2), (11, 14), (2, 3), (3, 4),
    (5, 6), (6, 7), (8, 9), (9, 10),
    (11, 12), (12, 13), (14, 15), (15, 16),
])
_RADIUS_TEMPLATE = np.array([
    0.095, 0.12, 0.13, 0.065, 0.055, 0.095,
    0.075, 0.052, 0.075, 0.052,
    0.045, 0.036, 0.045, 0.036,
])

# Joints summed to get the rest-pose height: head chain up, right leg down.
_HEIGHT_ROWS = (1, 2, 3, 4, 5, 6, 7, 0)


def _length_basis() -> np.ndarray:
    # columns 3-10 each touch their own body region so no two of them cancel
    B = np.zeros((N_JOINTS, N_BETAS))
    B[:, 0] = LENGTH_SCALE * np.linalg.norm(_REST_OFFSETS, axis=1)
    B[[0, 6, 7, 9, 10], 2] = REGION_STEP  # leg length
    B[[12, 13, 15, 16], 3] = REGION_STEP  # arm length
    B[[1, 2, 3], 4] = REGION_STEP  # torso length
    B[[11, 14], 5] = REGION_STEP  # shoulder width
    B[4, 6] = REGION_STEP  # head length
    B[[5, 8], 7] = REGION_STEP  # hip width
    return B


def _radius_basis() -> np.ndarray:
    B = np.zeros((len(CAPSULE_NAMES), N_BETAS))
    B[:, 1] = GIRTH_SCALE * _RADIUS_TEMPLATE
    B[5, 6] = RADIUS_STEP  # head
    B[0, 7] = RADIUS_STEP  # pelvis
    B[[6, 7, 8, 9], 8] = RADIUS_STEP  # legs
    B[[10, 11, 12, 13], 9] = RADIUS_STEP  # arms
    return B


@dataclass(frozen=True)
class Skeleton:
    """Template constants of the capsule body."""

    joint_names: tuple = JOINT_NAMES
    parents: tuple = PARENTS
    rest_dirs: np.ndarray = field(default=None)
    bone_template: np.ndarray = field(default=None)
    length_basis: np.ndarray = field(default_factory=_length_basis)
    capsule_names: tuple = CAPSULE_NAMES
    capsule_joints: np.ndarray = field(default_factory=lambda: CAPSULE_JOINTS.copy())
    radius_template: np.ndarray = field(default_factory=lambda: _RADIUS_TEMPLATE.copy())
    radius_basis: np.ndarray = field(default_factory=_radius_basis)
    template_height: float = TEMPLATE_HEIGHT

    def __post_init__(self):
        if self.bone_template is None:
            object.__setattr__(self, "bone_template", np.linalg.norm(_REST_OFFSETS, axis=1))
        if self.rest_dirs is None:
            object.__setattr__(self, "rest_dirs", _REST_OFFSETS / np.linalg.norm(_REST_OFFSETS, axis=1)[:, None])
        for p, j in zip(self.parents, range(len(self.parents))):
            if j == 0:
                assert p == -1
            else:
                assert 0 <= p < j, "parents must precede children"

    def to_json(self) -> str:
        doc = {
            "joint_names": list(self.joint_names),
            "parents": list(self.parents),
            "rest_dirs": self.rest_dirs.tolist(),
            "bone_template": self.bone_template.tolist(),
            "length_basis": self.length_basis.tolist(),
            "capsule_names": list(self.capsule_names),
            "capsule_joints": self.capsule_joints.tolist(),
            "radius_template": self.radius_template.tolist(),
            "radius_basis": self.radius_basis.tolist(),
            "template_height": self.template_height,
        }
        return json.dumps(doc, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "Skeleton":
        doc = json.loads(text)
        return cls(
            joint_names=tuple(doc["joint_names"]),
            parents=tuple(doc["parents"]),
            rest_dirs=np.asarray(doc["rest_dirs"], dtype=float),
            bone_template=np.asarray(doc["bone_template"], dtype=float),
            length_basis=np.asarray(doc["length_basis"], dtype=float),
            capsule_names=tuple(doc["capsule_names"]),
            capsule_joints=np.asarray(doc["capsule_joints"], dtype=int),
            radius_template=np.asarray(doc["radius_template"], dtype=float),
            radius_basis=np.asarray(doc["radius_basis"], dtype=float),
            template_height=float(doc["template_height"]),
        )


SKELETON = Skeleton()


@dataclass(frozen=True)
class PoseParams:
    """Root orientation plus one local axis-angle rotation per joint."""

    root_orient: np.ndarray
    joint_rots: np.ndarray

    @classmethod
    def identity(cls) -> "PoseParams":
        return cls(np.zeros(3), np.zeros((N_JOINTS, 3)))

    @classmethod
    def from_vector(cls, vec) -> "PoseParams":
        vec = np.asarray(vec, dtype=float).reshape(N_JOINTS + 1, 3)
        return cls(vec[0].copy(), vec[1:].copy())

    def to_vector(self) -> np.ndarray:
        return np.concatenate([np.ravel(self.root_orient), np.ravel(self.joint_rots)])


POSE_DIM = 3 * (N_JOINTS + 1)


def neutral_pose(yaw: float = 0.0) -> PoseParams:
    """Relaxed standing pose: arms lowered, elbows and knees slightly flexed."""
    rots = np.zeros((N_JOINTS, 3))
    rots[JOINT_INDEX["r_shoulder"], 2] = -np.deg2rad(72.0)
    rots[JOINT_INDEX["l_shoulder"], 2] = np.deg2rad(72.0)
    rots[JOINT_INDEX["r_elbow"], 1] = -np.deg2rad(10.0)
    rots[JOINT_INDEX["l_elbow"], 1] = np.deg2rad(10.0)
    rots[JOINT_INDEX["r_knee"], 0] = np.deg2rad(3.0)
    rots[JOINT_INDEX["l_knee"], 0] = np.deg2rad(3.0)
    return PoseParams(np.array([0.0, yaw, 0.0]), rots)


@dataclass(frozen=True)
class PosedBody:
    joints3d: np.ndarray  # (17, 3)
    capsules: list  # [(endpoint_a, endpoint_b, radius)]


# ---------------------------------------------------------------------------
# rotations


def _skew(v):
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def _rot_coeffs(theta2):
    """sin(t)/t, (1-cos t)/t^2, (t-sin t)/t^3 with series near zero."""
    if theta2 < 1e-8:
        return 1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0
    t = np.sqrt(theta2)
    s, c = np.sin(t), np.cos(t)
    return s / t, (1.0 - c) / theta2, (t - s) / (theta2 * t)


def rodrigues(w) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    a, b, _ = _rot_coeffs(float(w @ w))
    K = _skew(w)
    return np.eye(3) + a * K + b * (K @ K)


def left_jacobian(w) -> np.ndarray:
    """J with R(w + dw) ~= exp([J dw]x) R(w)."""
    w = np.asarray(w, dtype=float)
    _, b, c = _rot_coeffs(float(w @ w))
    K = _skew(w)
    return np.eye(3) + b * K + c * (K @ K)


def canonical_axis_angle(w) -> np.ndarray:
    """Equivalent axis-angle with magnitude in [0, pi]."""
    w = np.asarray(w, dtype=float)
    t = np.linalg.norm(w)
    if t <= np.pi:
        return w.copy()
    axis = w / t
    t = np.mod(t, 2 * np.pi)
    if t > np.pi:
        t, axis = 2 * np.pi - t, -axis
    return axis * t


# ---------------------------------------------------------------------------
# shape


def check_beta(beta) -> np.ndarray:
    beta = np.asarray(beta, dtype=float)
    if beta.shape != (N_BETAS,):
        raise ValueError(f"beta must have shape ({N_BETAS},), got {beta.shape}")
    if not np.all(np.isfinite(beta)):
        raise ValueError("beta has non-finite entries")
    return beta


def bone_lengths(beta, skel: Skeleton = SKELETON) -> np.ndarray:
    return np.maximum(skel.bone_template + skel.length_basis @ beta, MIN_SIZE)


def radii(beta, skel: Skeleton = SKELETON) -> np.ndarray:
    return np.maximum(skel.radius_template + skel.radius_basis @ beta, MIN_SIZE)


def _length_jacobian(beta, skel):
    J = skel.length_basis.copy()
    J[skel.bone_template + skel.length_basis @ beta <= MIN_SIZE] = 0.0
    return J


def _radius_jacobian(beta, skel):
    J = skel.radius_basis.copy()
    J[skel.radius_template + skel.radius_basis @ beta <= MIN_SIZE] = 0.0
    return J


def height(beta, skel: Skeleton = SKELETON) -> float:
    """Head-top to sole distance of the unposed body (radii excluded)."""
    L = bone_lengths(np.asarray(beta, dtype=float), skel)
    rows = list(_HEIGHT_ROWS)
    return float(np.sum(L[rows] * np.abs(skel.rest_dirs[rows, 1])))


def height_grad(beta, skel: Skeleton = SKELETON) -> np.ndarray:
    rows = list(_HEIGHT_ROWS)
    J = _length_jacobian(np.asarray(beta, dtype=float), skel)
    return np.abs(skel.rest_dirs[rows, 1]) @ J[rows]


# ---------------------------------------------------------------------------
# kinematics


class Kinematics:
    """Forward kinematics with hand-derived reverse-mode gradients.

    ``backward`` takes dE/d(joints3d) and dE/d(radii) and returns the
    gradient with respect to beta and the flattened pose vector
    (root orientation first, then the 17 local rotations).
    """

    def __init__(self, beta, pose: PoseParams, skel: Skeleton = SKELETON):
        self.skel = skel
        self.beta = np.asarray(beta, dtype=float)
        self.pose = pose
        n = len(skel.parents)
        self.lengths = bone_lengths(self.beta, skel)
        self.radii = radii(self.beta, skel)
        offsets = self.lengths[:, None] * skel.rest_dirs
        R_root = rodrigues(pose.root_orient)
        local = [rodrigues(w) for w in pose.joint_rots]
        G = np.empty((n, 3, 3))
        p = np.zeros((n, 3))
        G[0] = R_root @ local[0]
        for j in range(1, n):
            par = skel.parents[j]
            p[j] = p[par] + G[par] @ offsets[j]
            G[j] = G[par] @ local[j]
        self.R_root = R_root
        self.G = G
        self.joints = p

    def capsules(self):
        a, b = self.skel.capsule_joints[:, 0], self.skel.capsule_joints[:, 1]
        return self.joints[a], self.joints[b], self.radii

    def backward(self, g_joints, g_radii=None):
        skel = self.skel
        n = len(skel.parents)
        g_joints = np.asarray(g_joints, dtype=float)
        # subtree sums of g and of p x g
        S = g_joints.copy()
        M = np.cross(self.joints, g_joints)
        for j in range(n - 1, 0, -1):
            par = skel.parents[j]
            S[par] += S[j]
            M[par] += M[j]

        g_len = np.zeros(n)
        for j in range(1, n):
            par = skel.parents[j]
            g_len[j] = skel.rest_dirs[j] @ (self.G[par].T @ S[j])
        g_beta = g_len @ _length_jacobian(self.beta, skel)
        if g_radii is not None:
            g_beta = g_beta + np.asarray(g_radii) @ _radius_jacobian(self.beta, skel)

        g_pose = np.zeros((n + 1, 3))
        torque = M - np.cross(self.joints, S)
        g_pose[0] = left_jacobian(self.pose.root_orient).T @ torque[0]
        g_pose[1] = (self.R_root @ left_jacobian(self.pose.joint_rots[0])).T @ torque[0]
        for j in range(1, n):
            par = skel.parents[j]
            g_pose[j + 1] = (self.G[par] @ left_jacobian(self.pose.joint_rots[j])).T @ torque[j]
        return g_beta, g_pose.ravel()


def joints3d(beta, pose: PoseParams, skel: Skeleton = SKELETON) -> np.ndarray:
    return Kinematics(beta, pose, skel).joints


def pose_body(beta, pose: PoseParams, skel: Skeleton = SKELETON) -> PosedBody:
    kin = Kinematics(beta, pose, skel)
    a, b, r = kin.capsules()
    return PosedBody(kin.joints, [(a[i], b[i], float(r[i])) for i in range(len(r))])


def shoulder_ankle_length(beta=None, skel: Skeleton = SKELETON) -> float:
    """Rest-pose 3D shoulder-to-ankle distance averaged over both sides."""
    beta = np.zeros(N_BETAS) if beta is None else np.asarray(beta, dtype=float)
    p = joints3d(beta, PoseParams.identity(), skel)
    J = JOINT_INDEX
    right = np.linalg.norm(p[J["r_shoulder"]] - p[J["r_ankle"]])
    left = np.linalg.norm(p[J["l_shoulder"]] - p[J["l_ankle"]])
    return 0.5 * (right + left)
