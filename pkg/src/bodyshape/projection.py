"""Pinhole camera, focal heuristic and depth initialization."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import bodymodel
from .errors import BehindCamera, MissingJoints

NEAR = 0.01  # meters

# Detector joint order used by observations and scene files.
DETECTION_NAMES = (
    "head_top", "neck",
    "r_shoulder", "r_elbow", "r_wrist",
    "l_shoulder", "l_elbow", "l_wrist",
    "r_hip", "r_knee", "r_ankle",
    "l_hip", "l_knee", "l_ankle",
)
DETECTION_TO_MODEL = np.array([bodymodel.JOINT_INDEX[n] for n in DETECTION_NAMES])
DET = {name: i for i, name in enumerate(DETECTION_NAMES)}
# Left/right permutation of detection indices (used to corrupt views).
MIRROR = np.array([DET[n.replace("r_", "#").replace("l_", "r_").replace("#", "l_")]
                   for n in DETECTION_NAMES])
CAMERA_STAGE_JOINTS = np.array([DET[n] for n in ("r_hip", "l_hip", "r_knee", "l_knee", "r_ankle", "l_ankle")])


@dataclass(frozen=True)
class CameraPose:
    """Translation of the body origin in camera coordinates plus intrinsics."""

    translation: np.ndarray
    focal: float
    image_size: tuple  # (W, H)

    def __post_init__(self):
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3))
        if not self.focal > 0:
            raise ValueError("focal must be positive")

    @property
    def principal_point(self):
        W, H = self.image_size
        return np.array([W / 2.0, H / 2.0])

    def with_translation(self, t) -> "CameraPose":
        return replace(self, translation=np.asarray(t, dtype=float))

    def to_dict(self) -> dict:
        return {
            "translation": [float(v) for v in self.translation],
            "focal": float(self.focal),
            "image_size": [int(v) for v in self.image_size],
        }

    @classmethod
    def from_dict(cls, d) -> "CameraPose":
        return cls(np.asarray(d["translation"], dtype=float), float(d["focal"]), tuple(d["image_size"]))


def default_focal(image_size) -> float:
    """Focal length heuristic: twice the image width."""
    return 2.0 * float(image_size[0])


def project(points, camera: CameraPose) -> np.ndarray:
    """Project body-frame points (..., 3) to pixels (..., 2)."""
    pc = np.asarray(points, dtype=float) + camera.translation
    z = pc[..., 2]
    if np.any(z <= NEAR):
        raise BehindCamera(f"point at depth {float(np.min(z)):.3f} m")
    return camera.focal * pc[..., :2] / z[..., None] + camera.principal_point


def project_with_jacobian(points_cam, focal, principal):
    """Projection of camera-frame points and the per-point 2x3 Jacobians."""
    z = points_cam[:, 2]
    if np.any(z <= NEAR):
        raise BehindCamera(f"point at depth {float(np.min(z)):.3f} m")
    inv = focal / z
    uv = points_cam[:, :2] * inv[:, None] + principal
    J = np.zeros((len(z), 2, 3))
    J[:, 0, 0] = inv
    J[:, 1, 1] = inv
    J[:, :, 2] = -points_cam[:, :2] * (inv / z)[:, None]
    return uv, J


def unproject(uv, depth, camera: CameraPose) -> np.ndarray:
    """Body-frame point on the pixel ray at camera depth ``depth``."""
    uv = np.asarray(uv, dtype=float)
    xy = (uv - camera.principal_point) * (np.asarray(depth)[..., None] / camera.focal)
    pc = np.concatenate([xy, np.asarray(depth, dtype=float)[..., None]], axis=-1)
    return pc - camera.translation


def init_depth(beta, joints2d, confidences, focal, skel=bodymodel.SKELETON) -> float:
    """Similar-triangles depth from shoulder-to-ankle lengths in 3D and 2D."""
    joints2d = np.asarray(joints2d, dtype=float)
    conf = np.asarray(confidences, dtype=float)
    need = [DET[n] for n in ("r_shoulder", "l_shoulder", "r_ankle", "l_ankle")]
    if np.any(conf[need] <= 0):
        raise MissingJoints("shoulder and ankle detections are required for depth initialization")
    shoulder = joints2d[need[:2]].mean(axis=0)
    ankle = joints2d[need[2:]].mean(axis=0)
    l2d = float(np.linalg.norm(shoulder - ankle))
    if l2d < 1.0:
        raise MissingJoints(f"shoulder-ankle image length {l2d:.2f} px is degenerate")
    return focal * bodymodel.shoulder_ankle_length(beta, skel) / l2d


def depth_candidates(z0: float, n: int = 5, depth_range: float = 1.0, min_depth: float = 0.5) -> np.ndarray:
    """``n`` evenly spaced depths over z0 +/- depth_range, shifted to stay >= min_depth."""
    zs = z0 + np.linspace(-depth_range, depth_range, n)
    if zs[0] < min_depth:
        zs = zs + (min_depth - zs[0])
    return zs
