"""Per-view energy terms with analytic gradients.

A view is parameterized by the shared shape ``beta`` (10,), its pose vector
(54,: root orientation then 17 local rotations) and camera translation (3,).
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import bodymodel as bm
from .errors import MissingJoints
from .projection import DETECTION_TO_MODEL, default_focal, project_with_jacobian
from .silhouette import Capsules2D, SilhouetteTarget, capsule_energy

TERMS = ("joints", "height", "prior", "silhouette")

_NEUTRAL_ROTS = bm.neutral_pose().joint_rots
_KNEES = [bm.JOINT_INDEX["r_knee"], bm.JOINT_INDEX["l_knee"]]
_L_ELBOW = bm.JOINT_INDEX["l_elbow"]
_R_ELBOW = bm.JOINT_INDEX["r_elbow"]


@dataclass(frozen=True)
class FitConfig:
    sigma_gm: float | None = None  # pixels; None means 50 px scaled by width / 640
    lambda_j: float = 300.0
    lambda_s: float = 2000.0
    lambda_h: float = 1e5
    lambda_shape: float = 1.0
    lambda_pose: float = 5.0
    lambda_limit: float = 1.0
    lambda1: float = 1.0
    lambda2: float = 1.0
    pyramid_levels: int = 4
    n_depth: int = 5
    depth_range: float = 1.0
    max_iters: int = 300
    gtol: float = 1e-6
    sharpness: float = 32.0
    union: str = "soft"  # how capsule coverages combine: "soft" (1 - prod(1 - I_c)) or "max"

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name.startswith("lambda") and v < 0:
                raise ValueError(f"{f.name} must be >= 0")
        if self.sigma_gm is not None and self.sigma_gm <= 0:
            raise ValueError("sigma_gm must be positive")
        if self.n_depth < 1 or self.max_iters < 1 or self.pyramid_levels < 1:
            raise ValueError("n_depth, max_iters and pyramid_levels must be >= 1")
        if self.union not in ("soft", "max"):
            raise ValueError("union must be 'soft' or 'max'")
        if not self.sharpness > 0:
            raise ValueError("sharpness must be positive")

    def gm_scale(self, width) -> float:
        return self.sigma_gm if self.sigma_gm is not None else 50.0 * width / 640.0

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d) -> "FitConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown FitConfig keys: {sorted(unknown)}")
        return cls(**d)

    def updated(self, **kw) -> "FitConfig":
        return replace(self, **kw)


@dataclass
class Observation:
    """2D evidence from one photo: 14 detections with confidences and a mask."""

    joints2d: np.ndarray
    confidences: np.ndarray
    mask: np.ndarray | None
    image_size: tuple  # (W, H)
    _target: SilhouetteTarget | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.joints2d = np.asarray(self.joints2d, dtype=float).reshape(14, 2)
        self.confidences = np.asarray(self.confidences, dtype=float).reshape(14)
        if np.any(self.confidences < 0) or np.any(self.confidences > 1):
            raise ValueError("confidences must lie in [0, 1]")
        if np.count_nonzero(self.confidences > 0) < 6:
            raise MissingJoints("at least 6 joints must be detected")
        self.image_size = tuple(int(v) for v in self.image_size)
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool)
            if self.mask.shape != (self.image_size[1], self.image_size[0]):
                raise ValueError(f"mask shape {self.mask.shape} does not match image size {self.image_size}")

    @property
    def focal(self) -> float:
        return default_focal(self.image_size)

    def target(self, levels: int) -> SilhouetteTarget:
        if self._target is None or self._target.levels != levels:
            self._target = SilhouetteTarget.from_mask(self.mask, levels)
        return self._target


def geman_mcclure(e2, sigma):
    """rho(e) = s^2 e^2 / (s^2 + e^2) evaluated on squared residuals."""
    s2 = sigma * sigma
    return s2 * e2 / (s2 + e2)


def prior_energy(beta, pose_vec, config: FitConfig):
    """Shape, pose and joint-limit penalties; returns (value, g_beta, g_pose)."""
    rots = pose_vec[3:].reshape(bm.N_JOINTS, 3)
    dev = rots - _NEUTRAL_ROTS
    g_pose = np.zeros_like(pose_vec)
    g_rots = g_pose[3:].reshape(bm.N_JOINTS, 3)
    value = config.lambda_shape * float(beta @ beta) + config.lambda_pose * float(np.sum(dev * dev))
    g_beta = 2 * config.lambda_shape * beta
    g_rots += 2 * config.lambda_pose * dev
    # hinge on bending the wrong way: knees flex about +x, left elbow about +y, right about -y
    for j, axis, sign in [(_KNEES[0], 0, 1.0), (_KNEES[1], 0, 1.0), (_L_ELBOW, 1, 1.0), (_R_ELBOW, 1, -1.0)]:
        h = max(0.0, -sign * rots[j, axis])
        value += config.lambda_limit * h * h
        g_rots[j, axis] += config.lambda_limit * 2 * h * (-sign)
    return value, g_beta, g_pose


def height_energy(beta, skel=bm.SKELETON):
    dh = bm.height(beta, skel) - skel.template_height
    return dh * dh, 2 * dh * bm.height_grad(beta, skel)


class ViewObjective:
    """Energy of one view as a function of (beta, pose vector, translation)."""

    def __init__(self, obs: Observation, config: FitConfig, skel=bm.SKELETON, joint_subset=None,
                 terms=TERMS):
        self.obs = obs
        self.config = config
        self.skel = skel
        self.terms = tuple(terms)
        W, H = obs.image_size
        self.focal = obs.focal
        self.principal = np.array([W / 2.0, H / 2.0])
        self.sigma = config.gm_scale(W)
        w = obs.confidences.copy()
        if joint_subset is not None:
            keep = np.zeros(14, dtype=bool)
            keep[np.asarray(joint_subset)] = True
            w[~keep] = 0.0
        self.weights = w
        self.target = obs.target(config.pyramid_levels) if "silhouette" in self.terms else None

    def evaluate(self, beta, pose_vec, trans, grad=True):
        """Returns (total, per-term dict, g_beta, g_pose, g_trans)."""
        cfg = self.config
        pose = bm.PoseParams.from_vector(pose_vec)
        kin = bm.Kinematics(beta, pose, self.skel)
        g_joints = np.zeros_like(kin.joints)
        g_radii = np.zeros(len(kin.radii))
        g_beta = np.zeros(bm.N_BETAS)
        g_pose = np.zeros(bm.POSE_DIM)
        g_trans = np.zeros(3)
        parts = {}

        if "joints" in self.terms and cfg.lambda_j > 0:
            pts = kin.joints[DETECTION_TO_MODEL] + trans
            uv, J = project_with_jacobian(pts, self.focal, self.principal)
            r = uv - self.obs.joints2d
            e2 = np.sum(r * r, axis=1)
            s2 = self.sigma ** 2
            parts["joints"] = cfg.lambda_j * float(np.sum(self.weights * geman_mcclure(e2, self.sigma)))
            if grad:
                # d rho / d r = 2 s^4 r / (s^2 + e^2)^2
                coef = cfg.lambda_j * self.weights * 2 * s2 * s2 / (s2 + e2) ** 2
                g_pts = np.einsum("n,ni,nij->nj", coef, r, J)
                np.add.at(g_joints, DETECTION_TO_MODEL, g_pts)
                g_trans += g_pts.sum(axis=0)

        if "height" in self.terms and cfg.lambda_h > 0:
            v, g = height_energy(beta, self.skel)
            parts["height"] = cfg.lambda_h * v
            g_beta += cfg.lambda_h * g

        if "prior" in self.terms:
            v, gb, gp = prior_energy(beta, pose_vec, cfg)
            parts["prior"] = v
            g_beta += gb
            g_pose += gp

        if "silhouette" in self.terms and cfg.lambda_s > 0:
            a_idx, b_idx = self.skel.capsule_joints[:, 0], self.skel.capsule_joints[:, 1]
            ends = np.concatenate([kin.joints[a_idx], kin.joints[b_idx]]) + trans
            uv, J = project_with_jacobian(ends, self.focal, self.principal)
            n = len(a_idx)
            r = np.concatenate([kin.radii, kin.radii])
            z = ends[:, 2]
            r2d = r * self.focal / z
            caps = Capsules2D(uv[:n], uv[n:], r2d[:n], r2d[n:])
            e, gc = capsule_energy(caps, self.target, cfg.sharpness, cfg.lambda1, cfg.lambda2, grad,
                                   cfg.union)
            parts["silhouette"] = cfg.lambda_s * e
            if grad:
                g_uv = cfg.lambda_s * np.concatenate([gc.a, gc.b])
                g_r2d = cfg.lambda_s * np.concatenate([gc.ra, gc.rb])
                g_ends = np.einsum("ni,nij->nj", g_uv, J)
                g_ends[:, 2] -= g_r2d * r * self.focal / (z * z)
                g_r = g_r2d * self.focal / z
                g_radii += g_r[:n] + g_r[n:]
                np.add.at(g_joints, a_idx, g_ends[:n])
                np.add.at(g_joints, b_idx, g_ends[n:])
                g_trans += g_ends.sum(axis=0)

        total = float(sum(parts.values()))
        if not grad:
            return total, parts, None, None, None
        gb, gp = kin.backward(g_joints, g_radii)
        return total, parts, g_beta + gb, g_pose + gp, g_trans
