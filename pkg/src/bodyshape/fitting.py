"""Staged single-view fitting, depth-candidate search and multi-photo fitting."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from . import bodymodel as bm
from .errors import AllCandidatesFailed, BehindCamera, MissingJoints, NoInliers
from .objective import FitConfig, Observation, ViewObjective
from .projection import CAMERA_STAGE_JOINTS, DET, CameraPose, depth_candidates, init_depth

log = logging.getLogger(__name__)

POSE_ROOT = slice(0, 3)


@dataclass
class FitResult:
    shape: np.ndarray
    pose: bm.PoseParams
    camera: CameraPose
    energies: dict
    converged: bool
    depth_candidate_index: int | None = None
    candidate_energies: list = field(default_factory=list)

    @property
    def energy_total(self) -> float:
        return float(sum(self.energies.values()))

    def to_dict(self) -> dict:
        return {
            "shape": [float(v) for v in self.shape],
            "pose": [float(v) for v in self.pose.to_vector()],
            "camera": self.camera.to_dict(),
            "energies": {k: float(v) for k, v in self.energies.items()},
            "energy_total": self.energy_total,
            "converged": bool(self.converged),
            "depth_candidate_index": self.depth_candidate_index,
            "candidate_energies": [None if e is None else float(e) for e in self.candidate_energies],
        }

    @classmethod
    def from_dict(cls, d) -> "FitResult":
        return cls(
            shape=np.asarray(d["shape"], dtype=float),
            pose=bm.PoseParams.from_vector(d["pose"]),
            camera=CameraPose.from_dict(d["camera"]),
            energies=dict(d["energies"]),
            converged=bool(d["converged"]),
            depth_candidate_index=d.get("depth_candidate_index"),
            candidate_energies=list(d.get("candidate_energies", [])),
        )


@dataclass
class MultiFitResult:
    """One shared shape plus per-view poses and cameras for the inlier views."""

    shape: np.ndarray
    poses: list
    cameras: list
    kept: list
    energies: dict
    converged: bool

    @property
    def energy_total(self) -> float:
        return float(sum(self.energies.values()))

    def to_dict(self) -> dict:
        return {
            "shape": [float(v) for v in self.shape],
            "kept": [int(i) for i in self.kept],
            "poses": [[float(v) for v in p.to_vector()] for p in self.poses],
            "cameras": [c.to_dict() for c in self.cameras],
            "energies": {k: float(v) for k, v in self.energies.items()},
            "energy_total": self.energy_total,
            "converged": bool(self.converged),
        }


# ---------------------------------------------------------------------------
# optimizer


class _Problem:
    """Stacks the free blocks of several views sharing one beta into a vector."""

    def __init__(self, objectives, beta, poses, trans, free_beta, pose_free, free_trans):
        self.objectives = objectives
        self.beta = np.array(beta, dtype=float)
        self.poses = [np.array(p, dtype=float) for p in poses]
        self.trans = [np.array(t, dtype=float) for t in trans]
        self.free_beta = free_beta
        self.pose_free = pose_free  # None, or a slice/index array into the pose vector
        self.free_trans = free_trans

    def pack(self):
        parts = [self.beta] if self.free_beta else []
        for p, t in zip(self.poses, self.trans):
            if self.pose_free is not None:
                parts.append(p[self.pose_free])
            if self.free_trans:
                parts.append(t)
        return np.concatenate(parts)

    def bounds(self):
        n = len(self.pack())
        b = [(None, None)] * n
        if self.free_beta:
            b[: bm.N_BETAS] = [(-bm.BETA_BOUND, bm.BETA_BOUND)] * bm.N_BETAS
        return b

    def unpack(self, x):
        i = 0
        beta = self.beta.copy()
        if self.free_beta:
            beta = x[: bm.N_BETAS].copy()
            i = bm.N_BETAS
        poses, trans = [], []
        for p, t in zip(self.poses, self.trans):
            p = p.copy()
            if self.pose_free is not None:
                n = len(p[self.pose_free])
                p[self.pose_free] = x[i:i + n]
                i += n
            if self.free_trans:
                t = x[i:i + 3].copy()
                i += 3
            poses.append(p)
            trans.append(t)
        return beta, poses, trans

    def __call__(self, x):
        beta, poses, trans = self.unpack(x)
        total = 0.0
        g_beta = np.zeros(bm.N_BETAS)
        grads = []
        for obj, p, t in zip(self.objectives, poses, trans):
            f, _, gb, gp, gt = obj.evaluate(beta, p, t)
            total += f
            g_beta += gb
            grads.append((gp, gt))
        parts = [g_beta] if self.free_beta else []
        for gp, gt in grads:
            if self.pose_free is not None:
                parts.append(gp[self.pose_free])
            if self.free_trans:
                parts.append(gt)
        return total, np.concatenate(parts)

    def breakdown(self, beta, poses, trans):
        out = {}
        for obj, p, t in zip(self.objectives, poses, trans):
            _, parts, *_ = obj.evaluate(beta, p, t, grad=False)
            for k, v in parts.items():
                out[k] = out.get(k, 0.0) + v
        return out


def _run(problem: _Problem, config: FitConfig):
    """Quasi-Newton minimization; never returns a point worse than the start."""
    x0 = problem.pack()
    f0, _ = problem(x0)
    res = minimize(problem, x0, jac=True, method="L-BFGS-B", bounds=problem.bounds(),
                   options={"maxiter": config.max_iters, "gtol": config.gtol})
    x, f = res.x, float(res.fun)
    if not np.isfinite(f) or f > f0:
        x, f = x0, f0
    beta, poses, trans = problem.unpack(x)
    return beta, poses, trans, f, bool(res.success)


# ---------------------------------------------------------------------------
# stages


def _initial_translation(obs: Observation, z: float) -> np.ndarray:
    hips = obs.joints2d[[DET["r_hip"], DET["l_hip"]]].mean(axis=0)
    W, H = obs.image_size
    xy = (hips - np.array([W / 2.0, H / 2.0])) * z / obs.focal
    return np.array([xy[0], xy[1], z])


def camera_stage(obs: Observation, config: FitConfig, z: float, beta=None, fixed_translation=None):
    """Fit translation and root orientation to the hip, knee and ankle detections.

    Shape is held at ``beta`` (the template by default) and all other joints
    stay in the neutral pose. With ``fixed_translation`` only the root
    orientation is fitted. Returns (translation, pose vector, energy).
    """
    if np.any(obs.confidences[CAMERA_STAGE_JOINTS] <= 0):
        raise MissingJoints("camera stage needs both hips, knees and ankles")
    beta = np.zeros(bm.N_BETAS) if beta is None else np.asarray(beta, dtype=float)
    pose0 = bm.neutral_pose().to_vector()
    trans0 = _initial_translation(obs, z) if fixed_translation is None else np.asarray(fixed_translation, float)
    obj = ViewObjective(obs, config, joint_subset=CAMERA_STAGE_JOINTS, terms=("joints",))
    prob = _Problem([obj], beta, [pose0], [trans0], free_beta=False, pose_free=POSE_ROOT,
                    free_trans=fixed_translation is None)
    _, poses, trans, f, _ = _run(prob, config)
    return trans[0], poses[0], f


def _stages(obs, config, beta, pose, trans, use_silhouette, free_trans):
    """Joints-only stage over (beta, pose), then optional silhouette refinement."""
    obj = ViewObjective(obs, config, terms=("joints", "height", "prior"))
    prob = _Problem([obj], beta, [pose], [trans], True, slice(None), False)
    beta, poses, transs, f, conv = _run(prob, config)
    if use_silhouette:
        obj = ViewObjective(obs, config)
        prob = _Problem([obj], beta, poses, transs, True, slice(None), free_trans)
        beta, poses, transs, f, conv = _run(prob, config)
    return beta, poses[0], transs[0], prob.breakdown(beta, poses, transs), conv


def fit_single(obs: Observation, config: FitConfig = FitConfig(), depth_search: bool = True,
               use_silhouette: bool = True, true_translation=None) -> FitResult:
    """Staged fit of one view; keeps the depth candidate with the lowest final energy.

    ``depth_search=False`` uses only the similar-triangles depth. A
    ``true_translation`` holds the camera fixed at that value throughout.
    """
    if use_silhouette and obs.mask is not None:
        obs.target(config.pyramid_levels)  # raises EmptyMask early
    use_silhouette = use_silhouette and obs.mask is not None
    focal = obs.focal
    if true_translation is not None:
        depths = [float(true_translation[2])]
    else:
        z0 = init_depth(np.zeros(bm.N_BETAS), obs.joints2d, obs.confidences, focal)
        depths = list(depth_candidates(z0, config.n_depth, config.depth_range)) if depth_search else [z0]

    best, energies = None, []
    for idx, z in enumerate(depths):
        try:
            trans, pose, _ = camera_stage(obs, config, z, fixed_translation=true_translation)
            beta, pose, trans, parts, conv = _stages(
                obs, config, np.zeros(bm.N_BETAS), pose, trans, use_silhouette,
                free_trans=true_translation is None)
        except BehindCamera as exc:
            log.debug("depth candidate %d (%.2f m) failed: %s", idx, z, exc)
            energies.append(None)
            continue
        total = float(sum(parts.values()))
        energies.append(total)
        if best is None or total < best[0]:
            best = (total, idx, beta, pose, trans, parts, conv)
    if best is None:
        raise AllCandidatesFailed(f"all {len(depths)} depth candidates failed")
    _, idx, beta, pose, trans, parts, conv = best
    camera = CameraPose(trans, focal, obs.image_size)
    return FitResult(beta, bm.PoseParams.from_vector(pose), camera, parts, conv, idx, energies)


def refine(obs: Observation, config: FitConfig, pose, translation, beta=None, free_translation: bool = False,
           use_silhouette: bool = True) -> FitResult:
    """Minimize the full single-view energy from a given pose and camera.

    Shape starts at ``beta`` (template by default). The translation is held
    fixed unless ``free_translation`` is set.
    """
    beta = np.zeros(bm.N_BETAS) if beta is None else np.asarray(beta, dtype=float)
    pose_vec = pose.to_vector() if isinstance(pose, bm.PoseParams) else np.asarray(pose, dtype=float)
    terms = ("joints", "height", "prior", "silhouette") if use_silhouette and obs.mask is not None \
        else ("joints", "height", "prior")
    prob = _Problem([ViewObjective(obs, config, terms=terms)], beta, [pose_vec],
                    [np.asarray(translation, dtype=float)], True, slice(None), free_translation)
    beta, poses, trans, _, conv = _run(prob, config)
    camera = CameraPose(trans[0], obs.focal, obs.image_size)
    return FitResult(beta, bm.PoseParams.from_vector(poses[0]), camera, prob.breakdown(beta, poses, trans), conv)


def reject_outliers(shapes, k: int) -> list:
    """Indices of the k shapes closest to the component-wise median (ties -> lower index)."""
    shapes = np.asarray(shapes, dtype=float)
    if len(shapes) == 0:
        raise ValueError("no shapes given")
    if not 1 <= k <= len(shapes):
        raise ValueError(f"k={k} must lie in [1, {len(shapes)}]")
    med = np.median(shapes, axis=0)
    dist = np.linalg.norm(shapes - med, axis=1)
    order = np.lexsort((np.arange(len(shapes)), dist))
    return sorted(int(i) for i in order[:k])


def fit_multi(observations, single_results, config: FitConfig = FitConfig(), k: int | None = None,
              use_silhouette: bool = True, true_translations=None) -> MultiFitResult:
    """Joint fit of one shape and per-view poses/cameras over the k inlier views.

    ``true_translations`` (one per observation) holds every camera fixed.
    """
    if len(observations) != len(single_results):
        raise ValueError("one single-view result per observation is required")
    if not observations:
        raise NoInliers("no views to fit")
    k = len(observations) if k is None else k
    kept = reject_outliers([r.shape for r in single_results], k)
    if not kept:
        raise NoInliers("no view survived outlier rejection")
    beta0 = np.median([single_results[i].shape for i in kept], axis=0)
    use_silhouette = use_silhouette and all(observations[i].mask is not None for i in kept)
    terms = ("joints", "height", "prior", "silhouette") if use_silhouette else ("joints", "height", "prior")
    objectives = [ViewObjective(observations[i], config, terms=terms) for i in kept]
    poses = [single_results[i].pose.to_vector() for i in kept]
    if true_translations is not None:
        trans = [np.asarray(true_translations[i], dtype=float) for i in kept]
    else:
        trans = [single_results[i].camera.translation for i in kept]
    prob = _Problem(objectives, beta0, poses, trans, True, slice(None), true_translations is None)
    beta, poses, trans, _, conv = _run(prob, config)
    cameras = [CameraPose(t, observations[i].focal, observations[i].image_size) for t, i in zip(trans, kept)]
    return MultiFitResult(beta, [bm.PoseParams.from_vector(p) for p in poses], cameras, kept,
                          prob.breakdown(beta, poses, trans), conv)


def fit_multi_oracle_depth(observations, true_cameras, config: FitConfig = FitConfig(), k: int | None = None,
                           single_results=None) -> MultiFitResult:
    """Multi-photo fit with every camera translation fixed at ground truth."""
    trans = [c.translation if isinstance(c, CameraPose) else np.asarray(c, float) for c in true_cameras]
    if single_results is None:
        single_results = [fit_single(o, config, true_translation=t) for o, t in zip(observations, trans)]
    return fit_multi(observations, single_results, config, k, true_translations=trans)
