"""Synthetic multi-view benchmark and the ablation harness.

Nine subjects differ only in the girth coefficient beta_2 ~ N(mu_i, 1) with
mu_i on -2..2 in steps of 0.5. Each subject is rendered from nine root yaws
spread over [-80, 80] degrees at 4 m, in a jittered neutral pose.
"""
from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.spatial.transform import Rotation

from . import bodymodel as bm
from .errors import BodyShapeError
from .fitting import fit_multi, fit_single
from .objective import FitConfig, Observation
from .projection import DETECTION_TO_MODEL, CameraPose, default_focal, project
from .scene import SCHEMA, read_scene, write_json, write_scene
from .silhouette import hard_mask

log = logging.getLogger(__name__)

MU_GRID = tuple(np.round(np.arange(-2.0, 2.0 + 1e-9, 0.5), 10))
N_VIEWS = 9
AZIMUTH_RANGE = 80.0  # degrees
CAMERA_DEPTH = 4.0
IMAGE_SIZE = (256, 256)
POSE_JITTER_DEG = 5.0
# Vertical offset placing the template's mid-height (between head top and
# soles) on the optical axis.
CAMERA_Y = -0.12

METHODS = ("J", "J+S", "J+S+DS", "D")
METHOD_LABELS = {
    "J": "joints only, single fixed depth",
    "J+S": "joints + silhouette, single fixed depth",
    "J+S+DS": "joints + silhouette + depth search",
    "D": "joints + silhouette, true camera depth",
}
KS = tuple(range(1, 8))


@dataclass
class BenchView:
    view_id: int
    azimuth: float  # degrees
    pose: bm.PoseParams
    camera: CameraPose
    observation: Observation


@dataclass
class BenchSubject:
    subject_id: int
    shape: np.ndarray
    views: list = field(default_factory=list)


def azimuths(n: int = N_VIEWS) -> np.ndarray:
    return np.linspace(-AZIMUTH_RANGE, AZIMUTH_RANGE, n)


def _jittered_pose(yaw_deg: float, rng, jitter_deg: float) -> bm.PoseParams:
    """Neutral pose with every joint rotated by a random rotation of at most ``jitter_deg``."""
    base = bm.neutral_pose(np.deg2rad(yaw_deg))
    rots = base.joint_rots.copy()
    for j in range(bm.N_JOINTS):
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        angle = np.deg2rad(jitter_deg) * rng.random()
        r = Rotation.from_rotvec(rots[j]) * Rotation.from_rotvec(angle * axis)
        rots[j] = r.as_rotvec()
    return bm.PoseParams(base.root_orient, rots)


def render_view(shape, pose: bm.PoseParams, camera: CameraPose) -> Observation:
    """Exact joints (confidence 1) and hard mask of a posed body."""
    body = bm.pose_body(shape, pose)
    joints2d = project(body.joints3d[DETECTION_TO_MODEL], camera)
    return Observation(joints2d, np.ones(len(DETECTION_TO_MODEL)), hard_mask(body, camera), camera.image_size)


def make_views(shape, seed: int, n: int = N_VIEWS, image_size=IMAGE_SIZE,
               jitter_deg: float = POSE_JITTER_DEG) -> list:
    rng = np.random.default_rng(seed)
    camera = CameraPose([0.0, CAMERA_Y, CAMERA_DEPTH], default_focal(image_size), tuple(image_size))
    views = []
    for j, az in enumerate(azimuths(n)):
        pose = _jittered_pose(float(az), rng, jitter_deg)
        views.append(BenchView(j, float(az), pose, camera, render_view(shape, pose, camera)))
    return views


def _make_views_args(args):
    return make_views(*args)


def make_subjects(seed: int, variance: float = 1.0, n_views: int = N_VIEWS, image_size=IMAGE_SIZE,
                  jitter_deg: float = POSE_JITTER_DEG, threads: int = 1) -> list:
    """Nine subjects with beta_2 ~ N(mu_i, variance), clamped to the beta bounds."""
    rng = np.random.default_rng(seed)
    draws = rng.normal(0.0, 1.0, len(MU_GRID))
    shapes, jobs = [], []
    for i, mu in enumerate(MU_GRID):
        shape = np.zeros(bm.N_BETAS)
        shape[1] = float(np.clip(mu + np.sqrt(variance) * draws[i], -bm.BETA_BOUND, bm.BETA_BOUND))
        shapes.append(shape)
        jobs.append((shape, int(rng.integers(2**31)), n_views, tuple(image_size), jitter_deg))
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            views = list(pool.map(_make_views_args, jobs))
    else:
        views = [make_views(*j) for j in jobs]
    return [BenchSubject(i, shape, v) for i, (shape, v) in enumerate(zip(shapes, views))]


def _disk(radius: int) -> np.ndarray:
    y, x = np.mgrid[-radius:radius + 1, -radius:radius + 1]
    return x * x + y * y <= radius * radius


def add_noise(views, level: float, seed: int) -> list:
    """Jitter joints by N(0, (2 level)^2) px, lower confidences with the jitter,
    and erode or dilate each mask by ``round(level)`` pixels."""
    if level < 0:
        raise ValueError("noise level must be >= 0")
    if level == 0:
        return list(views)
    rng = np.random.default_rng(seed)
    out = []
    for v in views:
        obs = v.observation
        delta = rng.normal(0.0, 2.0 * level, obs.joints2d.shape)
        conf = obs.confidences * np.exp(-np.sum(delta ** 2, axis=1) / (2 * 10.0 ** 2))
        mask = obs.mask
        radius = int(round(level))
        if mask is not None and radius > 0:
            grow = rng.random() < 0.5
            if not grow:
                eroded = ndimage.binary_erosion(mask, _disk(radius))
                mask = eroded if eroded.any() else ndimage.binary_dilation(mask, _disk(radius))
            else:
                mask = ndimage.binary_dilation(mask, _disk(radius))
        noisy = Observation(obs.joints2d + delta, conf, mask, obs.image_size)
        out.append(BenchView(v.view_id, v.azimuth, v.pose, v.camera, noisy))
    return out


# ---------------------------------------------------------------------------
# ablation


def shape_error(estimate, truth) -> float:
    return float(np.linalg.norm(np.asarray(estimate) - np.asarray(truth)))


def _fit_view(method, view, config):
    obs = view.observation
    if method == "J":
        return fit_single(obs, config, depth_search=False, use_silhouette=False)
    if method == "J+S":
        return fit_single(obs, config, depth_search=False)
    if method == "J+S+DS":
        return fit_single(obs, config, depth_search=True)
    if method == "D":
        return fit_single(obs, config, true_translation=view.camera.translation)
    raise ValueError(f"unknown method {method!r}")


def run_cell(subject: BenchSubject, method: str, config: FitConfig, ks=KS) -> dict:
    """Single-view fits of every view and multi-photo fits for each k, for one subject and method."""
    singles, single_err = [], []
    for view in subject.views:
        try:
            res = _fit_view(method, view, config)
            singles.append(res)
            single_err.append(shape_error(res.shape, subject.shape))
        except BodyShapeError as exc:
            log.warning("subject %d view %d %s failed: %s", subject.subject_id, view.view_id, method, exc)
            singles.append(None)
            single_err.append(None)
    ok = [i for i, r in enumerate(singles) if r is not None]
    obs = [subject.views[i].observation for i in ok]
    results = [singles[i] for i in ok]
    trans = [subject.views[i].camera.translation for i in ok] if method == "D" else None
    multi = {}
    for k in ks:
        if k > len(ok):
            multi[k] = None
            continue
        try:
            m = fit_multi(obs, results, config, k, use_silhouette=method != "J", true_translations=trans)
            multi[k] = {"error": shape_error(m.shape, subject.shape), "shape": [float(v) for v in m.shape],
                        "kept": [ok[i] for i in m.kept]}
        except BodyShapeError as exc:
            log.warning("subject %d %s k=%d failed: %s", subject.subject_id, method, k, exc)
            multi[k] = None
    return {
        "subject": subject.subject_id,
        "method": method,
        "single": [None if r is None else {"error": e, "shape": [float(v) for v in r.shape],
                                           "depth_index": r.depth_candidate_index}
                   for r, e in zip(singles, single_err)],
        "multi": {str(k): v for k, v in multi.items()},
    }


def _run_cell_args(args):
    return run_cell(*args)


@dataclass
class BenchReport:
    methods: tuple
    ks: tuple
    cells: list  # run_cell outputs, ordered by (subject, method)
    azimuths: list
    config: dict

    def single_error(self, method: str) -> float:
        errs = [s["error"] for c in self.cells if c["method"] == method for s in c["single"] if s is not None]
        return float(np.mean(errs)) if errs else float("nan")

    def multi_error(self, method: str, k: int) -> float:
        errs = [c["multi"][str(k)]["error"] for c in self.cells
                if c["method"] == method and c["multi"].get(str(k)) is not None]
        return float(np.mean(errs)) if errs else float("nan")

    def failures(self, method: str) -> int:
        n = 0
        for c in self.cells:
            if c["method"] == method:
                n += sum(s is None for s in c["single"]) + sum(v is None for v in c["multi"].values())
        return n

    def view_curve(self, method: str) -> list:
        """Mean single-view error per azimuth."""
        out = []
        for j, az in enumerate(self.azimuths):
            errs = [c["single"][j]["error"] for c in self.cells
                    if c["method"] == method and c["single"][j] is not None]
            out.append({"azimuth": az, "error": float(np.mean(errs)) if errs else None})
        return out

    def summary(self) -> dict:
        return {
            m: {"label": METHOD_LABELS[m], "single": self.single_error(m),
                "multi": {str(k): self.multi_error(m, k) for k in self.ks},
                "failures": self.failures(m)}
            for m in self.methods
        }

    def to_dict(self) -> dict:
        return {
            "schema": SCHEMA.replace("scene", "report"),
            "config": self.config,
            "methods": list(self.methods),
            "ks": list(self.ks),
            "summary": self.summary(),
            "view_curves": {m: self.view_curve(m) for m in self.methods},
            "checks": [{"name": n, "passed": p, "detail": d} for n, p, d in ordering_checks(self)],
            "cells": self.cells,
        }

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_json(out / "report.json", self.to_dict())
        with open(out / "report.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["method", "k", "multi_error", "single_error", "failures"])
            for m in self.methods:
                for k in self.ks:
                    w.writerow([m, k, f"{self.multi_error(m, k):.10g}", f"{self.single_error(m):.10g}",
                                self.failures(m)])

    @classmethod
    def from_dict(cls, d) -> "BenchReport":
        return cls(tuple(d["methods"]), tuple(d["ks"]), d["cells"],
                   [v["azimuth"] for v in next(iter(d["view_curves"].values()))], d["config"])


def run_ablation(subjects, config: FitConfig = FitConfig(), methods=METHODS, ks=KS, threads: int = 1,
                 extra_config: dict | None = None) -> BenchReport:
    """Fit every (subject, method) cell; results are assembled in a fixed order."""
    jobs = [(s, m, config, tuple(ks)) for s in subjects for m in methods]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            cells = list(pool.map(_run_cell_args, jobs))
    else:
        cells = [run_cell(*j) for j in jobs]
    az = [float(v.azimuth) for v in subjects[0].views] if subjects else []
    cfg = {"fit": config.to_dict(), **(extra_config or {})}
    return BenchReport(tuple(methods), tuple(ks), cells, az, cfg)


def ordering_checks(report: BenchReport) -> list:
    """(name, passed, detail) for the ordering relations expected between methods on one benchmark."""
    checks = []
    if {"J+S", "J+S+DS"} <= set(report.methods):
        a, b = report.single_error("J+S+DS"), report.single_error("J+S")
        checks.append(("depth search beats fixed depth by >= 5%", bool(a <= 0.95 * b),
                       f"single-view error {a:.4f} vs {b:.4f}"))
    if "J+S+DS" in report.methods and {5, 7} <= set(report.ks):
        s, m5, m7 = report.single_error("J+S+DS"), report.multi_error("J+S+DS", 5), report.multi_error("J+S+DS", 7)
        checks.append(("multi-photo k=5 beats single view by >= 3%", bool(m5 <= 0.97 * s),
                       f"k=5 error {m5:.4f} vs single {s:.4f}"))
        checks.append(("k=5 error <= k=7 error + 0.02", bool(m5 <= m7 + 0.02), f"{m5:.4f} vs {m7:.4f}"))
    if {"D", "J+S+DS"} <= set(report.methods):
        for k in (1, 3, 5):
            if k in report.ks:
                d, e = report.multi_error("D", k), report.multi_error("J+S+DS", k)
                checks.append((f"true depth within 0.05 of estimated depth at k={k}", bool(d <= e + 0.05),
                               f"{d:.4f} vs {e:.4f}"))
    return checks


# ---------------------------------------------------------------------------
# benchmark directories


def write_benchmark(out_dir, subjects, meta: dict) -> None:
    """subject_<i>/view_<j>/{scene.json, mask.pgm} plus truth.json with shapes, poses and cameras."""
    out = Path(out_dir)
    truth = {"schema": SCHEMA.replace("scene", "truth"), **meta, "subjects": []}
    for s in subjects:
        entry = {"subject_id": s.subject_id, "shape": [float(v) for v in s.shape], "views": []}
        for v in s.views:
            vdir = out / f"subject_{s.subject_id}" / f"view_{v.view_id}"
            vdir.mkdir(parents=True, exist_ok=True)
            write_scene(vdir / "scene.json", v.observation, v.camera)
            entry["views"].append({
                "view_id": v.view_id, "azimuth": v.azimuth,
                "scene": f"subject_{s.subject_id}/view_{v.view_id}/scene.json",
                "pose": [float(x) for x in v.pose.to_vector()], "camera": v.camera.to_dict(),
            })
        truth["subjects"].append(entry)
    write_json(out / "truth.json", truth)


def load_benchmark(bench_dir):
    """Subjects read back from a benchmark directory; returns (subjects, truth metadata)."""
    root = Path(bench_dir)
    truth_path = root / "truth.json"
    if not truth_path.exists():
        raise FileNotFoundError(f"{truth_path} not found")
    truth = json.loads(truth_path.read_text())
    subjects = []
    for entry in truth["subjects"]:
        views = []
        for v in entry["views"]:
            obs, cam = read_scene(root / v["scene"])
            cam = cam or CameraPose.from_dict(v["camera"])
            views.append(BenchView(int(v["view_id"]), float(v["azimuth"]), bm.PoseParams.from_vector(v["pose"]),
                                   cam, obs))
        subjects.append(BenchSubject(int(entry["subject_id"]), np.asarray(entry["shape"], dtype=float), views))
    meta = {k: v for k, v in truth.items() if k != "subjects"}
    return subjects, meta

