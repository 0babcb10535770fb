"""Scene files: one photo's detections, mask reference and optional camera truth.

Layout of ``scene.json``::

    {"schema": "...", "image": {"w": W, "h": H},
     "joints": [[u, v, conf], ...14 rows in DETECTION_NAMES order],
     "mask": "mask.pgm",
     "camera": {"translation": [...], "focal": f, "image_size": [W, H]}}

``mask`` is relative to the scene file and ``camera`` is optional.
"""
from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .errors import EmptyMask
from .objective import Observation
from .projection import DETECTION_NAMES, CameraPose
from .silhouette import read_mask, write_mask

SCHEMA = "bodyshape-scene/1"


class SceneError(ValueError):
    """A scene file is malformed."""


def dumps(obj) -> str:
    """Deterministic JSON text used for every file this package writes."""
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def write_json(path, obj) -> None:
    Path(path).write_text(dumps(obj))


def write_scene(path, obs: Observation, camera: CameraPose | None = None, mask_name: str = "mask.pgm") -> None:
    path = Path(path)
    W, H = obs.image_size
    doc = {
        "schema": SCHEMA,
        "image": {"w": W, "h": H},
        "joints": [[float(u), float(v), float(c)] for (u, v), c in zip(obs.joints2d, obs.confidences)],
        "joint_names": list(DETECTION_NAMES),
        "mask": mask_name if obs.mask is not None else None,
    }
    if camera is not None:
        doc["camera"] = camera.to_dict()
    if obs.mask is not None:
        write_mask(path.parent / mask_name, obs.mask)
    write_json(path, doc)


def read_scene(path):
    """Returns (Observation, CameraPose or None)."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SceneError(f"{path}: invalid JSON: {exc}") from None
    try:
        W, H = int(doc["image"]["w"]), int(doc["image"]["h"])
        joints = np.asarray(doc["joints"], dtype=float)
    except (KeyError, TypeError, ValueError) as exc:
        raise SceneError(f"{path}: missing or malformed field: {exc}") from None
    if joints.shape != (len(DETECTION_NAMES), 3):
        raise SceneError(f"{path}: 'joints' must be {len(DETECTION_NAMES)} rows of [u, v, conf]")
    mask = None
    if doc.get("mask"):
        mask_path = path.parent / doc["mask"]
        if not mask_path.exists():
            raise FileNotFoundError(f"{path}: mask file {os.fspath(mask_path)} not found")
        mask = read_mask(mask_path)
        if mask.shape != (H, W):
            raise SceneError(f"{path}: mask is {mask.shape[1]}x{mask.shape[0]}, image is {W}x{H}")
        if not mask.any():
            raise EmptyMask(f"{mask_path}: mask is empty")
    try:
        obs = Observation(joints[:, :2], joints[:, 2], mask, (W, H))
    except ValueError as exc:
        raise SceneError(f"{path}: {exc}") from None
    camera = CameraPose.from_dict(doc["camera"]) if doc.get("camera") else None
    return obs, camera
