"""Small synthetic scenes shared by the fitting tests."""
import numpy as np

from bodyshape import bodymodel as bm
from bodyshape.objective import Observation
from bodyshape.projection import DETECTION_TO_MODEL, CameraPose, project
from bodyshape.silhouette import hard_mask


def render(beta, pose, translation, size=(128, 128), with_mask=True):
    W, H = size
    cam = CameraPose(translation, 2.0 * W, size)
    body = bm.pose_body(np.asarray(beta, float), pose)
    uv = project(body.joints3d[DETECTION_TO_MODEL], cam)
    mask = hard_mask(body, cam) if with_mask else None
    return Observation(uv, np.ones(14), mask, size), cam


def jittered_pose(seed, yaw=0.0, deg=5.0):
    rng = np.random.default_rng(seed)
    p = bm.neutral_pose(yaw)
    return bm.PoseParams(p.root_orient, p.joint_rots + rng.uniform(-1, 1, (17, 3)) * np.deg2rad(deg))
