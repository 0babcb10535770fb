import json

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from bodyshape import bodymodel as bm


def random_pose(rng, scale=0.6):
    return bm.PoseParams(rng.normal(0, scale, 3), rng.normal(0, scale, (bm.N_JOINTS, 3)))


def chain_fold(beta, pose, skel=bm.SKELETON):
    """Re-derive every joint by walking its ancestor chain from the root."""
    lengths = bm.bone_lengths(beta, skel)
    out = np.zeros((bm.N_JOINTS, 3))
    for j in range(bm.N_JOINTS):
        chain = []
        k = j
        while k > 0:
            chain.append(k)
            k = skel.parents[k]
        chain.reverse()
        pos = np.zeros(3)
        for k in chain:
            ancestors = []
            a = skel.parents[k]
            while a >= 0:
                ancestors.append(a)
                a = skel.parents[a]
            R = Rotation.from_rotvec(pose.root_orient)
            for a in reversed(ancestors):
                R = R * Rotation.from_rotvec(pose.joint_rots[a])
            pos = pos + R.apply(lengths[k] * skel.rest_dirs[k])
        out[j] = pos
    return out


def test_rest_skeleton_has_pelvis_at_origin():
    p = bm.joints3d(np.zeros(10), bm.PoseParams.identity())
    assert np.array_equal(p[0], np.zeros(3))
    offsets = bm.bone_lengths(np.zeros(10))[:, None] * bm.SKELETON.rest_dirs
    for j in range(1, bm.N_JOINTS):
        assert np.allclose(p[j] - p[bm.PARENTS[j]], offsets[j], atol=1e-15)


def test_yaw_by_pi_negates_x_and_z():
    rest = bm.joints3d(np.zeros(10), bm.PoseParams.identity())
    pose = bm.PoseParams(np.array([0.0, np.pi, 0.0]), np.zeros((17, 3)))
    turned = bm.joints3d(np.zeros(10), pose)
    assert np.allclose(turned[:, 0], -rest[:, 0], atol=1e-12)
    assert np.allclose(turned[:, 2], -rest[:, 2], atol=1e-12)
    assert np.allclose(turned[:, 1], rest[:, 1], atol=1e-12)


def test_beta1_scales_bone_lengths_uniformly():
    beta = np.zeros(10)
    beta[0] = 1.3
    p = bm.joints3d(beta, bm.PoseParams.identity())
    skel = bm.SKELETON
    # the scale column is proportional to the template, row by row
    assert np.allclose(skel.length_basis[:, 0], bm.LENGTH_SCALE * skel.bone_template, atol=1e-15)
    for j in range(1, bm.N_JOINTS):
        measured = np.linalg.norm(p[j] - p[skel.parents[j]])
        assert measured == pytest.approx(skel.bone_template[j] * (1 + 1.3 * bm.LENGTH_SCALE), abs=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_kinematic_consistency(seed):
    rng = np.random.default_rng(seed)
    beta = rng.uniform(-3, 3, 10)
    pose = random_pose(rng)
    assert np.allclose(bm.joints3d(beta, pose), chain_fold(beta, pose), atol=1e-9)


def test_identity_pose_capsules_follow_rest_bones():
    beta = np.zeros(10)
    body = bm.pose_body(beta, bm.PoseParams.identity())
    rest = bm.joints3d(beta, bm.PoseParams.identity())
    assert np.array_equal(body.joints3d, rest)
    for (a, b, _), (ia, ib) in zip(body.capsules, bm.CAPSULE_JOINTS):
        assert np.array_equal(a, rest[ia])
        assert np.array_equal(b, rest[ib])


def test_radii_do_not_depend_on_pose():
    rng = np.random.default_rng(3)
    beta = rng.uniform(-2, 2, 10)
    r1 = [c[2] for c in bm.pose_body(beta, random_pose(rng)).capsules]
    r2 = [c[2] for c in bm.pose_body(beta, random_pose(rng)).capsules]
    assert r1 == r2


def test_beta2_scales_radii_only():
    beta = np.zeros(10)
    beta[1] = -1.5
    body = bm.pose_body(beta, bm.PoseParams.identity())
    expected = bm.SKELETON.radius_template * (1 + beta[1] * bm.GIRTH_SCALE)
    assert np.allclose([c[2] for c in body.capsules], expected, atol=1e-15)
    assert np.array_equal(bm.bone_lengths(beta), bm.bone_lengths(np.zeros(10)))


def test_template_height():
    assert bm.height(np.zeros(10)) == pytest.approx(1.70, abs=1e-12)


def test_height_from_rest_chain():
    beta = np.zeros(10)
    beta[0] = 0.5
    assert bm.height(beta) == pytest.approx(1.7425, abs=1e-12)
    # oracle: vertical extent of the rest-pose joints plus the sole drop
    p = bm.joints3d(beta, bm.PoseParams.identity())
    sole = bm.bone_lengths(beta)[0]
    extent = p[bm.JOINT_INDEX["r_ankle"], 1] + sole - p[bm.JOINT_INDEX["head_top"], 1]
    assert bm.height(beta) == pytest.approx(extent, abs=1e-12)


def test_girth_leaves_height_unchanged():
    for b2 in (-5, -1, 2.5, 5):
        beta = np.zeros(10)
        beta[1] = b2
        assert bm.height(beta) == pytest.approx(1.70, abs=1e-12)


def test_basis_separability_by_finite_differences():
    rng = np.random.default_rng(0)
    beta = rng.uniform(-1, 1, 10)
    e = np.zeros(10)
    e[1] = 1e-6
    dh = (bm.height(beta + e) - bm.height(beta - e)) / 2e-6
    assert abs(dh) < 1e-6
    e = np.zeros(10)
    e[0] = 1e-6
    dr = (bm.radii(beta + e) - bm.radii(beta - e)) / 2e-6
    assert np.max(np.abs(dr)) < 1e-6


def test_regional_columns_are_small():
    skel = bm.SKELETON
    assert np.max(np.abs(skel.length_basis[:, 2:])) <= 0.02
    assert np.max(np.abs(skel.radius_basis[:, 2:])) <= 0.02
    assert np.max(np.abs(skel.length_basis[:, 1])) == 0
    assert np.max(np.abs(skel.radius_basis[:, 0])) == 0


def test_sizes_stay_positive_at_bounds():
    for corner in (-5, 5):
        for i in range(10):
            beta = np.zeros(10)
            beta[i] = corner
            assert np.all(bm.bone_lengths(beta)[1:] >= bm.MIN_SIZE)
            assert np.all(bm.radii(beta) >= bm.MIN_SIZE)
    assert np.all(bm.radii(np.full(10, 5.0)) >= bm.MIN_SIZE)


def test_parents_form_tree():
    for j, p in enumerate(bm.PARENTS):
        assert (j == 0 and p == -1) or 0 <= p < j


def test_skeleton_json_roundtrip():
    text = bm.SKELETON.to_json()
    doc = json.loads(text)
    assert len(doc["joint_names"]) == 17
    assert doc["template_height"] == 1.70
    back = bm.Skeleton.from_json(text)
    rng = np.random.default_rng(1)
    beta, pose = rng.uniform(-1, 1, 10), random_pose(rng)
    assert np.array_equal(bm.joints3d(beta, pose, back), bm.joints3d(beta, pose))


def test_rodrigues_matches_scipy():
    rng = np.random.default_rng(2)
    for _ in range(20):
        w = rng.normal(0, 1.5, 3)
        assert np.allclose(bm.rodrigues(w), Rotation.from_rotvec(w).as_matrix(), atol=1e-12)
    assert np.allclose(bm.rodrigues(np.zeros(3)), np.eye(3))


def test_left_jacobian_by_finite_differences():
    rng = np.random.default_rng(4)
    w, dw = rng.normal(0, 1, 3), rng.normal(0, 1, 3) * 1e-6
    lhs = bm.rodrigues(w + dw)
    rhs = bm.rodrigues(bm.left_jacobian(w) @ dw) @ bm.rodrigues(w)
    assert np.allclose(lhs, rhs, atol=1e-11)


def test_canonical_axis_angle():
    w = np.array([0.0, 0.0, 1.5 * np.pi])
    c = bm.canonical_axis_angle(w)
    assert np.linalg.norm(c) <= np.pi + 1e-12
    assert np.allclose(bm.rodrigues(c), bm.rodrigues(w), atol=1e-12)


def test_check_beta_rejects_bad_input():
    with pytest.raises(ValueError):
        bm.check_beta(np.zeros(9))
    with pytest.raises(ValueError):
        bm.check_beta(np.r_[np.nan, np.zeros(9)])


def test_backward_matches_finite_differences():
    rng = np.random.default_rng(5)
    beta, pose = rng.uniform(-2, 2, 10), random_pose(rng)
    Wj, Wr = rng.normal(size=(17, 3)), rng.normal(size=14)

    def f(b, pv):
        kin = bm.Kinematics(b, bm.PoseParams.from_vector(pv))
        return float(np.sum(Wj * kin.joints) + Wr @ kin.radii)

    pv = pose.to_vector()
    gb, gp = bm.Kinematics(beta, pose).backward(Wj, Wr)
    h = 1e-6
    fd_b = [(f(beta + h * e, pv) - f(beta - h * e, pv)) / (2 * h) for e in np.eye(10)]
    fd_p = [(f(beta, pv + h * e) - f(beta, pv - h * e)) / (2 * h) for e in np.eye(len(pv))]
    assert np.allclose(gb, fd_b, atol=1e-7)
    assert np.allclose(gp, fd_p, atol=1e-7)


def test_shoulder_ankle_length_hand_summed():
    L = bm.bone_lengths(np.zeros(10))
    d = bm.SKELETON.rest_dirs * L[:, None]
    # shoulder -> chest -> spine -> pelvis -> hip -> knee -> ankle, right side
    path = -d[11] - d[2] - d[1] + d[5] + d[6] + d[7]
    assert bm.shoulder_ankle_length() == pytest.approx(np.linalg.norm(path), abs=1e-12)
