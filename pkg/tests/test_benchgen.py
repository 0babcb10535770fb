import csv
import json

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from bodyshape import benchgen as bg
from bodyshape import bodymodel as bm
from bodyshape.objective import FitConfig
from bodyshape.projection import MIRROR


def test_mu_grid_and_azimuths():
    assert bg.MU_GRID == (-2.0, -1.5, -1.0, -0.5, 0.0, 0.5, 1.0, 1.5, 2.0)
    assert np.allclose(bg.azimuths(), [-80, -60, -40, -20, 0, 20, 40, 60, 80])


def test_subjects_are_deterministic():
    a = bg.make_subjects(5, n_views=2, image_size=(64, 64))
    b = bg.make_subjects(5, n_views=2, image_size=(64, 64))
    for sa, sb in zip(a, b):
        assert np.array_equal(sa.shape, sb.shape)
        for va, vb in zip(sa.views, sb.views):
            assert np.array_equal(va.observation.mask, vb.observation.mask)
            assert np.array_equal(va.observation.joints2d, vb.observation.joints2d)
    c = bg.make_subjects(6, n_views=2, image_size=(64, 64))
    assert not np.array_equal([s.shape for s in a], [s.shape for s in c])


def test_zero_variance_puts_beta2_on_grid():
    subjects = bg.make_subjects(1, variance=0.0, n_views=1, image_size=(64, 64))
    assert len(subjects) == 9
    for s, mu in zip(subjects, bg.MU_GRID):
        assert s.shape[1] == mu
        assert not np.delete(s.shape, 1).any()


def test_full_benchmark_views():
    subjects = bg.make_subjects(0)
    assert len(subjects) == 9 and all(len(s.views) == 9 for s in subjects)
    for s in subjects:
        assert abs(s.shape[1]) <= bm.BETA_BOUND
        for v in s.views:
            assert v.observation.mask.any()
            assert np.all(v.observation.confidences == 1)
            assert v.camera.translation[2] == bg.CAMERA_DEPTH


def test_frontal_view_is_symmetric():
    views = bg.make_views(np.r_[0, 1.0, np.zeros(8)], seed=3, jitter_deg=0.0)
    front = [v for v in views if v.azimuth == 0][0]
    uv = front.observation.joints2d
    cx = front.camera.image_size[0] / 2
    assert np.all(np.abs((uv[:, 0] - cx) + (uv[MIRROR, 0] - cx)) < 1.0)
    assert np.all(np.abs(uv[:, 1] - uv[MIRROR, 1]) < 1.0)
    mask = front.observation.mask
    assert np.array_equal(mask, mask[:, ::-1])


def test_pose_jitter_is_bounded():
    rng = np.random.default_rng(0)
    base = bm.neutral_pose(0.3)
    for _ in range(20):
        pose = bg._jittered_pose(np.rad2deg(0.3), rng, 5.0)
        assert np.array_equal(pose.root_orient, base.root_orient)
        for a, b in zip(pose.joint_rots, base.joint_rots):
            delta = Rotation.from_rotvec(b).inv() * Rotation.from_rotvec(a)
            assert delta.magnitude() <= np.deg2rad(5.0) + 1e-12


def test_noise_level_zero_is_identity():
    views = bg.make_views(np.zeros(10), 0, n=2, image_size=(64, 64))
    assert bg.add_noise(views, 0, seed=1) == views
    with pytest.raises(ValueError):
        bg.add_noise(views, -1, seed=1)


def test_noise_is_deterministic_and_scaled():
    views = bg.make_views(np.zeros(10), 0, n=40, image_size=(64, 64), jitter_deg=0)
    a = bg.add_noise(views, 1, seed=7)
    b = bg.add_noise(views, 1, seed=7)
    for va, vb in zip(a, b):
        assert np.array_equal(va.observation.joints2d, vb.observation.joints2d)
        assert np.array_equal(va.observation.mask, vb.observation.mask)
    delta = np.concatenate([va.observation.joints2d - v.observation.joints2d for va, v in zip(a, views)]).ravel()
    assert delta.size >= 1000
    assert abs(np.std(delta) - 2.0) < 0.2 * 2.0
    for va, v in zip(a, views):
        assert np.all(va.observation.confidences <= 1) and np.all(va.observation.confidences > 0)
        changed = np.count_nonzero(va.observation.mask != v.observation.mask)
        assert changed > 0


def test_shape_error():
    assert bg.shape_error(np.ones(10), np.ones(10)) == 0.0
    assert bg.shape_error(np.r_[3.0, 4.0, np.zeros(8)], np.zeros(10)) == 5.0


def test_benchmark_directory_roundtrip(tmp_path):
    subjects = bg.make_subjects(2, n_views=2, image_size=(64, 64))
    bg.write_benchmark(tmp_path, subjects, {"seed": 2})
    assert (tmp_path / "subject_3" / "view_1" / "scene.json").exists()
    assert (tmp_path / "subject_3" / "view_1" / "mask.pgm").exists()
    back, meta = bg.load_benchmark(tmp_path)
    assert meta["seed"] == 2
    for s, t in zip(subjects, back):
        assert np.array_equal(s.shape, t.shape)
        for v, w in zip(s.views, t.views):
            assert np.array_equal(v.observation.mask, w.observation.mask)
            assert np.array_equal(v.observation.joints2d, w.observation.joints2d)
            assert np.array_equal(v.pose.to_vector(), w.pose.to_vector())
            assert np.array_equal(v.camera.translation, w.camera.translation)
    with pytest.raises(FileNotFoundError):
        bg.load_benchmark(tmp_path / "subject_0")


@pytest.fixture(scope="module")
def tiny_report():
    subjects = bg.make_subjects(4, n_views=3, image_size=(64, 64))[:2]
    return bg.run_ablation(subjects, FitConfig(max_iters=15), methods=("J", "D"), ks=(1, 2))


def test_tiny_ablation_report(tiny_report, tmp_path):
    r = tiny_report
    assert len(r.cells) == 4
    assert r.failures("J") == 0 and r.failures("D") == 0
    for m in ("J", "D"):
        assert r.single_error(m) >= 0 and r.multi_error(m, 2) >= 0
        assert len(r.view_curve(m)) == 3
    r.write(tmp_path)
    rows = list(csv.DictReader(open(tmp_path / "report.csv")))
    assert [(row["method"], row["k"]) for row in rows] == [("J", "1"), ("J", "2"), ("D", "1"), ("D", "2")]
    doc = json.loads((tmp_path / "report.json").read_text())
    assert doc["summary"]["J"]["multi"]["2"] == pytest.approx(r.multi_error("J", 2))
    assert bg.BenchReport.from_dict(doc).to_dict() == doc


def test_ablation_threads_give_same_report(tiny_report):
    subjects = bg.make_subjects(4, n_views=3, image_size=(64, 64))[:2]
    again = bg.run_ablation(subjects, FitConfig(max_iters=15), methods=("J", "D"), ks=(1, 2), threads=2)
    assert again.to_dict() == tiny_report.to_dict()


def _fake_report(single, multi):
    cells = []
    for m, err in single.items():
        cells.append({"subject": 0, "method": m, "single": [{"error": err, "shape": [], "depth_index": 0}],
                      "multi": {str(k): {"error": multi[m][k], "shape": [], "kept": []} for k in multi[m]}})
    return bg.BenchReport(tuple(single), tuple(range(1, 8)), cells, [0.0], {})


def test_ordering_checks():
    ks = range(1, 8)
    good = _fake_report({"J+S": 1.0, "J+S+DS": 0.9, "D": 0.8},
                        {"J+S": {k: 1.0 for k in ks}, "J+S+DS": {k: 0.85 for k in ks},
                         "D": {k: 0.8 for k in ks}})
    assert all(p for _, p, _ in bg.ordering_checks(good))
    assert len(bg.ordering_checks(good)) == 6
    bad = _fake_report({"J+S": 1.0, "J+S+DS": 0.97, "D": 1.2},
                       {"J+S": {k: 1.0 for k in ks}, "J+S+DS": {k: 0.96 for k in ks},
                        "D": {k: 1.2 for k in ks}})
    names = {n: p for n, p, _ in bg.ordering_checks(bad)}
    assert not names["depth search beats fixed depth by >= 5%"]
    assert not names["multi-photo k=5 beats single view by >= 3%"]
    assert not names["true depth within 0.05 of estimated depth at k=1"]
