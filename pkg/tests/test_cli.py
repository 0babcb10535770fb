import json
from pathlib import Path

import pytest

from bodyshape import clothmodel as cm
from bodyshape.cli import HARD_ERROR, OK, PARTIAL, load_config, main, UsageError

TINY = {
    "fit": {"max_iters": 8, "n_depth": 2},
    "bench": {"image_size": [64, 64], "n_views": 3, "methods": ["J", "J+S", "J+S+DS", "D"], "ks": [1, 2, 3]},
}


@pytest.fixture(scope="module")
def tiny_config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.json"
    path.write_text(json.dumps(TINY))
    return str(path)


@pytest.fixture(scope="module")
def tiny_bench(tmp_path_factory, tiny_config):
    out = tmp_path_factory.mktemp("bench")
    assert main(["gen", "--out", str(out), "--seed", "3", "--config", tiny_config]) == OK
    return out


def scenes(root):
    return sorted(str(p) for p in Path(root).glob("subject_*/view_*/scene.json"))


def test_config_rejects_unknown_keys(tmp_path):
    for doc in ({"fit": {"lamda_j": 1}}, {"bench": {"n_view": 3}}, {"plots": {}}, {"cloth": {"h": 1}}):
        (tmp_path / "c.json").write_text(json.dumps(doc))
        with pytest.raises(UsageError):
            load_config(tmp_path / "c.json")
        assert main(["stats", "x.csv", "--out", str(tmp_path), "--config", str(tmp_path / "c.json")]) == HARD_ERROR


def test_config_defaults():
    cfg = load_config(None)
    assert cfg["bench"]["ks"] == [1, 2, 3, 4, 5, 6, 7]
    assert cfg["fit"]["n_depth"] == 5
    assert len(cfg["cloth"]["vocabulary"]) == 14


def test_gen_default_writes_81_scenes(tmp_path):
    assert main(["gen", "--out", str(tmp_path / "a"), "--seed", "1"]) == OK
    assert len(scenes(tmp_path / "a")) == 81
    truth = json.loads((tmp_path / "a" / "truth.json").read_text())
    assert truth["config"]["fit"]["max_iters"] > 0 and "schema" in truth


def test_gen_is_reproducible(tmp_path, tiny_config, monkeypatch):
    main(["gen", "--out", str(tmp_path / "a"), "--seed", "4", "--config", tiny_config])
    main(["gen", "--out", str(tmp_path / "b"), "--seed", "4", "--config", tiny_config, "--noise-level", "0"])
    monkeypatch.setenv("FTS_SEED", "4")
    main(["gen", "--out", str(tmp_path / "c"), "--config", tiny_config, "--threads", "3"])
    ref = (tmp_path / "a" / "truth.json").read_bytes()
    assert (tmp_path / "b" / "truth.json").read_bytes() == ref
    assert (tmp_path / "c" / "truth.json").read_bytes() == ref
    for name in ("a", "b", "c"):
        assert (tmp_path / name / "subject_8" / "view_2" / "mask.pgm").read_bytes() == \
            (tmp_path / "a" / "subject_8" / "view_2" / "mask.pgm").read_bytes()


def test_gen_rejects_negative_noise(tmp_path):
    assert main(["gen", "--out", str(tmp_path), "--noise-level", "-1"]) == HARD_ERROR


def test_fit_one_scene(tiny_bench, tiny_config, tmp_path):
    out = tmp_path / "fit.json"
    assert main(["fit", scenes(tiny_bench)[0], "--config", tiny_config, "--out", str(out)]) == OK
    doc = json.loads(out.read_text())
    assert len(doc["scenes"]) == 1 and "result" in doc["scenes"][0]
    assert "multi" not in doc
    assert doc["config"]["fit"]["max_iters"] == 8
    assert len(doc["scenes"][0]["result"]["shape"]) == 10


def test_fit_multi_keeps_k(tmp_path, tiny_config):
    cfg = json.loads(Path(tiny_config).read_text())
    cfg["bench"]["n_views"] = 9
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    main(["gen", "--out", str(tmp_path / "b"), "--seed", "2", "--config", str(tmp_path / "c.json")])
    nine = [str(tmp_path / "b" / "subject_0" / f"view_{j}" / "scene.json") for j in range(9)]
    out = tmp_path / "fit.json"
    assert main(["fit", *nine, "--multi", "--k", "5", "--config", tiny_config, "--out", str(out),
                 "--threads", "2"]) == OK
    doc = json.loads(out.read_text())
    assert len(doc["scenes"]) == 9
    assert len(doc["multi"]["kept"]) == 5
    assert main(["fit", *nine, "--multi", "--k", "12", "--config", tiny_config]) == HARD_ERROR


def test_fit_partial_failure(tiny_bench, tiny_config, tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    good = scenes(tiny_bench)[0]
    assert main(["fit", good, str(bad), "--config", tiny_config, "--out", str(tmp_path / "o.json")]) == PARTIAL
    doc = json.loads((tmp_path / "o.json").read_text())
    assert "error" in doc["scenes"][1]
    assert main(["fit", str(bad), "--config", tiny_config]) == HARD_ERROR


def test_fit_oracle_depth(tiny_bench, tiny_config, capsys):
    assert main(["fit", scenes(tiny_bench)[0], "--oracle-depth", "--config", tiny_config]) == OK
    doc = json.loads(capsys.readouterr().out)
    truth = json.loads(Path(scenes(tiny_bench)[0]).read_text())["camera"]["translation"]
    assert doc["scenes"][0]["result"]["camera"]["translation"] == truth


def test_bench_writes_reports(tiny_bench, tiny_config, tmp_path, capsys):
    code = main(["bench", str(tiny_bench), "--out", str(tmp_path / "r1"), "--config", tiny_config])
    printed = capsys.readouterr().out
    checks = [line for line in printed.splitlines() if line.startswith(("PASS", "FAIL"))]
    assert len(checks) == 3  # k=5 and k=7 are not in the tiny grid
    assert code == (OK if all(c.startswith("PASS") for c in checks) else PARTIAL)
    rows = (tmp_path / "r1" / "report.csv").read_text().splitlines()
    assert rows[0] == "method,k,multi_error,single_error,failures"
    assert len(rows) == 1 + 4 * 3
    doc = json.loads((tmp_path / "r1" / "report.json").read_text())
    assert doc["config"]["fit"]["max_iters"] == 8 and doc["schema"]
    main(["bench", str(tiny_bench), "--out", str(tmp_path / "r2"), "--config", tiny_config])
    assert (tmp_path / "r1" / "report.json").read_bytes() == (tmp_path / "r2" / "report.json").read_bytes()


def test_bench_missing_truth(tmp_path):
    assert main(["bench", str(tmp_path), "--out", str(tmp_path / "r")]) == HARD_ERROR


@pytest.fixture(scope="module")
def users_csv(tmp_path_factory):
    path = tmp_path_factory.mktemp("users") / "users.csv"
    cm.write_users_csv(path, cm.synthetic_population(180, seed=11))
    return path


def test_stats_orders_models(users_csv, tmp_path, capsys):
    assert main(["stats", str(users_csv), "--model", "1", "3", "--seed", "5", "--out", str(tmp_path)]) == OK
    doc = json.loads((tmp_path / "stats.json").read_text())
    assert doc["nll"]["3"] < doc["nll"]["1"]
    assert (tmp_path / "curves.csv").exists()
    out = capsys.readouterr().out
    assert "model 1: NLL" in out and "model 3: NLL" in out


def test_stats_threshold_labels(users_csv, tmp_path):
    assert main(["stats", str(users_csv), "--labels", "threshold", "--out", str(tmp_path)]) == OK
    assert set(json.loads((tmp_path / "stats.json").read_text())["nll"]) == {"1", "2", "3"}
    # the synthetic users are unlabeled, so model 2 on given labels has no groups
    assert main(["stats", str(users_csv), "--model", "2", "--out", str(tmp_path / "x")]) == HARD_ERROR


def test_stats_validation(users_csv, tmp_path, capsys):
    assert main(["stats", str(users_csv), "--holdout", "0", "--out", str(tmp_path)]) == HARD_ERROR
    bad = tmp_path / "bad.csv"
    bad.write_text("user_id,group,beta2,post_id,categories\nu1,a,zz,p,Dress\n")
    assert main(["stats", str(bad), "--out", str(tmp_path)]) == HARD_ERROR
    assert "row 2" in capsys.readouterr().err


def test_stats_same_seed_same_bytes(users_csv, tmp_path):
    for name in ("a", "b"):
        main(["stats", str(users_csv), "--seed", "9", "--labels", "threshold", "--out", str(tmp_path / name)])
    for f in ("stats.json", "curves.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_stats_shapes_file(tmp_path):
    users = cm.synthetic_population(40, seed=12)
    shapes = {u.user_id: {"result": {"shape": [0.0, u.beta2] + [0.0] * 8}} for u in users}
    for u in users:
        u.beta2 = None
    cm.write_users_csv(tmp_path / "u.csv", users)
    (tmp_path / "s.json").write_text(json.dumps(shapes))
    assert main(["stats", str(tmp_path / "u.csv"), "--model", "3", "--out", str(tmp_path / "o")]) == HARD_ERROR
    assert main(["stats", str(tmp_path / "u.csv"), "--model", "3", "--shapes", str(tmp_path / "s.json"),
                 "--out", str(tmp_path / "o")]) == OK


def test_usage_errors_exit_1(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["fit"])
    assert exc.value.code == HARD_ERROR
    with pytest.raises(SystemExit) as exc:
        main(["nonsense"])
    assert exc.value.code == HARD_ERROR
    assert main(["fit", "x.json", "--threads", "0"]) == HARD_ERROR
