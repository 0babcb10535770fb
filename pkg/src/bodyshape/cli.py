"""Command-line entry point: ``bodyshape {gen,fit,bench,stats}``.

Exit codes: 0 success, 1 hard error (bad input, validation), 2 partial
failure (some scenes failed, or benchmark ordering checks did not hold).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path


from . import benchgen, clothmodel
from .errors import BodyShapeError
from .fitting import FitResult, fit_multi, fit_single
from .objective import FitConfig
from .scene import SCHEMA, SceneError, read_scene, write_json

log = logging.getLogger("bodyshape")

OK, HARD_ERROR, PARTIAL = 0, 1, 2

BENCH_DEFAULTS = {
    "image_size": list(benchgen.IMAGE_SIZE),
    "variance": 1.0,
    "n_views": benchgen.N_VIEWS,
    "jitter_deg": benchgen.POSE_JITTER_DEG,
    "methods": list(benchgen.METHODS),
    "ks": list(benchgen.KS),
}
CLOTH_DEFAULTS = {
    "bandwidth": None,
    "vocabulary": list(clothmodel.DEFAULT_CATEGORIES),
    "threshold": 0.0,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(HARD_ERROR, f"{self.prog}: error: {message}\n")


def load_config(path) -> dict:
    """Effective configuration: defaults overridden by the sections of a JSON file.

    The file may hold ``fit``, ``bench`` and ``cloth`` objects; any other key,
    in any section, is rejected.
    """
    doc = {}
    if path:
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from None
        if not isinstance(doc, dict):
            raise UsageError("config file must hold a JSON object")
    unknown = set(doc) - {"fit", "bench", "cloth"}
    if unknown:
        raise UsageError(f"unknown config sections: {sorted(unknown)}")
    try:
        fit = FitConfig.from_dict(doc.get("fit", {}))
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    out = {"fit": fit.to_dict()}
    for name, defaults in (("bench", BENCH_DEFAULTS), ("cloth", CLOTH_DEFAULTS)):
        section = doc.get(name, {})
        bad = set(section) - set(defaults)
        if bad:
            raise UsageError(f"unknown {name} config keys: {sorted(bad)}")
        out[name] = {**defaults, **section}
    return out


def _seed(value) -> int:
    if value is not None:
        return int(value)
    env = os.environ.get("FTS_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"FTS_SEED={env!r} is not an integer") from None


# ---------------------------------------------------------------------------
# gen


def cmd_gen(args) -> int:
    cfg = load_config(args.config)
    seed = _seed(args.seed)
    if args.noise_level < 0:
        raise UsageError("--noise-level must be >= 0")
    b = cfg["bench"]
    subjects = benchgen.make_subjects(seed, variance=b["variance"], n_views=b["n_views"],
                                      image_size=tuple(b["image_size"]), jitter_deg=b["jitter_deg"],
                                      threads=args.threads)
    if args.noise_level > 0:
        for s in subjects:
            s.views = benchgen.add_noise(s.views, args.noise_level, seed * 1000 + s.subject_id + 1)
    meta = {"seed": seed, "noise_level": float(args.noise_level), "config": cfg}
    benchgen.write_benchmark(args.out, subjects, meta)
    print(f"wrote {len(subjects)} subjects x {b['n_views']} views to {args.out}")
    return OK


# ---------------------------------------------------------------------------
# fit


def _fit_one(job):
    path, config, oracle = job
    try:
        obs, cam = read_scene(path)
        if oracle and cam is None:
            raise SceneError(f"{path}: --oracle-depth needs a camera entry")
        res = fit_single(obs, config, true_translation=cam.translation if oracle else None)
        return {"scene": str(path), "result": res.to_dict()}
    except (BodyShapeError, ValueError, OSError) as exc:
        return {"scene": str(path), "error": f"{type(exc).__name__}: {exc}"}


def _map(fn, jobs, threads):
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, jobs))
    return [fn(j) for j in jobs]


def cmd_fit(args) -> int:
    cfg = load_config(args.config)
    config = FitConfig.from_dict(cfg["fit"])
    k = args.k
    if k is not None and not args.multi:
        raise UsageError("--k requires --multi")
    if args.multi and k is not None and not 1 <= k <= len(args.scenes):
        raise UsageError(f"--k {k} must lie in [1, {len(args.scenes)}] for {len(args.scenes)} scenes")
    singles = _map(_fit_one, [(p, config, args.oracle_depth) for p in args.scenes], args.threads)
    out = {"schema": SCHEMA.replace("scene", "fit"), "config": cfg, "oracle_depth": bool(args.oracle_depth),
           "scenes": singles}
    failed = [s for s in singles if "error" in s]
    if args.multi:
        good = [i for i, s in enumerate(singles) if "result" in s]
        kk = len(good) if k is None else k
        if kk > len(good):
            out["multi"] = {"error": f"only {len(good)} scenes fitted, k={kk}"}
            failed.append(out["multi"])
        else:
            loaded = [read_scene(args.scenes[i]) for i in good]
            results = [FitResult.from_dict(singles[i]["result"]) for i in good]
            trans = [c.translation for _, c in loaded] if args.oracle_depth else None
            try:
                m = fit_multi([o for o, _ in loaded], results, config, kk, true_translations=trans)
                d = m.to_dict()
                d["kept"] = [good[i] for i in m.kept]
                out["multi"] = d
            except BodyShapeError as exc:
                out["multi"] = {"error": f"{type(exc).__name__}: {exc}"}
                failed.append(out["multi"])
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        write_json(args.out, out)
    else:
        sys.stdout.write(json.dumps(out, indent=2, sort_keys=True) + "\n")
    for s in singles:
        if "error" in s:
            print(f"failed: {s['scene']}: {s['error']}", file=sys.stderr)
    if failed and len(failed) >= len(singles) + (1 if args.multi else 0):
        return HARD_ERROR
    return PARTIAL if failed else OK


# ---------------------------------------------------------------------------
# bench


def cmd_bench(args) -> int:
    cfg = load_config(args.config)
    subjects, meta = benchgen.load_benchmark(args.bench_dir)
    b = cfg["bench"]
    unknown = set(b["methods"]) - set(benchgen.METHODS)
    if unknown:
        raise UsageError(f"unknown methods {sorted(unknown)}")
    report = benchgen.run_ablation(subjects, FitConfig.from_dict(cfg["fit"]), b["methods"], b["ks"],
                                   args.threads, {"bench": b, "benchmark": meta})
    report.write(args.out)
    summary = report.summary()
    for m in report.methods:
        row = " ".join(f"k{k}={summary[m]['multi'][str(k)]:.3f}" for k in report.ks)
        print(f"{m:8s} single={summary[m]['single']:.3f} {row}")
    checks = benchgen.ordering_checks(report)
    for name, passed, detail in checks:
        print(f"{'PASS' if passed else 'FAIL'}: {name} ({detail})")
    return OK if all(p for _, p, _ in checks) else PARTIAL


# ---------------------------------------------------------------------------
# stats


def _fill_shapes(users, path):
    """beta2 for users from a results file mapping user ids to a fit output or a number."""
    doc = json.loads(Path(path).read_text())
    if not isinstance(doc, dict):
        raise UsageError("--shapes file must map user ids to fit results or beta2 values")
    for u in users:
        if u.user_id in doc:
            v = doc[u.user_id]
            if isinstance(v, dict):
                v = (v.get("multi") or v.get("result") or v)["shape"][1]
            u.beta2 = float(v)


def cmd_stats(args) -> int:
    cfg = load_config(args.config)
    c = cfg["cloth"]
    seed = _seed(args.seed)
    vocab = clothmodel.CategoryVocabulary(c["vocabulary"])
    try:
        users = clothmodel.read_users_csv(args.users, vocab)
    except clothmodel.CsvSchemaError as exc:
        raise UsageError(str(exc)) from None
    if args.shapes:
        _fill_shapes(users, args.shapes)
    try:
        train, test = clothmodel.holdout_split(users, args.holdout, seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if args.labels == "threshold":
        train = clothmodel.label_by_threshold(train, c["threshold"])
        test = clothmodel.label_by_threshold(test, c["threshold"])
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    table, models = {}, {}
    for k in sorted(set(args.model)):
        if k == 1:
            model = clothmodel.fit_marginal(train, vocab)
            scored = test
        elif k == 2:
            model = clothmodel.fit_group_conditional(train, vocab)
            scored = [u for u in test if u.group != "unlabeled"]
        else:
            model = clothmodel.fit_shape_conditional(train, vocab, c["bandwidth"])
            scored = test
            clothmodel.write_curves_csv(out_dir / "curves.csv", model)
        table[str(k)] = clothmodel.nll(model, scored)
        models[str(k)] = model.to_dict()
        print(f"model {k}: NLL {table[str(k)]:.6f} on {len(scored)} held-out users")
    doc = {"schema": SCHEMA.replace("scene", "stats"), "config": cfg, "seed": seed, "holdout": args.holdout,
           "labels": args.labels, "n_train": len(train), "n_test": len(test), "nll": table, "models": models}
    write_json(out_dir / "stats.json", doc)
    return OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="bodyshape", description="Body shape from photos and shape-conditioned clothing statistics.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="write the synthetic benchmark")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--noise-level", type=float, default=0.0)
    g.add_argument("--config")
    g.add_argument("--threads", type=int, default=1)
    g.set_defaults(func=cmd_gen)

    f = sub.add_parser("fit", help="fit scene files")
    f.add_argument("scenes", nargs="+")
    f.add_argument("--multi", action="store_true", help="also fit one shape across all scenes")
    f.add_argument("--k", type=int, help="views kept by outlier rejection (default: all)")
    f.add_argument("--oracle-depth", action="store_true", help="hold cameras at the scene files' truth")
    f.add_argument("--config")
    f.add_argument("--out")
    f.add_argument("--threads", type=int, default=1)
    f.set_defaults(func=cmd_fit)

    b = sub.add_parser("bench", help="run the ablation on a benchmark directory")
    b.add_argument("bench_dir")
    b.add_argument("--out", required=True)
    b.add_argument("--config")
    b.add_argument("--threads", type=int, default=1)
    b.set_defaults(func=cmd_bench)

    s = sub.add_parser("stats", help="clothing models and held-out likelihoods")
    s.add_argument("users")
    s.add_argument("--model", type=int, nargs="+", choices=(1, 2, 3), default=[1, 2, 3])
    s.add_argument("--holdout", type=float, default=0.25)
    s.add_argument("--seed", type=int)
    s.add_argument("--labels", choices=("given", "threshold"), default="given",
                   help="body-type groups for model 2: as given in the CSV or by thresholding beta2")
    s.add_argument("--shapes", help="JSON mapping user ids to fit results or beta2 values")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--threads", type=int, default=1)
    s.set_defaults(func=cmd_stats)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if getattr(args, "threads", 1) < 1:
        print("bodyshape: error: --threads must be >= 1", file=sys.stderr)
        return HARD_ERROR
    try:
        return args.func(args)
    except (UsageError, BodyShapeError, SceneError, FileNotFoundError, OSError) as exc:
        print(f"bodyshape: error: {exc}", file=sys.stderr)
        return HARD_ERROR


if __name__ == "__main__":
    sys.exit(main())
