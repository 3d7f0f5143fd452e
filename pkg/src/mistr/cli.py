"""Command-line surface: simulate, fit, predict, benchmark, report.

Every command writes a manifest describing its inputs (with digests), its
configuration snapshot, seeds, versions, wall-clock time, and diagnostics;
rerunning a command with the same manifest inputs reproduces its outputs
byte for byte.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from ._rng import derive_seed
from .baselines import (
    DEFAULT_WEIGHT_CLAMP,
    KIND_CONDITIONAL,
    KIND_MARGINAL,
    complete_case_estimate,
    ipcw_estimate,
)
from .causal_forest import ForestParams
from .data_model import (
    CsvSchema,
    OutcomeTransform,
    StudyConfig,
    SurvivalDataset,
    load_dataset,
    save_dataset,
)
from .errors import EstimationError, MistrError, ValidationError
from .mistr import MistrConfig, MistrModel, mistr_fit, mistr_predict_batch
from .rist import RistParams
from .simulation import (
    SETTINGS,
    evaluate,
    generate,
    mimic_formula_sample,
    quantiles_test_set,
    true_cate_batch,
)
from .survival_forest import ErtParams

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_ESTIMATION = 3
EXIT_IO = 4

THREADS_ENV = "MISTR_THREADS"

METHODS = ("mistr", "mistr-iv", "ipcw", "ipcw-iv", "cf-complete")

PROFILES = {
    "full": dict(n=5000, n_test=5000, m_trees=1000, q_steps=3, n_imputations=200,
                 trees=2000, ell=8, k_try=3, n_min=6, min_node=5, n_mc=20000,
                 reps=100),
    # coarser leaves than the full profile: score-equation noise at n=1000
    # otherwise swamps the effect signal, especially for the IV methods
    "desk": dict(n=1000, n_test=1000, m_trees=200, q_steps=3, n_imputations=25,
                 trees=200, ell=8, k_try=3, n_min=6, min_node=40, n_mc=20000,
                 reps=10),
    "smoke": dict(n=300, n_test=200, m_trees=50, q_steps=1, n_imputations=4,
                  trees=48, ell=8, k_try=3, n_min=6, min_node=5, n_mc=1000,
                  reps=2),
}

CONFIG_KEYS = {
    "method": str, "M": int, "Q": int, "K": int, "n_min": int, "A": int,
    "trees": int, "ell": int, "min_node": int, "honesty_fraction": float,
    "subsample_fraction": float, "t_max": float, "horizon": float,
    "g_kind": str, "clamp": float, "seed": int, "censoring_kind": str,
}

CONFIG_DEFAULTS = {
    "M": 1000, "Q": 3, "K": 3, "n_min": 6, "A": 200, "trees": 2000, "ell": 8,
    "min_node": 5, "honesty_fraction": 0.5, "subsample_fraction": 0.5,
    "g_kind": "rmst", "clamp": DEFAULT_WEIGHT_CLAMP, "seed": 0,
    "censoring_kind": KIND_CONDITIONAL,
}


def set_threads(n: int | None) -> int:
    """Cap numba workers; results are identical for any worker count."""
    import numba

    if n is None:
        env = os.environ.get(THREADS_ENV)
        n = int(env) if env else None
    if n is not None:
        n = max(1, min(int(n), numba.config.NUMBA_NUM_THREADS))
        numba.set_num_threads(n)
        return n
    return numba.get_num_threads()


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(out_dir: Path, command: str, config: dict, seed: int,
                    inputs: dict[str, Path], wall_clock: float,
                    diagnostics: dict) -> None:
    manifest = {
        "command": command,
        "config": config,
        "master_seed": seed,
        "version": __version__,
        "inputs": {name: {"path": str(p), "sha256": _sha256(Path(p))}
                   for name, p in inputs.items()},
        "wall_clock_seconds": round(wall_clock, 3),
        "diagnostics": diagnostics,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def _fmt(v: float) -> str:
    if not np.isfinite(v):
        return repr(float(v))
    if v == int(v) and abs(v) < 1e15:
        return str(int(v))
    return repr(float(v))


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) if isinstance(v, float) else v for v in row])


def parse_config(path) -> dict:
    """Flat ``key = value`` pairs, one per line, # comments allowed."""
    cfg = dict(CONFIG_DEFAULTS)
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{path}:{lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in CONFIG_KEYS:
            raise ValidationError(f"{path}:{lineno}: unknown key {key!r}")
        try:
            cfg[key] = CONFIG_KEYS[key](value)
        except ValueError:
            raise ValidationError(
                f"{path}:{lineno}: cannot parse {value!r} as {CONFIG_KEYS[key].__name__}"
            ) from None
    for required in ("method", "t_max", "horizon"):
        if required not in cfg:
            raise ValidationError(f"{path}: missing required key {required!r}")
    if cfg["method"] not in METHODS:
        raise ValidationError(f"{path}: unknown method {cfg['method']!r}")
    return cfg


def _config_to_params(cfg: dict):
    study = StudyConfig(t_max=cfg["t_max"], horizon=cfg["horizon"])
    g = OutcomeTransform(kind=cfg["g_kind"], horizon=cfg["horizon"])
    ert = ErtParams(n_trees=cfg["M"], k_try=cfg["K"], n_min=cfg["n_min"],
                    t_max=cfg["t_max"], rng_seed=cfg["seed"])
    rist = RistParams(ert=ert, q_steps=cfg["Q"], n_imputations=cfg["A"], study=study)
    forest = ForestParams(n_trees=cfg["trees"], min_node=cfg["min_node"],
                          ell=cfg["ell"], honesty_fraction=cfg["honesty_fraction"],
                          subsample_fraction=cfg["subsample_fraction"],
                          rng_seed=cfg["seed"])
    return study, g, rist, forest


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    t0 = time.time()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sid = str(args.setting)
    if sid == "mimic-formula":
        if not args.covariates:
            raise ValidationError("--covariates is required for the formula-driven setting")
        sample = mimic_formula_sample(args.covariates, args.lambda_c, args.seed)
    else:
        sample = generate(sid, args.n, args.seed)
    ds = sample.dataset
    save_dataset(ds, out / "data.csv")

    # latent view: visible and hidden covariates, latent times, oracle effect
    spec = sample.spec
    header = [f"x{j + 1}" for j in range(ds.p)]
    cols = [ds.covariates[:, j] for j in range(ds.p)]
    for name, arr in sample.hidden.items():
        if arr.ndim == 2:
            for j in range(arr.shape[1]):
                header.append(f"{name}{j + 1}")
                cols.append(arr[:, j])
        elif arr.ndim == 1 and arr.shape[0] == ds.n:
            header.append(name)
            cols.append(arr)
    header += ["w", "tilde_time", "censor_time"]
    cols += [ds.treatment, sample.tilde_time, sample.censor_time]
    if ds.instrument is not None:
        header.append("z")
        cols.append(ds.instrument)
    truth = None
    if sid != "mimic-formula" and not args.skip_truth:
        truth = true_cate_batch(sid, ds.covariates, n_mc=args.n_mc,
                                seed=derive_seed(args.seed, "truth"))
        header.append("true_cate")
        cols.append(truth)
    _write_csv(out / "truth.csv", header,
               (tuple(float(c[i]) for c in cols) for i in range(ds.n)))

    if sid != "mimic-formula" and not spec.iv:
        q = quantiles_test_set(sid)
        qh = [f"x{j + 1}" for j in range(q.shape[1])]
        _write_csv(out / "quantiles.csv", qh, (tuple(map(float, row)) for row in q))

    diagnostics = {
        "n": ds.n, "p": ds.p,
        "censoring_rate": round(ds.censoring_rate, 6),
        "instrument": ds.instrument is not None,
    }
    _write_manifest(out, "simulate",
                    {"setting": sid, "n": ds.n, "seed": args.seed, "n_mc": args.n_mc},
                    args.seed, {}, time.time() - t0, diagnostics)
    print(f"simulate: setting {sid}, n={ds.n}, censoring rate "
          f"{100 * ds.censoring_rate:.1f}% -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------

def _fit_method(ds: SurvivalDataset, cfg: dict):
    study, g, rist, forest = _config_to_params(cfg)
    method = cfg["method"]
    if method in ("mistr", "mistr-iv"):
        mcfg = MistrConfig(g=g, rist=rist, forest=forest,
                           mode="iv" if method == "mistr-iv" else "unconfounded",
                           master_seed=cfg["seed"])
        return mistr_fit(ds, mcfg), g
    if method in ("ipcw", "ipcw-iv"):
        model = ipcw_estimate(ds, g, censoring_kind=cfg["censoring_kind"],
                              params=forest, iv=method == "ipcw-iv",
                              clamp=cfg["clamp"],
                              censoring_params=replace(rist.ert, n_trees=min(rist.ert.n_trees, 500)))
        return model, g
    model = complete_case_estimate(ds, g, params=forest)
    return model, g


def cmd_fit(args) -> int:
    t0 = time.time()
    cfg = parse_config(args.config)
    ds = load_dataset(args.data)
    if cfg["method"] in ("mistr-iv", "ipcw-iv") and ds.instrument is None:
        raise ValidationError(
            f"method {cfg['method']} needs an instrument column 'z' in {args.data}"
        )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model, g = _fit_method(ds, cfg)
    diagnostics = {"method": cfg["method"], "n": ds.n, "p": ds.p,
                   "censoring_rate": round(ds.censoring_rate, 6)}
    if isinstance(model, MistrModel):
        model.save(out / "model")
        diagnostics["rist_fallbacks"] = model.rist_model.step_fallbacks
        diagnostics["imputation_fallbacks"] = model.imputation.n_fallback
        if args.dump_imputations:
            dump = out / "imputations"
            dump.mkdir(exist_ok=True)
            for a, ds_a in enumerate(model.imputation.datasets):
                save_dataset(ds_a, dump / f"imputation_{a:04d}.csv")
    else:
        model.forest.save(out / "forest.npz")
        (out / "model.json").write_text(json.dumps(
            {"method": cfg["method"], "n_kept": int(model.kept_idx.size),
             "n_clamped": model.n_clamped}, indent=2))
        diagnostics["n_kept"] = int(model.kept_idx.size)
        diagnostics["n_clamped"] = model.n_clamped
    _write_manifest(out, "fit", cfg, cfg["seed"],
                    {"data": Path(args.data), "config": Path(args.config)},
                    time.time() - t0, diagnostics)
    print(f"fit: method {cfg['method']} on n={ds.n} -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# predict
# ---------------------------------------------------------------------------

def _load_queries(path, p: int) -> np.ndarray:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    cols = [c for c in header if c.startswith("x")] or header
    idx = [header.index(c) for c in cols]
    q = np.array([[float(row[i]) for i in idx] for row in rows])
    if q.shape[1] < p:
        raise ValidationError(f"query file has {q.shape[1]} covariates, model needs {p}")
    return q[:, :p]


def cmd_predict(args) -> int:
    t0 = time.time()
    model_dir = Path(args.model)
    out_path = Path(args.out)
    if (model_dir / "model").is_dir():
        model = MistrModel.load(model_dir / "model")
        queries = _load_queries(args.queries, model.p)
        ests = mistr_predict_batch(model, queries)
        rows = []
        for e in ests:
            if e.variance_available:
                a_n = e.tau_a.size
                resid = abs(e.total_var - (e.within_var + (1 + 1 / a_n) * e.between_var))
                if resid > 1e-12:
                    raise EstimationError("variance decomposition failed its identity check")
            rows.append((e.tau,
                         e.within_var, e.between_var, e.total_var, e.n_excluded))
        _write_csv(out_path, ["tau", "within_var", "between_var", "total_var",
                              "n_excluded_imputations"], rows)
        diagnostics = {"n_queries": len(rows),
                       "variance_available": all(e.variance_available for e in ests)}
    else:
        from .causal_forest import CausalForestModel, predict_effects

        forest = CausalForestModel.load(model_dir / "forest.npz")
        queries = _load_queries(args.queries, forest.n_features)
        pred = predict_effects(forest, queries)
        rows = [(float(t), float("nan"), float("nan"), float(v), 0)
                for t, v in zip(pred.tau, pred.var)]
        _write_csv(out_path, ["tau", "within_var", "between_var", "total_var",
                              "n_excluded_imputations"], rows)
        diagnostics = {"n_queries": len(rows)}
    if out_path.parent.is_dir():
        _write_manifest(out_path.parent, "predict", {"model": str(model_dir)}, 0,
                        {"queries": Path(args.queries)}, time.time() - t0,
                        diagnostics)
    print(f"predict: {diagnostics['n_queries']} rows -> {out_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# benchmark
# ---------------------------------------------------------------------------

def _default_methods(sid: str) -> list[str]:
    if SETTINGS[sid].iv:
        return ["mistr-iv", "mistr", "ipcw-iv"]
    return ["mistr", "ipcw"]


def _benchmark_one(sid: str, method: str, profile: dict, rep: int, seed: int,
                   scatter_dir: Path | None):
    spec = SETTINGS[sid]
    # one replication seed shared by every method: comparisons are paired
    rep_seed = derive_seed(seed, "bench", sid, rep)
    train = generate(sid, profile["n"], derive_seed(seed, "bench-train", sid, rep))
    test = generate(sid, profile["n_test"], derive_seed(seed, "bench-test", sid, rep))
    xq = test.dataset.covariates
    truth = true_cate_batch(sid, xq, n_mc=profile["n_mc"],
                            seed=derive_seed(seed, "bench-truth", sid, rep))
    study = StudyConfig(t_max=spec.t_max, horizon=spec.horizon)
    g = OutcomeTransform(kind="rmst", horizon=spec.horizon)
    ert = ErtParams(n_trees=profile["m_trees"], k_try=profile["k_try"],
                    n_min=profile["n_min"], t_max=spec.t_max)
    rist = RistParams(ert=ert, q_steps=profile["q_steps"],
                      n_imputations=profile["n_imputations"], study=study)
    forest = ForestParams(n_trees=profile["trees"], min_node=profile["min_node"],
                          ell=profile["ell"], rng_seed=rep_seed)

    if method in ("mistr", "mistr-iv"):
        mcfg = MistrConfig(g=g, rist=rist, forest=forest,
                           mode="iv" if method == "mistr-iv" else "unconfounded",
                           master_seed=rep_seed)
        qx = None if spec.iv else quantiles_test_set(sid)[:, :spec.p]
        all_queries = xq if qx is None else np.vstack([xq, qx])
        model = mistr_fit(train.dataset, mcfg, queries=all_queries,
                          retain_forests=False)
        ests = mistr_predict_batch(model, all_queries)
        tau = np.array([e.tau for e in ests[:xq.shape[0]]])
        q_tau = None
        if qx is not None:
            q_tau = np.array([e.tau for e in ests[xq.shape[0]:]])
    else:
        if method == "ipcw" or method == "ipcw-iv":
            model = ipcw_estimate(train.dataset, g, params=forest,
                                  iv=method == "ipcw-iv",
                                  censoring_params=replace(ert, n_trees=min(ert.n_trees, 500)))
        else:
            model = complete_case_estimate(train.dataset, g, params=forest)
        tau = model.predict(xq).tau
        q_tau = None
        if not spec.iv:
            qx = quantiles_test_set(sid)[:, :spec.p]
            q_tau = model.predict(qx).tau

    result = {"random": (truth, tau)}
    if q_tau is not None:
        qx_full = quantiles_test_set(sid)
        q_truth = true_cate_batch(sid, qx_full[:, :spec.p], n_mc=profile["n_mc"],
                                  seed=derive_seed(seed, "bench-truth-q", sid))
        result["quantiles"] = (q_truth, q_tau)
    if scatter_dir is not None and rep == 0:
        _write_csv(scatter_dir / f"scatter_{sid}_{method}.csv",
                   ["true_cate", "estimated_cate"],
                   zip(map(float, truth), map(float, tau)))
    return result


def cmd_benchmark(args) -> int:
    t0 = time.time()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    profile = dict(PROFILES[args.profile])
    if args.reps:
        profile["reps"] = args.reps
    settings = [str(s).strip() for s in args.settings.split(",") if s.strip()]
    for sid in settings:
        if sid not in SETTINGS:
            raise ValidationError(f"unknown setting {sid!r}")
    rows = []
    table = {}
    for sid in settings:
        methods = (args.methods.split(",") if args.methods else _default_methods(sid))
        for method in methods:
            if method not in METHODS:
                raise ValidationError(f"unknown method {method!r}")
            per_set: dict[str, list] = {}
            for rep in range(profile["reps"]):
                res = _benchmark_one(sid, method, profile, rep, args.seed, out)
                for split, (tr, est) in res.items():
                    per_set.setdefault(split, []).append((est, tr))
            for split, pairs in per_set.items():
                for metric in ("mse", "mae"):
                    ev = evaluate([p[0] for p in pairs], [p[1] for p in pairs],
                                  metric, scale=100.0)
                    rows.append((sid, method, split, metric,
                                 ev.mean, ev.sem if ev.sem is not None else float("nan")))
                    table[(sid, method, split, metric)] = ev
            print(f"benchmark: setting {sid} method {method} done "
                  f"({time.time() - t0:.0f}s elapsed)")
    rows.sort(key=lambda r: (r[0], r[1], r[2], r[3]))
    _write_csv(out / "benchmark_results.csv",
               ["setting", "method", "test_set", "metric", "mean", "sem"], rows)
    payload = {
        "profile": profile, "settings": settings, "seed": args.seed,
        "results": [
            {"setting": s, "method": m, "test_set": t, "metric": k,
             "mean": ev.mean, "sem": ev.sem,
             "per_replication": [float(v) for v in ev.per_replication]}
            for (s, m, t, k), ev in sorted(table.items())
        ],
    }
    (out / "benchmark_results.json").write_text(json.dumps(payload, indent=2, sort_keys=True))
    _write_manifest(out, "benchmark",
                    {"settings": settings, "profile": args.profile,
                     "reps": profile["reps"], "methods": args.methods},
                    args.seed, {}, time.time() - t0, {"n_rows": len(rows)})
    print(f"benchmark: wrote {len(rows)} table rows -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def cmd_report(args) -> int:
    results_dir = Path(args.results)
    res_file = results_dir / "benchmark_results.json"
    out_path = Path(args.out) if args.out else results_dir / "report.md"
    if not res_file.exists():
        print("report: nothing to report (no benchmark_results.json found)")
        return EXIT_OK
    payload = json.loads(res_file.read_text())
    results = payload["results"]
    if not results:
        print("report: nothing to report (empty results)")
        return EXIT_OK

    by_row: dict[tuple[str, str, str], dict[str, tuple[float, float | None]]] = {}
    methods_seen: list[str] = []
    for r in results:
        key = (r["setting"], r["test_set"], r["metric"])
        by_row.setdefault(key, {})[r["method"]] = (r["mean"], r["sem"])
        if r["method"] not in methods_seen:
            methods_seen.append(r["method"])

    lines = ["# Benchmark report", "",
             f"Profile: {json.dumps(payload['profile'], sort_keys=True)}",
             f"Seed: {payload['seed']}", "",
             "All values are multiplied by 100 for readability; the best",
             "(lowest) method per row is bold.", ""]
    header = "| setting | test set | metric | " + " | ".join(methods_seen) + " |"
    sep = "|" + "---|" * (3 + len(methods_seen))
    lines += [header, sep]
    for (sid, split, metric), per_method in sorted(by_row.items()):
        best = min(per_method, key=lambda m: per_method[m][0])
        cells = []
        for m in methods_seen:
            if m not in per_method:
                cells.append("-")
                continue
            mean, sem = per_method[m]
            txt = f"{100 * mean:.3f}" + (f" ± {100 * sem:.3f}" if sem is not None else "")
            cells.append(f"**{txt}**" if m == best else txt)
        lines.append(f"| {sid} | {split} | {metric} | " + " | ".join(cells) + " |")
    out_path.write_text("\n".join(lines) + "\n")
    print(f"report: {len(by_row)} rows -> {out_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mistr",
        description="Heterogeneous treatment effects from right-censored data "
                    "via multiple imputation and honest causal forests",
    )
    parser.add_argument("--threads", type=int, default=None,
                        help=f"worker cap (default: ${THREADS_ENV} or all cores); "
                             "results do not depend on it")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="draw a benchmark dataset")
    p.add_argument("--setting", required=True,
                   help="one of " + ", ".join(SETTINGS) + ", or mimic-formula")
    p.add_argument("--n", type=int, default=5000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--n-mc", type=int, default=20000, help="truth oracle draws")
    p.add_argument("--skip-truth", action="store_true",
                   help="omit the oracle column (faster)")
    p.add_argument("--covariates", help="covariate CSV for mimic-formula")
    p.add_argument("--lambda-c", type=float, default=21.0,
                   help="censoring rate parameter for mimic-formula")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="fit an estimator from a config file")
    p.add_argument("--data", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dump-imputations", action="store_true",
                   help="write each imputed dataset as CSV for audit")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", help="predict effects at query covariates")
    p.add_argument("--model", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("benchmark", help="replicate settings and compare methods")
    p.add_argument("--settings", required=True, help="comma-separated ids")
    p.add_argument("--profile", choices=sorted(PROFILES), default="desk")
    p.add_argument("--reps", type=int, default=None)
    p.add_argument("--methods", default=None,
                   help="comma-separated subset of " + ",".join(METHODS))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("report", help="summarize benchmark outputs as markdown")
    p.add_argument("--results", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        set_threads(args.threads)
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except EstimationError as exc:
        print(f"estimation error: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
