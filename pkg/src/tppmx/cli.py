"""Command-line interface: ``fit``, ``predict``, ``simulate``, ``evaluate`` and
``prior-sim``.

Exit codes: 0 success, 1 usage or input error, 2 runtime failure. The number
of worker processes used for multiple chains is read from ``TPPMX_THREADS``
(default 1); results do not depend on it.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import jsonschema
import numpy as np

from . import io
from .core_model import DataValidationError
from .diagnostics import compute_lpml, compute_psrf, compute_waic
from .mcmc import MCMCConfig, TraceStore, run_chain
from .partition_prior import NGGPGrid
from .partition_summary import adjusted_rand_index, point_estimate_partition
from .prediction import predict_patients
from .similarity import NIGParams, SimilarityConfig
from .synthetic import (OMEGA_DEFAULT, ScenarioSpec, generate_scenario, metric_esm, metric_mot,
                        metric_npc, metric_pct_delta_mtu, predicted_outcome,
                        run_prior_simulation)

logger = logging.getLogger("tppmx")

THREADS_ENV = "TPPMX_THREADS"


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# configuration

_NUM = {"type": "number"}
_INT = {"type": "integer"}
_BOOL = {"type": "boolean"}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "train": {"type": "string"},
        "out": {"type": "string"},
        "seed": _INT,
        "chains": {"type": "integer", "minimum": 1},
        "K": {"type": "integer", "minimum": 2},
        "omega": {"type": "array", "items": _NUM},
        "iterations": {"type": "integer", "minimum": 1},
        "burnin": {"type": "integer", "minimum": 0},
        "thin": {"type": "integer", "minimum": 1},
        "M": {"type": "integer", "minimum": 1},
        "eta_step": _NUM, "beta_step": _NUM,
        "adapt": _BOOL, "adapt_batch": {"type": "integer", "minimum": 1},
        "target_accept": _NUM,
        "vratio": _BOOL, "ppm": _BOOL,
        "mu0": _NUM, "nu0": _NUM, "s0": {"type": ["number", "null"]}, "Lam0": _NUM,
        "exponent_cap": _NUM,
        "similarity": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "enabled": _BOOL, "calibrate": _BOOL, "standardize": _BOOL,
                "binary": {"enum": ["gaussian", "bernoulli"]},
                "beta_a": _NUM, "beta_b": _NUM,
                "nig": {"type": "object", "additionalProperties": False,
                        "properties": {"m0": _NUM, "k0": _NUM, "v0": _NUM, "n0": _NUM}},
            },
        },
        "grid": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["default", "dirichlet", "single", "explicit"]},
                "kappa": {"oneOf": [_NUM, {"type": "array", "items": _NUM}]},
                "sigma": {"oneOf": [_NUM, {"type": "array", "items": _NUM}]},
                "log_weights": {"type": "array", "items": _NUM},
            },
        },
    },
}


def load_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
        jsonschema.validate(cfg, CONFIG_SCHEMA)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    except jsonschema.ValidationError as exc:
        where = "/".join(map(str, exc.absolute_path)) or "<root>"
        raise UsageError(f"config {path}: {where}: {exc.message}") from None
    return cfg


def _grid(spec: dict | None, ppm: bool) -> NGGPGrid:
    if ppm:
        return NGGPGrid.dirichlet()
    spec = spec or {}
    kind = spec.get("kind", "default")
    if kind == "default":
        return NGGPGrid.default()
    if kind == "dirichlet":
        return NGGPGrid.dirichlet()
    if kind == "single":
        return NGGPGrid.single(float(spec["kappa"]), float(spec.get("sigma", 0.0)))
    k = np.atleast_1d(spec["kappa"]).astype(float)
    s = np.atleast_1d(spec["sigma"]).astype(float)
    w = np.asarray(spec.get("log_weights", np.zeros(k.size)), dtype=float)
    return NGGPGrid(k, s, w)


def build_mcmc_config(cfg: dict) -> MCMCConfig:
    """MCMCConfig from a merged configuration dictionary."""
    simd = dict(cfg.get("similarity", {}))
    nig = NIGParams(**simd.pop("nig", {}))
    ppm = bool(cfg.get("ppm", False))
    if ppm:
        simd["enabled"] = False
    sim = SimilarityConfig(nig=nig, **simd)
    keys = {f.name for f in dataclasses.fields(MCMCConfig)} - {"grid", "similarity", "audit",
                                                                "likelihood"}
    kw = {k: cfg[k] for k in keys if k in cfg}
    try:
        return MCMCConfig(grid=_grid(cfg.get("grid"), ppm), similarity=sim, **kw)
    except (ValueError, KeyError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from None


def _parse_omega(text):
    try:
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"omega must be comma-separated numbers: {text!r}")


# --------------------------------------------------------------------------
# commands


def _run_one(args):
    data, config, chain = args
    return run_chain(data, config, chain=chain)


def _chain_dir(out, c):
    return os.path.join(out, f"chain_{c + 1}")


def run_report(traces: list[TraceStore]) -> dict:
    rep = {
        "chains": len(traces),
        "kept_draws": traces[0].n_kept,
        "acceptance": [tr.acceptance for tr in traces],
        "warnings": [tr.warnings for tr in traces],
        "lpml": [compute_lpml(tr) for tr in traces],
        "waic": [compute_waic(tr) for tr in traces],
        "runtime_s": [tr.meta["runtime_s"] for tr in traces],
    }
    if len(traces) >= 2:
        T = traces[0].T
        mon = {}
        for a in range(T):
            mon[f"clusters_arm{a + 1}"] = np.stack([tr.C[a] for tr in traces]).astype(float)
            mon[f"kappa_arm{a + 1}"] = np.stack([tr.kappa[a] for tr in traces])
            mon[f"sigma_arm{a + 1}"] = np.stack([tr.sigma[a] for tr in traces])
        P, K = traces[0].beta.shape[1:]
        for p in range(P):
            for k in range(K):
                mon[f"beta_{p + 1}_{k + 1}"] = np.stack([tr.beta[:, p, k] for tr in traces])
        rep["psrf"] = {k: float(compute_psrf(v)[0]) for k, v in mon.items()}
    return rep


def cmd_fit(args) -> int:
    cfg = load_config(args.config)
    for key in ("train", "out", "seed", "chains", "iterations", "burnin", "thin", "M", "K"):
        v = getattr(args, key, None)
        if v is not None:
            cfg[key] = v
    if args.omega is not None:
        cfg["omega"] = args.omega
    sim = cfg.setdefault("similarity", {})
    if args.no_similarity:
        sim["enabled"] = False
    if args.no_calibrate:
        sim["calibrate"] = False
    if args.raw_scale:
        sim["standardize"] = False
    if args.binary:
        sim["binary"] = args.binary
    if args.no_vratio:
        cfg["vratio"] = False
    if args.ppm:
        cfg["ppm"] = True
    for key in ("train", "out", "seed"):
        if key not in cfg:
            raise UsageError(f"missing required setting '{key}' (flag --{key} or config file)")
    if not os.path.isfile(cfg["train"]):
        raise UsageError(f"training file not found: {cfg['train']}")
    config = build_mcmc_config(cfg)
    tab = io.read_patients(cfg["train"])
    data = io.cohort_from_table(tab, K=cfg.get("K"))
    omega = np.asarray(cfg.get("omega", OMEGA_DEFAULT[:data.K] if data.K == 3 else
                               np.linspace(0.0, 100.0, data.K)), dtype=float)
    if omega.size != data.K:
        raise UsageError(f"omega has {omega.size} entries but the data have K = {data.K}")
    chains = int(cfg.get("chains", 1))
    workers = max(1, int(os.environ.get(THREADS_ENV, "1") or 1))
    jobs = [(data, config, c) for c in range(chains)]
    if workers > 1 and chains > 1:
        with ProcessPoolExecutor(max_workers=min(workers, chains)) as ex:
            traces = list(ex.map(_run_one, jobs))
    else:
        traces = [_run_one(j) for j in jobs]
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    for c, tr in enumerate(traces):
        io.save_trace(tr, _chain_dir(out, c))
    resolved = dict(cfg)
    resolved.update(config.to_dict())
    resolved["omega"] = omega.tolist()
    resolved["K"] = data.K
    with open(os.path.join(out, "config.json"), "w", encoding="utf-8") as fh:
        json.dump(io._jsonable(resolved), fh, indent=1)
    rep = run_report(traces)
    with open(os.path.join(out, "report.json"), "w", encoding="utf-8") as fh:
        json.dump(io._jsonable(rep), fh, indent=1)
    print(f"fit: {chains} chain(s), {traces[0].n_kept} kept draws, lpml "
          f"{', '.join(f'{v:.3f}' for v in rep['lpml'])}, WAIC "
          f"{', '.join(f'{v:.3f}' for v in rep['waic'])}")
    for c, tr in enumerate(traces):
        print(f"  chain {c + 1}: eta acceptance "
              f"{', '.join(f'{v:.3f}' for v in tr.acceptance['eta'])}; warnings {tr.warnings}")
    if "psrf" in rep:
        print(f"  max PSRF {max(rep['psrf'].values()):.4f}")
    print(f"traces written to {out}")
    return 0


def load_run(path) -> list[TraceStore]:
    """Chains of a fit directory (or a single chain directory)."""
    if os.path.isfile(os.path.join(path, "meta.json")):
        return [io.load_trace(path)]
    dirs = []
    c = 1
    while os.path.isdir(os.path.join(path, f"chain_{c}")):
        dirs.append(os.path.join(path, f"chain_{c}"))
        c += 1
    if not dirs:
        raise UsageError(f"no trace found in {path}")
    return [io.load_trace(d) for d in dirs]


def _run_omega(path, traces):
    cfgp = os.path.join(path, "config.json")
    if os.path.isfile(cfgp):
        with open(cfgp, encoding="utf-8") as fh:
            om = json.load(fh).get("omega")
        if om is not None:
            return np.asarray(om, dtype=float)
    K = traces[0].meta["K"]
    return OMEGA_DEFAULT.copy() if K == 3 else np.linspace(0.0, 100.0, K)


def write_recommendations(path, ids, res, omega, seed):
    m, T, K = res["median_pi"].shape
    header = ["id"] + [f"utility_{a + 1}" for a in range(T)] + ["recommended", "tie"] + \
        [f"pi_{a + 1}_{k + 1}" for a in range(T) for k in range(K)]
    rows = ([str(ids[i])] + list(res["utility"][i]) + [int(res["recommended"][i]),
                                                        int(res["tie"][i])]
            + list(res["median_pi"][i].ravel()) for i in range(m))
    io.write_csv(path, header, rows)
    with open(path + ".meta.json", "w", encoding="utf-8") as fh:
        json.dump({"omega": [float(v) for v in omega], "seed": seed, "patients": m}, fh, indent=1)


def cmd_predict(args) -> int:
    traces = load_run(args.trace)
    omega = np.asarray(args.omega, dtype=float) if args.omega is not None \
        else _run_omega(args.trace, traces)
    meta = traces[0].meta
    if omega.size != meta["K"]:
        raise UsageError(f"omega has {omega.size} entries but the fit has K = {meta['K']}")
    if not os.path.isfile(args.newdata):
        raise UsageError(f"new-data file not found: {args.newdata}")
    tab = io.read_patients(args.newdata, require_response=False, require_arm=False)
    if len(tab["ids"]) and (tab["X"].shape[1] != meta["Q"] or tab["Z"].shape[1] != meta["P"]):
        raise DataValidationError(
            f"new data have P={tab['Z'].shape[1]}, Q={tab['X'].shape[1]}; "
            f"the fit expects P={meta['P']}, Q={meta['Q']}")
    rng = np.random.default_rng(args.seed)
    m = len(tab["ids"])
    res = predict_patients(traces, tab["X"], tab["Z"], omega, rng,
                           median_of_utility=args.median_of_utility)
    write_recommendations(args.out, tab["ids"], res, omega, args.seed)
    print(f"predict: {m} patient(s), recommendations written to {args.out}")
    return 0


def cmd_simulate(args) -> int:
    if args.scenario == "prior-sim":
        return _prior_sim(args.out, args.reps, args.seed, args.n or 50)
    spec = ScenarioSpec(args.scenario, n=args.n, n_train=args.n_train, Q=args.Q,
                        overlap=args.overlap, seed=args.seed,
                        omega=tuple(args.omega) if args.omega else (0.0, 40.0, 100.0))
    try:
        d = generate_scenario(spec)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    os.makedirs(args.out, exist_ok=True)
    for name, rows in (("train", d.train), ("test", ~d.train)):
        io.write_patients(os.path.join(args.out, f"{name}.csv"), d.ids[rows], d.arm[rows],
                          d.y[rows], d.Z[rows], d.X[rows])
    T, K = d.orp.shape[1:]
    header = ["id", "set", "arm", "response", "optimal", "tie"] + \
        [f"utility_{a + 1}" for a in range(T)] + \
        [f"orp_{a + 1}_{k + 1}" for a in range(T) for k in range(K)]
    if d.partition is not None:
        header.append("partition")
    rows = []
    for i in range(d.ids.size):
        row = [str(d.ids[i]), "train" if d.train[i] else "test", int(d.arm[i]), int(d.y[i]),
               int(d.optimal[i]), int(d.tie[i])] + list(d.utility[i]) + list(d.orp[i].ravel())
        if d.partition is not None:
            row.append(int(d.partition[i]) + 1)
        rows.append(row)
    io.write_csv(os.path.join(args.out, "truth.csv"), header, rows)
    with open(os.path.join(args.out, "scenario.json"), "w", encoding="utf-8") as fh:
        json.dump(io._jsonable(dataclasses.asdict(d.spec)), fh, indent=1)
    print(f"simulate: scenario {d.spec.scenario}, seed {d.spec.seed}, {d.ids.size} rows "
          f"({int(d.train.sum())} train) written to {args.out}")
    return 0


def _read_keyed(path, what):
    if not os.path.isfile(path):
        raise UsageError(f"{what} file not found: {path}")
    header, rows = io.read_csv(path)
    if "id" not in header:
        raise DataValidationError(f"{path}: missing required column 'id'")
    pos = {h: i for i, h in enumerate(header)}
    return header, pos, {r[pos["id"]]: r for r in rows}, [r[pos["id"]] for r in rows]


def evaluate_metrics(rec_path, truth_path, trace_path=None, response_category=None) -> dict:
    """Metrics of a recommendations file against simulation truth."""
    rh, rpos, recs, order = _read_keyed(rec_path, "recommendations")
    th, tpos, truth, _ = _read_keyed(truth_path, "truth")
    missing = [i for i in order if i not in truth]
    if missing:
        raise DataValidationError(f"ids not present in truth file: {', '.join(missing[:5])}")
    T = sum(1 for h in th if h.startswith("utility_"))
    rec = np.array([int(recs[i][rpos["recommended"]]) for i in order], dtype=np.int64)
    opt = np.array([int(truth[i][tpos["optimal"]]) for i in order], dtype=np.int64)
    util = np.array([[float(truth[i][tpos[f"utility_{a + 1}"]]) for a in range(T)]
                     for i in order]).reshape(len(order), T)
    arm = np.array([int(truth[i][tpos["arm"]]) for i in order], dtype=np.int64)
    y = np.array([int(truth[i][tpos["response"]]) for i in order], dtype=np.int64)
    K = sum(1 for h in rh if h.startswith("pi_1_"))
    out = {"patients": len(order), "MOT": metric_mot(rec, opt)}
    out["pct_delta_MTU"] = metric_pct_delta_mtu(rec, opt, util) if T == 2 else float("nan")
    if K and len(order):
        med = np.array([[[float(recs[i][rpos[f"pi_{a + 1}_{k + 1}"]]) for k in range(K)]
                         for a in range(T)] for i in order])
        pred = predicted_outcome(med[np.arange(len(order)), arm - 1])
        out["NPC"] = metric_npc(pred, y)
    else:
        out["NPC"] = 0
    top = response_category or K or int(y.max(initial=1))
    out["ESM"] = metric_esm((y == top).astype(float), arm, rec) if T == 2 and len(order) \
        else float("nan")
    if trace_path is not None and "partition" in tpos:
        traces = load_run(trace_path)
        tr = traces[0]
        for a in range(tr.T):
            ids = tr.meta["ids"][a]
            if any(i not in truth for i in ids):
                raise DataValidationError("training ids of the fit are missing from the truth file")
            true = np.array([int(truth[i][tpos["partition"]]) for i in ids])
            est = point_estimate_partition(np.vstack([t.labels[a] for t in traces]))
            out[f"ARI_arm{a + 1}"] = adjusted_rand_index(est, true)
    return out


def cmd_evaluate(args) -> int:
    res = evaluate_metrics(args.recommendations, args.truth, args.trace, args.response_category)
    keys = list(res)
    io.write_csv(args.out, keys, [[res[k] for k in keys]])
    for k in keys:
        v = res[k]
        print(f"{k:>14}: {v}" if isinstance(v, int) else f"{k:>14}: {v:.6g}")
    return 0


def _prior_sim(out, reps, seed, n):
    rows = run_prior_simulation(reps=reps, n=n, seed=seed)
    os.makedirs(out, exist_ok=True)
    cols = ["config", "kappa", "sigma", "similarity", "calibrate", "vratio", "reps",
            "mean_clusters", "singleton_pct"]
    io.write_csv(os.path.join(out, "prior_sim_summary.csv"), cols,
                 ([str(r[c]) if isinstance(r[c], (bool, str)) else r[c] for c in cols]
                  for r in rows))
    io.write_csv(os.path.join(out, "prior_sim_histogram.csv"), ["config", "clusters", "count"],
                 ([r["config"], c, int(v)] for r in rows for c, v in enumerate(r["histogram"])
                  if c > 0))
    print(f"prior-sim: n={n}, {reps} replicates per row, seed {seed}")
    print(f"{'config':>12} {'mean C':>8} {'singletons %':>13}")
    for r in rows:
        print(f"{r['config']:>12} {r['mean_clusters']:8.3f} {r['singleton_pct']:13.2f}")
    return 0


def cmd_prior_sim(args) -> int:
    return _prior_sim(args.out, args.reps, args.seed, args.n)


# --------------------------------------------------------------------------
# parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tppmx", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    f = sub.add_parser("fit", help="run the sampler on a training CSV")
    f.add_argument("--train")
    f.add_argument("--out")
    f.add_argument("--seed", type=int, required=True)
    f.add_argument("--config", help="JSON configuration file; flags override it")
    f.add_argument("--chains", type=int)
    f.add_argument("--iterations", type=int)
    f.add_argument("--burnin", type=int)
    f.add_argument("--thin", type=int)
    f.add_argument("--M", type=int)
    f.add_argument("--K", type=int, help="number of response categories (default: max response)")
    f.add_argument("--omega", type=_parse_omega)
    f.add_argument("--no-similarity", action="store_true")
    f.add_argument("--no-calibrate", action="store_true")
    f.add_argument("--raw-scale", action="store_true", help="do not standardise covariates")
    f.add_argument("--binary", choices=["gaussian", "bernoulli"])
    f.add_argument("--no-vratio", action="store_true")
    f.add_argument("--ppm", action="store_true", help="sigma = 0 only, similarity off")
    f.set_defaults(func=cmd_fit)

    q = sub.add_parser("predict", help="recommend treatments for new patients")
    q.add_argument("--trace", required=True)
    q.add_argument("--newdata", required=True)
    q.add_argument("--out", required=True)
    q.add_argument("--omega", type=_parse_omega)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--median-of-utility", action="store_true")
    q.set_defaults(func=cmd_predict)

    s = sub.add_parser("simulate", help="generate a synthetic scenario")
    s.add_argument("--scenario", required=True,
                   choices=["s1", "s2", "s3", "cr-logistic", "prior-sim"])
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int)
    s.add_argument("--n-train", type=int)
    s.add_argument("--Q", type=int)
    s.add_argument("--overlap", type=float, default=1.0)
    s.add_argument("--omega", type=_parse_omega)
    s.add_argument("--reps", type=int, default=10000)
    s.set_defaults(func=cmd_simulate)

    e = sub.add_parser("evaluate", help="score recommendations against simulation truth")
    e.add_argument("--recommendations", required=True)
    e.add_argument("--truth", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--trace", help="fit directory, for ARI against the true partition")
    e.add_argument("--response-category", type=int,
                   help="category counted as response in ESM (default: K)")
    e.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("prior-sim", help="prior cluster-count experiment")
    r.add_argument("--out", required=True)
    r.add_argument("--reps", type=int, default=10000)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--n", type=int, default=50)
    r.set_defaults(func=cmd_prior_sim)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"tppmx: error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, DataValidationError) as exc:
        print(f"tppmx: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        logger.debug("failure", exc_info=True)
        print(f"tppmx: runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
