"""CSV input/output and trace-directory persistence.

All files are UTF-8, comma separated, with a header row; floats are written
with 17 significant digits so that a reload reproduces the binary values.
"""
from __future__ import annotations

import csv
import json
import os
import re

import numpy as np

from .core_model import ArmData, CohortData, DataValidationError
from .mcmc import TraceStore


def fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".17g")


def write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([v if isinstance(v, str) else fmt(v) for v in row])


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        r = csv.reader(fh)
        try:
            header = next(r)
        except StopIteration:
            raise DataValidationError(f"{path}: empty file, header required") from None
        rows = [row for row in r if row]
    return [h.strip() for h in header], rows


# --------------------------------------------------------------------------
# patient tables


_Z = re.compile(r"^z_(\d+)$")
_X = re.compile(r"^x_(\d+)$")


def _numbered(header, pattern):
    cols = sorted((int(m.group(1)), i) for i, h in enumerate(header) if (m := pattern.match(h)))
    expect = list(range(1, len(cols) + 1))
    if [c for c, _ in cols] != expect:
        raise DataValidationError(f"columns {pattern.pattern} must be numbered 1..{len(cols)}")
    return [i for _, i in cols]


def read_patients(path, require_response=True, require_arm=True):
    """Parse a patient table. Returns dict with ids, arm, y (or None), Z, X."""
    header, rows = read_csv(path)
    need = ["id"] + (["arm"] if require_arm else []) + (["response"] if require_response else [])
    for col in need:
        if col not in header:
            raise DataValidationError(f"{path}: missing required column '{col}'")
    zi = _numbered(header, _Z)
    xi = _numbered(header, _X)
    n = len(rows)
    ids, arm, y = [], np.zeros(n, dtype=np.int64), np.zeros(n, dtype=np.int64)
    Z = np.zeros((n, len(zi)))
    X = np.zeros((n, len(xi)))
    pos = {h: i for i, h in enumerate(header)}
    for r, row in enumerate(rows):
        line = r + 2
        if len(row) != len(header):
            raise DataValidationError(f"{path}, row {line}: expected {len(header)} fields, got {len(row)}")
        ids.append(row[pos["id"]])
        for name, target in (("arm", arm), ("response", y)):
            if name in pos:
                try:
                    target[r] = int(row[pos[name]])
                except ValueError:
                    raise DataValidationError(
                        f"{path}, row {line}, column '{name}': not an integer: {row[pos[name]]!r}") from None
        for cols, M in ((zi, Z), (xi, X)):
            for c, i in enumerate(cols):
                try:
                    v = float(row[i])
                except ValueError:
                    v = float("nan")
                if not np.isfinite(v):
                    raise DataValidationError(
                        f"{path}, row {line}, column '{header[i]}': non-finite or missing value")
                M[r, c] = v
    return {"ids": np.array(ids, dtype=object), "arm": arm if "arm" in pos else None,
            "y": y if "response" in pos else None, "Z": Z, "X": X}


def cohort_from_table(tab, K=None, T=None) -> CohortData:
    arm = tab["arm"]
    if len(arm) == 0:
        raise DataValidationError("no training rows")
    T = T or int(arm.max())
    if arm.min() < 1 or arm.max() > T:
        raise DataValidationError(f"arm codes must lie in 1..{T}")
    K = K or int(tab["y"].max())
    arms = []
    for a in range(1, T + 1):
        sel = arm == a
        if not sel.any():
            raise DataValidationError(f"arm {a} has no patients")
        arms.append(ArmData(tab["y"][sel], tab["Z"][sel], tab["X"][sel], tuple(tab["ids"][sel])))
    return CohortData(tuple(arms), K)


def write_patients(path, ids, arm, y, Z, X):
    Z = np.asarray(Z).reshape(len(ids), -1)
    X = np.asarray(X).reshape(len(ids), -1)
    header = ["id", "arm", "response"] + [f"z_{p + 1}" for p in range(Z.shape[1])] + \
        [f"x_{q + 1}" for q in range(X.shape[1])]
    rows = ([str(ids[i]), int(arm[i]), int(y[i])] + list(Z[i]) + list(X[i]) for i in range(len(ids)))
    write_csv(path, header, rows)


# --------------------------------------------------------------------------
# traces


def _iterations(meta, S):
    cfg = meta["config"]
    return [cfg["burnin"] + (t + 1) * cfg["thin"] for t in range(S)]


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def save_trace(trace: TraceStore, directory):
    os.makedirs(directory, exist_ok=True)
    meta = trace.meta
    S = trace.n_kept
    its = _iterations(meta, S)
    K = trace.theta[0].shape[1]
    P = trace.beta.shape[1]
    for a in range(trace.T):
        ids = meta["ids"][a]
        write_csv(os.path.join(directory, f"partitions_{a + 1}.csv"), ["iteration"] + list(ids),
                  ([its[t]] + [int(v) + 1 for v in trace.labels[a][t]] for t in range(S)))
        rows = []
        for t in range(S):
            for j in range(int(trace.C[a][t])):
                for k in range(K):
                    rows.append([its[t], j + 1, k + 1, trace.eta[a][t, j, k]])
        write_csv(os.path.join(directory, f"eta_{a + 1}.csv"), ["iteration", "cluster", "k", "value"], rows)
        hdr = ["iteration", "grid_index", "kappa", "sigma", "clusters"] + \
            [f"theta_{k + 1}" for k in range(K)] + \
            [f"Lambda_{k + 1}_{l + 1}" for k in range(K) for l in range(K)]
        write_csv(os.path.join(directory, f"nggp_{a + 1}.csv"), hdr,
                  ([its[t], int(trace.grid_index[a][t]), trace.kappa[a][t], trace.sigma[a][t],
                    int(trace.C[a][t])] + list(trace.theta[a][t]) + list(trace.Lam[a][t].ravel())
                   for t in range(S)))
    hdr = ["iteration"] + [f"beta_{p + 1}_{k + 1}" for p in range(P) for k in range(K)] + \
        [f"lambda_{p + 1}_{k + 1}" for p in range(P) for k in range(K)] + [f"tau_{k + 1}" for k in range(K)]
    write_csv(os.path.join(directory, "beta.csv"), hdr,
              ([its[t]] + list(trace.beta[t].ravel()) + list(trace.lam[t].ravel()) + list(trace.tau[t])
               for t in range(S)))
    unit_arm = [(a + 1, i) for a in range(trace.T) for i in meta["ids"][a]]
    write_csv(os.path.join(directory, "loglik.csv"), ["id", "arm"] + [f"draw_{t + 1}" for t in range(S)],
              ([i, a] + list(trace.loglik[r]) for r, (a, i) in enumerate(unit_arm)))
    out = dict(meta)
    out["acceptance"] = trace.acceptance
    out["warnings"] = trace.warnings
    out["kept"] = S
    with open(os.path.join(directory, "meta.json"), "w", encoding="utf-8") as fh:
        json.dump(_jsonable(out), fh, indent=1)


def load_trace(directory) -> TraceStore:
    with open(os.path.join(directory, "meta.json"), encoding="utf-8") as fh:
        meta = json.load(fh)
    T, K, P = meta["T"], meta["K"], meta["P"]
    S = meta["kept"]
    labels, C, eta, theta, Lam, gidx, kappa, sigma = [], [], [], [], [], [], [], []
    for a in range(T):
        n = meta["n"][a]
        _, rows = read_csv(os.path.join(directory, f"partitions_{a + 1}.csv"))
        L = np.array([[int(v) for v in r[1:]] for r in rows], dtype=np.int32).reshape(S, n) - 1
        labels.append(L)
        _, rows = read_csv(os.path.join(directory, f"nggp_{a + 1}.csv"))
        A = np.array([[float(v) for v in r] for r in rows]).reshape(S, -1)
        gidx.append(A[:, 1].astype(np.int32))
        kappa.append(A[:, 2])
        sigma.append(A[:, 3])
        C.append(A[:, 4].astype(np.int32))
        theta.append(A[:, 5:5 + K].copy())
        Lam.append(A[:, 5 + K:].reshape(S, K, K).copy())
        E = np.full((S, n, K), np.nan)
        its = _iterations(meta, S)
        pos = {it: t for t, it in enumerate(its)}
        _, rows = read_csv(os.path.join(directory, f"eta_{a + 1}.csv"))
        for r in rows:
            E[pos[int(r[0])], int(r[1]) - 1, int(r[2]) - 1] = float(r[3])
        eta.append(E)
    _, rows = read_csv(os.path.join(directory, "beta.csv"))
    B = np.array([[float(v) for v in r[1:]] for r in rows]).reshape(S, -1)
    beta = B[:, :P * K].reshape(S, P, K).copy()
    lam = B[:, P * K:2 * P * K].reshape(S, P, K).copy()
    tau = B[:, 2 * P * K:].copy()
    _, rows = read_csv(os.path.join(directory, "loglik.csv"))
    loglik = np.array([[float(v) for v in r[2:]] for r in rows]).reshape(len(rows), S)
    acceptance = meta.pop("acceptance", {})
    warnings = meta.pop("warnings", {})
    meta["X"] = [np.asarray(x, dtype=float).reshape(meta["n"][a], -1) for a, x in enumerate(meta["X"])]
    meta["kinds"] = [np.asarray(k, dtype=np.int64) for k in meta["kinds"]]
    meta["std_mean"] = [np.asarray(v, dtype=float) for v in meta["std_mean"]]
    meta["std_sd"] = [np.asarray(v, dtype=float) for v in meta["std_sd"]]
    return TraceStore(labels=labels, C=C, eta=eta, theta=theta, Lam=Lam, grid_index=gidx,
                      kappa=kappa, sigma=sigma, beta=beta, lam=lam, tau=tau, loglik=loglik,
                      acceptance=acceptance, warnings=warnings, meta=meta)
