"""Text formats: BTA matrices, dataset directories, run configs, reports.

Every numeric field is emitted with 17 significant digits so a
write/read cycle reproduces doubles exactly.
"""
from __future__ import annotations

import os

import numpy as np

from .bta import BtaLayout, BtaMatrix
from .model import HYPERPARAMETER_NAMES, Dataset


class ConfigError(Exception):
    """Malformed config or data file; message carries file and line."""


def _fmt(x: float) -> str:
    return f"{float(x):.17g}"


# ---------------------------------------------------------------------------
# BTA matrix text format


def write_bta_matrix(path, Q: BtaMatrix):
    """Header `bta n_s n_t n_b`, then D_1..D_nt, E_1..E_{nt-1},
    F_1..F_nt, T, row-major, blank line between blocks."""
    lay = Q.layout
    blocks = list(Q.D) + list(Q.E) + list(Q.F) + [Q.T]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"bta {lay.n_s} {lay.n_t} {lay.n_b}\n")
        for blk in blocks:
            fh.write("\n")
            for row in np.atleast_2d(blk):
                fh.write(" ".join(_fmt(v) for v in row) + "\n")


def read_bta_matrix(path) -> BtaMatrix:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) != 4 or header[0] != "bta":
            raise ConfigError(f"{path}:1: expected header 'bta n_s n_t n_b'")
        try:
            ns, nt, nb = (int(v) for v in header[1:])
        except ValueError:
            raise ConfigError(f"{path}:1: non-integer dimensions in header") from None
        rows = []
        for lineno, raw in enumerate(fh, 2):
            s = raw.strip()
            if not s:
                continue
            try:
                rows.append([float(tok) for tok in s.split()])
            except ValueError:
                raise ConfigError(f"{path}:{lineno}: malformed number") from None

    lay = BtaLayout(ns, nt, nb)
    want_rows = nt * ns + max(nt - 1, 0) * ns + nt * nb + nb
    if len(rows) != want_rows:
        raise ConfigError(
            f"{path}: expected {want_rows} block rows for layout "
            f"({ns}, {nt}, {nb}), found {len(rows)}"
        )

    def take(count, width):
        nonlocal rows
        chunk, rows = rows[:count], rows[count:]
        for r in chunk:
            if len(r) != width:
                raise ConfigError(f"{path}: block row has {len(r)} values, expected {width}")
        return np.array(chunk, dtype=np.float64).reshape(count, width)

    D = np.stack([take(ns, ns) for _ in range(nt)]) if ns else np.zeros((nt, 0, 0))
    E = (
        np.stack([take(ns, ns) for _ in range(nt - 1)])
        if nt > 1
        else np.zeros((0, ns, ns))
    )
    F = np.stack([take(nb, ns) for _ in range(nt)]) if nb else np.zeros((nt, 0, ns))
    T = take(nb, nb) if nb else np.zeros((0, 0))
    return BtaMatrix(lay, D, E, F, T)


# ---------------------------------------------------------------------------
# dataset directories


def write_dataset(outdir, data: Dataset, truth=None):
    """y.csv / A.csv / Z.csv, plus truth.csv when a truth record is given."""
    os.makedirs(outdir, exist_ok=True)
    with open(os.path.join(outdir, "y.csv"), "w", encoding="utf-8") as fh:
        fh.write("y\n")
        for v in data.y:
            fh.write(_fmt(v) + "\n")
    with open(os.path.join(outdir, "A.csv"), "w", encoding="utf-8") as fh:
        fh.write("row,col,value\n")
        for r, c, v in zip(data.a_rows, data.a_cols, data.a_vals):
            fh.write(f"{int(r)},{int(c)},{_fmt(v)}\n")
    with open(os.path.join(outdir, "Z.csv"), "w", encoding="utf-8") as fh:
        fh.write(",".join(f"z{j}" for j in range(data.Z.shape[1])) + "\n")
        for row in data.Z:
            fh.write(",".join(_fmt(v) for v in row) + "\n")
    if truth is not None:
        write_truth(os.path.join(outdir, "truth.csv"), truth.theta, truth.beta)


def write_truth(path, theta, beta):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("name,value\n")
        for name, v in zip(HYPERPARAMETER_NAMES, theta.to_array()):
            fh.write(f"{name},{_fmt(v)}\n")
        for j, v in enumerate(np.asarray(beta)):
            fh.write(f"beta_{j},{_fmt(v)}\n")


def read_truth(path) -> dict:
    out = {}
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "name,value":
            raise ConfigError(f"{path}:1: expected header 'name,value'")
        for lineno, raw in enumerate(fh, 2):
            s = raw.strip()
            if not s:
                continue
            name, _, val = s.partition(",")
            try:
                out[name] = float(val)
            except ValueError:
                raise ConfigError(f"{path}:{lineno}: malformed number") from None
    return out


def _read_csv_lines(path, expect_header):
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip()
        if expect_header is not None and header != expect_header:
            raise ConfigError(
                f"{path}:1: expected header '{expect_header}', found '{header}'"
            )
        return [line.strip() for line in fh if line.strip()]


def read_dataset(datadir, layout: BtaLayout) -> Dataset:
    ypath = os.path.join(datadir, "y.csv")
    apath = os.path.join(datadir, "A.csv")
    zpath = os.path.join(datadir, "Z.csv")
    for p in (ypath, apath, zpath):
        if not os.path.exists(p):
            raise ConfigError(f"{p}: dataset file missing")
    y = np.array([float(s) for s in _read_csv_lines(ypath, "y")])
    trips = []
    for lineno, s in enumerate(_read_csv_lines(apath, "row,col,value"), 2):
        parts = s.split(",")
        if len(parts) != 3:
            raise ConfigError(f"{apath}:{lineno}: expected 'row,col,value'")
        try:
            trips.append((int(parts[0]), int(parts[1]), float(parts[2])))
        except ValueError:
            raise ConfigError(f"{apath}:{lineno}: malformed triplet") from None
    zlines = _read_csv_lines(zpath, None)
    if layout.n_b:
        Z = np.array([[float(t) for t in s.split(",")] for s in zlines])
        Z = Z.reshape(len(zlines), -1)
    else:
        Z = np.zeros((len(y), 0))
    rows = np.array([t[0] for t in trips], dtype=np.int64)
    cols = np.array([t[1] for t in trips], dtype=np.int64)
    vals = np.array([t[2] for t in trips], dtype=np.float64)
    return Dataset(layout=layout, y=y, a_rows=rows, a_cols=cols, a_vals=vals, Z=Z)


# ---------------------------------------------------------------------------
# run configs: line-oriented `key = value`, '#' comments, typos are errors


def parse_run_config(path, allowed) -> dict:
    """allowed maps key -> (kind, arity) with kind in int/float/floats/ints;
    arity constrains vector length (None = any)."""
    out = {}
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    with fh:
        for lineno, raw in enumerate(fh, 1):
            s = raw.split("#", 1)[0].strip()
            if not s:
                continue
            if "=" not in s:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, _, val = s.partition("=")
            key = key.strip()
            val = val.strip()
            if key not in allowed:
                raise ConfigError(f"{path}:{lineno}: unknown key '{key}'")
            if key in out:
                raise ConfigError(f"{path}:{lineno}: duplicate key '{key}'")
            out[key] = _convert(key, val, allowed[key], path, lineno)
    return out


def _convert(key, val, kind_arity, path, lineno):
    kind, arity = kind_arity
    try:
        if kind == "int":
            return int(val)
        if kind == "float":
            return float(val)
        toks = val.replace(",", " ").split()
        if arity is not None and len(toks) != arity:
            raise ConfigError(
                f"{path}:{lineno}: '{key}' needs {arity} values, got {len(toks)}"
            )
        if kind == "ints":
            return tuple(int(t) for t in toks)
        if kind == "floats":
            return tuple(float(t) for t in toks)
    except ValueError:
        raise ConfigError(f"{path}:{lineno}: malformed value for '{key}'") from None
    raise AssertionError(f"unhandled config kind {kind}")


# ---------------------------------------------------------------------------
# report files


def write_hyper_csv(path, marginals):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("name,mode_log,sd_log,mode_natural\n")
        for m in marginals:
            fh.write(
                f"{m.name},{_fmt(m.mode_log)},{_fmt(m.sd_log)},{_fmt(m.mode_natural)}\n"
            )


def write_latent_csv(path, means, sds):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("index,mean,sd\n")
        for i, (m, s) in enumerate(zip(means, sds)):
            fh.write(f"{i},{_fmt(m)},{_fmt(s)}\n")


def write_trace_csv(path, trace):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("iter,f,grad_norm,step\n")
        for row in trace:
            fh.write(
                f"{row.iteration},{_fmt(row.f)},{_fmt(row.grad_norm)},{_fmt(row.step)}\n"
            )


def write_timing_table(path, stage_snapshot, stage_order):
    """Plain-text breakdown: stage,count,total_seconds,fraction."""
    grand = sum(v[1] for v in stage_snapshot.values()) or 1.0
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("stage,count,total_seconds,fraction\n")
        for name in stage_order:
            count, seconds = stage_snapshot.get(name, (0, 0.0))
            fh.write(f"{name},{count},{_fmt(seconds)},{_fmt(seconds / grand)}\n")
