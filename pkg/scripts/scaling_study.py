"""Kernel scaling sweep: factorize+selinv time vs n_t and block size.

Both kernels are O(n_t * n_s^3), so doubling n_t should double the median
and the per-doubling ratio column should hover around 2. Run with BLAS
pinned to one thread so the numbers reflect the algorithm, not oversubscription.
"""

from __future__ import annotations

import argparse
import csv
import sys
import time

import numpy as np
from threadpoolctl import threadpool_limits

from btainla.bta import bta_factorize, bta_selected_inverse
from btainla.model import HyperParameters, assemble_prior_precision, build_lattice_spec


def lattice_dims(n_s):
    root = int(np.sqrt(n_s))
    for rows in range(root, 0, -1):
        if n_s % rows == 0:
            return rows, n_s // rows
    return 1, n_s


def median_kernel_seconds(Q, reps):
    fac, sel = [], []
    with threadpool_limits(limits=1):
        for _ in range(reps):
            t0 = time.perf_counter()
            L = bta_factorize(Q)
            t1 = time.perf_counter()
            bta_selected_inverse(L)
            t2 = time.perf_counter()
            fac.append(t1 - t0)
            sel.append(t2 - t1)
    return float(np.median(fac)), float(np.median(sel))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n-s", type=int, nargs="+", default=[64])
    ap.add_argument("--n-t", type=int, nargs="+", default=[32, 64, 128, 256])
    ap.add_argument("--n-b", type=int, default=4)
    ap.add_argument("--reps", type=int, default=5)
    ap.add_argument("--csv", type=str, default=None, help="optional output path")
    args = ap.parse_args(argv)

    theta = HyperParameters.from_array(np.zeros(4))
    rows_out = []
    print(f"{'n_s':>5} {'n_t':>5} {'n':>8} {'factorize':>10} {'selinv':>10} {'ratio':>6}")
    for n_s in args.n_s:
        rows, cols = lattice_dims(n_s)
        prev = None
        for n_t in args.n_t:
            spec = build_lattice_spec(rows, cols, n_t, args.n_b)
            Q = assemble_prior_precision(spec, theta)
            t_fac, t_sel = median_kernel_seconds(Q, args.reps)
            total = t_fac + t_sel
            ratio = "" if prev is None else f"{total / prev:.2f}"
            prev = total
            print(f"{n_s:>5} {n_t:>5} {Q.layout.n:>8} {t_fac:>10.4f} {t_sel:>10.4f} {ratio:>6}")
            rows_out.append((n_s, n_t, Q.layout.n, t_fac, t_sel))

    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["n_s", "n_t", "n", "median_seconds_factorize", "median_seconds_selinv"])
            w.writerows(rows_out)
        print(f"wrote {args.csv}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
