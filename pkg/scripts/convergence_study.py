"""Manufactured-solution convergence for the forward solver.

Halves dr and dtheta and quarters dt at each level; prints relative L2(Q)
errors and successive ratios (about 4 for a scheme of order 2 in space and 1
in time with dt ~ h^2).

    python scripts/convergence_study.py [--case dirichlet|robin] [--levels 3]
"""

import argparse
import time

from carleman_lab.forward import Problem
from carleman_lab.geometry import build_annulus_grid
from carleman_lab.manufactured import dirichlet_case, robin_dirichlet_case
from carleman_lab.norms import lq_norm


def run(case_name="dirichlet", levels=3, nr=8, ntheta=16, nt=8, theta=1.0):
    case = dirichlet_case() if case_name == "dirichlet" else robin_dirichlet_case()
    coeffs = case.coefficients()
    rows = []
    for k in range(levels):
        grid = build_annulus_grid(1.0, 2.0, nr * 2**k, ntheta * 2**k, 1.0, nt * 4**k)
        t0 = time.perf_counter()
        prob = Problem(grid, coeffs, case.bspec, case.ospec, theta=theta)
        y = prob.solve(case.source(grid), case.initial(grid), check_residual=False)
        ex = case.exact(grid)
        err = lq_norm(y - ex, grid, 2) / lq_norm(ex, grid, 2)
        rows.append((grid.nr, grid.ntheta, grid.nt, err, time.perf_counter() - t0))
    return rows


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--case", default="dirichlet", choices=["dirichlet", "robin"])
    ap.add_argument("--levels", type=int, default=3)
    a = ap.parse_args()
    rows = run(a.case, a.levels)
    print(f"{'nr':>4} {'nth':>4} {'nt':>5} {'rel L2 error':>14} {'ratio':>7} {'sec':>6}")
    prev = None
    for nr, nth, nt, err, sec in rows:
        ratio = "" if prev is None else f"{prev / err:7.3f}"
        print(f"{nr:4d} {nth:4d} {nt:5d} {err:14.6e} {ratio:>7} {sec:6.2f}")
        prev = err


if __name__ == "__main__":
    main()
