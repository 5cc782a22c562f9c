"""Accuracy and cost of the first-order approximation against Monte Carlo on the cost-ladder oligopoly.

Writes a CSV with one row per size. Monte-Carlo runs that would exceed the
time budget are extrapolated from a pilot batch and flagged.

    python3 scripts/oligopoly_race.py --sizes 5,10,15,20 --runs 5 --out race.csv
"""

import argparse
import time

import numpy as np

from scpuq.models.oligopoly import cost_ladder, cost_ladder_covariance, make_oligopoly
from scpuq.montecarlo import SamplingPlan, mc_covariance, mc_sample_count, race
from scpuq.ncp import classify_activity
from scpuq.reports import write_table_csv
from scpuq.solver import solve
from scpuq.uq import build_linear_response, propagate_covariance


def make(n):
    return make_oligopoly(cost_ladder(n)), cost_ladder_covariance(n)


def accuracy(n, runs, seed):
    p, C = make(n)
    x = solve(p).x_star
    sol = classify_activity(p, x)
    approx = float(np.trace(propagate_covariance(build_linear_response(p, sol), C).C_star))
    mc = mc_covariance(p, p.theta_mean, C, SamplingPlan(mc_sample_count(n), seed=seed), runs=runs, x_bar=x)
    active = int(np.sum(x > 0))
    return approx, min(mc.traces), max(mc.traces), active


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", default="5,10,15,20")
    ap.add_argument("--runs", type=int, default=5)
    ap.add_argument("--budget", type=float, default=60.0, help="seconds per Monte-Carlo run before extrapolating")
    ap.add_argument("--accuracy-max-n", type=int, default=20, help="largest n for the full accuracy comparison")
    ap.add_argument("--out", default="race.csv")
    args = ap.parse_args()
    sizes = [int(s) for s in args.sizes.split(",")]

    t0 = time.perf_counter()
    rows = []
    for r in race(make, sizes, budget=args.budget):
        band = ("", "", "")
        if r.n <= args.accuracy_max_n and not r.extrapolated:
            approx, lo, hi, active = accuracy(r.n, args.runs, seed=r.n)
            band = (lo, hi, str(lo <= approx <= hi).lower())
            print(f"n={r.n:3d}: approx {approx:.3f}, MC band [{lo:.3f}, {hi:.3f}], {active} active players")
        tag = " (extrapolated)" if r.extrapolated else ""
        print(f"n={r.n:3d}: approx {r.approx_time * 1e3:.2f} ms, MC {r.mc_samples} solves {r.mc_time:.2f} s{tag}")
        rows.append([r.n, r.approx_time, r.approx_trace, r.mc_samples, r.mc_time, *band, str(r.extrapolated).lower()])
    write_table_csv(args.out, ["n", "approx_time", "approx_trace", "mc_samples", "mc_time",
                               "band_lo", "band_hi", "inside", "extrapolated"], rows)
    print(f"wrote {args.out} in {time.perf_counter() - t0:.1f} s")


if __name__ == "__main__":
    main()
