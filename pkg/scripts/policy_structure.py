"""Thresholds of the two-threshold policy as the multipliers move.

Writes results/policy_structure.csv with one row per (lambda_e, lambda_f).
"""

import csv

import numpy as np

from _common import LAMBDA_E, LAMBDA_F, OUT, SIGMA2
from wmdetect import WatermarkConfig, load_fixture
from wmdetect.policy import build_transition_sampler, make_grid, solve_policy, transition_matrices


def main(seed: int = 0):
    model, attack = load_fixture("system-a")
    wm = WatermarkConfig.diagonal(model.p, SIGMA2)
    sampler = build_transition_sampler(model, attack, wm, 2000, np.random.default_rng(seed))
    mats = transition_matrices(make_grid(), sampler)
    points = [(le, LAMBDA_F) for le in (0.05, 0.1, 0.2, 0.35, 0.5)] + [(LAMBDA_E, lf) for lf in (50, 200, 400)]
    OUT.mkdir(exist_ok=True)
    with open(OUT / "policy_structure.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lambda_e", "lambda_f", "th_s", "th_d", "pattern", "seed"])
        for le, lf in points:
            pol = solve_policy(model, attack, wm, le, lf, seed=seed, sampler=sampler, matrices=mats)
            pattern = "/".join(pol.value_table.pattern())
            print(f"lambda_e={le:<5} lambda_f={lf:<5} th_s={pol.th_s:.4f} th_d={pol.th_d:.4f} {pattern}")
            w.writerow([le, lf, repr(pol.th_s), repr(pol.th_d), pattern, seed])


if __name__ == "__main__":
    main()
