"""Proposed rule against always-on (equal variance, equal cost) and periodic
watermarking at the System-A operating point. Writes results/baselines.csv."""

from _common import OUT, operating_point
from wmdetect.montecarlo import BASELINES, McConfig, compare_baselines, result_rows, write_results_csv


def main(trials: int = 10_000, seed: int = 3):
    model, attack, wm, pol = operating_point()
    cfg = McConfig(trials=trials, seed=seed)
    rows = []
    for mode in BASELINES:
        res = compare_baselines(mode, model, attack, wm, pol.thresholds, cfg)
        P, B = res["proposed"], res["baseline"]
        print(f"{mode:12s} proposed ADD {P.add:6.2f} FAR {P.far:.4f} dLQG {P.delta_lqg:.4f} | "
              f"baseline ADD {B.add:6.2f} FAR {B.far:.4f} dLQG {B.delta_lqg:.4f}")
        rows += result_rows(P, cfg.digest(), seed, f"{mode}/proposed_")
        rows += result_rows(B, cfg.digest(), seed, f"{mode}/baseline_")
    OUT.mkdir(exist_ok=True)
    write_results_csv(OUT / "baselines.csv", rows)


if __name__ == "__main__":
    main()
