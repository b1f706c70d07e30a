"""Shared setup for the experiment scripts: System-A operating point."""

from pathlib import Path

from wmdetect import WatermarkConfig, load_fixture
from wmdetect.policy import solve_policy

OUT = Path(__file__).resolve().parent.parent / "results"
SIGMA2 = 1.19
LAMBDA_E, LAMBDA_F = 0.2, 100.0


def operating_point(seed: int = 0):
    model, attack = load_fixture("system-a")
    wm = WatermarkConfig.diagonal(model.p, SIGMA2)
    pol = solve_policy(model, attack, wm, LAMBDA_E, LAMBDA_F, seed=seed)
    return model, attack, wm, pol
