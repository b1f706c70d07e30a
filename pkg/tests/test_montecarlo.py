import math

import numpy as np
import pytest

from wmdetect.montecarlo import (
    McConfig,
    compare_baselines,
    estimate_add_far_anw,
    estimate_anw_renewal,
    estimate_overshoot_stats,
    overshoot_from_paths,
    periodic_period,
    result_rows,
    write_results_csv,
)
from wmdetect.theory import lqg_intermediates, threshold_transform


def test_config_validation():
    with pytest.raises(ValueError):
        McConfig(trials=0)
    with pytest.raises(ValueError):
        McConfig(confidence=1.0)
    assert McConfig().z == pytest.approx(1.959964, abs=1e-6)
    assert McConfig(seed=1).digest() != McConfig(seed=2).digest()


def test_zero_detection_threshold_alarms_at_first_step(system_a, wm_a):
    res = estimate_add_far_anw(*system_a, wm_a, (0.0, 0.0), McConfig(trials=2000, seed=1, horizon=5))
    assert res.far == pytest.approx(1 - 0.001, abs=res.far_hw + 1e-3)


def test_equal_thresholds_never_watermark(system_a, wm_a):
    res = estimate_add_far_anw(*system_a, wm_a, (0.95, 0.95), McConfig(trials=1000, seed=2))
    assert res.anw == 0.0 and res.delta_lqg == 0.0


def test_seeded_runs_reproduce(system_a, wm_a, monkeypatch):
    cfg = McConfig(trials=600, seed=4, batch_size=200)
    a = estimate_add_far_anw(*system_a, wm_a, (0.3, 0.95), cfg)
    monkeypatch.setenv("WMDETECT_THREADS", "3")
    b = estimate_add_far_anw(*system_a, wm_a, (0.3, 0.95), cfg)
    assert (a.add, a.far, a.anw, a.delta_lqg) == (b.add, b.far, b.anw, b.delta_lqg)


def test_far_matches_detector_frequency(system_a, wm_a):
    """FAR from the harness equals the plain fraction of alarms before onset."""
    res = estimate_add_far_anw(*system_a, wm_a, (0.3, 0.99), McConfig(trials=3000, seed=8))
    assert 0 <= res.far <= 0.02
    assert res.detected + round(res.far * res.trials) + res.censored <= res.trials


def test_overshoot_deterministic_walk():
    rho, c, Th = 0.01, 0.7, 9.3
    a = abs(math.log1p(-rho))
    z = np.full((3, 40), c)
    lsr = np.cumsum(z, axis=1) + np.arange(1, 41) * a + 0.25
    r, l_term, n = overshoot_from_paths(z, lsr, Th, rho)
    n_ref = math.ceil(Th / (c + a))
    np.testing.assert_allclose(n, n_ref)
    np.testing.assert_allclose(r, n_ref * (c + a) - Th, atol=1e-12)
    np.testing.assert_allclose(l_term, 0.25, atol=1e-12)


def test_overshoot_uncrossed_is_nan():
    r, _, n = overshoot_from_paths(np.full((1, 5), 0.1), np.zeros((1, 5)), 50.0, 0.01)
    assert np.isnan(r[0]) and np.isnan(n[0])


def test_overshoot_stats_ranges(system_a, wm_a):
    model, attack = system_a
    Th_S = threshold_transform(0.3, attack.rho)
    Th_D = threshold_transform(0.95, attack.rho)
    st = estimate_overshoot_stats(model, attack, wm_a, Th_S, Th_D, McConfig(trials=800, seed=3))
    assert 0 < st.xi <= 1
    assert st.r_bar >= 0
    with pytest.raises(ValueError):
        estimate_overshoot_stats(model, attack, wm_a, Th_S, threshold_transform(0.5, attack.rho), McConfig())


def test_renewal_anw_limits(system_a, wm_a):
    model, attack = system_a
    assert estimate_anw_renewal(model, attack, wm_a, math.inf, McConfig()).anw == 0.0
    low = estimate_anw_renewal(model, attack, wm_a, -50.0, McConfig(seed=1), chains=20, steps=300)
    assert low.anw >= 0


def test_periodic_period():
    from wmdetect import WatermarkConfig, load_fixture

    model, _ = load_fixture("system-a")
    wm = WatermarkConfig.diagonal(2, 1.19)
    tr = np.trace(lqg_intermediates(model).H @ wm.Sigma_e)
    assert periodic_period(model, wm, tr) == 1
    assert periodic_period(model, wm, tr / 10) == 10
    assert periodic_period(model, wm, tr / 10.5) == 11
    with pytest.raises(ValueError):
        periodic_period(model, wm, 0.0)


def test_compare_rejects_unknown_mode(system_a, wm_a):
    with pytest.raises(ValueError):
        compare_baselines("nope", *system_a, wm_a, (0.3, 0.9), McConfig(trials=10))


def test_results_csv_is_byte_stable(system_a, wm_a, tmp_path):
    cfg = McConfig(trials=300, seed=6)
    paths = []
    for i in range(2):
        res = estimate_add_far_anw(*system_a, wm_a, (0.3, 0.95), cfg)
        paths.append(tmp_path / f"r{i}.csv")
        write_results_csv(paths[-1], result_rows(res, cfg.digest(), cfg.seed))
    assert paths[0].read_bytes() == paths[1].read_bytes()
    header, first = paths[0].read_text().splitlines()[:2]
    assert header == "metric,estimate,half_width,trials,censored,config_hash,seed"
    assert first.startswith("add,") and first.endswith(f",{cfg.digest()},6")
