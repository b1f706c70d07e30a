import numpy as np
import pytest

from wmdetect.detector import decide
from wmdetect.engine import NEVER, Arm, BatchOutcome, batch_seeds, simulate_batch
from wmdetect.plant import run_closed_loop


@pytest.mark.parametrize("seed", [0, 1, 2, 3, 4])
def test_single_trial_batch_replays_single_stream(system_a, wm_a, seed):
    model, attack = system_a
    th = (0.3, 0.99)
    trace = run_closed_loop(model, attack, wm_a, lambda k, p: decide(p, *th), 1000,
                            np.random.default_rng(seed), attack_time=200)
    out = simulate_batch(model, attack, [Arm.threshold("p", wm_a, *th)], 1, np.random.default_rng(seed), 801,
                         attack_time=200)
    assert trace.detection_time is not None
    assert out.tau[0, 0] == trace.detection_time
    assert out.wm_pre[0, 0] + out.wm_post[0, 0] == sum(trace.s)


def test_arms_share_noise(system_a, wm_a):
    model, attack = system_a
    arms = [Arm.threshold("a", wm_a, 0.3, 0.99), Arm.threshold("b", wm_a, 0.3, 0.99)]
    out = simulate_batch(model, attack, arms, 200, np.random.default_rng(0), 300)
    np.testing.assert_array_equal(out.tau[0], out.tau[1])


def test_always_on_detects_fixed_onset(system_a, wm_a):
    model, attack = system_a
    out = simulate_batch(model, attack, [Arm.always_on("on", wm_a, 0.99)], 1000, np.random.default_rng(5),
                         2000, attack_time=500)
    detected_after = (out.tau[0] >= 500) & (out.tau[0] < NEVER)
    false_alarm = out.tau[0] < 500
    assert detected_after.sum() >= 0.99 * (~false_alarm).sum()


def test_attack_free_needs_max_steps(system_a, wm_a):
    with pytest.raises(ValueError):
        simulate_batch(*system_a, [Arm.always_on("on", wm_a, 0.99)], 5, np.random.default_rng(0), 10,
                       attack_time=np.inf)


def test_arm_validation(wm_a):
    with pytest.raises(ValueError):
        Arm.threshold("x", wm_a, 0.9, 0.5)
    with pytest.raises(ValueError):
        Arm.periodic("x", wm_a, 0, 0.9)


def test_batch_seeds_partition():
    parts = batch_seeds(7, 4500, 2000)
    assert [n for n, _ in parts] == [2000, 2000, 500]
    a = [g.standard_normal() for _, g in batch_seeds(7, 4500, 2000)]
    b = [g.standard_normal() for _, g in parts]
    assert a == b and len(set(a)) == 3


def test_outcome_concat(system_a, wm_a):
    model, attack = system_a
    arms = [Arm.threshold("p", wm_a, 0.3, 0.95)]
    parts = [simulate_batch(model, attack, arms, n, g, 200) for n, g in batch_seeds(1, 30, 10)]
    out = BatchOutcome.concat(parts)
    assert out.tau.shape == (1, 30) and out.attack_time.shape == (30,)
