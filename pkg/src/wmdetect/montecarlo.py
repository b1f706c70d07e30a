"""Monte-Carlo estimates of ADD, FAR, ANW, control-cost increase, overshoot
statistics and baseline comparisons."""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.stats import norm

from .engine import NEVER, Arm, BatchLoop, BatchOutcome, batch_seeds, simulate_batch
from .linalg import SystemModel
from .plant import BURN_IN, AttackModel, WatermarkConfig
from .theory import (
    OvershootStats,
    baseline_variance_scale,
    kld_post_pre,
    lqg_intermediates,
    theoretical_add,
    threshold_transform,
)

THREADS_ENV = "WMDETECT_THREADS"
RESULT_COLUMNS = ("metric", "estimate", "half_width", "trials", "censored", "config_hash", "seed")


class EstimationError(RuntimeError):
    """Not enough usable trials to form an estimate."""


@dataclass(frozen=True)
class McConfig:
    trials: int = 10_000
    horizon: Optional[int] = None  # steps past the onset; None -> 20 x first-order ADD
    seed: int = 0
    attack_time: Optional[int] = None  # None samples the geometric prior
    confidence: float = 0.95
    batch_size: int = 2_000
    burn_in: int = BURN_IN

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if self.horizon is not None and self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if not 0.0 < self.confidence < 1.0:
            raise ValueError("confidence must lie in (0, 1)")

    @property
    def z(self) -> float:
        return float(norm.ppf(0.5 + 0.5 * self.confidence))

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class McResult:
    name: str
    add: float
    far: float
    anw: float
    delta_lqg: float
    add_hw: float
    far_hw: float
    anw_hw: float
    delta_lqg_hw: float
    trials: int
    detected: int
    censored: int
    wm_freq_pre: float
    wm_freq_post: float
    overshoot: Optional[OvershootStats] = None
    extra: dict = field(default_factory=dict)

    @property
    def censored_fraction(self) -> float:
        return self.censored / self.trials

    @property
    def wm_freq_ratio(self) -> float:
        return self.wm_freq_post / self.wm_freq_pre if self.wm_freq_pre > 0 else math.inf


def _threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def default_horizon(model: SystemModel, attack: AttackModel, wm: WatermarkConfig, th_d: float) -> int:
    """20 x the first-order ADD, at least 200 steps."""
    if not 0.0 < th_d < 1.0:
        return 200
    kld = kld_post_pre(model, attack, wm.Sigma_e)[0]
    add = theoretical_add(max(threshold_transform(th_d, attack.rho), 0.0), kld, attack.rho)
    return max(200, int(math.ceil(20 * add)))


def run_arms(model, attack, arms, cfg: McConfig, track_cost=False, horizon=None) -> BatchOutcome:
    """Run all arms over ``cfg.trials`` trials in independently seeded batches."""
    horizon = horizon or cfg.horizon
    if horizon is None:
        raise ValueError("horizon must be given")
    jobs = batch_seeds(cfg.seed, cfg.trials, cfg.batch_size)

    def one(job):
        n, rng = job
        return simulate_batch(model, attack, arms, n, rng, horizon, cfg.attack_time, cfg.burn_in, track_cost=track_cost)

    workers = _threads()
    if workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(one, jobs))
    else:
        parts = [one(j) for j in jobs]
    return BatchOutcome.concat(parts)


def summarize(out: BatchOutcome, i: int, z: float = 1.96, name: Optional[str] = None) -> McResult:
    """Reduce the records of arm ``i`` to point estimates and half-widths."""
    G = out.attack_time
    tau = out.tau[i]
    cens = out.censored[i]
    N = G.shape[0]
    false_alarm = tau < G
    far = float(false_alarm.mean())
    far_hw = z * math.sqrt(max(far * (1 - far), 1.0 / N) / N)
    det = (~false_alarm) & (~cens) & (tau < NEVER)
    if det.sum() == 0:
        raise EstimationError(f"arm {out.names[i]}: no trial detected the attack within the horizon")
    delay = (tau - G)[det].astype(float)
    add = float(delay.mean())
    add_hw = z * float(delay.std(ddof=1)) / math.sqrt(len(delay)) if len(delay) > 1 else math.inf
    wm = out.wm_pre[i].astype(float)
    anw = float(wm.mean())
    anw_hw = z * float(wm.std(ddof=1)) / math.sqrt(N) if N > 1 else math.inf
    dl, dl_hw = math.nan, math.nan
    if out.cost_diff is not None:
        D, T = out.cost_diff[i], out.cost_steps[i].astype(float)
        if T.sum() > 0:
            dl = float(D.sum() / T.sum())
            resid = D - dl * T
            dl_hw = z * math.sqrt(float((resid ** 2).sum())) / float(T.sum()) if N > 1 else math.inf
    pre_steps = out.pre_steps[i].sum()
    post_steps = out.post_steps[i].sum()
    freq_pre = float(out.wm_pre[i].sum() / pre_steps) if pre_steps else math.nan
    freq_post = float(out.wm_post[i].sum() / post_steps) if post_steps else math.nan
    return McResult(name or out.names[i], add, far, anw, dl, add_hw, far_hw, anw_hw, dl_hw, N,
                    int(det.sum()), int(cens.sum()), freq_pre, freq_post)


def _horizon(cfg, model, attack, wm, th_d):
    return cfg.horizon or default_horizon(model, attack, wm, th_d)


def estimate_add_far_anw(model, attack, wm: WatermarkConfig, thresholds, cfg: McConfig,
                         track_cost: bool = True) -> McResult:
    """Monte-Carlo ADD, FAR, ANW and cost increase of the two-threshold rule."""
    th_s, th_d = thresholds
    arm = Arm.threshold("proposed", wm, th_s, th_d)
    out = run_arms(model, attack, [arm], cfg, track_cost, _horizon(cfg, model, attack, wm, th_d))
    return summarize(out, 0, cfg.z)


def estimate_always_on(model, attack, wm, th_d, cfg: McConfig, track_cost: bool = True) -> McResult:
    arm = Arm.always_on("always-on", wm, th_d)
    out = run_arms(model, attack, [arm], cfg, track_cost, _horizon(cfg, model, attack, wm, th_d))
    return summarize(out, 0, cfg.z)


# ---------------------------------------------------------------- overshoot


def overshoot_from_paths(z_inc, log_sr, Th_D: float, rho: float):
    """Ladder overshoot and slowly changing term from post-onset paths.

    ``z_inc[i, j]`` is the log-likelihood increment of trial i at post-onset
    step j + 1 and ``log_sr`` the Shiryaev statistic at that step. Returns
    (r, l_terminal, n_cross) with NaN r / n for trials whose ladder variable
    S_j = Z_j + j |log(1 - rho)| never reaches Th_D.
    """
    z_inc = np.atleast_2d(np.asarray(z_inc, dtype=float))
    log_sr = np.atleast_2d(np.asarray(log_sr, dtype=float))
    H = z_inc.shape[1]
    steps = np.arange(1, H + 1)
    S = np.cumsum(z_inc, axis=1) + steps * abs(math.log1p(-rho))
    hit = S >= Th_D
    crossed = hit.any(axis=1)
    first = np.argmax(hit, axis=1)
    rows = np.arange(S.shape[0])
    r = np.where(crossed, S[rows, first] - Th_D, np.nan)
    n = np.where(crossed, first + 1.0, np.nan)
    l_term = log_sr[:, -1] - S[:, -1]
    return r, l_term, n


def collect_post_onset_paths(model, attack, wm, th_s: float, Th_D: float, N: int, H: int,
                             rng: np.random.Generator, onset: str = "prior", burn_in_steps: int = BURN_IN):
    """Simulate the two-threshold rule without stopping and record H post-onset steps.

    With ``onset='prior'`` the onset is drawn from the geometric prior and
    trials whose statistic reached Th_D before it (false alarms) are flagged.
    With ``onset='first'`` the attack is present from k = 1 and SR_0 = 0.
    On steps whose input carried no watermark the increment is the
    likelihood ratio the watermarked hypothesis would have produced, using the
    watermark draw that was withheld, so that log SR = S + l holds exactly.
    """
    if onset not in ("prior", "first"):
        raise ValueError("onset must be 'prior' or 'first'")
    arm = Arm("overshoot", wm, th_s=th_s, th_d=np.inf, stop=False)
    loop = BatchLoop(model, attack, [arm], N, rng, 1 if onset == "first" else None, burn_in_steps)
    lik = loop.lik
    CB = lik.CB
    z_inc = np.zeros((N, H))
    lsr = np.zeros((N, H))
    l_direct = np.zeros((N, H))
    false_alarm = np.zeros(N, dtype=bool)
    j = np.zeros(N, dtype=np.int64)
    l_below = np.zeros(N)
    zeros_e = np.zeros((N, model.p))
    while loop.N:
        out = loop.step()
        idx = loop.index
        Gm = loop.Gamma
        post = out["k"] >= Gm
        log_sr = out["log_sr"][0]
        false_alarm[idx] |= (~post) & (log_sr >= Th_D)
        if not post.any():
            continue
        g = out["gamma"][0]
        la = out["log_L"][0]
        mu1_c, _ = lik.means(out["recv_prev"][0], out["xhat_prev"][0], zeros_e[: len(idx)])
        hyp = lik.f1.logpdf(g - mu1_c) - lik.f0.logpdf(g - out["e_raw_prev"][0] @ CB.T)
        wm_on = out["s_km2"][0] == 1
        inc = np.where(wm_on, la, hyp)
        rows = idx[post]
        cols = j[rows]
        z_inc[rows, cols] = inc[post]
        lsr[rows, cols] = log_sr[post]
        l_below[rows] += np.where(wm_on, 0.0, la - hyp)[post]
        l_direct[rows, cols] = l_below[rows]
        j[rows] += 1
        done = j[idx] >= H
        if done.any():
            loop.keep(~done)
    return z_inc, lsr, false_alarm, l_direct


def estimate_overshoot_stats(model, attack, wm, Th_S: float, Th_D: float, cfg: McConfig,
                             onset: str = "prior", trials: Optional[int] = None,
                             horizon: Optional[int] = None) -> OvershootStats:
    """Monte-Carlo r_bar, l_bar and xi for the two-threshold rule."""
    rho = attack.rho
    if Th_D < threshold_transform(0.95, rho) - 1e-12:
        raise ValueError("overshoot statistics need Th_D >= the transform of 0.95")
    th_s = 1.0 / (1.0 + math.exp(-(Th_S + math.log(rho)))) if math.isfinite(Th_S) else (0.0 if Th_S < 0 else 1.0)
    kld = kld_post_pre(model, attack, wm.Sigma_e)[0]
    H = horizon or max(100, int(math.ceil(6 * theoretical_add(Th_D, kld, rho))))
    n_trials = trials or min(cfg.trials, 4000)
    rs, ls = [], []
    censored = 0
    for n, rng in batch_seeds(cfg.seed + 7919, n_trials, cfg.batch_size):
        z_inc, lsr, fa, _ = collect_post_onset_paths(model, attack, wm, th_s, Th_D, n, H, rng, onset, cfg.burn_in)
        r, l_term, _ = overshoot_from_paths(z_inc[~fa], lsr[~fa], Th_D, rho)
        censored += int(np.isnan(r).sum())
        rs.append(r[~np.isnan(r)])
        ls.append(l_term)
    r = np.concatenate(rs)
    l = np.concatenate(ls)
    if len(r) == 0:
        raise EstimationError(f"no ladder crossing of Th_D within {H} steps ({censored} censored)")
    z = cfg.z
    sem = lambda a: z * float(a.std(ddof=1)) / math.sqrt(len(a)) if len(a) > 1 else math.inf
    xi_s = np.exp(-r)
    return OvershootStats(float(r.mean()), float(l.mean()), float(xi_s.mean()), len(r),
                          sem(r), sem(l), sem(xi_s), censored)


# ---------------------------------------------------------------- ANW renewal


@dataclass(frozen=True)
class RenewalAnw:
    anw: float
    E_t1: float
    E_t2: float
    p_before_attack: float
    crossed_fraction: float
    flagged: bool


def _sojourns(above: np.ndarray):
    """Complete run lengths above and below for each row after its first up-crossing."""
    t1, t2, first = [], [], []
    for row in above:
        ups = np.flatnonzero(row[1:] & ~row[:-1]) + 1
        if row[0]:
            ups = np.r_[0, ups]
        if len(ups) == 0:
            first.append(np.inf)
            continue
        first.append(ups[0])
        downs = np.flatnonzero(~row[1:] & row[:-1]) + 1
        downs = downs[downs > ups[0]]
        for u in ups:
            nxt = downs[downs > u]
            if len(nxt):
                t1.append(nxt[0] - u)
        for d in downs:
            nxt = ups[ups > d]
            if len(nxt):
                t2.append(nxt[0] - d)
    return np.array(t1, float), np.array(t2, float), np.array(first, float)


def estimate_anw_renewal(model, attack, wm, Th_S: float, cfg: McConfig, chains: int = 400,
                         steps: Optional[int] = None) -> RenewalAnw:
    """Renewal approximation of ANW from attack-free sojourns of log SR around Th_S.

    ANW ~ P{t < Gamma} E[t1] / (E[t1] + E[t2]) / rho, where t is the first
    up-crossing time and t1, t2 the sojourns above and below Th_S. The
    expected number of pre-attack steps left after t is 1/rho by the
    memorylessness of the geometric prior.
    """
    rho = attack.rho
    steps = steps or int(math.ceil(8.0 / rho))
    if not math.isfinite(Th_S) and Th_S > 0:
        return RenewalAnw(0.0, 0.0, math.inf, 0.0, 0.0, True)
    th_s = 1.0 / (1.0 + math.exp(-(Th_S + math.log(rho)))) if math.isfinite(Th_S) else 0.0
    arm = Arm("renewal", wm, th_s=th_s, th_d=np.inf, stop=False)
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(3)[2])
    loop = BatchLoop(model, attack, [arm], chains, rng, np.inf, cfg.burn_in)
    above = np.zeros((chains, steps + 1), dtype=bool)
    for k in range(1, steps + 1):
        out = loop.step()
        above[:, k] = out["log_sr"][0] >= Th_S
    t1, t2, first = _sojourns(above[:, 1:])
    first = first + 1  # step index of the first up-crossing
    crossed = np.isfinite(first)
    p_before = float(np.where(crossed, (1 - rho) ** np.where(crossed, first, 0), 0.0).mean())
    if not crossed.any() or len(t1) == 0:
        return RenewalAnw(0.0, float(t1.mean()) if len(t1) else 0.0, float(t2.mean()) if len(t2) else math.inf,
                          p_before, float(crossed.mean()), True)
    E1 = float(t1.mean())
    E2 = float(t2.mean()) if len(t2) else 0.0
    anw = p_before * E1 / (E1 + E2) / rho
    return RenewalAnw(anw, E1, E2, p_before, float(crossed.mean()), False)


# ---------------------------------------------------------------- KLD


def estimate_kld_mc(model, attack, wm, steps: int, rng: np.random.Generator, chains: int = 1000,
                    warmup: int = 50, burn_in_steps: int = BURN_IN):
    """Mean post-onset log-likelihood increment with the watermark always on.

    Returns (mean, half-width at 95%, samples).
    """
    per_chain = int(math.ceil(steps / chains))
    arm = Arm("kld", wm, th_s=0.0, th_d=np.inf, stop=False)
    loop = BatchLoop(model, attack, [arm], chains, rng, 1, burn_in_steps)
    vals = []
    for k in range(warmup + per_chain):
        out = loop.step()
        if k >= warmup:
            vals.append(out["log_L"][0])
    v = np.concatenate(vals)[:steps]
    # batch means over chains absorb the serial correlation
    chain_means = np.stack(vals).mean(axis=0)
    hw = 1.96 * float(chain_means.std(ddof=1)) / math.sqrt(chains)
    return float(v.mean()), hw, len(v)


# ---------------------------------------------------------------- baselines


def periodic_period(model: SystemModel, wm: WatermarkConfig, budget: float) -> int:
    """Smallest T with tr(H Sigma_e) / T <= budget."""
    if not budget > 0:
        raise ValueError("cost budget must be positive")
    tr = float(np.trace(lqg_intermediates(model).H @ wm.Sigma_e))
    return max(1, int(math.ceil(tr / budget - 1e-12)))


BASELINES = ("PW-Sigma_e", "PW-DeltaLQG", "periodic")


def compare_baselines(mode: str, model, attack, wm: WatermarkConfig, thresholds, cfg: McConfig,
                      anw: Optional[float] = None) -> dict:
    """Paired comparison of the proposed rule against an always-on or periodic baseline.

    All arms share the noise of each trial. For PW-DeltaLQG and periodic the
    baseline is matched to the proposed rule's cost rho ANW tr(H Sigma_e),
    with ANW taken from ``anw`` or from a pilot run with the same seed.
    Returns {"proposed": McResult, "baseline": McResult, "scale" or "period": ...}.
    """
    if mode not in BASELINES:
        raise ValueError(f"unknown baseline {mode!r}; choose from {BASELINES}")
    th_s, th_d = thresholds
    horizon = _horizon(cfg, model, attack, wm, th_d)
    proposed = Arm.threshold("proposed", wm, th_s, th_d)
    info = {}
    if mode == "PW-Sigma_e":
        base = Arm.always_on("PW-Sigma_e", wm, th_d)
    else:
        if anw is None:
            anw = estimate_add_far_anw(model, attack, wm, thresholds, replace(cfg, horizon=horizon), track_cost=False).anw
        info["anw_pilot"] = anw
        if mode == "PW-DeltaLQG":
            c = baseline_variance_scale(attack.rho, anw)
            info["scale"] = c
            base = Arm.always_on("PW-DeltaLQG", wm.scaled(c), th_d)
        else:
            budget = attack.rho * anw * float(np.trace(lqg_intermediates(model).H @ wm.Sigma_e))
            T = periodic_period(model, wm, budget)
            info["period"] = T
            info["budget"] = budget
            base = Arm.periodic("periodic", wm, T, th_d)
    out = run_arms(model, attack, [proposed, base], cfg, track_cost=True, horizon=horizon)
    res = {"proposed": summarize(out, 0, cfg.z), "baseline": summarize(out, 1, cfg.z)}
    res.update(info)
    return res


# ---------------------------------------------------------------- output


def result_rows(res: McResult, config_hash: str, seed: int, prefix: str = ""):
    rows = [
        ("add", res.add, res.add_hw, res.detected),
        ("far", res.far, res.far_hw, res.trials),
        ("anw", res.anw, res.anw_hw, res.trials),
        ("delta_lqg", res.delta_lqg, res.delta_lqg_hw, res.trials),
        ("wm_freq_pre", res.wm_freq_pre, math.nan, res.trials),
        ("wm_freq_post", res.wm_freq_post, math.nan, res.trials),
    ]
    if res.overshoot is not None:
        o = res.overshoot
        rows += [("r_bar", o.r_bar, o.r_half_width, o.mc_trials), ("l_bar", o.l_bar, o.l_half_width, o.mc_trials),
                 ("xi", o.xi, o.xi_half_width, o.mc_trials)]
    return [(prefix + m, est, hw, n, res.censored, config_hash, seed) for m, est, hw, n in rows]


def write_results_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULT_COLUMNS)
        for r in rows:
            w.writerow([r[0]] + [repr(float(x)) if isinstance(x, float) else x for x in r[1:]])
