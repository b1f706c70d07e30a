"""Vectorized closed-loop simulator for Monte-Carlo work.

Several detection "arms" (the proposed two-threshold rule, always-on
watermarking, a periodic schedule, ...) run in lock-step on one batch of
trials and consume the same noise draws, so comparisons between arms are
paired. Arrays carry the arm on axis 0 and the trial on axis 1.

The draw order matches :func:`wmdetect.plant.run_closed_loop`, so a one-trial,
one-arm batch replays the single-stream simulator exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .detector import LikelihoodModel, posterior_from_log_sr, update_log_sr
from .linalg import SystemModel
from .plant import BURN_IN, AttackModel, NoiseSource, WatermarkConfig, burn_in

NEVER = np.iinfo(np.int64).max // 4


@dataclass(frozen=True, eq=False)
class Arm:
    """One detection/watermarking rule.

    ``period`` > 0 selects the periodic schedule s_k = 1 iff k % period == 0;
    otherwise s_k = 1 iff p_k >= th_s. The alarm fires at p_k >= th_d unless
    ``stop`` is false.
    """

    name: str
    wm: WatermarkConfig
    th_s: float = np.inf
    th_d: float = np.inf
    period: int = 0
    stop: bool = True

    @classmethod
    def threshold(cls, name, wm, th_s, th_d):
        if th_s > th_d:
            raise ValueError(f"{name}: th_s ({th_s}) must not exceed th_d ({th_d})")
        return cls(name, wm, float(th_s), float(th_d))

    @classmethod
    def always_on(cls, name, wm, th_d):
        return cls(name, wm, 0.0, float(th_d))

    @classmethod
    def periodic(cls, name, wm, period, th_d):
        if period < 1:
            raise ValueError("period must be >= 1")
        return cls(name, wm, np.inf, float(th_d), int(period))


@dataclass
class BatchOutcome:
    """Per-arm, per-trial records of one batch (arrays shaped (arms, trials))."""

    names: list
    attack_time: np.ndarray  # (trials,), NEVER when no attack
    tau: np.ndarray  # alarm step, NEVER when censored or no alarm
    censored: np.ndarray
    wm_pre: np.ndarray  # sum of s_k for 0 <= k < min(tau, Gamma)
    pre_steps: np.ndarray
    wm_post: np.ndarray  # sum of s_k for Gamma <= k < tau
    post_steps: np.ndarray
    cost_diff: Optional[np.ndarray] = None  # pre-attack sum of cost(arm) - cost(no watermark)
    cost_steps: Optional[np.ndarray] = None

    def arm(self, name: str) -> int:
        return self.names.index(name)

    @classmethod
    def concat(cls, parts: Sequence["BatchOutcome"]) -> "BatchOutcome":
        first = parts[0]
        fields = {}
        for key in ("attack_time",):
            fields[key] = np.concatenate([getattr(p, key) for p in parts])
        for key in ("tau", "censored", "wm_pre", "pre_steps", "wm_post", "post_steps", "cost_diff", "cost_steps"):
            if getattr(first, key) is None:
                fields[key] = None
            else:
                fields[key] = np.concatenate([getattr(p, key) for p in parts], axis=1)
        return cls(names=list(first.names), **fields)


class BatchLoop:
    """Mutable lock-step state for ``arms`` x ``N`` closed loops."""

    def __init__(self, model: SystemModel, attack: AttackModel, arms: Sequence[Arm], N: int,
                 rng: np.random.Generator, attack_time=None, burn_in_steps: int = BURN_IN,
                 Q_z=None, with_baseline: bool = False):
        self.model, self.attack = model, attack
        self.lik = LikelihoodModel(model, attack, Q_z)
        self.arms = list(arms)
        self.with_baseline = with_baseline
        if with_baseline:
            zero = WatermarkConfig(np.zeros((model.p, model.p)))
            self.arms.append(Arm("__baseline__", zero, stop=False))
        A_ = len(self.arms)
        self.noise = NoiseSource(model, attack, rng)
        x, xhat, u, y = burn_in(model, self.noise, N, burn_in_steps)
        self.z = self.noise.attacker_stationary(N)
        if attack_time is None:
            self.Gamma = rng.geometric(attack.rho, size=N).astype(np.int64)
        elif np.isinf(attack_time):
            self.Gamma = np.full(N, NEVER, dtype=np.int64)
        else:
            self.Gamma = np.full(N, int(attack_time), dtype=np.int64)

        tile = lambda a: np.repeat(a[None], A_, axis=0)
        self.x, self.xhat, self.u, self.recv = tile(x), tile(xhat), tile(u), tile(y)
        self.F = np.stack([a.wm.factor for a in self.arms])  # (A, p, p)
        self.th_s = np.array([a.th_s for a in self.arms])[:, None]
        self.th_d = np.array([a.th_d if a.stop else np.inf for a in self.arms])[:, None]
        self.period = np.array([a.period for a in self.arms])[:, None]
        self.log_sr = np.full((A_, N), -np.inf)
        self.p = np.zeros((A_, N))
        self.k = 0
        s0, d0 = self.decide(np.zeros((A_, N)), 0)
        self.s_prev = (s0 & ~d0).astype(np.int8)
        self.s_prev2 = np.zeros((A_, N), dtype=np.int8)
        self.es = np.zeros((A_, N, model.p))
        self.e_raw_prev = np.zeros((A_, N, model.p))
        self.alive = np.ones((A_, N), dtype=bool)
        self.index = np.arange(N)  # position of each row in the original batch

    @property
    def N(self) -> int:
        return self.Gamma.shape[0]

    def decide(self, p, k):
        d = p >= self.th_d
        periodic = self.period > 0
        s_thr = p >= self.th_s
        s_per = (k % np.where(periodic, self.period, 1)) == 0
        s = np.where(periodic, s_per, s_thr) & ~d
        return s, d

    def step(self):
        """Advance every loop one step; returns a dict of per-step quantities."""
        M = self.model
        N = self.N
        self.k += 1
        k = self.k
        w = self.noise.process(N)
        v = self.noise.sensor(N)
        w_a = self.noise.attacker(N)
        e_std = self.noise.watermark_std(N)
        e = np.einsum("aij,nj->ani", self.F, e_std)
        self.z = self.z @ self.attack.A_a.T + w_a

        attacked = k >= self.Gamma
        # the true plant is not observed after the onset and may be open-loop
        # unstable, so its state is frozen there
        x_new = self.x @ M.A.T + self.u @ M.B.T + w
        self.x = np.where(attacked[None, :, None], self.x, x_new)
        y = self.x @ M.C.T + v
        received = np.where(attacked[None, :, None], self.z[None], y)
        xpred = self.xhat @ M.A.T + self.u @ M.B.T
        gamma = received - xpred @ M.C.T
        es_used = self.es * self.s_prev2[..., None]
        log_L, log_L_new = self.lik.log_ratios(gamma, self.recv, self.xhat, es_used)
        out = {"k": k, "gamma": gamma, "log_L": log_L, "log_L_new": log_L_new, "attacked": attacked,
               "xhat_prev": self.xhat, "recv_prev": self.recv, "e_raw_prev": self.e_raw_prev,
               "s_km2": self.s_prev2.copy()}
        self.log_sr = update_log_sr(self.log_sr, log_L, log_L_new, self.attack.rho)
        self.p = posterior_from_log_sr(self.log_sr, self.attack.rho)
        self.xhat = xpred + gamma @ M.K.T
        self.recv = received

        s, d = self.decide(self.p, k)
        es = self.s_prev[..., None] * e
        self.u = self.xhat @ M.L.T + es
        self.es = es
        self.e_raw_prev = e
        self.s_prev2 = self.s_prev
        self.s_prev = s.astype(np.int8)
        out.update(s=s, d=d, x=self.x, u=self.u, log_sr=self.log_sr)
        return out

    def keep(self, rows: np.ndarray):
        """Drop trials not in ``rows`` (boolean mask over the current trial axis)."""
        for name in ("x", "xhat", "u", "recv", "log_sr", "p", "s_prev", "s_prev2", "es", "e_raw_prev", "alive"):
            setattr(self, name, getattr(self, name)[:, rows])
        self.z = self.z[rows]
        self.Gamma = self.Gamma[rows]
        self.index = self.index[rows]


def _quad(X, Wm):
    return np.einsum("...i,ij,...j->...", X, Wm, X)


def simulate_batch(model: SystemModel, attack: AttackModel, arms: Sequence[Arm], N: int,
                   rng: np.random.Generator, horizon: int, attack_time=None,
                   burn_in_steps: int = BURN_IN, Q_z=None, track_cost: bool = False,
                   max_steps: Optional[int] = None) -> BatchOutcome:
    """Run ``N`` trials of every arm until alarm or ``horizon`` steps past the onset.

    ``attack_time``: None samples the geometric prior, an int fixes it and
    ``np.inf`` runs attack-free (then ``max_steps`` bounds the run). With
    ``track_cost`` a watermark-free, never-stopping copy of the loop runs on
    the same noise and the pre-attack cost difference of each arm is summed.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    loop = BatchLoop(model, attack, arms, N, rng, attack_time, burn_in_steps, Q_z, with_baseline=track_cost)
    A_ = len(arms)
    shape = (A_, N)
    tau = np.full(shape, NEVER, dtype=np.int64)
    censored = np.zeros(shape, dtype=bool)
    wm_pre = np.zeros(shape, dtype=np.int64)
    pre_steps = np.zeros(shape, dtype=np.int64)
    wm_post = np.zeros(shape, dtype=np.int64)
    post_steps = np.zeros(shape, dtype=np.int64)
    cost_diff = np.zeros(shape) if track_cost else None
    cost_steps = np.zeros(shape, dtype=np.int64) if track_cost else None
    Gamma_all = loop.Gamma.copy()
    if np.all(Gamma_all >= NEVER) and max_steps is None:
        raise ValueError("attack-free runs need max_steps")
    last = Gamma_all + horizon - 1 if max_steps is None else np.minimum(Gamma_all + horizon - 1, max_steps)
    last = np.where(Gamma_all >= NEVER, max_steps if max_steps is not None else NEVER, last)

    # s_0 counts as a pre-attack watermark decision
    s0 = loop.s_prev[:A_].astype(np.int64)
    wm_pre += s0
    alive = np.ones(shape, dtype=bool)

    while loop.N > 0:
        idx = loop.index
        out = loop.step()
        k = out["k"]
        s = out["s"][:A_]
        d = out["d"][:A_]
        act = alive[:, idx]
        G = loop.Gamma
        pre = k < G
        post = ~pre
        # count the decision s_k made at step k
        d_now = d & act
        s_eff = s & act
        wm_pre[:, idx] += (s_eff & pre[None]).astype(np.int64)
        wm_post[:, idx] += (s_eff & post[None]).astype(np.int64)
        pre_steps[:, idx] += (act & pre[None]).astype(np.int64)
        post_steps[:, idx] += (act & post[None]).astype(np.int64)
        if track_cost:
            Wm, Um = model.W, model.U
            c = _quad(out["x"], Wm) + _quad(out["u"], Um)
            diff = c[:A_] - c[A_]
            cnt = act & pre[None]
            cost_diff[:, idx] += np.where(cnt, diff, 0.0)
            cost_steps[:, idx] += cnt.astype(np.int64)
        tau_view = tau[:, idx]
        tau_view[d_now] = k
        tau[:, idx] = tau_view
        act = act & ~d_now
        over = k >= last[idx]
        cens = act & over[None]
        cview = censored[:, idx]
        cview |= cens
        censored[:, idx] = cview
        act = act & ~over[None]
        alive[:, idx] = act
        rows = act.any(axis=0)
        if not rows.all() and rows.sum() <= 0.5 * loop.N:
            loop.keep(rows)
        elif not rows.any():
            break
        if loop.N == 0:
            break
        if max_steps is not None and k >= max_steps:
            break
    return BatchOutcome([a.name for a in arms], Gamma_all, tau, censored, wm_pre, pre_steps, wm_post,
                        post_steps, cost_diff, cost_steps)


def batch_seeds(seed: int, trials: int, batch_size: int):
    """Split ``trials`` into batches with independent generators derived from ``seed``."""
    sizes = [batch_size] * (trials // batch_size)
    if trials % batch_size:
        sizes.append(trials % batch_size)
    children = np.random.SeedSequence(seed).spawn(len(sizes))
    return [(n, np.random.default_rng(c)) for n, c in zip(sizes, children)]
