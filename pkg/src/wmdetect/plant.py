"""Closed-loop plant, Kalman estimator, LQG controller, watermark and attacker.

The single-stream simulator here is the reference implementation used for
traces and small experiments. Monte-Carlo work goes through the vectorized
engine in :mod:`wmdetect.engine`, which follows the same step order.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .linalg import StabilityError, SystemModel, solve_dlyap, spectral_radius

BURN_IN = 500


@dataclass(frozen=True, eq=False)
class AttackModel:
    """Fake-data generator z_k = A_a z_{k-1} + w_a and geometric onset prior."""

    A_a: np.ndarray
    Q_a: np.ndarray
    rho: float
    pi0: float = 0.0

    def __post_init__(self):
        A_a = np.atleast_2d(np.asarray(self.A_a, dtype=float))
        Q_a = np.atleast_2d(np.asarray(self.Q_a, dtype=float))
        if A_a.shape[0] != A_a.shape[1] or Q_a.shape != A_a.shape:
            raise ValueError(f"A_a {A_a.shape} and Q_a {Q_a.shape} must be matching square matrices")
        if not 0.0 < self.rho < 1.0:
            raise ValueError(f"rho must lie in (0, 1), got {self.rho}")
        if self.pi0 != 0.0:
            raise ValueError("only pi0 = 0 is supported")
        radius = spectral_radius(A_a)
        if radius >= 1.0:
            raise StabilityError("attacker dynamics must be stationary", radius)
        if np.linalg.eigvalsh(0.5 * (Q_a + Q_a.T)).min() <= 0:
            raise ValueError("Q_a must be positive definite")
        object.__setattr__(self, "A_a", A_a)
        object.__setattr__(self, "Q_a", Q_a)
        object.__setattr__(self, "rho", float(self.rho))

    @property
    def m(self) -> int:
        return self.A_a.shape[0]

    def stationary_cov(self) -> np.ndarray:
        """E[z z'] in steady state."""
        return solve_dlyap(self.A_a, self.Q_a)


def _psd_factor(S: np.ndarray) -> np.ndarray:
    """F with F F' = S, tolerating semi-definite S (eigenvalues clipped at 0)."""
    S = np.atleast_2d(np.asarray(S, dtype=float))
    try:
        return np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        vals, vecs = np.linalg.eigh(0.5 * (S + S.T))
        return vecs * np.sqrt(np.clip(vals, 0.0, None))


@dataclass(frozen=True, eq=False)
class WatermarkConfig:
    """Gaussian watermark e_k ~ N(0, Sigma_e)."""

    Sigma_e: np.ndarray
    mode: str = "custom"

    def __post_init__(self):
        S = np.atleast_2d(np.asarray(self.Sigma_e, dtype=float))
        if S.shape[0] != S.shape[1]:
            raise ValueError("Sigma_e must be square")
        if np.linalg.eigvalsh(0.5 * (S + S.T)).min() < -1e-12:
            raise ValueError("Sigma_e must be positive semi-definite")
        if self.mode not in ("diagonal-equal-power", "rank-one", "custom"):
            raise ValueError(f"unknown watermark mode {self.mode!r}")
        object.__setattr__(self, "Sigma_e", S)

    @classmethod
    def diagonal(cls, p: int, sigma2: float) -> "WatermarkConfig":
        return cls(sigma2 * np.eye(p), mode="diagonal-equal-power")

    @classmethod
    def rank_one(cls, v) -> "WatermarkConfig":
        v = np.asarray(v, dtype=float).reshape(-1)
        return cls(np.outer(v, v), mode="rank-one")

    @property
    def factor(self) -> np.ndarray:
        return _psd_factor(self.Sigma_e)

    def scaled(self, c: float) -> "WatermarkConfig":
        return WatermarkConfig(c * self.Sigma_e, mode=self.mode)


def sample_attack_time(rho: float, rng: np.random.Generator, size=None):
    """Draw the attack onset from P{Gamma = k} = rho (1 - rho)^(k-1), k >= 1."""
    if not 0.0 < rho < 1.0:
        raise ValueError(f"rho must lie in (0, 1), got {rho}")
    draw = rng.geometric(rho, size=size)
    return int(draw) if size is None else draw.astype(np.int64)


def step_plant(model: SystemModel, x, u, w, v):
    """x' = A x + B u + w and y = C x' + v."""
    x_next = model.A @ x + model.B @ u + w
    return x_next, model.C @ x_next + v


def step_attacker(attack: AttackModel, z, w_a):
    return attack.A_a @ z + w_a


class NoiseSource:
    """Draws the plant, sensor, attacker and watermark noises in a fixed order.

    Both the single-stream simulator and the batch engine consume draws
    through this class, so a one-trial batch replays a single-stream run.
    """

    def __init__(self, model: SystemModel, attack: AttackModel, rng: np.random.Generator):
        self.rng = rng
        self.n, self.m, self.p = model.n, model.m, model.p
        self.Fq = np.linalg.cholesky(model.Q)
        self.Fr = np.linalg.cholesky(model.R)
        self.Fa = np.linalg.cholesky(attack.Q_a)
        self.Fz = np.linalg.cholesky(attack.stationary_cov())

    def process(self, N: int):
        return self.rng.standard_normal((N, self.n)) @ self.Fq.T

    def sensor(self, N: int):
        return self.rng.standard_normal((N, self.m)) @ self.Fr.T

    def attacker(self, N: int):
        return self.rng.standard_normal((N, self.m)) @ self.Fa.T

    def attacker_stationary(self, N: int):
        return self.rng.standard_normal((N, self.m)) @ self.Fz.T

    def watermark_std(self, N: int):
        return self.rng.standard_normal((N, self.p))


def burn_in(model: SystemModel, noise: NoiseSource, N: int, steps: int = BURN_IN):
    """Run the loop without watermark or attack so the filter reaches steady state.

    Returns (x_0, xhat_{0|0}, u_0, y_0) stacked over N trials.
    """
    A, B, C, K, L = model.A, model.B, model.C, model.K, model.L
    x = np.zeros((N, model.n))
    xhat = np.zeros((N, model.n))
    u = np.zeros((N, model.p))
    y = np.zeros((N, model.m))
    for _ in range(steps):
        w = noise.process(N)
        v = noise.sensor(N)
        x = x @ A.T + u @ B.T + w
        y = x @ C.T + v
        xpred = xhat @ A.T + u @ B.T
        xhat = xpred + (y - xpred @ C.T) @ K.T
        u = xhat @ L.T
    return x, xhat, u, y


@dataclass
class SimTrace:
    """Per-step record of one closed-loop run, k = 1..len."""

    k: list = field(default_factory=list)
    x: list = field(default_factory=list)
    received: list = field(default_factory=list)
    u: list = field(default_factory=list)
    xhat: list = field(default_factory=list)
    gamma: list = field(default_factory=list)
    p: list = field(default_factory=list)
    s: list = field(default_factory=list)
    d: list = field(default_factory=list)
    e: list = field(default_factory=list)
    attack_time: Optional[int] = None
    detection_time: Optional[int] = None
    censored: bool = False

    def theta(self) -> list:
        """0 before the attack, 1 from the onset, 'Te' once the alarm has fired."""
        out = []
        for k in self.k:
            if self.detection_time is not None and k > self.detection_time:
                out.append("Te")
            else:
                out.append(int(self.attack_time is not None and k >= self.attack_time))
        return out

    def as_arrays(self) -> dict:
        return {name: np.asarray(getattr(self, name)) for name in ("k", "x", "received", "u", "xhat", "gamma", "p", "s", "d", "e")}

    def to_csv(self, path, meta: Optional[dict] = None) -> None:
        """Write one row per step; ``meta`` adds constant trailing columns."""
        meta = meta or {}
        m = len(self.gamma[0]) if self.gamma else 0
        p = len(self.u[0]) if self.u else 0
        header = ["k", "theta", "s", "d", "p"]
        header += [f"gamma_{i + 1}" for i in range(m)] + [f"u_{i + 1}" for i in range(p)] + ["attack_started"] + list(meta)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            for i, k in enumerate(self.k):
                theta = self.theta()[i]
                started = int(self.attack_time is not None and k >= self.attack_time)
                row = [k, theta, self.s[i], self.d[i], repr(float(self.p[i]))]
                row += [repr(float(g)) for g in self.gamma[i]] + [repr(float(c)) for c in self.u[i]] + [started] + list(meta.values())
                writer.writerow(row)


DecisionCallback = Callable[[int, float], tuple]


def run_closed_loop(
    model: SystemModel,
    attack: AttackModel,
    wm: WatermarkConfig,
    controller_of_p: DecisionCallback,
    horizon: int,
    rng: np.random.Generator,
    attack_time: Optional[int] = None,
    sample_attack: bool = True,
    burn_in_steps: int = BURN_IN,
    Q_z: Optional[np.ndarray] = None,
) -> SimTrace:
    """Simulate one closed loop under attack with the online detector in the loop.

    ``controller_of_p(k, p_k)`` returns the decisions (s_k, d_k). When
    ``attack_time`` is None and ``sample_attack`` is true the onset is drawn
    from the geometric prior; with ``sample_attack=False`` no attack happens.
    The run stops at the first alarm or after ``horizon`` steps (censored).
    """
    from .detector import DetectorState, LikelihoodModel, commit, posterior_step

    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    noise = NoiseSource(model, attack, rng)
    x, xhat, u, y = (a[0] for a in burn_in(model, noise, 1, burn_in_steps))
    z = noise.attacker_stationary(1)[0]
    if attack_time is None:
        gamma_t = sample_attack_time(attack.rho, rng) if sample_attack else None
    else:
        gamma_t = int(attack_time)
    lik = LikelihoodModel(model, attack, Q_z)
    Fe = wm.factor
    s0, d0 = controller_of_p(0, 0.0)
    state = DetectorState.initial(xhat, u, y, model.p, s0=int(bool(s0) and not d0))
    trace = SimTrace(attack_time=gamma_t)

    for k in range(1, horizon + 1):
        w = noise.process(1)[0]
        v = noise.sensor(1)[0]
        w_a = noise.attacker(1)[0]
        e = Fe @ noise.watermark_std(1)[0]
        z = step_attacker(attack, z, w_a)
        x, y = step_plant(model, x, u, w, v)
        attacked = gamma_t is not None and k >= gamma_t
        received = z if attacked else y
        state = posterior_step(state, received, lik)
        s, d = controller_of_p(k, state.p)
        s, d = int(bool(s)), int(bool(d))
        if d:
            s = 0
        state = commit(state, s, d, e, model)
        u = state.u_prev
        trace.k.append(k)
        trace.x.append(x.copy())
        trace.received.append(np.array(received, copy=True))
        trace.u.append(u.copy())
        trace.xhat.append(state.xhat.copy())
        trace.gamma.append(state.gamma.copy())
        trace.p.append(state.p)
        trace.s.append(s)
        trace.d.append(d)
        trace.e.append(e.copy())
        if d:
            trace.detection_time = k
            break
    else:
        trace.censored = True
    return trace


def lqg_cost_estimate(x, u, W, U, burn: int = 0) -> tuple[float, bool]:
    """Time average of x'Wx + u'Uu over a recorded run.

    Returns (estimate, short) where ``short`` flags runs under 1000 samples.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))[burn:]
    u = np.atleast_2d(np.asarray(u, dtype=float))[burn:]
    W = np.atleast_2d(W)
    U = np.atleast_2d(U)
    n = len(x)
    if n == 0:
        raise ValueError("empty run")
    short = n < 1000
    if short:
        warnings.warn(f"LQG cost averaged over only {n} samples", RuntimeWarning, stacklevel=2)
    cost = np.einsum("ki,ij,kj->k", x, W, x) + np.einsum("ki,ij,kj->k", u, U, u)
    return float(cost.mean()), short


def stationary_run(
    model: SystemModel,
    attack: AttackModel,
    wm: WatermarkConfig,
    steps: int,
    rng: np.random.Generator,
    watermark_on: bool = False,
    burn_in_steps: int = BURN_IN,
):
    """Attack-free run with the watermark either always on or off.

    Returns a dict of arrays x, u, gamma, xhat (k = 1..steps), used for the
    innovation whiteness and LQG cost checks. No detector is involved.
    """
    A, B, C, K, L = model.A, model.B, model.C, model.K, model.L
    noise = NoiseSource(model, attack, rng)
    x, xhat, u, _ = (a[0] for a in burn_in(model, noise, 1, burn_in_steps))
    Fe = wm.factor
    xs = np.empty((steps, model.n))
    us = np.empty((steps, model.p))
    gs = np.empty((steps, model.m))
    xh = np.empty((steps, model.n))
    W_all = noise.process(steps)
    V_all = noise.sensor(steps)
    E_all = noise.watermark_std(steps) @ Fe.T if watermark_on else np.zeros((steps, model.p))
    for k in range(steps):
        x = A @ x + B @ u + W_all[k]
        y = C @ x + V_all[k]
        xpred = A @ xhat + B @ u
        g = y - C @ xpred
        xhat = xpred + K @ g
        u = L @ xhat + E_all[k]
        xs[k], us[k], gs[k], xh[k] = x, u, g, xhat
    return {"x": xs, "u": us, "gamma": gs, "xhat": xh}
