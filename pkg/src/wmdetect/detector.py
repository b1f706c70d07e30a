"""Online Shiryaev detector with watermark-aware likelihood ratios.

Ratios are computed in the log domain. Four ratios exist per step:
``a``/``b`` use the watermark carried by the previous input, ``c``/``d`` the
same densities with that watermark forced to zero. ``b`` and ``d`` are the
"attack starts now" variants whose density does not depend on z_{k-1}.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import NamedTuple, Optional

import numpy as np
from scipy.special import expit

from .linalg import SystemModel
from .plant import AttackModel

P_MAX = 1.0 - 1e-15
_LOG2PI = np.log(2.0 * np.pi)


class Ratios(NamedTuple):
    L_a: float
    L_b: float
    L_c: float
    L_d: float


class _Gauss:
    """Fixed-covariance Gaussian: inverse and log-determinant cached."""

    def __init__(self, cov):
        cov = np.atleast_2d(np.asarray(cov, dtype=float))
        self.cov = cov
        self.inv = np.linalg.inv(cov)
        sign, self.logdet = np.linalg.slogdet(cov)
        if sign <= 0:
            raise ValueError("covariance must be positive definite")

    def quad(self, r: np.ndarray) -> np.ndarray:
        return np.einsum("...i,ij,...j->...", r, self.inv, r)

    def logpdf(self, r: np.ndarray) -> np.ndarray:
        m = self.cov.shape[0]
        return -0.5 * (m * _LOG2PI + self.logdet + self.quad(r))


class LikelihoodModel:
    """Precomputed pieces of the pre/post-attack innovation densities.

    ``Q_z`` is the covariance of the innovation at the onset step. It defaults
    to the stationary covariance of the fake data.
    """

    def __init__(self, model: SystemModel, attack: AttackModel, Q_z: Optional[np.ndarray] = None):
        self.model = model
        self.attack = attack
        Acl = model.A + model.B @ model.L
        self.CAL = model.C @ Acl
        self.CB = model.C @ model.B
        self.A_a = attack.A_a
        self.Q_z = attack.stationary_cov() if Q_z is None else np.atleast_2d(np.asarray(Q_z, dtype=float))
        self.f0 = _Gauss(model.Sigma0)
        self.f1 = _Gauss(attack.Q_a)
        self.f2 = _Gauss(self.Q_z)
        self.rho = attack.rho

    def means(self, z_prev, xhat_prev, es_prev):
        """Conditional means (mu1, mu2) of the innovation; broadcast over leading axes."""
        mu2 = -(xhat_prev @ self.CAL.T) - es_prev @ self.CB.T
        mu1 = z_prev @ self.A_a.T + mu2
        return mu1, mu2

    def log_ratios(self, gamma, z_prev, xhat_prev, es_prev):
        """(log L_a, log L_b) for the given watermark term; vectorized."""
        mu1, mu2 = self.means(z_prev, xhat_prev, es_prev)
        base = self.f0.logpdf(gamma)
        return self.f1.logpdf(gamma - mu1) - base, self.f2.logpdf(gamma - mu2) - base

    def all_log_ratios(self, gamma, z_prev, xhat_prev, es_prev):
        la, lb = self.log_ratios(gamma, z_prev, xhat_prev, es_prev)
        lc, ld = self.log_ratios(gamma, z_prev, xhat_prev, np.zeros_like(es_prev))
        return la, lb, lc, ld

    def context(self, z_prev, xhat_prev, es_prev) -> "LikelihoodContext":
        z_prev, xhat_prev, es_prev = (np.asarray(a, dtype=float) for a in (z_prev, xhat_prev, es_prev))
        mu1, mu2 = self.means(z_prev, xhat_prev, es_prev)
        mu1_0, mu2_0 = self.means(z_prev, xhat_prev, np.zeros_like(es_prev))
        return LikelihoodContext(z_prev, xhat_prev, es_prev, mu1, mu2, mu1_0, mu2_0, self)


@dataclass(frozen=True, eq=False)
class LikelihoodContext:
    z_prev: np.ndarray
    xhat_prev: np.ndarray
    es_prev: np.ndarray
    mu1: np.ndarray
    mu2: np.ndarray
    mu1_nowm: np.ndarray
    mu2_nowm: np.ndarray
    model: LikelihoodModel

    @property
    def Sigma1(self):
        return self.model.f1.cov

    @property
    def Sigma2(self):
        return self.model.f2.cov

    @property
    def Sigma0(self):
        return self.model.f0.cov


def likelihood_ratios(gamma, ctx: LikelihoodContext) -> Ratios:
    gamma = np.asarray(gamma, dtype=float)
    if not np.all(np.isfinite(gamma)):
        raise ValueError("innovation must be finite")
    lik = ctx.model
    base = lik.f0.logpdf(gamma)
    logs = (
        lik.f1.logpdf(gamma - ctx.mu1) - base,
        lik.f2.logpdf(gamma - ctx.mu2) - base,
        lik.f1.logpdf(gamma - ctx.mu1_nowm) - base,
        lik.f2.logpdf(gamma - ctx.mu2_nowm) - base,
    )
    return Ratios(*(float(np.exp(v)) for v in logs))


def _branch(ratios, s_km2):
    L_a, L_b, L_c, L_d = ratios
    return (L_a, L_b) if s_km2 else (L_c, L_d)


def update_posterior(p: float, ratios, s_km2: int, rho: float) -> float:
    """One step of the posterior recursion; the (a, b) pair is used when s_{k-2} = 1."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"posterior must lie in [0, 1), got {p}")
    L, L_new = _branch(ratios, s_km2)
    num = p * L + (1.0 - p) * rho * L_new
    den = (1.0 - rho) * (1.0 - p) + num
    if not den > 0.0:
        raise FloatingPointError("non-positive normalizer in posterior update")
    return float(min(max(num / den, 0.0), P_MAX))


def update_sr(SR: float, ratios, s_km2: int, rho: float) -> float:
    """Shiryaev statistic recursion SR' = (L SR + L_new) / (1 - rho)."""
    if SR < 0:
        raise ValueError("Shiryaev statistic must be non-negative")
    L, L_new = _branch(ratios, s_km2)
    return (L * SR + L_new) / (1.0 - rho)


def update_log_sr(log_sr, log_L, log_L_new, rho: float):
    """Log-domain Shiryaev recursion; log_sr = -inf encodes SR = 0. Vectorized."""
    return np.logaddexp(log_L_new, log_L + log_sr) - np.log1p(-rho)


def posterior_from_log_sr(log_sr, rho: float):
    """p = SR / (SR + 1/rho) evaluated stably from log SR."""
    return np.minimum(expit(np.asarray(log_sr) + np.log(rho)), P_MAX)


def posterior_from_sr(SR: float, rho: float) -> float:
    return SR / (SR + 1.0 / rho)


def decide(p: float, Th_s: float, Th_d: float) -> tuple[int, int]:
    """Two-threshold rule: stop at p >= Th_d, otherwise watermark at p >= Th_s."""
    if Th_s > Th_d:
        raise ValueError(f"Th_s ({Th_s}) must not exceed Th_d ({Th_d})")
    if p >= Th_d:
        return 0, 1
    return int(p >= Th_s), 0


@dataclass(frozen=True, eq=False)
class DetectorState:
    """Detector and estimator state after step k has been committed.

    ``xhat`` is xhat_{k|k}, ``u_prev`` the input u_k, ``es_prev`` the
    watermark it carries (s_{k-1} e_k), ``s_prev``/``s_prev2`` are s_k and
    s_{k-1}, ``recv_prev`` the observation received at k.
    """

    k: int
    p: float
    log_sr: float
    xhat: np.ndarray
    u_prev: np.ndarray
    es_prev: np.ndarray
    s_prev: int
    s_prev2: int
    recv_prev: np.ndarray
    gamma: Optional[np.ndarray] = None
    terminated: bool = False

    @classmethod
    def initial(cls, xhat, u, received, p_dim: int, s0: int = 0) -> "DetectorState":
        return cls(
            k=0, p=0.0, log_sr=-np.inf,
            xhat=np.asarray(xhat, dtype=float), u_prev=np.asarray(u, dtype=float),
            es_prev=np.zeros(p_dim), s_prev=int(s0), s_prev2=0,
            recv_prev=np.asarray(received, dtype=float),
        )

    @property
    def SR(self) -> float:
        return float(np.exp(self.log_sr))


def posterior_step(state: DetectorState, received, lik: LikelihoodModel) -> DetectorState:
    """Absorb the observation received at k+1: innovation, ratios, posterior, filter update."""
    if state.terminated:
        raise RuntimeError("detector already terminated")
    model = lik.model
    received = np.asarray(received, dtype=float)
    xpred = model.A @ state.xhat + model.B @ state.u_prev
    gamma = received - model.C @ xpred
    if not np.all(np.isfinite(gamma)):
        raise ValueError("innovation must be finite")
    es = state.es_prev if state.s_prev2 else np.zeros_like(state.es_prev)
    log_L, log_L_new = lik.log_ratios(gamma, state.recv_prev, state.xhat, es)
    log_sr = float(update_log_sr(state.log_sr, float(log_L), float(log_L_new), lik.rho))
    return replace(
        state,
        k=state.k + 1,
        p=float(posterior_from_log_sr(log_sr, lik.rho)),
        log_sr=log_sr,
        xhat=xpred + model.K @ gamma,
        recv_prev=received,
        gamma=gamma,
    )


def commit(state: DetectorState, s: int, d: int, watermark, model: SystemModel) -> DetectorState:
    """Apply decisions (s_k, d_k) and form u_k = L xhat_{k|k} + s_{k-1} e_k."""
    es = state.s_prev * np.asarray(watermark, dtype=float)
    u = model.L @ state.xhat + es
    return replace(state, u_prev=u, es_prev=es, s_prev2=state.s_prev, s_prev=int(s), terminated=bool(d))


def detector_step(state: DetectorState, received, lik: LikelihoodModel, thresholds, watermark):
    """Full online step. ``thresholds`` is (Th_s, Th_d). Returns (state, s, d)."""
    state = posterior_step(state, received, lik)
    s, d = decide(state.p, *thresholds)
    return commit(state, s, d, watermark, lik.model), s, d
