"""Value iteration on the discretized posterior, threshold extraction and the
Lagrange-multiplier grid search.

The one-step expectations B_s(p) = E[J(phi_s(p))] are estimated with a
frozen set of samples shared by every grid point and every sweep, so value
iteration is a deterministic fixed-point iteration on two dense transition
matrices.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .detector import LikelihoodModel, P_MAX
from .linalg import SolverError, SystemModel
from .plant import BURN_IN, AttackModel, NoiseSource, WatermarkConfig, burn_in
from .theory import threshold_transform

GRID_SIZE = 501
GRID_TOP = 1.0 - 1e-6
NO_WM, WM, STOP = 0, 1, 2
ACTION_NAMES = {NO_WM: "no-wm", WM: "wm", STOP: "stop"}


class PolicyStructureError(RuntimeError):
    """The solved action table is not no-wm / wm / stop over increasing p."""

    def __init__(self, message: str, pattern: list):
        super().__init__(f"{message}: action pattern {' -> '.join(pattern)}")
        self.pattern = pattern


class InfeasibleError(RuntimeError):
    """No Lagrange grid point meets the FAR / ANW constraints."""

    def __init__(self, message: str, candidates: list):
        super().__init__(message)
        self.candidates = candidates


def make_grid(size: int = GRID_SIZE) -> np.ndarray:
    if size < 101:
        raise ValueError("grid needs at least 101 points")
    return np.linspace(0.0, GRID_TOP, size)


# ---------------------------------------------------------------- sampler


@dataclass(frozen=True, eq=False)
class TransitionSampler:
    """Frozen log-likelihood-ratio samples for the next observation.

    For each stratum (attack ongoing, attack starting now, no attack) and each
    watermark bit s of the step before, ``log_L[stratum][s]`` and
    ``log_L_new[stratum][s]`` hold M samples of the (log L, log L_new) pair
    entering the posterior recursion.
    """

    pre_contexts: dict
    post_contexts: dict
    log_L: np.ndarray  # (3, 2, M)
    log_L_new: np.ndarray  # (3, 2, M)
    rho: float

    @property
    def M(self) -> int:
        return self.log_L.shape[-1]

    def weights(self, p: np.ndarray) -> np.ndarray:
        """Stratum probabilities (3, G): ongoing p, onset (1-p) rho, none (1-p)(1-rho)."""
        p = np.asarray(p, dtype=float)
        return np.stack([p, (1 - p) * self.rho, (1 - p) * (1 - self.rho)])

    def next_posterior(self, p: np.ndarray, s: int) -> np.ndarray:
        """phi_s(p) for every grid value and every frozen sample: shape (3, G, M)."""
        p = np.asarray(p, dtype=float)[None, :, None]
        L = np.exp(self.log_L[:, s][:, None, :])
        Ln = np.exp(self.log_L_new[:, s][:, None, :])
        num = p * L + (1 - p) * self.rho * Ln
        den = (1 - self.rho) * (1 - p) + num
        return np.minimum(num / den, P_MAX)


def _harvest(model, attack, wm, n, rng, burn_in_steps, post_steps):
    noise = NoiseSource(model, attack, rng)
    x, xhat, u, y = burn_in(model, noise, n, burn_in_steps)
    pre = {"recv": y.copy(), "xhat": xhat.copy()}
    # attacked, watermark-on steady state
    Fe = wm.factor
    z = noise.attacker_stationary(n)
    M = model
    for _ in range(post_steps):
        e = noise.watermark_std(n) @ Fe.T
        w_a = noise.attacker(n)
        z = z @ attack.A_a.T + w_a
        xpred = xhat @ M.A.T + u @ M.B.T
        g = z - xpred @ M.C.T
        xhat = xpred + g @ M.K.T
        u = xhat @ M.L.T + e
    post = {"recv": z.copy(), "xhat": xhat.copy()}
    return pre, post


def build_transition_sampler(model: SystemModel, attack: AttackModel, wm: WatermarkConfig,
                             library_size: int, rng: np.random.Generator, Q_z=None,
                             burn_in_steps: int = BURN_IN, post_steps: Optional[int] = None) -> TransitionSampler:
    """Harvest steady-state contexts and draw the frozen ratio samples.

    Pre-attack contexts come from an attack-free loop without watermark, the
    post-attack ones from an attacked loop with the watermark always on. Each
    library entry is paired with one fresh watermark and one innovation draw.
    """
    if library_size < 1:
        raise ValueError("library_size must be >= 1")
    if post_steps is None:
        radius = model.closed_loop().radius_cal
        post_steps = int(min(2000, max(100, math.ceil(30.0 / max(1e-3, -math.log(max(radius, 1e-12)))))))
    lik = LikelihoodModel(model, attack, Q_z)
    pre, post = _harvest(model, attack, wm, library_size, rng, burn_in_steps, post_steps)
    M = library_size
    e = rng.standard_normal((M, model.p)) @ wm.factor.T
    zeros = np.zeros_like(e)
    eps1 = rng.standard_normal((M, model.m)) @ np.linalg.cholesky(lik.f1.cov).T
    eps2 = rng.standard_normal((M, model.m)) @ np.linalg.cholesky(lik.f2.cov).T
    eps0 = rng.standard_normal((M, model.m)) @ np.linalg.cholesky(lik.f0.cov).T

    log_L = np.empty((3, 2, M))
    log_Ln = np.empty((3, 2, M))
    for s, es in ((0, zeros), (1, e)):
        # attack ongoing: gamma ~ N(mu1, Q_a) in a post-attack context
        mu1, _ = lik.means(post["recv"], post["xhat"], es)
        g = mu1 + eps1
        log_L[0, s], log_Ln[0, s] = lik.log_ratios(g, post["recv"], post["xhat"], es)
        # attack starts now: gamma ~ N(mu2, Q_z) in a pre-attack context
        _, mu2 = lik.means(pre["recv"], pre["xhat"], es)
        g = mu2 + eps2
        log_L[1, s], log_Ln[1, s] = lik.log_ratios(g, pre["recv"], pre["xhat"], es)
        # no attack: gamma ~ N(0, Sigma0)
        log_L[2, s], log_Ln[2, s] = lik.log_ratios(eps0, pre["recv"], pre["xhat"], es)
    return TransitionSampler(
        pre_contexts={**pre, "e_s": zeros},
        post_contexts={**post, "e_s": e},
        log_L=log_L,
        log_L_new=log_Ln,
        rho=attack.rho,
    )


def interp_matrix(grid: np.ndarray, values: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Dense T with (T J)[i] = sum_j weights[i, j] * interp(J, values[i, j]).

    ``values`` and ``weights`` have shape (G, K); linear interpolation on the
    uniform ``grid``, clamped at its ends.
    """
    G = len(grid)
    h = grid[1] - grid[0]
    pos = np.clip((values - grid[0]) / h, 0.0, G - 1.0)
    lo = np.minimum(np.floor(pos).astype(np.int64), G - 2)
    frac = pos - lo
    rows = np.repeat(np.arange(values.shape[0]), values.shape[1])
    T = np.zeros(G * G)
    np.add.at(T, rows * G + lo.ravel(), (weights * (1 - frac)).ravel())
    np.add.at(T, rows * G + lo.ravel() + 1, (weights * frac).ravel())
    return T.reshape(G, G)


def transition_matrices(grid: np.ndarray, sampler: TransitionSampler):
    """(T0, T1) so that B_s = T_s @ J."""
    W = sampler.weights(grid) / sampler.M  # (3, G)
    out = []
    for s in (0, 1):
        nxt = sampler.next_posterior(grid, s)  # (3, G, M)
        vals = np.concatenate(list(nxt), axis=1)  # (G, 3M)
        wts = np.concatenate([np.repeat(W[i][:, None], sampler.M, axis=1) for i in range(3)], axis=1)
        out.append(interp_matrix(grid, vals, wts))
    return tuple(out)


def expected_continuation(p: float, s: int, sampler: TransitionSampler, grid: np.ndarray, J: np.ndarray) -> float:
    """Monte-Carlo E[J(phi_s(p))] with J linearly interpolated on ``grid``."""
    if sampler.M == 0:
        raise ValueError("sampler has no samples")
    nxt = sampler.next_posterior(np.array([p]), s)[:, 0, :]  # (3, M)
    w = sampler.weights(np.array([p]))[:, 0]
    vals = np.interp(nxt, grid, J)
    return float((w * vals.mean(axis=1)).sum())


# ---------------------------------------------------------------- value iteration


@dataclass(frozen=True, eq=False)
class ValueTable:
    grid: np.ndarray
    J: np.ndarray
    B0: np.ndarray
    B1: np.ndarray
    action: np.ndarray
    sweeps: int
    residual: float

    def pattern(self) -> list:
        """Run-length compressed action sequence over increasing p."""
        out = []
        for a in self.action:
            name = ACTION_NAMES[int(a)]
            if not out or out[-1] != name:
                out.append(name)
        return out


def value_iteration(grid_size: int, lambda_e: float, lambda_f: float, rho: float,
                    sampler: TransitionSampler, tol: float = 1e-9, max_sweeps: int = 200_000,
                    matrices=None, grid: Optional[np.ndarray] = None) -> ValueTable:
    """Solve J = min(p + B0, p + lambda_e (1 - p) + B1, lambda_f (1 - p)).

    Ties between the two continuation actions go to no watermark, ties with
    stopping go to stopping.
    """
    if lambda_e < 0 or lambda_f < 0:
        raise ValueError("Lagrange multipliers must be non-negative")
    if abs(rho - sampler.rho) > 1e-15:
        raise ValueError("rho differs from the sampler's")
    grid = make_grid(grid_size) if grid is None else grid
    T0, T1 = matrices if matrices is not None else transition_matrices(grid, sampler)
    p = grid
    stop_cost = lambda_f * (1 - p)
    wm_cost = p + lambda_e * (1 - p)
    J = np.zeros_like(p)
    residual = math.inf
    for sweep in range(1, max_sweeps + 1):
        B0 = T0 @ J
        B1 = T1 @ J
        J_new = np.minimum(np.minimum(p + B0, wm_cost + B1), stop_cost)
        residual = float(np.max(np.abs(J_new - J)))
        J = J_new
        if residual <= tol:
            break
    else:
        raise SolverError(f"value iteration did not converge in {max_sweeps} sweeps", residual)
    B0 = T0 @ J
    B1 = T1 @ J
    c0, c1 = p + B0, wm_cost + B1
    action = np.where(c1 < c0, WM, NO_WM)
    action = np.where(stop_cost <= np.minimum(c0, c1), STOP, action)
    return ValueTable(grid, J, B0, B1, action, sweep, residual)


def _bisect(f: Callable[[float], float], lo: float, hi: float, tol: float = 1e-12) -> float:
    flo = f(lo)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        fm = f(mid)
        if (fm > 0) == (flo > 0):
            lo, flo = mid, fm
        else:
            hi = mid
        if hi - lo < tol:
            break
    return 0.5 * (lo + hi)


def _first_sign_change(grid, vals):
    """Index i with vals[i] and vals[i+1] of opposite sign (vals[i] != 0), or None."""
    sgn = np.sign(vals)
    for i in range(len(vals) - 1):
        if sgn[i] != 0 and sgn[i + 1] != sgn[i]:
            return i
    return None


def extract_thresholds(table: ValueTable, lambda_e: float, lambda_f: float) -> tuple[float, float]:
    """Th_s from B0 - B1 = lambda_e (1 - p), Th_d from p + lambda_e (1 - p) + B1 = lambda_f (1 - p).

    Roots are located by bisection on the linearly interpolated table; the
    trivial root p = 1 is excluded by working on the grid, which stops short
    of one.
    """
    pattern = table.pattern()
    if pattern not in (["no-wm", "wm", "stop"],):
        raise PolicyStructureError("optimal policy is not of the two-threshold form", pattern)
    g = table.grid
    interp = lambda arr: (lambda x: float(np.interp(x, g, arr)))
    B0, B1 = interp(table.B0), interp(table.B1)
    f_s = lambda x: B0(x) - B1(x) - lambda_e * (1 - x)
    f_d = lambda x: x + lambda_e * (1 - x) + B1(x) - lambda_f * (1 - x)

    vals_s = table.B0 - table.B1 - lambda_e * (1 - g)
    i = _first_sign_change(g, vals_s)
    if i is None:
        raise PolicyStructureError("no watermark switch point found", pattern)
    th_s = _bisect(f_s, g[i], g[i + 1])
    vals_d = g + lambda_e * (1 - g) + table.B1 - lambda_f * (1 - g)
    vals_d = np.where(g >= th_s, vals_d, -1.0)
    j = _first_sign_change(g, vals_d)
    if j is None:
        raise PolicyStructureError("no stopping point found", pattern)
    th_d = _bisect(f_d, max(g[j], th_s), g[j + 1])
    return th_s, th_d


# ---------------------------------------------------------------- policy


@dataclass(frozen=True, eq=False)
class Policy:
    lambda_e: float
    lambda_f: float
    rho: float
    th_s: float
    th_d: float
    value_table: Optional[ValueTable] = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.th_s > self.th_d:
            raise ValueError("Th_s must not exceed Th_d")

    @property
    def Th_S(self) -> float:
        return threshold_transform(self.th_s, self.rho)

    @property
    def Th_D(self) -> float:
        return threshold_transform(self.th_d, self.rho)

    @property
    def thresholds(self) -> tuple[float, float]:
        return self.th_s, self.th_d

    def to_dict(self) -> dict:
        t = self.value_table
        return {
            "lambda_e": self.lambda_e,
            "lambda_f": self.lambda_f,
            "rho": self.rho,
            "grid": t.grid.tolist() if t is not None else [],
            "J": t.J.tolist() if t is not None else [],
            "B0": t.B0.tolist() if t is not None else [],
            "B1": t.B1.tolist() if t is not None else [],
            "th_s": self.th_s,
            "th_d": self.th_d,
            "seed": self.provenance.get("seed"),
            "model_hash": self.provenance.get("model_hash"),
            "watermark_hash": self.provenance.get("watermark_hash"),
            "samples": self.provenance.get("samples"),
        }


def watermark_digest(wm: WatermarkConfig) -> str:
    return hashlib.sha256(np.ascontiguousarray(wm.Sigma_e, dtype=float).tobytes()).hexdigest()[:16]


def solve_policy(model: SystemModel, attack: AttackModel, wm: WatermarkConfig, lambda_e: float,
                 lambda_f: float, seed: int = 0, grid_size: int = GRID_SIZE, samples: int = 2000,
                 sampler: Optional[TransitionSampler] = None, matrices=None) -> Policy:
    """Build the sampler (unless given), run value iteration and extract both thresholds."""
    if sampler is None:
        sampler = build_transition_sampler(model, attack, wm, samples, np.random.default_rng(seed))
    grid = make_grid(grid_size)
    if matrices is None:
        matrices = transition_matrices(grid, sampler)
    table = value_iteration(grid_size, lambda_e, lambda_f, attack.rho, sampler, matrices=matrices, grid=grid)
    th_s, th_d = extract_thresholds(table, lambda_e, lambda_f)
    return Policy(lambda_e, lambda_f, attack.rho, th_s, th_d, table,
                  {"seed": seed, "model_hash": model.digest(), "watermark_hash": watermark_digest(wm),
                   "samples": sampler.M, "sweeps": table.sweeps})


def save_policy(policy: Policy, path) -> None:
    Path(path).write_text(json.dumps(policy.to_dict(), indent=1))


def load_policy(path) -> Policy:
    d = json.loads(Path(path).read_text())
    missing = {"lambda_e", "lambda_f", "rho", "th_s", "th_d"} - set(d)
    if missing:
        raise ValueError(f"policy cache {path} lacks keys {sorted(missing)}")
    table = None
    if d.get("grid"):
        grid = np.asarray(d["grid"])
        J, B0, B1 = (np.asarray(d[k]) for k in ("J", "B0", "B1"))
        stop_cost = d["lambda_f"] * (1 - grid)
        c0, c1 = grid + B0, grid + d["lambda_e"] * (1 - grid) + B1
        action = np.where(c1 < c0, WM, NO_WM)
        action = np.where(stop_cost <= np.minimum(c0, c1), STOP, action)
        table = ValueTable(grid, J, B0, B1, action, 0, math.nan)
    return Policy(d["lambda_e"], d["lambda_f"], d["rho"], d["th_s"], d["th_d"], table,
                  {k: d.get(k) for k in ("seed", "model_hash", "watermark_hash", "samples")})


# ---------------------------------------------------------------- grid search


@dataclass(frozen=True)
class Candidate:
    lambda_e: float
    lambda_f: float
    th_s: float
    th_d: float
    add: float
    far: float
    anw: float
    feasible: bool


def lagrange_grid_search(lambda_e_grid: Sequence[float], lambda_f_grid: Sequence[float], FAR_th: float,
                         ANW_th: float, evaluate: Callable[[float, float], tuple],
                         policy_of: Optional[Callable[[float, float], Policy]] = None):
    """Pick the feasible (lambda_e, lambda_f) with the smallest ADD.

    ``evaluate(lambda_e, lambda_f)`` returns (policy, add, far, anw). Ties in
    ADD go to smaller FAR, then smaller ANW, then grid order. Returns
    (best policy, candidate list). Raises InfeasibleError when nothing meets
    FAR <= FAR_th and ANW <= ANW_th.
    """
    if not len(lambda_e_grid) or not len(lambda_f_grid):
        raise ValueError("Lagrange grids must be non-empty")
    if not (FAR_th > 0 and ANW_th > 0):
        raise ValueError("constraint bounds must be positive")
    cands, policies = [], []
    for le in lambda_e_grid:
        for lf in lambda_f_grid:
            pol, add, far, anw = evaluate(float(le), float(lf))
            ok = far <= FAR_th and anw <= ANW_th
            cands.append(Candidate(float(le), float(lf), pol.th_s, pol.th_d, add, far, anw, ok))
            policies.append(pol)
    order = sorted(range(len(cands)), key=lambda i: (not cands[i].feasible, cands[i].add, cands[i].far, cands[i].anw, i))
    best = order[0]
    if not cands[best].feasible:
        ranked = sorted(cands, key=lambda c: (max(c.far / FAR_th, c.anw / ANW_th), c.add))[:3]
        raise InfeasibleError(
            "no grid point satisfies FAR <= %g and ANW <= %g; closest: %s"
            % (FAR_th, ANW_th, ", ".join(f"(le={c.lambda_e}, lf={c.lambda_f}: FAR={c.far:.4g}, ANW={c.anw:.4g})" for c in ranked)),
            ranked,
        )
    return policies[best], cands
