"""Small dense linear-algebra kernels: Riccati and Lyapunov solvers, LQG gains.

Everything here is a pure function of its inputs. Matrices are assumed small
(n <= 8 or so); nothing is tuned for sparse or large problems.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class SolverError(RuntimeError):
    """Iterative solver failed to reach its tolerance."""

    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (final residual {residual:.3e})")
        self.residual = residual


class StabilityError(ValueError):
    """A matrix that must be Schur stable is not."""

    def __init__(self, message: str, radius: float):
        super().__init__(f"{message}: spectral radius {radius:.6f}")
        self.radius = radius


STABILITY_MARGIN = 1e-6


def spectral_radius(A) -> float:
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if A.shape[0] != A.shape[1]:
        raise ValueError(f"spectral_radius needs a square matrix, got {A.shape}")
    return float(np.max(np.abs(np.linalg.eigvals(A))))


def _sym(X: np.ndarray) -> np.ndarray:
    return 0.5 * (X + X.T)


def dare_residual(X, A, B, Q, R) -> float:
    """Frobenius norm of X - (A'XA + Q - A'XB (B'XB + R)^-1 B'XA)."""
    X, A, B, Q, R = (np.atleast_2d(np.asarray(M, dtype=float)) for M in (X, A, B, Q, R))
    G = B.T @ X @ B + R
    rhs = A.T @ X @ A + Q - A.T @ X @ B @ np.linalg.solve(G, B.T @ X @ A)
    return float(np.linalg.norm(X - rhs))


def solve_dare(A, B, Q, R, tol: float = 1e-12, max_iter: int = 100_000, damping: float = 1.0) -> np.ndarray:
    """Solve X = A'XA + Q - A'XB (B'XB + R)^-1 B'XA by fixed-point iteration.

    This is the control form. The filtering Riccati equation for the
    prediction-error covariance is obtained with ``solve_dare(A.T, C.T, Q, R)``.

    The iteration starts from X = Q and is symmetrized every step. ``damping``
    in (0, 1] blends the new iterate with the previous one. Convergence is
    declared when the update is below ``tol * (1 + ||X||)``.
    """
    A, B, Q, R = (np.atleast_2d(np.asarray(M, dtype=float)) for M in (A, B, Q, R))
    n = A.shape[0]
    if A.shape != (n, n) or B.shape[0] != n or Q.shape != (n, n) or R.shape != (B.shape[1],) * 2:
        raise ValueError(f"inconsistent shapes A{A.shape} B{B.shape} Q{Q.shape} R{R.shape}")
    if not 0.0 < damping <= 1.0:
        raise ValueError("damping must lie in (0, 1]")

    X = _sym(Q.copy())
    step = np.inf
    for _ in range(max_iter):
        G = B.T @ X @ B + R
        try:
            gain = np.linalg.solve(G, B.T @ X @ A)
        except np.linalg.LinAlgError as exc:
            raise np.linalg.LinAlgError("B'XB + R is singular in DARE iteration") from exc
        X_new = _sym(A.T @ X @ A + Q - A.T @ X @ B @ gain)
        if damping < 1.0:
            X_new = damping * X_new + (1.0 - damping) * X
        if not np.all(np.isfinite(X_new)):
            raise SolverError("DARE iteration diverged", float("inf"))
        step = float(np.linalg.norm(X_new - X))
        X = X_new
        if step <= tol * (1.0 + np.linalg.norm(X)):
            return X
    raise SolverError(f"DARE did not converge in {max_iter} iterations", dare_residual(X, A, B, Q, R))


def dlyap_residual(X, A, Q) -> float:
    X, A, Q = (np.atleast_2d(np.asarray(M, dtype=float)) for M in (X, A, Q))
    return float(np.linalg.norm(A @ X @ A.T - X + Q))


def solve_dlyap(A, Q, tol: float = 1e-10) -> np.ndarray:
    """Solve A X A' - X + Q = 0.

    Call with ``A.T`` for the transposed form A'XA - X + Q = 0. Uses the
    Kronecker-vectorized linear system, exact for the small sizes used here.
    """
    A, Q = (np.atleast_2d(np.asarray(M, dtype=float)) for M in (A, Q))
    n = A.shape[0]
    if A.shape != (n, n) or Q.shape != (n, n):
        raise ValueError(f"inconsistent shapes A{A.shape} Q{Q.shape}")
    radius = spectral_radius(A)
    if radius >= 1.0:
        raise StabilityError("Lyapunov equation needs a stable matrix", radius)
    # row-major vec: vec(A X A') = kron(A, A) vec(X)
    M = np.eye(n * n) - np.kron(A, A)
    X = np.linalg.solve(M, Q.reshape(-1)).reshape(n, n)
    if np.allclose(Q, Q.T, atol=1e-14 * (1 + np.abs(Q).max())):
        X = _sym(X)
    res = dlyap_residual(X, A, Q)
    if res > tol * (1.0 + np.linalg.norm(X)):
        raise SolverError("Lyapunov solve lost accuracy", res)
    return X


def kalman_gain(P, C, R) -> np.ndarray:
    """K = P C' (C P C' + R)^-1."""
    P, C, R = (np.atleast_2d(np.asarray(M, dtype=float)) for M in (P, C, R))
    S = C @ P @ C.T + R
    # K S = P C'  ->  S' K' = C P'
    return np.linalg.solve(S.T, C @ P.T).T


def lqg_gain(S, A, B, U) -> np.ndarray:
    """L = -(B'SB + U)^-1 B'SA."""
    S, A, B, U = (np.atleast_2d(np.asarray(M, dtype=float)) for M in (S, A, B, U))
    return -np.linalg.solve(B.T @ S @ B + U, B.T @ S @ A)


def _as_matrix(M, name: str) -> np.ndarray:
    arr = np.atleast_2d(np.asarray(M, dtype=float))
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} has non-finite entries")
    return arr


def _check_pd(M: np.ndarray, name: str, strict: bool) -> None:
    if M.shape[0] != M.shape[1] or not np.allclose(M, M.T, atol=1e-12 * (1 + np.abs(M).max())):
        raise ValueError(f"{name} must be a symmetric square matrix")
    lo = np.linalg.eigvalsh(_sym(M)).min()
    if (strict and lo <= 0) or (not strict and lo < -1e-12):
        kind = "positive definite" if strict else "positive semi-definite"
        raise ValueError(f"{name} must be {kind} (min eigenvalue {lo:.3e})")


@dataclass(frozen=True)
class ClosedLoopMats:
    Acl: np.ndarray
    Acal: np.ndarray
    radius_cl: float
    radius_cal: float


@dataclass(frozen=True, eq=False)
class SystemModel:
    """Plant, noise and LQG weights with the derived steady-state quantities.

    ``P`` is the prediction-error covariance, ``K`` the steady-state Kalman
    gain, ``S`` the control Riccati solution, ``L`` the feedback gain
    (u = L xhat) and ``Sigma0`` the pre-attack innovation covariance.
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    W: np.ndarray
    U: np.ndarray
    P: np.ndarray = field(init=False)
    K: np.ndarray = field(init=False)
    S: np.ndarray = field(init=False)
    L: np.ndarray = field(init=False)
    Sigma0: np.ndarray = field(init=False)

    def __post_init__(self):
        mats = {k: _as_matrix(getattr(self, k), k) for k in "ABCQRWU"}
        A, B, C, Q, R, W, U = (mats[k] for k in "ABCQRWU")
        n = A.shape[0]
        if A.shape != (n, n):
            raise ValueError(f"A must be square, got {A.shape}")
        p, m = B.shape[1], C.shape[0]
        expected = {"B": (n, p), "C": (m, n), "Q": (n, n), "R": (m, m), "W": (n, n), "U": (p, p)}
        for key, shape in expected.items():
            if mats[key].shape != shape:
                raise ValueError(f"{key} has shape {mats[key].shape}, expected {shape}")
        _check_pd(Q, "Q", strict=True)
        _check_pd(R, "R", strict=True)
        _check_pd(W, "W", strict=False)
        _check_pd(U, "U", strict=False)
        for key, val in mats.items():
            object.__setattr__(self, key, val)

        P = solve_dare(A.T, C.T, Q, R)
        S = solve_dare(A, B, W, U)
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "K", kalman_gain(P, C, R))
        object.__setattr__(self, "S", S)
        object.__setattr__(self, "L", lqg_gain(S, A, B, U))
        object.__setattr__(self, "Sigma0", _sym(C @ P @ C.T + R))

        cl = self.closed_loop()
        if cl.radius_cal > 1.0 - STABILITY_MARGIN:
            raise StabilityError("(I - KC)(A + BL) is not strictly stable", cl.radius_cal)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.C.shape[0]

    @property
    def p(self) -> int:
        return self.B.shape[1]

    def closed_loop(self) -> ClosedLoopMats:
        Acl = self.A + self.B @ self.L
        Acal = (np.eye(self.n) - self.K @ self.C) @ Acl
        return ClosedLoopMats(Acl, Acal, spectral_radius(Acl), spectral_radius(Acal))

    def digest(self) -> str:
        """Short content hash used to tag cached policies and CSV output."""
        import hashlib

        h = hashlib.sha256()
        for key in "ABCQRWU":
            h.update(np.ascontiguousarray(getattr(self, key)).tobytes())
        return h.hexdigest()[:16]
