"""Ground-truth trajectory generation and the costate / optimality oracle.

Cost convention for every problem here: ``sum_{k=1}^{T} w' phi(x_k, u_k)``
subject to ``x_k = f(x_{k-1}, u_k)``; the Lagrangian is
``J + sum_k lambda_k' (f(x_{k-1}, u_k) - x_k)``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .dynamics import (
    LQR_A,
    LQR_B,
    LQR_FEATURES,
    LQR_HORIZON,
    LQR_WEIGHTS,
    LQR_X0,
    DynamicalSystem,
    FeatureSet,
    lti_system,
    quadratic_feature_library,
)
from .trajectory import Trajectory

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# costates
# ---------------------------------------------------------------------------


def compute_costates(traj: Trajectory, system: DynamicalSystem, features: FeatureSet, omega, terminal_costate=None) -> np.ndarray:
    """Backward costate recursion; row ``k - 1`` of the result is ``lambda_k``.

    ``lambda_T = dphi'/dx_T w`` for a free terminal state (``lambda_{T+1} = 0``).
    For a pinned terminal state pass the endpoint multiplier as
    ``terminal_costate``; it is used as ``lambda_T`` directly.
    """
    omega = np.asarray(omega, float)
    T = traj.horizon
    X, U = traj.states, traj.inputs
    phix = features.jac_x(X[1:], U)  # (T, r, n) at (x_k, u_k)
    grad_x = np.einsum("krn,r->kn", phix, omega)
    fx = system.jac_x(X[1:T], U[1:T]) if T > 1 else np.zeros((0, traj.state_dim, traj.state_dim))  # at (x_k, u_{k+1})
    lam = np.empty((T, traj.state_dim))
    lam[T - 1] = grad_x[T - 1] if terminal_costate is None else np.asarray(terminal_costate, float)
    for k in range(T - 2, -1, -1):
        lam[k] = fx[k].T @ lam[k + 1] + grad_x[k]
    return lam


def costate_after_window(lam: np.ndarray, t: int, l: int) -> np.ndarray:
    """``lambda_{t+l}``, with ``lambda_{T+1} = 0``."""
    T = lam.shape[0]
    k = t + l
    return np.zeros(lam.shape[1]) if k > T else lam[k - 1]


def input_stationarity(traj: Trajectory, system: DynamicalSystem, features: FeatureSet, omega, lam) -> np.ndarray:
    """Rows ``dphi'/du_k w + df'/du_k lambda_k`` for ``k = 1..T``, shape ``(T, m)``."""
    X, U = traj.states, traj.inputs
    fu = system.jac_u(X[:-1], U)
    phiu = features.jac_u(X[1:], U)
    return np.einsum("krm,r->km", phiu, np.asarray(omega, float)) + np.einsum("knm,kn->km", fu, lam)


def stationarity_residual(traj: Trajectory, system: DynamicalSystem, features: FeatureSet, omega, terminal_costate=None) -> float:
    """``max_k || df'/du_k lambda_k + dphi'/du_k w ||_inf`` with the recursion costates."""
    lam = compute_costates(traj, system, features, omega, terminal_costate)
    return float(np.max(np.abs(input_stationarity(traj, system, features, omega, lam))))


def kkt_residual(traj: Trajectory, system: DynamicalSystem, features: FeatureSet, omega, terminal_costate=None) -> float:
    """Larger of the stationarity residual and the dynamics defect."""
    return max(
        stationarity_residual(traj, system, features, omega, terminal_costate),
        traj.dynamics_defect(system),
    )


# ---------------------------------------------------------------------------
# LQR
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LqrProblem:
    A: np.ndarray
    B: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    x0: np.ndarray
    T: int

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, float))
        B = np.asarray(self.B, float)
        B = B[:, None] if B.ndim == 1 else B
        Q = np.atleast_2d(np.asarray(self.Q, float))
        R = np.atleast_2d(np.asarray(self.R, float))
        n, m = A.shape[0], B.shape[1]
        if A.shape != (n, n) or B.shape[0] != n or Q.shape != (n, n) or R.shape != (m, m):
            raise ValueError("inconsistent LQR dimensions")
        if not (np.allclose(Q, Q.T) and np.allclose(R, R.T)):
            raise ValueError("Q and R must be symmetric")
        if np.linalg.eigvalsh(Q).min() < -1e-12 * max(1.0, np.abs(Q).max()):
            raise ValueError("Q must be positive semidefinite")
        try:
            np.linalg.cholesky(R)
        except np.linalg.LinAlgError:
            raise ValueError("R must be positive definite") from None
        if int(self.T) < 1:
            raise ValueError("horizon must be at least 1")
        for name, val in (("A", A), ("B", B), ("Q", Q), ("R", R), ("x0", np.asarray(self.x0, float).reshape(n))):
            object.__setattr__(self, name, val)

    @property
    def system(self):
        return lti_system(self.A, self.B)


def lqr_gains(p: LqrProblem) -> list[np.ndarray]:
    """Feedback gains with ``u_{k+1} = -K[k] x_k`` for ``k = 0..T-1``."""
    A, B, Q, R = p.A, p.B, p.Q, p.R
    P = np.zeros_like(Q)
    gains = [None] * p.T
    for k in range(p.T, 0, -1):
        S = Q + P
        G = R + B.T @ S @ B
        K = np.linalg.solve(G, B.T @ S @ A)
        gains[k - 1] = K
        P = A.T @ S @ A - A.T @ S @ B @ K
        P = 0.5 * (P + P.T)
    return gains


def solve_lqr(p: LqrProblem) -> Trajectory:
    """Exact minimizer by backward Riccati recursion (``P_T = 0``)."""
    gains = lqr_gains(p)
    n, m = p.A.shape[0], p.B.shape[1]
    X = np.empty((p.T + 1, n))
    U = np.empty((p.T, m))
    X[0] = p.x0
    for k in range(p.T):
        U[k] = -gains[k] @ X[k]
        X[k + 1] = p.A @ X[k] + p.B @ U[k]
    return Trajectory(X, U, dynamically_consistent=True)


def reference_lqr_problem(weights=LQR_WEIGHTS, T: int = LQR_HORIZON, x0=LQR_X0) -> LqrProblem:
    w = np.asarray(weights, float)
    return LqrProblem(LQR_A, LQR_B, np.diag(w[:2]), np.array([[w[2]]]), np.asarray(x0, float), T)


def lqr_features() -> FeatureSet:
    return quadratic_feature_library(LQR_FEATURES, 2, 1)


# ---------------------------------------------------------------------------
# fixed-endpoint direct transcription
# ---------------------------------------------------------------------------


class SolverError(RuntimeError):
    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace or []


@dataclass(frozen=True)
class FixedEndpointOcp:
    system: DynamicalSystem
    features: FeatureSet
    weights: np.ndarray
    x_start: np.ndarray
    x_goal: np.ndarray
    T: int

    def __post_init__(self):
        w = np.asarray(self.weights, float)
        if w.shape != (len(self.features),) or not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite and match the feature count")
        if int(self.T) < 2:
            raise ValueError("horizon must be at least 2")
        n = self.system.state_dim
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "x_start", np.asarray(self.x_start, float).reshape(n))
        object.__setattr__(self, "x_goal", np.asarray(self.x_goal, float).reshape(n))


@dataclass
class SolverOptions:
    max_iter: int = 100
    tol: float = 1e-8
    initial_states: np.ndarray | None = None  # (T+1, n) guess; default linear interpolation
    initial_inputs: np.ndarray | None = None  # (T, m) guess; default least-squares inverse dynamics
    initial_inputs_fn: Callable | None = None  # (states) -> inputs
    max_backtracks: int = 40
    hess_step: float = 1e-5
    log_path: str | None = None


@dataclass
class SolverResult:
    trajectory: Trajectory
    multipliers: np.ndarray  # (T, n); row k - 1 is lambda_k
    residual: float
    iterations: int
    trace: list = field(default_factory=list)


def _ls_inverse_dynamics(system, states):
    """One Gauss-Newton step per sample from ``u = 0`` towards ``f(x_{k-1}, u) = x_k``."""
    T = states.shape[0] - 1
    U = np.zeros((T, system.input_dim))
    fu = system.jac_u(states[:-1], U)
    defect = states[1:] - system.step(states[:-1], U)
    for k in range(T):
        U[k] = np.linalg.lstsq(fu[k], defect[k], rcond=None)[0]
    return U


class _Transcription:
    """Variable layout ``[u_1, x_1, u_2, x_2, ..., u_{T-1}, x_{T-1}, u_T]``."""

    def __init__(self, p: FixedEndpointOcp, hess_step: float):
        self.p = p
        self.n, self.m, self.T = p.system.state_dim, p.system.input_dim, int(p.T)
        self.N = self.T * self.m + (self.T - 1) * self.n
        self.h = hess_step
        k = np.arange(1, self.T + 1)
        self.u_idx = ((k - 1) * (self.m + self.n))[:, None] + np.arange(self.m)
        kx = np.arange(1, self.T)
        self.x_idx = ((kx - 1) * (self.m + self.n) + self.m)[:, None] + np.arange(self.n)

    def pack(self, X, U):
        z = np.empty(self.N)
        z[self.u_idx] = U
        z[self.x_idx] = X[1:-1]
        return z

    def unpack(self, z):
        X = np.empty((self.T + 1, self.n))
        X[0], X[-1] = self.p.x_start, self.p.x_goal
        X[1:-1] = z[self.x_idx]
        return X, z[self.u_idx]

    def _grad_terms(self, Xp, U, Xc, lam):
        """Per-stage gradient pieces (dynamics w.r.t. (x_{k-1}, u_k), cost w.r.t. (x_k, u_k))."""
        sysm, feats, w = self.p.system, self.p.features, self.p.weights
        fx = sysm.jac_x(Xp, U)
        fu = sysm.jac_u(Xp, U)
        gdx = np.einsum("kni,kn->ki", fx, lam)
        gdu = np.einsum("kni,kn->ki", fu, lam)
        gcx = np.einsum("kri,r->ki", feats.jac_x(Xc, U), w)
        gcu = np.einsum("kri,r->ki", feats.jac_u(Xc, U), w)
        return fx, fu, gdx, gdu, gcx, gcu

    def residual(self, z, lam):
        X, U = self.unpack(z)
        Xp, Xc = X[:-1], X[1:]
        fx, fu, gdx, gdu, gcx, gcu = self._grad_terms(Xp, U, Xc, lam)
        grad = np.empty(self.N)
        grad[self.u_idx] = gcu + gdu
        # d/dx_k for k = 1..T-1: cost at stage k, dynamics of stage k+1, -lambda_k
        grad[self.x_idx] = gcx[:-1] + gdx[1:] - lam[:-1]
        cons = self.p.system.step(Xp, U) - Xc
        return np.concatenate([grad, cons.ravel()]), (fx, fu)

    def _stage_hessians(self, Xp, U, Xc, lam):
        """Central differences of the analytic gradients, batched over stages."""
        n, m = self.n, self.m
        Hd = np.zeros((self.T, n + m, n + m))
        Hc = np.zeros((self.T, n + m, n + m))
        for i in range(n + m):
            for sign in (1.0, -1.0):
                Xp_, U_, Xc_ = Xp.copy(), U.copy(), Xc.copy()
                if i < n:
                    hd = self.h * (1.0 + np.abs(Xp[:, i]))
                    hc = self.h * (1.0 + np.abs(Xc[:, i]))
                    Xp_[:, i] += sign * hd
                    Xc_[:, i] += sign * hc
                    Ud, Uc = U, U
                else:
                    hd = hc = self.h * (1.0 + np.abs(U[:, i - n]))
                    Ud = U.copy()
                    Ud[:, i - n] += sign * hd
                    Uc = Ud
                    Xp_, Xc_ = Xp, Xc
                _, _, gdx, gdu, _, _ = self._grad_terms(Xp_, Ud, Xc, lam)
                _, _, _, _, gcx, gcu = self._grad_terms(Xp, Uc, Xc_, lam)
                Hd[:, :, i] += sign * np.concatenate([gdx, gdu], axis=1) / (2 * hd)[:, None]
                Hc[:, :, i] += sign * np.concatenate([gcx, gcu], axis=1) / (2 * hc)[:, None]
        Hd = 0.5 * (Hd + np.swapaxes(Hd, 1, 2))
        Hc = 0.5 * (Hc + np.swapaxes(Hc, 1, 2))
        return Hd, Hc

    def kkt_matrix(self, z, lam, fx, fu, shift):
        n, m, T, N = self.n, self.m, self.T, self.N
        X, U = self.unpack(z)
        Hd, Hc = self._stage_hessians(X[:-1], U, X[1:], lam)
        rows, cols, vals = [], [], []

        def add(r_idx, c_idx, block):
            rr, cc = np.meshgrid(r_idx, c_idx, indexing="ij")
            rows.append(rr.ravel())
            cols.append(cc.ravel())
            vals.append(np.asarray(block).ravel())

        for k in range(1, T + 1):
            # dynamics stage k acts on (x_{k-1}, u_k); cost stage k on (x_k, u_k)
            ui = self.u_idx[k - 1]
            prev = self.x_idx[k - 2] if k >= 2 else None
            cur = self.x_idx[k - 1] if k <= T - 1 else None
            H, C = Hd[k - 1], Hc[k - 1]
            add(ui, ui, H[n:, n:] + C[n:, n:])
            if prev is not None:
                add(prev, prev, H[:n, :n])
                add(prev, ui, H[:n, n:])
                add(ui, prev, H[n:, :n])
            if cur is not None:
                add(cur, cur, C[:n, :n])
                add(cur, ui, C[:n, n:])
                add(ui, cur, C[n:, :n])
            # constraint rows c_k = f(x_{k-1}, u_k) - x_k
            cr = N + (k - 1) * n + np.arange(n)
            add(cr, ui, fu[k - 1])
            add(ui, cr, fu[k - 1].T)
            if prev is not None:
                add(cr, prev, fx[k - 1])
                add(prev, cr, fx[k - 1].T)
            if cur is not None:
                add(cr, cur, -np.eye(n))
                add(cur, cr, -np.eye(n))
        size = N + T * n
        if shift:
            diag = np.arange(size)
            rows.append(diag)
            cols.append(diag)
            vals.append(np.where(diag < N, shift, -shift))
        return sp.csc_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(size, size)
        )


def solve_fixed_endpoint(p: FixedEndpointOcp, opts: SolverOptions | None = None) -> SolverResult:
    """Newton iterations on the full KKT system with a backtracking line search on ``||residual||``.

    Hessian blocks of the Lagrangian are central differences of the analytic
    gradients. A diagonal shift (1e-8, growing tenfold) is added whenever the
    sparse factorization fails.
    """
    opts = opts or SolverOptions()
    tr = _Transcription(p, opts.hess_step)
    T, n = tr.T, tr.n
    if opts.initial_states is not None:
        X0 = np.asarray(opts.initial_states, float).copy()
        X0[0], X0[-1] = p.x_start, p.x_goal
    else:
        s = np.linspace(0.0, 1.0, T + 1)[:, None]
        X0 = (1 - s) * p.x_start + s * p.x_goal
    if opts.initial_inputs is not None:
        U0 = np.asarray(opts.initial_inputs, float)
    elif opts.initial_inputs_fn is not None:
        U0 = np.asarray(opts.initial_inputs_fn(X0), float)
    else:
        U0 = _ls_inverse_dynamics(p.system, X0)
    z = tr.pack(X0, U0)
    lam = np.zeros((T, n))
    res, jac = tr.residual(z, lam)
    norm = np.linalg.norm(res)
    trace = [{"iter": 0, "residual": float(norm), "residual_inf": float(np.max(np.abs(res))), "step_length": 0.0}]
    it = 0
    while np.max(np.abs(res)) >= opts.tol:
        if it >= opts.max_iter:
            raise SolverError(f"no convergence after {it} Newton iterations (residual {np.max(np.abs(res)):.3e})", trace)
        it += 1
        shift = 0.0
        while True:
            K = tr.kkt_matrix(z, lam, *jac, shift)
            try:
                step = splu(K).solve(-res)
                if np.all(np.isfinite(step)):
                    break
            except RuntimeError:
                pass
            shift = 1e-8 if shift == 0.0 else shift * 10.0
            if shift > 1e4:
                raise SolverError("KKT matrix singular even with regularization", trace)
        dz, dlam = step[: tr.N], step[tr.N :].reshape(T, n)
        alpha = 1.0
        for _ in range(opts.max_backtracks):
            res_new, jac_new = tr.residual(z + alpha * dz, lam + alpha * dlam)
            norm_new = np.linalg.norm(res_new)
            if norm_new <= (1.0 - 1e-4 * alpha) * norm:
                break
            alpha *= 0.5
        else:
            raise SolverError(f"line search failed at iteration {it} (residual {np.max(np.abs(res)):.3e})", trace)
        z, lam = z + alpha * dz, lam + alpha * dlam
        res, jac, norm = res_new, jac_new, norm_new
        trace.append({"iter": it, "residual": float(norm), "residual_inf": float(np.max(np.abs(res))), "step_length": alpha})
        log.debug("newton iter %d residual %.3e step %.3g", it, norm, alpha)
    if opts.log_path:
        with open(opts.log_path, "w") as fh:
            for rec in trace:
                fh.write(json.dumps(rec) + "\n")
    X, U = tr.unpack(z)
    traj = Trajectory(X, U, dynamically_consistent=True, multipliers=lam.copy())
    return SolverResult(traj, lam, float(np.max(np.abs(res))), it, trace)
