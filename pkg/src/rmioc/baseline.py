"""Window-truncated KKT residual estimator (the comparison baseline).

Over the window ``k = t .. t+l-1`` the unknowns are the weights ``w`` and the
costates ``lambda_t .. lambda_{t+l-1}``. The residual rows are

    input stationarity   dphi'/du_k w + df'/du_k lambda_k
    costate recursion    dphi'/dx_k w + df'/dx_k lambda_{k+1} - lambda_k

with ``lambda_{t+l}`` set to zero. That truncation is exact only when the
window reaches the end of the horizon; elsewhere it is the blind spot of
this family of estimators. ``sum(w) = 1`` is imposed by eliminating the last
weight.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import DynamicalSystem, FeatureSet
from .recovery import RecoveryReport, StepJacobians, recovery_error, window_jacobians
from .trajectory import Trajectory


@dataclass(frozen=True)
class KktIocProblem:
    traj: Trajectory
    t: int
    l: int
    system: DynamicalSystem
    features: FeatureSet

    def __post_init__(self):
        if self.l < 2:
            raise ValueError(f"baseline needs a window of at least two samples, got l={self.l}")
        if not 1 <= self.t <= self.t + self.l - 1 <= self.traj.horizon:
            raise ValueError(f"window t={self.t}, l={self.l} does not fit in horizon T={self.traj.horizon}")
        if self.features.state_dim != self.system.state_dim or self.features.input_dim != self.system.input_dim:
            raise ValueError("feature set dimensions do not match the system")


@dataclass
class KktEstimate:
    omega: np.ndarray
    lam: np.ndarray  # (l, n) from kkt_ioc, row j is lambda_{t+j}; flat from solve_kkt_ls
    residual: float
    degenerate: bool


def kkt_system(jac: StepJacobians) -> tuple[np.ndarray, np.ndarray]:
    """Stacked residual matrices ``(A_w, A_lam)`` so the residual is ``A_w w + A_lam lam``."""
    fx, fu, phix, phiu = (np.asarray(a, float) for a in jac)
    l, n, m = fu.shape
    r = phix.shape[1]
    rows = l * (m + n)
    Aw = np.zeros((rows, r))
    Al = np.zeros((rows, l * n))
    for j in range(l):
        s = j * (m + n)
        cols = slice(j * n, (j + 1) * n)
        Aw[s : s + m] = phiu[j].T
        Al[s : s + m, cols] = fu[j].T
        Aw[s + m : s + m + n] = phix[j].T
        Al[s + m : s + m + n, cols] = -np.eye(n)
        if j + 1 < l:
            Al[s + m : s + m + n, (j + 1) * n : (j + 2) * n] = fx[j].T
    return Aw, Al


def solve_kkt_ls(Aw: np.ndarray, Al: np.ndarray, rcond: float = 1e-12) -> KktEstimate:
    """Least squares with ``sum(w) = 1`` eliminated by ``w_r = 1 - sum_{i<r} w_i``."""
    r = Aw.shape[1]
    n_lam = Al.shape[1]
    # w = e_r + N y,  N = [I; -1']
    N = np.vstack([np.eye(r - 1), -np.ones((1, r - 1))])
    A = np.hstack([Aw @ N, Al])
    b = -Aw[:, -1]
    sol, _, rank, _ = np.linalg.lstsq(A, b, rcond=rcond)
    w = N @ sol[: r - 1]
    w[-1] += 1.0
    lam = sol[r - 1 :]
    res = float(np.linalg.norm(Aw @ w + Al @ lam))
    return KktEstimate(w, lam, res, bool(rank < A.shape[1]))


def kkt_ioc(p: KktIocProblem) -> KktEstimate:
    jac = window_jacobians(p.traj, p.t, p.l, p.system, p.features)
    Aw, Al = kkt_system(jac)
    est = solve_kkt_ls(Aw, Al)
    est.lam = est.lam.reshape(p.l, p.system.state_dim)
    return est


def kkt_report(traj: Trajectory, t: int, l: int, system, features, omega_true=None) -> RecoveryReport:
    est = kkt_ioc(KktIocProblem(traj, t, l, system, features))
    e = None if omega_true is None else recovery_error(est.omega, omega_true)
    return RecoveryReport(t, l, est.omega, est.lam[0], [], e, method="kkt-baseline", degenerate=est.degenerate)
