"""Recovery-matrix construction, rank examination and weight extraction.

For an observation window ``k = t .. t+l-1`` the recovery matrix
``H(t, l) = [H1 H2]`` (``m*l`` rows, ``r + n`` columns) satisfies

    H1 @ omega + H2 @ lambda_{t+l} = 0

for the true (zero-padded) weight vector and the costate just beyond the
window, so the weights are read off its kernel once the kernel is one
dimensional.

Jacobian evaluation points follow the ``x_{k+1} = f(x_k, u_{k+1})``
convention: for sample ``k``

* ``df/dx`` is evaluated at ``(x_k, u_{k+1})`` and replaced by the identity
  at the terminal sample ``k = T``;
* ``df/du`` is evaluated at ``(x_{k-1}, u_k)``;
* feature gradients are evaluated at ``(x_k, u_k)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator, NamedTuple

import numpy as np

from .dynamics import DynamicalSystem, FeatureSet
from .trajectory import Trajectory

RANK_RTOL = 1e-9


class DegenerateWindowError(ValueError):
    """The recovery matrix is identically zero."""


class SumDegenerateKernelError(ValueError):
    """The kernel direction has (numerically) zero weight sum."""


@dataclass(frozen=True)
class Observation:
    """One trajectory sample together with its Jacobian evaluation points.

    ``x_prev`` defaults to ``x`` and ``u_next`` to ``u``; both defaults are
    exact only for systems with constant Jacobians. ``terminal`` marks the
    last sample of the horizon, where ``df/dx`` is taken as the identity.
    """

    x: np.ndarray
    u: np.ndarray
    x_prev: np.ndarray | None = None
    u_next: np.ndarray | None = None
    terminal: bool = False


class StepJacobians(NamedTuple):
    fx: np.ndarray  # (..., n, n)
    fu: np.ndarray  # (..., n, m)
    phix: np.ndarray  # (..., r, n)
    phiu: np.ndarray  # (..., r, m)


def observation_jacobians(obs: Observation, system: DynamicalSystem, features: FeatureSet) -> StepJacobians:
    x = np.asarray(obs.x, float)
    u = np.asarray(obs.u, float)
    n, m = system.state_dim, system.input_dim
    if x.shape != (n,) or u.shape != (m,):
        raise ValueError(f"observation has shapes {x.shape}, {u.shape}; system expects ({n},), ({m},)")
    if features.state_dim != n or features.input_dim != m:
        raise ValueError("feature set dimensions do not match the system")
    x_prev = x if obs.x_prev is None else np.asarray(obs.x_prev, float)
    if obs.terminal:
        fx = np.eye(n)
    else:
        u_next = u if obs.u_next is None else np.asarray(obs.u_next, float)
        fx = system.jac_x(x, u_next)
    fu = system.jac_u(x_prev, u)
    return StepJacobians(fx, fu, features.jac_x(x, u), features.jac_u(x, u))


def observations(traj: Trajectory, t: int, stop: int | None = None) -> Iterator[Observation]:
    """Yield the samples ``t, t+1, .., stop`` (default ``T``) of a trajectory."""
    T = traj.horizon
    stop = T if stop is None else stop
    if not 1 <= t <= stop <= T:
        raise ValueError(f"need 1 <= t <= stop <= T, got t={t}, stop={stop}, T={T}")
    for k in range(t, stop + 1):
        yield Observation(
            x=traj.x(k),
            u=traj.u(k),
            x_prev=traj.x(k - 1),
            u_next=traj.u(k + 1) if k < T else None,
            terminal=k == T,
        )


def window_jacobians(traj: Trajectory, t: int, l: int, system: DynamicalSystem, features: FeatureSet) -> StepJacobians:
    """Batched Jacobians for samples ``t .. t+l-1`` (leading axis of length ``l``)."""
    T = traj.horizon
    if l < 1:
        raise ValueError("observation window must be nonempty")
    if not 1 <= t <= t + l - 1 <= T:
        raise ValueError(f"window t={t}, l={l} does not fit in horizon T={T}")
    if traj.state_dim != system.state_dim or traj.input_dim != system.input_dim:
        raise ValueError("trajectory dimensions do not match the system")
    ks = np.arange(t, t + l)
    X = traj.states[ks]
    U = traj.inputs[ks - 1]
    Xprev = traj.states[ks - 1]
    fu = system.jac_u(Xprev, U)
    interior = ks < T
    fx = np.broadcast_to(np.eye(system.state_dim), (l, system.state_dim, system.state_dim)).copy()
    if interior.any():
        fx[interior] = system.jac_x(X[interior], traj.inputs[ks[interior]])
    return StepJacobians(fx, fu, features.jac_x(X, U), features.jac_u(X, U))


@dataclass(frozen=True)
class RecoveryState:
    """``H(t, l) = [H1 H2]`` for the window starting at ``t`` (1-based) of length ``l``."""

    t: int
    l: int
    H1: np.ndarray
    H2: np.ndarray

    def __post_init__(self):
        if self.H1.shape[0] != self.H2.shape[0]:
            raise ValueError("H1 and H2 must have the same number of rows")
        if self.H1.shape[0] % self.l:
            raise ValueError("row count must be a multiple of the window length")

    @property
    def n(self) -> int:
        return self.H2.shape[1]

    @property
    def r(self) -> int:
        return self.H1.shape[1]

    @property
    def m(self) -> int:
        return self.H1.shape[0] // self.l

    @property
    def H(self) -> np.ndarray:
        return np.hstack([self.H1, self.H2])


def build_from_jacobians(t: int, jac: StepJacobians) -> RecoveryState:
    """Direct construction from batched window Jacobians.

    ``Y = F_x^{-1} [Phi_x, V]`` is obtained by block back-substitution on the
    unit upper block-bidiagonal ``F_x`` and then ``H = F_u Y + [Phi_u, 0]``.
    """
    fx, fu, phix, phiu = (np.asarray(a, float) for a in jac)
    l, n, m = fu.shape
    r = phix.shape[1]
    if l < 1:
        raise ValueError("observation window must be nonempty")
    Y = np.zeros((l, n, r + n))
    Y[:, :, :r] = np.swapaxes(phix, 1, 2)
    Y[-1, :, r:] = fx[-1].T
    for k in range(l - 2, -1, -1):
        Y[k] += fx[k].T @ Y[k + 1]
    H = np.einsum("kin,knc->kic", np.swapaxes(fu, 1, 2), Y)
    H[:, :, :r] += np.swapaxes(phiu, 1, 2)
    H = H.reshape(l * m, r + n)
    return RecoveryState(t, l, H[:, :r].copy(), H[:, r:].copy())


def build_recovery_matrix(traj: Trajectory, t: int, l: int, system: DynamicalSystem, features: FeatureSet) -> RecoveryState:
    return build_from_jacobians(t, window_jacobians(traj, t, l, system, features))


def init_recovery(t: int, obs: Observation, system: DynamicalSystem, features: FeatureSet) -> RecoveryState:
    """Single-observation matrix ``[fu' phix' + phiu', fu' fx']``."""
    fx, fu, phix, phiu = observation_jacobians(obs, system, features)
    H1 = fu.T @ phix.T + phiu.T
    H2 = fu.T @ fx.T
    return RecoveryState(t, 1, H1, H2)


def update_recovery(state: RecoveryState, obs: Observation, system: DynamicalSystem, features: FeatureSet) -> RecoveryState:
    """Append observation ``t + l`` via the two-factor block product.

    ``H(t, l+1) = [[H1, H2], [phiu', fu']] @ [[I, 0], [phix', fx']]``
    """
    fx, fu, phix, phiu = observation_jacobians(obs, system, features)
    if phix.shape[0] != state.r or fx.shape[0] != state.n or fu.shape[1] != state.m:
        raise ValueError("observation dimensions do not match the recovery state")
    H1 = np.vstack([state.H1 + state.H2 @ phix.T, fu.T @ phix.T + phiu.T])
    H2 = np.vstack([state.H2 @ fx.T, fu.T @ fx.T])
    return RecoveryState(state.t, state.l + 1, H1, H2)


def normalize(H) -> np.ndarray:
    """``H / ||H||_F``; raises on the zero matrix."""
    if isinstance(H, RecoveryState):
        H = H.H
    H = np.asarray(H, float)
    norm = np.linalg.norm(H)
    if norm == 0.0 or not np.isfinite(norm):
        raise DegenerateWindowError("recovery matrix is zero (or non-finite); the window carries no information")
    return H / norm


@dataclass(frozen=True)
class RankDiagnostics:
    sigma: np.ndarray  # ascending singular values of the normalized matrix
    kappa: float
    length_ok: bool | None = None

    @property
    def sigma_min(self) -> float:
        return float(self.sigma[0])


def _kappa(s1: float, s2: float) -> float:
    if s1 > 0.0:
        return s2 / s1
    return math.inf if s2 > 0.0 else math.nan


def rank_index(Hbar, l: int | None = None, r: int | None = None, n: int | None = None, m: int | None = None) -> RankDiagnostics:
    """Ratio of the two smallest singular values of ``Hbar``.

    ``kappa`` is ``inf`` when only the smallest singular value vanishes and
    ``nan`` when both do. The length flag ``l > (r + n) / m`` is filled in
    when the window dimensions are supplied.
    """
    Hbar = np.asarray(Hbar, float)
    if min(Hbar.shape) < 2:
        raise ValueError(f"rank index needs at least two singular values, matrix is {Hbar.shape}")
    s = np.linalg.svd(Hbar, compute_uv=False)[::-1]
    length_ok = None
    if None not in (l, r, n, m):
        length_ok = l * m > r + n
    return RankDiagnostics(s, _kappa(float(s[0]), float(s[1])), length_ok)


def rank_test(diag: RankDiagnostics | float, l: int, r: int, n: int, m: int, gamma: float) -> bool:
    """``kappa >= gamma`` and ``l > (r + n) / m``."""
    if not gamma > 1:
        raise ValueError(f"rank index threshold must exceed 1, got {gamma}")
    kappa = diag.kappa if isinstance(diag, RankDiagnostics) else float(diag)
    return bool(kappa >= gamma and l * m > r + n)


def uniform_lower_bound(r: int, n: int, m: int) -> int:
    """``ceil((r + n - 1) / m)``."""
    if min(r, n, m) < 1:
        raise ValueError("dimensions must be positive")
    return -(-(r + n - 1) // m)


def numerical_rank(H, rtol: float = RANK_RTOL) -> int:
    s = np.linalg.svd(np.asarray(H, float), compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.sum(s > rtol * s[0]))


def recover_weights(Hbar, r: int, n: int, sum_tol: float = 1e-8) -> tuple[np.ndarray, np.ndarray]:
    """Minimize ``||Hbar [w; lam]||`` subject to ``sum(w) = 1``.

    Takes the right singular vector of the smallest singular value and
    rescales it so the weight part sums to one.
    """
    Hbar = np.asarray(Hbar, float)
    if Hbar.shape[1] != r + n:
        raise ValueError(f"matrix has {Hbar.shape[1]} columns, expected r + n = {r + n}")
    if not np.any(Hbar):
        raise DegenerateWindowError("recovery matrix is zero")
    _, _, Vt = np.linalg.svd(Hbar, full_matrices=True)
    v = Vt[-1]
    total = v[:r].sum()
    if abs(total) < sum_tol:
        raise SumDegenerateKernelError(f"kernel direction has weight sum {total:.3e}; cannot normalize")
    v = v / total
    return v[:r], v[r:]


def recovery_error(omega_hat, omega_true) -> float:
    """``inf_{c > 0} ||c w_hat - w*|| / ||w*||`` in closed form."""
    w = np.asarray(omega_hat, float)
    ws = np.asarray(omega_true, float)
    if w.shape != ws.shape:
        raise ValueError(f"weight vectors have shapes {w.shape} and {ws.shape}")
    ns = np.linalg.norm(ws)
    if ns == 0.0:
        raise ValueError("ground-truth weight vector must be nonzero")
    ww = float(w @ w)
    if ww == 0.0:
        return 1.0
    c = max(0.0, float(w @ ws) / ww)
    if c == 0.0:
        return 1.0
    return float(np.linalg.norm(c * w - ws) / ns)


def kernel_residual(state, omega, lam) -> float:
    """``||H [omega; lam]||_2`` for a state or a raw (possibly normalized) matrix."""
    H = state.H if isinstance(state, RecoveryState) else np.asarray(state, float)
    z = np.concatenate([np.asarray(omega, float), np.asarray(lam, float)])
    return float(np.linalg.norm(H @ z))


RECOVERED = "recovered"
INSUFFICIENT = "insufficient_observations"


@dataclass
class RecoveryReport:
    t: int
    l_min: int | None
    omega: np.ndarray | None
    lam: np.ndarray | None
    kappa_history: list = field(default_factory=list)
    e_omega: float | None = None
    status: str = RECOVERED
    method: str = "recovery-matrix"
    degenerate: bool | None = None

    def to_dict(self) -> dict:
        def _num(v):
            return None if v is None or (isinstance(v, float) and math.isnan(v)) else v

        d = {
            "t": self.t,
            "l_min": self.l_min,
            "omega": None if self.omega is None else [float(v) for v in self.omega],
            "lambda": None if self.lam is None else [float(v) for v in self.lam],
            "kappa_history": [_num(float(k)) if not math.isinf(k) else "inf" for k in self.kappa_history],
            "status": self.status,
            "method": self.method,
        }
        if self.e_omega is not None:
            d["e_omega"] = float(self.e_omega)
        if self.degenerate is not None:
            d["degenerate"] = bool(self.degenerate)
        return d

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    def kappa_csv(self) -> str:
        lines = ["l,kappa"]
        for l, k in enumerate(self.kappa_history, start=1):
            lines.append(f"{l},{format(float(k), '.17g')}")
        return "\n".join(lines) + "\n"


def minimal_observation_ioc(
    stream: Iterable[Observation],
    t: int,
    system: DynamicalSystem,
    features: FeatureSet,
    gamma: float = 100.0,
    l_cap: int | None = None,
    omega_true=None,
) -> RecoveryReport:
    """Grow the window one observation at a time until the rank test first passes.

    ``l_cap`` bounds the window length; reaching it without passing the test
    gives a report with status ``insufficient_observations``. A stream that
    ends before ``l_cap`` samples is an error. With ``l_cap=None`` the whole
    stream is available.
    """
    if not gamma > 1:
        raise ValueError(f"rank index threshold must exceed 1, got {gamma}")
    if l_cap is not None and l_cap < 1:
        raise ValueError("l_cap must be at least 1")
    n, m, r = system.state_dim, system.input_dim, len(features)
    it = iter(stream)
    try:
        first = next(it)
    except StopIteration:
        raise ValueError("observation stream is empty") from None
    state = init_recovery(t, first, system, features)
    history = []
    while True:
        Hbar = normalize(state)
        l = state.l
        if min(Hbar.shape) >= 2:
            diag = rank_index(Hbar)
            history.append(diag.kappa)
            if rank_test(diag, l, r, n, m, gamma):
                omega, lam = recover_weights(Hbar, r, n)
                e = None if omega_true is None else recovery_error(omega, omega_true)
                return RecoveryReport(t, l, omega, lam, history, e)
        else:
            history.append(math.nan)
        if l_cap is not None and l >= l_cap:
            return RecoveryReport(t, None, None, None, history, None, INSUFFICIENT)
        try:
            obs = next(it)
        except StopIteration:
            if l_cap is not None:
                raise ValueError(f"observation stream ended after {l} samples, before l_cap={l_cap}") from None
            return RecoveryReport(t, None, None, None, history, None, INSUFFICIENT)
        state = update_recovery(state, obs, system, features)


def recover_on_window(traj: Trajectory, t: int, l: int, system, features, omega_true=None) -> RecoveryReport:
    """Fixed-window recovery (no rank test), used for error-versus-length curves."""
    state = build_recovery_matrix(traj, t, l, system, features)
    Hbar = normalize(state)
    omega, lam = recover_weights(Hbar, len(features), system.state_dim)
    kappa = rank_index(Hbar).kappa if min(Hbar.shape) >= 2 else math.nan
    e = None if omega_true is None else recovery_error(omega, omega_true)
    return RecoveryReport(t, l, omega, lam, [kappa], e)
