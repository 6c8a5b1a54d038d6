"""Discrete-time systems, feature libraries and the two-link arm model.

All evaluation routines broadcast over leading axes: ``x`` has shape
``(..., n)`` and ``u`` has shape ``(..., m)``; Jacobians come back with
shape ``(..., n, n)`` / ``(..., n, m)`` (systems) or ``(..., r, n)`` /
``(..., r, m)`` (features).

Index convention: the input that drives ``x_k`` to ``x_{k+1}`` is called
``u_{k+1}``, i.e. ``x_{k+1} = f(x_k, u_{k+1})``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


def fd_jacobian(fun: Callable[[np.ndarray], np.ndarray], z: np.ndarray, rel_step: float = 1e-6) -> np.ndarray:
    """Central finite-difference Jacobian of ``fun`` at a single point ``z``.

    The step for coordinate i is ``rel_step * (1 + |z_i|)``.
    """
    z = np.asarray(z, dtype=float)
    f0 = np.atleast_1d(np.asarray(fun(z), dtype=float))
    jac = np.empty((f0.size, z.size))
    for i in range(z.size):
        h = rel_step * (1.0 + abs(z[i]))
        zp = z.copy()
        zm = z.copy()
        zp[i] += h
        zm[i] -= h
        jac[:, i] = (np.atleast_1d(fun(zp)) - np.atleast_1d(fun(zm))) / (2.0 * h)
    return jac


# ---------------------------------------------------------------------------
# systems
# ---------------------------------------------------------------------------


class DynamicalSystem:
    """Discrete-time map ``x_next = f(x, u)`` with analytic Jacobians."""

    state_dim: int
    input_dim: int

    def step(self, x, u) -> np.ndarray:
        raise NotImplementedError

    def jac_x(self, x, u) -> np.ndarray:
        raise NotImplementedError

    def jac_u(self, x, u) -> np.ndarray:
        raise NotImplementedError

    def _check(self, x, u):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        if x.shape[-1:] != (self.state_dim,) or u.shape[-1:] != (self.input_dim,):
            raise ValueError(
                f"expected state (..., {self.state_dim}) and input (..., {self.input_dim}), "
                f"got {x.shape} and {u.shape}"
            )
        return x, u

    def fd_jac_x(self, x, u, rel_step: float = 1e-6) -> np.ndarray:
        x, u = self._check(x, u)
        return fd_jacobian(lambda xx: self.step(xx, u), x, rel_step)

    def fd_jac_u(self, x, u, rel_step: float = 1e-6) -> np.ndarray:
        x, u = self._check(x, u)
        return fd_jacobian(lambda uu: self.step(x, uu), u, rel_step)


class LinearSystem(DynamicalSystem):
    def __init__(self, A, B):
        A = np.array(A, dtype=float)
        B = np.array(B, dtype=float)
        if B.ndim == 1:
            B = B[:, None]
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ValueError(f"A must be square, got shape {A.shape}")
        if B.ndim != 2 or B.shape[0] != A.shape[0]:
            raise ValueError(f"B must have {A.shape[0]} rows, got shape {B.shape}")
        A.setflags(write=False)
        B.setflags(write=False)
        self.A = A
        self.B = B
        self.state_dim = A.shape[0]
        self.input_dim = B.shape[1]

    def step(self, x, u):
        x, u = self._check(x, u)
        return x @ self.A.T + u @ self.B.T

    def jac_x(self, x, u):
        x, u = self._check(x, u)
        batch = np.broadcast_shapes(x.shape[:-1], u.shape[:-1])
        return np.broadcast_to(self.A, batch + self.A.shape).copy()

    def jac_u(self, x, u):
        x, u = self._check(x, u)
        batch = np.broadcast_shapes(x.shape[:-1], u.shape[:-1])
        return np.broadcast_to(self.B, batch + self.B.shape).copy()

    def __repr__(self):
        return f"LinearSystem(n={self.state_dim}, m={self.input_dim})"


def lti_system(A, B) -> LinearSystem:
    """``f(x, u) = A x + B u``."""
    return LinearSystem(A, B)


# reference inverse-LQR instance
LQR_A = np.array([[-1.0, 1.0], [0.0, 1.0]])
LQR_B = np.array([[1.0], [3.0]])
LQR_X0 = np.array([2.0, -2.0])
LQR_WEIGHTS = np.array([0.507, 0.845, 0.169])
LQR_HORIZON = 100


class ContinuousSystem:
    """``xdot = f_c(x, u)`` with analytic Jacobians (same broadcasting rules)."""

    state_dim: int
    input_dim: int

    def rhs(self, x, u) -> np.ndarray:
        raise NotImplementedError

    def jac_x(self, x, u) -> np.ndarray:
        raise NotImplementedError

    def jac_u(self, x, u) -> np.ndarray:
        raise NotImplementedError


class EulerDiscretized(DynamicalSystem):
    """Forward-Euler map ``x + dt * f_c(x, u)``."""

    def __init__(self, continuous: ContinuousSystem, dt: float):
        if not dt > 0:
            raise ValueError(f"dt must be positive, got {dt}")
        self.continuous = continuous
        self.dt = float(dt)
        self.state_dim = continuous.state_dim
        self.input_dim = continuous.input_dim

    def step(self, x, u):
        x, u = self._check(x, u)
        return x + self.dt * self.continuous.rhs(x, u)

    def jac_x(self, x, u):
        x, u = self._check(x, u)
        return np.eye(self.state_dim) + self.dt * self.continuous.jac_x(x, u)

    def jac_u(self, x, u):
        x, u = self._check(x, u)
        return self.dt * self.continuous.jac_u(x, u)

    def __repr__(self):
        return f"EulerDiscretized({self.continuous!r}, dt={self.dt})"


def discretize_euler(continuous: ContinuousSystem, dt: float) -> EulerDiscretized:
    return EulerDiscretized(continuous, dt)


# ---------------------------------------------------------------------------
# two-link arm
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ArmParameters:
    """Two-link planar arm moving in the vertical plane (SI units)."""

    m1: float = 1.0
    m2: float = 1.0
    l1: float = 1.0
    l2: float = 1.0
    r1: float = 0.5
    r2: float = 0.5
    I1: float = 0.5
    I2: float = 0.5
    g: float = 9.81

    def __post_init__(self):
        for name in ("m1", "m2", "l1", "l2", "r1", "r2", "I1", "I2"):
            if not getattr(self, name) > 0:
                raise ValueError(f"arm parameter {name} must be positive")
        if self.g < 0:
            raise ValueError("gravity constant must be nonnegative")

    @property
    def a1(self):
        return self.m1 * self.r1**2 + self.m2 * (self.l1**2 + self.r2**2) + self.I1 + self.I2

    @property
    def a2(self):
        return self.m2 * self.l1 * self.r2

    @property
    def a3(self):
        return self.m2 * self.r2**2 + self.I2

    @property
    def b1(self):
        return self.l1 * self.m2 + self.r1 * self.m1

    @property
    def b2(self):
        return self.r2 * self.m2


def arm_mass_matrix(p: ArmParameters, theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    c2 = np.cos(theta[..., 1])
    M = np.empty(theta.shape[:-1] + (2, 2))
    M[..., 0, 0] = p.a1 + 2 * p.a2 * c2
    M[..., 0, 1] = M[..., 1, 0] = p.a3 + p.a2 * c2
    M[..., 1, 1] = p.a3
    return M


def arm_coriolis_matrix(p: ArmParameters, theta, dtheta) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    dtheta = np.asarray(dtheta, dtype=float)
    s2 = np.sin(theta[..., 1])
    d1, d2 = dtheta[..., 0], dtheta[..., 1]
    C = np.zeros(np.broadcast_shapes(theta.shape, dtheta.shape)[:-1] + (2, 2))
    C[..., 0, 0] = -p.a2 * d2 * s2
    C[..., 0, 1] = -p.a2 * (d1 + d2) * s2
    C[..., 1, 0] = p.a2 * d1 * s2
    return C


def arm_gravity(p: ArmParameters, theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    c1 = np.cos(theta[..., 0])
    c12 = np.cos(theta[..., 0] + theta[..., 1])
    return np.stack([p.b1 * p.g * c1 + p.b2 * p.g * c12, p.b2 * p.g * c12], axis=-1)


def _matvec(M, v):
    return np.einsum("...ij,...j->...i", M, v)


def arm_inverse_dynamics(p: ArmParameters, theta, dtheta, ddtheta) -> np.ndarray:
    """Joint torques ``M(q) qdd + C(q, qd) qd + g(q)``."""
    M = arm_mass_matrix(p, theta)
    C = arm_coriolis_matrix(p, theta, dtheta)
    return _matvec(M, np.asarray(ddtheta, float)) + _matvec(C, np.asarray(dtheta, float)) + arm_gravity(p, theta)


def _split_state(x):
    x = np.asarray(x, dtype=float)
    theta = x[..., [0, 2]]
    dtheta = x[..., [1, 3]]
    return theta, dtheta


def arm_accelerations(p: ArmParameters, theta, dtheta, tau) -> np.ndarray:
    M = arm_mass_matrix(p, theta)
    h = np.asarray(tau, float) - _matvec(arm_coriolis_matrix(p, theta, dtheta), dtheta) - arm_gravity(p, theta)
    return np.linalg.solve(M, h[..., None])[..., 0]


def arm_forward_dynamics(p: ArmParameters, x, u) -> np.ndarray:
    """State derivative for ``x = [th1, dth1, th2, dth2]`` and ``u = [tau1, tau2]``."""
    theta, dtheta = _split_state(x)
    ddtheta = arm_accelerations(p, theta, dtheta, u)
    out = np.empty(np.broadcast_shapes(np.shape(x)[:-1], np.shape(u)[:-1]) + (4,))
    out[..., 0] = dtheta[..., 0]
    out[..., 1] = ddtheta[..., 0]
    out[..., 2] = dtheta[..., 1]
    out[..., 3] = ddtheta[..., 1]
    return out


class TwoLinkArm(ContinuousSystem):
    """Continuous-time two-link arm with hand-derived Jacobians.

    With ``qdd = M(q)^{-1} h``, ``h = tau - c(q, qd) - g(q)`` and
    ``c = C(q, qd) qd``:

    * ``d qdd / d tau = M^{-1}``
    * ``d qdd / d qd_j = -M^{-1} dc/dqd_j``
    * ``d qdd / d q_j = M^{-1} (-dM/dq_j qdd - dc/dq_j - dg/dq_j)``
    """

    state_dim = 4
    input_dim = 2

    def __init__(self, params: ArmParameters | None = None):
        self.params = params if params is not None else ArmParameters()

    def __repr__(self):
        return f"TwoLinkArm({self.params})"

    def rhs(self, x, u):
        return arm_forward_dynamics(self.params, x, u)

    def _partials(self, x, u):
        p = self.params
        theta, dtheta = _split_state(x)
        u = np.asarray(u, float)
        batch = np.broadcast_shapes(theta.shape[:-1], u.shape[:-1])
        theta = np.broadcast_to(theta, batch + (2,))
        dtheta = np.broadcast_to(dtheta, batch + (2,))
        M = arm_mass_matrix(p, theta)
        Minv = np.linalg.inv(M)
        qdd = arm_accelerations(p, theta, dtheta, u)

        s1, s2 = np.sin(theta[..., 0]), np.sin(theta[..., 1])
        c2 = np.cos(theta[..., 1])
        s12 = np.sin(theta[..., 0] + theta[..., 1])
        d1, d2 = dtheta[..., 0], dtheta[..., 1]
        a2, b1, b2, g = p.a2, p.b1, p.b2, p.g

        # columns: derivative w.r.t. th1, th2 of (-dM qdd - dc - dg)
        dM2 = np.zeros(batch + (2, 2))
        dM2[..., 0, 0] = -2 * a2 * s2
        dM2[..., 0, 1] = dM2[..., 1, 0] = -a2 * s2
        dc_dth2 = np.stack([-a2 * c2 * (2 * d1 * d2 + d2**2), a2 * c2 * d1**2], axis=-1)
        dg_dth1 = np.stack([-b1 * g * s1 - b2 * g * s12, -b2 * g * s12], axis=-1)
        dg_dth2 = np.stack([-b2 * g * s12, -b2 * g * s12], axis=-1)
        rhs_th1 = -dg_dth1
        rhs_th2 = -_matvec(dM2, qdd) - dc_dth2 - dg_dth2
        dqdd_dth = _matvec(Minv, rhs_th1)[..., :, None], _matvec(Minv, rhs_th2)[..., :, None]

        dc_dd1 = np.stack([-2 * a2 * s2 * d2, 2 * a2 * s2 * d1], axis=-1)
        dc_dd2 = np.stack([-2 * a2 * s2 * (d1 + d2), np.zeros_like(d1)], axis=-1)
        dqdd_dd = -_matvec(Minv, dc_dd1)[..., :, None], -_matvec(Minv, dc_dd2)[..., :, None]
        return Minv, dqdd_dth, dqdd_dd, batch

    def jac_x(self, x, u):
        _, (dq_th1, dq_th2), (dq_d1, dq_d2), batch = self._partials(x, u)
        J = np.zeros(batch + (4, 4))
        J[..., 0, 1] = 1.0
        J[..., 2, 3] = 1.0
        for row, acc in ((1, 0), (3, 1)):
            J[..., row, 0] = dq_th1[..., acc, 0]
            J[..., row, 1] = dq_d1[..., acc, 0]
            J[..., row, 2] = dq_th2[..., acc, 0]
            J[..., row, 3] = dq_d2[..., acc, 0]
        return J

    def jac_u(self, x, u):
        Minv, _, _, batch = self._partials(x, u)
        J = np.zeros(batch + (4, 2))
        J[..., 1, :] = Minv[..., 0, :]
        J[..., 3, :] = Minv[..., 1, :]
        return J


def arm_system(dt: float, params: ArmParameters | None = None) -> EulerDiscretized:
    return discretize_euler(TwoLinkArm(params), dt)


ARM_X_START = np.array([0.0, 0.0, 0.0, 0.0])
ARM_X_GOAL = np.array([np.pi / 2, 0.0, -np.pi / 2, 0.0])
ARM_WEIGHTS = np.array([0.6, 0.4])


# ---------------------------------------------------------------------------
# features
# ---------------------------------------------------------------------------


class Feature:
    """Scalar feature ``phi(x, u)``; subclasses may override the gradients."""

    name: str = "feature"
    serializable = False

    def value(self, x, u):
        raise NotImplementedError

    def grad_x(self, x, u):
        return _fd_grad(lambda xx: self.value(xx, u), x)

    def grad_u(self, x, u):
        return _fd_grad(lambda uu: self.value(x, uu), u)


def _fd_grad(fun, z, rel_step=1e-6):
    z = np.asarray(z, dtype=float)
    out = np.empty(z.shape)
    for i in range(z.shape[-1]):
        h = rel_step * (1.0 + np.abs(z[..., i]))
        zp = z.copy()
        zm = z.copy()
        zp[..., i] += h
        zm[..., i] -= h
        out[..., i] = (fun(zp) - fun(zm)) / (2.0 * h)
    return out


@dataclass(frozen=True)
class Monomial(Feature):
    """``z_i ** power`` where ``z`` is the state (``var='x'``) or input (``var='u'``).

    ``index`` is zero-based; descriptors in text form are one-based (``"u1^2"``).
    """

    var: str
    index: int
    power: int

    serializable = True

    def __post_init__(self):
        if self.var not in ("x", "u"):
            raise ValueError(f"monomial variable must be 'x' or 'u', got {self.var!r}")
        if self.index < 0:
            raise ValueError("monomial coordinate index must be nonnegative")
        if int(self.power) != self.power or self.power < 1:
            raise ValueError(f"monomial power must be a positive integer, got {self.power}")

    @property
    def name(self):
        return f"{self.var}{self.index + 1}^{self.power}"

    def _coord(self, x, u):
        z = np.asarray(x if self.var == "x" else u, dtype=float)
        return z[..., self.index]

    def value(self, x, u):
        return self._coord(x, u) ** self.power

    def _grad(self, x, u, which):
        z = np.asarray(x if which == "x" else u, dtype=float)
        other = np.asarray(u if which == "x" else x, dtype=float)
        g = np.zeros(np.broadcast_shapes(z.shape[:-1], other.shape[:-1]) + z.shape[-1:])
        if which == self.var:
            g[..., self.index] = self.power * self._coord(x, u) ** (self.power - 1)
        return g

    def grad_x(self, x, u):
        return self._grad(x, u, "x")

    def grad_u(self, x, u):
        return self._grad(x, u, "u")


class CallableFeature(Feature):
    """User-supplied closure; gradients fall back to central differences."""

    def __init__(self, name, fun, grad_x=None, grad_u=None):
        self.name = name
        self._fun = fun
        self._gx = grad_x
        self._gu = grad_u

    def value(self, x, u):
        return np.asarray(self._fun(x, u), dtype=float)

    def grad_x(self, x, u):
        return np.asarray(self._gx(x, u), float) if self._gx else super().grad_x(x, u)

    def grad_u(self, x, u):
        return np.asarray(self._gu(x, u), float) if self._gu else super().grad_u(x, u)


@dataclass(frozen=True)
class FeatureSet:
    """Ordered features; position ``i`` is the index of the i-th recovered weight."""

    features: tuple
    state_dim: int
    input_dim: int
    names: tuple = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "features", tuple(self.features))
        if len(self.features) < 1:
            raise ValueError("a feature set needs at least one feature")
        for f in self.features:
            if isinstance(f, Monomial):
                dim = self.state_dim if f.var == "x" else self.input_dim
                if f.index >= dim:
                    raise ValueError(f"feature {f.name} indexes a coordinate outside dimension {dim}")
        object.__setattr__(self, "names", tuple(f.name for f in self.features))

    def __len__(self):
        return len(self.features)

    @property
    def size(self) -> int:
        return len(self.features)

    def value(self, x, u):
        x, u = np.asarray(x, float), np.asarray(u, float)
        return np.stack([np.asarray(f.value(x, u), float) for f in self.features], axis=-1)

    def jac_x(self, x, u):
        """``d phi / d x`` with shape ``(..., r, n)``."""
        x, u = np.asarray(x, float), np.asarray(u, float)
        return np.stack([f.grad_x(x, u) for f in self.features], axis=-2)

    def jac_u(self, x, u):
        x, u = np.asarray(x, float), np.asarray(u, float)
        return np.stack([f.grad_u(x, u) for f in self.features], axis=-2)

    def subset(self, k: int) -> "FeatureSet":
        return FeatureSet(self.features[:k], self.state_dim, self.input_dim)

    def descriptors(self) -> list[str]:
        if not all(f.serializable for f in self.features):
            raise TypeError("feature set contains closures and cannot be serialized")
        return list(self.names)


_DESCRIPTOR = re.compile(r"^\s*([xu])\s*_?\s*(\d+)\s*(?:\^|\*\*)\s*(\d+)\s*$")


def parse_monomial(desc) -> Monomial:
    """Accepts ``"u1^2"`` / ``"x2**3"`` strings or ``{"var", "index", "power"}`` dicts (1-based index)."""
    if isinstance(desc, Monomial):
        return desc
    if isinstance(desc, str):
        match = _DESCRIPTOR.match(desc)
        if not match:
            raise ValueError(f"cannot parse feature descriptor {desc!r}")
        var, idx, power = match.group(1), int(match.group(2)), int(match.group(3))
    else:
        var, idx, power = desc["var"], int(desc["index"]), int(desc["power"])
    if idx < 1:
        raise ValueError(f"feature descriptor {desc!r}: coordinates are numbered from 1")
    return Monomial(var, idx - 1, power)


def quadratic_feature_library(descriptors: Sequence, state_dim: int, input_dim: int, min_power: int = 2) -> FeatureSet:
    """Monomial feature set such as ``["x1^2", "x2^2", "u1^2"]``."""
    feats = []
    for d in descriptors:
        mono = parse_monomial(d)
        if mono.power < min_power:
            raise ValueError(f"feature {mono.name}: power must be at least {min_power}")
        feats.append(mono)
    return FeatureSet(tuple(feats), state_dim, input_dim)


LQR_FEATURES = ("x1^2", "x2^2", "u1^2")
ARM_FEATURES = ("u1^2", "u2^2")
ARM_CANDIDATE_FEATURES = ("u1^2", "u2^2", "u1^3", "u2^3", "u1^4", "u2^4")
