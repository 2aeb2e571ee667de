"""Stationary-phase analysis of the one-hop transition rate.

The rate ``int |u1|^2 dx`` is a double phase-space integral over two
single-hop trajectories ``(t1, z1)`` and ``(t2, z2)`` with complex phase

    Phi = -S1 + S2 - (p1 + p0).(q1 - q0)/2 + (p2 + p0).(q2 - q0)/2
          + (P1 + P2).(Q1 - Q2)/2
          + i/4 (|Q1 - Q2|^2 + |P1 - P2|^2 + |z1 - z0|^2 + |z2 - z0|^2)

where ``(Q, P, S)`` are evaluated at the final time ``t``.  It is
stationary at ``t1 = t2 = t1*``, ``z1 = z2 = z0`` with ``t1*`` the first
time the surface-0 trajectory from ``z0`` reaches ``V0 = V1``.  The
Hessian at that point is assembled by finite differences of ``Phi``; the
analytic identities it must satisfy are exposed as checks.

Variables are ordered ``y = (t1, q1, p1, t2, q2, p2)``.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import brentq

from .model import DiabaticModel
from .trajectory import evolve, init_trajectory

logger = logging.getLogger(__name__)

__all__ = [
    "NoCrossingError",
    "MultipleCrossingError",
    "StepInstabilityError",
    "DegenerateHessianError",
    "PhasePoint",
    "PhaseStationaryReport",
    "phase_value",
    "find_stationary_point",
    "hessian",
    "hessian_blocks",
    "jump_flow_jacobian",
    "assumption_checks",
    "dS_dt1_identity_check",
    "leading_order_rate",
    "stationary_report",
]

ROOT_TOL = 1e-10
GRADIENT_TOL = 1e-6
FD_STEP = 1e-4
RICHARDSON_RTOL = 1e-4
DET_TOL = 1e-12
ASSUMPTION_TOL = 1e-8


class NoCrossingError(RuntimeError):
    """The surface-0 trajectory does not reach ``V0 = V1`` before ``t``."""


class MultipleCrossingError(RuntimeError):
    """More than one crossing lies in ``(0, t)``."""


class StepInstabilityError(RuntimeError):
    """Finite-difference Hessians at ``h`` and ``h/2`` disagree."""


class DegenerateHessianError(RuntimeError):
    """``|det Hess|`` is numerically zero."""


@dataclass(frozen=True)
class PhasePoint:
    t1: float
    z1: np.ndarray
    t2: float
    z2: np.ndarray
    t: float
    z0: np.ndarray

    def as_vector(self) -> np.ndarray:
        return np.concatenate([[self.t1], np.ravel(self.z1), [self.t2], np.ravel(self.z2)])

    @classmethod
    def symmetric(cls, t1: float, z0, t: float) -> "PhasePoint":
        z0 = np.asarray(z0, dtype=float)
        return cls(float(t1), z0.copy(), float(t1), z0.copy(), float(t), z0.copy())


@dataclass
class PhaseStationaryReport:
    t1: float
    z0: list
    t: float
    crossing_position: list
    hessian: np.ndarray
    H_I_eigenvalues: np.ndarray
    det_H_R: float
    det_hessian: complex
    A: float
    assumption1: bool
    assumption2: bool
    leading_order_rate: Optional[float] = None
    diagnostics: dict = field(default_factory=dict)

    def to_json(self) -> str:
        d = {
            "t1_star": self.t1,
            "z0": self.z0,
            "t": self.t,
            "crossing_position": self.crossing_position,
            "H_I_eigenvalues": [float(v) for v in self.H_I_eigenvalues],
            "min_eigenvalue_H_I": float(np.min(self.H_I_eigenvalues)),
            "abs_det_H_R": abs(self.det_H_R),
            "det_hessian": [self.det_hessian.real, self.det_hessian.imag],
            "A": self.A,
            "assumption1": self.assumption1,
            "assumption2": self.assumption2,
            "leading_order_rate": self.leading_order_rate,
            "diagnostics": self.diagnostics,
        }
        return json.dumps(d, indent=2)


# -- single-hop trajectory endpoints ---------------------------------------------

def _steps(t1: float, t: float, dt: float) -> tuple:
    """Fixed step counts for the two segments around a nominal hop time."""
    return (max(4, int(math.ceil(t1 / dt))), max(4, int(math.ceil((t - t1) / dt))))


def _endpoints(model: DiabaticModel, z, t1, t: float, steps):
    """Final ``(Q, P, S, J)`` of forced single-hop trajectories from ``z`` hopping at ``t1``."""
    z = np.atleast_2d(np.asarray(z, dtype=float))
    t1 = np.broadcast_to(np.asarray(t1, dtype=float), (z.shape[0],))
    state = init_trajectory(z)
    out = evolve(state, model, t, hop_times=t1[:, None].copy(), steps_per_segment=steps)
    return out.Q, out.P, out.S, out.J


def _phase_batch(model, z0, t, Y, steps):
    """``Phi`` at rows of ``Y = (t1, z1, t2, z2)``."""
    z0 = np.asarray(z0, dtype=float)
    m = z0.size
    d = m // 2
    Y = np.atleast_2d(Y)
    n = Y.shape[0]
    t1, z1 = Y[:, 0], Y[:, 1:1 + m]
    t2, z2 = Y[:, 1 + m], Y[:, 2 + m:]
    Q, P, S, _ = _endpoints(model, np.concatenate([z1, z2]), np.concatenate([t1, t2]), t, steps)
    Q1, Q2, P1, P2, S1, S2 = Q[:n], Q[n:], P[:n], P[n:], S[:n], S[n:]
    q0, p0 = z0[:d], z0[d:]
    q1, p1, q2, p2 = z1[:, :d], z1[:, d:], z2[:, :d], z2[:, d:]
    real = (-S1 + S2
            - 0.5 * np.sum((p1 + p0) * (q1 - q0), axis=1)
            + 0.5 * np.sum((p2 + p0) * (q2 - q0), axis=1)
            + 0.5 * np.sum((P1 + P2) * (Q1 - Q2), axis=1))
    imag = 0.25 * (np.sum((Q1 - Q2) ** 2, axis=1) + np.sum((P1 - P2) ** 2, axis=1)
                   + np.sum((z1 - z0) ** 2, axis=1) + np.sum((z2 - z0) ** 2, axis=1))
    return real + 1j * imag


def phase_value(point: PhasePoint, model: DiabaticModel, *, dt: float = 1e-3, steps=None) -> complex:
    """``Phi`` at a single point; ``Im Phi >= 0`` by construction."""
    if not (0 < point.t1 < point.t and 0 < point.t2 < point.t):
        raise ValueError("hop times must lie in (0, t)")
    if steps is None:
        steps = _steps(0.5 * (point.t1 + point.t2), point.t, dt)
    return complex(_phase_batch(model, point.z0, point.t, point.as_vector(), steps)[0])


# -- stationary point -------------------------------------------------------------

def _surface0_state(model, z0, tau, dt):
    """State at ``tau`` on surface 0 from ``z0`` with ``ceil(tau/dt)`` equal steps."""
    state = init_trajectory(np.asarray(z0, dtype=float))
    return evolve(state, model, float(tau), hop_times=np.full((1, 0), np.inf),
                  steps_per_segment=(max(4, int(math.ceil(tau / dt))),))


def _gap(model, z0, dt):
    def g(tau):
        Q = _surface0_state(model, z0, tau, dt).Q
        return float(model.V(0, Q)[0] - model.V(1, Q)[0])
    return g


def find_stationary_point(model: DiabaticModel, z0, t: float, *, dt: float = 1e-3,
                          scan_points: int = 400, check_gradient: bool = True,
                          allow_multiple: bool = False):
    """First crossing time ``t1*`` of the surface-0 trajectory from ``z0``.

    ``g(tau) = V0(Q(tau)) - V1(Q(tau))`` is scanned on ``scan_points``
    equally spaced times in ``(0, t)`` and the first sign change is
    refined by Brent's method (bisection safeguarded secant / inverse
    quadratic steps) to ``|g| <= 1e-10``.  The full gradient of ``Phi`` at
    the symmetric point is then checked to be below ``1e-6``.

    Returns ``(t1*, diagnostics)``.
    """
    z0 = np.asarray(z0, dtype=float)
    d = model.dim
    state = init_trajectory(z0)
    n = max(scan_points, int(math.ceil(t / dt)))
    _, hist = evolve(state, model, t, hop_times=np.full((1, 0), np.inf), steps_per_segment=(n,), record=True)
    taus = hist.t[:, 0]
    Q = hist.Q[:, 0, :]
    g_vals = model.V(0, Q) - model.V(1, Q)
    # ignore a root sitting exactly at tau = 0
    start = 1 if g_vals[0] == 0 else 0
    sign = np.sign(g_vals[start:])
    changes = np.flatnonzero(sign[:-1] * sign[1:] <= 0) + start
    changes = changes[taus[changes + 1] > 0]
    if changes.size == 0:
        raise NoCrossingError(f"no crossing V0 = V1 for tau in (0, {t}) from z0 = {z0.tolist()}")
    distinct = int(np.sum(np.diff(np.sign(g_vals[start:])) != 0))
    unique = distinct <= 1
    if not unique and not allow_multiple:
        raise MultipleCrossingError(f"{distinct} crossings in (0, {t}); only single-crossing windows are analysed")
    i = changes[0]
    g = _gap(model, z0, dt)
    a, b = taus[i], taus[i + 1]
    if g_vals[i + 1] == 0:
        t1 = float(b)
    else:
        t1 = brentq(g, a, b, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=200)
    g1 = g(t1)
    if abs(g1) > ROOT_TOL:
        raise NoCrossingError(f"root refinement stalled at |g| = {abs(g1):.2e}")
    Qc = _surface0_state(model, z0, t1, dt).Q[0]
    diag = {"t1_star": t1, "g": g1, "crossing_position": Qc.tolist(), "unique": unique,
            "n_crossings": distinct}
    if check_gradient:
        grad = phase_gradient(model, z0, t, t1, dt=dt)
        diag["grad_norm"] = float(np.linalg.norm(grad))
        if diag["grad_norm"] > GRADIENT_TOL:
            raise RuntimeError(f"phase gradient {diag['grad_norm']:.2e} at the crossing exceeds {GRADIENT_TOL:g}")
    logger.info("stationary hop time %.12f, Q = %s", t1, Qc)
    return t1, diag


def phase_gradient(model: DiabaticModel, z0, t: float, t1: float, *, h: float = 1e-5, dt: float = 1e-3):
    """Centered-difference gradient of ``Phi`` at the symmetric point ``(t1, z0, t1, z0)``."""
    y0 = PhasePoint.symmetric(t1, z0, t).as_vector()
    n = y0.size
    E = np.eye(n) * h
    Y = np.concatenate([y0 + E, y0 - E])
    vals = _phase_batch(model, z0, t, Y, _steps(t1, t, dt))
    return (vals[:n] - vals[n:]) / (2 * h)


# -- Hessian ------------------------------------------------------------------------

def _fd_hessian(model, z0, t, t1, h, dt):
    y0 = PhasePoint.symmetric(t1, z0, t).as_vector()
    n = y0.size
    rows = [y0]
    index = {}
    for i in range(n):
        for j in range(i, n):
            for si, sj in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
                y = y0.copy()
                y[i] += si * h[i]
                y[j] += sj * h[j]
                index[(i, j, si, sj)] = len(rows)
                rows.append(y)
    vals = _phase_batch(model, z0, t, np.array(rows), _steps(t1, t, dt))
    H = np.empty((n, n), dtype=complex)
    for i in range(n):
        for j in range(i, n):
            f = lambda si, sj: vals[index[(i, j, si, sj)]]
            H[i, j] = (f(1, 1) - f(1, -1) - f(-1, 1) + f(-1, -1)) / (4 * h[i] * h[j])
            H[j, i] = H[i, j]
    return 0.5 * (H + H.T)


def _scales(z0, eps):
    m = np.asarray(z0).size
    return np.concatenate([[1.0], np.full(m, math.sqrt(eps)), [1.0], np.full(m, math.sqrt(eps))])


def hessian(model: DiabaticModel, z0, t: float, t1: float, *, h: float = FD_STEP, dt: float = 1e-3,
            richardson: bool = True):
    """Complex Hessian of ``Phi`` at ``(t1, z0, t1, z0)``, shape ``(4d+2, 4d+2)``.

    Steps are ``h * max(1, scale)`` with scale 1 for times and
    ``sqrt(eps)`` for phase-space coordinates.  With ``richardson`` the
    Hessian is recomputed at ``h/2`` and a :class:`StepInstabilityError`
    raised if the two differ by more than ``1e-4`` relative in max-norm.
    """
    steps = h * np.maximum(1.0, _scales(z0, model.eps))
    H = _fd_hessian(model, z0, t, t1, steps, dt)
    if richardson:
        H2 = _fd_hessian(model, z0, t, t1, 0.5 * steps, dt)
        rel = np.max(np.abs(H - H2)) / max(np.max(np.abs(H2)), 1e-300)
        if rel > RICHARDSON_RTOL:
            raise StepInstabilityError(f"Hessian changed by {rel:.2e} between h and h/2")
        H = H2
    return H


def hessian_blocks(H: np.ndarray, d: int) -> dict:
    """Named sub-blocks of the real part used by the non-degeneracy argument."""
    HR = H.real
    m = 2 * d
    it1, iq1, ip1 = 0, slice(1, 1 + d), slice(1 + d, 1 + m)
    it2, iq2, ip2 = 1 + m, slice(2 + m, 2 + m + d), slice(2 + m + d, 2 + 2 * m)
    return {
        "q1q1": HR[iq1, iq1],
        "q1q2": HR[iq1, iq2],
        "q1p1": HR[iq1, ip1],
        "q1p2": HR[iq1, ip2],
        "t1t2": HR[it1, it2],
        "t1t1": HR[it1, it1],
        "t2t2": HR[it2, it2],
        "I_offdiag": H.imag[: 1 + m, 1 + m:],
    }


def jump_flow_jacobian(model: DiabaticModel, z0, t: float, t1: float, *, h: float = 1e-5, dt: float = 1e-3):
    """``F = d(Q, P)(t) / d(t1, z)`` at ``(t1, z0)`` by centered differences, shape ``(2d, 2d+1)``."""
    z0 = np.asarray(z0, dtype=float)
    m = z0.size
    base = np.concatenate([[t1], z0])
    E = np.eye(m + 1) * h
    Y = np.concatenate([base + E, base - E])
    Q, P, _, _ = _endpoints(model, Y[:, 1:], Y[:, 0], t, _steps(t1, t, dt))
    QP = np.concatenate([Q, P], axis=1)
    return ((QP[: m + 1] - QP[m + 1:]) / (2 * h)).T


def _dQ_dt1(model, z0, t, t1, h, dt):
    z = np.repeat(np.atleast_2d(np.asarray(z0, dtype=float)), 2, axis=0)
    Q, _, _, _ = _endpoints(model, z, np.array([t1 + h, t1 - h]), t, _steps(t1, t, dt))
    return (Q[0] - Q[1]) / (2 * h)


def assumption_checks(model: DiabaticModel, z0, t: float, t1: float, *, h: float = 1e-4, dt: float = 1e-3):
    """Non-degeneracy conditions at the crossing.

    Returns ``(assumption1, assumption2, info)`` where ``assumption1``
    states ``grad V0 != grad V1`` at ``Q(t1)``, ``assumption2`` states
    ``d Q(t; t1, z0) / d t1 != 0`` (both with threshold ``1e-8``) and
    ``info`` holds the vectors, ``P(t1)`` on surface 0 and the scalars
    ``A = (grad V0 - grad V1).P(t1)`` and ``(grad V0 - grad V1).dQ/dt1``.
    """
    z0 = np.asarray(z0, dtype=float)
    d = model.dim
    s0 = _surface0_state(model, z0, t1, dt)
    Qc, Pc = s0.Q, s0.P[0]
    dgrad = (model.grad(0, Qc) - model.grad(1, Qc))[0]
    dQ = _dQ_dt1(model, z0, t, t1, h, dt)
    a1 = bool(np.linalg.norm(dgrad) > ASSUMPTION_TOL)
    a2 = bool(np.linalg.norm(dQ) > ASSUMPTION_TOL)
    info = {
        "grad_difference": dgrad.tolist(),
        "dQ_dt1": dQ.tolist(),
        "P_at_crossing": Pc.tolist(),
        "A": float(dgrad @ Pc),
        "A_final_time": float(dgrad @ dQ),
    }
    return a1, a2, info


def dS_dt1_identity_check(model: DiabaticModel, z0, t: float, t1: float, *, h: float = 1e-4,
                          dt: float = 1e-3) -> float:
    """Relative deviation between ``dS/dt1`` and ``V1(Q(t1)) - V0(Q(t1)) + P(t).dQ(t)/dt1``.

    ``S``, ``Q`` and ``P`` are final-time values of the single-hop
    trajectory; derivatives use centered differences with step ``h``.
    """
    z0 = np.asarray(z0, dtype=float)
    steps = _steps(t1, t, dt)
    z = np.repeat(np.atleast_2d(z0), 3, axis=0)
    Q, P, S, _ = _endpoints(model, z, np.array([t1 + h, t1 - h, t1]), t, steps)
    lhs = (S[0] - S[1]) / (2 * h)
    dQ = (Q[0] - Q[1]) / (2 * h)
    Qc = _surface0_state(model, z0, t1, dt).Q
    rhs = float(model.V(1, Qc)[0] - model.V(0, Qc)[0] + P[2] @ dQ)
    return abs(lhs - rhs) / max(abs(rhs), 1.0)


def _jacobian_factor(model, z0, t, t1, dt):
    state = init_trajectory(np.asarray(z0, dtype=float))
    out = evolve(state, model, t, hop_times=np.array([[t1]]), steps_per_segment=_steps(t1, t, dt))
    return complex(out.jacobian_factor[0])


def leading_order_rate(model: DiabaticModel, z0, t: float, delta: Optional[float] = None, *,
                       t1: Optional[float] = None, H: Optional[np.ndarray] = None, dt: float = 1e-3) -> float:
    """``2 pi delta^2 / eps |a|^2 |det Hess|^(-1/2)``.

    ``a = sqrt(2^-d det Z)`` is the Jacobian factor of the stationary
    single-hop trajectory at time ``t``; the Gaussian factor of the
    initial amplitude and the grid overlap are already part of ``Phi``.
    """
    delta = model.delta if delta is None else float(delta)
    if t1 is None:
        t1, _ = find_stationary_point(model, z0, t, dt=dt, check_gradient=False)
    if H is None:
        H = hessian(model, z0, t, t1, dt=dt)
    det = np.linalg.det(H)
    if abs(det) <= DET_TOL:
        raise DegenerateHessianError(f"|det Hess| = {abs(det):.2e}")
    a = _jacobian_factor(model, z0, t, t1, dt)
    return 2.0 * math.pi * delta ** 2 / model.eps * abs(a) ** 2 / math.sqrt(abs(det))


def stationary_report(model: DiabaticModel, z0, t: float, *, dt: float = 1e-3) -> PhaseStationaryReport:
    """Stationary point, Hessian spectrum, identities and leading-order rate."""
    z0 = np.asarray(z0, dtype=float)
    t1, diag = find_stationary_point(model, z0, t, dt=dt)
    H = hessian(model, z0, t, t1, dt=dt)
    a1, a2, info = assumption_checks(model, z0, t, t1, dt=dt)
    diag.update(info)
    rate = leading_order_rate(model, z0, t, t1=t1, H=H, dt=dt)
    return PhaseStationaryReport(
        t1=t1, z0=z0.tolist(), t=float(t), crossing_position=diag["crossing_position"], hessian=H,
        H_I_eigenvalues=np.linalg.eigvalsh(H.imag), det_H_R=float(np.linalg.det(H.real)),
        det_hessian=complex(np.linalg.det(H)), A=info["A"], assumption1=a1, assumption2=a2,
        leading_order_rate=rate, diagnostics=diag,
    )
