"""Deterministic quadrature of the one-hop wavefunction and Marcus-type sweeps.

The one-hop field is

    u1(t, x) = (-i delta/eps) (2 pi eps)^(-3d/2) int dz int_0^t dt1 A0(z) A_jac(t) exp(i Theta_t(x)/eps)

where each ``(z, t1)`` trajectory runs on surface 0 up to ``t1`` and on
surface 1 afterwards.  ``z`` is integrated with a tensor Gauss-Hermite
rule matched to the Gaussian envelope ``exp(-|z - z0|^2 / (4 eps))`` of
``A0`` and ``t1`` with Gauss-Legendre.  Because the trajectories do not
depend on ``delta``, ``u1`` is exactly linear in ``delta``.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .coherent import GaussianWavepacket, fga_phase_batch, initial_amplitude_modulus_peak
from .mc_estimator import EvaluationGrid, estimate_wavefunction, population
from .model import DiabaticModel
from .reference import transition_population
from .trajectory import evolve, init_trajectory

logger = logging.getLogger(__name__)

__all__ = [
    "ConvergenceError",
    "SingleHopQuadratureSpec",
    "SingleHopField",
    "RateResult",
    "RateSweepResult",
    "quadrature_nodes",
    "u1_single_hop",
    "transition_rate",
    "marcus_sweep",
    "fit_exponent",
]

BATCH = 8192
GATE_RTOL = 1e-2


class ConvergenceError(RuntimeError):
    """Node doubling changed the rate by more than the gate tolerance."""


@dataclass(frozen=True)
class SingleHopQuadratureSpec:
    """Quadrature rule for the one-hop term.

    ``nz`` Gauss-Hermite nodes per phase-space dimension, ``nt``
    Gauss-Legendre nodes on ``[0, t]``.  ``grid=None`` sizes the
    evaluation window from the trajectory end points plus ``8 sqrt(eps)``.
    """

    nz: int
    nt: int
    t: float
    grid: Optional[EvaluationGrid] = None
    grid_points: int = 512
    dt: float = 2e-3

    def __post_init__(self):
        if self.nz < 8 or self.nt < 8:
            raise ValueError("node counts must be >= 8")
        if not self.t >= 0:
            raise ValueError("t must be non-negative")

    def doubled(self) -> "SingleHopQuadratureSpec":
        return replace(self, nz=2 * self.nz, nt=2 * self.nt)


@dataclass
class SingleHopField:
    grid: EvaluationGrid
    u1: np.ndarray
    delta: float
    n_trajectories: int

    def norm2(self) -> float:
        return self.grid.integrate(np.abs(self.u1) ** 2)

    def scaled(self, delta: float) -> "SingleHopField":
        return SingleHopField(self.grid, self.u1 * (delta / self.delta), float(delta), self.n_trajectories)


@dataclass
class RateResult:
    k: float
    k_coarse: float
    converged: bool
    rel_change: float
    spec: SingleHopQuadratureSpec
    field: Optional[SingleHopField] = None


@dataclass
class RateSweepResult:
    deltas: np.ndarray
    rates: np.ndarray
    converged: np.ndarray
    exponent: float
    prefactor: float
    eps: float
    backend: str
    residual: float = 0.0
    extra: dict = field(default_factory=dict)


def quadrature_nodes(spec: SingleHopQuadratureSpec, z0, eps: float):
    """Nodes and weights ``(z, t1, w)`` of the tensor rule.

    ``sum w f(z, t1)`` approximates
    ``int dz int dt1 exp(-|z - z0|^2 / (4 eps)) f(z, t1)``, i.e. the
    weights carry the Gaussian envelope of ``|A0|`` so that only its
    peak value and phase remain in the integrand (see
    :func:`u1_single_hop`).
    """
    z0 = np.asarray(z0, dtype=float)
    m = z0.size
    y, wy = np.polynomial.hermite.hermgauss(spec.nz)
    s, ws = np.polynomial.legendre.leggauss(spec.nt)
    t1 = 0.5 * spec.t * (s + 1.0)
    wt = 0.5 * spec.t * ws
    scale = 2.0 * math.sqrt(eps)
    ys = np.array(list(itertools.product(y, repeat=m)))
    wz = np.prod(np.array(list(itertools.product(wy, repeat=m))), axis=1) * scale ** m
    z = z0 + scale * ys
    Z = np.repeat(z, spec.nt, axis=0)
    T1 = np.tile(t1, z.shape[0])
    W = np.repeat(wz, spec.nt) * np.tile(wt, z.shape[0])
    return Z, T1, W


def _propagate_nodes(model, z, t1, t, dt, packet):
    """Final states of forced single-hop trajectories (surface 0 until ``t1``)."""
    state = init_trajectory(z, packet)
    return evolve(state, model, t, dt=dt, hop_times=t1[:, None])


def u1_single_hop(spec: SingleHopQuadratureSpec, model: DiabaticModel, z0) -> SingleHopField:
    """One-hop field on the evaluation grid for the initial state ``g[z0]``."""
    eps, delta, d = model.eps, model.delta, model.dim
    z0 = np.asarray(z0, dtype=float)
    packet = GaussianWavepacket.from_z(z0, eps)
    Z, T1, W = quadrature_nodes(spec, z0, eps)
    prefactor = -1j * delta / eps * (2.0 * math.pi * eps) ** (-1.5 * d)
    peak = initial_amplitude_modulus_peak(d, eps)
    if spec.t == 0:
        # empty hop-time interval
        grid = spec.grid or EvaluationGrid(tuple(z0[:d] - 8.0 * math.sqrt(eps)), tuple(z0[:d] + 8.0 * math.sqrt(eps)),
                                           (spec.grid_points,) * d)
        return SingleHopField(grid, np.zeros(grid.points().shape[0], dtype=complex), float(delta), 0)

    finals = []
    for b in range(0, Z.shape[0], BATCH):
        st = _propagate_nodes(model, Z[b:b + BATCH], T1[b:b + BATCH], spec.t, spec.dt, packet)
        if st.failed.any():
            logger.warning("%d quadrature trajectories close to a caustic", int(st.failed.sum()))
        # A0 * exp(|y|^2) = peak * A0 / |A0|; the Gaussian factor is part of the Hermite weight
        weight = W[b:b + BATCH] * peak * st.jacobian_factor * st.A0 / np.abs(st.A0)
        finals.append((st.Q, st.P, st.S, weight))

    grid = spec.grid
    if grid is None:
        q = np.concatenate([f[0] for f in finals])
        pad = 8.0 * math.sqrt(eps)
        grid = EvaluationGrid(tuple(q.min(axis=0) - pad), tuple(q.max(axis=0) + pad), (spec.grid_points,) * d)
    x = grid.points()
    u = np.zeros(x.shape[0], dtype=complex)
    for Q, P, S, w in finals:
        for b in range(0, Q.shape[0], 2048):
            theta = fga_phase_batch(S[b:b + 2048], P[b:b + 2048], Q[b:b + 2048], x)
            u += w[b:b + 2048] @ np.exp(1j * theta / eps)
    return SingleHopField(grid=grid, u1=prefactor * u, delta=float(delta), n_trajectories=Z.shape[0])


def transition_rate(spec: SingleHopQuadratureSpec, model: DiabaticModel, z0,
                    delta: Optional[float] = None, *, gate: bool = True, strict: bool = False) -> RateResult:
    """``k = int |u1|^2 dx`` with a node-doubling convergence gate.

    The rate is evaluated with ``spec`` and with both node counts doubled
    (on the evaluation grid of the coarse run); the refined value is
    returned.  With ``strict`` a failed gate raises :class:`ConvergenceError`.
    """
    if delta is not None:
        model = model.with_delta(delta)
    coarse = u1_single_hop(spec, model, z0)
    k_coarse = coarse.norm2()
    if not gate:
        return RateResult(k_coarse, k_coarse, True, 0.0, spec, coarse)
    fine_spec = replace(spec.doubled(), grid=coarse.grid)
    fine = u1_single_hop(fine_spec, model, z0)
    k = fine.norm2()
    rel = abs(k - k_coarse) / k if k > 0 else math.inf
    ok = rel < GATE_RTOL
    logger.info("single-hop rate %.6e (coarse %.6e, rel change %.2e)", k, k_coarse, rel)
    if strict and not ok:
        raise ConvergenceError(f"node doubling changed the rate by {rel:.2e}")
    return RateResult(k, k_coarse, ok, rel, fine_spec, fine)


def fit_exponent(deltas, rates):
    """Least-squares fit ``log k = s log delta + b``; returns ``(s, exp(b), max residual)``."""
    ld, lk = np.log(np.asarray(deltas, dtype=float)), np.log(np.asarray(rates, dtype=float))
    s, b = np.polyfit(ld, lk, 1)
    res = float(np.max(np.abs(lk - (s * ld + b))))
    return float(s), float(math.exp(b)), res


def marcus_sweep(model: DiabaticModel, deltas: Sequence[float], z0, t: float, *, backend: str = "single_hop",
                 quadrature: Optional[SingleHopQuadratureSpec] = None, spectral_grid=None,
                 spectral_self_check: bool = False, ensemble=None) -> RateSweepResult:
    """Transition rate over a list of couplings and the fitted exponent.

    ``backend`` is ``"single_hop"`` (quadrature, computed once and scaled
    since the one-hop field is linear in ``delta``), ``"spectral"`` (exact
    two-level propagation, requires ``spectral_grid``; ``spectral_self_check``
    repeats every point on a refined grid as its accuracy gate) or ``"mc"``
    (:func:`fgsh.mc_estimator.estimate_wavefunction`, requires an
    ``EnsembleSpec`` as ``ensemble``).
    """
    deltas = np.asarray(sorted(float(v) for v in deltas))
    if deltas.size < 2:
        raise ValueError("at least two coupling values are needed for a fit")
    extra = {}
    if backend == "single_hop":
        spec = quadrature or SingleHopQuadratureSpec(nz=24, nt=64, t=t)
        base = transition_rate(spec, model.with_delta(deltas[0]), z0)
        rates = base.k * (deltas / deltas[0]) ** 2
        converged = np.full(deltas.size, base.converged)
        extra["rel_change"] = base.rel_change
    elif backend == "spectral":
        if spectral_grid is None:
            raise ValueError("spectral backend needs a grid")
        rows = [transition_population(model.with_delta(dl), z0, t, spectral_grid, self_check=spectral_self_check)
                for dl in deltas]
        rates = np.array([r["pop1"] for r in rows])
        converged = np.array([r["converged"] for r in rows])
    elif backend == "mc":
        if ensemble is None:
            raise ValueError("mc backend needs an ensemble spec")
        rates, errs = [], []
        for dl in deltas:
            est = estimate_wavefunction(replace(ensemble, t=t, z0=tuple(np.ravel(z0))), model.with_delta(dl))
            k, err = population(est, 1, debias=True)
            rates.append(k)
            errs.append(err)
        rates = np.array(rates)
        # a point counts as resolved when it is positive and above three error bars
        converged = (rates > 0) & (rates > 3.0 * np.array(errs))
        extra["errors"] = errs
    else:
        raise ValueError(f"unknown backend {backend!r}")
    if not converged.all():
        raise ConvergenceError(f"{int((~converged).sum())} sweep points failed their accuracy gate")
    s, pref, res = fit_exponent(deltas, rates)
    return RateSweepResult(deltas, rates, converged, s, pref, model.eps, backend, res, extra)
