"""Split-operator Fourier solvers for the two-level Schrödinger equation.

``i eps du/dt = -eps^2/2 Lap u + V(x) u`` with ``V = [[V0, delta], [delta, V1]]``
is propagated with Strang splitting: half a potential step (exact 2x2
matrix exponential at every node), a full kinetic step in Fourier space,
and another half potential step.  A scalar variant propagates on the mean
potential ``(V0 + V1) / 2``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import curve_fit

from .coherent import GaussianWavepacket, eval_coherent
from .model import DiabaticModel

logger = logging.getLogger(__name__)

__all__ = [
    "ResolutionError",
    "SpectralGrid",
    "TwoLevelField",
    "StrongCouplingRow",
    "potential_propagator",
    "potential_propagator_dense",
    "initial_field",
    "propagate",
    "propagate_scalar",
    "propagate_scalar_mean",
    "population_series",
    "beat_frequency",
    "transition_population",
    "strong_coupling_experiment",
]

MASS_DRIFT_TOL = 1e-10
TAIL_TOL = 1e-8


class ResolutionError(RuntimeError):
    """The grid or time step does not resolve the solution."""


@dataclass(frozen=True)
class SpectralGrid:
    """Uniform periodic grid ``[lo, hi)`` per dimension with ``M`` points.

    ``lo``, ``hi`` and ``M`` are tuples of length ``d``; every ``M`` must be
    a power of two.
    """

    lo: tuple
    hi: tuple
    M: tuple
    dt: float
    eps: float

    def __post_init__(self):
        object.__setattr__(self, "lo", tuple(float(v) for v in np.atleast_1d(self.lo)))
        object.__setattr__(self, "hi", tuple(float(v) for v in np.atleast_1d(self.hi)))
        object.__setattr__(self, "M", tuple(int(v) for v in np.atleast_1d(self.M)))
        if not (len(self.lo) == len(self.hi) == len(self.M)):
            raise ValueError("lo, hi and M must have the same length")
        for m in self.M:
            if m < 2 or m & (m - 1):
                raise ValueError(f"point count {m} is not a power of two")
        if any(h <= l for l, h in zip(self.lo, self.hi)):
            raise ValueError("empty grid extent")
        if not self.dt > 0 or not self.eps > 0:
            raise ValueError("dt and eps must be positive")

    @classmethod
    def uniform(cls, d: int, half_width: float, M: int, dt: float, eps: float,
                center=0.0) -> "SpectralGrid":
        c = np.broadcast_to(np.asarray(center, dtype=float), (d,))
        return cls(tuple(c - half_width), tuple(c + half_width), (M,) * d, dt, eps)

    @property
    def dim(self) -> int:
        return len(self.M)

    @property
    def spacing(self) -> np.ndarray:
        return np.array([(h - l) / m for l, h, m in zip(self.lo, self.hi, self.M)])

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    def axes(self) -> list:
        return [l + (h - l) * np.arange(m) / m for l, h, m in zip(self.lo, self.hi, self.M)]

    def points(self) -> np.ndarray:
        """Node coordinates, shape ``(*M, d)``."""
        return np.stack(np.meshgrid(*self.axes(), indexing="ij"), axis=-1)

    def wavenumbers(self) -> np.ndarray:
        """``|k|^2`` on the FFT grid, shape ``M``."""
        ks = [2.0 * np.pi * np.fft.fftfreq(m, d=s) for m, s in zip(self.M, self.spacing)]
        mesh = np.meshgrid(*ks, indexing="ij")
        return sum(k * k for k in mesh)

    def refined(self) -> "SpectralGrid":
        """Twice the points and half the time step."""
        return replace(self, M=tuple(2 * m for m in self.M), dt=self.dt / 2.0)

    def integrate(self, f) -> float:
        return float(np.sum(f) * self.cell_volume)


@dataclass
class TwoLevelField:
    u0: np.ndarray
    u1: np.ndarray
    t: float = 0.0

    def populations(self, grid: SpectralGrid) -> tuple:
        return (grid.integrate(np.abs(self.u0) ** 2), grid.integrate(np.abs(self.u1) ** 2))

    def mass(self, grid: SpectralGrid) -> float:
        return sum(self.populations(grid))


@dataclass
class StrongCouplingRow:
    delta: float
    error: float
    pop0: float
    pop_deviation: float
    mass_drift: float = 0.0
    extra: dict = field(default_factory=dict)


def potential_propagator(v0, v1, delta: float, dtau: float, eps: float):
    """Entries ``(m00, m01, m11)`` of ``exp(-i dtau V / eps)`` (symmetric, ``m10 = m01``).

    Closed form with ``a = (V0 + V1)/2``, ``b = (V0 - V1)/2``,
    ``r = sqrt(b^2 + delta^2)``::

        e^{-i dtau a/eps} [cos(dtau r/eps) I - i sin(dtau r/eps)/r [[b, delta], [delta, -b]]]
    """
    a = 0.5 * (v0 + v1)
    b = 0.5 * (v0 - v1)
    r = np.sqrt(b * b + delta * delta)
    phase = np.exp(-1j * dtau * a / eps)
    cos = np.cos(dtau * r / eps)
    # sin(x r)/r, finite as r -> 0
    sinc = (dtau / eps) * np.sinc(dtau * r / (eps * np.pi))
    m00 = phase * (cos - 1j * sinc * b)
    m11 = phase * (cos + 1j * sinc * b)
    m01 = phase * (-1j * sinc * delta)
    return m00, m01, m11


def potential_propagator_dense(v0: float, v1: float, delta: float, dtau: float, eps: float) -> np.ndarray:
    """Same matrix from a dense eigendecomposition (used to validate the closed form)."""
    V = np.array([[v0, delta], [delta, v1]], dtype=float)
    w, U = np.linalg.eigh(V)
    return (U * np.exp(-1j * dtau * w / eps)) @ U.T


def initial_field(grid: SpectralGrid, z0) -> TwoLevelField:
    """Coherent state ``g[z0]`` on surface 0."""
    packet = GaussianWavepacket.from_z(z0, grid.eps)
    u0 = eval_coherent(packet, grid.points())
    return TwoLevelField(u0=u0, u1=np.zeros_like(u0), t=0.0)


def _tail_mass(u, grid: SpectralGrid) -> float:
    """Relative mass in the outer eighth of the Fourier box plus near the spatial boundary."""
    total = np.sum(np.abs(u) ** 2)
    if total == 0:
        return 0.0
    d = grid.dim
    uh = np.fft.fftn(u, axes=tuple(range(d)))
    freq_mask = np.zeros(grid.M, dtype=bool)
    space_mask = np.zeros(grid.M, dtype=bool)
    for ax, m in enumerate(grid.M):
        idx = np.abs(np.fft.fftfreq(m)) > 0.5 * 7.0 / 8.0
        edge = np.zeros(m, dtype=bool)
        edge[: m // 32] = True
        edge[-m // 32:] = True
        shape = [1] * d
        shape[ax] = m
        freq_mask |= idx.reshape(shape)
        space_mask |= edge.reshape(shape)
    spec = np.abs(uh) ** 2
    return float(np.sum(spec[freq_mask]) / np.sum(spec) + np.sum(np.abs(u[space_mask]) ** 2) / total)


def _check_resolution(components, grid, mass0, mass1, t):
    drift = abs(mass1 - mass0) / mass0
    if drift > MASS_DRIFT_TOL:
        raise ResolutionError(f"mass drift {drift:.3e} exceeds {MASS_DRIFT_TOL:g} at t={t}")
    tail = max(_tail_mass(u, grid) for u in components)
    if tail > TAIL_TOL:
        raise ResolutionError(f"tail mass {tail:.3e} exceeds {TAIL_TOL:g} at t={t}; enlarge the grid")
    return drift


def _n_steps(t_span: float, dt: float) -> int:
    return max(1, int(math.ceil(t_span / dt - 1e-9)))


def propagate(field: TwoLevelField, model: DiabaticModel, grid: SpectralGrid, t_final: float,
              *, check: bool = True, observer=None) -> TwoLevelField:
    """Strang-split propagation of a two-level field to ``t_final``.

    ``observer(t, u0, u1)``, when given, is called after every step.
    Raises :class:`ResolutionError` when the mass drifts by more than
    ``1e-10`` or the final field leaks into the outer Fourier band or the
    boundary layer.
    """
    if not t_final > field.t:
        raise ValueError("t_final must exceed the field time")
    if model.dim != grid.dim:
        raise ValueError("model and grid dimensions differ")
    n = _n_steps(t_final - field.t, grid.dt)
    dt = (t_final - field.t) / n
    eps = grid.eps
    x = grid.points()
    m00, m01, m11 = potential_propagator(model.V(0, x), model.V(1, x), model.delta, 0.5 * dt, eps)
    kin = np.exp(-0.5j * dt * eps * grid.wavenumbers())
    axes = tuple(range(grid.dim))

    u0, u1 = field.u0.astype(complex), field.u1.astype(complex)
    mass0 = field.mass(grid)
    for k in range(n):
        u0, u1 = m00 * u0 + m01 * u1, m01 * u0 + m11 * u1
        u0 = np.fft.ifftn(kin * np.fft.fftn(u0, axes=axes), axes=axes)
        u1 = np.fft.ifftn(kin * np.fft.fftn(u1, axes=axes), axes=axes)
        u0, u1 = m00 * u0 + m01 * u1, m01 * u0 + m11 * u1
        if observer is not None:
            observer(field.t + (k + 1) * dt, u0, u1)
    out = TwoLevelField(u0=u0, u1=u1, t=float(t_final))
    if check:
        _check_resolution((u0, u1), grid, mass0, out.mass(grid), t_final)
    return out


def propagate_scalar(u, potential, grid: SpectralGrid, t_span: float, *, check: bool = True) -> np.ndarray:
    """Strang splitting for a scalar field on ``potential(x)`` over ``t_span``."""
    n = _n_steps(t_span, grid.dt)
    dt = t_span / n
    x = grid.points()
    half = np.exp(-0.5j * dt * potential(x) / grid.eps)
    kin = np.exp(-0.5j * dt * grid.eps * grid.wavenumbers())
    axes = tuple(range(grid.dim))
    u = np.asarray(u, dtype=complex)
    mass0 = grid.integrate(np.abs(u) ** 2)
    for _ in range(n):
        u = half * np.fft.ifftn(kin * np.fft.fftn(half * u, axes=axes), axes=axes)
    if check:
        _check_resolution((u,), grid, mass0, grid.integrate(np.abs(u) ** 2), t_span)
    return u


def propagate_scalar_mean(u, model: DiabaticModel, grid: SpectralGrid, t_span: float,
                          *, check: bool = True) -> np.ndarray:
    """Scalar propagation on the mean potential ``(V0 + V1) / 2``."""
    return propagate_scalar(u, model.mean_potential, grid, t_span, check=check)


def population_series(field: TwoLevelField, model: DiabaticModel, grid: SpectralGrid,
                      t_final: float, every: int = 1):
    """Propagate and return ``(t, pop0, pop1, final_field)`` sampled every ``every`` steps."""
    ts, p0, p1 = [field.t], list(field.populations(grid))[:1], [field.populations(grid)[1]]
    counter = [0]

    def observe(t, u0, u1):
        counter[0] += 1
        if counter[0] % every == 0:
            ts.append(t)
            p0.append(grid.integrate(np.abs(u0) ** 2))
            p1.append(grid.integrate(np.abs(u1) ** 2))

    final = propagate(field, model, grid, t_final, observer=observe)
    return np.array(ts), np.array(p0), np.array(p1), final


def beat_frequency(t, pop0) -> float:
    """Angular frequency ``w`` of a least-squares fit ``pop0 ~ a + b cos(2 w t + phi)``.

    For a Rabi-type signal ``pop0 = cos^2(w t)`` this returns ``w``.  The
    starting value comes from the peak of the periodogram.
    """
    t = np.asarray(t, dtype=float)
    y = np.asarray(pop0, dtype=float)
    dt = t[1] - t[0]
    spec = np.abs(np.fft.rfft(y - y.mean(), n=8 * y.size))
    freqs = 2.0 * np.pi * np.fft.rfftfreq(8 * y.size, d=dt)
    w2 = freqs[np.argmax(spec)]

    def model(tt, a, b, w, phi):
        return a + b * np.cos(w * tt + phi)

    a0 = y.mean()
    b0 = 0.5 * (y.max() - y.min())
    popt, _ = curve_fit(model, t, y, p0=[a0, b0, w2, 0.0], maxfev=20000)
    return abs(popt[2]) / 2.0


def transition_population(model: DiabaticModel, z0, t: float, grid: SpectralGrid,
                          *, self_check: bool = False, rtol: float = 1e-3) -> dict:
    """Population of surface 1 at time ``t`` for ``g[z0]`` started on surface 0.

    With ``self_check`` the run is repeated on :meth:`SpectralGrid.refined`;
    ``converged`` reports whether both populations moved by less than
    ``1e-6`` and ``pop1`` by at most ``rtol`` relative.
    """
    final = propagate(initial_field(grid, z0), model, grid, t)
    pop0, pop1 = final.populations(grid)
    out = {"pop0": pop0, "pop1": pop1, "converged": True, "refined_pop1": None}
    if self_check:
        fine = grid.refined()
        ref = propagate(initial_field(fine, z0), model, fine, t)
        r0, r1 = ref.populations(fine)
        out["refined_pop1"] = r1
        out["converged"] = bool(abs(r0 - pop0) < 1e-6 and abs(r1 - pop1) < 1e-6
                                and abs(r1 - pop1) <= rtol * abs(r1))
    return out


def strong_coupling_experiment(model: DiabaticModel, z0, t: float, deltas: Sequence[float],
                               grid: SpectralGrid) -> list:
    """Compare two-level dynamics against the mean-field prediction for each ``delta``.

    The prediction is ``(cos(delta t/eps) ubar, -i sin(delta t/eps) ubar)``
    with ``ubar`` the mean-potential evolution of ``g[z0]``.  Returns one
    :class:`StrongCouplingRow` per ``delta`` with the L2 distance ``error``
    and ``|pop0 - cos^2(delta t/eps)|``.
    """
    deltas = [float(d) for d in deltas]
    if any(b <= a for a, b in zip(deltas, deltas[1:])):
        raise ValueError("delta list must be increasing")
    eps = grid.eps
    start = initial_field(grid, z0)
    ubar = propagate_scalar_mean(start.u0, model, grid, t)
    rows = []
    for delta in deltas:
        if delta / eps < 10:
            logger.warning("delta/eps = %.3g is outside the strong-coupling window", delta / eps)
        m = model.with_delta(delta)
        final = propagate(start, m, grid, t)
        c, s = math.cos(delta * t / eps), math.sin(delta * t / eps)
        err2 = grid.integrate(np.abs(final.u0 - c * ubar) ** 2 + np.abs(final.u1 + 1j * s * ubar) ** 2)
        pop0, _ = final.populations(grid)
        rows.append(StrongCouplingRow(
            delta=delta,
            error=math.sqrt(err2),
            pop0=pop0,
            pop_deviation=abs(pop0 - c * c),
            mass_drift=abs(final.mass(grid) - start.mass(grid)),
        ))
        logger.info("delta=%g E=%.3e pop0=%.6f", delta, rows[-1].error, pop0)
    return rows
