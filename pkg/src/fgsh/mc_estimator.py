"""Monte Carlo reconstruction of the two-level wavefunction.

Every trajectory starts at a phase-space point drawn from ``|A0(z)|``
(for a coherent initial state this is ``N(z0, 2 eps I)``), hops at the
arrival times of a Poisson clock with rate ``delta/eps`` and contributes

    C_N (-i)^n A_t / |A0| exp(i Theta_t(x) / eps) exp(delta t / eps)

to component ``n mod 2`` at every grid node ``x``.

Randomness is organised in fixed-size chunks, each with its own child of
``SeedSequence(seed)``; chunk sums are combined by a pairwise tree, so the
estimate does not depend on how chunks are distributed over workers.
"""

from __future__ import annotations

import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .coherent import GaussianWavepacket, fga_phase_batch, initial_amplitude
from .model import DiabaticModel
from .trajectory import CausticError, evolve, init_trajectory, sample_hop_schedule

logger = logging.getLogger(__name__)

__all__ = [
    "EnsembleSpec",
    "EvaluationGrid",
    "WavefunctionEstimate",
    "sample_initial_phase_point",
    "normalization_constant",
    "normalization_constant_quadrature",
    "estimate_wavefunction",
    "population",
    "parity_check",
    "CHUNK_SIZE",
    "MAX_DROP_FRACTION",
]

CHUNK_SIZE = 4096
MAX_DROP_FRACTION = 1e-3
STRONG_COUPLING_CAP = 30.0


@dataclass(frozen=True)
class EvaluationGrid:
    """Uniform tensor grid; ``lo``, ``hi``, ``M`` are per-dimension tuples (``hi`` included)."""

    lo: tuple
    hi: tuple
    M: tuple

    def __post_init__(self):
        object.__setattr__(self, "lo", tuple(float(v) for v in np.atleast_1d(self.lo)))
        object.__setattr__(self, "hi", tuple(float(v) for v in np.atleast_1d(self.hi)))
        object.__setattr__(self, "M", tuple(int(v) for v in np.atleast_1d(self.M)))
        if not (len(self.lo) == len(self.hi) == len(self.M)):
            raise ValueError("lo, hi and M must have the same length")

    @property
    def dim(self) -> int:
        return len(self.M)

    @property
    def shape(self) -> tuple:
        return self.M

    def axes(self) -> list:
        return [np.linspace(l, h, m) for l, h, m in zip(self.lo, self.hi, self.M)]

    def points(self) -> np.ndarray:
        """Flattened node coordinates, shape ``(prod(M), d)``."""
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    @property
    def cell_volume(self) -> float:
        return float(np.prod([(h - l) / (m - 1) for l, h, m in zip(self.lo, self.hi, self.M)]))

    def integrate(self, values) -> float:
        """Trapezoid rule over the tensor grid; ``values`` is flat or shaped ``M``."""
        v = np.asarray(values).reshape(self.M)
        for ax in self.axes():
            v = np.trapezoid(v, ax, axis=0)
        return float(np.real(v))


@dataclass(frozen=True)
class EnsembleSpec:
    """Monte Carlo run parameters.

    ``grid=None`` selects an automatic window: the observed range of the
    trajectory positions widened by ``8 sqrt(eps)``, with ``grid_points``
    nodes per dimension.
    """

    N: int
    seed: int
    t: float
    z0: tuple
    grid: Optional[EvaluationGrid] = None
    grid_points: int = 512
    dt: Optional[float] = None
    workers: int = 1
    chunk_size: int = CHUNK_SIZE

    def __post_init__(self):
        if int(self.N) < 1:
            raise ValueError(f"N must be >= 1, got {self.N}")
        if self.t < 0:
            raise ValueError("t must be non-negative")
        object.__setattr__(self, "z0", tuple(float(v) for v in np.atleast_1d(self.z0)))


@dataclass
class WavefunctionEstimate:
    grid: EvaluationGrid
    u: np.ndarray           # (2, n_nodes) complex
    stderr: np.ndarray      # (2, n_nodes) real, sqrt(Var Re + Var Im) / sqrt(N_used)
    N: int
    seed: int
    C_N: float
    dropped: int
    t: float
    grid_warning: bool = False
    meta: dict = field(default_factory=dict)

    @property
    def u0(self) -> np.ndarray:
        return self.u[0]

    @property
    def u1(self) -> np.ndarray:
        return self.u[1]

    def aggregate_stderr(self, component: Optional[int] = None) -> float:
        """``sqrt(int stderr^2 dx)`` for one component or both."""
        comps = (0, 1) if component is None else (component,)
        return math.sqrt(sum(self.grid.integrate(self.stderr[c] ** 2) for c in comps))


def sample_initial_phase_point(rng: np.random.Generator, z0, eps: float, size: Optional[int] = None) -> np.ndarray:
    """Draw ``z ~ N(z0, 2 eps I)``, the density ``|A0(z)| / int |A0|`` for ``g[z0]``."""
    z0 = np.asarray(z0, dtype=float)
    shape = z0.shape if size is None else (int(size),) + z0.shape
    return z0 + math.sqrt(2.0 * eps) * rng.standard_normal(shape)


def normalization_constant(eps: float, d: int) -> float:
    """``C_N = (2 pi eps)^(-3d/2) int |A0(z)| dz`` for a coherent initial state.

    ``|A0(z)| = 2^(d/2) (pi eps)^(d/4) exp(-|z - z0|^2 / (4 eps))``, whose
    integral over ``R^(2d)`` is ``2^(d/2) (pi eps)^(d/4) (4 pi eps)^d``.
    """
    return (2.0 * math.pi * eps) ** (-1.5 * d) * 2.0 ** (d / 2.0) * (math.pi * eps) ** (d / 4.0) \
        * (4.0 * math.pi * eps) ** d


def normalization_constant_quadrature(eps: float, z0, *, points: int = 401, window: float = 10.0) -> float:
    """Trapezoid value of ``(2 pi eps)^(-3d/2) int |A0|`` over ``z0 +- window sqrt(eps)`` (d = 1)."""
    z0 = np.asarray(z0, dtype=float)
    if z0.size != 2:
        raise ValueError("quadrature cross-check is implemented for d = 1")
    packet = GaussianWavepacket.from_z(z0, eps)
    half = window * math.sqrt(eps)
    qs = np.linspace(z0[0] - half, z0[0] + half, points)
    ps = np.linspace(z0[1] - half, z0[1] + half, points)
    Qm, Pm = np.meshgrid(qs, ps, indexing="ij")
    vals = np.abs(initial_amplitude(packet, np.stack([Qm, Pm], axis=-1)))
    integral = np.trapezoid(np.trapezoid(vals, ps, axis=1), qs)
    return float((2.0 * math.pi * eps) ** -1.5 * integral)


def _chunk_sizes(N: int, chunk: int) -> list:
    sizes = [chunk] * (N // chunk)
    if N % chunk:
        sizes.append(N % chunk)
    return sizes


def _pairwise(items):
    items = list(items)
    while len(items) > 1:
        nxt = [items[i] + items[i + 1] for i in range(0, len(items) - 1, 2)]
        if len(items) % 2:
            nxt.append(items[-1])
        items = nxt
    return items[0]


def _run_chunk(args):
    """Propagate one chunk; returns final states needed for accumulation."""
    model, eps, z0, t, dt, seed_seq, n = args
    rng = np.random.default_rng(seed_seq)
    z = sample_initial_phase_point(rng, z0, eps, size=n)
    packet = GaussianWavepacket.from_z(z0, eps)
    state = init_trajectory(z, packet)
    if t > 0:
        state = evolve(state, model, t, rng, dt=dt)
    return {
        "Q": state.Q, "P": state.P, "S": state.S,
        "A": state.A, "absA0": np.abs(state.A0),
        "parity": state.n_hops % 2, "n": state.n_hops, "failed": state.failed,
    }


def _accumulate(res, x, eps, delta, t, C_N):
    """Per-node sums ``(sum w, sum Re w^2, sum Im w^2)`` for both components."""
    ok = ~res["failed"]
    d = x.shape[1]
    n_nodes = x.shape[0]
    sums = np.zeros((2, n_nodes), dtype=complex)
    sq = np.zeros((2, 2, n_nodes))
    phase_n = (-1j) ** (res["n"] % 4)
    coef = C_N * math.exp(delta * t / eps) * phase_n * res["A"] / res["absA0"]
    # nodes are processed in blocks to bound memory
    block = max(1, 2_000_000 // max(1, ok.sum()))
    for comp in (0, 1):
        rows = ok & (res["parity"] == comp)
        if not rows.any():
            continue
        Q, P, S, c = res["Q"][rows], res["P"][rows], res["S"][rows], coef[rows]
        for b in range(0, n_nodes, block):
            xb = x[b:b + block]
            theta = fga_phase_batch(S, P, Q.reshape(-1, d), xb)
            w = c[:, None] * np.exp(1j * theta / eps)
            sums[comp, b:b + block] = w.sum(axis=0)
            sq[comp, 0, b:b + block] = (w.real ** 2).sum(axis=0)
            sq[comp, 1, b:b + block] = (w.imag ** 2).sum(axis=0)
    return sums, sq


def _auto_grid(q_min, q_max, eps, points):
    pad = 8.0 * math.sqrt(eps)
    return EvaluationGrid(tuple(q_min - pad), tuple(q_max + pad), (points,) * len(q_min))


def estimate_wavefunction(spec: EnsembleSpec, model: DiabaticModel) -> WavefunctionEstimate:
    """Sample mean and node-wise standard error of the two-component FGA estimator.

    Trajectories flagged as caustic are dropped; if more than 0.1 % of the
    ensemble is dropped a :class:`fgsh.trajectory.CausticError` is raised.
    """
    t0 = time.perf_counter()
    eps, delta = model.eps, model.delta
    d = model.dim
    z0 = np.asarray(spec.z0, dtype=float)
    if z0.size != 2 * d:
        raise ValueError(f"z0 has {z0.size} entries for a {d}-dimensional model")
    if delta * spec.t / eps > STRONG_COUPLING_CAP:
        raise ValueError(f"delta t / eps = {delta * spec.t / eps:.3g} exceeds the cap {STRONG_COUPLING_CAP:g}")
    C_N = normalization_constant(eps, d)
    sizes = _chunk_sizes(int(spec.N), int(spec.chunk_size))
    seeds = np.random.SeedSequence(spec.seed).spawn(len(sizes))
    tasks = [(model, eps, z0, spec.t, spec.dt, s, n) for s, n in zip(seeds, sizes)]

    workers = spec.workers if spec.workers else (os.cpu_count() or 1)
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_chunk, tasks))
    else:
        results = [_run_chunk(task) for task in tasks]

    dropped = int(sum(r["failed"].sum() for r in results))
    if dropped > MAX_DROP_FRACTION * spec.N:
        raise CausticError(f"{dropped} of {spec.N} trajectories hit a caustic")
    if dropped:
        logger.warning("dropped %d caustic trajectories", dropped)

    q_all = np.concatenate([r["Q"][~r["failed"]] for r in results])
    q_min, q_max = q_all.min(axis=0), q_all.max(axis=0)
    grid = spec.grid or _auto_grid(np.minimum(q_min, z0[:d]), np.maximum(q_max, z0[:d]), eps, spec.grid_points)
    pad = 8.0 * math.sqrt(eps)
    grid_warning = bool(np.any(np.array(grid.lo) > q_min - pad) or np.any(np.array(grid.hi) < q_max + pad))
    if grid_warning:
        logger.warning("evaluation grid does not cover trajectory range +- 8 sqrt(eps)")

    x = grid.points()
    parts = [_accumulate(r, x, eps, delta, spec.t, C_N) for r in results]
    total = _pairwise([p[0] for p in parts])
    total_sq = _pairwise([p[1] for p in parts])

    n_used = spec.N - dropped
    mean = total / n_used
    var_re = total_sq[:, 0] / n_used - mean.real ** 2
    var_im = total_sq[:, 1] / n_used - mean.imag ** 2
    stderr = np.sqrt(np.maximum(var_re + var_im, 0.0) / max(n_used - 1, 1))
    wall = time.perf_counter() - t0
    logger.info("estimated u on %d nodes from %d trajectories in %.1fs", x.shape[0], n_used, wall)
    return WavefunctionEstimate(
        grid=grid, u=mean, stderr=stderr, N=int(spec.N), seed=int(spec.seed), C_N=C_N,
        dropped=dropped, t=float(spec.t), grid_warning=grid_warning,
        meta={"wall_time": wall, "weight_variance_proxy": math.exp(2.0 * delta * spec.t / eps),
              "mean_hops": float(np.mean(np.concatenate([r["n"] for r in results])))},
    )


def population(estimate: WavefunctionEstimate, component: int, *, debias: bool = False):
    """``(int |u_c|^2 dx, error bar)`` for component ``c``.

    The error bar is ``2 sqrt(int |u|^2 se^2)`` (first-order propagation of
    the node-wise standard errors).  With ``debias`` the expected noise
    contribution ``int se^2`` is subtracted, which matters when the
    component is small compared with the Monte Carlo noise.
    """
    if component not in (0, 1):
        raise ValueError("component must be 0 or 1")
    u = estimate.u[component]
    se = estimate.stderr[component]
    grid = estimate.grid
    value = grid.integrate(np.abs(u) ** 2)
    if debias:
        value -= grid.integrate(se ** 2)
    err = 2.0 * math.sqrt(grid.integrate(np.abs(u) ** 2 * se ** 2)) + grid.integrate(se ** 2)
    return value, err


def parity_check(model: DiabaticModel, t: float, n_paths: int, seed: int = 0):
    """Empirical ``E[(-1)^n]`` of the hop clock against ``exp(-2 delta t / eps)``.

    Returns ``(mean, standard error, expected)``.
    """
    rng = np.random.default_rng(seed)
    sched = sample_hop_schedule(rng, n_paths, model.delta, model.eps, t)
    n = np.isfinite(sched).sum(axis=1)
    signs = (-1.0) ** n
    return float(signs.mean()), float(signs.std(ddof=1) / math.sqrt(n_paths)), math.exp(-2.0 * model.delta * t / model.eps)
