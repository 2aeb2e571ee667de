"""Hopping trajectories in the extended phase space.

Trajectories are integrated in batches.  A batch of ``N`` rows carries
position, momentum, action and the four Jacobian blocks of the flow,
stored in row-vector convention::

    J = [[dqQ, dqP],
         [dpQ, dpP]]          # (N, 2d, 2d), dqQ[i, j] = dQ_j / dq_i

so that ``dJ/dt = J @ [[0, -Hess V], [I, 0]]``.  Between hops each row is
advanced with classical RK4; each inter-hop segment is split into equal
steps so that hops happen exactly at their scheduled times.

The FGA amplitude is ``A = A0 * sqrt(2^-d det Z)`` with
``Z = dqQ + dpP + i (dqP - dpQ)``; the branch of the square root is fixed by
unwrapping ``arg det Z`` step by step.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.integrate import cumulative_simpson

from .coherent import GaussianWavepacket, initial_amplitude
from .model import DiabaticModel

logger = logging.getLogger(__name__)

__all__ = [
    "TrajectoryState",
    "TrajectoryHistory",
    "CausticError",
    "CAUSTIC_THRESHOLD",
    "default_dt",
    "init_trajectory",
    "step_deterministic",
    "sample_hop_time",
    "sample_hop_schedule",
    "apply_hop",
    "evolve",
    "amplitude_ode_check",
    "symplectic_defect",
    "write_history_csv",
]

CAUSTIC_THRESHOLD = 1e-12


class CausticError(RuntimeError):
    """Too many trajectories came close to a caustic (``det Z ~ 0``)."""


def default_dt(model: DiabaticModel) -> float:
    """``min(1e-3, eps / (10 delta))``."""
    return min(1e-3, model.eps / (10.0 * model.delta))


@dataclass
class TrajectoryState:
    t: np.ndarray
    Q: np.ndarray
    P: np.ndarray
    S: np.ndarray
    J: np.ndarray
    surface: np.ndarray
    n_hops: np.ndarray
    A0: np.ndarray
    arg_detZ: np.ndarray
    failed: np.ndarray
    hop_times: list = field(default_factory=list)

    @property
    def size(self) -> int:
        return self.Q.shape[0]

    @property
    def dim(self) -> int:
        return self.Q.shape[1]

    @property
    def dqQ(self):
        d = self.dim
        return self.J[:, :d, :d]

    @property
    def dqP(self):
        d = self.dim
        return self.J[:, :d, d:]

    @property
    def dpQ(self):
        d = self.dim
        return self.J[:, d:, :d]

    @property
    def dpP(self):
        d = self.dim
        return self.J[:, d:, d:]

    @property
    def Z(self) -> np.ndarray:
        return _z_matrix(self.J, self.dim)

    @property
    def detZ(self) -> np.ndarray:
        return _det(self.Z)

    @property
    def jacobian_factor(self) -> np.ndarray:
        """``sqrt(2^-d det Z)`` on the continuously tracked branch."""
        mod = np.abs(self.detZ) / 2.0 ** self.dim
        return np.sqrt(mod) * np.exp(0.5j * self.arg_detZ)

    @property
    def A(self) -> np.ndarray:
        return self.A0 * self.jacobian_factor

    def energy(self, model: DiabaticModel) -> np.ndarray:
        return 0.5 * np.sum(self.P ** 2, axis=1) + _surface_values(model, self.surface, self.Q)

    def copy(self) -> "TrajectoryState":
        return TrajectoryState(
            self.t.copy(), self.Q.copy(), self.P.copy(), self.S.copy(), self.J.copy(),
            self.surface.copy(), self.n_hops.copy(), self.A0.copy(), self.arg_detZ.copy(),
            self.failed.copy(), [list(h) for h in self.hop_times],
        )

    def select(self, rows) -> "TrajectoryState":
        rows = np.asarray(rows)
        idx = np.flatnonzero(rows) if rows.dtype == bool else rows
        return TrajectoryState(
            self.t[idx], self.Q[idx], self.P[idx], self.S[idx], self.J[idx],
            self.surface[idx], self.n_hops[idx], self.A0[idx], self.arg_detZ[idx],
            self.failed[idx], [list(self.hop_times[i]) for i in idx],
        )


@dataclass
class TrajectoryHistory:
    """Dense record of a batch, one snapshot per integrator iteration.

    Arrays have a leading snapshot axis ``K + 1``.  ``surface[k]`` and
    ``segment[k]`` describe the step that ended at snapshot ``k``
    (entry 0 repeats the initial values).
    """

    t: np.ndarray
    Q: np.ndarray
    P: np.ndarray
    S: np.ndarray
    J: np.ndarray
    surface: np.ndarray
    segment: np.ndarray
    n_hops: np.ndarray
    A: np.ndarray
    A0: np.ndarray


# -- helpers -------------------------------------------------------------------

def _z_matrix(J, d):
    return J[:, :d, :d] + J[:, d:, d:] + 1j * (J[:, :d, d:] - J[:, d:, :d])


def _det(M):
    if M.shape[-1] == 1:
        return M[:, 0, 0].copy()
    return np.linalg.det(M)


def _surface_values(model, surface, Q):
    if np.all(surface == 0):
        return model.V(0, Q)
    if np.all(surface == 1):
        return model.V(1, Q)
    return np.where(surface == 0, model.V(0, Q), model.V(1, Q))


def _surface_eval(model, surface, Q):
    """Potential, gradient and Hessian of each row on its own surface."""
    for s in (0, 1):
        if np.all(surface == s):
            return model.V(s, Q), model.grad(s, Q), model.hess(s, Q)
    on0 = surface == 0
    V = np.where(on0, model.V(0, Q), model.V(1, Q))
    G = np.where(on0[:, None], model.grad(0, Q), model.grad(1, Q))
    H = np.where(on0[:, None, None], model.hess(0, Q), model.hess(1, Q))
    return V, G, H


# The integrator works on a component-major array ``y`` of shape (m, N):
# rows [0, d) = Q, [d, 2d) = P, 2d = S, then J flattened as (2d, 2d).

def _pack(state: TrajectoryState) -> np.ndarray:
    n, d = state.Q.shape
    y = np.empty((2 * d + 1 + 4 * d * d, n))
    y[:d] = state.Q.T
    y[d:2 * d] = state.P.T
    y[2 * d] = state.S
    y[2 * d + 1:] = np.moveaxis(state.J, 0, -1).reshape(4 * d * d, n)
    return y


def _jac_view(y, d):
    return y[2 * d + 1:].reshape(2 * d, 2 * d, -1)


def _unpack_into(state: TrajectoryState, y: np.ndarray, d: int) -> None:
    state.Q = np.ascontiguousarray(y[:d].T)
    state.P = np.ascontiguousarray(y[d:2 * d].T)
    state.S = y[2 * d].copy()
    state.J = np.ascontiguousarray(np.moveaxis(_jac_view(y, d), -1, 0))


def _rhs(model, surface, y, d):
    Q = y[:d].T
    P = y[d:2 * d]
    V, G, H = _surface_eval(model, surface, Q)
    out = np.empty_like(y)
    out[:d] = P
    out[d:2 * d] = -G.T
    out[2 * d] = 0.5 * np.sum(P * P, axis=0) - V
    J = _jac_view(y, d)
    dJ = _jac_view(out, d)
    # dJ = J @ [[0, -H], [I, 0]]
    dJ[:, :d] = J[:, d:]
    if d == 1:
        dJ[:, 1] = -J[:, 0] * H[:, 0, 0]
    else:
        dJ[:, d:] = -np.einsum("ikn,nkj->ijn", J[:, :d], H)
    return out


def _rk4(model, surface, y, h, d):
    k1 = _rhs(model, surface, y, d)
    k2 = _rhs(model, surface, y + (0.5 * h) * k1, d)
    k3 = _rhs(model, surface, y + (0.5 * h) * k2, d)
    k4 = _rhs(model, surface, y + h * k3, d)
    return y + (h / 6.0) * (k1 + 2.0 * (k2 + k3) + k4)


def _det_z_from_y(y, d):
    J = _jac_view(y, d)
    Z = J[:d, :d] + J[d:, d:] + 1j * (J[:d, d:] - J[d:, :d])
    if d == 1:
        return Z[0, 0]
    return np.linalg.det(np.moveaxis(Z, -1, 0))


def _branch_step(arg, failed, detZ, rows=None):
    inc = np.angle(detZ * np.exp(-1j * arg))
    new_arg = arg + inc if rows is None else np.where(rows, arg + inc, arg)
    return new_arg, failed | (np.abs(detZ) < CAUSTIC_THRESHOLD)


def _update_branch(state: TrajectoryState, rows=None) -> None:
    state.arg_detZ, state.failed = _branch_step(state.arg_detZ, state.failed, state.detZ, rows)


# -- public operations ---------------------------------------------------------

def init_trajectory(z0, packet: Optional[GaussianWavepacket] = None) -> TrajectoryState:
    """Initial state(s) at phase-space point(s) ``z0`` (shape ``(2d,)`` or ``(N, 2d)``).

    ``A0`` comes from :func:`fgsh.coherent.initial_amplitude` when an initial
    wavepacket is given and is 1 otherwise.
    """
    z = np.atleast_2d(np.asarray(z0, dtype=float))
    n, two_d = z.shape
    d = two_d // 2
    A0 = initial_amplitude(packet, z) if packet is not None else np.ones(n, dtype=complex)
    J = np.zeros((n, 2 * d, 2 * d))
    J[:] = np.eye(2 * d)
    return TrajectoryState(
        t=np.zeros(n),
        Q=z[:, :d].copy(),
        P=z[:, d:].copy(),
        S=np.zeros(n),
        J=J,
        surface=np.zeros(n, dtype=np.int64),
        n_hops=np.zeros(n, dtype=np.int64),
        A0=np.asarray(A0, dtype=complex).reshape(n),
        # det Z(0) = 2^d > 0
        arg_detZ=np.zeros(n),
        failed=np.zeros(n, dtype=bool),
        hop_times=[[] for _ in range(n)],
    )


def step_deterministic(state: TrajectoryState, model: DiabaticModel, dt) -> TrajectoryState:
    """One RK4 step of length ``dt`` (scalar or per row) without hops."""
    new = state.copy()
    h = np.broadcast_to(np.asarray(dt, dtype=float), (state.size,)).copy()
    y = _rk4(model, state.surface, _pack(state), h[None, :], state.dim)
    _unpack_into(new, y, state.dim)
    new.t = state.t + h
    _update_branch(new)
    return new


def sample_hop_time(rng: np.random.Generator, delta: float, eps: float, size=None):
    """Exponential waiting time with rate ``delta / eps``."""
    return rng.exponential(eps / delta, size=size)


def sample_hop_schedule(rng: np.random.Generator, n: int, delta: float, eps: float,
                        t_final: float, t_start: float = 0.0) -> np.ndarray:
    """Hop times of ``n`` independent Poisson clocks on ``(t_start, t_final)``.

    Returns an ``(n, K)`` array padded with ``inf``.
    """
    columns = []
    current = np.full(n, float(t_start))
    active = np.ones(n, dtype=bool)
    while active.any():
        nxt = np.full(n, np.inf)
        draws = sample_hop_time(rng, delta, eps, size=int(active.sum()))
        cand = current[active] + draws
        nxt[active] = np.where(cand < t_final, cand, np.inf)
        active = np.isfinite(nxt)
        current = np.where(active, nxt, current)
        if active.any():
            columns.append(nxt)
    if not columns:
        return np.full((n, 0), np.inf)
    return np.stack(columns, axis=1)


def apply_hop(state: TrajectoryState, rows=None) -> TrajectoryState:
    """Switch surface on the selected rows; positions, action and amplitude are continuous."""
    new = state.copy()
    mask = np.ones(state.size, dtype=bool) if rows is None else np.asarray(rows, dtype=bool)
    new.surface = np.where(mask, 1 - state.surface, state.surface)
    new.n_hops = state.n_hops + mask
    for i in np.flatnonzero(mask):
        new.hop_times[i].append(float(state.t[i]))
    return new


def _segment_steps(length, dt, fixed):
    if fixed is not None:
        return np.full(np.shape(length), int(fixed), dtype=np.int64)
    return np.maximum(1, np.ceil(np.asarray(length) / dt - 1e-9)).astype(np.int64)


def _schedule_array(state, hop_times, rng, model, t_final):
    n = state.size
    if hop_times is None:
        if rng is None:
            raise ValueError("either hop_times or rng is required")
        sched = sample_hop_schedule(rng, n, model.delta, model.eps, t_final,
                                    t_start=float(np.max(state.t)))
    elif isinstance(hop_times, np.ndarray) and hop_times.ndim == 2:
        sched = np.asarray(hop_times, dtype=float)
    else:
        rows = [np.sort(np.asarray(h, dtype=float).ravel()) for h in hop_times]
        if len(rows) == 1 and n > 1:
            rows = rows * n
        k = max((r.size for r in rows), default=0)
        sched = np.full((n, k), np.inf)
        for i, r in enumerate(rows):
            sched[i, :r.size] = r
    sched = np.where(sched > state.t[:, None], sched, np.inf)
    sched = np.where(sched < t_final, sched, np.inf)
    return np.concatenate([np.sort(sched, axis=1), np.full((n, 1), np.inf)], axis=1)


def evolve(state: TrajectoryState, model: DiabaticModel, t_final: float,
           rng: Optional[np.random.Generator] = None, *, dt: Optional[float] = None,
           hop_times=None, steps_per_segment: Optional[Sequence[int]] = None,
           record: bool = False):
    """Integrate every row to ``t_final``, hopping at the scheduled times.

    Parameters
    ----------
    hop_times
        ``(N, K)`` array (``inf``-padded) or list of per-row sequences of
        hop times.  When omitted the schedule is drawn from ``rng`` as
        independent exponential clocks with rate ``delta / eps``.
    steps_per_segment
        Fixed RK4 step counts for segment ``0, 1, ...`` (the last entry is
        reused).  By default each segment gets ``ceil(length / dt)`` equal
        steps.  Fixed counts make the discretization error a smooth function
        of the hop times, which the finite-difference Hessians rely on.
    record
        Also return a :class:`TrajectoryHistory`.
    """
    if not t_final > np.max(state.t):
        raise ValueError("t_final must exceed the current time")
    dt = default_dt(model) if dt is None else float(dt)
    n, d = state.Q.shape
    sched = _schedule_array(state, hop_times, rng, model, t_final)
    rows = np.arange(n)

    def steps_for(seg, length):
        if steps_per_segment is None:
            return _segment_steps(length, dt, None)
        fixed = np.asarray(steps_per_segment, dtype=np.int64)
        return fixed[np.minimum(seg, fixed.size - 1)]

    t = state.t.copy()
    surface = state.surface.copy()
    n_hops = state.n_hops.copy()
    arg, failed = state.arg_detZ.copy(), state.failed.copy()
    hop_log = [list(h) for h in state.hop_times]
    y = _pack(state)

    seg_idx = np.zeros(n, dtype=np.int64)
    seg_start = t.copy()
    seg_end = np.minimum(sched[:, 0], t_final)
    n_steps = steps_for(seg_idx, seg_end - seg_start)
    counter = np.zeros(n, dtype=np.int64)
    done = seg_start >= t_final

    hist = None
    if record:
        hist = {k: [] for k in ("t", "Q", "P", "S", "J", "surface", "segment", "n_hops", "A")}

        def snap(surface_used, segment_used):
            jac = np.sqrt(np.abs(_det_z_from_y(y, d)) / 2.0 ** d) * np.exp(0.5j * arg)
            hist["t"].append(t.copy())
            hist["Q"].append(y[:d].T.copy())
            hist["P"].append(y[d:2 * d].T.copy())
            hist["S"].append(y[2 * d].copy())
            hist["J"].append(np.moveaxis(_jac_view(y, d), -1, 0).copy())
            hist["surface"].append(surface_used.copy())
            hist["segment"].append(segment_used.copy())
            hist["n_hops"].append(n_hops.copy())
            hist["A"].append(state.A0 * jac)

        snap(surface, n_hops)

    while not done.all():
        active = ~done
        h = np.where(active, (seg_end - seg_start) / n_steps, 0.0)
        surface_used = surface
        segment_used = n_hops
        y = _rk4(model, surface, y, h[None, :], d)
        counter = counter + active
        t = np.where(active, seg_start + counter * h, t)
        finished = active & (counter >= n_steps)
        t = np.where(finished, seg_end, t)
        arg, failed = _branch_step(arg, failed, _det_z_from_y(y, d), active)

        hop_rows = finished & (seg_end < t_final)
        done = done | (finished & ~hop_rows)
        if record:
            snap(surface_used, segment_used)
        if hop_rows.any():
            surface = np.where(hop_rows, 1 - surface, surface)
            n_hops = n_hops + hop_rows
            for i in np.flatnonzero(hop_rows):
                hop_log[i].append(float(seg_end[i]))
            seg_idx = seg_idx + hop_rows
            new_end = np.minimum(sched[rows, seg_idx], t_final)
            seg_start = np.where(hop_rows, seg_end, seg_start)
            seg_end = np.where(hop_rows, new_end, seg_end)
            n_steps = np.where(hop_rows, steps_for(seg_idx, seg_end - seg_start), n_steps)
            counter = np.where(hop_rows, 0, counter)

    out = TrajectoryState(t=t, Q=None, P=None, S=None, J=None, surface=surface, n_hops=n_hops,
                          A0=state.A0.copy(), arg_detZ=arg, failed=failed, hop_times=hop_log)
    _unpack_into(out, y, d)
    if record:
        stacked = {k: np.stack(v) for k, v in hist.items()}
        return out, TrajectoryHistory(A0=out.A0.copy(), **stacked)
    return out


def symplectic_defect(state: TrajectoryState) -> np.ndarray:
    """``max |dqQ dpP^T - dqP dpQ^T - I|`` per row."""
    d = state.dim
    lhs = state.dqQ @ np.swapaxes(state.dpP, 1, 2) - state.dqP @ np.swapaxes(state.dpQ, 1, 2)
    return np.max(np.abs(lhs - np.eye(d)), axis=(1, 2))


def _log_amplitude_rate(model, surface, Q, J, d):
    """``(1/2) tr(Z^-1 dZ/dt)`` with ``dZ/dt = dzP - i dzQ Hess V`` and ``dz = dq - i dp``."""
    _, _, H = _surface_eval(model, surface, Q)
    dqQ, dqP = J[:, :d, :d], J[:, :d, d:]
    dpQ, dpP = J[:, d:, :d], J[:, d:, d:]
    Z = dqQ + dpP + 1j * (dqP - dpQ)
    dZ = dqP - 1j * dpP - 1j * (dqQ @ H) - dpQ @ H
    return 0.5 * np.trace(np.linalg.solve(Z, dZ), axis1=1, axis2=2)


def amplitude_ode_check(history: TrajectoryHistory, model: DiabaticModel) -> float:
    """Integrate the amplitude ODE along a recorded history.

    ``log A`` is integrated with cumulative Simpson on every inter-hop
    segment (the rate jumps at hops) and compared with the Jacobian
    determinant formula.  Returns ``max |A_ode - A_jac| / |A_jac|``.
    """
    K1, n = history.t.shape
    d = history.Q.shape[2]
    worst = 0.0
    for i in range(n):
        t = history.t[:, i]
        A_jac = history.A[:, i]
        log_a = np.empty(K1, dtype=complex)
        log_a[0] = np.log(history.A0[i])
        k = 0
        while k < K1 - 1:
            # run of snapshots k..m sharing one segment label
            seg = history.segment[k + 1, i]
            m = k + 1
            while m + 1 < K1 and history.segment[m + 1, i] == seg and history.t[m + 1, i] > history.t[m, i]:
                m += 1
            if history.t[m, i] <= history.t[k, i]:
                log_a[k + 1:] = log_a[k]
                break
            idx = np.arange(k, m + 1)
            surf = np.full(idx.size, history.surface[k + 1, i])
            rate = _log_amplitude_rate(model, surf, history.Q[idx, i], history.J[idx, i], d)
            if idx.size >= 3:
                cum = (cumulative_simpson(rate.real, x=t[idx], initial=0.0)
                       + 1j * cumulative_simpson(rate.imag, x=t[idx], initial=0.0))
            else:
                cum = np.array([0.0, 0.5 * (rate[0] + rate[1]) * (t[idx[1]] - t[idx[0]])])
            log_a[idx] = log_a[k] + cum
            k = m
        A_ode = np.exp(log_a)
        rel = np.abs(A_ode - A_jac) / np.abs(A_jac)
        worst = max(worst, float(np.max(rel)))
    return worst


def write_history_csv(path, history: TrajectoryHistory, row: int = 0) -> None:
    """Dump one row of a history as CSV: t, Q..., P..., S, Re A, Im A, l, n."""
    d = history.Q.shape[2]
    header = ["t"] + [f"Q{j}" for j in range(d)] + [f"P{j}" for j in range(d)] + ["S", "ReA", "ImA", "l", "n"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for k in range(history.t.shape[0]):
            A = history.A[k, row]
            w.writerow([repr(float(history.t[k, row]))]
                       + [repr(float(v)) for v in history.Q[k, row]]
                       + [repr(float(v)) for v in history.P[k, row]]
                       + [repr(float(history.S[k, row])), repr(float(A.real)), repr(float(A.imag)),
                          int(history.surface[k, row]), int(history.n_hops[k, row])])
