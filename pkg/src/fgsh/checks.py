"""Fast identity suite shared by ``fgsh verify`` and the test-suite.

Every check returns a :class:`CheckResult` with the measured value and
the tolerance it is held to.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .coherent import GaussianWavepacket, coherent_inner, eval_coherent
from .mc_estimator import parity_check
from .model import make_cubic_perturbed, make_spin_boson
from .stationary_phase import (
    assumption_checks,
    dS_dt1_identity_check,
    find_stationary_point,
    hessian,
    hessian_blocks,
    jump_flow_jacobian,
)
from .trajectory import amplitude_ode_check, evolve, init_trajectory, symplectic_defect

logger = logging.getLogger(__name__)

__all__ = [
    "CheckResult",
    "check_symplectic",
    "check_parity",
    "check_coherent_inner",
    "check_dS_dt1",
    "check_dQ_dt1",
    "check_hessian_identities",
    "check_amplitude_ode",
    "run_all",
    "STATIONARY_CASES",
]

# (label, model factory, z0, t) pairs used for the Hessian identities
STATIONARY_CASES = (
    ("spin_boson", lambda: make_spin_boson(1.0, 1.0, 1e-3, 0.05), (-1.0, 2.0), 2.0),
    ("cubic_perturbed", lambda: make_cubic_perturbed(1.0, 1.0, 0.1, 1e-3, 0.05), (-1.0, 2.0), 2.0),
)


@dataclass
class CheckResult:
    name: str
    value: float
    tol: float
    passed: bool
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f"  {self.detail}" if self.detail else ""
        return f"[{status}] {self.name}: {self.value:.3e} (tol {self.tol:.1e}){extra}"


def _result(name, value, tol, detail="", *, lower=False):
    ok = value >= tol if lower else value <= tol
    return CheckResult(name, float(value), float(tol), bool(ok and np.isfinite(value)), detail)


def check_symplectic(n: int = 100, t: float = 10.0, dt: float = 1e-3, seed: int = 0, tol: float = 1e-8):
    """``max |dqQ dpP^T - dqP dpQ^T - I|`` over ``n`` random hopping trajectories.

    Ten spin-boson models with ``omega`` drawn from ``[0.5, 4]`` each carry
    ``n / 10`` trajectories with random initial points and Poisson hops.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for omega in rng.uniform(0.5, 4.0, size=10):
        model = make_spin_boson(float(omega), 1.0, 0.05, 0.1)
        z = rng.normal(size=(max(1, n // 10), 2))
        out = evolve(init_trajectory(z), model, t, rng, dt=dt)
        worst = max(worst, float(symplectic_defect(out).max()))
    return _result("symplectic identity", worst, tol, f"{n} trajectories, t={t}, dt={dt}")


def check_parity(n_paths: int = 10_000, seed: int = 0):
    """Empirical ``E[(-1)^n]`` against ``exp(-2 delta t/eps)`` in units of its standard error."""
    model = make_spin_boson(1.0, 1.0, 0.05, 0.1)
    mean, se, expected = parity_check(model, 1.0, n_paths, seed)
    z = abs(mean - expected) / se
    return _result("Poisson parity", z, 3.0, f"mean {mean:.4f} vs {expected:.4f} (in sigma)")


def check_coherent_inner(tol: float = 1e-10):
    """Closed-form ``<g[z1], g[z2]>`` against trapezoid quadrature in ``x``."""
    eps = 0.1
    pairs = [((-1.0, 0.0), (-0.8, 0.3)), ((0.0, 1.0), (0.2, 0.5)), ((0.5, -0.4), (0.1, 0.0)),
             ((-0.3, 2.0), (-0.3, 2.2))]
    x = np.linspace(-8.0, 8.0, 40001)[:, None]
    worst = 0.0
    for z1, z2 in pairs:
        g1 = eval_coherent(GaussianWavepacket.from_z(z1, eps), x)
        g2 = eval_coherent(GaussianWavepacket.from_z(z2, eps), x)
        quad = np.trapezoid(np.conj(g1) * g2, x[:, 0])
        worst = max(worst, abs(quad - coherent_inner(np.array(z1), np.array(z2), eps)))
    return _result("coherent inner product", worst, tol)


def check_dS_dt1(tol: float = 1e-6):
    model = make_spin_boson(1.0, 1.0, 1e-3, 0.05)
    worst = max(dS_dt1_identity_check(model, (-1.0, 2.0), 2.0, t1) for t1 in (0.3, 0.9, 1.5))
    return _result("dS/dt1 identity", worst, tol)


def check_dQ_dt1(n_pairs: int = 20, tol: float = 1e-6):
    """Finite-difference ``dQ/dt1`` against ``-(2c/omega) sin(omega (t - t1))``."""
    omega, c = 1.0, 1.0
    model = make_spin_boson(omega, c, 1e-3, 0.05)
    worst = 0.0
    ts = np.linspace(0.5, 3.0, n_pairs)
    for k, t in enumerate(ts):
        t1 = t * (0.15 + 0.7 * ((k * 0.618) % 1.0))
        t1 = max(t1, t - 0.95 * math.pi / omega)
        _, _, info = assumption_checks(model, (-1.0, 0.5), t, t1)
        exact = -(2.0 * c / omega) * math.sin(omega * (t - t1))
        worst = max(worst, abs(info["dQ_dt1"][0] - exact))
    return _result("spin-boson dQ/dt1", worst, tol, f"{n_pairs} (t, t1) pairs")


def check_hessian_identities(tol_block: float = 1e-4):
    """PSD of ``H_I``, the ``det H_R`` identity, non-degeneracy and the sub-block identities."""
    out = []
    for label, factory, z0, t in STATIONARY_CASES:
        model = factory()
        t1, _ = find_stationary_point(model, z0, t)
        H = hessian(model, z0, t, t1)
        _, _, info = assumption_checks(model, z0, t, t1)
        A = info["A"]
        d = model.dim
        blocks = hessian_blocks(H, d)
        lam = float(np.linalg.eigvalsh(H.imag).min())
        out.append(_result(f"{label}: min eig H_I", -lam, 1e-8, f"lambda_min = {lam:.3e}"))
        det_hr = float(np.linalg.det(H.real))
        target = -(A ** 2) / 2.0 ** (4 * d)
        out.append(_result(f"{label}: det H_R identity", abs(det_hr - target) / abs(target), 1e-4,
                           f"det H_R = {det_hr:.6f}, -A^2/2^4d = {target:.6f}"))
        det_h = abs(np.linalg.det(H))
        out.append(_result(f"{label}: |det Hess|", det_h, 1e-12, lower=True))
        zero_blocks = max(np.abs(blocks["q1q1"]).max(), np.abs(blocks["q1p1"]).max(),
                          np.abs(blocks["t1t2"]).max(), np.abs(blocks["q1q2"]).max())
        half = np.abs(blocks["q1p2"] - 0.5 * np.eye(d)).max()
        tt = max(abs(blocks["t1t1"] - A), abs(blocks["t2t2"] + A)) / abs(A)
        out.append(_result(f"{label}: vanishing H_R blocks", zero_blocks, tol_block))
        out.append(_result(f"{label}: dq1 dp2 Phi_R = I/2", half, tol_block))
        out.append(_result(f"{label}: d2t1 Phi_R = -d2t2 Phi_R = A", tt, tol_block))
        F = jump_flow_jacobian(model, z0, t, t1)
        off = np.abs(blocks["I_offdiag"] + 0.5 * F.T @ F).max()
        out.append(_result(f"{label}: H_I cross block = -F^T F/2", off, 1e-5))
    return out


def check_amplitude_ode(tol: float = 1e-6):
    """Integrated amplitude ODE against ``A0 sqrt(2^-d det Z)`` on quadratic surfaces with hops."""
    model = make_spin_boson(2.0, 1.0, 1e-3, 0.05)
    state = init_trajectory(np.array([[-1.0, 2.0], [0.5, -1.0], [0.0, 0.3]]))
    _, hist = evolve(state, model, 3.0, hop_times=[[0.7, 1.9], [1.1], []], dt=1e-3, record=True)
    return _result("amplitude ODE vs det Z", amplitude_ode_check(hist, model), tol)


def run_all(seed: int = 0, dt: float = 1e-3) -> list:
    """Run the suite; ``seed`` only affects the randomized checks, ``dt`` the symplectic one."""
    results = [
        check_symplectic(seed=seed, dt=dt),
        check_parity(seed=seed),
        check_coherent_inner(),
        check_dS_dt1(),
        check_dQ_dt1(),
    ]
    results.extend(check_hessian_identities())
    results.append(check_amplitude_ode())
    return results
