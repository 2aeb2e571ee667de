import json
import math

import numpy as np
import pytest

from fgsh.model import make_cubic_perturbed, make_spin_boson
from fgsh.single_hop import SingleHopQuadratureSpec, transition_rate
from fgsh.stationary_phase import (
    DegenerateHessianError,
    MultipleCrossingError,
    NoCrossingError,
    PhasePoint,
    StepInstabilityError,
    assumption_checks,
    dS_dt1_identity_check,
    find_stationary_point,
    hessian,
    hessian_blocks,
    jump_flow_jacobian,
    leading_order_rate,
    phase_gradient,
    phase_value,
    stationary_report,
)
from fgsh.trajectory import evolve, init_trajectory

Z0 = np.array([-1.0, 2.0])
T = 2.0


@pytest.fixture(scope="module")
def sb():
    return make_spin_boson(1.0, 1.0, 1e-3, 0.05)


@pytest.fixture(scope="module")
def sb_hessian(sb):
    t1, _ = find_stationary_point(sb, Z0, T)
    return t1, hessian(sb, Z0, T, t1)


def test_symmetric_point_has_zero_phase(sb):
    val = phase_value(PhasePoint.symmetric(0.7, Z0, T), sb)
    assert abs(val.imag) < 1e-15
    assert abs(val.real) < 1e-12


def test_swap_symmetry_and_positive_imaginary_part(sb, rng):
    for _ in range(10):
        t1, t2 = rng.uniform(0.2, 1.8, size=2)
        z1, z2 = Z0 + 0.3 * rng.normal(size=(2, 2))
        a = phase_value(PhasePoint(t1, z1, t2, z2, T, Z0), sb, steps=(500, 500))
        b = phase_value(PhasePoint(t2, z2, t1, z1, T, Z0), sb, steps=(500, 500))
        assert abs(a + np.conj(b)) < 1e-12
        assert a.imag >= 0


def test_phase_point_requires_interior_times(sb):
    with pytest.raises(ValueError):
        phase_value(PhasePoint.symmetric(2.5, Z0, T), sb)


def test_stationary_point_closed_form(sb):
    # Q(tau) = -1 + 2 sin(tau) on surface 0, crossing at Q = 0
    t1, diag = find_stationary_point(sb, Z0, T)
    assert t1 == pytest.approx(math.pi / 6, abs=1e-10)
    assert abs(diag["g"]) <= 1e-10
    assert diag["grad_norm"] <= 1e-6
    assert diag["unique"]
    assert diag["crossing_position"][0] == pytest.approx(0.0, abs=1e-10)


def test_gradient_vanishes_only_at_crossing(sb):
    assert np.linalg.norm(phase_gradient(sb, Z0, T, math.pi / 6)) < 1e-6
    assert np.linalg.norm(phase_gradient(sb, Z0, T, 0.8)) > 1e-2


def test_no_crossing_at_well_bottom(sb):
    with pytest.raises(NoCrossingError):
        find_stationary_point(sb, (-1.0, 0.0), T)


def test_start_on_crossing_returns_first_return(sb):
    # Q(tau) = -1 + cos(tau) + sin(tau) leaves x = 0 and returns at pi/2
    t1, diag = find_stationary_point(sb, (0.0, 1.0), T)
    assert t1 == pytest.approx(math.pi / 2, abs=1e-10)
    assert diag["unique"]


def test_multiple_crossings_rejected(sb):
    with pytest.raises(MultipleCrossingError):
        find_stationary_point(sb, Z0, 6.0, check_gradient=False)
    t1, diag = find_stationary_point(sb, Z0, 6.0, check_gradient=False, allow_multiple=True)
    assert t1 == pytest.approx(math.pi / 6, abs=1e-10)
    assert not diag["unique"] and diag["n_crossings"] == 2


def test_hessian_structure(sb, sb_hessian):
    t1, H = sb_hessian
    assert H.shape == (6, 6)
    np.testing.assert_array_equal(H, H.T)
    assert np.linalg.eigvalsh(H.imag).min() >= -1e-8
    assert abs(np.linalg.det(H)) > 1e-12


def test_hessian_identities(sb, sb_hessian):
    t1, H = sb_hessian
    _, _, info = assumption_checks(sb, Z0, T, t1)
    A = info["A"]
    assert A == pytest.approx(2 * math.sqrt(3), rel=1e-8)
    assert abs(np.linalg.det(H.real)) == pytest.approx(A ** 2 / 16, rel=1e-4)
    b = hessian_blocks(H, 1)
    for key in ("q1q1", "q1p1", "q1q2", "t1t2"):
        assert np.abs(b[key]).max() < 1e-4
    assert np.abs(b["q1p2"] - 0.5).max() < 1e-4
    assert b["t1t1"] == pytest.approx(A, rel=1e-4)
    assert b["t2t2"] == pytest.approx(-A, rel=1e-4)


def test_imaginary_cross_block(sb, sb_hessian):
    t1, H = sb_hessian
    F = jump_flow_jacobian(sb, Z0, T, t1)
    b = hessian_blocks(H, 1)
    np.testing.assert_allclose(b["I_offdiag"], -0.5 * F.T @ F, atol=1e-5)
    # the full imaginary Hessian: F^T F / 2 blocks plus the z-penalty
    diag_block = 0.5 * F.T @ F + 0.5 * np.diag([0.0, 1.0, 1.0])
    np.testing.assert_allclose(H.imag[:3, :3], diag_block, atol=1e-5)


def test_richardson_guard(sb):
    with pytest.raises(StepInstabilityError):
        hessian(sb, Z0, T, math.pi / 6, h=1e-7)


def test_cubic_model_identities():
    m = make_cubic_perturbed(1.0, 1.0, 0.1, 1e-3, 0.05)
    t1, _ = find_stationary_point(m, Z0, T)
    H = hessian(m, Z0, T, t1)
    a1, a2, info = assumption_checks(m, Z0, T, t1)
    assert a1 and a2
    assert np.linalg.eigvalsh(H.imag).min() >= -1e-8
    assert abs(np.linalg.det(H.real)) == pytest.approx(info["A"] ** 2 / 16, rel=1e-4)
    assert abs(np.linalg.det(H)) > 1e-12


def test_assumptions_spin_boson(sb):
    a1, a2, info = assumption_checks(sb, Z0, T, math.pi / 6)
    assert a1 and a2
    assert info["grad_difference"] == pytest.approx([2.0])
    assert info["P_at_crossing"][0] == pytest.approx(math.sqrt(3), abs=1e-10)


@pytest.mark.parametrize("t,t1", [(1.0, 0.3), (2.0, 0.5), (2.5, 1.9), (3.0, 0.4)])
def test_dQ_dt1_formula(sb, t, t1):
    _, _, info = assumption_checks(sb, (-1.0, 0.5), t, t1)
    assert info["dQ_dt1"][0] == pytest.approx(-2.0 * math.sin(t - t1), abs=1e-6)


def test_dS_dt1_identity(sb):
    for t1 in (0.3, 0.9, 1.5):
        assert dS_dt1_identity_check(sb, Z0, T, t1) <= 1e-6


def test_dS_dt1_identity_converges_quadratically(sb):
    dev = [dS_dt1_identity_check(sb, Z0, T, 0.9, h=h) for h in (4e-2, 2e-2)]
    assert dev[0] / dev[1] == pytest.approx(4.0, rel=0.1)


def test_dS_dt1_at_stationary_time(sb):
    t1, h = math.pi / 6, 1e-4
    ends = evolve(init_trajectory(np.repeat(Z0[None], 3, axis=0)), sb, T,
                  hop_times=np.array([[t1 + h], [t1 - h], [t1]]), steps_per_segment=(600, 1500))
    dS = (ends.S[0] - ends.S[1]) / (2 * h)
    dQ = (ends.Q[0, 0] - ends.Q[1, 0]) / (2 * h)
    assert dS == pytest.approx(ends.P[2, 0] * dQ, abs=1e-7)


def test_leading_order_rate_scaling(sb, sb_hessian):
    t1, H = sb_hessian
    k1 = leading_order_rate(sb, Z0, T, 1e-3, t1=t1, H=H)
    k2 = leading_order_rate(sb, Z0, T, 2e-3, t1=t1, H=H)
    assert k1 > 0
    assert k2 / k1 == pytest.approx(4.0, rel=1e-14)


def test_degenerate_hessian(sb):
    with pytest.raises(DegenerateHessianError):
        leading_order_rate(sb, Z0, T, t1=math.pi / 6, H=np.zeros((6, 6)))


def test_leading_order_trend():
    ratios = []
    for eps in (0.1, 0.05):
        m = make_spin_boson(1.0, 1.0, 1e-3, eps)
        k = transition_rate(SingleHopQuadratureSpec(nz=24, nt=48, t=T, dt=5e-3), m, Z0, gate=False).k
        ratios.append(k / leading_order_rate(m, Z0, T))
    assert abs(ratios[1] - 1) < abs(ratios[0] - 1) < 0.1


def test_report_json(sb):
    rep = stationary_report(sb, Z0, T)
    d = json.loads(rep.to_json())
    assert d["t1_star"] == pytest.approx(math.pi / 6, abs=1e-10)
    assert d["min_eigenvalue_H_I"] >= -1e-8
    assert d["assumption1"] and d["assumption2"]
    assert d["A"] == pytest.approx(2 * math.sqrt(3), rel=1e-8)
    assert d["leading_order_rate"] > 0
    assert len(d["H_I_eigenvalues"]) == 6
