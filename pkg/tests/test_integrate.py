import numpy as np
import pytest

from pilotwave.errors import NodeTrapError
from pilotwave.integrate import (
    PhasePoint,
    StepControl,
    debroglie_batch,
    integrate_bohm,
    integrate_debroglie,
    phase_gradient,
)
from pilotwave.spectral import BOX, BasisSpec, SpectralState

# fixed-step RK4 at dt = 1e-5 from q0 = 1.3 (tests/oracles/rk4_two_mode.py)
RK4_TWO_MODE = {
    np.pi / 2: 2.440110593851534,
    np.pi: 2.2702082357342377,
    3 * np.pi / 2: 1.5335706929567934,
    2 * np.pi: 2.4807140540719734,
}


def test_eigenmode_trajectory_stays_put():
    s = SpectralState.eigenstate(BasisSpec(BOX, 2), (1, 2))
    pts = integrate_debroglie(s, [0.7, 0.9], 0.0, 10.0, samples=np.linspace(0, 10, 6))
    for p in pts:
        np.testing.assert_allclose(p.q, [0.7, 0.9], rtol=0, atol=1e-14)


def test_matches_small_step_oracle(two_mode):
    times = np.array([0.0, *RK4_TWO_MODE])
    pts = integrate_debroglie(two_mode, [1.3], 0.0, 2 * np.pi, StepControl(), samples=times)
    for p, ref in zip(pts[1:], RK4_TWO_MODE.values()):
        assert abs(p.q[0] - ref) < 1e-5


def test_error_shrinks_with_tolerance(two_mode):
    # an adaptive controller is not monotone under every halving; decades are
    ref = RK4_TWO_MODE[2 * np.pi]
    errs = []
    for rtol in (1e-6, 1e-7, 1e-8, 1e-9):
        p = integrate_debroglie(two_mode, [1.3], 0.0, 2 * np.pi, StepControl(rtol=rtol, atol=rtol / 100))
        errs.append(abs(p[-1].q[0] - ref))
    assert all(b < a for a, b in zip(errs, errs[1:]))


def test_time_reversal(box16):
    fwd = integrate_debroglie(box16, [1.1, 2.0], 0.0, 3.0)
    back = integrate_debroglie(box16, fwd[-1].q, 3.0, 0.0)
    np.testing.assert_allclose(back[-1].q, [1.1, 2.0], atol=1e-6)


def test_reflection_equivariance():
    # phi_1 and phi_3 are both even about the box centre
    s = SpectralState.from_terms(BasisSpec(BOX, 1), [((1,), 0.8), ((3,), 0.6j)])
    times = np.linspace(0, 5, 11)
    ctrl = StepControl(rtol=1e-11, atol=1e-13)
    a = integrate_debroglie(s, [0.9], 0.0, 5.0, ctrl, samples=times)
    b = integrate_debroglie(s, [np.pi - 0.9], 0.0, 5.0, ctrl, samples=times)
    for pa, pb in zip(a, b):
        assert pa.q[0] == pytest.approx(np.pi - pb.q[0], abs=1e-8)


def test_deterministic(box16):
    q0 = np.array([[0.5, 0.6], [1.5, 2.5], [2.9, 0.3]])
    r1 = debroglie_batch(box16, q0, np.linspace(0, 2, 5), StepControl())
    r2 = debroglie_batch(box16, q0[::-1].copy(), np.linspace(0, 2, 5), StepControl())
    np.testing.assert_array_equal(r1.y, r2.y[::-1])


def test_node_trap_reports_last_point():
    # phi_2 vanishes at pi/2, so a trajectory cannot start there
    s = SpectralState.from_terms(BasisSpec(BOX, 1), [((2,), 1.0)])
    with pytest.raises(NodeTrapError):
        integrate_debroglie(s, [np.pi / 2], 0.0, 1.0)


def test_bohm_with_guidance_momentum_tracks_debroglie(two_mode):
    q0 = np.array([1.3])
    p0 = phase_gradient(two_mode, q0, 0.0)[0]
    times = np.linspace(0, 4 * np.pi, 17)
    ctrl = StepControl(rtol=1e-10, atol=1e-12)
    bohm = integrate_bohm(two_mode, PhasePoint(q0, p0, 0.0), 4 * np.pi, ctrl, samples=times)
    db = integrate_debroglie(two_mode, q0, 0.0, 4 * np.pi, ctrl, samples=times)
    gap = max(abs(a.q[0] - b.q[0]) for a, b in zip(bohm, db))
    assert gap < 1e-5


def test_bohm_eigenmode_at_rest():
    s = SpectralState.eigenstate(BasisSpec(BOX, 1), (2,))
    pts = integrate_bohm(s, PhasePoint(np.array([0.6]), np.array([0.0]), 0.0), 5.0)
    assert abs(pts[-1].q[0] - 0.6) < 1e-9
    assert abs(pts[-1].p[0]) < 1e-6


def test_bohm_perturbation_does_not_decay(box16):
    from pilotwave.ensemble import BornDensity, bohm_instability

    spec = BornDensity(SpectralState.eigenstate(box16.basis, (1, 1)))
    series, run = bohm_instability(box16, spec, 24, seed=2, periods=10, n_times=6, n_boot=16)
    assert series.mean[0] == pytest.approx(0.1 * np.sqrt(2), rel=1e-9)
    assert np.all(series.mean[1:] > series.mean[0])
