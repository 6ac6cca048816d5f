import numpy as np
import pytest
from scipy import stats
from scipy.integrate import trapezoid

from pilotwave.ensemble import BornDensity, GaussianDensity, ProductDensity, UniformDensity
from pilotwave.errors import BasisError
from pilotwave.measure import (
    JointState,
    PointerSetup,
    ensemble_outcomes,
    fidelity,
    pointer_packet,
    run_pointer,
    stern_gerlach,
    sg_equilibrium_start,
    subquantum_measure,
)
from pilotwave.spectral import BOX, RING, BasisSpec, SpectralState, guidance

RING2PI = BasisSpec(RING, 1, length=2 * np.pi)


def cos_state(p=2):
    return SpectralState.from_terms(RING2PI, [((p,), 2**-0.5), ((-p,), 2**-0.5)])


def two_branch(weight=0.64):
    return SpectralState.from_terms(RING2PI, [((1,), np.sqrt(weight)), ((-1,), np.sqrt(1 - weight))])


# ---------------------------------------------------------------- single trajectories


@pytest.mark.parametrize("q0", [0.4, 1.9, 2.8])
def test_position_pointer_is_linear(q0):
    s = SpectralState.from_terms(BasisSpec(BOX, 1), [((1,), 0.6), ((2,), 0.8j)])
    setup = PointerSetup(a=1.5, sigma=0.3, T=2.0)
    run = run_pointer(s, "position", setup, q0, 0.25)
    np.testing.assert_allclose(run.trajectory[:, 0], q0, atol=1e-12)
    assert run.reading == pytest.approx(0.25 + 1.5 * 2.0 * q0, abs=1e-6)


@pytest.mark.parametrize("x0", [0.3, 1.2, 2.0, 4.1, 5.5])
def test_momentum_outcome_is_an_eigenvalue(x0):
    s = cos_state()
    assert abs(guidance(s, [x0], 0.0).velocity[0]) < 1e-12
    setup = PointerSetup(a=1.0, sigma=0.1, T=1.0)
    run = run_pointer(s, "momentum", setup, x0, 0.03)
    assert run.declared
    assert run.record.outcome in (-2.0, 2.0)
    assert run.exclusive


@pytest.mark.parametrize("x0,y0", [(0.3, 0.0), (2.2, 0.1), (5.0, -0.2)])
def test_kinetic_energy_always_same_outcome(x0, y0):
    s = cos_state()
    setup = PointerSetup(a=1.0, sigma=0.1, T=1.0)
    run = run_pointer(s, "kinetic-energy", setup, x0, y0)
    # both terms share p^2/2m, so there is one branch and x never moves
    np.testing.assert_allclose(run.trajectory[:, 0], x0, atol=1e-9)
    assert run.record.outcome == pytest.approx(2.0)
    assert fidelity(run.record.collapsed, s) > 1 - 1e-6


def test_momentum_needs_ring():
    s = SpectralState.eigenstate(BasisSpec(BOX, 1), (1,))
    with pytest.raises(BasisError):
        run_pointer(s, "momentum", PointerSetup(), 1.0, 0.0)


def test_setup_rejects_nonpositive():
    with pytest.raises(ValueError):
        PointerSetup(a=0.0)


# ---------------------------------------------------------------- branch form


@pytest.mark.parametrize("observable", ["momentum", "kinetic-energy"])
def test_joint_continuity(observable, rng):
    # d|Psi|^2/dt + div j = 0 by central differences
    s = SpectralState.from_terms(RING2PI, [((1,), 0.6), ((-2,), 0.8 * np.exp(0.4j))])
    joint = JointState(s, observable, PointerSetup(a=0.7, sigma=0.5, T=1.0))
    q = np.column_stack([rng.uniform(0, 2 * np.pi, 20), rng.uniform(-1, 2, 20)])
    t, h = 0.6, 1e-5
    drho = (np.abs(joint.wave(q, t + h)) ** 2 - np.abs(joint.wave(q, t - h)) ** 2) / (2 * h)
    div = np.zeros(len(q))
    for ax in range(2):
        e = np.zeros(2)
        e[ax] = h
        div += (joint.current(q + e, t)[0][:, ax] - joint.current(q - e, t)[0][:, ax]) / (2 * h)
    np.testing.assert_allclose(drho + div, 0.0, atol=1e-8)


def test_pointer_packet_normalized():
    y = np.linspace(-5, 5, 20001)
    g, _, _ = pointer_packet(y, 0.7)
    assert trapezoid(g**2, y) == pytest.approx(1.0, abs=1e-10)


# ---------------------------------------------------------------- statistics


def test_born_frequencies():
    setup = PointerSetup(a=1.0, sigma=0.1, T=1.0)
    out = ensemble_outcomes(two_branch(), "momentum", setup, None, 4000, seed=3)
    i = list(out.values).index(1.0)
    assert out.undeclared == 0 and out.trapped == 0
    assert abs(out.frequencies[i] - 0.64) < 3 * out.sigma[i]


def test_pointer_readings_match_born_marginal():
    setup = PointerSetup(a=1.0, sigma=0.2, T=1.0)
    out = ensemble_outcomes(two_branch(), "momentum", setup, None, 2000, seed=4)

    def cdf(y):
        return 0.64 * stats.norm.cdf(y, 1.0, 0.2) + 0.36 * stats.norm.cdf(y, -1.0, 0.2)

    assert stats.kstest(out.y_T, cdf).statistic < 1.63 / np.sqrt(out.y_T.size)


def test_single_eigenstate_single_outcome():
    s = SpectralState.eigenstate(RING2PI, (3,))
    out = ensemble_outcomes(s, "momentum", PointerSetup(sigma=0.1), None, 200, seed=1)
    np.testing.assert_array_equal(out.frequencies, [1.0])


def test_nonequilibrium_basin_shifts_frequency():
    # pointer started far on the +1 side of the branch split
    setup = PointerSetup(a=1.0, sigma=0.1, T=1.0)
    spec = ProductDensity([UniformDensity([[0, 2 * np.pi]]), GaussianDensity(0.02, truncate=6.0, center=0.12)])
    out = ensemble_outcomes(two_branch(), "momentum", setup, spec, 2000, seed=5)
    i = list(out.values).index(1.0)
    assert abs(out.frequencies[i] - 0.64) > 5 * out.sigma[i]


def test_outcomes_deterministic_across_workers():
    setup = PointerSetup(a=1.0, sigma=0.1, T=1.0)
    a = ensemble_outcomes(two_branch(), "momentum", setup, None, 60, seed=9, workers=1)
    b = ensemble_outcomes(two_branch(), "momentum", setup, None, 60, seed=9, workers=2)
    np.testing.assert_array_equal(a.y_T, b.y_T)


# ---------------------------------------------------------------- subquantum


def test_subquantum_beats_equilibrium():
    s = SpectralState.from_terms(BasisSpec(BOX, 1), [((1,), 2**-0.5), ((2,), 2**-0.5)])
    sigma = 50.0
    sub = subquantum_measure(s, sigma, sigma / 100, 1.0, 1.0, 400, seed=2)
    eq = subquantum_measure(s, sigma, sigma, 1.0, 1.0, 400, seed=2)
    assert sub.mean_abs_error <= 1.1 * sigma / 100
    assert sub.disturbance <= 1e-4
    assert eq.mean_abs_error > 0.3 * sigma


def test_subquantum_narrow_limit_exact():
    s = SpectralState.eigenstate(BasisSpec(BOX, 1), (1,))
    r = subquantum_measure(s, 1.0, 1e-9, 2.0, 0.5, 50, seed=0)
    assert r.mean_abs_error < 1e-8


def test_subquantum_rejects_wide_pointer():
    s = SpectralState.eigenstate(BasisSpec(BOX, 1), (1,))
    with pytest.raises(ValueError):
        subquantum_measure(s, 1.0, 2.0, 1.0, 1.0, 10, seed=0)


# ---------------------------------------------------------------- Stern-Gerlach


def test_sg_pure_up():
    r = stern_gerlach(1.0, 0.0, 1.0, 4.0, 3.0, [-1.0, 0.2, 1.5])
    assert np.all(r.outcome == 1)


def test_sg_sign_decides_outcome():
    c = 2**-0.5
    z0 = sg_equilibrium_start(1.0, 1000, seed=3)
    z0 = z0[z0 != 0]
    r = stern_gerlach(c, c, 1.0, 4.0, 3.0, z0)
    assert r.separated
    np.testing.assert_array_equal(r.outcome, np.sign(z0).astype(int))


def test_sg_equilibrium_frequency():
    z0 = sg_equilibrium_start(1.0, 3000, seed=4)
    r = stern_gerlach(np.sqrt(0.3), np.sqrt(0.7), 1.0, 4.0, 3.0, z0)
    sig = np.sqrt(0.3 * 0.7 / z0.size)
    assert abs(r.up_fraction - 0.3) < 3 * sig


def test_sg_short_run_undeclared():
    c = 2**-0.5
    r = stern_gerlach(c, c, 1.0, 4.0, 0.1, [0.5])
    assert not r.separated and r.outcome[0] == 0
