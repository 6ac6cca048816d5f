import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from pilotwave.errors import FitDomainError, InfiniteHError
from pilotwave.ensemble import (
    BornDensity,
    CoarseGrid,
    DensityField,
    HSeries,
    UniformDensity,
    coarse_born,
    coarse_rho,
    equilibrium_rate_check,
    evolve,
    fit_exponential,
    h_bar,
    noneq_rate_check,
    relaxation_series,
    sample,
)
from pilotwave.integrate import integrate_debroglie
from pilotwave.spectral import BOX, BasisSpec, SpectralState

# 0.5 * (1.6 ln 1.6 + 0.4 ln 0.4)
TWO_CELL_H = 0.19274475702175753


def sin2_cdf(x):
    """CDF of (2/pi) sin^2 on [0, pi]."""
    return (x - np.sin(2 * x) / 2) / np.pi


# ---------------------------------------------------------------- sampling


def test_uniform_sample_reproducible():
    spec = UniformDensity([[0, np.pi]])
    a, b = sample(spec, 4, seed=99), sample(spec, 4, seed=99)
    np.testing.assert_array_equal(a, b)
    assert a.shape == (4, 1) and np.all((a >= 0) & (a <= np.pi))


def test_ground_state_sample_chi_square():
    g = SpectralState.eigenstate(BasisSpec(BOX, 1), (1,))
    x = sample(BornDensity(g), 100_000, seed=5)[:, 0]
    edges = np.linspace(0, np.pi, 17)
    counts, _ = np.histogram(x, edges)
    expected = np.diff(sin2_cdf(edges)) * x.size
    assert stats.chisquare(counts, expected).pvalue > 1e-3


def test_two_dimensional_marginals():
    g = SpectralState.eigenstate(BasisSpec(BOX, 2), (1, 1))
    q = sample(BornDensity(g), 20_000, seed=8)
    for ax in range(2):
        assert stats.kstest(q[:, ax], sin2_cdf).pvalue > 1e-3


def test_sample_prefix_stable():
    # per-trajectory streams: the first points do not depend on N
    g = SpectralState.eigenstate(BasisSpec(BOX, 1), (1,))
    np.testing.assert_array_equal(sample(BornDensity(g), 10, 3), sample(BornDensity(g), 50, 3)[:10])


# ---------------------------------------------------------------- evolution


def test_eigenmode_ensemble_frozen():
    s = SpectralState.eigenstate(BasisSpec(BOX, 2), (2, 1))
    q0 = sample(UniformDensity([[0.1, 3.0], [0.1, 3.0]]), 50, 1)
    run = evolve(s, q0, [0.0, 2.0, 6.0])
    for j in range(3):
        np.testing.assert_allclose(run.positions[:, j], q0, atol=1e-13)


def test_singleton_matches_single_trajectory(two_mode):
    run = evolve(two_mode, [[1.3]], [0.0, 1.0, 2.5])
    pts = integrate_debroglie(two_mode, [1.3], 0.0, 2.5, samples=[0.0, 1.0, 2.5])
    # the ensemble path runs at the looser ensemble tolerance
    np.testing.assert_allclose(run.positions[0, :, 0], [p.q[0] for p in pts], atol=1e-5)


def test_equivariance_ks(two_mode):
    N = 2000
    q0 = sample(BornDensity(two_mode), N, seed=21)
    run = evolve(two_mode, q0, [0.0, 5.0])
    x = np.linspace(0, np.pi, 4001)
    psi = np.sin(x) * np.exp(-2.5j) + np.sin(2 * x) * np.exp(-10j)
    rho = np.abs(psi) ** 2
    cdf = np.concatenate([[0], np.cumsum((rho[1:] + rho[:-1]) / 2 * np.diff(x))])
    cdf /= cdf[-1]
    D = stats.kstest(run.positions[:, 1, 0], lambda z: np.interp(z, x, cdf)).statistic
    assert D < 1.63 / np.sqrt(N)


# ---------------------------------------------------------------- coarse-graining


def test_single_cell_occupied():
    grid = CoarseGrid((4,), (0.0,), (np.pi,))
    f = coarse_rho(np.full((10, 1), 0.1), grid=grid)
    assert f.values[0] == pytest.approx(1 / grid.cell_volume)
    assert np.all(f.values[1:] == 0)


def test_uniform_cells_within_binomial_error():
    grid = CoarseGrid((4,), (0.0,), (np.pi,))
    N = 10_000
    f = coarse_rho(sample(UniformDensity([[0, np.pi]]), N, 4), grid=grid)
    sig = np.sqrt(0.25 * 0.75 / N) / grid.cell_volume
    assert np.all(np.abs(f.values - 1 / np.pi) < 4 * sig)


def test_empty_ensemble():
    with pytest.raises(ValueError):
        coarse_rho(np.empty((0, 1)), grid=CoarseGrid((4,), (0.0,), (np.pi,)))


def test_born_cells_symmetric():
    g = SpectralState.eigenstate(BasisSpec(BOX, 1), (1,))
    f = coarse_born(g, 0.0, CoarseGrid((2,), (0.0,), (np.pi,)))
    np.testing.assert_allclose(f.masses, [0.5, 0.5], atol=1e-14)


def test_born_cells_sum_to_one(two_mode):
    f = coarse_born(two_mode, 0.9, CoarseGrid((32,), (0.0,), (np.pi,)))
    assert f.total() == pytest.approx(1.0, abs=1e-9)


# ---------------------------------------------------------------- H-function


def test_h_two_cells():
    grid = CoarseGrid((2,), (0.0,), (1.0,))
    h = h_bar(DensityField(grid, np.array([1.6, 0.4])), DensityField(grid, np.array([1.0, 1.0])))
    assert h == pytest.approx(TWO_CELL_H, abs=1e-12)


def test_h_zero_on_equality():
    grid = CoarseGrid((3,), (0.0,), (3.0,))
    f = DensityField(grid, np.array([0.2, 0.5, 0.3]))
    assert h_bar(f, f) == 0.0


def test_h_infinite():
    grid = CoarseGrid((2,), (0.0,), (1.0,))
    with pytest.raises(InfiniteHError):
        h_bar(DensityField(grid, np.array([1.0, 1.0])), DensityField(grid, np.array([2.0, 0.0])))


@settings(max_examples=200, deadline=None)
@given(
    st.lists(st.floats(0.0, 10.0), min_size=2, max_size=12).flatmap(
        lambda r: st.tuples(st.just(r), st.lists(st.floats(1e-3, 10.0), min_size=len(r), max_size=len(r)))
    )
)
def test_h_gibbs_inequality(pair):
    r, b = (np.array(v) for v in pair)
    if r.sum() == 0:
        r[0] = 1.0
    grid = CoarseGrid((r.size,), (0.0,), (1.0,))
    vol = grid.cell_volume
    rho = DensityField(grid, r / (r.sum() * vol))
    born = DensityField(grid, b / (b.sum() * vol))
    h = h_bar(rho, born)
    assert h >= -1e-12
    if np.allclose(rho.values, born.values, rtol=1e-12, atol=0):
        assert abs(h) < 1e-12
    else:
        assert h > 0


# ---------------------------------------------------------------- fits


def test_exact_exponential_fit():
    t = np.linspace(0, 5, 10)
    f = fit_exponential(HSeries(t, np.exp(-t / 2), np.zeros(10)))
    assert f.tau == pytest.approx(2.0, abs=1e-9)
    assert f.r2 == pytest.approx(1.0)


def test_constant_series_rejected():
    t = np.linspace(0, 5, 10)
    f = fit_exponential(HSeries(t, np.full(10, 0.3), np.zeros(10)))
    assert f.rejected and np.isinf(f.tau)


def test_fit_needs_positive_values():
    t = np.linspace(0, 5, 6)
    with pytest.raises(FitDomainError):
        fit_exponential(HSeries(t, np.array([1, 0.5, 0.2, 0.0, 0.1, 0.05]), np.zeros(6)))


# ---------------------------------------------------------------- relaxation


def test_eigenmode_nonequilibrium_constant():
    s = SpectralState.eigenstate(BasisSpec(BOX, 2), (1, 1))
    spec = UniformDensity([[0, np.pi / 2], [0, np.pi]])
    grid = CoarseGrid.for_state(s, 8)
    ser = relaxation_series(s, spec, 4000, 3, grid, np.linspace(0, 6, 4), n_boot=8)
    np.testing.assert_allclose(ser.values, ser.values[0], rtol=1e-12)


def test_short_equilibrium_run_below_floor(two_mode):
    grid = CoarseGrid.for_state(two_mode, 16)
    ser = relaxation_series(two_mode, BornDensity(two_mode), 20_000, 2, grid, np.linspace(0, 4, 5), n_boot=8)
    assert np.all(ser.values < ser.floor)


def test_off_grid_edge_rejected(two_mode):
    grid = CoarseGrid.for_state(two_mode, 16)
    with pytest.raises(ValueError):
        relaxation_series(two_mode, UniformDensity([[0, 1.0]]), 100, 0, grid, [0, 1])


# ---------------------------------------------------------------- conservation diagnostics


def test_rates_vanish_for_eigenmode():
    s = SpectralState.eigenstate(BasisSpec(BOX, 1), (3,))
    r = equilibrium_rate_check(s, 0.4)
    assert r.energy_rate == 0.0


def test_two_mode_rates(two_mode):
    r = equilibrium_rate_check(two_mode, 0.7)
    assert abs(r.energy_rate) < 1e-6
    # on the box <grad Q> is balanced by the walls, not zero
    np.testing.assert_allclose(r.momentum_rate, -r.wall_force, atol=1e-8)


def test_rate_order_refinement(two_mode):
    a = equilibrium_rate_check(two_mode, 0.7)
    b = equilibrium_rate_check(two_mode, 0.7, order=2 * a.order)
    assert abs(a.energy_rate - b.energy_rate) < 1e-8
    np.testing.assert_allclose(a.momentum_rate, b.momentum_rate, atol=1e-8)


def test_noneq_rate_equilibrium_samples(two_mode):
    q = sample(BornDensity(two_mode, t=0.7), 20_000, 6)
    est = noneq_rate_check(two_mode, q, 0.7)
    assert abs(est.value) < 3 * est.sigma


def test_noneq_rate_eigenmode_zero():
    s = SpectralState.eigenstate(BasisSpec(BOX, 1), (2,))
    q = sample(UniformDensity([[0, np.pi]]), 500, 1)
    assert noneq_rate_check(s, q, 0.3).value == 0.0


def test_noneq_rate_nonzero_and_stable(two_mode):
    # psi is real at t = 0, where dQ/dt vanishes identically; probe at t = 0.7
    g = BornDensity(SpectralState.eigenstate(BasisSpec(BOX, 1), (1,)))
    a = noneq_rate_check(two_mode, sample(g, 20_000, 1), 0.7)
    b = noneq_rate_check(two_mode, sample(g, 40_000, 2), 0.7)
    assert abs(a.value) > 5 * a.sigma
    assert abs(a.value - b.value) < 4 * np.hypot(a.sigma, b.sigma)
