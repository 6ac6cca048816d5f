"""A single field mode on expanding space as a two-dimensional oscillator.

The real and imaginary parts ``(q1, q2)`` of one Fourier mode of a free
scalar field behave as a 2D oscillator of mass ``a^3`` and frequency
``k / a`` in cosmic time, so per dimension

    H(t) = p^2 / (2 a^3) + a k^2 q^2 / 2.

The wave function is a coefficient matrix ``C_ij`` over products of
Hermite functions of a fixed reference oscillator with ``m w = mw_ref``
(by default ``a(t0)^2 k``, the instantaneous value at the start, which is
the unit basis when ``a0 = k = 1``). Both dimensions share the same
Hamiltonian, so ``C(t) = U(t) C(t0) U(t)^T`` with ``U`` the one-dimensional
propagator; only the columns of ``U`` on the occupied levels are integrated.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import solve_ivp

from ._kernels import mode_plane
from .ensemble import (
    ENSEMBLE_CONTROL,
    TAG_BOOT,
    CoarseGrid,
    EnsembleRun,
    HSeries,
    check_smooth,
    coarse_born,
    evolve,
    h_series_from_run,
    sample,
    stream,
)
from .errors import InvalidRunError, NodeError, TruncationError
from .spectral import NODE_FACTOR, Domain, _as_points, _as_times, hermite_functions

STATIC, DE_SITTER, POWER_LAW = "static", "de-sitter", "power-law"
DEFAULT_LEVELS = 24
LEAK_LIMIT = 1e-6
TAIL_LEVELS = 2
PROPAGATOR_TOL = dict(rtol=1e-11, atol=1e-13)
INTERP_TOL = 1e-9


@dataclass(frozen=True)
class Expansion:
    """Scale factor ``a(t)``: static ``a0``, de Sitter ``a0 exp(H t)`` or power law ``a0 (t / t0)^p``."""

    model: str = STATIC
    hubble: float = 0.0
    t0: float = 1.0
    power: float = 0.5
    a0: float = 1.0

    def __post_init__(self):
        if self.model not in (STATIC, DE_SITTER, POWER_LAW):
            raise ValueError(f"unknown expansion model {self.model!r}")
        if self.a0 <= 0:
            raise ValueError("a0 must be positive")
        if self.model == POWER_LAW and self.t0 <= 0:
            raise ValueError("power-law t0 must be positive")

    def a(self, t):
        t = np.asarray(t, dtype=float)
        if self.model == STATIC:
            return np.full_like(t, self.a0)
        if self.model == DE_SITTER:
            return self.a0 * np.exp(self.hubble * t)
        if np.any(t <= 0):
            raise ValueError("power-law expansion needs t > 0")
        return self.a0 * (t / self.t0) ** self.power

    def hubble_rate(self, t):
        t = np.asarray(t, dtype=float)
        if self.model == STATIC:
            return np.zeros_like(t)
        if self.model == DE_SITTER:
            return np.full_like(t, self.hubble)
        return self.power / t

    def hubble_ratio(self, k, t):
        """``k / (a H)``: wavelength inside (> 1) or outside (< 1) the Hubble radius."""
        return k / (self.a(t) * self.hubble_rate(t))


def level_matrices(n):
    """``q^2`` and ``p^2`` of the unit oscillator in its first ``n`` levels (band matrices)."""
    i = np.arange(n)
    Q = np.diag(i + 0.5)
    off = np.sqrt((i[:-2] + 1.0) * (i[:-2] + 2.0)) / 2
    Q[i[:-2], i[:-2] + 2] = off
    Q[i[:-2] + 2, i[:-2]] = off
    P = np.diag(i + 0.5)
    P[i[:-2], i[:-2] + 2] = -off
    P[i[:-2] + 2, i[:-2]] = -off
    return Q, P


def mode_hamiltonian(k, a, n, mw_ref):
    """One-dimensional ``H = p^2/(2 a^3) + a k^2 q^2/2`` in the reference basis."""
    Q, P = level_matrices(n)
    return P * (mw_ref / (2 * a**3)) + Q * (a * k**2 / (2 * mw_ref))


@dataclass(frozen=True, eq=False)
class ModeOscillator:
    """Coefficients ``C`` (n, n) of one mode at time ``t`` over the reference basis."""

    k: float
    coeffs: np.ndarray
    t: float = 0.0
    mw_ref: float | None = None

    def __post_init__(self):
        C = np.array(self.coeffs, dtype=complex)
        if C.ndim != 2 or C.shape[0] != C.shape[1]:
            raise ValueError("coefficients must be a square matrix")
        if self.k <= 0:
            raise ValueError("k must be positive")
        nrm = np.sum(np.abs(C) ** 2)
        if abs(nrm - 1) > 1e-8:
            raise ValueError(f"coefficients not normalized (sum |c|^2 = {nrm!r})")
        C.setflags(write=False)
        object.__setattr__(self, "coeffs", C)
        if self.mw_ref is None:
            object.__setattr__(self, "mw_ref", float(self.k))

    @classmethod
    def superposition(cls, k, levels, seed=0, n=DEFAULT_LEVELS, t=0.0, mw_ref=None, expansion=None):
        """Equal-weight superposition of ``levels`` [(i, j), ...] with seeded random phases.

        ``mw_ref`` defaults to ``a(t)^2 k`` for the given expansion.
        """
        rng = np.random.default_rng(seed)
        C = np.zeros((n, n), dtype=complex)
        ph = rng.uniform(0, 2 * np.pi, len(levels))
        for (i, j), p in zip(levels, ph):
            C[i, j] = np.exp(1j * p)
        C /= np.sqrt(len(levels))
        if mw_ref is None:
            a = 1.0 if expansion is None else float(expansion.a(t))
            mw_ref = a * a * k
        return cls(float(k), C, float(t), float(mw_ref))

    @property
    def levels(self):
        return self.coeffs.shape[0]

    @property
    def norm(self):
        return float(np.sum(np.abs(self.coeffs) ** 2))

    @property
    def leakage(self):
        return tail_weight(self.coeffs)

    def hamiltonian(self, expansion, t=None):
        t = self.t if t is None else t
        return mode_hamiltonian(self.k, float(expansion.a(t)), self.levels, self.mw_ref)

    def energy(self, expansion):
        """``<H>`` of the two-dimensional mode (complex; the imaginary part is round-off)."""
        H = self.hamiltonian(expansion)
        C = self.coeffs
        return complex(np.vdot(C, H @ C + C @ H.T))

    def occupations(self):
        return np.abs(self.coeffs) ** 2

    def instantaneous_occupations(self, expansion, order=400):
        """``|c_mn|^2`` in the instantaneous eigenbasis (``m w = a^2 k``) at the mode's time."""
        n = self.levels
        mw_inst = float(expansion.a(self.t)) ** 2 * self.k
        r = (np.sqrt(2 * n + 1) + 10) / np.sqrt(min(mw_inst, self.mw_ref))
        x, w = np.polynomial.legendre.leggauss(order)
        x, w = r * x, r * w
        hi, _, _ = hermite_functions(np.arange(n), x, mw_inst)
        hr, _, _ = hermite_functions(np.arange(n), x, self.mw_ref)
        S = (hi * w) @ hr.T
        return np.abs(S @ self.coeffs @ S.T) ** 2


def tail_weight(C, tail=TAIL_LEVELS):
    """Probability in the top ``tail`` levels of either dimension."""
    n = C.shape[0]
    p = np.abs(C) ** 2
    keep = p[: n - tail, : n - tail].sum()
    return float(p.sum() - keep)


def _leak_error(leak, n):
    return TruncationError(f"truncated-tail weight {leak:.3e} exceeds {LEAK_LIMIT:.0e}; try {2 * n} levels", required=2 * n)


def step_mode(mode: ModeOscillator, expansion: Expansion, dt: float, checks: int = 32) -> ModeOscillator:
    """Advance the coefficients by ``dt`` with an adaptive 8th-order Runge-Kutta.

    ``i dC/dt = H C + C H^T``. The tail weight is checked at ``checks``
    equally spaced times and must stay below 1e-6.
    """
    n = mode.levels
    t0, t1 = mode.t, mode.t + dt
    Q, P = level_matrices(n)

    def rhs(t, y):
        a = float(expansion.a(t))
        H = P * (mode.mw_ref / (2 * a**3)) + Q * (a * mode.k**2 / (2 * mode.mw_ref))
        C = y.reshape(n, n)
        return (-1j * (H @ C + C @ H)).ravel()

    sol = solve_ivp(rhs, (t0, t1), mode.coeffs.ravel(), method="DOP853", t_eval=np.linspace(t0, t1, checks + 1), **PROPAGATOR_TOL)
    if not sol.success:
        raise RuntimeError(sol.message)
    leak = max(tail_weight(sol.y[:, j].reshape(n, n)) for j in range(sol.y.shape[1]))
    if leak > LEAK_LIMIT:
        raise _leak_error(leak, n)
    return ModeOscillator(mode.k, sol.y[:, -1].reshape(n, n), float(t1), mode.mw_ref)


class ModeHistory:
    """Mode wave function on ``[t_start, t_end]`` as a trajectory field.

    The occupied columns of the 1D propagator are stored on a uniform time
    grid together with their derivatives; values in between come from
    cubic-Hermite interpolation whose error is checked against the
    integrator's own dense output at every midpoint.
    """

    dimension = 2

    def __init__(self, mode: ModeOscillator, expansion: Expansion, t_end: float, interp_tol=INTERP_TOL, max_nodes=2**18):
        if t_end <= mode.t:
            raise ValueError("t_end must exceed the mode time")
        self.mode = mode
        self.expansion = expansion
        self.k = mode.k
        self.mw_ref = mode.mw_ref
        self.t0 = self.t_start = mode.t
        self.t_end = float(t_end)
        n = mode.levels
        C = np.asarray(mode.coeffs)
        occ = np.flatnonzero((np.abs(C).sum(axis=0) + np.abs(C).sum(axis=1)) > 0)
        self.support = occ
        self.C0 = np.ascontiguousarray(C[np.ix_(occ, occ)])
        s = occ.size
        Q, P = level_matrices(n)
        self._Q, self._P = Q, P

        def hmat(t):
            a = float(expansion.a(t))
            return P * (self.mw_ref / (2 * a**3)) + Q * (a * self.k**2 / (2 * self.mw_ref))

        def rhs(t, y):
            return (-1j * (hmat(t) @ y.reshape(n, s))).ravel()

        W0 = np.eye(n, dtype=complex)[:, occ]
        sol = solve_ivp(rhs, (self.t0, self.t_end), W0.ravel(), method="DOP853", dense_output=True, **PROPAGATOR_TOL)
        if not sol.success:
            raise RuntimeError(sol.message)
        span = self.t_end - self.t0
        G = 65
        while True:
            tg = np.linspace(self.t0, self.t_end, G)
            Wg = sol.sol(tg).T.reshape(G, n, s)
            Dg = np.stack([(-1j * hmat(t) @ Wg[g]) for g, t in enumerate(tg)])
            dt = span / (G - 1)
            mid = tg[:-1] + 0.5 * dt
            exact = sol.sol(mid).T.reshape(G - 1, n, s)
            approx = 0.5 * (Wg[:-1] + Wg[1:]) + dt / 8 * (Dg[:-1] - Dg[1:])
            err = float(np.max(np.abs(exact - approx)))
            if err <= interp_tol or G >= max_nodes:
                break
            G = 2 * G - 1
        self.interp_error = err
        self.grid = tg
        self.dt = dt
        self.W = np.ascontiguousarray(Wg)
        self.D = np.ascontiguousarray(Dg)
        Cs = np.einsum("gbi,ij,gcj->gbc", Wg, self.C0, Wg)
        self.leakage = max(tail_weight(c) for c in Cs)
        self.norm_drift = float(np.max(np.abs(np.sum(np.abs(Cs) ** 2, axis=(1, 2)) - mode.norm)))
        if self.leakage > LEAK_LIMIT:
            raise _leak_error(self.leakage, n)
        nmax = int(occ.max())
        r = (np.sqrt(2 * nmax + 1) + 7.0) / np.sqrt(self.mw_ref)
        self.sampling_bounds = [[-r, r], [-r, r]]
        self.domain = Domain(("line", "line"), (-np.inf, -np.inf), (np.inf, np.inf))
        self.eps_node = NODE_FACTOR * self.mw_ref / np.pi

    def coefficients_at(self, t) -> np.ndarray:
        """Full coefficient matrix at ``t`` from the interpolated propagator columns."""
        x = (t - self.t0) / self.dt
        g = int(np.clip(np.floor(x), 0, len(self.grid) - 2))
        u = x - g
        h00, h10 = 2 * u**3 - 3 * u**2 + 1, (u**3 - 2 * u**2 + u) * self.dt
        h01, h11 = -2 * u**3 + 3 * u**2, (u**3 - u**2) * self.dt
        W = h00 * self.W[g] + h10 * self.D[g] + h01 * self.W[g + 1] + h11 * self.D[g + 1]
        return W @ self.C0 @ W.T

    def mode_at(self, t) -> ModeOscillator:
        C = self.coefficients_at(t)
        return ModeOscillator(self.k, C / np.sqrt(np.sum(np.abs(C) ** 2)), float(t), self.mw_ref)

    def _check_times(self, t):
        span = self.t_end - self.t0
        if np.any(t < self.t0 - 1e-12 * span) or np.any(t > self.t_end + 1e-12 * span):
            raise ValueError(f"time outside the propagated window [{self.t0}, {self.t_end}]")

    def _eval(self, q, t):
        k = np.sqrt(self.mw_ref)
        amp = (self.mw_ref / np.pi) ** 0.25
        return mode_plane(np.ascontiguousarray(q, float), np.ascontiguousarray(t, float), self.t0, self.dt, self.W, self.D, self.C0, k, amp)

    def evaluate(self, q, t):
        q, single = _as_points(q, 2)
        t = _as_times(t, len(q))
        self._check_times(t)
        psi, grad = self._eval(q, t)
        return (psi[0], grad[0]) if single else (psi, grad)

    def density(self, q, t):
        q, _ = _as_points(q, 2)
        psi, _ = self._eval(q, _as_times(t, len(q)))
        return np.abs(psi) ** 2

    def velocity_field(self, q, t):
        psi, grad = self._eval(q, t)
        rho = np.abs(psi) ** 2
        safe = np.where(rho > 0, psi, 1.0)
        m = self.expansion.a(t) ** 3
        v = np.imag(grad / safe[:, None]) / m[:, None]
        v[rho <= 0] = 0.0
        return v, rho

    def second_moment(self, t):
        """Born ``<q1^2 + q2^2>`` at ``t`` from the coefficients."""
        C = self.coefficients_at(t)
        C = C / np.sqrt(np.sum(np.abs(C) ** 2))
        q2 = self._Q / self.mw_ref
        return float(np.real(np.vdot(C, q2 @ C) + np.vdot(C, C @ q2.T)))


def propagate(mode: ModeOscillator, expansion: Expansion, t_end: float, **kw) -> ModeHistory:
    return ModeHistory(mode, expansion, t_end, **kw)


def mode_guidance(history: ModeHistory, q, t):
    """Velocity ``Im(grad psi / psi) / a^3`` at (q1, q2); raises at nodes."""
    q, single = _as_points(q, 2)
    t = _as_times(t, len(q))
    history._check_times(t)
    v, rho = history.velocity_field(q, t)
    if np.any(rho <= history.eps_node):
        raise NodeError(f"density {rho.min():.3e} at or below node threshold {history.eps_node:.3e}")
    return v[0] if single else v


def mode_grid(history: ModeHistory, cells=16, half_width=None) -> CoarseGrid:
    """Square coarse grid centred on the origin; default half-width is 4.5 reference widths."""
    r = 4.5 / np.sqrt(history.mw_ref) if half_width is None else float(half_width)
    return CoarseGrid((cells, cells), (-r, -r), (r, r), ("line", "line"))


def mode_relaxation(
    history: ModeHistory,
    spec,
    N: int,
    seed: int,
    grid: CoarseGrid,
    times,
    ctrl=None,
    workers: int = 1,
    n_boot: int = 64,
    return_run: bool = False,
):
    """H-bar series of a trajectory ensemble in the (q1, q2) plane."""
    check_smooth(spec, grid)
    times = np.asarray(times, dtype=float)
    history._check_times(times)
    q0 = sample(spec, N, seed)
    run = evolve(history, q0, times, ctrl or ENSEMBLE_CONTROL, workers, seed)
    if not run.valid:
        raise InvalidRunError(f"{run.trapped_count} of {run.N} trajectories trapped near nodes")
    series = h_series_from_run(run, lambda t: coarse_born(history, t, grid).masses, grid, n_boot, seed)
    return (series, run) if return_run else series


@dataclass(frozen=True)
class PowerRatio:
    """``xi = <q1^2 + q2^2>_ensemble / <q1^2 + q2^2>_Born`` with bootstrap sigma."""

    xi: float
    sigma: float
    ensemble_moment: float
    born_moment: float


def power_ratio(run: EnsembleRun, history: ModeHistory, t=None, n_boot: int = 200, seed: int = 0) -> PowerRatio:
    """Power deficit (xi < 1) or excess of an ensemble relative to the Born rule at ``t``."""
    t = run.times[-1] if t is None else t
    pos = run.at(t)
    r2 = np.sum(pos**2, axis=1)
    born = history.second_moment(t)
    ens = float(r2.mean())
    rng = stream(seed, TAG_BOOT, 1)
    n = r2.size
    boots = np.array([r2[rng.integers(0, n, n)].mean() for _ in range(n_boot)])
    return PowerRatio(ens / born, float(boots.std(ddof=1)) / born, ens, born)


@dataclass
class ModeRelaxation:
    """H-bar series together with xi and the propagator leakage at each time."""

    series: HSeries
    xi: np.ndarray
    xi_sigma: np.ndarray
    leakage: float

    def rows(self):
        s = self.series
        return [(t, h, sg, x, xs, self.leakage) for t, h, sg, x, xs in zip(s.times, s.values, s.sigma, self.xi, self.xi_sigma)]


def relaxation_with_power(history, spec, N, seed, grid, times, ctrl=None, workers=1, n_boot=64):
    """:func:`mode_relaxation` plus the power ratio at every time."""
    series, run = mode_relaxation(history, spec, N, seed, grid, times, ctrl, workers, n_boot, return_run=True)
    pr = [power_ratio(run, history, t, n_boot=n_boot, seed=seed) for t in run.times]
    return ModeRelaxation(series, np.array([p.xi for p in pr]), np.array([p.sigma for p in pr]), history.leakage), run
