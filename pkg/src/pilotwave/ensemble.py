"""Ensembles of trajectories: sampling, evolution, coarse-graining and the H-function.

Random numbers come from one Philox stream per (seed, purpose, trajectory),
and trajectory batches are split into fixed chunks whose results do not
depend on their neighbours, so every output is independent of the number
of worker processes.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import EnvelopeError, FitDomainError, InfiniteHError, InvalidRunError, QuadratureError
from .integrate import StepControl, bohm_batch, debroglie_batch
from .spectral import OSCILLATOR, RING, SpectralState, quadrature

# stream purposes
TAG_SAMPLE = 1
TAG_POINTER = 2
TAG_BOOT = 3
TAG_MOMENTUM = 4

ENVELOPE_MARGIN = 1.05
PROPOSALS = 16
TRAPPED_LIMIT = 1e-3
NOISE_C = 0.6
FIT_FLOOR_FACTOR = 5.0
H_FLOOR = -1e-12

# ensemble default: coarse-grained statistics do not need single-trajectory accuracy
ENSEMBLE_CONTROL = StepControl(rtol=1e-6, atol=1e-8)


def stream(seed, tag, index):
    """Independent counter-based generator for one (seed, purpose, index)."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed) % 2**64, int(tag), int(index)])))


# ---------------------------------------------------------------- densities


class DensitySpec:
    """Normalized probability density on a finite sampling box.

    Subclasses define ``dimension``, ``bounds`` (d, 2), ``density(q)`` and
    ``edges()``: per-axis positions where the density is discontinuous.
    All families here are smooth apart from those edges.
    """

    kind = "abstract"
    dimension: int
    bounds: np.ndarray

    def density(self, q):
        raise NotImplementedError

    def edges(self):
        return [[] for _ in range(self.dimension)]

    def grid_max(self, per_axis=None):
        """Maximum of the density over a regular grid on the sampling box."""
        per_axis = per_axis or (401 if self.dimension == 1 else 121)
        axes = [np.linspace(lo, hi, per_axis) for lo, hi in self.bounds]
        mesh = np.meshgrid(*axes, indexing="ij")
        pts = np.column_stack([m.ravel() for m in mesh])
        return float(np.max(self.density(pts)))


def _state_bounds(state):
    own = getattr(state, "sampling_bounds", None)
    if own is not None:
        return np.array(own, dtype=float)
    b = state.basis
    if b.kind == OSCILLATOR:
        nmax = int(np.abs(state.modes).max())
        r = b.scale * (np.sqrt(2 * nmax + 1) + 7.0)
        return np.array([[-r, r]] * b.dimension)
    return np.array([[0.0, b.length]] * b.dimension)


@dataclass(eq=False)
class BornDensity(DensitySpec):
    """``|psi(q, t)|^2`` of a state (time defaults to the state's reference time).

    Oscillator densities are sampled on a box of half-width
    ``scale * (sqrt(2 n_max + 1) + 7)``, outside which the mass is below 1e-20.
    """

    state: object
    t: float | None = None
    kind = "born"

    def __post_init__(self):
        self.dimension = self.state.dimension
        self.bounds = _state_bounds(self.state)
        if self.t is None:
            self.t = self.state.t0

    def density(self, q):
        return self.state.density(np.atleast_2d(q), self.t)


@dataclass(eq=False)
class MixtureDensity(DensitySpec):
    """Weighted sum of Born densities; weights are normalized."""

    components: list
    t: float | None = None
    kind = "mixture"

    def __post_init__(self):
        w = np.array([c[0] for c in self.components], dtype=float)
        if np.any(w < 0) or w.sum() <= 0:
            raise ValueError("mixture weights must be nonnegative and not all zero")
        self.weights = w / w.sum()
        self.states = [c[1] for c in self.components]
        self.dimension = self.states[0].dimension
        self.bounds = np.max([_state_bounds(s) for s in self.states], axis=0)
        self.bounds[:, 0] = np.min([_state_bounds(s)[:, 0] for s in self.states], axis=0)

    def density(self, q):
        q = np.atleast_2d(q)
        out = np.zeros(q.shape[0])
        for w, s in zip(self.weights, self.states):
            out += w * s.density(q, s.t0 if self.t is None else self.t)
        return out


@dataclass(eq=False)
class UniformDensity(DensitySpec):
    """Uniform on an axis-aligned box ``[(lo, hi), ...]``."""

    box: list
    kind = "uniform"

    def __post_init__(self):
        self.bounds = np.array(self.box, dtype=float).reshape(-1, 2)
        if np.any(self.bounds[:, 1] <= self.bounds[:, 0]):
            raise ValueError("uniform bounds need lo < hi")
        self.dimension = self.bounds.shape[0]
        self.volume = float(np.prod(self.bounds[:, 1] - self.bounds[:, 0]))

    def density(self, q):
        q = np.atleast_2d(q)
        inside = np.all((q >= self.bounds[:, 0]) & (q <= self.bounds[:, 1]), axis=1)
        return np.where(inside, 1.0 / self.volume, 0.0)

    def edges(self):
        return [list(b) for b in self.bounds]


@dataclass(eq=False)
class GaussianDensity(DensitySpec):
    """1D Gaussian of standard deviation ``width`` truncated at ``truncate`` widths."""

    width: float
    center: float = 0.0
    truncate: float = 6.0
    kind = "gaussian"

    def __post_init__(self):
        if not (self.width > 0 and self.truncate > 0):
            raise ValueError("width and truncate must be positive")
        from scipy.special import erf

        self.dimension = 1
        self.bounds = np.array([[self.center - self.truncate * self.width, self.center + self.truncate * self.width]])
        self._norm = erf(self.truncate / np.sqrt(2))

    def density(self, q):
        z = (np.atleast_2d(q)[:, 0] - self.center) / self.width
        inside = np.abs(z) <= self.truncate
        return np.where(inside, np.exp(-0.5 * z**2) / (np.sqrt(2 * np.pi) * self.width * self._norm), 0.0)

    def edges(self):
        return [list(self.bounds[0])]


@dataclass(eq=False)
class ProductDensity(DensitySpec):
    """Independent product of lower-dimensional densities, axes concatenated."""

    parts: list
    kind = "product"

    def __post_init__(self):
        self.dimension = sum(p.dimension for p in self.parts)
        self.bounds = np.vstack([p.bounds for p in self.parts])

    def density(self, q):
        q = np.atleast_2d(q)
        out = np.ones(q.shape[0])
        ax = 0
        for p in self.parts:
            out *= p.density(q[:, ax : ax + p.dimension])
            ax += p.dimension
        return out

    def edges(self):
        return [e for p in self.parts for e in p.edges()]


@dataclass(eq=False)
class RestrictedDensity(DensitySpec):
    """``base`` restricted to an axis-aligned box and renormalized (Gauss-Legendre mass)."""

    base: DensitySpec
    box: list
    order: int = 64
    kind = "restricted"

    def __post_init__(self):
        self.bounds = np.array(self.box, dtype=float).reshape(-1, 2)
        self.dimension = self.base.dimension
        x, w = np.polynomial.legendre.leggauss(self.order)
        axes = [(0.5 * (hi - lo) * (x + 1) + lo, 0.5 * (hi - lo) * w) for lo, hi in self.bounds]
        if self.dimension == 1:
            pts, wts = axes[0][0][:, None], axes[0][1]
        else:
            X, Y = np.meshgrid(axes[0][0], axes[1][0], indexing="ij")
            pts = np.column_stack([X.ravel(), Y.ravel()])
            wts = np.outer(axes[0][1], axes[1][1]).ravel()
        self.mass = float(wts @ self.base.density(pts))
        if self.mass <= 0:
            raise ValueError("restriction box carries no probability")

    def density(self, q):
        q = np.atleast_2d(q)
        inside = np.all((q >= self.bounds[:, 0]) & (q <= self.bounds[:, 1]), axis=1)
        return np.where(inside, self.base.density(q) / self.mass, 0.0)

    def edges(self):
        return [list(b) for b in self.bounds]


def sample(spec: DensitySpec, N: int, seed: int, tag: int = TAG_SAMPLE, envelope=None):
    """Rejection-sample ``N`` points (N, d) from ``spec``.

    Trajectory ``i`` draws proposals only from its own stream, so the first
    ``M`` samples do not depend on ``N``. The uniform envelope is the
    grid-estimated maximum times 1.05; a proposal whose density exceeds it
    raises :class:`EnvelopeError`.
    """
    if N < 1:
        raise ValueError("N must be at least 1")
    d = spec.dimension
    lo, hi = spec.bounds[:, 0], spec.bounds[:, 1]
    env = ENVELOPE_MARGIN * spec.grid_max() if envelope is None else float(envelope)
    out = np.empty((N, d))
    pending = np.arange(N)
    gens = {}
    while pending.size:
        draws = np.empty((pending.size, PROPOSALS, d + 1))
        for j, i in enumerate(pending):
            g = gens.get(i)
            if g is None:
                g = gens[i] = stream(seed, tag, i)
            draws[j] = g.random((PROPOSALS, d + 1))
        props = lo + (hi - lo) * draws[:, :, :d]
        rho = spec.density(props.reshape(-1, d)).reshape(pending.size, PROPOSALS)
        if np.any(rho > env):
            k = np.unravel_index(np.argmax(rho), rho.shape)
            raise EnvelopeError(
                f"density {rho[k]:.6g} at {props[k].tolist()} exceeds envelope {env:.6g}; "
                "increase the envelope or the grid resolution"
            )
        accept = draws[:, :, d] * env < rho
        hit = accept.any(axis=1)
        first = np.argmax(accept, axis=1)
        done = pending[hit]
        out[done] = props[hit, first[hit]]
        for i in done:
            gens.pop(i, None)
        pending = pending[~hit]
    return out


# ---------------------------------------------------------------- evolution


def _chunks(K, workers):
    return [c for c in np.array_split(np.arange(K), max(1, workers)) if c.size]


def map_chunks(func, arrays, workers=1):
    """Apply ``func(*chunk_arrays)`` to contiguous chunks and concatenate results.

    Every result row depends only on its own input row, so the output is
    the same for any worker count.
    """
    K = len(arrays[0])
    chunks = _chunks(K, workers)
    if workers <= 1 or len(chunks) == 1:
        return [func(*arrays)]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futs = [pool.submit(func, *[a[c] for a in arrays]) for c in chunks]
        return [f.result() for f in futs]


def _debroglie_chunk(field, times, ctrl, q0):
    r = debroglie_batch(field, q0, times, ctrl)
    return r.y, r.trapped


def _bohm_chunk(state, times, ctrl, q0, p0):
    r = bohm_batch(state, q0, p0, times, ctrl)
    return r.y, r.trapped, r.last_t, r.last_y


@dataclass
class EnsembleRun:
    """Trajectory positions on a time grid. Trapped rows are NaN after trapping."""

    seed: int
    times: np.ndarray
    positions: np.ndarray
    trapped: np.ndarray
    momenta: np.ndarray | None = None
    # time and full state at which each trajectory stopped (Bohm runs only)
    last_time: np.ndarray | None = None
    last_state: np.ndarray | None = None

    @property
    def N(self):
        return self.positions.shape[0]

    @property
    def initial(self):
        return self.positions[:, 0]

    @property
    def trapped_count(self):
        return int(self.trapped.sum())

    @property
    def trapped_fraction(self):
        return self.trapped_count / self.N

    @property
    def valid(self):
        return self.trapped_fraction < TRAPPED_LIMIT

    def time_index(self, t):
        hits = np.flatnonzero(np.isclose(self.times, t, rtol=0, atol=1e-12 * max(1.0, abs(t))))
        if hits.size == 0:
            raise ValueError(f"t={t} is not on the run's time grid")
        return int(hits[0])

    def at(self, t=None, index=None):
        """Positions of untrapped trajectories at time ``t`` (or grid ``index``)."""
        j = self.time_index(t) if index is None else index
        return self.positions[~self.trapped, j]


def evolve(state, positions, times, ctrl: StepControl | None = None, workers: int = 1, seed: int = 0) -> EnsembleRun:
    """Integrate de Broglie trajectories from ``positions`` over the time grid."""
    ctrl = ctrl or ENSEMBLE_CONTROL
    positions = np.atleast_2d(np.asarray(positions, dtype=float))
    if not np.all(state.domain.contains(positions, slack=0.0)):
        raise ValueError("initial positions outside the domain")
    times = np.asarray(times, dtype=float)
    from functools import partial

    parts = map_chunks(partial(_debroglie_chunk, state, times, ctrl), [positions], workers)
    y = np.concatenate([p[0] for p in parts])
    trapped = np.concatenate([p[1] for p in parts])
    return EnsembleRun(seed, times, y, trapped)


def evolve_bohm(state, positions, momenta, times, ctrl: StepControl | None = None, workers: int = 1, seed: int = 0):
    """Bohm second-order ensemble; ``momenta`` holds the initial p per trajectory."""
    ctrl = ctrl or ENSEMBLE_CONTROL
    from functools import partial

    d = state.dimension
    parts = map_chunks(partial(_bohm_chunk, state, np.asarray(times, float), ctrl), [positions, momenta], workers)
    y, trapped, last_t, last_y = (np.concatenate([p[i] for p in parts]) for i in range(4))
    return EnsembleRun(
        seed, np.asarray(times, float), y[:, :, :d], trapped, momenta=y[:, :, d:], last_time=last_t, last_state=last_y
    )


def box_period(state):
    """Recurrence time of a box state: every energy is an integer multiple of pi^2/(2 m L^2)."""
    return 4 * state.mass * state.basis.length**2 / np.pi


@dataclass
class DeviationSeries:
    """Ensemble mean of ``|p - grad S|`` for a Bohm run.

    Trajectories that fell into a node keep the deviation they had when the
    integrator stopped them, which is a lower bound on their later value.
    """

    times: np.ndarray
    mean: np.ndarray
    median: np.ndarray
    sigma_boot: np.ndarray
    alive_frac: np.ndarray

    def non_decreasing(self, n_sigma=3.0):
        """Every step down is within ``n_sigma`` bootstrap sigma of the previous value."""
        drops = self.mean[:-1] - self.mean[1:]
        sig = np.hypot(self.sigma_boot[:-1], self.sigma_boot[1:])
        return bool(np.all(drops <= n_sigma * sig + 1e-12 * np.abs(self.mean[:-1])))

    def rows(self):
        return list(zip(self.times, self.mean, self.median, self.sigma_boot, self.alive_frac))


def _momentum_gap(state, q, p, t):
    from .integrate import phase_gradient

    return np.linalg.norm(p - phase_gradient(state, q, t), axis=1)


def deviation_series(state, run: EnsembleRun, n_boot: int = 64, boot_seed: int = 0) -> DeviationSeries:
    N, T = run.N, run.times.size
    dev = np.empty((N, T))
    stop_dev = np.full(N, np.nan)
    if run.trapped.any():
        d = state.dimension
        ly = run.last_state[run.trapped]
        stop_dev[run.trapped] = _momentum_gap(state, ly[:, :d], ly[:, d:], run.last_time[run.trapped])
    for j, t in enumerate(run.times):
        alive = ~np.isnan(run.positions[:, j, 0])
        dev[:, j] = stop_dev
        dev[alive, j] = _momentum_gap(state, run.positions[alive, j], run.momenta[alive, j], t)
    boot = np.empty((n_boot, T))
    for b in range(n_boot):
        idx = stream(boot_seed, TAG_BOOT, b).integers(0, N, N)
        boot[b] = dev[idx].mean(axis=0)
    sig = boot.std(axis=0, ddof=1) if n_boot > 1 else np.zeros(T)
    alive = (~np.isnan(run.positions[:, :, 0])).mean(axis=0)
    return DeviationSeries(run.times.copy(), dev.mean(axis=0), np.median(dev, axis=0), sig, alive)


def bohm_instability(
    state, spec: DensitySpec, N: int, seed: int, kick=0.1, periods=10.0, n_times=11,
    ctrl: StepControl | None = None, workers: int = 1, n_boot: int = 64,
):
    """Bohm ensemble started at ``p = grad S + kick`` (every component) and its momentum gap."""
    from .integrate import phase_gradient

    q0 = sample(spec, N, seed)
    p0 = phase_gradient(state, q0, 0.0) + kick
    times = np.linspace(0.0, periods * box_period(state), n_times)
    run = evolve_bohm(state, q0, p0, times, ctrl, workers, seed)
    return deviation_series(state, run, n_boot, seed), run


# ---------------------------------------------------------------- coarse-graining


@dataclass(frozen=True)
class CoarseGrid:
    """Regular cell partition of a rectangular region.

    Periodic axes wrap positions into the grid; ``line`` axes clip
    positions beyond the outer edges into the edge cells.
    """

    cells: tuple
    lo: tuple
    hi: tuple
    kinds: tuple = None

    def __post_init__(self):
        if any(c < 2 for c in self.cells):
            raise ValueError("need at least 2 cells per axis")
        if any(h <= l for l, h in zip(self.lo, self.hi)):
            raise ValueError("grid bounds need lo < hi")
        if self.kinds is None:
            object.__setattr__(self, "kinds", ("interval",) * len(self.cells))

    @classmethod
    def for_state(cls, state, cells, bounds=None):
        """Grid over the state's domain; oscillator (unbounded) axes need ``bounds``."""
        d = state.dimension
        cells = (cells,) * d if np.isscalar(cells) else tuple(cells)
        dom = state.domain
        if bounds is None:
            if any(k == "line" for k in dom.kinds):
                raise ValueError("unbounded axes need explicit grid bounds")
            lo, hi = dom.lo, dom.hi
        else:
            b = np.asarray(bounds, dtype=float).reshape(d, 2)
            lo, hi = tuple(b[:, 0]), tuple(b[:, 1])
        return cls(tuple(int(c) for c in cells), tuple(map(float, lo)), tuple(map(float, hi)), tuple(dom.kinds))

    @property
    def dimension(self):
        return len(self.cells)

    @property
    def n_cells(self):
        return int(np.prod(self.cells))

    @property
    def widths(self):
        return (np.array(self.hi) - np.array(self.lo)) / np.array(self.cells)

    @property
    def cell_volume(self):
        return float(np.prod(self.widths))

    def axis_edges(self, ax):
        return np.linspace(self.lo[ax], self.hi[ax], self.cells[ax] + 1)

    def index(self, q):
        """Flat cell index (row-major) of each point in q (P, d)."""
        q = np.atleast_2d(q)
        flat = np.zeros(q.shape[0], dtype=np.int64)
        for ax in range(self.dimension):
            x = q[:, ax]
            lo, hi, n = self.lo[ax], self.hi[ax], self.cells[ax]
            if self.kinds[ax] == "periodic":
                x = lo + np.mod(x - lo, hi - lo)
            i = np.floor((x - lo) / (hi - lo) * n).astype(np.int64)
            i = np.clip(i, 0, n - 1)
            flat = flat * n + i
        return flat

    def aligned(self, value, ax, tol=1e-9):
        e = self.axis_edges(ax)
        return bool(np.min(np.abs(e - value)) <= tol * (self.hi[ax] - self.lo[ax]))


@dataclass
class DensityField:
    """Per-cell density values (flat, row-major) on a grid."""

    grid: CoarseGrid
    values: np.ndarray

    @property
    def masses(self):
        return self.values * self.grid.cell_volume

    def total(self):
        return float(self.masses.sum())


def histogram(positions, grid: CoarseGrid, weights=None):
    """Cell masses of a point set (optionally weighted); sums to 1."""
    positions = np.atleast_2d(positions)
    if positions.shape[0] == 0:
        raise ValueError("empty ensemble")
    counts = np.bincount(grid.index(positions), weights=weights, minlength=grid.n_cells).astype(float)
    return counts / counts.sum()


def coarse_rho(run_or_positions, t=None, grid: CoarseGrid = None) -> DensityField:
    """Coarse-grained ensemble density: counts / (N * cell volume).

    Accepts an :class:`EnsembleRun` with a time on its grid, or a plain
    position array.
    """
    if isinstance(run_or_positions, EnsembleRun):
        pos = run_or_positions.at(t)
    else:
        pos = np.atleast_2d(np.asarray(run_or_positions, dtype=float))
    masses = histogram(pos, grid)
    return DensityField(grid, masses / grid.cell_volume)


def _cell_rule(grid, per_cell=4):
    """Gauss-Legendre points (per_cell per axis in every cell) and weights."""
    x, w = np.polynomial.legendre.leggauss(per_cell)
    axes = []
    for ax in range(grid.dimension):
        e = grid.axis_edges(ax)
        a, b = e[:-1, None], e[1:, None]
        pts = (0.5 * (b - a) * (x + 1) + a).ravel()
        wts = (0.5 * (b - a) * w).ravel()
        axes.append((pts, wts))
    if grid.dimension == 1:
        return axes[0][0][:, None], axes[0][1], np.repeat(np.arange(grid.cells[0]), per_cell)
    (px, wx), (py, wy) = axes
    X, Y = np.meshgrid(px, py, indexing="ij")
    W = np.outer(wx, wy)
    cx = np.repeat(np.arange(grid.cells[0]), per_cell)
    cy = np.repeat(np.arange(grid.cells[1]), per_cell)
    C = cx[:, None] * grid.cells[1] + cy[None, :]
    return np.column_stack([X.ravel(), Y.ravel()]), W.ravel(), C.ravel()


def coarse_born(state, t, grid: CoarseGrid, per_cell: int = 4) -> DensityField:
    """Cell averages of ``|psi(., t)|^2`` by per-cell Gauss-Legendre quadrature."""
    pts, w, cell = _cell_rule(grid, per_cell)
    rho = state.density(pts, t)
    masses = np.bincount(cell, weights=w * rho, minlength=grid.n_cells)
    return DensityField(grid, masses / grid.cell_volume)


def h_bar(rho: DensityField, born: DensityField, grid: CoarseGrid | None = None) -> float:
    """Coarse-grained H-function ``sum_cells vol * rho ln(rho / born)`` with 0 ln 0 = 0."""
    grid = grid or rho.grid
    r, b = np.asarray(rho.values, float), np.asarray(born.values, float)
    if r.shape != b.shape:
        raise ValueError("fields must share a grid")
    occ = r > 0
    if np.any(occ & (b <= 0)):
        raise InfiniteHError("ensemble occupies a cell where the Born density vanishes")
    return float(grid.cell_volume * np.sum(r[occ] * np.log(r[occ] / b[occ])))


def _h_from_masses(masses, born_masses):
    occ = masses > 0
    if np.any(occ & (born_masses <= 0)):
        raise InfiniteHError("ensemble occupies a cell where the Born density vanishes")
    # vol * rho ln(rho/born) = mass ln(mass/born_mass)
    return float(np.sum(masses[occ] * np.log(masses[occ] / born_masses[occ])))


def noise_floor(n_cells, N, c=NOISE_C):
    """Expected positive bias scale of a Monte-Carlo H estimate: ``c * cells / N``."""
    return c * n_cells / N


# ---------------------------------------------------------------- H series and fits


@dataclass
class FitResult:
    h0: float
    tau: float
    r2: float
    rejected: bool = False
    tau_ci: tuple = (np.nan, np.nan)
    n_points: int = 0


@dataclass
class HSeries:
    """H-bar on a time grid with bootstrap uncertainty.

    ``replicates`` (B, T) holds bootstrap H values with the same resampled
    trajectory weights at every time.
    """

    times: np.ndarray
    values: np.ndarray
    sigma: np.ndarray
    trapped_frac: float = 0.0
    floor: float = 0.0
    replicates: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    def max_rise_sigma(self):
        """Largest step increase in units of the combined bootstrap sigma."""
        dv = np.diff(self.values)
        s = np.sqrt(self.sigma[:-1] ** 2 + self.sigma[1:] ** 2)
        s = np.where(s > 0, s, np.inf)
        ratios = np.where(dv > 0, dv / s, 0.0)
        return float(ratios.max()) if ratios.size else 0.0

    def fit(self, window=None):
        return fit_exponential(self, window)

    def rows(self):
        return [(t, h, s, self.trapped_frac) for t, h, s in zip(self.times, self.values, self.sigma)]

    def write_csv(self, path, chash=""):
        from .io import write_csv

        return write_csv(
            path,
            ["t", "H", "sigma_boot", "trapped_frac"],
            self.rows(),
            chash,
            comments=[f"noise_floor={self.floor:.16e}"],
        )


def _linear_fit(t, y):
    tm, ym = t.mean(), y.mean()
    stt = np.sum((t - tm) ** 2)
    slope = np.sum((t - tm) * (y - ym)) / stt
    icpt = ym - slope * tm
    resid = y - (icpt + slope * t)
    syy = np.sum((y - ym) ** 2)
    r2 = 1.0 - np.sum(resid**2) / syy if syy > 0 else 1.0
    return slope, icpt, r2


def fit_exponential(series: HSeries, window=None) -> FitResult:
    """Least-squares fit of ``ln H = ln H0 - t / tau`` over ``window``.

    Only points with ``H > 5 * floor`` enter; at least four are required.
    A non-negative slope gives ``tau = inf`` with ``rejected`` set. The
    confidence interval (2.5 and 97.5 percentiles) comes from refitting
    the bootstrap replicates.
    """
    t = np.asarray(series.times, float)
    h = np.asarray(series.values, float)
    sel = np.ones(t.size, dtype=bool)
    if window is not None:
        sel &= (t >= window[0]) & (t <= window[1])
    if np.any(h[sel] <= 0):
        raise FitDomainError("non-positive H values in the fit window")
    sel &= h > FIT_FLOOR_FACTOR * series.floor
    if sel.sum() < 4:
        raise FitDomainError(f"only {int(sel.sum())} points above 5x the noise floor; need 4")
    slope, icpt, r2 = _linear_fit(t[sel], np.log(h[sel]))
    if slope >= 0:
        return FitResult(float(np.exp(icpt)), np.inf, float(r2), True, (np.inf, np.inf), int(sel.sum()))
    ci = (np.nan, np.nan)
    if series.replicates is not None:
        taus = []
        for rep in series.replicates:
            v = rep[sel]
            if np.all(v > 0):
                s, _, _ = _linear_fit(t[sel], np.log(v))
                taus.append(-1.0 / s if s < 0 else np.inf)
        if taus:
            ci = tuple(float(x) for x in np.percentile(taus, [2.5, 97.5]))
    return FitResult(float(np.exp(icpt)), float(-1.0 / slope), float(r2), False, ci, int(sel.sum()))


def h_series_from_run(run: EnsembleRun, born_fn, grid: CoarseGrid, n_boot: int = 64, boot_seed: int = 0) -> HSeries:
    """H-bar at every run time. ``born_fn(t)`` returns the cell Born masses."""
    keep = ~run.trapped
    n = int(keep.sum())
    if n == 0:
        raise ValueError("empty ensemble")
    rng = stream(boot_seed, TAG_BOOT, 0)
    weights = rng.multinomial(n, np.full(n, 1.0 / n), size=n_boot).astype(float) if n_boot else None
    T = run.times.size
    vals = np.empty(T)
    reps = np.empty((n_boot, T))
    for j, t in enumerate(run.times):
        bm = born_fn(t)
        idx = grid.index(run.positions[keep, j])
        counts = np.bincount(idx, minlength=grid.n_cells).astype(float)
        vals[j] = _h_from_masses(counts / n, bm)
        for b in range(n_boot):
            cb = np.bincount(idx, weights=weights[b], minlength=grid.n_cells)
            reps[b, j] = _h_from_masses(cb / n, bm)
    sigma = reps.std(axis=0, ddof=1) if n_boot > 1 else np.zeros(T)
    return HSeries(
        run.times.copy(),
        vals,
        sigma,
        run.trapped_fraction,
        noise_floor(grid.n_cells, n),
        reps if n_boot else None,
    )


def check_smooth(spec: DensitySpec, grid: CoarseGrid):
    """Reject specs with discontinuities inside coarse cells (sub-cell structure)."""
    for ax, edges in enumerate(spec.edges()):
        for e in edges:
            inside = grid.lo[ax] < e < grid.hi[ax]
            if inside and not grid.aligned(e, ax):
                raise ValueError(
                    f"density edge at {e} on axis {ax} is not a coarse-cell edge; "
                    "the initial density would carry sub-cell structure"
                )


def relaxation_series(
    state,
    spec: DensitySpec,
    N: int,
    seed: int,
    grid: CoarseGrid,
    times,
    ctrl: StepControl | None = None,
    workers: int = 1,
    n_boot: int = 64,
    return_run: bool = False,
):
    """Sample ``spec``, evolve under ``state`` and record H-bar on ``times``.

    Raises :class:`InvalidRunError` when the trapped fraction reaches 1e-3.
    """
    check_smooth(spec, grid)
    q0 = sample(spec, N, seed)
    run = evolve(state, q0, times, ctrl, workers, seed)
    if not run.valid:
        raise InvalidRunError(f"{run.trapped_count} of {run.N} trajectories trapped near nodes")
    series = h_series_from_run(run, lambda t: coarse_born(state, t, grid).masses, grid, n_boot, seed)
    return (series, run) if return_run else series


# ---------------------------------------------------------------- conservation diagnostics


def rate_order(state):
    """Quadrature order for the rate integrals (Q is a rational function of the modes)."""
    n = state.max_index
    if state.basis.kind == OSCILLATOR:
        return max(160, 8 * n + 80)
    return max(80, 8 * n + 40)


def _stationary(state):
    return isinstance(state, SpectralState) and np.ptp(state.energies) == 0


def dq_dt(state, q, t, h=1e-6):
    """Central time difference of Q at points q (P, d); zero for stationary states."""
    q = np.atleast_2d(q)
    if _stationary(state):
        return np.zeros(q.shape[0])
    qp, _ = state.quantum_potential_field(q, np.full(q.shape[0], t + h))
    qm, _ = state.quantum_potential_field(q, np.full(q.shape[0], t - h))
    return (qp - qm) / (2 * h)


def grad_q(state, q, t):
    """Central space differences of Q with step 1e-5 * L, shape (P, d)."""
    from .integrate import gradient_step

    q = np.atleast_2d(q)
    hq = gradient_step(state)
    out = np.empty(q.shape)
    tt = np.full(q.shape[0], float(t))
    for ax in range(q.shape[1]):
        e = np.zeros(q.shape[1])
        e[ax] = hq
        qp, _ = state.quantum_potential_field(q + e, tt)
        qm, _ = state.quantum_potential_field(q - e, tt)
        out[:, ax] = (qp - qm) / (2 * hq)
    return out


def _rate_integrals(state, t, order):
    pts, w = quadrature(state.basis, order)
    if state.basis.kind == "box-sine":
        # keep the difference stencil inside the walls
        hq = 1e-5 * state.basis.scale
        pts = np.clip(pts, 2 * hq, state.basis.length - 2 * hq)
    rho = state.density(pts, t)
    return float(w @ (rho * dq_dt(state, pts, t))), (w * rho) @ grad_q(state, pts, t)


@dataclass
class RateCheck:
    energy_rate: float
    momentum_rate: np.ndarray
    wall_force: np.ndarray
    order: int


def wall_force(state, t):
    """Mean force the box walls exert on the quantum state, ``-<grad V>``.

    ``(1/2m) (|d psi/dn|^2 at the low wall - at the high wall)`` per axis,
    integrated over the other axis. Zero for bases without walls.
    """
    d = state.dimension
    out = np.zeros(d)
    if state.basis.kind != "box-sine":
        return out
    L = state.basis.length
    m = state.mass
    if d == 1:
        ev = state.evaluate(np.array([[0.0], [L]]), t)
        g = np.abs(ev.gradient[:, 0]) ** 2
        out[0] = (g[0] - g[1]) / (2 * m)
        return out
    x, w = np.polynomial.legendre.leggauss(4 * state.max_index + 20)
    s = 0.5 * L * (x + 1)
    ws = 0.5 * L * w
    for ax in range(2):
        other = 1 - ax
        lo = np.zeros((s.size, 2))
        hi = np.zeros((s.size, 2))
        lo[:, other] = s
        hi[:, other] = s
        hi[:, ax] = L
        glo = np.abs(state.evaluate(lo, t).gradient[:, ax]) ** 2
        ghi = np.abs(state.evaluate(hi, t).gradient[:, ax]) ** 2
        out[ax] = ws @ (glo - ghi) / (2 * m)
    return out


def equilibrium_rate_check(state, t, order=None, tol=1e-8) -> RateCheck:
    """Born averages of ``dQ/dt`` and ``grad Q`` by quadrature.

    The integrals are recomputed at twice the order; a disagreement above
    ``tol`` raises :class:`QuadratureError`. Without boundaries both
    vanish. In a box, ``<grad Q>`` equals minus the wall force (reported in
    ``wall_force``) because the walls act on the wave but never on a
    trajectory.
    """
    order = order or rate_order(state)
    e1, p1 = _rate_integrals(state, t, order)
    e2, p2 = _rate_integrals(state, t, 2 * order)
    if abs(e1 - e2) > tol or np.max(np.abs(p1 - p2)) > tol:
        raise QuadratureError(
            f"rate integrals not converged at order {order}: "
            f"dQ/dt {abs(e1 - e2):.3e}, grad Q {np.max(np.abs(p1 - p2)):.3e}"
        )
    return RateCheck(e2, np.asarray(p2), wall_force(state, t), 2 * order)


@dataclass
class RateEstimate:
    value: float
    sigma: float
    ensemble_mean: float
    born_mean: float


def noneq_rate_check(state, samples, t, n_boot=200, seed=0) -> RateEstimate:
    """Monte-Carlo ``int (rho - |psi|^2) dQ/dt``: ensemble mean minus Born mean.

    ``sigma`` is the bootstrap standard deviation of the ensemble mean.
    """
    samples = np.atleast_2d(samples)
    vals = dq_dt(state, samples, t)
    born = 0.0 if _stationary(state) else _rate_integrals(state, t, rate_order(state))[0]
    mean = float(vals.mean())
    rng = stream(seed, TAG_BOOT, 1)
    idx = rng.integers(0, vals.size, size=(n_boot, vals.size))
    sigma = float(vals[idx].mean(axis=1).std(ddof=1)) if vals.size > 1 else 0.0
    return RateEstimate(mean - born, sigma, mean, born)
