"""Two entangled particles in separate 1D boxes and a local switch at B.

The pair wave function is a Schmidt sum ``sum_n c_n chi_n(x_A) xi_n(x_B)``
with each factor a 1D box state. Until the switch time only the analytic
box phases act. At ``t_s`` the Hamiltonian of particle B changes, either

* ``"width"``: the box of B is resized to ``L'`` (sudden change, B's
  factors are re-expanded in the new sine basis by closed-form overlaps), or
* ``"field"``: a uniform force ``F`` is switched on inside the box of B.
  The potential ``F (x - L/2)`` is projected onto the lowest ``M`` sine
  modes and diagonalized, which gives an exactly unitary local dynamics.

Either way the two-particle wave function after the switch is again a
separable mode sum, so it is evaluated by the same compiled kernel as the
single-particle states.
"""

from __future__ import annotations

from dataclasses import dataclass
import numpy as np

from ._kernels import SeparableSum
from .ensemble import (
    ENSEMBLE_CONTROL,
    TAG_BOOT,
    CoarseGrid,
    evolve,
    histogram,
    sample,
    stream,
)
from .errors import InvalidRunError, NodeError, TruncationError
from .spectral import BOX, NODE_FACTOR, BasisSpec, Domain, SpectralState, _axis_table, _as_points, _as_times

NORM_BUDGET = 1e-8
WIDTH_MODE_CAP = 4096
FIELD_MODES = 16
SIGNAL_CELLS = 32


def _box_basis(length, mass=1.0):
    return BasisSpec(BOX, 1, float(length), float(mass))


def box_position_matrix(M, length):
    """``<k| x |l>`` for box modes 1..M on ``[0, L]``."""
    k = np.arange(1, M + 1)
    K, Lm = np.meshgrid(k, k, indexing="ij")
    X = np.zeros((M, M))
    odd = (K + Lm) % 2 == 1
    X[odd] = -8 * length * K[odd] * Lm[odd] / (np.pi**2 * (K[odd] ** 2 - Lm[odd] ** 2) ** 2)
    X[np.diag_indices(M)] = length / 2
    return X


def box_overlap(n_old, L_old, n_new, L_new):
    """Closed-form ``<phi'_e | phi_j>`` between sine modes of two boxes sharing x = 0.

    Rows index ``n_new``, columns ``n_old``. Integration runs over the
    common interval ``[0, min(L_old, L_new)]``.
    """
    a = np.pi * np.asarray(n_old, float)[None, :] / L_old
    b = np.pi * np.asarray(n_new, float)[:, None] / L_new
    X = min(L_old, L_new)
    amp = 2.0 / np.sqrt(L_old * L_new)
    d = a - b
    s = a + b
    same = np.abs(d) < 1e-12 * s
    dd = np.where(same, 1.0, d)
    val = 0.5 * (np.sin(dd * X) / dd - np.sin(s * X) / s)
    val = np.where(same, 0.5 * X - np.sin(s * X) / (2 * s), val)
    return amp * val


@dataclass(frozen=True)
class Switch:
    """Sudden change of B's Hamiltonian at ``time``.

    ``kind="width"`` resizes B's box to ``length``; ``modes`` caps the new
    basis (``None`` picks the smallest size meeting the norm budget).
    ``kind="field"`` adds ``force * (x - L/2)`` projected on ``modes`` sine modes.
    """

    time: float
    kind: str = "field"
    force: float = 0.0
    length: float | None = None
    modes: int | None = None

    def __post_init__(self):
        if self.kind not in ("width", "field"):
            raise ValueError("switch kind must be 'width' or 'field'")
        if self.time < 0:
            raise ValueError("switch time must be nonnegative")
        if self.kind == "width" and not (self.length and self.length > 0):
            raise ValueError("width switch needs a positive new length")


class PairWave:
    """Two-particle wave function on one Hamiltonian segment.

    ``C`` holds coefficients at time ``t_ref`` over the axis functions of
    ``tables``; points are ``(x_A, x_B)``.
    """

    dimension = 2

    def __init__(self, basis_a, basis_b, tables, C, t_ref, t_start=0.0):
        self.basis_a = basis_a
        self.basis_b = basis_b
        self.kernel = SeparableSum(tables)
        self.C = np.ascontiguousarray(C, dtype=complex)
        self.t_ref = float(t_ref)
        self.t_start = float(t_start)
        self.masses = np.array([basis_a.mass, basis_b.mass])
        self.domain = Domain(("interval", "interval"), (0.0, 0.0), (basis_a.length, basis_b.length))
        self.sampling_bounds = [[0.0, basis_a.length], [0.0, basis_b.length]]
        self.eps_node = NODE_FACTOR / (basis_a.length * basis_b.length)
        self.t0 = self.t_start

    @property
    def mass(self):
        return self.masses

    def compiled_field(self):
        return dict(kernel=self.kernel, C=self.C, t_ref=self.t_ref, masses=self.masses, domain=self.domain, eps_node=self.eps_node)

    def _eval(self, q, t, laplacian=False):
        psi, grad, lap = self.kernel(self.C, q, np.asarray(t, float) - self.t_ref, laplacian)
        return psi, grad, lap

    def evaluate(self, q, t):
        q, single = _as_points(q, 2)
        psi, grad, _ = self._eval(q, _as_times(t, len(q)))
        return (psi[0], grad[0]) if single else (psi, grad)

    def density(self, q, t):
        q, _ = _as_points(q, 2)
        psi, _, _ = self._eval(q, _as_times(t, len(q)))
        return np.abs(psi) ** 2

    def velocity_field(self, q, t):
        psi, grad, _ = self._eval(q, t)
        rho = np.abs(psi) ** 2
        safe = np.where(rho > 0, psi, 1.0)
        v = np.imag(grad / safe[:, None]) / self.masses
        v[rho <= 0] = 0.0
        return v, rho

    def norm(self, order=64):
        """``int |Psi|^2`` by Gauss-Legendre quadrature at the segment start."""
        x, w = np.polynomial.legendre.leggauss(order)
        xa = 0.5 * self.basis_a.length * (x + 1)
        xb = 0.5 * self.basis_b.length * (x + 1)
        X, Y = np.meshgrid(xa, xb, indexing="ij")
        W = np.outer(w, w).ravel() * self.basis_a.length * self.basis_b.length / 4
        return float(W @ self.density(np.column_stack([X.ravel(), Y.ravel()]), self.t_start))


class PairState:
    """Schmidt-form pair state with an optional switch of B's Hamiltonian.

    ``terms`` is a list of ``(c_n, chi_n, xi_n)`` with ``chi_n`` a 1D box
    state of particle A and ``xi_n`` one of particle B (all A factors share
    one basis, as do all B factors). States refer to ``t = 0``.
    """

    def __init__(self, terms, switch: Switch | None = None):
        c = np.array([t[0] for t in terms], dtype=complex)
        if abs(np.sum(np.abs(c) ** 2) - 1) > 1e-12:
            raise ValueError("Schmidt weights must satisfy sum |c|^2 = 1")
        self.basis_a = terms[0][1].basis
        self.basis_b = terms[0][2].basis
        for _, chi, xi in terms:
            if chi.basis != self.basis_a or xi.basis != self.basis_b:
                raise ValueError("all factors of one particle must share a basis")
            if chi.basis.kind != BOX or chi.dimension != 1 or xi.basis.kind != BOX or xi.dimension != 1:
                raise ValueError("factors must be 1D box states")
            if chi.t0 != 0 or xi.t0 != 0:
                raise ValueError("factors must refer to t = 0")
        self.weights = c
        self.terms = terms
        self.switch = switch
        self.idx_a = np.arange(1, max(t[1].max_index for t in terms) + 1)
        self.idx_b = np.arange(1, max(t[2].max_index for t in terms) + 1)
        C = np.zeros((self.idx_a.size, self.idx_b.size), dtype=complex)
        for cn, chi, xi in terms:
            a = np.zeros(self.idx_a.size, complex)
            b = np.zeros(self.idx_b.size, complex)
            a[chi.modes[:, 0] - 1] = chi.coeffs
            b[xi.modes[:, 0] - 1] = xi.coeffs
            C += cn * np.outer(a, b)
        self.C0 = C
        self._before = PairWave(
            self.basis_a,
            self.basis_b,
            [_axis_table(self.basis_a, self.idx_a), _axis_table(self.basis_b, self.idx_b)],
            C,
            0.0,
        )
        self._after = None if switch is None else self._build_after()

    @classmethod
    def product(cls, chi, xi, switch=None):
        return cls([(1.0, chi, xi)], switch)

    @property
    def retained_norm(self):
        return 1.0 if self._after is None else self._retained

    def _coefficients_at_switch(self):
        ts = self.switch.time
        ea = self.basis_a.axis_energy(self.idx_a)
        eb = self.basis_b.axis_energy(self.idx_b)
        return np.exp(-1j * ea * ts)[:, None] * self.C0 * np.exp(-1j * eb * ts)[None, :]

    def _build_after(self):
        sw = self.switch
        Cs = self._coefficients_at_switch()
        if sw.kind == "width":
            new_b = _box_basis(sw.length, self.basis_b.mass)
            cap = sw.modes or WIDTH_MODE_CAP
            O = box_overlap(self.idx_b, self.basis_b.length, np.arange(1, cap + 1), sw.length)
            D = Cs @ O.T
            kept = np.cumsum(np.sum(np.abs(D) ** 2, axis=0))
            ok = np.flatnonzero(kept >= 1 - NORM_BUDGET)
            if ok.size == 0:
                required = None
                if sw.modes is not None:
                    O2 = box_overlap(self.idx_b, self.basis_b.length, np.arange(1, WIDTH_MODE_CAP + 1), sw.length)
                    tail = np.cumsum(np.sum(np.abs(Cs @ O2.T) ** 2, axis=0))
                    hit = np.flatnonzero(tail >= 1 - NORM_BUDGET)
                    required = int(hit[0] + 1) if hit.size else None
                raise TruncationError(
                    f"re-expansion keeps {kept[-1]:.12f} of the norm with {cap} modes",
                    required=required,
                )
            M = int(ok[0] + 1) if sw.modes is None else cap
            self._retained = float(kept[M - 1])
            self.switch_basis = new_b
            self.switch_coefficients = D[:, :M]
            tables = [_axis_table(self.basis_a, self.idx_a), _axis_table(new_b, np.arange(1, M + 1))]
            return PairWave(self.basis_a, new_b, tables, D[:, :M], sw.time, sw.time)
        M = max(sw.modes or FIELD_MODES, self.idx_b.size)
        L = self.basis_b.length
        k = np.arange(1, M + 1)
        H = np.diag(self.basis_b.axis_energy(k)) + sw.force * (box_position_matrix(M, L) - 0.5 * L * np.eye(M))
        E, U = np.linalg.eigh(H)
        Cb = np.zeros((Cs.shape[0], M), dtype=complex)
        Cb[:, : self.idx_b.size] = Cs
        D = Cb @ U
        self._retained = float(np.sum(np.abs(D) ** 2))
        self.switch_basis = self.basis_b
        self.switch_coefficients = D
        self.switch_energies = E
        tables = [_axis_table(self.basis_a, self.idx_a), _axis_table(self.basis_b, k, energies=E, mixing=U)]
        return PairWave(self.basis_a, self.basis_b, tables, D, sw.time, sw.time)

    def segments(self):
        """``[(t_start, wave), ...]`` covering ``t >= 0``."""
        if self._after is None:
            return [(0.0, self._before)]
        return [(0.0, self._before), (self.switch.time, self._after)]

    def without_switch(self):
        return PairState(self.terms, None)


def evolve_pair(state: PairState, t) -> PairWave:
    """Wave function valid at time ``t`` (the segment containing it)."""
    if t < 0:
        raise ValueError("t must be nonnegative")
    wave = state.segments()[0][1]
    for start, w in state.segments():
        if t >= start:
            wave = w
    return wave


def pair_velocity(state: PairState, x_a, x_b, t):
    """Guidance velocities ``(v_A, v_B)`` at one configuration."""
    wave = evolve_pair(state, t)
    q = np.array([[float(x_a), float(x_b)]])
    if not wave.domain.contains(q).all():
        raise ValueError("configuration outside the boxes")
    v, rho = wave.velocity_field(q, np.array([float(t)]))
    if rho[0] <= wave.eps_node:
        raise NodeError(f"density {rho[0]:.3e} at or below node threshold")
    return float(v[0, 0]), float(v[0, 1])


# ---------------------------------------------------------------- signalling


@dataclass
class SignalResult:
    """A-marginals with and without the switch and their L1 distance.

    ``sigma`` is the root-mean-square L1 of the paired label-swap null (the
    scale of L1 produced by sampling noise alone), ``p_value`` the fraction
    of null draws at least as large as the observed L1.
    """

    edges: np.ndarray
    marginal_switch: np.ndarray
    marginal_free: np.ndarray
    l1: float
    sigma: float
    p_value: float
    n_used: int
    trapped: int

    def rows(self):
        return [
            (i, self.edges[i], self.edges[i + 1], self.marginal_switch[i], self.marginal_free[i])
            for i in range(self.marginal_switch.size)
        ]


def _run_segments(state: PairState, q0, t_probe, ctrl, workers, seed):
    """Positions at ``t_probe`` for the switched and free arms (common start)."""
    ts = state.switch.time
    before = state.segments()[0][1]
    if ts > 0:
        run = evolve(before, q0, [0.0, ts], ctrl, workers, seed)
        qs, dead = run.positions[:, -1], run.trapped.copy()
    else:
        qs, dead = q0.copy(), np.zeros(len(q0), bool)
    qs = np.where(dead[:, None], 0.5 * np.array([state.basis_a.length, state.basis_b.length]), qs)
    free = evolve(before, qs, [ts, t_probe], ctrl, workers, seed)
    switched = evolve(state.segments()[1][1], qs, [ts, t_probe], ctrl, workers, seed)
    dead = dead | free.trapped | switched.trapped
    return switched.positions[:, -1], free.positions[:, -1], dead


def _null_l1(seed, n_null, ia, ib, cells):
    out = np.empty(n_null)
    for r in range(n_null):
        swap = stream(seed, TAG_BOOT, r).random(ia.size) < 0.5
        a = np.where(swap, ib, ia)
        b = np.where(swap, ia, ib)
        out[r] = np.abs(np.bincount(a, minlength=cells) - np.bincount(b, minlength=cells)).sum() / ia.size
    return out


def signal_experiment(
    state: PairState,
    spec,
    N: int,
    seed: int,
    t_probe: float,
    cells: int = SIGNAL_CELLS,
    ctrl=None,
    workers: int = 1,
    n_null: int = 200,
) -> SignalResult:
    """Compare A's position marginal at ``t_probe`` with and without the switch.

    Both arms start from the same sampled configurations and share the
    trajectory up to the switch time.
    """
    if state.switch is None:
        raise ValueError("state has no switch")
    if t_probe <= state.switch.time:
        raise ValueError("t_probe must exceed the switch time")
    ctrl = ctrl or ENSEMBLE_CONTROL
    q0 = sample(spec, N, seed)
    qa, qb, dead = _run_segments(state, q0, t_probe, ctrl, workers, seed)
    if dead.mean() >= 1e-3:
        raise InvalidRunError(f"{int(dead.sum())} of {N} trajectories trapped")
    grid = CoarseGrid((cells,), (0.0,), (state.basis_a.length,))
    keep = ~dead
    ia = grid.index(qa[keep, :1])
    ib = grid.index(qb[keep, :1])
    ha = histogram(qa[keep, :1], grid)
    hb = histogram(qb[keep, :1], grid)
    l1 = float(np.abs(ha - hb).sum())
    null = _null_l1(seed, n_null, ia, ib, cells)
    sigma = float(np.sqrt(np.mean(null**2)))
    p = float((1 + np.sum(null >= l1)) / (1 + n_null))
    return SignalResult(grid.axis_edges(0), ha, hb, l1, sigma, p, int(keep.sum()), int(dead.sum()))


def entangled_pair(length=np.pi, switch=None, modes=((1, 1), (2, 2)), weights=None):
    """Schmidt state ``sum_n c_n phi_{a_n}(x_A) phi_{b_n}(x_B)`` on two boxes of side ``length``."""
    basis = _box_basis(length)
    weights = np.ones(len(modes)) / np.sqrt(len(modes)) if weights is None else np.asarray(weights, complex)
    terms = [
        (w, SpectralState.eigenstate(basis, a), SpectralState.eigenstate(basis, b)) for w, (a, b) in zip(weights, modes)
    ]
    return PairState(terms, switch)


__all__ = [
    "Switch",
    "PairWave",
    "PairState",
    "SignalResult",
    "box_overlap",
    "box_position_matrix",
    "entangled_pair",
    "evolve_pair",
    "pair_velocity",
    "signal_experiment",
]

