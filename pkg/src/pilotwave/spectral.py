"""Analytic eigenbasis wave functions and de Broglie guidance.

Wave functions are finite sums ``psi(q, t) = sum_j c_j exp(-i E_j (t - t0)) phi_j(q)``
over one of three separable eigenbases (units hbar = 1):

``box-sine``            ``sqrt(2/L) sin(n pi x / L)`` on ``[0, L]``, ``n >= 1``
``ring-exponential``    ``exp(2 pi i n x / C) / sqrt(C)`` on a ring of circumference ``C``
``oscillator-hermite``  Hermite functions of ``H = p^2/2m + m w^2 x^2 / 2``, ``n >= 0``

Values, gradients and Laplacians are exact mode sums using analytic basis
derivatives. The phase S is never formed; velocities use ``Im(grad psi / psi)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._kernels import AXIS_BOX, AXIS_OSC, AXIS_RING, AxisTable, SeparableSum
from .errors import DomainError, NodeError

BOX = "box-sine"
RING = "ring-exponential"
OSCILLATOR = "oscillator-hermite"
KINDS = (BOX, RING, OSCILLATOR)

# relative slack on box walls for rounding only
WALL_SLACK = 1e-12
NODE_FACTOR = 1e-12


@dataclass(frozen=True)
class Domain:
    """Per-axis configuration domain.

    Each axis is ``"interval"`` (hard walls at lo/hi), ``"periodic"``
    (period hi - lo) or ``"line"`` (unbounded).
    """

    kinds: tuple
    lo: tuple
    hi: tuple

    @property
    def dimension(self):
        return len(self.kinds)

    def contains(self, q, slack=WALL_SLACK):
        q = np.atleast_2d(q)
        ok = np.ones(q.shape[0], dtype=bool)
        for ax, kind in enumerate(self.kinds):
            if kind == "interval":
                tol = slack * (self.hi[ax] - self.lo[ax])
                ok &= (q[:, ax] >= self.lo[ax] - tol) & (q[:, ax] <= self.hi[ax] + tol)
        return ok

    def project(self, q, slack=WALL_SLACK):
        """Reflect rounding-size overshoot back inside walls.

        Returns the corrected array and a mask of points that were inside
        or only overshot by less than ``slack`` times the axis length.
        """
        q = np.array(q, dtype=float, copy=True)
        ok = np.ones(q.shape[0], dtype=bool)
        for ax, kind in enumerate(self.kinds):
            if kind != "interval":
                continue
            lo, hi = self.lo[ax], self.hi[ax]
            tol = slack * (hi - lo)
            x = q[:, ax]
            below = x < lo
            above = x > hi
            ok &= ~(below & (x < lo - tol)) & ~(above & (x > hi + tol))
            x[below] = 2 * lo - x[below]
            x[above] = 2 * hi - x[above]
        return q, ok

    def product(self, other):
        return Domain(self.kinds + other.kinds, self.lo + other.lo, self.hi + other.hi)


@dataclass(frozen=True)
class BasisSpec:
    """Eigenbasis family and geometry.

    ``length`` is the box side L or ring circumference C; ``omega`` is the
    oscillator frequency. ``mass`` is the particle mass.
    """

    kind: str
    dimension: int = 1
    length: float = np.pi
    mass: float = 1.0
    omega: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown basis kind {self.kind!r}")
        if self.dimension not in (1, 2):
            raise ValueError("dimension must be 1 or 2")
        if not (self.length > 0 and self.mass > 0 and self.omega > 0):
            raise ValueError("length, mass and omega must be positive")

    @property
    def min_index(self):
        return {BOX: 1, RING: None, OSCILLATOR: 0}[self.kind]

    @property
    def domain(self) -> Domain:
        d = self.dimension
        if self.kind == BOX:
            return Domain(("interval",) * d, (0.0,) * d, (self.length,) * d)
        if self.kind == RING:
            return Domain(("periodic",) * d, (0.0,) * d, (self.length,) * d)
        return Domain(("line",) * d, (-np.inf,) * d, (np.inf,) * d)

    @property
    def scale(self):
        """Characteristic length: box side, circumference or oscillator width."""
        if self.kind == OSCILLATOR:
            return 1.0 / np.sqrt(self.mass * self.omega)
        return self.length

    @property
    def reference_density(self):
        """Domain-average density; the oscillator uses its ground-state peak."""
        if self.kind == OSCILLATOR:
            return (self.mass * self.omega / np.pi) ** (self.dimension / 2)
        return self.length ** (-self.dimension)

    def wavenumber(self, n):
        n = np.asarray(n, dtype=float)
        if self.kind == BOX:
            return n * np.pi / self.length
        if self.kind == RING:
            return 2 * np.pi * n / self.length
        raise ValueError("oscillator modes have no wavenumber")

    def axis_energy(self, n):
        n = np.asarray(n, dtype=float)
        if self.kind == OSCILLATOR:
            return self.omega * (n + 0.5)
        return self.wavenumber(n) ** 2 / (2 * self.mass)

    def axis_functions(self, n, x):
        """Mode functions and first two derivatives along one axis.

        ``n`` has shape (M,), ``x`` shape (P,); returns three (M, P) arrays.
        """
        n = np.asarray(n, dtype=int)
        x = np.asarray(x, dtype=float)
        if self.kind == BOX:
            return _box_functions(n, x, self.length)
        if self.kind == RING:
            k = self.wavenumber(n)[:, None]
            f = np.exp(1j * k * x[None, :]) / np.sqrt(self.length)
            return f, 1j * k * f, -(k**2) * f
        return hermite_functions(n, x, self.mass * self.omega)


def _sin_cos_table(nmax, theta):
    """sin(n theta), cos(n theta) for n = 0..nmax by the Chebyshev recurrence."""
    s = np.empty((nmax + 1, theta.size))
    c = np.empty((nmax + 1, theta.size))
    s[0], c[0] = 0.0, 1.0
    if nmax >= 1:
        s[1], c[1] = np.sin(theta), np.cos(theta)
        two_c = 2 * c[1]
        for k in range(1, nmax):
            s[k + 1] = two_c * s[k] - s[k - 1]
            c[k + 1] = two_c * c[k] - c[k - 1]
    return s, c


def _box_functions(n, x, length):
    if n.size and n.min() < 1:
        raise ValueError("box-sine indices start at 1")
    nmax = int(n.max()) if n.size else 1
    s, c = _sin_cos_table(nmax, np.pi * x / length)
    k = (n * np.pi / length)[:, None]
    amp = np.sqrt(2.0 / length)
    f = amp * s[n]
    return f, amp * k * c[n], -(k**2) * f


def hermite_functions(n, x, mw):
    """Normalized Hermite functions for mass*frequency ``mw`` and derivatives."""
    n = np.asarray(n, dtype=int)
    if n.size and n.min() < 0:
        raise ValueError("oscillator indices start at 0")
    nmax = int(n.max()) + 1 if n.size else 1
    xi = np.sqrt(mw) * np.asarray(x, dtype=float)
    h = np.empty((nmax + 1, xi.size))
    h[0] = (mw / np.pi) ** 0.25 * np.exp(-0.5 * xi**2)
    h[1] = np.sqrt(2.0) * xi * h[0]
    for k in range(1, nmax):
        h[k + 1] = np.sqrt(2.0 / (k + 1)) * xi * h[k] - np.sqrt(k / (k + 1)) * h[k - 1]
    lower = np.where(n[:, None] > 0, h[np.maximum(n - 1, 0)], 0.0)
    nn = n[:, None].astype(float)
    f = h[n]
    f1 = np.sqrt(mw) * (np.sqrt(nn / 2) * lower - np.sqrt((nn + 1) / 2) * h[n + 1])
    f2 = mw * (xi[None, :] ** 2 - (2 * nn + 1)) * f
    return f, f1, f2


def _axis_table(basis, indices, energies=None, mixing=None):
    """Kernel table for one axis of ``basis`` over raw ``indices``."""
    indices = np.asarray(indices, dtype=int)
    quadratic = None
    if energies is None:
        energies = basis.axis_energy(indices)
        if basis.kind == OSCILLATOR:
            quadratic = (0.0, basis.omega, 0.5 * basis.omega)
        else:
            quadratic = (float(basis.wavenumber(1)) ** 2 / (2 * basis.mass), 0.0, 0.0)
    if basis.kind == BOX:
        kind, k, amp = AXIS_BOX, np.pi / basis.length, np.sqrt(2 / basis.length)
    elif basis.kind == RING:
        kind, k, amp = AXIS_RING, 2 * np.pi / basis.length, basis.length**-0.5
    else:
        mw = basis.mass * basis.omega
        kind, k, amp = AXIS_OSC, np.sqrt(mw), (mw / np.pi) ** 0.25
    return AxisTable(kind, k, amp, indices, energies, mixing, quadratic)


@dataclass(frozen=True)
class WaveSample:
    value: np.ndarray
    gradient: np.ndarray
    laplacian: np.ndarray
    density: np.ndarray


@dataclass(frozen=True)
class GuidanceSample:
    velocity: np.ndarray
    quantum_potential: np.ndarray
    density: np.ndarray


def _as_points(q, dim):
    q = np.asarray(q, dtype=float)
    single = q.ndim == 1
    q = q.reshape(-1, dim) if single else q
    if q.shape[1] != dim:
        raise ValueError(f"expected {dim}-dimensional positions, got shape {q.shape}")
    return q, single


def _as_times(t, npts):
    t = np.asarray(t, dtype=float)
    if t.ndim == 0:
        return np.full(npts, float(t))
    if t.shape != (npts,):
        raise ValueError("times must be scalar or one per point")
    return t


def _squeeze(sample, single):
    if not single:
        return sample
    return type(sample)(*(np.asarray(getattr(sample, f))[0] for f in sample.__dataclass_fields__))


@dataclass(frozen=True, eq=False)
class SpectralState:
    """Wave function as coefficients over an analytic eigenbasis.

    ``modes`` has shape (T, d) with one index per axis and ``coeffs`` shape (T,).
    Coefficients refer to time ``t0``.
    """

    basis: BasisSpec
    modes: np.ndarray
    coeffs: np.ndarray
    t0: float = 0.0
    energies: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        d = self.basis.dimension
        modes = np.array(self.modes, dtype=int).reshape(-1, d)
        coeffs = np.array(self.coeffs, dtype=complex).reshape(-1)
        if modes.shape[0] != coeffs.size or coeffs.size == 0:
            raise ValueError("need one coefficient per mode")
        if len({tuple(m) for m in modes}) != len(modes):
            raise ValueError("mode indices must be distinct")
        lo = self.basis.min_index
        if lo is not None and modes.min() < lo:
            raise ValueError(f"{self.basis.kind} indices must be >= {lo}")
        norm = np.sum(np.abs(coeffs) ** 2)
        if abs(norm - 1) > 1e-12:
            raise ValueError(f"coefficients not normalized (sum |c|^2 = {norm!r})")
        energies = self.basis.axis_energy(modes).sum(axis=1)
        for name, arr in (("modes", modes), ("coeffs", coeffs), ("energies", energies)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        # per-axis unique indices for table evaluation
        axes = [np.unique(modes[:, ax], return_inverse=True) for ax in range(d)]
        object.__setattr__(self, "_axes", axes)
        tables = [_axis_table(self.basis, uniq) for uniq, _ in axes]
        object.__setattr__(self, "_kernel", SeparableSum(tables))

    @classmethod
    def from_terms(cls, basis, terms, t0=0.0, normalize=False):
        """Build from ``[(mode, coefficient), ...]``; modes are ints or tuples."""
        modes = [np.atleast_1d(m) for m, _ in terms]
        coeffs = np.array([c for _, c in terms], dtype=complex)
        if normalize:
            coeffs = coeffs / np.sqrt(np.sum(np.abs(coeffs) ** 2))
        return cls(basis, np.array(modes), coeffs, t0)

    @classmethod
    def eigenstate(cls, basis, mode, t0=0.0):
        return cls.from_terms(basis, [(mode, 1.0)], t0=t0)

    @classmethod
    def random_phases(cls, basis, modes, seed, t0=0.0):
        """Equal-amplitude superposition with seeded uniform random phases."""
        rng = np.random.default_rng(seed)
        phases = rng.uniform(0, 2 * np.pi, len(modes))
        coeffs = np.exp(1j * phases) / np.sqrt(len(modes))
        return cls(basis, np.array(modes), coeffs, t0)

    @property
    def dimension(self):
        return self.basis.dimension

    @property
    def mass(self):
        return self.basis.mass

    @property
    def domain(self):
        return self.basis.domain

    @property
    def eps_node(self):
        return NODE_FACTOR * self.basis.reference_density

    @property
    def max_index(self):
        return int(np.abs(self.modes).max())

    def coefficients_at(self, t):
        return self.coeffs * np.exp(-1j * self.energies * (t - self.t0))

    def at_time(self, t):
        """Same state with coefficients re-referenced to time ``t``."""
        return SpectralState(self.basis, self.modes, self.coefficients_at(t), float(t))

    def potential(self, q):
        q = np.atleast_2d(q)
        if self.basis.kind == OSCILLATOR:
            b = self.basis
            return 0.5 * b.mass * b.omega**2 * np.sum(q**2, axis=1)
        return np.zeros(q.shape[0])

    def _check_domain(self, q):
        if not np.all(self.domain.contains(q)):
            raise DomainError("position outside the basis domain")

    def _dense(self, weights=None):
        coeffs = self.coeffs if weights is None else self.coeffs * weights
        shape = tuple(len(self._axes[ax][0]) for ax in range(self.dimension))
        C = np.zeros(shape, dtype=complex)
        C[tuple(self._axes[ax][1] for ax in range(self.dimension))] = coeffs
        return C

    def compiled_field(self):
        """Inputs of the compiled trajectory integrator."""
        return dict(
            kernel=self._kernel,
            C=self._dense(),
            t_ref=self.t0,
            masses=np.full(self.dimension, self.mass),
            domain=self.domain,
            eps_node=self.eps_node,
        )

    def _eval(self, q, t, laplacian=True, weights=None):
        """Mode sums at points q (P, d) and times t (P,): (psi, grad (P, d), lap)."""
        psi, grad, lap = self._kernel(self._dense(weights), q, t - self.t0, laplacian)
        return psi, grad[:, : self.dimension], (lap if laplacian else None)

    def _eval_reference(self, q, t, laplacian=True, weights=None):
        """Vectorized numpy evaluation of the same sums (cross-check for the kernel)."""
        npts, d = q.shape
        tau = t - self.t0
        tables = []
        for ax in range(d):
            uniq, inv = self._axes[ax]
            f, f1, f2 = self.basis.axis_functions(uniq, q[:, ax])
            ph = np.exp(-1j * np.outer(self.basis.axis_energy(uniq), tau))
            tables.append((f * ph, f1 * ph, f2 * ph, inv))
        C = self._dense(weights)
        grad = np.empty((npts, d), dtype=complex)
        lap = None
        if d == 1:
            fx, fx1, fx2, _ = tables[0]
            psi = C @ fx
            grad[:, 0] = C @ fx1
            if laplacian:
                lap = C @ fx2
        else:
            (fx, fx1, fx2, _), (fy, fy1, fy2, _) = tables
            G = C @ fy
            G1 = C @ fy1
            psi = np.einsum("ip,ip->p", fx, G)
            grad[:, 0] = np.einsum("ip,ip->p", fx1, G)
            grad[:, 1] = np.einsum("ip,ip->p", fx, G1)
            if laplacian:
                lap = np.einsum("ip,ip->p", fx2, G) + np.einsum("ip,ip->p", fx, C @ fy2)
        return psi, grad, lap

    def evaluate(self, q, t) -> WaveSample:
        q, single = _as_points(q, self.dimension)
        self._check_domain(q)
        psi, grad, lap = self._eval(q, _as_times(t, len(q)))
        return _squeeze(WaveSample(psi, grad, lap, np.abs(psi) ** 2), single)

    def time_derivative(self, q, t):
        """Analytic d psi / dt at (q, t)."""
        q, single = _as_points(q, self.dimension)
        psi_e, _, _ = self._eval(q, _as_times(t, len(q)), laplacian=False, weights=self.energies)
        out = -1j * psi_e
        return out[0] if single else out

    def density(self, q, t):
        q, _ = _as_points(q, self.dimension)
        psi, _, _ = self._eval(q, _as_times(t, len(q)), laplacian=False)
        return np.abs(psi) ** 2

    def velocity_field(self, q, t):
        """Guidance velocity and density without node checks (integrator use)."""
        psi, grad, _ = self._eval(q, t, laplacian=False)
        rho = np.abs(psi) ** 2
        safe = np.where(rho > 0, psi, 1.0)
        v = np.imag(grad / safe[:, None]) / self.mass
        v[rho <= 0] = 0.0
        return v, rho

    def quantum_potential_field(self, q, t):
        """Q and density at points without node checks."""
        psi, grad, lap = self._eval(q, t)
        rho = np.abs(psi) ** 2
        safe = np.where(rho > 0, psi, 1.0)
        ratio = grad / safe[:, None]
        lap_r_over_r = np.real(lap / safe) + np.sum(np.imag(ratio) ** 2, axis=1)
        Q = -lap_r_over_r / (2 * self.mass)
        Q[rho <= 0] = 0.0
        return Q, rho


def guidance(state, q, t) -> GuidanceSample:
    """De Broglie velocity ``Im(grad psi / psi)/m`` and quantum potential.

    Q uses ``lap|psi|/|psi| = Re(lap psi / psi) + |Im(grad psi / psi)|^2``.
    Raises :class:`NodeError` where the density is at or below ``state.eps_node``.
    """
    q, single = _as_points(q, state.dimension)
    state._check_domain(q)
    psi, grad, lap = state._eval(q, _as_times(t, len(q)))
    rho = np.abs(psi) ** 2
    if np.any(rho <= state.eps_node):
        raise NodeError(f"density {rho.min():.3e} at or below node threshold {state.eps_node:.3e}")
    ratio = grad / psi[:, None]
    v = np.imag(ratio) / state.mass
    Q = -(np.real(lap / psi) + np.sum(np.imag(ratio) ** 2, axis=1)) / (2 * state.mass)
    return _squeeze(GuidanceSample(v, Q, rho), single)


def evaluate(state, q, t) -> WaveSample:
    return state.evaluate(q, t)


@dataclass(frozen=True)
class GaussianPacket:
    """Freely spreading 1D Gaussian packet with mean momentum ``momentum``.

    ``width`` is the standard deviation of ``|psi|^2`` at ``t0``. ``amplitude``
    scales the packet (spinor components carry their branch weight here).
    """

    width: float
    center: float = 0.0
    momentum: float = 0.0
    mass: float = 1.0
    amplitude: complex = 1.0
    t0: float = 0.0

    dimension = 1

    @property
    def domain(self):
        return Domain(("line",), (-np.inf,), (np.inf,))

    @property
    def eps_node(self):
        return NODE_FACTOR / (np.sqrt(2 * np.pi) * self.width)

    def width_at(self, t):
        tau = t - self.t0
        return self.width * np.sqrt(1 + (tau / (2 * self.mass * self.width**2)) ** 2)

    def center_at(self, t):
        return self.center + self.momentum / self.mass * (t - self.t0)

    def _eval(self, q, t, laplacian=True):
        z = q[:, 0]
        tau = t - self.t0
        alpha = self.width**2 + 1j * tau / (2 * self.mass)
        u = z - self.center - self.momentum / self.mass * tau
        k = self.momentum
        psi = (
            self.amplitude
            * (2 * np.pi) ** -0.25
            * np.sqrt(self.width / alpha)
            * np.exp(-(u**2) / (4 * alpha) + 1j * k * (z - self.center) - 1j * k**2 * tau / (2 * self.mass))
        )
        dlog = -u / (2 * alpha) + 1j * k
        grad = (psi * dlog)[:, None]
        lap = psi * (dlog**2 - 1 / (2 * alpha)) if laplacian else None
        return psi, grad, lap

    def evaluate(self, q, t) -> WaveSample:
        q, single = _as_points(q, 1)
        psi, grad, lap = self._eval(q, _as_times(t, len(q)))
        return _squeeze(WaveSample(psi, grad, lap, np.abs(psi) ** 2), single)


def spinor_velocity_field(up, down, q, t):
    """Two-component guidance velocity and total density, unchecked."""
    num = np.zeros(q.shape, dtype=float)
    rho = np.zeros(q.shape[0])
    mass = None
    for comp in (up, down):
        if comp is None:
            continue
        mass = comp.mass
        psi, grad, _ = comp._eval(q, t, laplacian=False)
        num += np.imag(np.conj(psi)[:, None] * grad)
        rho += np.abs(psi) ** 2
    safe = np.where(rho > 0, rho, 1.0)
    v = num / (mass * safe[:, None])
    v[rho <= 0] = 0.0
    return v, rho


def spinor_guidance(up, down, q, t):
    """Velocity ``sum_s Im(psi_s* grad psi_s) / (m sum_s |psi_s|^2)``.

    Either component may be ``None`` (identically zero).
    """
    comps = [c for c in (up, down) if c is not None]
    if not comps:
        raise ValueError("at least one spinor component required")
    q, single = _as_points(q, comps[0].dimension)
    v, rho = spinor_velocity_field(up, down, q, _as_times(t, len(q)))
    eps = max(c.eps_node for c in comps)
    if np.any(rho <= eps):
        raise NodeError("both spinor components below node threshold")
    return v[0] if single else v


def quadrature(basis: BasisSpec, order: int):
    """Tensor-product rule over the basis domain: (points (P, d), weights (P,)).

    The box uses Gauss-Legendre on [0, L], the ring the midpoint trapezoid
    rule (spectrally accurate for periodic integrands) and the oscillator
    Gauss-Hermite with the Gaussian weight divided out.
    """
    if basis.kind == OSCILLATOR:
        x, w = np.polynomial.hermite.hermgauss(order)
        s = basis.scale
        x1, w1 = x * s, w * s * np.exp(x**2)
    elif basis.kind == RING:
        # midpoint trapezoid: exact for trigonometric polynomials of degree < order
        L = basis.length
        x1 = (np.arange(order) + 0.5) * (L / order)
        w1 = np.full(order, L / order)
    else:
        x, w = np.polynomial.legendre.leggauss(order)
        L = basis.length
        x1, w1 = 0.5 * L * (x + 1), 0.5 * L * w
    if basis.dimension == 1:
        return x1[:, None], w1
    X, Y = np.meshgrid(x1, x1, indexing="ij")
    W = np.outer(w1, w1)
    return np.column_stack([X.ravel(), Y.ravel()]), W.ravel()


def default_order(state: SpectralState) -> int:
    """Per-axis quadrature order reaching 1e-8 normalization for the state's modes.

    Box/ring densities contain frequencies up to twice the largest index;
    ``2 n_max + 20`` Gauss-Legendre nodes resolve them to ~1e-12. Hermite
    densities are polynomial times Gaussian of degree 2 n_max, integrated
    exactly by ``n_max + 10`` Gauss-Hermite nodes.
    """
    n = state.max_index
    if state.basis.kind == OSCILLATOR:
        return n + 10
    return 2 * n + 20


def norm(state: SpectralState, t=None, order=None):
    t = state.t0 if t is None else t
    pts, w = quadrature(state.basis, order or default_order(state))
    return float(np.dot(w, state.density(pts, t)))
