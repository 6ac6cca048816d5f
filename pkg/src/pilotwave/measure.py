"""Pointer model of measurement: a system coupled to a pointer through ``a * omega * p_y``.

With the coupling dominating, the joint wave function is an exact sum of
branches ``c_n phi_n(x) g0(y - a omega_n t)`` (or ``psi0(x) g0(y - a x t)``
for a position measurement). Trajectories follow the conserved current of
the interaction Hamiltonian:

position          ``H = a x p_y``            v = (0, a x)
momentum          ``H = a p_x p_y``          j = a (Im Psi* d_y Psi, Im Psi* d_x Psi)
kinetic energy    ``H = a (p_x^2 / 2m) p_y`` j = (a/2m) (Re(d_y Psi* d_x Psi - Psi* d_xy Psi),
                                                     -Re(Psi* d_xx Psi))

The kinetic-energy operator is real, so its current has no ``Im`` form;
the expression above is fixed by requiring ``d_t |Psi|^2 + div j = 0``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ensemble import (
    BornDensity,
    DensitySpec,
    GaussianDensity,
    ProductDensity,
    TAG_POINTER,
    map_chunks,
    sample,
)
from .errors import BasisError, NodeTrapError
from .integrate import StepControl, debroglie_batch
from .spectral import (
    BOX,
    NODE_FACTOR,
    RING,
    Domain,
    GaussianPacket,
    SpectralState,
    spinor_velocity_field,
)

POSITION = "position"
MOMENTUM = "momentum"
KINETIC = "kinetic-energy"
DIAGONAL = "basis-diagonal"
OBSERVABLES = (POSITION, MOMENTUM, KINETIC, DIAGONAL)

SEPARATION = 5.0

MEASURE_CONTROL = StepControl(rtol=1e-9, atol=1e-11)


@dataclass(frozen=True)
class PointerSetup:
    """Coupling ``a``, pointer width ``sigma`` (std of ``|g0|^2``), duration ``T``.

    With ``free_evolution_off=False`` the system also evolves under its own
    Hamiltonian (only for observables commuting with it); the pointer's free
    Hamiltonian is always neglected (infinitely heavy pointer).
    """

    a: float = 1.0
    sigma: float = 1.0
    T: float = 1.0
    free_evolution_off: bool = True

    def __post_init__(self):
        if not (self.a > 0 and self.sigma > 0 and self.T > 0):
            raise ValueError("a, sigma and T must be positive")


def pointer_packet(y, sigma):
    """g0(y) = (2 pi sigma^2)^(-1/4) exp(-y^2 / 4 sigma^2) and its first two derivatives."""
    g = (2 * np.pi * sigma**2) ** -0.25 * np.exp(-(y**2) / (4 * sigma**2))
    g1 = -y / (2 * sigma**2) * g
    g2 = (y**2 / (4 * sigma**4) - 1 / (2 * sigma**2)) * g
    return g, g1, g2


def observable_values(system: SpectralState, observable: str):
    """Eigenvalue omega_n of the measured observable for each term of ``system``."""
    b = system.basis
    if system.dimension != 1:
        raise BasisError("pointer experiments use one-dimensional systems")
    if observable == MOMENTUM:
        if b.kind != RING:
            raise BasisError("momentum measurements need the ring basis")
        return b.wavenumber(system.modes[:, 0])
    if observable in (KINETIC, DIAGONAL):
        if b.kind not in (RING, BOX):
            raise BasisError(f"{observable} measurements need a box or ring basis")
        return system.energies.copy()
    if observable == POSITION:
        return None
    raise BasisError(f"unknown observable {observable!r}")


class JointState:
    """System-plus-pointer wave function in branch form.

    Coordinates are ``(x, y)``: system position and pointer reading.
    """

    dimension = 2

    def __init__(self, system: SpectralState, observable: str, setup: PointerSetup):
        if observable not in OBSERVABLES:
            raise BasisError(f"unknown observable {observable!r}")
        self.system = system
        self.observable = observable
        self.setup = setup
        self.omega = observable_values(system, observable)
        if observable == POSITION and not setup.free_evolution_off:
            raise BasisError("position coupling with free evolution has no branch form")
        self.mass = system.mass
        self.domain = system.domain.product(Domain(("line",), (-np.inf,), (np.inf,)))
        self.eps_node = NODE_FACTOR * system.basis.reference_density / (np.sqrt(2 * np.pi) * setup.sigma)

    @property
    def branch_values(self):
        """Distinct outcome values, ascending."""
        return None if self.omega is None else np.unique(self.omega)

    def _terms(self, q, t):
        """Psi and the derivatives the currents need, each shape (P,)."""
        x, y = q[:, 0], q[:, 1]
        a, sig = self.setup.a, self.setup.sigma
        s = self.system
        if self.observable == POSITION:
            psi, grad, lap = s._eval(x[:, None], np.full(x.size, s.t0))
            g, g1, g2 = pointer_packet(y - a * x * t, sig)
            return psi * g, None
        f, f1, f2 = s.basis.axis_functions(s.modes[:, 0], x)  # (M, P)
        c = s.coeffs[:, None]
        if not self.setup.free_evolution_off:
            c = c * np.exp(-1j * np.outer(s.energies, t - s.t0))
        g, g1, g2 = pointer_packet(y[None, :] - a * np.outer(self.omega, t), sig)
        out = {
            "psi": np.sum(c * f * g, axis=0),
            "x": np.sum(c * f1 * g, axis=0),
            "y": np.sum(c * f * g1, axis=0),
            "xx": np.sum(c * f2 * g, axis=0),
            "xy": np.sum(c * f1 * g1, axis=0),
        }
        return out["psi"], out

    def wave(self, q, t):
        q = np.atleast_2d(q)
        psi, _ = self._terms(q, np.broadcast_to(np.asarray(t, float), (q.shape[0],)))
        return psi

    def current(self, q, t):
        """Probability current (P, 2) and density (P,)."""
        q = np.atleast_2d(q)
        t = np.broadcast_to(np.asarray(t, float), (q.shape[0],))
        a, m = self.setup.a, self.mass
        psi, d = self._terms(q, t)
        rho = np.abs(psi) ** 2
        j = np.zeros(q.shape)
        if self.observable == POSITION:
            j[:, 1] = a * q[:, 0] * rho
            return j, rho
        pc = np.conj(psi)
        if self.observable == MOMENTUM:
            j[:, 0] = a * np.imag(pc * d["y"])
            j[:, 1] = a * np.imag(pc * d["x"])
        else:
            j[:, 0] = a / (2 * m) * np.real(np.conj(d["y"]) * d["x"] - pc * d["xy"])
            j[:, 1] = -a / (2 * m) * np.real(pc * d["xx"])
        if not self.setup.free_evolution_off:
            j[:, 0] += np.imag(pc * d["x"]) / m
        return j, rho

    def velocity_field(self, q, t):
        j, rho = self.current(q, t)
        safe = np.where(rho > 0, rho, 1.0)
        v = j / safe[:, None]
        v[rho <= 0] = 0.0
        return v, rho

    def collapsed_state(self, y_T, T):
        """Conditional system state at pointer reading ``y_T``: c_n g0(y_T - a omega_n T), renormalized."""
        s = self.system
        g, _, _ = pointer_packet(y_T - self.setup.a * self.omega * T, self.setup.sigma)
        c = s.coeffs * g
        if not self.setup.free_evolution_off:
            c = c * np.exp(-1j * s.energies * (T - s.t0))
        nrm = np.sqrt(np.sum(np.abs(c) ** 2))
        return SpectralState(s.basis, s.modes, c / nrm, s.t0)


def separation_ratio(values, a, T, sigma):
    """Smallest gap between branch pointer centers in units of the pointer width."""
    v = np.unique(values)
    if v.size < 2:
        return np.inf
    return float(np.min(np.diff(v)) * a * T / sigma)


@dataclass
class BranchRecord:
    index: int
    outcome: float
    y_T: float
    collapsed: SpectralState
    separation: float


@dataclass
class PointerRun:
    times: np.ndarray
    trajectory: np.ndarray  # (T, 2)
    reading: float
    declared: bool
    record: BranchRecord | None
    exclusive: bool = True


def _nearest_branch(values, y, a, t):
    return int(np.argmin(np.abs(y - a * values * t)))


def _branch_history(values, traj, times, a, sigma):
    """Occupied branch at each time where branches are separated (-1 elsewhere)."""
    out = np.full(times.size, -1)
    for k, t in enumerate(times):
        if separation_ratio(values, a, t, sigma) >= SEPARATION:
            out[k] = _nearest_branch(values, traj[k, 1], a, t)
    return out


def run_pointer(system, observable, setup: PointerSetup, q0, y0, ctrl: StepControl | None = None, samples=65) -> PointerRun:
    """Integrate one joint trajectory on [0, T] and read the pointer.

    A :class:`BranchRecord` is returned when the branch pointer centers are
    at least five pointer widths apart at ``T``.
    """
    joint = JointState(system, observable, setup)
    ctrl = ctrl or MEASURE_CONTROL
    times = np.linspace(0.0, setup.T, samples) if np.isscalar(samples) else np.asarray(samples, float)
    res = debroglie_batch(joint, np.array([[float(q0), float(y0)]]), times, ctrl)
    if res.trapped[0]:
        raise NodeTrapError(f"joint trajectory trapped at t={res.last_t[0]:.6g}", last=(res.last_t[0], res.last_y[0]))
    traj = res.y[0]
    y_T = float(traj[-1, 1])
    if joint.omega is None:
        return PointerRun(times, traj, y_T, True, None)
    values = joint.branch_values
    ratio = separation_ratio(values, setup.a, setup.T, setup.sigma)
    declared = ratio >= SEPARATION
    hist = _branch_history(values, traj, times, setup.a, setup.sigma)
    sep = hist[hist >= 0]
    exclusive = bool(sep.size == 0 or np.all(sep == sep[0]))
    record = None
    if declared:
        k = _nearest_branch(values, y_T, setup.a, setup.T)
        record = BranchRecord(k, float(values[k]), y_T, joint.collapsed_state(y_T, setup.T), ratio)
    return PointerRun(times, traj, y_T, declared, record, exclusive)


def fidelity(a: SpectralState, b: SpectralState):
    """|<a|b>| for states on the same basis (term-wise overlap)."""
    ca = {tuple(m): c for m, c in zip(a.modes, a.coeffs)}
    return float(abs(sum(np.conj(ca.get(tuple(m), 0.0)) * c for m, c in zip(b.modes, b.coeffs))))


def equilibrium_spec(system: SpectralState, setup: PointerSetup) -> DensitySpec:
    """``|Psi(x, y, 0)|^2 = |psi0(x)|^2 |g0(y)|^2``."""
    return ProductDensity([BornDensity(system), GaussianDensity(setup.sigma, truncate=6.0)])


@dataclass
class OutcomeStats:
    values: np.ndarray
    counts: np.ndarray
    frequencies: np.ndarray
    sigma: np.ndarray
    undeclared: int
    trapped: int
    q0: np.ndarray
    y0: np.ndarray
    outcome: np.ndarray
    y_T: np.ndarray
    separated: np.ndarray

    def rows(self):
        return [
            (i, self.q0[i], self.y0[i], self.outcome[i], self.y_T[i], self.separated[i]) for i in range(self.q0.size)
        ]


def _joint_chunk(joint, times, ctrl, q0):
    r = debroglie_batch(joint, q0, times, ctrl)
    return r.y, r.trapped


def ensemble_outcomes(
    system,
    observable,
    setup: PointerSetup,
    spec: DensitySpec | None,
    N: int,
    seed: int,
    ctrl: StepControl | None = None,
    workers: int = 1,
    samples: int = 33,
) -> OutcomeStats:
    """Outcome frequencies over ``N`` trials with initial (x, y) drawn from ``spec``.

    ``spec=None`` means quantum equilibrium. Frequencies use declared trials
    only; ``sigma`` is the binomial standard error.
    """
    from functools import partial

    joint = JointState(system, observable, setup)
    if joint.omega is None:
        raise BasisError("outcome statistics need a discrete observable")
    spec = spec or equilibrium_spec(system, setup)
    ctrl = ctrl or MEASURE_CONTROL
    q0 = sample(spec, N, seed, tag=TAG_POINTER)
    times = np.linspace(0.0, setup.T, samples)
    parts = map_chunks(partial(_joint_chunk, joint, times, ctrl), [q0], workers)
    y = np.concatenate([p[0] for p in parts])
    trapped = np.concatenate([p[1] for p in parts])
    values = joint.branch_values
    declared = separation_ratio(values, setup.a, setup.T, setup.sigma) >= SEPARATION
    yT = y[:, -1, 1]
    k = np.argmin(np.abs(yT[:, None] - setup.a * values[None, :] * setup.T), axis=1)
    ok = ~trapped & declared
    outcome = np.where(ok, values[k], np.nan)
    counts = np.array([np.sum(ok & (k == i)) for i in range(values.size)])
    n = max(int(ok.sum()), 1)
    freq = counts / n
    sig = np.sqrt(freq * (1 - freq) / n)
    return OutcomeStats(
        values,
        counts,
        freq,
        sig,
        int(np.sum(~ok & ~trapped)),
        int(trapped.sum()),
        q0[:, 0],
        q0[:, 1],
        outcome,
        yT,
        np.full(N, declared),
    )


# ---------------------------------------------------------------- subquantum measurement


@dataclass
class SubquantumResult:
    x_true: np.ndarray
    x_estimate: np.ndarray
    mean_abs_error: float
    fidelity: float
    conditional_fidelity: float

    @property
    def disturbance(self):
        return 1.0 - self.fidelity


def traced_fidelity(system: SpectralState, a_dt, sigma, order=None):
    """``<psi0| rho_after |psi0>`` with the pointer traced out.

    ``rho_after(x, x') = psi0(x) psi0*(x') exp(-(a dt)^2 (x - x')^2 / (8 sigma^2))``.
    """
    from .spectral import default_order, quadrature

    pts, w = quadrature(system.basis, order or default_order(system) + 40)
    p = w * system.density(pts, system.t0)
    x = pts[:, 0]
    K = np.exp(-(a_dt**2) * (x[:, None] - x[None, :]) ** 2 / (8 * sigma**2))
    return float(p @ K @ p)


def subquantum_measure(
    system: SpectralState,
    sigma: float,
    w: float,
    a: float,
    dt: float,
    N: int,
    seed: int,
    ctrl: StepControl | None = None,
    workers: int = 1,
) -> SubquantumResult:
    """Position measurement with a pointer ensemble of width ``w`` (w = sigma is equilibrium).

    System positions are Born-distributed; pointer positions come from a
    Gaussian of width ``w`` truncated at 6 w. The estimate is ``y_T / (a dt)``.
    """
    if not (0 < w <= sigma):
        raise ValueError("need 0 < w <= sigma")
    if not (a * dt > 0):
        raise ValueError("a * dt must be positive")
    from functools import partial

    setup = PointerSetup(a=a, sigma=sigma, T=dt)
    joint = JointState(system, POSITION, setup)
    spec = ProductDensity([BornDensity(system), GaussianDensity(w, truncate=6.0)])
    q0 = sample(spec, N, seed, tag=TAG_POINTER)
    ctrl = ctrl or MEASURE_CONTROL
    parts = map_chunks(partial(_joint_chunk, joint, np.array([0.0, dt]), ctrl), [q0], workers)
    y = np.concatenate([p[0] for p in parts])
    x_true = y[:, -1, 0]
    est = y[:, -1, 1] / (a * dt)
    err = float(np.mean(np.abs(est - x_true)))
    F = traced_fidelity(system, a * dt, sigma)
    # conditional state psi0(x) g0(y_T - a x dt) for each trial, overlap with psi0
    from .spectral import default_order, quadrature

    pts, wq = quadrature(system.basis, default_order(system) + 40)
    psi = system.evaluate(pts, system.t0).value
    g, _, _ = pointer_packet(y[:, -1, 1][:, None] - a * dt * pts[None, :, 0], sigma)
    num = np.abs((wq * np.abs(psi) ** 2 * g).sum(axis=1))
    den = np.sqrt((wq * np.abs(psi) ** 2 * g**2).sum(axis=1))
    cond = float(np.mean(num / den))
    return SubquantumResult(x_true, est, err, F, cond)


# ---------------------------------------------------------------- Stern-Gerlach


class SpinorField:
    """Two Gaussian spinor components for the 1D impulsive Stern-Gerlach model."""

    dimension = 1

    def __init__(self, up: GaussianPacket | None, down: GaussianPacket | None):
        self.up, self.down = up, down
        comps = [c for c in (up, down) if c is not None]
        self.mass = comps[0].mass
        self.domain = comps[0].domain
        self.eps_node = max(c.eps_node for c in comps)

    def velocity_field(self, q, t):
        return spinor_velocity_field(self.up, self.down, q, t)


def stern_gerlach_field(c_up, c_down, width, lam, mass=1.0):
    """Components after the kick ``exp(+-i lam z)``: packets with momenta +-lam."""
    nrm = abs(c_up) ** 2 + abs(c_down) ** 2
    if abs(nrm - 1) > 1e-12:
        raise ValueError("|c_up|^2 + |c_down|^2 must be 1")
    up = GaussianPacket(width, 0.0, lam, mass, c_up) if c_up != 0 else None
    down = GaussianPacket(width, 0.0, -lam, mass, c_down) if c_down != 0 else None
    return SpinorField(up, down)


def sg_separated(width, lam, t, mass=1.0):
    g = GaussianPacket(width, 0.0, lam, mass)
    return 2 * abs(lam) * t / mass >= SEPARATION * g.width_at(t)


@dataclass
class SternGerlachResult:
    times: np.ndarray
    z: np.ndarray  # (N, T)
    outcome: np.ndarray  # +1 up, -1 down, 0 undeclared
    separated: bool

    @property
    def up_fraction(self):
        d = self.outcome != 0
        return float(np.mean(self.outcome[d] > 0)) if d.any() else np.nan


def stern_gerlach(c_up, c_down, width, lam, t_end, z0, mass=1.0, ctrl=None, samples=33, workers=1):
    """Trajectories from start points ``z0`` (scalar or array) through the kick.

    The outcome is the branch whose packet centre is nearest the final z,
    declared only when the centres are five packet widths apart.
    """
    from functools import partial

    field = stern_gerlach_field(c_up, c_down, width, lam, mass)
    z0 = np.atleast_1d(np.asarray(z0, dtype=float))
    times = np.linspace(0.0, t_end, samples)
    ctrl = ctrl or MEASURE_CONTROL
    parts = map_chunks(partial(_joint_chunk, field, times, ctrl), [z0[:, None]], workers)
    z = np.concatenate([p[0] for p in parts])[:, :, 0]
    sep = bool(sg_separated(width, lam, t_end, mass))
    zT = z[:, -1]
    c = lam / mass * t_end
    outcome = np.where(np.abs(zT - c) < np.abs(zT + c), 1, -1)
    if field.up is None:
        outcome[:] = -1
    if field.down is None:
        outcome[:] = 1
    if not sep and field.up is not None and field.down is not None:
        outcome[:] = 0
    outcome[np.isnan(zT)] = 0
    return SternGerlachResult(times, z, outcome, sep)


def sg_equilibrium_start(width, N, seed):
    """Born start points: at t=0 both components share the density of one packet."""
    return sample(GaussianDensity(width, truncate=6.0), N, seed, tag=TAG_POINTER)[:, 0]
