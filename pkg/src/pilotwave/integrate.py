"""Trajectory integration: de Broglie's first-order law and Bohm's second-order law.

All trajectories in a batch advance with their own adaptive step
(Dormand-Prince 5(4), PI control, 4th-order dense output), so a trajectory's
result does not depend on which other trajectories share its batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NodeTrapError
from .spectral import WALL_SLACK

# Dormand-Prince 5(4) tableau and dense-output polynomial coefficients
_C = np.array([0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
]
_B = np.array([35 / 384, 0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84])
_E = np.array([-71 / 57600, 0, 71 / 16695, -71 / 1920, 17253 / 339200, -22 / 525, 1 / 40])
_P = np.array(
    [
        [1, -8048581381 / 2820520608, 8663915743 / 2820520608, -12715105075 / 11282082432],
        [0, 0, 0, 0],
        [0, 131558114200 / 32700410799, -68118460800 / 10900136933, 87487479700 / 32700410799],
        [0, -1754552775 / 470086768, 14199869525 / 1410260304, -10690763975 / 1880347072],
        [0, 127303824393 / 49829197408, -318862633887 / 49829197408, 701980252875 / 199316789632],
        [0, -282668133 / 205662961, 2019193451 / 616988883, -1453857185 / 822651844],
        [0, 40617522 / 29380423, -110615467 / 29380423, 69997945 / 29380423],
    ]
)

SAFETY = 0.9
BETA = 0.04
ALPHA = 0.2 - 0.75 * BETA
FAC_MIN, FAC_MAX = 0.2, 10.0

OK, TRAPPED = 0, 1


@dataclass(frozen=True)
class StepControl:
    """Error tolerances and step limits.

    A trial step is rejected when any stage lands where the density is below
    ``node_guard * eps_node`` or when the endpoint leaves the domain. After
    ``max_rejects`` consecutive rejections, a step below ``dt_min`` or more
    than ``max_steps`` attempted steps, the trajectory is declared trapped.
    """

    rtol: float = 1e-8
    atol: float = 1e-10
    dt_min: float = 1e-12
    dt_max: float = 0.5
    node_guard: float = 10.0
    max_rejects: int = 20
    max_steps: int = 1_000_000

    def __post_init__(self):
        if not (self.rtol > 0 and self.atol > 0):
            raise ValueError("rtol and atol must be positive")
        if not (0 < self.dt_min < self.dt_max):
            raise ValueError("need 0 < dt_min < dt_max")


@dataclass(frozen=True)
class TrajectoryPoint:
    q: np.ndarray
    t: float


@dataclass(frozen=True)
class PhasePoint:
    q: np.ndarray
    p: np.ndarray
    t: float


@dataclass
class BatchResult:
    """Integrated batch: ``y`` has shape (K, T, n); rows of trapped trajectories
    are NaN from the first output time they failed to reach."""

    times: np.ndarray
    y: np.ndarray
    status: np.ndarray
    last_t: np.ndarray
    last_y: np.ndarray
    steps: np.ndarray
    rejects: np.ndarray

    @property
    def trapped(self):
        return self.status == TRAPPED


def _rms(x):
    # explicit column loop: the same rounding for a row whatever the batch size
    acc = x[:, 0] * x[:, 0]
    for j in range(1, x.shape[1]):
        acc = acc + x[:, j] * x[:, j]
    return np.sqrt(acc / x.shape[1])


def solve_batch(fun, y0, t_eval, ctrl: StepControl, project=None, t0=None) -> BatchResult:
    """Integrate ``dy/dt = fun(t, y)`` for K independent trajectories.

    ``fun(t, y)`` receives times (k,) and states (k, n) and returns the
    derivative (k, n) and a boolean mask of stage evaluations that are
    acceptable. ``project(y)`` may correct endpoints and returns
    ``(y, ok)``. ``t_eval`` must be monotone in the direction of
    integration; ``t0`` defaults to ``t_eval[0]``.
    """
    y0 = np.array(y0, dtype=float)
    if y0.ndim == 1:
        y0 = y0[None, :]
    t_eval = np.asarray(t_eval, dtype=float)
    K, n = y0.shape
    T = t_eval.size
    t_start = float(t_eval[0] if t0 is None else t0)
    t_end = float(t_eval[-1])
    s = 1.0 if t_end >= t_start else -1.0
    if np.any(s * np.diff(t_eval) < 0):
        raise ValueError("t_eval must be monotone in the integration direction")

    out = np.full((K, T, n), np.nan)
    nxt = np.zeros(K, dtype=int)
    t = np.full(K, t_start)
    y = y0.copy()
    status = np.zeros(K, dtype=np.int8)
    steps = np.zeros(K, dtype=np.int64)
    rejects = np.zeros(K, dtype=np.int64)
    consec = np.zeros(K, dtype=np.int64)
    err_old = np.full(K, 1e-4)

    # outputs at the start time
    while True:
        m = (nxt < T)
        m[m] = s * t_eval[nxt[m]] <= s * t_start
        if not m.any():
            break
        out[m, nxt[m]] = y[m]
        nxt[m] += 1

    done = nxt >= T
    f, ok = fun(t, y)
    status[~ok & ~done] = TRAPPED
    active = ~done & (status == OK)

    # initial step (Hairer & Wanner II.4)
    h = np.zeros(K)
    if active.any():
        scale = ctrl.atol + ctrl.rtol * np.abs(y)
        d0 = _rms(y / scale)
        d1 = _rms(f / scale)
        h0 = np.where((d0 < 1e-5) | (d1 < 1e-5), 1e-6, 0.01 * d0 / np.maximum(d1, 1e-300))
        h0 = np.minimum(h0, np.abs(t_end - t))
        f1, _ = fun(t + s * h0, y + s * h0[:, None] * f)
        d2 = _rms((f1 - f) / scale) / np.maximum(h0, 1e-300)
        dm = np.maximum(d1, d2)
        h1 = np.where(dm <= 1e-15, np.maximum(1e-6, h0 * 1e-3), (0.01 / np.maximum(dm, 1e-300)) ** 0.2)
        h = np.minimum(np.minimum(100 * h0, h1), ctrl.dt_max)

    while active.any():
        idx = np.flatnonzero(active)
        ti, yi, fi = t[idx], y[idx], f[idx]
        remaining = np.abs(t_end - ti)
        hi = np.minimum(h[idx], remaining)
        last = hi >= remaining * (1 - 1e-12)
        hs = s * hi
        ks = [fi]
        good = np.ones(idx.size, dtype=bool)
        for st in range(1, 6):
            ys = yi + hs[:, None] * sum(a * k for a, k in zip(_A[st], ks))
            kst, okst = fun(ti + _C[st] * hs, ys)
            good &= okst
            ks.append(kst)
        y_new = yi + hs[:, None] * sum(b * k for b, k in zip(_B, ks))
        if project is not None:
            y_new, okp = project(y_new)
            good &= okp
        t_new = np.where(last, t_end, ti + hs)
        k7, ok7 = fun(t_new, y_new)
        good &= ok7
        ks.append(k7)
        err = hs[:, None] * sum(e * k for e, k in zip(_E, ks))
        scale = ctrl.atol + ctrl.rtol * np.maximum(np.abs(yi), np.abs(y_new))
        en = _rms(err / scale)
        good &= np.isfinite(en) & np.all(np.isfinite(y_new), axis=1)
        acc = good & (en <= 1.0)

        # accepted steps: dense output, then advance
        if acc.any():
            a = np.flatnonzero(acc)
            ia = idx[a]
            # dense-output polynomial coefficients Q[a, :, m] = sum_i k_i P[i, m]
            Q = [sum(_P[i, m] * ks[i][a] for i in range(7) if _P[i, m] != 0) for m in range(4)]
            while True:
                pend = nxt[ia] < T
                if not pend.any():
                    break
                sel = np.flatnonzero(pend)
                tj = t_eval[nxt[ia[sel]]]
                inside = s * tj <= s * t_new[a[sel]]
                if not inside.any():
                    break
                sel = sel[inside]
                tj = tj[inside]
                theta = (tj - ti[a[sel]]) / hs[a[sel]]
                poly = Q[0][sel] * theta[:, None]
                pw = theta
                for m in range(1, 4):
                    pw = pw * theta
                    poly = poly + Q[m][sel] * pw[:, None]
                val = yi[a[sel]] + hs[a[sel], None] * poly
                hit_end = (tj == t_new[a[sel]])
                val[hit_end] = y_new[a[sel]][hit_end]
                out[ia[sel], nxt[ia[sel]]] = val
                nxt[ia[sel]] += 1
            t[ia] = t_new[a]
            y[ia] = y_new[a]
            f[ia] = k7[a]
            steps[ia] += 1
            consec[ia] = 0
            ea = np.maximum(en[a], 1e-10)
            fac = SAFETY * ea ** (-ALPHA) * err_old[ia] ** BETA
            h[ia] = np.minimum(hi[a] * np.clip(fac, FAC_MIN, FAC_MAX), ctrl.dt_max)
            err_old[ia] = ea
            finished = last[a] | (nxt[ia] >= T)
            active[ia[finished]] = False

        rej = ~acc
        if rej.any():
            r = np.flatnonzero(rej)
            ir = idx[r]
            rejects[ir] += 1
            consec[ir] += 1
            fac = np.where(good[r], np.clip(SAFETY * np.maximum(en[r], 1e-10) ** -0.2, FAC_MIN, 1.0), 0.25)
            fac = np.where(np.isfinite(fac), fac, 0.25)
            h[ir] = hi[r] * fac
            trapped = (consec[ir] >= ctrl.max_rejects) | (h[ir] < ctrl.dt_min)
            status[ir[trapped]] = TRAPPED
            active[ir[trapped]] = False

        over = active & (steps + rejects >= ctrl.max_steps)
        status[over] = TRAPPED
        active[over] = False

    return BatchResult(t_eval, out, status, t, y, steps, rejects)


def debroglie_rhs(field, ctrl):
    guard = ctrl.node_guard * field.eps_node

    def rhs(t, q):
        v, rho = field.velocity_field(q, t)
        return v, rho > guard

    return rhs


def _compiled_batch(spec, q0, times, ctrl, t0=None, bohm=None) -> BatchResult:
    """Run the compiled integrator; ``bohm=(hq, omega2)`` switches to (q, p) Bohm dynamics."""
    from ._kernels import guided_batch

    q0 = np.atleast_2d(np.asarray(q0, dtype=float))
    times = np.asarray(times, dtype=float)
    t_start = float(times[0] if t0 is None else t0)
    if np.any((1.0 if times[-1] >= t_start else -1.0) * np.diff(times) < 0):
        raise ValueError("t_eval must be monotone in the integration direction")
    k = spec["kernel"]
    dom = spec["domain"]
    d = q0.shape[1]
    dq = d // 2 if bohm else d
    walls = np.array([kd == "interval" for kd in dom.kinds])
    lo = np.where(walls, np.array(dom.lo, float), 0.0)
    hi = np.where(walls, np.array(dom.hi, float), 1.0)
    if bohm:
        walls, lo, hi = (np.concatenate([w, np.zeros(dq, w.dtype)]) for w in (walls, lo, hi))
    ctl = np.array(
        [ctrl.rtol, ctrl.atol, ctrl.dt_min, ctrl.dt_max, ctrl.max_rejects, ctrl.max_steps,
         SAFETY, ALPHA, BETA, FAC_MIN, FAC_MAX],
        dtype=float,
    )
    A = np.zeros((6, 5))
    for i, row in enumerate(_A):
        A[i, : len(row)] = row
    out, status, t, y, steps, rejects = guided_batch(
        q0, times, t_start, float(spec["t_ref"]), k.kinds, k.ks, k.amps, k.idx, k.nidx, k.nmax, k.mix, k.V,
        k.nfun, k.E, k.quad, np.ascontiguousarray(np.reshape(spec["C"], (k.nfun[0], k.nfun[1])), dtype=complex),
        np.asarray(spec["masses"], float)[:dq], lo, hi, walls, WALL_SLACK,
        ctrl.node_guard * spec["eps_node"], ctl, A, np.append(_B, 0.0), _C, _E, _P,
        bohm is not None, *(bohm or (1e-5, 0.0)),
    )
    return BatchResult(times, out, status, t, y, steps, rejects)


def debroglie_batch(field, q0, times, ctrl: StepControl, t0=None) -> BatchResult:
    """De Broglie trajectories ``dq/dt = v(q, t)`` for a batch of start points.

    ``field`` is any object with ``velocity_field(q, t) -> (v, density)``,
    ``eps_node`` and ``domain`` (spectral states, joint pointer states,
    pair states, mode oscillators). Fields exposing ``compiled_field()``
    run through the compiled integrator instead.
    """
    if hasattr(field, "compiled_field"):
        return _compiled_batch(field.compiled_field(), q0, times, ctrl, t0)
    return solve_batch(debroglie_rhs(field, ctrl), q0, times, ctrl, project=field.domain.project, t0=t0)


def integrate_debroglie(state, q0, t0, t1, ctrl: StepControl | None = None, samples=None):
    """Single de Broglie trajectory from ``(q0, t0)``; backward if ``t1 < t0``.

    Returns a TrajectoryPoint for every time in ``samples`` (default
    ``[t0, t1]``). Raises :class:`NodeTrapError` carrying the last good point.
    """
    ctrl = ctrl or StepControl()
    q0 = np.atleast_1d(np.asarray(q0, dtype=float))
    if not np.all(state.domain.contains(q0[None, :], slack=0.0)):
        from .errors import DomainError

        raise DomainError("initial position outside the domain")
    times = np.array([t0, t1] if samples is None else samples, dtype=float)
    res = debroglie_batch(state, q0[None, :], times, ctrl, t0=t0)
    if res.trapped[0]:
        raise NodeTrapError(
            f"trajectory trapped near a node at t={res.last_t[0]:.6g}",
            last=TrajectoryPoint(res.last_y[0].copy(), float(res.last_t[0])),
        )
    return [TrajectoryPoint(res.y[0, j].copy(), float(tj)) for j, tj in enumerate(times)]


def gradient_step(state):
    """Central-difference step for grad Q: 1e-5 of the basis length scale."""
    return 1e-5 * state.basis.scale


def bohm_rhs(state, ctrl):
    d = state.dimension
    m = state.mass
    hq = gradient_step(state)
    guard = ctrl.node_guard * state.eps_node
    offsets = np.vstack([np.zeros(d), hq * np.eye(d), -hq * np.eye(d)])  # (2d+1, d)

    def rhs(t, y):
        q, p = y[:, :d], y[:, d:]
        k = q.shape[0]
        pts = (q[:, None, :] + offsets[None, :, :]).reshape(-1, d)
        Q, rho = state.quantum_potential_field(pts, np.repeat(t, offsets.shape[0]))
        Q = Q.reshape(k, -1)
        rho = rho.reshape(k, -1)
        gradQ = (Q[:, 1 : d + 1] - Q[:, d + 1 :]) / (2 * hq)
        force = -gradQ
        if state.basis.kind == "oscillator-hermite":
            force = force - m * state.basis.omega**2 * q
        ok = (rho[:, 0] > guard) & np.all(rho > 0, axis=1)
        return np.hstack([p / m, force]), ok

    return rhs


def bohm_batch(state, q0, p0, times, ctrl: StepControl, t0=None) -> BatchResult:
    """Bohm's Newtonian dynamics ``m q'' = -grad(V + Q)`` as a first-order (q, p) system.

    grad Q uses central differences of the analytic Q with step
    ``1e-5 * L`` (see :func:`gradient_step`).
    """
    d = state.dimension
    y0 = np.hstack([np.atleast_2d(q0), np.atleast_2d(p0)])
    if hasattr(state, "compiled_field"):
        omega2 = state.basis.omega**2 if state.basis.kind == "oscillator-hermite" else 0.0
        return _compiled_batch(state.compiled_field(), y0, times, ctrl, t0, bohm=(gradient_step(state), omega2))
    dom = state.domain

    def project(y):
        q, ok = dom.project(y[:, :d])
        return np.hstack([q, y[:, d:]]), ok

    return solve_batch(bohm_rhs(state, ctrl), y0, times, ctrl, project=project, t0=t0)


def phase_gradient(state, q, t):
    """grad S = m v at points (P, d); unchecked near nodes."""
    q = np.atleast_2d(q)
    v, _ = state.velocity_field(q, np.broadcast_to(np.asarray(t, float), (q.shape[0],)).copy())
    return state.mass * v


def integrate_bohm(state, x0: PhasePoint, t1, ctrl: StepControl | None = None, samples=None):
    """Single Bohm trajectory; returns PhasePoints at ``samples`` (default ``[x0.t, t1]``)."""
    ctrl = ctrl or StepControl()
    d = state.dimension
    times = np.array([x0.t, t1] if samples is None else samples, dtype=float)
    res = bohm_batch(state, np.atleast_1d(x0.q)[None, :], np.atleast_1d(x0.p)[None, :], times, ctrl, t0=x0.t)
    if res.trapped[0]:
        ly = res.last_y[0]
        raise NodeTrapError(
            f"Bohm trajectory trapped at t={res.last_t[0]:.6g}",
            last=PhasePoint(ly[:d].copy(), ly[d:].copy(), float(res.last_t[0])),
        )
    return [PhasePoint(res.y[0, j, :d].copy(), res.y[0, j, d:].copy(), float(tj)) for j, tj in enumerate(times)]
