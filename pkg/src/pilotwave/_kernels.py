"""Compiled point-wise evaluation of separable two-axis mode sums.

Every wave function in the package that lives on a product basis reduces to

    psi(x, y, t) = sum_ij C_ij F_i(x, t) G_j(y, t),
    F_i(x, t) = exp(-i E_i tau) sum_b V_bi phi_b(x)

with ``phi_b`` a box sine, ring exponential or Hermite function (or the
constant 1 for a missing second axis). The kernel evaluates value, gradient
and optionally Laplacian point by point with trigonometric and Hermite
recurrences, so the cost is a handful of transcendental calls per point.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

AXIS_BOX, AXIS_RING, AXIS_OSC, AXIS_ONE = 0, 1, 2, 3


@njit(cache=True, inline="always")
def _axis_raw(kind, k, amp, x, idx, nidx, nmax, s, c, h, f, f1, f2):
    """Raw basis values (complex) for the listed indices at one coordinate."""
    if kind == AXIS_BOX:
        th = k * x
        s[0] = 0.0
        c[0] = 1.0
        if nmax >= 1:
            s[1] = math.sin(th)
            c[1] = math.cos(th)
            two_c = 2.0 * c[1]
            for m in range(1, nmax):
                s[m + 1] = two_c * s[m] - s[m - 1]
                c[m + 1] = two_c * c[m] - c[m - 1]
        for j in range(nidx):
            n = idx[j]
            kn = k * n
            v = amp * s[n]
            f[j] = v
            f1[j] = amp * kn * c[n]
            f2[j] = -kn * kn * v
    elif kind == AXIS_RING:
        # exp(i n k x) for n in [-nmax, nmax]; s/c hold cos/sin of m k x, m >= 0
        th = k * x
        s[0] = 0.0
        c[0] = 1.0
        if nmax >= 1:
            s[1] = math.sin(th)
            c[1] = math.cos(th)
            two_c = 2.0 * c[1]
            for m in range(1, nmax):
                s[m + 1] = two_c * s[m] - s[m - 1]
                c[m + 1] = two_c * c[m] - c[m - 1]
        for j in range(nidx):
            n = idx[j]
            m = abs(n)
            sg = 1.0 if n >= 0 else -1.0
            v = amp * complex(c[m], sg * s[m])
            kn = k * n
            f[j] = v
            f1[j] = 1j * kn * v
            f2[j] = -kn * kn * v
    elif kind == AXIS_OSC:
        xi = k * x
        h[0] = amp * math.exp(-0.5 * xi * xi)
        h[1] = math.sqrt(2.0) * xi * h[0]
        for m in range(1, nmax + 1):
            h[m + 1] = math.sqrt(2.0 / (m + 1)) * xi * h[m] - math.sqrt(m / (m + 1.0)) * h[m - 1]
        for j in range(nidx):
            n = idx[j]
            lower = h[n - 1] if n > 0 else 0.0
            f[j] = h[n]
            f1[j] = k * (math.sqrt(n / 2.0) * lower - math.sqrt((n + 1) / 2.0) * h[n + 1])
            f2[j] = k * k * (xi * xi - (2 * n + 1)) * h[n]
    else:
        f[0] = 1.0
        f1[0] = 0.0
        f2[0] = 0.0


@njit(cache=True)
def mode_sum(q, tau, kinds, ks, amps, idx, nidx, nmax, mix, V, nfun, E, quad, C, want_lap):
    """Evaluate psi, grad psi and (optionally) lap psi at points q (P, 2).

    Axis ``a`` uses raw indices ``idx[a, :nidx[a]]``; if ``mix[a]`` the axis
    functions are ``V[a, :nidx[a], :nfun[a]]``-combinations of the raw ones,
    otherwise raw function ``j`` is axis function ``j``. ``E[a, :nfun[a]]``
    are the axis energies and ``C`` has shape (nfun[0], nfun[1]).

    When ``quad[a, 0]`` is set the energies follow ``e2 n^2 + e1 |n| + e0``
    with ``(e2, e1, e0) = quad[a, 1:]`` and the phases come from a
    multiplicative recurrence instead of one sincos per function.
    """
    P = q.shape[0]
    psi = np.empty(P, dtype=np.complex128)
    grad = np.empty((P, 2), dtype=np.complex128)
    lap = np.zeros(P, dtype=np.complex128)
    nm = max(nmax[0], nmax[1]) + 2
    nr = max(nidx[0], nidx[1])
    nf = max(nfun[0], nfun[1])
    s = np.empty(nm)
    c = np.empty(nm)
    h = np.empty(nm + 1)
    r0 = np.empty(nr, dtype=np.complex128)
    r1 = np.empty(nr, dtype=np.complex128)
    r2 = np.empty(nr, dtype=np.complex128)
    F0 = np.empty((2, nf), dtype=np.complex128)
    F1 = np.empty((2, nf), dtype=np.complex128)
    F2 = np.empty((2, nf), dtype=np.complex128)
    ph_tab = np.empty(nm, dtype=np.complex128)
    nx = nfun[0]
    ny = nfun[1]
    for p in range(P):
        t = tau[p]
        for a in range(2):
            _axis_raw(kinds[a], ks[a], amps[a], q[p, a], idx[a], nidx[a], nmax[a], s, c, h, r0, r1, r2)
            if quad[a, 0] != 0.0:
                e2 = quad[a, 1]
                e1 = quad[a, 2]
                e0 = quad[a, 3]
                ph_tab[0] = complex(math.cos(e0 * t), -math.sin(e0 * t)) if e0 != 0.0 else 1.0
                r = complex(math.cos((e2 + e1) * t), -math.sin((e2 + e1) * t))
                if e1 == 0.0:
                    w = r * r
                else:
                    w = complex(math.cos(2 * e2 * t), -math.sin(2 * e2 * t))
                for m in range(nmax[a]):
                    ph_tab[m + 1] = ph_tab[m] * r
                    r = r * w
            for e in range(nfun[a]):
                if mix[a]:
                    v0 = 0j
                    v1 = 0j
                    v2 = 0j
                    for b in range(nidx[a]):
                        w = V[a, b, e]
                        v0 += w * r0[b]
                        v1 += w * r1[b]
                        v2 += w * r2[b]
                else:
                    v0 = r0[e]
                    v1 = r1[e]
                    v2 = r2[e]
                if quad[a, 0] != 0.0:
                    z = ph_tab[abs(idx[a, e])]
                else:
                    ph = E[a, e] * t
                    z = complex(math.cos(ph), -math.sin(ph))
                F0[a, e] = v0 * z
                F1[a, e] = v1 * z
                F2[a, e] = v2 * z
        val = 0j
        gx = 0j
        gy = 0j
        lp = 0j
        for i in range(nx):
            g0 = 0j
            g1 = 0j
            g2 = 0j
            for j in range(ny):
                cij = C[i, j]
                if cij != 0:
                    g0 += cij * F0[1, j]
                    g1 += cij * F1[1, j]
                    if want_lap:
                        g2 += cij * F2[1, j]
            val += F0[0, i] * g0
            gx += F1[0, i] * g0
            gy += F0[0, i] * g1
            if want_lap:
                lp += F2[0, i] * g0 + F0[0, i] * g2
        psi[p] = val
        grad[p, 0] = gx
        grad[p, 1] = gy
        lap[p] = lp
    return psi, grad, lap


class AxisTable:
    """Per-axis kernel inputs: basis kind/scale, raw indices, optional mixing, energies."""

    def __init__(self, kind, k, amp, indices, energies, mixing=None, quadratic=None):
        self.quadratic = quadratic
        self.kind = kind
        self.k = float(k)
        self.amp = float(amp)
        self.indices = np.asarray(indices, dtype=np.int64)
        self.energies = np.asarray(energies, dtype=float)
        self.mixing = None if mixing is None else np.asarray(mixing, dtype=np.complex128)
        nfun = self.indices.size if self.mixing is None else self.mixing.shape[1]
        if self.energies.size != nfun:
            raise ValueError("one energy per axis function required")
        self.nfun = nfun

    @classmethod
    def unit(cls):
        return cls(AXIS_ONE, 0.0, 1.0, [0], [0.0])


class SeparableSum:
    """Packed two-axis tables; ``__call__`` evaluates at points and times."""

    def __init__(self, axes):
        if len(axes) == 1:
            axes = [axes[0], AxisTable.unit()]
        self.axes = axes
        nr = max(a.indices.size for a in axes)
        nf = max(a.nfun for a in axes)
        self.kinds = np.array([a.kind for a in axes], dtype=np.int64)
        self.ks = np.array([a.k for a in axes])
        self.amps = np.array([a.amp for a in axes])
        self.idx = np.zeros((2, nr), dtype=np.int64)
        self.nidx = np.array([a.indices.size for a in axes], dtype=np.int64)
        self.nmax = np.array([int(np.abs(a.indices).max()) + 1 for a in axes], dtype=np.int64)
        self.mix = np.array([a.mixing is not None for a in axes])
        self.V = np.zeros((2, nr, nf), dtype=np.complex128)
        self.nfun = np.array([a.nfun for a in axes], dtype=np.int64)
        self.E = np.zeros((2, nf))
        self.quad = np.zeros((2, 4))
        for i, a in enumerate(axes):
            if a.quadratic is not None and a.mixing is None:
                self.quad[i] = (1.0, *a.quadratic)
            self.idx[i, : a.indices.size] = a.indices
            if a.mixing is not None:
                self.V[i, : a.mixing.shape[0], : a.mixing.shape[1]] = a.mixing
            self.E[i, : a.nfun] = a.energies

    def __call__(self, C, q, tau, laplacian=True):
        """``C`` is (nfun0, nfun1) complex; ``q`` (P, d) with d = 1 or 2."""
        q = np.asarray(q, dtype=float)
        if q.shape[1] == 1:
            q2 = np.zeros((q.shape[0], 2))
            q2[:, 0] = q[:, 0]
            q = q2
        C = np.ascontiguousarray(np.asarray(C, dtype=np.complex128).reshape(self.nfun[0], self.nfun[1]))
        return mode_sum(
            np.ascontiguousarray(q),
            np.ascontiguousarray(tau, dtype=float),
            self.kinds,
            self.ks,
            self.amps,
            self.idx,
            self.nidx,
            self.nmax,
            self.mix,
            self.V,
            self.nfun,
            self.E,
            self.quad,
            C,
            laplacian,
        )


@njit(cache=True)
def mode_plane(q, t, t_start, dt, W, D, C0, k, amp):
    """Two-axis Hermite sum with interpolated time-dependent axis functions.

    ``W[g]`` (n, s) holds the columns ``f_i = sum_b W[g, b, i] h_b`` at grid
    time ``t_start + g dt`` and ``D[g]`` their time derivatives; between grid
    points both are cubic-Hermite interpolated. Returns psi and grad at
    points q (P, 2) and per-point times t (P,).
    """
    P = q.shape[0]
    G, n, s = W.shape
    psi = np.empty(P, dtype=np.complex128)
    grad = np.empty((P, 2), dtype=np.complex128)
    Wt = np.empty((n, s), dtype=np.complex128)
    h = np.empty((2, n + 1))
    d = np.empty((2, n))
    f = np.empty((2, s), dtype=np.complex128)
    f1 = np.empty((2, s), dtype=np.complex128)
    for p in range(P):
        x = (t[p] - t_start) / dt
        g = int(math.floor(x))
        if g < 0:
            g = 0
        if g > G - 2:
            g = G - 2
        u = x - g
        u2 = u * u
        u3 = u2 * u
        h00 = 2 * u3 - 3 * u2 + 1
        h10 = (u3 - 2 * u2 + u) * dt
        h01 = -2 * u3 + 3 * u2
        h11 = (u3 - u2) * dt
        for b in range(n):
            for i in range(s):
                Wt[b, i] = h00 * W[g, b, i] + h10 * D[g, b, i] + h01 * W[g + 1, b, i] + h11 * D[g + 1, b, i]
        for a in range(2):
            xi = k * q[p, a]
            h[a, 0] = amp * math.exp(-0.5 * xi * xi)
            h[a, 1] = math.sqrt(2.0) * xi * h[a, 0]
            for m in range(1, n):
                h[a, m + 1] = math.sqrt(2.0 / (m + 1)) * xi * h[a, m] - math.sqrt(m / (m + 1.0)) * h[a, m - 1]
            for m in range(n):
                lower = h[a, m - 1] if m > 0 else 0.0
                d[a, m] = k * (math.sqrt(m / 2.0) * lower - math.sqrt((m + 1) / 2.0) * h[a, m + 1])
            for i in range(s):
                v0 = 0j
                v1 = 0j
                for b in range(n):
                    v0 += Wt[b, i] * h[a, b]
                    v1 += Wt[b, i] * d[a, b]
                f[a, i] = v0
                f1[a, i] = v1
        val = 0j
        gx = 0j
        gy = 0j
        for i in range(s):
            g0 = 0j
            g1 = 0j
            for j in range(s):
                c = C0[i, j]
                g0 += c * f[1, j]
                g1 += c * f1[1, j]
            val += f[0, i] * g0
            gx += f1[0, i] * g0
            gy += f[0, i] * g1
        psi[p] = val
        grad[p, 0] = gx
        grad[p, 1] = gy
    return psi, grad


@njit(cache=True)
def _guided_velocity(ts, ys, tref, kinds, ks, amps, idx, nidx, nmax, mix, V, nfun, E, quad, C, masses, guard):
    n, d = ys.shape
    q = np.zeros((n, 2))
    tau = np.empty(n)
    for i in range(n):
        for a in range(d):
            q[i, a] = ys[i, a]
        tau[i] = ts[i] - tref
    psi, grad, _ = mode_sum(q, tau, kinds, ks, amps, idx, nidx, nmax, mix, V, nfun, E, quad, C, False)
    v = np.zeros((n, d))
    ok = np.empty(n, dtype=np.bool_)
    for i in range(n):
        rho = psi[i].real * psi[i].real + psi[i].imag * psi[i].imag
        ok[i] = rho > guard
        if rho > 0:
            for a in range(d):
                v[i, a] = (grad[i, a] / psi[i]).imag / masses[a]
    return v, ok


@njit(cache=True)
def _bohm_rhs(ts, ys, tref, kinds, ks, amps, idx, nidx, nmax, mix, V, nfun, E, quad, C, masses, guard, hq, omega2):
    """(p/m, -grad Q - m omega^2 q) with grad Q from central differences of Q."""
    n, dd = ys.shape
    d = dd // 2
    m = masses[0]
    nof = 2 * d + 1
    q = np.zeros((n * nof, 2))
    tau = np.empty(n * nof)
    for i in range(n):
        for o in range(nof):
            r = i * nof + o
            for a in range(d):
                q[r, a] = ys[i, a]
            if o > 0:
                a = (o - 1) % d
                q[r, a] += hq if o <= d else -hq
            tau[r] = ts[i] - tref
    psi, grad, lap = mode_sum(q, tau, kinds, ks, amps, idx, nidx, nmax, mix, V, nfun, E, quad, C, True)
    Q = np.zeros(n * nof)
    rho = np.empty(n * nof)
    for r in range(n * nof):
        rho[r] = psi[r].real * psi[r].real + psi[r].imag * psi[r].imag
        if rho[r] > 0:
            acc = (lap[r] / psi[r]).real
            for a in range(d):
                im = (grad[r, a] / psi[r]).imag
                acc += im * im
            Q[r] = -acc / (2 * m)
    out = np.zeros((n, dd))
    ok = np.empty(n, dtype=np.bool_)
    for i in range(n):
        base = i * nof
        good = rho[base] > guard
        for o in range(nof):
            good = good and rho[base + o] > 0
        ok[i] = good
        for a in range(d):
            out[i, a] = ys[i, d + a] / m
            gq = (Q[base + 1 + a] - Q[base + 1 + d + a]) / (2 * hq)
            out[i, d + a] = -gq - m * omega2 * ys[i, a]
    return out, ok


@njit(cache=True)
def _field_rhs(ts, ys, tref, kinds, ks, amps, idx, nidx, nmax, mix, V, nfun, E, quad, C, masses, guard, bohm, hq, omega2):
    if bohm:
        return _bohm_rhs(ts, ys, tref, kinds, ks, amps, idx, nidx, nmax, mix, V, nfun, E, quad, C, masses, guard, hq, omega2)
    return _guided_velocity(ts, ys, tref, kinds, ks, amps, idx, nidx, nmax, mix, V, nfun, E, quad, C, masses, guard)


@njit(cache=True)
def _rms_row(x, scale):
    acc = 0.0
    for j in range(x.shape[0]):
        r = x[j] / scale[j]
        acc = acc + r * r
    return math.sqrt(acc / x.shape[0])


@njit(cache=True)
def guided_batch(
    y0, t_eval, t_start, tref, kinds, ks, amps, idx, nidx, nmax, mix, V, nfun, E, quad, C, masses,
    lo, hi, walls, slack, guard, ctl, tab_a, tab_b, tab_c, tab_e, tab_p, bohm=False, hq=1e-5, omega2=0.0,
):
    """Dormand-Prince 5(4) de Broglie trajectories for a compiled mode-sum field.

    Mirrors :func:`pilotwave.integrate.solve_batch` step for step: PI step
    control, dense output at ``t_eval``, node guard and wall reflection.
    With ``bohm`` set the state is (q, p) under Bohm's second-order law
    instead; ``walls`` then covers only the position half. ``ctl`` packs (rtol, atol, dt_min, dt_max, max_rejects, max_steps,
    safety, alpha, beta, fac_min, fac_max).
    """
    rtol, atol, dt_min, dt_max = ctl[0], ctl[1], ctl[2], ctl[3]
    max_rejects, max_steps = ctl[4], ctl[5]
    safety, alpha, beta, fac_min, fac_max = ctl[6], ctl[7], ctl[8], ctl[9], ctl[10]
    K, d = y0.shape
    T = t_eval.size
    t_end = t_eval[T - 1]
    s = 1.0 if t_end >= t_start else -1.0
    out = np.full((K, T, d), np.nan)
    nxt = np.zeros(K, dtype=np.int64)
    t = np.full(K, t_start)
    y = y0.copy()
    status = np.zeros(K, dtype=np.int8)
    steps = np.zeros(K, dtype=np.int64)
    rejects = np.zeros(K, dtype=np.int64)
    consec = np.zeros(K, dtype=np.int64)
    err_old = np.full(K, 1e-4)
    h = np.zeros(K)
    active = np.zeros(K, dtype=np.bool_)
    for i in range(K):
        while nxt[i] < T and s * t_eval[nxt[i]] <= s * t_start:
            out[i, nxt[i]] = y[i]
            nxt[i] += 1
        active[i] = nxt[i] < T
    f, ok = _field_rhs(t, y, tref, kinds, ks, amps, idx, nidx, nmax, mix, V, nfun, E, quad, C, masses, guard, bohm, hq, omega2)
    for i in range(K):
        if active[i] and not ok[i]:
            status[i] = 1
            active[i] = False

    # initial step (Hairer & Wanner II.4)
    h0 = np.zeros(K)
    y1 = y.copy()
    t1 = t.copy()
    d0 = np.zeros(K)
    d1 = np.zeros(K)
    for i in range(K):
        sc = atol + rtol * np.abs(y[i])
        d0[i] = _rms_row(y[i], sc)
        d1[i] = _rms_row(f[i], sc)
        if d0[i] < 1e-5 or d1[i] < 1e-5:
            h0[i] = 1e-6
        else:
            h0[i] = 0.01 * d0[i] / max(d1[i], 1e-300)
        h0[i] = min(h0[i], abs(t_end - t[i]))
        t1[i] = t[i] + s * h0[i]
        y1[i] = y[i] + s * h0[i] * f[i]
    f1, _ = _field_rhs(t1, y1, tref, kinds, ks, amps, idx, nidx, nmax, mix, V, nfun, E, quad, C, masses, guard, bohm, hq, omega2)
    for i in range(K):
        sc = atol + rtol * np.abs(y[i])
        d2 = _rms_row(f1[i] - f[i], sc) / max(h0[i], 1e-300)
        dm = max(d1[i], d2)
        if dm <= 1e-15:
            hh = max(1e-6, h0[i] * 1e-3)
        else:
            hh = (0.01 / max(dm, 1e-300)) ** 0.2
        h[i] = min(min(100 * h0[i], hh), dt_max)

    ksb = np.empty((7, K, d))
    while True:
        ids = np.flatnonzero(active)
        n = ids.size
        if n == 0:
            break
        ti = t[ids]
        yi = y[ids]
        hs = np.empty(n)
        last = np.zeros(n, dtype=np.bool_)
        for j in range(n):
            i = ids[j]
            rem = abs(t_end - ti[j])
            hh = min(h[i], rem)
            last[j] = hh >= rem * (1 - 1e-12)
            hs[j] = s * hh
        kst = ksb[:, :n]
        kst[0] = f[ids]
        good = np.ones(n, dtype=np.bool_)
        ys = np.empty((n, d))
        tst = np.empty(n)
        for st in range(1, 6):
            for j in range(n):
                for a in range(d):
                    acc = 0.0
                    for m in range(st):
                        acc = acc + tab_a[st, m] * kst[m, j, a]
                    ys[j, a] = yi[j, a] + hs[j] * acc
                tst[j] = ti[j] + tab_c[st] * hs[j]
            kv, okv = _field_rhs(tst, ys, tref, kinds, ks, amps, idx, nidx, nmax, mix, V, nfun, E, quad, C, masses, guard, bohm, hq, omega2)
            kst[st] = kv
            for j in range(n):
                good[j] = good[j] and okv[j]
        y_new = np.empty((n, d))
        t_new = np.empty(n)
        for j in range(n):
            for a in range(d):
                acc = 0.0
                for m in range(6):
                    acc = acc + tab_b[m] * kst[m, j, a]
                x = yi[j, a] + hs[j] * acc
                if walls[a]:
                    tol = slack * (hi[a] - lo[a])
                    if x < lo[a]:
                        if x < lo[a] - tol:
                            good[j] = False
                        x = 2 * lo[a] - x
                    elif x > hi[a]:
                        if x > hi[a] + tol:
                            good[j] = False
                        x = 2 * hi[a] - x
                y_new[j, a] = x
            t_new[j] = t_end if last[j] else ti[j] + hs[j]
        k7, ok7 = _field_rhs(t_new, y_new, tref, kinds, ks, amps, idx, nidx, nmax, mix, V, nfun, E, quad, C, masses, guard, bohm, hq, omega2)
        kst[6] = k7
        for j in range(n):
            i = ids[j]
            g = good[j] and ok7[j]
            err = np.empty(d)
            sc = np.empty(d)
            finite = True
            for a in range(d):
                acc = 0.0
                for m in range(7):
                    acc = acc + tab_e[m] * kst[m, j, a]
                err[a] = hs[j] * acc
                sc[a] = atol + rtol * max(abs(yi[j, a]), abs(y_new[j, a]))
                if not math.isfinite(y_new[j, a]):
                    finite = False
            en = _rms_row(err, sc)
            g = g and finite and math.isfinite(en)
            if g and en <= 1.0:
                # dense output at every pending grid time inside the step
                while nxt[i] < T and s * t_eval[nxt[i]] <= s * t_new[j]:
                    tj = t_eval[nxt[i]]
                    if tj == t_new[j]:
                        for a in range(d):
                            out[i, nxt[i], a] = y_new[j, a]
                    else:
                        th = (tj - ti[j]) / hs[j]
                        for a in range(d):
                            poly = 0.0
                            pw = 1.0
                            for m in range(4):
                                pw = pw * th
                                qm = 0.0
                                for r in range(7):
                                    if tab_p[r, m] != 0:
                                        qm = qm + tab_p[r, m] * kst[r, j, a]
                                poly = poly + qm * pw
                            out[i, nxt[i], a] = yi[j, a] + hs[j] * poly
                    nxt[i] += 1
                t[i] = t_new[j]
                for a in range(d):
                    y[i, a] = y_new[j, a]
                    f[i, a] = k7[j, a]
                steps[i] += 1
                consec[i] = 0
                ea = max(en, 1e-10)
                fac = safety * ea ** (-alpha) * err_old[i] ** beta
                h[i] = min(abs(hs[j]) * min(max(fac, fac_min), fac_max), dt_max)
                err_old[i] = ea
                if last[j] or nxt[i] >= T:
                    active[i] = False
            else:
                rejects[i] += 1
                consec[i] += 1
                if g:
                    fac = min(max(safety * max(en, 1e-10) ** -0.2, fac_min), 1.0)
                else:
                    fac = 0.25
                if not math.isfinite(fac):
                    fac = 0.25
                h[i] = abs(hs[j]) * fac
                if consec[i] >= max_rejects or h[i] < dt_min:
                    status[i] = 1
                    active[i] = False
            if active[i] and steps[i] + rejects[i] >= max_steps:
                status[i] = 1
                active[i] = False
    return out, status, t, y, steps, rejects
