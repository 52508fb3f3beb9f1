"""Compiled inner loops: tilted moments, the c-inversion, and the path stepper.

Measures reach this module as a (kind, table) pair built by
``Measure.kernel_table()``:

* ``KIND_GAUSS``  -- table[0, 0] = sigma, closed forms.
* ``KIND_ATOMS``  -- rows (point, log weight), finite sums.
* ``KIND_PIECES`` -- rows (u, v, e0, e1, e2, p, q); on [u, v] the density is
  (p + q x) * exp(e0 + e1 x + e2 x^2).  Integrated by graded Gauss-Kronrod
  panels in log domain.

Status codes are plain ints so that the kernels stay nopython; ``tilt.py``
maps them onto exceptions.
"""
import math

import numpy as np
from numba import njit

KIND_GAUSS = 0
KIND_ATOMS = 1
KIND_PIECES = 2

OK = 0
NOT_INTEGRABLE = 1
QUAD_FAIL = 2
NO_CONV = 3
OUTSIDE_HULL = 4
DEGENERATE = 5

# path stop codes
RUNNING = 0
STOP_EPS = 1
STOP_HULL = 2
STOP_TMAX = 3
STOP_BREAKDOWN = 4
STOP_STALL = 5

SCHEME_A = 0
SCHEME_B = 1

# state vector layout
S_T, S_W, S_B, S_C, S_LOGV, S_A_MEAN, S_VAR, S_M3, S_M4, S_B_DEBT = range(10)
STATE_SIZE = 10

# diagnostics layout
(D_NSTEPS, D_MAX_AB, D_MAX_A, D_MAX_SRATIO, D_MAX_GAP, D_TAU, D_MINRUN,
 D_T_STOP, D_A_STOP, D_W_T, D_T_HAT, D_CKPT, D_MIN_DB, D_STOP, D_F0, D_F1,
 D_F2) = range(17)
DIAG_SIZE = 17

# config layout
(C_DT_MAX, C_ETA, C_EPS_A, C_T_MAX, C_DT_MIN, C_SCHEME, C_HULL_LO, C_HULL_HI,
 C_TOL_A, C_SNAP, C_MAX_MINRUN) = range(11)
CONFIG_SIZE = 11

WINDOW_LOG = 41.5          # integrand dropped below exp(-41.5) ~ 1e-18 of its peak
QUAD_RTOL = 1e-10
PANEL_FIRST = 1.5
PANEL_GROWTH = 1.3
PANEL_GROWTH_FAR = 2.0     # once the integrand is exp(-FAR_LOG) below its peak
FAR_LOG = 20.0
MAX_REFINE = 5
MAX_PANELS_SIDE = 400
SUBSTEP_REL = 0.1
MAX_SUBSTEPS = 32
B_RTOL = 1e-3            # accepted trapezoid mismatch, relative to the b increment

_XGK = np.array([
    0.991455371120812639206854697526329, 0.949107912342758524526189684047851,
    0.864864423359769072789712788640926, 0.741531185599394439863864773280788,
    0.586087235467691130294144845693013, 0.405845151377397166906606412076961,
    0.207784955007898467600689403773245, 0.0])
_WGK = np.array([
    0.022935322010529224963732008058970, 0.063092092629978553290700663189204,
    0.104790010322250183839876322541518, 0.140653259715525918745189590510238,
    0.169004726639267902826583426598550, 0.190350578064785409913256402421014,
    0.204432940075298892414161999234649, 0.209482141084727828012999174891714])
_WG = np.array([
    0.129484966168869693270611432679082, 0.279705391489276667901467771423780,
    0.381830050505118944950369775488975, 0.417959183673469387755102040816327])


def _full_rule():
    nodes = np.concatenate((-_XGK[:-1], _XGK[::-1]))
    wk = np.concatenate((_WGK[:-1], _WGK[::-1]))
    wg = np.zeros(15)
    for i in range(15):
        j = np.argmin(np.abs(_XGK - abs(nodes[i])))
        if j % 2 == 1:
            wg[i] = _WG[j // 2]
    return nodes, wk, wg


GK_NODES, GK_WK, GK_WG = _full_rule()


# ---------------------------------------------------------------------------
# tilted moments
# ---------------------------------------------------------------------------

@njit(cache=True, nogil=True)
def _gauss_moments(sigma, b, c):
    prec = 1.0 / (sigma * sigma) + b
    logv = -0.5 * math.log(sigma * sigma * prec) + 0.5 * c * c / prec
    var = 1.0 / prec
    return OK, logv, c / prec, var, 0.0, 3.0 * var * var


@njit(cache=True, nogil=True)
def _atom_moments(tab, b, c):
    n = tab.shape[0]
    m = -np.inf
    for i in range(n):
        x = tab[i, 0]
        e = tab[i, 1] + c * x - 0.5 * b * x * x
        if e > m:
            m = e
    s0 = 0.0
    s1 = 0.0
    for i in range(n):
        x = tab[i, 0]
        w = math.exp(tab[i, 1] + c * x - 0.5 * b * x * x - m)
        s0 += w
        s1 += w * x
    a = s1 / s0
    s2 = 0.0
    s3 = 0.0
    s4 = 0.0
    for i in range(n):
        x = tab[i, 0]
        w = math.exp(tab[i, 1] + c * x - 0.5 * b * x * x - m)
        d = x - a
        s2 += w * d * d
        s3 += w * d * d * d
        s4 += w * d * d * d * d
    return OK, m + math.log(s0), a, s2 / s0, s3 / s0, s4 / s0


@njit(cache=True, nogil=True)
def _piece_argmax(u, v, k1, k2):
    if k2 < 0.0:
        x = -k1 / (2.0 * k2)
        if x < u:
            x = u
        elif x > v:
            x = v
        return x
    if k1 > 0.0:
        return v
    if k1 < 0.0:
        return u
    if math.isfinite(u):
        return u
    return v


@njit(cache=True, nogil=True)
def _panel(lo, hi, l0, q, r, g, k2, acc, fk):
    """Accumulate one K15 panel of (l0 + q y) exp(r + g y + k2 y^2) * y^k."""
    mid = 0.5 * (lo + hi)
    half = 0.5 * (hi - lo)
    k0 = 0.0
    g0 = 0.0
    k1 = 0.0
    k2s = 0.0
    g2 = 0.0
    k3 = 0.0
    k4 = 0.0
    for i in range(15):
        y = mid + half * GK_NODES[i]
        lin = l0 + q * y
        if lin < 0.0:
            lin = 0.0
        f = lin * math.exp(r + y * (g + k2 * y))
        fk[i] = f
        wk = GK_WK[i]
        k0 += wk * f
        g0 += GK_WG[i] * f
        k1 += wk * f * y
        k2s += wk * f * y * y
        g2 += GK_WG[i] * f * y * y
        k3 += wk * f * y * y * y
        k4 += wk * f * y * y * y * y
    k0 *= half
    g0 *= half
    k1 *= half
    k2s *= half
    g2 *= half
    k3 *= half
    k4 *= half
    # QUADPACK-style error estimates for mass and second moment
    mean0 = k0 / (2.0 * half)
    mean2 = k2s / (2.0 * half)
    asc0 = 0.0
    asc2 = 0.0
    for i in range(15):
        y = mid + half * GK_NODES[i]
        asc0 += GK_WK[i] * abs(fk[i] - mean0)
        asc2 += GK_WK[i] * abs(fk[i] * y * y - mean2)
    asc0 *= half
    asc2 *= half
    e0 = abs(k0 - g0)
    if asc0 > 0.0 and e0 > 0.0:
        e0 = asc0 * min(1.0, (200.0 * e0 / asc0) ** 1.5)
    e2 = abs(k2s - g2)
    if asc2 > 0.0 and e2 > 0.0:
        e2 = asc2 * min(1.0, (200.0 * e2 / asc2) ** 1.5)
    acc[0] += k0
    acc[1] += k1
    acc[2] += k2s
    acc[3] += k3
    acc[4] += e0
    acc[5] += e2
    acc[6] += k4


@njit(cache=True, nogil=True)
def _integrate_window(wl, wr, ypk, ell, l0, q, r, g, k2, acc, fk, scale):
    """Graded panels outward from the peak; growth speeds up in the far tail."""
    first = PANEL_FIRST * ell * scale
    width = wr - wl
    if not math.isfinite(first) or first >= width:
        _panel(wl, wr, l0, q, r, g, k2, acc, fk)
        return True
    top = r + ypk * (g + k2 * ypk)
    for side in range(2):
        pos = ypk
        w = first
        count = 0
        edge = wr if side == 0 else wl
        while (side == 0 and pos < edge) or (side == 1 and pos > edge):
            if side == 0:
                nxt = pos + w
                if nxt > edge or edge - nxt < 0.25 * w:
                    nxt = edge
                _panel(pos, nxt, l0, q, r, g, k2, acc, fk)
            else:
                nxt = pos - w
                if nxt < edge or nxt - edge < 0.25 * w:
                    nxt = edge
                _panel(nxt, pos, l0, q, r, g, k2, acc, fk)
            pos = nxt
            if scale == 1.0 and r + pos * (g + k2 * pos) < top - FAR_LOG:
                w *= PANEL_GROWTH_FAR
            else:
                w *= PANEL_GROWTH
            count += 1
            if count > MAX_PANELS_SIDE:
                return False
    return True


@njit(cache=True, nogil=True)
def _piece_moments(tab, b, c):
    n = tab.shape[0]
    # pick the reference point: the best integrand value among piece maxima
    best = -np.inf
    xref = 0.0
    iref = -1
    for i in range(n):
        u = tab[i, 0]
        v = tab[i, 1]
        k1 = tab[i, 3] + c
        k2 = tab[i, 4] - 0.5 * b
        if not math.isfinite(u):
            if not (k2 < 0.0 or (k2 == 0.0 and k1 > 0.0)):
                return NOT_INTEGRABLE, 0.0, 0.0, 0.0, 0.0, 0.0
        if not math.isfinite(v):
            if not (k2 < 0.0 or (k2 == 0.0 and k1 < 0.0)):
                return NOT_INTEGRABLE, 0.0, 0.0, 0.0, 0.0, 0.0
        xs = _piece_argmax(u, v, k1, k2)
        for j in range(3):
            if j == 0:
                x = xs
            elif j == 1:
                x = u
            else:
                x = v
            if not math.isfinite(x):
                continue
            lin = tab[i, 5] + tab[i, 6] * x
            if lin <= 0.0:
                continue
            val = tab[i, 2] + k1 * x + k2 * x * x + math.log(lin)
            if val > best:
                best = val
                xref = x
                iref = i
    if iref < 0:
        return DEGENERATE, 0.0, 0.0, 0.0, 0.0, 0.0
    lref = tab[iref, 5] + tab[iref, 6] * xref
    big_m = best
    acc = np.zeros(7)
    fk = np.empty(15)
    scale = 1.0
    converged = False
    for attempt in range(MAX_REFINE + 1):
        acc[:] = 0.0
        ok = True
        for i in range(n):
            u = tab[i, 0]
            v = tab[i, 1]
            r = ((tab[i, 2] - tab[iref, 2]) + (tab[i, 3] - tab[iref, 3]) * xref
                 + (tab[i, 4] - tab[iref, 4]) * xref * xref - math.log(lref))
            g = tab[i, 3] + c - b * xref + 2.0 * tab[i, 4] * xref
            k2 = tab[i, 4] - 0.5 * b
            yu = u - xref
            yv = v - xref
            q = tab[i, 6]
            l0 = tab[i, 5] + q * xref
            if q == 0.0:
                lmax = l0
            else:
                lmax = max(l0 + q * yu, l0 + q * yv)
            if lmax <= 0.0:
                continue
            llog = math.log(lmax)
            ypk = _piece_argmax(yu, yv, g, k2)
            peak = r + g * ypk + k2 * ypk * ypk
            if peak + llog < -WINDOW_LOG:
                continue
            cc = r + llog + WINDOW_LOG
            # window {y : k2 y^2 + g y + cc >= 0} within [yu, yv]
            if k2 < 0.0:
                disc = g * g - 4.0 * k2 * cc
                if disc < 0.0:
                    disc = 0.0
                sq = math.sqrt(disc)
                if g >= 0.0:
                    qq = -0.5 * (g + sq)
                else:
                    qq = -0.5 * (g - sq)
                r1 = qq / k2
                r2 = cc / qq if qq != 0.0 else r1
                wl = max(yu, min(r1, r2))
                wr = min(yv, max(r1, r2))
            elif g > 0.0:
                wl = max(yu, -cc / g)
                wr = yv
            elif g < 0.0:
                wl = yu
                wr = min(yv, -cc / g)
            else:
                wl = yu
                wr = yv
            if not (wr > wl):
                continue
            if ypk < wl:
                ypk = wl
            elif ypk > wr:
                ypk = wr
            slope = g + 2.0 * k2 * ypk
            curv = -2.0 * k2 + slope * slope
            if q != 0.0:
                lpk = l0 + q * ypk
                if lpk > 0.0:
                    curv += (q / lpk) ** 2
            ell = 1.0 / math.sqrt(curv) if curv > 0.0 else np.inf
            if not _integrate_window(wl, wr, ypk, ell, l0, q, r, g, k2, acc,
                                     fk, scale):
                ok = False
                break
        if ok and acc[0] > 0.0:
            if acc[4] <= QUAD_RTOL * acc[0] and acc[5] <= QUAD_RTOL * acc[2] + 1e-300:
                converged = True
                break
        scale *= 0.5
    if not converged:
        return QUAD_FAIL, 0.0, 0.0, 0.0, 0.0, 0.0
    s0 = acc[0]
    m1 = acc[1] / s0
    e2 = acc[2] / s0
    e3 = acc[3] / s0
    var = e2 - m1 * m1
    if var < 0.0:
        var = 0.0
    e4 = acc[6] / s0
    m3 = e3 - 3.0 * m1 * e2 + 2.0 * m1 * m1 * m1
    m4 = e4 - 4.0 * m1 * e3 + 6.0 * m1 * m1 * e2 - 3.0 * m1 ** 4
    if m4 < var * var:
        m4 = var * var
    return OK, big_m + math.log(s0), xref + m1, var, m3, m4


@njit(cache=True, nogil=True)
def tilt_eval(kind, tab, b, c):
    """(status, log V, a, A, m3, m4) of the measure tilted by exp(c x - b x^2/2)."""
    if kind == KIND_GAUSS:
        return _gauss_moments(tab[0, 0], b, c)
    if kind == KIND_ATOMS:
        return _atom_moments(tab, b, c)
    return _piece_moments(tab, b, c)


# ---------------------------------------------------------------------------
# inverse map c(a, b)
# ---------------------------------------------------------------------------

@njit(cache=True, nogil=True)
def solve_c(kind, tab, target, b, c0, tol, maxit):
    """Safeguarded Halley iteration for a(b, c) = target.

    Uses da/dc = A and d2a/dc2 = m3, a bracket kept from the sign of the
    residual, bisection on slow progress, and doubling expansion while
    unbracketed.  Returns (status, c, log V, a, A, m3, m4, iterations).
    """
    if kind == KIND_GAUSS:
        sigma = tab[0, 0]
        prec = 1.0 / (sigma * sigma) + b
        c = target * prec
        st, logv, a, var, m3, m4 = _gauss_moments(sigma, b, c)
        return st, c, logv, a, var, m3, m4, 1
    lo = -np.inf
    hi = np.inf
    c = c0
    st, logv, a, var, m3, m4 = tilt_eval(kind, tab, b, c)
    expand = 1.0
    while st == NOT_INTEGRABLE and expand < 1e300:
        # only possible at b = 0 for exponential tails: pull c towards zero
        c = 0.5 * c
        st, logv, a, var, m3, m4 = tilt_eval(kind, tab, b, c)
        expand *= 2.0
    if st != OK:
        return st, c, logv, a, var, m3, m4, 0
    last_f = np.inf
    for it in range(maxit):
        f = a - target
        if abs(f) <= tol:
            return OK, c, logv, a, var, m3, m4, it
        if f > 0.0:
            hi = c
        else:
            lo = c
        cn = np.nan
        if var > 0.0:
            den = 2.0 * var * var - f * m3
            if den > var * var:
                cn = c - 2.0 * f * var / den
            else:
                cn = c - f / var
        bracketed = math.isfinite(lo) and math.isfinite(hi)
        use_newton = math.isfinite(cn) and cn > lo and cn < hi
        if use_newton and bracketed and abs(f) > 0.5 * last_f:
            use_newton = False          # slow progress: bisect instead
        if use_newton:
            step = cn - c
        elif bracketed:
            cn = 0.5 * (lo + hi)
            step = cn - c
        else:
            step = expand if f < 0.0 else -expand
            expand *= 2.0
            cn = c + step
        if abs(step) <= 4e-16 * max(1.0, abs(c)):
            if abs(f) <= max(tol, 1e-13 * (1.0 + abs(target))):
                return OK, c, logv, a, var, m3, m4, it
            return NO_CONV, c, logv, a, var, m3, m4, it
        last_f = abs(f)
        st, lv2, a2, v2, m32, m42 = tilt_eval(kind, tab, b, cn)
        if st == NOT_INTEGRABLE:
            if cn > c:
                hi = cn
            else:
                lo = cn
            continue
        if st != OK:
            return st, c, logv, a, var, m3, m4, it
        c = cn
        logv = lv2
        a = a2
        var = v2
        m3 = m32
        m4 = m42
    if abs(a - target) <= tol:
        return OK, c, logv, a, var, m3, m4, maxit
    return NO_CONV, c, logv, a, var, m3, m4, maxit


# ---------------------------------------------------------------------------
# path stepping
# ---------------------------------------------------------------------------

@njit(cache=True, nogil=True)
def choose_dt(st, cf, t_next):
    """Adaptive step: eta * A * min(1, A / S^2), clipped to [dt_min, dt_max]."""
    var = st[S_VAR]
    dt = cf[C_ETA] * var
    m3 = st[S_M3]
    if m3 != 0.0:
        s = m3 / var
        ratio = var / (s * s)
        if ratio < 1.0:
            dt *= ratio
    if dt > cf[C_DT_MAX]:
        dt = cf[C_DT_MAX]
    if dt < cf[C_DT_MIN]:
        dt = cf[C_DT_MIN]
    rem = t_next - st[S_T]
    if rem < dt:
        dt = rem
    rem = cf[C_T_MAX] - st[S_T]
    if rem < dt:
        dt = rem
    return dt


@njit(cache=True, nogil=True)
def _b_rate(var):
    return 1.0 / (var * var)


@njit(cache=True, nogil=True)
def _b_rate_slope(var, a_b):
    """d(A^-2)/dt through b alone (a held fixed), with db/dt = A^-2."""
    v2 = var * var
    return -2.0 * a_b / (v2 * v2 * var)


@njit(cache=True, nogil=True)
def _expand(var, a, m3, m4):
    """Partials of c(a, b) and A(a, b) from the tilted central moments.

    Returns (c2, c11, c12, c111, A_a, A_aa, A_b); subscripts 1/a denote a,
    2/b denote b.
    """
    k4 = m4 - 3.0 * var * var
    v2 = var * var
    c2 = 0.5 * m3 / var + a
    c11 = -m3 / (v2 * var)
    a_a = m3 / var
    a_aa = (k4 / var - m3 * m3 / v2) / var
    a_b = -0.5 * k4 - v2 + 0.5 * m3 * m3 / var
    c12 = -a_b / v2
    c111 = -k4 / (v2 * v2) + 3.0 * m3 * m3 / (v2 * v2 * var)
    return c2, c11, c12, c111, a_a, a_aa, a_b


@njit(cache=True, nogil=True)
def step_a(kind, tab, st, dw, dt, tol_fac):
    """Root-driven step: exact w, corrected trapezoid on db/dt = A^-2, c from solve_c.

    The b increment uses the trapezoid rule with the Hermite end correction
    h^2/12 (g0' - g1'), where g' is the rate of change of A^-2 through b.
    The end-of-step variance is first predicted by a Taylor expansion of
    A(a, b).  The gap between the predicted and the re-evaluated increment is
    carried into the next step; a second solve is made only when that gap
    exceeds B_RTOL of the increment.  Mutates ``st``; returns a status code.
    """
    w0 = st[S_W]
    b = st[S_B]
    c = st[S_C]
    var = st[S_VAR]
    m3 = st[S_M3]
    m4 = st[S_M4]
    logv = st[S_LOGV]
    a = st[S_A_MEAN]
    debt = st[S_B_DEBT]
    if dt <= 0.0:
        return OK
    db_euler = dt * _b_rate(var)
    nsub = 1
    if db_euler > SUBSTEP_REL * b:
        ref = b if b > db_euler else db_euler
        nsub = int(math.ceil(db_euler / (SUBSTEP_REL * ref)))
        if nsub > MAX_SUBSTEPS:
            nsub = MAX_SUBSTEPS
        if nsub < 1:
            nsub = 1
    h = dt / nsub
    hh = h * h / 12.0
    for j in range(nsub):
        w_end = w0 + dw * (j + 1) / nsub
        da = w_end - a
        g0 = _b_rate(var)
        c2, c11, c12, c111, a_a, a_aa, a_b = _expand(var, a, m3, m4)
        s0 = _b_rate_slope(var, a_b)
        db = h * g0
        a_pred = var + a_a * da + 0.5 * a_aa * da * da + a_b * db
        if a_pred < 0.5 * var:
            a_pred = 0.5 * var
        elif a_pred > 2.0 * var:
            a_pred = 2.0 * var
        r = a_pred / var
        db = (0.5 * h * (g0 + _b_rate(a_pred))
              + hh * (s0 - _b_rate_slope(a_pred, a_b * r * r)) + debt)
        if db < 0.0:
            db = 0.0
        tol = tol_fac * (1.0 + abs(w_end))
        guess = (c + da / var + c2 * db + 0.5 * c11 * da * da + c12 * da * db
                 + c111 * da * da * da / 6.0)
        res = solve_c(kind, tab, w_end, b + db, guess, tol, 200)
        if res[0] != OK:
            return res[0]
        a_b1 = _expand(res[4], res[3], res[5], res[6])[6]
        db_corr = (0.5 * h * (g0 + _b_rate(res[4])) + hh * (s0 - _b_rate_slope(res[4], a_b1))
                   + debt)
        if db_corr < 0.0:
            db_corr = 0.0
        if abs(db_corr - db) > B_RTOL * db_corr:
            c2n = 0.5 * res[5] / res[4] + res[3]
            guess = res[1] + c2n * (db_corr - db)
            res = solve_c(kind, tab, w_end, b + db_corr, guess, tol, 200)
            if res[0] != OK:
                return res[0]
            db = db_corr
            debt = 0.0
        else:
            debt = db_corr - db
        b = b + db
        c = res[1]
        logv = res[2]
        a = res[3]
        var = res[4]
        m3 = res[5]
        m4 = res[6]
        if not (var > 0.0):
            break
    st[S_T] += dt
    st[S_W] = w0 + dw
    st[S_B] = b
    st[S_C] = c
    st[S_LOGV] = logv
    st[S_A_MEAN] = a
    st[S_VAR] = var
    st[S_M3] = m3
    st[S_M4] = m4
    st[S_B_DEBT] = debt
    return OK


@njit(cache=True, nogil=True)
def step_b(kind, tab, st, dw, dt):
    """Literal Euler-Maruyama on the (b, c) system."""
    if dt <= 0.0:
        return OK
    var = st[S_VAR]
    a = st[S_A_MEAN]
    c = st[S_C] + dw / var + a * dt / (var * var)
    b = st[S_B] + dt / (var * var)
    res = tilt_eval(kind, tab, b, c)
    if res[0] != OK:
        return res[0]
    st[S_T] += dt
    st[S_W] += dw
    st[S_B] = b
    st[S_C] = c
    st[S_LOGV] = res[1]
    st[S_A_MEAN] = res[2]
    st[S_VAR] = res[3]
    st[S_M3] = res[4]
    st[S_M4] = res[5]
    return OK


@njit(cache=True, nogil=True)
def _record(st, dg, probes, ck_out, k):
    ck_out[k, 0] = st[S_T]
    ck_out[k, 1] = st[S_W]
    ck_out[k, 2] = st[S_B]
    ck_out[k, 3] = st[S_C]
    ck_out[k, 4] = st[S_VAR]
    ck_out[k, 5] = st[S_M3] / st[S_VAR] if st[S_VAR] > 0 else 0.0
    for j in range(probes.shape[0]):
        x = probes[j]
        ck_out[k, 6 + j] = math.exp(st[S_C] * x - 0.5 * st[S_B] * x * x - st[S_LOGV])


@njit(cache=True, nogil=True)
def _nearest_atom(tab, w):
    best = tab[0, 0]
    for i in range(tab.shape[0]):
        if abs(tab[i, 0] - w) < abs(best - w):
            best = tab[i, 0]
    return best


@njit(cache=True, nogil=True)
def _finish(kind, tab, st, dg, cf, probes, code, t_stop, w_stop, a_stop):
    dg[D_STOP] = code
    dg[D_T_STOP] = t_stop
    dg[D_A_STOP] = a_stop
    dg[D_T_HAT] = t_stop + a_stop
    if code == STOP_EPS and cf[C_SNAP] > 0 and kind == KIND_ATOMS:
        w_stop = _nearest_atom(tab, w_stop)
    dg[D_W_T] = w_stop
    for j in range(probes.shape[0]):
        x = probes[j]
        dg[D_F0 + j] = math.exp(st[S_C] * x - 0.5 * st[S_B] * x * x - st[S_LOGV])


@njit(cache=True, nogil=True)
def _monitor(st, dg, b_before):
    var = st[S_VAR]
    dg[D_NSTEPS] += 1
    if st[S_B] > 0.0 and var * st[S_B] > dg[D_MAX_AB]:
        dg[D_MAX_AB] = var * st[S_B]
    if var > dg[D_MAX_A]:
        dg[D_MAX_A] = var
    if var > 0.0:
        sr = abs(st[S_M3] / var) / math.sqrt(var)
        if sr > dg[D_MAX_SRATIO]:
            dg[D_MAX_SRATIO] = sr
    gap = abs(st[S_A_MEAN] - st[S_W])
    if gap > dg[D_MAX_GAP]:
        dg[D_MAX_GAP] = gap
    db = st[S_B] - b_before
    if db < dg[D_MIN_DB]:
        dg[D_MIN_DB] = db
    if dg[D_TAU] < 0.0:
        if st[S_T] >= 1.0:
            dg[D_TAU] = 1.0
        elif var >= 2.0:
            dg[D_TAU] = st[S_T]


@njit(cache=True, nogil=True)
def next_dt(st, dg, cf, ck_times):
    """Step size for the next step, or -1 when the min-step stall limit hits."""
    k = int(dg[D_CKPT])
    t_next = ck_times[k] if k < ck_times.shape[0] else np.inf
    dt = choose_dt(st, cf, t_next)
    if dt <= cf[C_DT_MIN] * 1.0000001 and st[S_T] + dt < t_next:
        dg[D_MINRUN] += 1
        if dg[D_MINRUN] > cf[C_MAX_MINRUN]:
            return -1.0
    else:
        dg[D_MINRUN] = 0
    return dt


@njit(cache=True, nogil=True)
def advance(kind, tab, st, dg, cf, dw, dt, uu, ck_times, ck_out, probes):
    """One step with stop detection.  Returns True once the path has stopped."""
    lo = cf[C_HULL_LO]
    hi = cf[C_HULL_HI]
    scheme = int(cf[C_SCHEME])
    k = int(dg[D_CKPT])
    t0 = st[S_T]
    w0 = st[S_W]
    w1 = w0 + dw
    if scheme == SCHEME_A and math.isfinite(lo) and math.isfinite(hi):
        # discrete exit, or an excursion past an endpoint inside the step
        crossed = w1 <= lo or w1 >= hi
        end = lo if w1 <= lo else hi
        if not crossed and dt > 0.0:
            p_hi = math.exp(-2.0 * (hi - w0) * (hi - w1) / dt)
            p_lo = math.exp(-2.0 * (w0 - lo) * (w1 - lo) / dt)
            if uu < p_hi + p_lo:
                crossed = True
                end = hi if p_hi >= p_lo else lo
        if crossed:
            dg[D_NSTEPS] += 1
            _finish(kind, tab, st, dg, cf, probes, STOP_HULL, t0 + 0.5 * dt,
                    end, 0.0)
            return True
    b_before = st[S_B]
    if scheme == SCHEME_A:
        status = step_a(kind, tab, st, dw, dt, cf[C_TOL_A])
    else:
        status = step_b(kind, tab, st, dw, dt)
    if status != OK:
        if status == OUTSIDE_HULL:
            _finish(kind, tab, st, dg, cf, probes, STOP_HULL, t0 + 0.5 * dt,
                    lo if w1 <= 0.5 * (lo + hi) else hi, 0.0)
        else:
            _finish(kind, tab, st, dg, cf, probes, STOP_BREAKDOWN, st[S_T],
                    st[S_W], st[S_VAR])
        return True
    _monitor(st, dg, b_before)
    if k < ck_times.shape[0] and st[S_T] >= ck_times[k]:
        _record(st, dg, probes, ck_out, k)
        dg[D_CKPT] = k + 1
    if st[S_VAR] <= cf[C_EPS_A]:
        _finish(kind, tab, st, dg, cf, probes, STOP_EPS, st[S_T], st[S_W],
                st[S_VAR])
        return True
    if st[S_T] >= cf[C_T_MAX]:
        _finish(kind, tab, st, dg, cf, probes, STOP_TMAX, st[S_T], st[S_W],
                st[S_VAR])
        return True
    return False


@njit(cache=True, nogil=True)
def run_path(kind, tab, st, dg, cf, z, u, ck_times, ck_out, probes):
    """Advance one path until it stops or the random buffers run out.

    ``z`` are standard normals, ``u`` uniforms, one of each per step.  Returns
    the number of buffer entries consumed; ``dg[D_STOP]`` stays RUNNING when
    the caller must refill and call again.
    """
    n_buf = z.shape[0]
    used = 0
    while used < n_buf:
        dt = next_dt(st, dg, cf, ck_times)
        if dt < 0.0:
            _finish(kind, tab, st, dg, cf, probes, STOP_STALL, st[S_T],
                    st[S_W], st[S_VAR])
            return used
        dw = math.sqrt(dt) * z[used]
        uu = u[used]
        used += 1
        if advance(kind, tab, st, dg, cf, dw, dt, uu, ck_times, ck_out, probes):
            return used
    return used
