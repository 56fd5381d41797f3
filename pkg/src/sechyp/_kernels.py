"""Compiled right-hand sides and the Dormand-Prince 5(4) integrator.

Every built-in field is identified by an integer ``kind`` plus a flat
parameter vector ``p`` and a bump table ``b`` (one row per additive bump:
``eps, radius, center[d], direction[d]``).  Keeping the dispatch inside
numba lets long ensembles run without Python overhead per step.
"""

import numpy as np
from numba import njit

LINEAR = 0
LORENZ = 1
BOWEN = 2
DOUBLE_LORENZ = 3

OK = 0
BLOWUP = 1
UNDERFLOW = 2
DEGENERATE = 3
NO_RETURN = 4

BLOWUP_NORM = 1e8
MIN_STEP = 1e-13

# Dormand-Prince 5(4) tableau
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = np.array([
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [1 / 5, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3 / 40, 9 / 40, 0.0, 0.0, 0.0, 0.0],
    [44 / 45, -56 / 15, 32 / 9, 0.0, 0.0, 0.0],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729, 0.0, 0.0],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656, 0.0],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
])
_B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_E = np.array([71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200,
               22 / 525, -1 / 40])


# ---------------------------------------------------------------- fields

@njit(cache=True)
def _bump_profile(s):
    if s >= 1.0:
        return 0.0, 0.0
    q = 1.0 - s * s
    return q * q * q, -6.0 * s * q * q


@njit(cache=True)
def _smoothstep_down(x1, width):
    # 1 for x1 <= -width, 0 for x1 >= width, C2 in between
    if x1 <= -width:
        return 1.0, 0.0
    if x1 >= width:
        return 0.0, 0.0
    t = (x1 + width) / (2.0 * width)
    w = 1.0 - t * t * t * (10.0 - 15.0 * t + 6.0 * t * t)
    dw = -30.0 * t * t * (1.0 - t) * (1.0 - t) / (2.0 * width)
    return w, dw


@njit(cache=True)
def _lorenz(sig, rho, beta, x, y, z, out, off):
    out[off] = sig * (y - x)
    out[off + 1] = x * (rho - z) - y
    out[off + 2] = x * y - beta * z


@njit(cache=True)
def _lorenz_jac(sig, rho, beta, x, y, z, J):
    J[0, 0] = -sig
    J[0, 1] = sig
    J[0, 2] = 0.0
    J[1, 0] = rho - z
    J[1, 1] = -1.0
    J[1, 2] = -x
    J[2, 0] = y
    J[2, 1] = x
    J[2, 2] = -beta


@njit(cache=True)
def rhs(kind, p, b, x, out):
    d = x.shape[0]
    if kind == LINEAR:
        for i in range(d):
            acc = 0.0
            for j in range(d):
                acc += p[i * d + j] * x[j]
            out[i] = acc
    elif kind == LORENZ:
        _lorenz(p[0], p[1], p[2], x[0], x[1], x[2], out, 0)
    elif kind == BOWEN:
        alpha = p[0]
        e = p[1]
        xx = x[0]
        yy = x[1]
        q = 1.0 - xx * xx
        # alpha * J grad P with P = y^2 - (1 - x^2)^2, plus a term that
        # keeps P = 0 invariant and sets the saddle eigenvalue asymmetry
        out[0] = -alpha * 2.0 * yy + e * xx * q / 4.0
        out[1] = alpha * 4.0 * xx * q - e * xx * xx * yy / 2.0
    elif kind == DOUBLE_LORENZ:
        sig, rho, beta, D, width = p[0], p[1], p[2], p[3], p[4]
        w, _ = _smoothstep_down(x[0], width)
        tmp = np.empty(3)
        _lorenz(sig, rho, beta, x[0] + D, x[1], x[2], out, 0)
        _lorenz(sig, rho, beta, x[0] - D, x[1], x[2], tmp, 0)
        for i in range(3):
            out[i] = w * out[i] + (1.0 - w) * tmp[i]
    for r in range(b.shape[0]):
        eps = b[r, 0]
        if eps == 0.0:
            continue
        rad = b[r, 1]
        s2 = 0.0
        for i in range(d):
            dx = x[i] - b[r, 2 + i]
            s2 += dx * dx
        chi, _ = _bump_profile(np.sqrt(s2) / rad)
        for i in range(d):
            out[i] += eps * chi * b[r, 2 + d + i]


@njit(cache=True)
def jac(kind, p, b, x, J):
    d = x.shape[0]
    if kind == LINEAR:
        for i in range(d):
            for j in range(d):
                J[i, j] = p[i * d + j]
    elif kind == LORENZ:
        _lorenz_jac(p[0], p[1], p[2], x[0], x[1], x[2], J)
    elif kind == BOWEN:
        alpha = p[0]
        e = p[1]
        xx = x[0]
        yy = x[1]
        q = 1.0 - xx * xx
        J[0, 0] = e * (q - 2.0 * xx * xx) / 4.0
        J[0, 1] = -2.0 * alpha
        J[1, 0] = alpha * 4.0 * (q - 2.0 * xx * xx) - e * xx * yy
        J[1, 1] = -e * xx * xx / 2.0
    elif kind == DOUBLE_LORENZ:
        sig, rho, beta, D, width = p[0], p[1], p[2], p[3], p[4]
        w, dw = _smoothstep_down(x[0], width)
        J1 = np.empty((3, 3))
        J2 = np.empty((3, 3))
        f1 = np.empty(3)
        f2 = np.empty(3)
        _lorenz_jac(sig, rho, beta, x[0] + D, x[1], x[2], J1)
        _lorenz_jac(sig, rho, beta, x[0] - D, x[1], x[2], J2)
        _lorenz(sig, rho, beta, x[0] + D, x[1], x[2], f1, 0)
        _lorenz(sig, rho, beta, x[0] - D, x[1], x[2], f2, 0)
        for i in range(3):
            for j in range(3):
                J[i, j] = w * J1[i, j] + (1.0 - w) * J2[i, j]
            J[i, 0] += dw * (f1[i] - f2[i])
    for r in range(b.shape[0]):
        eps = b[r, 0]
        if eps == 0.0:
            continue
        rad = b[r, 1]
        s2 = 0.0
        for i in range(d):
            dx = x[i] - b[r, 2 + i]
            s2 += dx * dx
        dist = np.sqrt(s2)
        if dist == 0.0 or dist >= rad:
            continue
        _, dchi = _bump_profile(dist / rad)
        for i in range(d):
            for j in range(d):
                J[i, j] += (eps * b[r, 2 + d + i] * dchi
                            * (x[j] - b[r, 2 + j]) / (rad * dist))


@njit(cache=True)
def aug_rhs(kind, p, b, y, d, k, out):
    """State derivative followed by DG(x) F for the column-major frame F."""
    x = y[:d]
    rhs(kind, p, b, x, out[:d])
    if k == 0:
        return
    J = np.empty((d, d))
    jac(kind, p, b, x, J)
    for c in range(k):
        for i in range(d):
            acc = 0.0
            for j in range(d):
                acc += J[i, j] * y[d + c * d + j]
            out[d + c * d + i] = acc


# ------------------------------------------------------------ stepping

@njit(cache=True)
def _dopri_step(kind, p, b, y, f0, h, d, k, K, ynew):
    n = y.shape[0]
    K[0, :] = f0
    tmp = np.empty(n)
    for s in range(1, 7):
        for i in range(n):
            acc = 0.0
            for j in range(s):
                acc += _A[s, j] * K[j, i]
            tmp[i] = y[i] + h * acc
        aug_rhs(kind, p, b, tmp, d, k, K[s])
    for i in range(n):
        acc = 0.0
        for j in range(7):
            acc += _B[j] * K[j, i]
        ynew[i] = y[i] + h * acc
    # K[6] is f(ynew) (FSAL)


@njit(cache=True)
def _err_norm(y, ynew, K, h, rtol, atol):
    n = y.shape[0]
    acc = 0.0
    for i in range(n):
        e = 0.0
        for j in range(7):
            e += _E[j] * K[j, i]
        e *= h
        sc = atol + rtol * max(abs(y[i]), abs(ynew[i]))
        acc += (e / sc) ** 2
    return np.sqrt(acc / n)


@njit(cache=True)
def _hermite(y0, f0, y1, f1, h, theta, out, m):
    # cubic Hermite on the first m components
    t2 = theta * theta
    t3 = t2 * theta
    h00 = 2 * t3 - 3 * t2 + 1
    h10 = t3 - 2 * t2 + theta
    h01 = -2 * t3 + 3 * t2
    h11 = t3 - t2
    for i in range(m):
        out[i] = h00 * y0[i] + h10 * h * f0[i] + h01 * y1[i] + h11 * h * f1[i]


@njit(cache=True)
def _state_norm(y, d):
    acc = 0.0
    for i in range(d):
        acc += y[i] * y[i]
    return np.sqrt(acc)


@njit(cache=True)
def _finite(y):
    for i in range(y.shape[0]):
        if not np.isfinite(y[i]):
            return False
    return True


@njit(cache=True)
def _initial_step(t_span, max_step):
    return min(max_step, 1e-3 * max(1.0, t_span), t_span)


@njit(cache=True)
def _frame_condition(y, d, k):
    F = np.empty((d, k))
    for c in range(k):
        for i in range(d):
            F[i, c] = y[d + c * d + i]
    s = np.linalg.svd(F)[1]
    if s[k - 1] <= 0.0:
        return np.inf
    return s[0] / s[k - 1]


@njit(cache=True)
def _qr_frame(y, d, k, Qout, Rout):
    F = np.empty((d, k))
    for c in range(k):
        for i in range(d):
            F[i, c] = y[d + c * d + i]
    ok = True
    for c in range(k):
        nrm = 0.0
        for i in range(d):
            nrm += F[i, c] * F[i, c]
        if np.sqrt(nrm) < 1e-300:
            ok = False
    Q, R = np.linalg.qr(F)
    # positive diagonal convention
    for c in range(k):
        if R[c, c] < 0.0:
            for j in range(k):
                R[c, j] = -R[c, j]
            for i in range(d):
                Q[i, c] = -Q[i, c]
    Qout[:, :] = Q
    Rout[:, :] = R
    for c in range(k):
        for i in range(d):
            y[d + c * d + i] = Q[i, c]
    return ok


@njit(cache=True, nogil=True)
def integrate_sampled(kind, p, b, y0, d, k, t_end, rtol, atol, max_step,
                      out_dt, qr_dt, cond_max):
    """Integrate over [0, t_end], sampling the state every ``out_dt``.

    With ``k > 0`` the frame is QR re-orthonormalised at multiples of
    ``qr_dt`` (and early when its condition number exceeds ``cond_max``);
    each event records (time, Q, R).
    """
    n = y0.shape[0]
    n_out = int(np.floor(t_end / out_dt + 1e-9)) + 1
    extra = 1 if (n_out - 1) * out_dt < t_end - 1e-12 else 0
    ts = np.empty(n_out + extra)
    xs = np.empty((n_out + extra, d))
    for i in range(n_out):
        ts[i] = i * out_dt
    if extra:
        ts[n_out] = t_end
    cap = 16
    if k > 0:
        cap = int(np.ceil(t_end / qr_dt)) * 2 + 16
    qt = np.empty(cap)
    qQ = np.empty((cap, d, max(k, 1)))
    qR = np.empty((cap, max(k, 1), max(k, 1)))
    nq = 0

    y = y0.copy()
    f = np.empty(n)
    aug_rhs(kind, p, b, y, d, k, f)
    K = np.empty((7, n))
    ynew = np.empty(n)
    xs[0, :] = y[:d]
    iout = 1
    t = 0.0
    h = _initial_step(t_end, max_step)
    n_acc = 0
    n_rej = 0
    max_err = 0.0
    status = OK
    next_qr = qr_dt if k > 0 else np.inf
    Qtmp = np.empty((d, max(k, 1)))
    Rtmp = np.empty((max(k, 1), max(k, 1)))
    while t < t_end - 1e-14 * max(1.0, t_end):
        h = min(h, max_step, t_end - t)
        if k > 0 and t + h > next_qr:
            h = next_qr - t
        if h < MIN_STEP:
            status = UNDERFLOW
            break
        _dopri_step(kind, p, b, y, f, h, d, k, K, ynew)
        err = _err_norm(y, ynew, K, h, rtol, atol)
        if not np.isfinite(err):
            err = 1e10
        if err <= 1.0:
            t_new = t + h
            if abs(t_new - next_qr) < 1e-12:
                t_new = next_qr
            if not _finite(ynew[:d]) or _state_norm(ynew, d) > BLOWUP_NORM:
                status = BLOWUP
                break
            while iout < ts.shape[0] and ts[iout] <= t_new + 1e-12:
                theta = (ts[iout] - t) / h
                if theta > 1.0:
                    theta = 1.0
                _hermite(y, f, ynew, K[6], h, theta, xs[iout], d)
                iout += 1
            y[:] = ynew
            f[:] = K[6]
            t = t_new
            n_acc += 1
            if err > max_err:
                max_err = err
            if k > 0:
                do_qr = t >= next_qr - 1e-12 or t >= t_end - 1e-12
                if not do_qr and n_acc % 8 == 0:
                    if _frame_condition(y, d, k) > cond_max:
                        do_qr = True
                if do_qr:
                    if nq >= cap:
                        cap2 = cap * 2
                        qt2 = np.empty(cap2)
                        qQ2 = np.empty((cap2, d, k))
                        qR2 = np.empty((cap2, k, k))
                        qt2[:cap] = qt
                        qQ2[:cap] = qQ
                        qR2[:cap] = qR
                        qt, qQ, qR, cap = qt2, qQ2, qR2, cap2
                    ok = _qr_frame(y, d, k, Qtmp, Rtmp)
                    qt[nq] = t
                    qQ[nq] = Qtmp
                    qR[nq] = Rtmp
                    nq += 1
                    if not ok:
                        status = DEGENERATE
                        break
                    aug_rhs(kind, p, b, y, d, k, f)
                    if t >= next_qr - 1e-12:
                        next_qr += qr_dt
            fac = 5.0 if err == 0.0 else min(5.0, max(0.2, 0.9 * err ** -0.2))
            h = h * fac
        else:
            n_rej += 1
            h = h * max(0.2, 0.9 * err ** -0.2)
    return (status, ts[:iout], xs[:iout], qt[:nq], qQ[:nq], qR[:nq], t,
            n_acc, n_rej, max_err)


@njit(cache=True)
def _signed(x, base, normal):
    s = 0.0
    for i in range(base.shape[0]):
        s += normal[i] * (x[i] - base[i])
    return s


@njit(cache=True, nogil=True)
def integrate_to_crossing(kind, p, b, y0, d, k, t_max, rtol, atol, max_step,
                          T1, bases, normals, frames, half_widths, sings,
                          t_min):
    """Integrate until the first positive crossing of a section after T1.

    A crossing counts when the signed distance n.(x - base) passes from
    negative to non-negative at a time > max(T1, t_min) and the crossing
    point lies inside the section's half-widths.  The crossing is located
    by bisection on the Hermite interpolant, then polished by one exact
    step to the crossing time and one Newton correction.

    Returns (status, t, y, section, min_singularity_distance, n_steps).
    """
    n = y0.shape[0]
    ns = bases.shape[0]
    y = y0.copy()
    f = np.empty(n)
    aug_rhs(kind, p, b, y, d, k, f)
    K = np.empty((7, n))
    K2 = np.empty((7, n))
    ynew = np.empty(n)
    yc = np.empty(n)
    yc2 = np.empty(n)
    xi = np.empty(d)
    fc = np.empty(n)
    t = 0.0
    h = _initial_step(t_max, max_step)
    n_acc = 0
    min_sing = np.inf
    for j in range(sings.shape[0]):
        dd = 0.0
        for i in range(d):
            dd += (y[i] - sings[j, i]) ** 2
        min_sing = min(min_sing, np.sqrt(dd))
    s_old = np.empty(ns)
    for j in range(ns):
        s_old[j] = _signed(y, bases[j], normals[j])
    t_floor = max(T1, t_min)
    while t < t_max:
        h = min(h, max_step)
        if h < MIN_STEP:
            return UNDERFLOW, t, y, -1, min_sing, n_acc
        _dopri_step(kind, p, b, y, f, h, d, k, K, ynew)
        err = _err_norm(y, ynew, K, h, rtol, atol)
        if not np.isfinite(err):
            err = 1e10
        if err > 1.0:
            h = h * max(0.2, 0.9 * err ** -0.2)
            continue
        if not _finite(ynew[:d]) or _state_norm(ynew, d) > BLOWUP_NORM:
            return BLOWUP, t, y, -1, min_sing, n_acc
        t_new = t + h
        n_acc += 1
        best_t = np.inf
        best_j = -1
        for j in range(ns):
            s1 = _signed(ynew, bases[j], normals[j])
            s0 = s_old[j]
            s_old[j] = s1
            if not (s0 < 0.0 and s1 >= 0.0):
                continue
            if t_new <= t_floor:
                continue
            lo = 0.0
            hi = 1.0
            for _ in range(200):
                mid = 0.5 * (lo + hi)
                _hermite(y, f, ynew, K[6], h, mid, xi, d)
                sm = _signed(xi, bases[j], normals[j])
                if abs(sm) < 1e-10 and hi - lo < 1e-6:
                    lo = mid
                    hi = mid
                    break
                if sm < 0.0:
                    lo = mid
                else:
                    hi = mid
                if hi - lo < 1e-15:
                    break
            theta = 0.5 * (lo + hi)
            tc = t + theta * h
            if tc <= t_floor:
                continue
            _hermite(y, f, ynew, K[6], h, theta, xi, d)
            inside = True
            for a in range(d - 1):
                u = 0.0
                for i in range(d):
                    u += frames[j, i, a] * (xi[i] - bases[j, i])
                if abs(u) > half_widths[j, a]:
                    inside = False
            if inside and tc < best_t:
                best_t = tc
                best_j = j
        for j in range(sings.shape[0]):
            dd = 0.0
            for i in range(d):
                dd += (ynew[i] - sings[j, i]) ** 2
            min_sing = min(min_sing, np.sqrt(dd))
        if best_j >= 0:
            # exact step to the crossing time, then one Newton correction
            hc = best_t - t
            if hc > 0.0:
                _dopri_step(kind, p, b, y, f, hc, d, k, K2, yc)
            else:
                yc[:] = y
            aug_rhs(kind, p, b, yc, d, k, fc)
            sdot = 0.0
            for i in range(d):
                sdot += normals[best_j, i] * fc[i]
            sc = _signed(yc, bases[best_j], normals[best_j])
            dt = -sc / sdot if sdot != 0.0 else 0.0
            if dt != 0.0:
                _dopri_step(kind, p, b, yc, fc, dt, d, k, K2, yc2)
                yc[:] = yc2
            return OK, best_t + dt, yc, best_j, min_sing, n_acc
        y[:] = ynew
        f[:] = K[6]
        t = t_new
        fac = 5.0 if err == 0.0 else min(5.0, max(0.2, 0.9 * err ** -0.2))
        h = h * fac
    return NO_RETURN, t, y, -1, min_sing, n_acc
