"""Precision-preserving integration of the bowen eye.

Inside the eye the quantity delta = -P = (1 - x^2)^2 - y^2 obeys
delta' = -e x^2 delta exactly, and near the cycle it becomes far smaller
than the spacing of doubles around x = +-1.  Cartesian integration then
stops resolving the sojourn times at the saddles after a few passages and
the running averages converge spuriously.

Away from x = 0 the orbit is carried in the chart (w, zeta, h) with

    w = log delta,  u = 1 - x^2 = exp(w/2) cosh(zeta),
    y = exp(w/2) sinh(zeta),  h = sign(x),

in which the field reads w' = -e x^2, zeta' = 4 alpha x.  Both right-hand
sides stay O(1) however thin the orbit gets.  In the strip |x| < X_SWITCH
the Cartesian field is used, with w carried along as an extra state.
"""

from __future__ import annotations

import numpy as np
from scipy.integrate import solve_ivp

from .errors import ConfigError

X_SWITCH = 0.5
U_SWITCH = 1.0 - X_SWITCH ** 2


def _u_y(w, zeta):
    # exp(w/2) cosh(zeta) without overflow of cosh for large |zeta|
    a = abs(zeta)
    base = np.exp(min(w / 2.0 + a - np.log(2.0), 700.0))
    tail = np.exp(-2.0 * a)
    return base * (1.0 + tail), np.sign(zeta) * base * (1.0 - tail)


def _zeta(y, w):
    # asinh(y exp(-w/2)) evaluated in log space
    if y == 0.0:
        return 0.0
    return np.sign(y) * (np.log(abs(y)) - w / 2.0
                         + np.log1p(np.sqrt(1.0 + np.exp(w) / (y * y))))


def inside_eye(x0):
    x, y = float(x0[0]), float(x0[1])
    return abs(x) < 1.0 and (1.0 - x * x) ** 2 - y * y > 0.0


def running_integrals(alpha, e, x0, psi, checkpoints, rtol=1e-10, atol=1e-12):
    """Integral of psi along the orbit of x0 up to each checkpoint.

    ``psi`` maps an (n, 2) array of points to n values, or to an (n, m)
    array, in which case the result has shape (len(checkpoints), m).
    """
    if not inside_eye(x0):
        raise ConfigError("start point must lie strictly inside the eye")
    cps = np.asarray(checkpoints, float)
    if np.any(np.diff(cps) <= 0) or cps[0] <= 0:
        raise ConfigError("checkpoints must be positive and increasing")

    probe = np.asarray(psi(np.array([[float(x0[0]), float(x0[1])]])), float)
    vector = probe.ndim == 2
    m = probe.shape[1] if vector else 1

    def psi1(x, y):
        return np.asarray(psi(np.array([[x, y]])), float).ravel()

    def cart_rhs(t, s):
        x, y = s[0], s[1]
        q = 1.0 - x * x
        return [-2.0 * alpha * y + e * x * q / 4.0,
                4.0 * alpha * x * q - e * x * x * y / 2.0,
                -e * x * x, *psi1(x, y)]

    def log_rhs_factory(h):
        def rhs(t, s):
            w, zeta = s[0], s[1]
            u, y = _u_y(w, zeta)
            x = h * np.sqrt(max(1.0 - u, 0.0))
            return [-e * x * x, 4.0 * alpha * x, *psi1(x, y)]
        return rhs

    def leave_strip(t, s):
        return abs(s[0]) - X_SWITCH
    leave_strip.terminal = True
    leave_strip.direction = 1

    def enter_strip(t, s):
        return _u_y(s[0], s[1])[0] - U_SWITCH
    enter_strip.terminal = True
    enter_strip.direction = 1

    x, y = float(x0[0]), float(x0[1])
    w = np.log((1.0 - x * x) ** 2 - y * y)
    if abs(x) < X_SWITCH:
        mode, state = "cart", np.concatenate([[x, y, w], np.zeros(m)])
    else:
        zeta = _zeta(y, w)
        mode, state, h = "log", np.concatenate([[w, zeta], np.zeros(m)]), np.sign(x)

    t = 0.0
    out = np.empty((len(cps), m))
    k = 0
    T = cps[-1]
    while k < len(cps):
        if mode == "cart":
            sol = solve_ivp(cart_rhs, (t, T), state, method="DOP853", rtol=rtol,
                            atol=atol, events=leave_strip, dense_output=True)
        else:
            sol = solve_ivp(log_rhs_factory(h), (t, T), state, method="DOP853",
                            rtol=rtol, atol=atol, events=enter_strip,
                            dense_output=True)
        if sol.status < 0:
            raise ConfigError(f"eye integration failed: {sol.message}")
        t_end = sol.t[-1]
        while k < len(cps) and cps[k] <= t_end:
            out[k] = sol.sol(cps[k])[-m:]
            k += 1
        t, state = t_end, sol.y[:, -1]
        if sol.status != 1:
            break
        if mode == "cart":
            x, y, w = state[:3]
            h = np.sign(x)
            zeta = _zeta(y, w)
            mode, state = "log", np.concatenate([[w, zeta], state[3:]])
        else:
            w, zeta = state[:2]
            _, y = _u_y(w, zeta)
            mode, state = "cart", np.concatenate([[h * X_SWITCH, y, w], state[2:]])
    return out if vector else out[:, 0]
