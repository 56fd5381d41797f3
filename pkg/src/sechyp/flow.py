"""Flow map, variational flow and trapping-region checks."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import trapezoid

from . import _kernels as K
from .errors import BlowUp, ConfigError, DegenerateFrame, StepSizeUnderflow
from .parallel import ordered_map


@dataclass(frozen=True)
class IntegratorConfig:
    rel_tol: float = 1e-10
    abs_tol: float = 1e-12
    max_step: float = 0.05
    max_time: float = 1e6
    scheme: str = "dopri54"
    qr_interval: float = 0.5
    qr_cond_max: float = 1e6

    def __post_init__(self):
        if self.rel_tol <= 0 or self.abs_tol <= 0:
            raise ConfigError("integrator tolerances must be positive")
        if self.scheme != "dopri54":
            raise ConfigError(f"unknown integration scheme {self.scheme!r}")

    def tighter(self, factor=10.0):
        return IntegratorConfig(self.rel_tol / factor, self.abs_tol / factor,
                                self.max_step, self.max_time, self.scheme,
                                self.qr_interval, self.qr_cond_max)


DEFAULT_CONFIG = IntegratorConfig()


@dataclass
class JetTrajectory:
    """Sampled orbit, optionally with its QR-renormalised tangent frame.

    ``frame_times[0] == 0`` and ``frames[0]`` is the supplied initial frame;
    later entries are the orthonormal Q factors at each re-orthonormalisation
    and ``r_factors[i]`` the matching triangular factors, so that
    D phi_t F0 = Q_m R_m ... R_1 R_0.
    """

    times: np.ndarray
    states: np.ndarray
    frame_times: np.ndarray | None = None
    frames: np.ndarray | None = None
    r_factors: np.ndarray | None = None
    integrator_stats: dict = field(default_factory=dict)

    @property
    def final_state(self):
        return self.states[-1]

    @property
    def has_frames(self):
        return self.frames is not None


def _raise_status(status, t):
    if status == K.BLOWUP:
        raise BlowUp(f"|x| exceeded {K.BLOWUP_NORM:g} near t={t:g}")
    if status == K.UNDERFLOW:
        raise StepSizeUnderflow(f"step size fell below {K.MIN_STEP:g} at t={t:g}")
    if status == K.DEGENERATE:
        raise DegenerateFrame(f"frame column collapsed near t={t:g}")


def integrate(spec, x0, T, cfg=DEFAULT_CONFIG, with_frame=None, out_dt=None):
    x0 = np.asarray(x0, dtype=float)
    if T <= 0:
        raise ConfigError("T must be positive")
    if x0.shape != (spec.dim,) or not np.all(np.isfinite(x0)):
        raise ConfigError(f"x0 must be finite with length {spec.dim}")
    d = spec.dim
    if out_dt is None:
        out_dt = min(0.01, T)
    if with_frame is not None:
        F0 = np.asarray(with_frame, dtype=float).reshape(d, -1)
        k = F0.shape[1]
        Q0, R0 = np.linalg.qr(F0)
        sgn = np.sign(np.diag(R0))
        sgn[sgn == 0] = 1.0
        Q0, R0 = Q0 * sgn, R0 * sgn[:, None]
        y0 = np.concatenate([x0, Q0.T.ravel()])
    else:
        k = 0
        y0 = x0.copy()
    kind, p, b = spec.kernel_args
    (status, ts, xs, qt, qQ, qR, t_reached, n_acc, n_rej,
     max_err) = K.integrate_sampled(kind, p, b, y0, d, k, float(T), cfg.rel_tol,
                                    cfg.abs_tol, cfg.max_step, float(out_dt),
                                    cfg.qr_interval, cfg.qr_cond_max)
    _raise_status(status, t_reached)
    stats = {"accepted": int(n_acc), "rejected": int(n_rej), "max_error": float(max_err)}
    if k == 0:
        return JetTrajectory(ts.copy(), xs.copy(), integrator_stats=stats)
    frame_times = np.concatenate([[0.0], qt])
    frames = np.concatenate([F0[None], qQ])
    r_factors = np.concatenate([R0[None], qR])
    return JetTrajectory(ts.copy(), xs.copy(), frame_times, frames, r_factors, stats)


def flow_map(spec, x0, t, cfg=DEFAULT_CONFIG):
    x0 = np.asarray(x0, dtype=float)
    if t == 0:
        return x0.copy()
    return integrate(spec, x0, t, cfg, out_dt=t).final_state.copy()


def tangent_map(spec, x0, t, cfg=DEFAULT_CONFIG):
    """Full D phi_t(x0) reassembled from the QR factors."""
    traj = integrate(spec, x0, t, cfg, with_frame=np.eye(spec.dim), out_dt=t)
    M = np.eye(spec.dim)
    for R in traj.r_factors[1:]:
        M = R @ M
    return traj.final_state.copy(), traj.frames[-1] @ M


def tangent_norm_growth(traj: JetTrajectory):
    """Per re-orthonormalisation interval: (durations, log |diag R|).

    Row i holds the log growth of the frame columns (in Gram-Schmidt order)
    over the interval ending at ``frame_times[i + 1]``.
    """
    if not traj.has_frames:
        raise ConfigError("trajectory carries no tangent frame")
    diag = np.abs(np.diagonal(traj.r_factors[1:], axis1=1, axis2=2))
    if np.any(diag < 1e-300):
        raise DegenerateFrame("frame column collapsed below 1e-300")
    return np.diff(traj.frame_times), np.log(diag)


def log_det_tangent(traj: JetTrajectory):
    """log |det D phi_t| restricted to the frame span, from QR logs."""
    _, logs = tangent_norm_growth(traj)
    return float(logs.sum())


def divergence_integral(spec, traj: JetTrajectory):
    """Trapezoidal integral of div G along the sampled states."""
    kind, p, b = spec.kernel_args
    J = np.empty((spec.dim, spec.dim))
    div = np.empty(len(traj.times))
    for i, x in enumerate(traj.states):
        K.jac(kind, p, b, x, J)
        div[i] = np.trace(J)
    return float(trapezoid(div, traj.times))


def boundary_grid(box, grid_n):
    """Grid with ``grid_n`` nodes per axis, endpoints on the faces."""
    lo, hi = (np.asarray(a, float) for a in box)
    axes = [np.linspace(l, h, grid_n) for l, h in zip(lo, hi)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def box_margin(points, box):
    lo, hi = (np.asarray(a, float) for a in box)
    return np.minimum(points - lo, hi - points).min(axis=-1)


def trap_check(spec, box, grid_n, T, cfg=DEFAULT_CONFIG, t_grace=None):
    if grid_n < 2:
        raise ConfigError("grid_n must be >= 2")
    if t_grace is None:
        t_grace = getattr(spec, "trap_grace", 0.1)
    starts = boundary_grid(box, grid_n)

    def one(x0):
        try:
            traj = integrate(spec, x0, T, cfg, out_dt=0.01)
        except (BlowUp, StepSizeUnderflow) as exc:
            return -np.inf, str(exc)
        m = box_margin(traj.states[traj.times >= t_grace], box)
        return float(m.min()), ""

    results = ordered_map(one, starts)
    margins = np.array([r[0] for r in results])
    worst = int(np.argmin(margins))
    return {
        "pass": bool(np.all(margins > 0)),
        "worst_margin": float(margins[worst]),
        "worst_start": starts[worst].tolist(),
        "diagnostic": results[worst][1],
    }


# -------------------------------------------------------------- cache io

def write_trajectory_csv(path, traj: JetTrajectory):
    d = traj.states.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"x{i + 1}" for i in range(d)])
        for t, x in zip(traj.times, traj.states):
            w.writerow([repr(float(t))] + [repr(float(v)) for v in x])
    if traj.has_frames:
        k = traj.frames.shape[2]
        side = str(path).rsplit(".", 1)[0] + "_frames.csv"
        with open(side, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"f{i + 1}{j + 1}" for i in range(d) for j in range(k)])
            for t, F in zip(traj.frame_times, traj.frames):
                w.writerow([repr(float(t))] + [repr(float(v)) for v in F.ravel()])


def read_trajectory_csv(path):
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return JetTrajectory(data[:, 0].copy(), data[:, 1:].copy())
