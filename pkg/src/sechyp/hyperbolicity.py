"""Finite-time hyperbolicity diagnostics.

Lyapunov spectra by QR renormalisation, an estimate of the splitting
E^s + E^cu along sample points, cone re-entry and sectional expansion.
Large contraction is always handled through logarithms of QR factors, so
pushes of several time units on Lorenz stay well conditioned.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import trapezoid
from scipy.stats import qmc

from .errors import ConfigError, DegenerateFrame, SplitFail
from .flow import DEFAULT_CONFIG, integrate, tangent_map
from .parallel import ordered_map
from .vectorfield import divergence, evaluate

GAP_MIN = 10.0


# ------------------------------------------------------------ helpers

def subspace_distance(A, B):
    """max(sup_{u in E, |u|=1} d(u, F), sup_{v in F, |v|=1} d(v, E)).

    ``A`` and ``B`` hold spanning columns of E and F.
    """
    QA = np.linalg.qr(np.asarray(A, float).reshape(len(A), -1))[0]
    QB = np.linalg.qr(np.asarray(B, float).reshape(len(B), -1))[0]
    a = np.linalg.norm(QA - QB @ (QB.T @ QA), 2)
    b = np.linalg.norm(QB - QA @ (QA.T @ QB), 2)
    return float(min(max(a, b), 1.0))


def linear_fit(t, y):
    """Least squares y = c + s t.  Returns (s, c, r2, rms residual)."""
    t = np.asarray(t, float)
    y = np.asarray(y, float)
    A = np.column_stack([np.ones_like(t), t])
    (c, s), *_ = np.linalg.lstsq(A, y, rcond=None)
    res = y - (c + s * t)
    ss = np.sum((y - y.mean()) ** 2)
    r2 = 1.0 - np.sum(res ** 2) / ss if ss > 0 else 1.0
    return float(s), float(c), float(r2), float(np.sqrt(np.mean(res ** 2)))


def _grid_indices(frame_times, step):
    """Indices of frame times that sit on the regular QR grid."""
    k = np.round(frame_times / step)
    return np.nonzero(np.abs(frame_times - k * step) < 1e-9)[0]


def _cumulative_logs(traj):
    logs = np.log(np.abs(np.diagonal(traj.r_factors[1:], axis1=1, axis2=2)))
    return np.vstack([np.zeros(logs.shape[1]), np.cumsum(logs, axis=0)])


# ---------------------------------------------------------- Lyapunov

@dataclass
class LyapunovResult:
    exponents: np.ndarray
    trace_times: np.ndarray
    trace: np.ndarray
    div_average: float | None = None


def lyapunov_spectrum(spec, x0, T, k=None, cfg=DEFAULT_CONFIG, transient=0.0):
    """Benettin exponents (descending) with a 10-checkpoint running trace."""
    d = spec.dim
    k = d if k is None else int(k)
    if not 1 <= k <= d:
        raise ConfigError(f"k must lie in [1, {d}]")
    x0 = np.asarray(x0, float)
    if transient > 0:
        x0 = integrate(spec, x0, transient, cfg, out_dt=transient).final_state
    traj = integrate(spec, x0, T, cfg, with_frame=np.eye(d)[:, :k], out_dt=min(0.05, T))
    cum = _cumulative_logs(traj)
    ft = traj.frame_times
    expo = cum[-1] / ft[-1]
    checks = np.linspace(T / 10, T, 10)
    idx = np.clip(np.searchsorted(ft, checks - 1e-9), 1, len(ft) - 1)
    trace = cum[idx] / ft[idx, None]
    order = np.argsort(-expo, kind="stable")
    div = np.array([divergence(spec, x) for x in traj.states])
    div_avg = float(trapezoid(div, traj.times) / traj.times[-1])
    return LyapunovResult(expo[order], ft[idx], trace[:, order], div_avg)


# ---------------------------------------------------------- splitting

@dataclass
class SplittingReport:
    """Splitting frames at ``points`` plus fitted rates.

    ``points[i]`` is the image after ``T_push`` of the i-th requested
    sample, because E^cu there is obtained by pushing forward.
    """

    ds: int
    dcu: int
    points: np.ndarray
    Es_frames: np.ndarray
    Ecu_frames: np.ndarray
    contraction_rate: float
    domination_rate: float
    sectional_rate: tuple
    residuals: dict = field(default_factory=dict)
    log_gaps: np.ndarray | None = None
    T_push: float = 5.0

    def __post_init__(self):
        if self.ds + self.dcu != self.points.shape[1]:
            raise ConfigError("ds + dcu must equal the dimension")

    def frames_at(self, i):
        return self.Es_frames[i], self.Ecu_frames[i]


def _log_singular_values(spec, x, T, cfg):
    """(log singular values descending, V, U) of D phi_T(x) via QR logs."""
    d = spec.dim
    traj = integrate(spec, x, T, cfg, with_frame=np.eye(d), out_dt=T)
    R = np.eye(d)
    for Ri in traj.r_factors[1:]:
        R = Ri @ R
    M = traj.frames[-1] @ R
    U, s, Vt = np.linalg.svd(M)
    with np.errstate(divide="ignore"):
        logs = np.log(s)
    # the smallest value is rebuilt from log|det| which QR tracks exactly
    logdet = _cumulative_logs(traj)[-1].sum()
    logs[-1] = logdet - logs[:-1].sum()
    return logs, Vt.T, U, traj.final_state


def _split_at(spec, z, ds, T_push, cfg):
    d = spec.dim
    dcu = d - ds
    logs_z, _, U_z, p = _log_singular_values(spec, z, T_push, cfg)
    Ecu = U_z[:, :dcu].copy()
    logs_p, V_p, _, _ = _log_singular_values(spec, p, T_push, cfg)
    Es = V_p[:, dcu:].copy()
    gap = logs_p[dcu - 1] - logs_p[dcu] if 0 < ds < d else np.inf
    return p, Es, Ecu, gap


def _growth_curves(spec, p, Es, Ecu, T, cfg):
    """Log growth of E^s, of the E^cu conorm and of the E^cu volume."""
    dcu = Ecu.shape[1]
    ds = Es.shape[1]
    F = np.hstack([Ecu, Es])
    traj = integrate(spec, p, T, cfg, with_frame=F, out_dt=T)
    ft = traj.frame_times
    cum = _cumulative_logs(traj)
    idx = _grid_indices(ft, cfg.qr_interval)
    t = ft[idx]
    vol_cu = cum[idx, :dcu].sum(axis=1) if dcu else np.zeros(len(idx))
    s_log = cum[idx, dcu] if ds else np.zeros(len(idx))
    # conorm of the E^cu block from the accumulated triangular factor
    conorm = np.zeros(len(ft))
    if dcu:
        Rb = traj.r_factors[0][:dcu, :dcu] @ np.linalg.inv(traj.r_factors[0][:dcu, :dcu])
        for j, Ri in enumerate(traj.r_factors[1:], start=1):
            Rb = Ri[:dcu, :dcu] @ Rb
            sv = np.linalg.svd(Rb, compute_uv=False)
            conorm[j] = np.log(sv[-1])
    return t, s_log, conorm[idx], vol_cu


def estimate_splitting(spec, orbit_samples, ds, T_push=5.0, cfg=DEFAULT_CONFIG,
                       threads=None, check_gap=True):
    """E^s from the most contracted ds-subspace of D phi_{T_push}; E^cu from
    the pushed dominant subspace.  Frames are reported at the pushed points.
    """
    samples = np.atleast_2d(np.asarray(orbit_samples, float))
    d = spec.dim
    if not 0 <= ds <= d:
        raise ConfigError("ds out of range")
    if T_push < 5.0 - 1e-12:
        raise ConfigError("T_push must be at least 5")
    dcu = d - ds
    res = ordered_map(lambda z: _split_at(spec, z, ds, T_push, cfg), list(samples), threads)
    points = np.array([r[0] for r in res])
    Es = np.array([r[1] for r in res]).reshape(len(res), d, ds)
    Ecu = np.array([r[2] for r in res]).reshape(len(res), d, dcu)
    gaps = np.array([r[3] for r in res])
    if check_gap and np.any(gaps < np.log(GAP_MIN)):
        i = int(np.argmin(gaps))
        raise SplitFail(f"singular value gap ratio {np.exp(gaps[i]):.3g} < {GAP_MIN:g} "
                        f"at sample {i}")

    curves = ordered_map(lambda i: _growth_curves(spec, points[i], Es[i], Ecu[i],
                                                   T_push, cfg),
                         range(len(points)), threads)
    t = curves[0][0]
    s_mean = np.mean([c[1] for c in curves], axis=0)
    co_mean = np.mean([c[2] for c in curves], axis=0)
    vol_mean = np.mean([c[3] for c in curves], axis=0)
    residuals = {}
    if ds:
        slope, _, r2, rms = linear_fit(t, s_mean)
        contraction = float(np.exp(slope))
        residuals["contraction"] = {"r2": r2, "rms": rms}
        dslope, _, r2d, rmsd = linear_fit(t, s_mean - co_mean)
        domination = float(np.exp(dslope))
        residuals["domination"] = {"r2": r2d, "rms": rmsd}
    else:
        contraction, domination = 0.0, 0.0
    th, c0, r2s, rmss = linear_fit(t, vol_mean)
    residuals["sectional"] = {"r2": r2s, "rms": rmss}
    return SplittingReport(ds, dcu, points, Es, Ecu, contraction, domination,
                           (float(np.exp(c0)), th), residuals, gaps, float(T_push))


# ---------------------------------------------------------- cones

def decompose(v, Es, Ecu):
    """Split v = v_s + v_cu along the (generally oblique) frames."""
    B = np.hstack([Es, Ecu])
    c = np.linalg.solve(B, v)
    ds = Es.shape[1]
    return Es @ c[:ds], Ecu @ c[ds:]


def cone_boundary_vectors(Es, Ecu, a, n_vectors, seed=0):
    """Vectors with |v_s| = a |v_cu| spread over the cone boundary."""
    ds, dcu = Es.shape[1], Ecu.shape[1]
    if ds == 0:
        u = qmc.Halton(d=max(dcu, 1), scramble=False, seed=seed)
        u.fast_forward(1)
        raw = u.random(n_vectors) * 2 - 1
        return np.array([Ecu @ r / np.linalg.norm(Ecu @ r) for r in raw])
    out = []
    h = qmc.Halton(d=ds + dcu, scramble=False, seed=seed)
    h.fast_forward(1)
    for r in h.random(n_vectors) * 2 - 1:
        vs = Es @ r[:ds]
        vc = Ecu @ r[ds:]
        ns, nc = np.linalg.norm(vs), np.linalg.norm(vc)
        if ns < 1e-12 or nc < 1e-12:
            continue
        out.append(a * vs / ns + vc / nc)
    return np.array(out)


def _cone_at(spec, report, i, a, t, n_vectors, cfg):
    Es, Ecu = report.frames_at(i)
    p = report.points[i]
    vecs = cone_boundary_vectors(Es, Ecu, a, n_vectors, seed=i)
    q, M = tangent_map(spec, p, t, cfg)
    # E^cu is carried forward; E^s at the image comes from a fresh push
    Ecu_q = np.linalg.qr(M @ Ecu)[0] if Ecu.shape[1] else Ecu
    if Es.shape[1]:
        _, V, _, _ = _log_singular_values(spec, q, report.T_push, cfg)
        Es_q = V[:, report.dcu:]
    else:
        Es_q = Es
    margins = []
    for v in vecs:
        w_s, w_cu = decompose(M @ v, Es_q, Ecu_q)
        ns = np.linalg.norm(w_s)
        nc = np.linalg.norm(w_cu)
        if ns == 0:
            margins.append(np.inf)
        else:
            margins.append(np.log(a * nc / ns) / t)
    return np.array(margins)


def cone_invariance_check(spec, report: SplittingReport, a, t_list, n_vectors=16,
                          cfg=DEFAULT_CONFIG, threads=None):
    """Strict re-entry of the cu-cone of aperture a after each t in t_list.

    The margin of a boundary vector is log(a |w_cu| / |w_s|) / t for its
    image w; a violation is a non-positive margin.
    """
    if a <= 0:
        raise ConfigError("cone aperture must be positive")
    if any(t < 1 for t in t_list):
        raise ConfigError("cone times must be >= 1")
    jobs = [(i, t) for t in t_list for i in range(len(report.points))]
    res = ordered_map(lambda j: _cone_at(spec, report, j[0], a, j[1], n_vectors, cfg),
                      jobs, threads)
    allm = np.concatenate(res) if res else np.array([np.inf])
    return {"violations": int(np.sum(allm <= 0)), "min_margin": float(allm.min()),
            "n_checked": int(allm.size)}


# ---------------------------------------------------------- sectional

def _random_planes(dcu, n_planes, seed):
    if dcu == 2:
        return [np.eye(2)]
    h = qmc.Halton(d=2 * dcu, scramble=False, seed=seed)
    h.fast_forward(1)
    out = []
    for r in h.random(n_planes) * 2 - 1:
        Q, Rr = np.linalg.qr(r.reshape(dcu, 2))
        if abs(Rr[1, 1]) > 1e-8:
            out.append(Q)
    return out


def sectional_expansion_check(spec, report: SplittingReport, n_planes=1, T=20.0,
                              cfg=DEFAULT_CONFIG, threads=None, seed=0):
    """Fit log |det(D phi_t | P)| = log K + theta t over 2-planes P in E^cu.

    Returns a dict with K, theta, the fit residual and per-plane minimum
    growth rates (final log det divided by T).
    """
    if report.dcu < 2:
        raise SplitFail("sectional expansion needs dcu >= 2")
    if n_planes < 1:
        raise ConfigError("n_planes must be >= 1")
    planes = _random_planes(report.dcu, n_planes, seed)

    def one(job):
        i, P = job
        frame = report.Ecu_frames[i] @ P
        traj = integrate(spec, report.points[i], T, cfg, with_frame=frame, out_dt=T)
        cum = _cumulative_logs(traj)
        idx = _grid_indices(traj.frame_times, cfg.qr_interval)
        return traj.frame_times[idx], cum[idx].sum(axis=1)

    jobs = [(i, P) for i in range(len(report.points)) for P in planes]
    curves = ordered_map(one, jobs, threads)
    n = min(len(c[0]) for c in curves)
    t = curves[0][0][:n]
    mean = np.mean([c[1][:n] for c in curves], axis=0)
    theta, c0, r2, rms = linear_fit(t, mean)
    per_plane = np.array([c[1][n - 1] / t[-1] for c in curves])
    return {"K": float(np.exp(c0)), "theta": theta, "r2": r2, "rms": rms,
            "min_growth": float(per_plane.min()), "per_plane": per_plane}


def flow_direction_exponent(spec, x0, T, cfg=DEFAULT_CONFIG):
    """(1/T) log(|G(phi_T x)| / |G(x)|): the exponent along the flow."""
    x0 = np.asarray(x0, float)
    g0 = np.linalg.norm(evaluate(spec, x0))
    if g0 == 0:
        raise DegenerateFrame("flow direction undefined at an equilibrium")
    xT = integrate(spec, x0, T, cfg, out_dt=T).final_state
    return float(np.log(np.linalg.norm(evaluate(spec, xT)) / g0) / T)


# ---------------------------------------------------------- io

def write_splitting_csv(path, report: SplittingReport):
    d = report.points.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"p{i + 1}" for i in range(d)]
                   + [f"es{i + 1}{j + 1}" for i in range(d) for j in range(report.ds)]
                   + [f"ecu{i + 1}{j + 1}" for i in range(d) for j in range(report.dcu)])
        for p, Es, Ecu in zip(report.points, report.Es_frames, report.Ecu_frames):
            w.writerow([repr(float(v)) for v in np.concatenate([p, Es.ravel(), Ecu.ravel()])])
        K, th = report.sectional_rate
        w.writerow([f"# ds={report.ds} dcu={report.dcu} contraction={report.contraction_rate!r}"
                    f" domination={report.domination_rate!r} K={K!r} theta={th!r}"])


def read_splitting_csv(path):
    with open(path) as fh:
        lines = fh.read().strip().splitlines()
    summary = dict(kv.split("=") for kv in lines[-1].lstrip("# ").split())
    ds, dcu = int(summary["ds"]), int(summary["dcu"])
    d = ds + dcu
    data = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:-1]]).reshape(-1, d + d * d)
    points = data[:, :d]
    Es = data[:, d:d + d * ds].reshape(-1, d, ds)
    Ecu = data[:, d + d * ds:].reshape(-1, d, dcu)
    return SplittingReport(ds, dcu, points, Es, Ecu, float(summary["contraction"]),
                           float(summary["domination"]),
                           (float(summary["K"]), float(summary["theta"])))
