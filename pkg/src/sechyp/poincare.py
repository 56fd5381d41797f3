"""Cross-sections, first-return maps and their singular loci.

Sections are affine charts: a hyperplane through ``base`` with unit normal
along G(base) and an orthonormal in-plane frame whose first ``ds`` columns
are stable-like.  A first return is the first crossing, after time T1, from
the negative to the non-negative side of any section, inside its outer
half-widths.  ``hit_inner`` records landing in the inner chart of relative
size A0.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .errors import (ConfigError, CoverFail, FoliationFail, InsufficientRange,
                     NoReturn)
from .flow import DEFAULT_CONFIG, _raise_status, flow_map
from .parallel import ordered_map
from .vectorfield import evaluate

A0 = 0.75
T_MAX_DEFAULT = 50.0


@dataclass(frozen=True)
class SectionChart:
    base: np.ndarray
    normal: np.ndarray
    in_frame: np.ndarray
    half_widths: np.ndarray
    id: int = 0
    a0: float = A0

    def __post_init__(self):
        if not 0 < self.a0 < 1:
            raise ConfigError("inner section factor a0 must lie in (0, 1)")
        F = self.in_frame
        if F.size and np.abs(F.T @ F - np.eye(F.shape[1])).max() > 1e-8:
            raise ConfigError("section frame is not orthonormal")
        if F.size and np.abs(F.T @ self.normal).max() > 1e-8:
            raise ConfigError("section frame must be orthogonal to the normal")

    @property
    def codim_dim(self):
        return self.in_frame.shape[1]

    @property
    def delta0(self):
        """Distance between the outer and the inner boundary."""
        return float(np.min((1.0 - self.a0) * self.half_widths))

    def to_ambient(self, u):
        return self.base + self.in_frame @ np.asarray(u, float)

    def to_coords(self, x):
        return self.in_frame.T @ (np.asarray(x, float) - self.base)

    def signed_distance(self, x):
        return float(self.normal @ (np.asarray(x, float) - self.base))

    def inside(self, u, inner=False):
        w = self.half_widths * (self.a0 if inner else 1.0)
        return bool(np.all(np.abs(u) <= w))

    def boundary_distance(self, u):
        """Distance from u to the outer boundary (negative outside)."""
        return float(np.min(self.half_widths - np.abs(u)))


@dataclass(frozen=True)
class SuspensionSection:
    """The natural section {s = 0} of a :class:`MapSuspension`."""

    lo: float
    hi: float
    id: int = 0
    a0: float = A0

    @property
    def half_widths(self):
        return np.array([(self.hi - self.lo) / 2.0])

    @property
    def center(self):
        return (self.hi + self.lo) / 2.0

    def inside(self, u, inner=False):
        w = self.half_widths[0] * (self.a0 if inner else 1.0)
        return bool(abs(float(np.ravel(u)[0]) - self.center) <= w + 1e-15)


@dataclass
class ReturnSample:
    start_section: int
    start: np.ndarray
    end_section: int
    end: np.ndarray
    tau: float
    tangent: np.ndarray | None = None
    hit_inner: bool = False
    end_ambient: np.ndarray | None = None
    min_singularity_distance: float = np.inf


# ------------------------------------------------------------ building

def make_section(spec, base, in_frame_hint=None, half_widths=None, id=0, a0=A0):
    """Section through ``base`` normal to G(base).

    ``in_frame_hint`` columns are projected to the plane and orthonormalised
    in order, so a stable direction passed first stays first.
    """
    base = np.asarray(base, float)
    g = evaluate(spec, base)
    ng = np.linalg.norm(g)
    if ng <= 1e-6:
        raise ConfigError("section base too close to an equilibrium (|G| <= 1e-6)")
    n = g / ng
    d = spec.dim
    hint = np.eye(d) if in_frame_hint is None else np.asarray(in_frame_hint, float).reshape(d, -1)
    cols = []
    for v in list(hint.T) + list(np.eye(d)):
        v = v - n * (n @ v)
        for c in cols:
            v = v - c * (c @ v)
        nv = np.linalg.norm(v)
        if nv > 1e-8:
            cols.append(v / nv)
        if len(cols) == d - 1:
            break
    frame = np.array(cols).T
    hw = np.full(d - 1, 1.0) if half_widths is None else np.asarray(half_widths, float)
    return SectionChart(base, n, frame, hw, id, a0)


def lorenz_section(spec, splitting=None, half_width=25.0):
    """The classical section z = rho - 1 crossed downward, base on the z axis.

    With a splitting report the cu axis follows E^cu projected along the
    flow, and the stable-like axis is its in-plane complement.
    """
    rho = spec.params["rho"]
    base = np.array([0.0, 0.0, rho - 1.0])
    sec0 = make_section(spec, base, half_widths=[half_width, half_width])
    if splitting is None:
        return sec0
    return oriented_section(spec, sec0, splitting)


def oriented_section(spec, sec, splitting):
    """Same plane, in-frame rotated so the last axis is the projected E^cu."""
    if sec.codim_dim != 2:
        return sec
    c = cu_direction_in_section(spec, sec, splitting)
    cu = sec.in_frame @ c
    st = np.cross(sec.normal, cu)
    return SectionChart(sec.base, sec.normal, np.column_stack([st, cu]),
                        sec.half_widths, sec.id, sec.a0)


def _project_along_flow(spec, section, p, V):
    g = evaluate(spec, p)
    n = section.normal
    return section.in_frame.T @ (V - np.outer(g, n @ V) / (n @ g))


def _mean_axis(vectors):
    acc = np.zeros(len(vectors[0]))
    for c in vectors:
        c = c / np.linalg.norm(c)
        acc += c if acc @ c >= 0 else -c
    return acc / np.linalg.norm(acc)


def cu_direction_in_section(spec, section, splitting):
    """Mean in-plane image of E^cu projected along G (unit, section coords)."""
    dirs = []
    for p, Ecu in zip(splitting.points, splitting.Ecu_frames):
        W = _project_along_flow(spec, section, p, Ecu)
        U, sv, _ = np.linalg.svd(W)
        dirs.append(U[:, 0])
    if not dirs:
        raise ConfigError("no splitting samples for the cu direction")
    return _mean_axis(dirs)


def stable_direction_in_section(spec, section, splitting):
    """Mean E^s of the report, projected into the plane along G.

    Returned in the section's coordinates, unit length.
    """
    dirs = [_project_along_flow(spec, section, p, Es[:, :1])[:, 0]
            for p, Es in zip(splitting.points, splitting.Es_frames)]
    if not dirs:
        raise ConfigError("no splitting samples for the stable direction")
    return _mean_axis(dirs)


def section_splitting_samples(spec, section, x0, n, T_push=5.0, cfg=DEFAULT_CONFIG,
                              transient=20.0):
    """Orbit points whose T_push-images are section crossings.

    Feeding these to ``estimate_splitting`` yields frames on the section.
    """
    from .flow import integrate
    x = flow_map(spec, np.asarray(x0, float), transient, cfg) if transient else np.asarray(x0, float)
    dt = 0.001
    T = T_push + 2.0
    out = []
    while len(out) < n:
        traj = integrate(spec, x, T + n * 2.0, cfg, out_dt=dt)
        sd = (traj.states - section.base) @ section.normal
        idx = np.nonzero((sd[:-1] < 0) & (sd[1:] >= 0))[0]
        for i in idx:
            if traj.times[i] < T_push:
                continue
            u = section.to_coords(traj.states[i])
            if not section.inside(u):
                continue
            # back off T_push along the sampled orbit, then correct exactly
            j = i - int(round(T_push / dt))
            out.append(traj.states[j])
            if len(out) == n:
                break
        x = traj.final_state
    return np.array(out)


def build_sections(spec, attractor_cloud, n_sections=1, splitting=None, base=None,
                   half_widths=None, T1=0.0, r_sigma=1.0, cfg=DEFAULT_CONFIG,
                   cover_sample=64):
    """Greedy cover of the regular part of the cloud by sections.

    ``base`` forces the first section.  Coverage is checked on up to
    ``cover_sample`` cloud points: each must reach an inner chart within
    10 (T1 + 2); otherwise :class:`CoverFail`.
    """
    if getattr(spec, "is_suspension", False):
        return [SuspensionSection(*spec.domain)]
    cloud = np.atleast_2d(np.asarray(attractor_cloud, float))
    if cloud.size == 0:
        raise ConfigError("attractor cloud is empty")
    sings = spec.singular_points()
    if len(sings):
        dist = np.min(np.linalg.norm(cloud[:, None, :] - sings[None], axis=2), axis=1)
        regular = cloud[dist > r_sigma]
    else:
        regular = cloud
    if len(regular) == 0:
        raise CoverFail("cloud has no regular points to cover")
    speeds = np.array([np.linalg.norm(evaluate(spec, x)) for x in regular])
    regular = regular[speeds > 1e-6]
    if len(regular) == 0:
        raise CoverFail("cloud has no regular points to cover")

    hint = None
    sections = []
    bases = [np.asarray(base, float)] if base is not None else []
    order = np.argsort(-np.array([np.linalg.norm(evaluate(spec, x)) for x in regular]),
                       kind="stable")
    candidates = bases + [regular[i] for i in order]
    hw = half_widths
    if hw is None:
        ext = np.ptp(regular, axis=0).max() / 2.0
        hw = np.full(spec.dim - 1, ext)
    for c in candidates:
        if len(sections) >= n_sections:
            break
        try:
            sec = make_section(spec, c, hint, hw, id=len(sections))
        except ConfigError:
            continue
        if any(np.linalg.norm(s.base - sec.base) < 1e-9 for s in sections):
            continue
        if splitting is not None and splitting.ds == 1:
            sec = oriented_section(spec, sec, splitting)
        sections.append(sec)

    horizon = 10.0 * (T1 + 2.0)
    picks = regular[np.linspace(0, len(regular) - 1, min(cover_sample, len(regular))).astype(int)]

    def check(x):
        try:
            hit = flow_to_sections(spec, sections, x, horizon, cfg, inner_only=True)
        except NoReturn:
            return False
        return hit is not None
    ok = ordered_map(check, list(picks))
    if not all(ok):
        bad = int(np.argmin(ok))
        raise CoverFail(f"cloud point {picks[bad].tolist()} misses every section "
                        f"for time {horizon:g}")
    return sections


# ------------------------------------------------------------ returns

def _pack(sections, inner_only=False):
    bases = np.array([s.base for s in sections])
    normals = np.array([s.normal for s in sections])
    frames = np.array([s.in_frame for s in sections])
    hw = np.array([s.half_widths * (s.a0 if inner_only else 1.0) for s in sections])
    return bases, normals, frames, hw


def _crossing(spec, sections, x0, T1, t_max, cfg, k=0, frame=None, inner_only=False,
              t_min=1e-9):
    d = spec.dim
    y0 = np.asarray(x0, float)
    if k:
        y0 = np.concatenate([y0, np.asarray(frame, float).T.ravel()])
    bases, normals, frames, hw = _pack(sections, inner_only)
    kind, p, b = spec.kernel_args
    sings = spec.singular_points().reshape(-1, d)
    status, t, y, j, msd, _ = K.integrate_to_crossing(
        kind, p, b, y0, d, k, float(t_max), cfg.rel_tol, cfg.abs_tol, cfg.max_step,
        float(T1), bases, normals, frames, hw, sings, float(t_min))
    if status == K.NO_RETURN:
        raise NoReturn(t_max)
    _raise_status(status, t)
    return t, y, int(j), float(msd)


def flow_to_sections(spec, sections, x, t_max, cfg=DEFAULT_CONFIG, inner_only=False):
    """First arrival of an arbitrary point on the union of sections."""
    t, y, j, _ = _crossing(spec, sections, x, 0.0, t_max, cfg, inner_only=inner_only,
                           t_min=0.0)
    return j, sections[j].to_coords(y[:spec.dim]), t


def section_tangent(spec, sec_from, sec_to, y_end, M):
    """E_j^T (I - G n^T / (n.G)) M E_i for an ambient tangent map M."""
    g = evaluate(spec, y_end)
    n = sec_to.normal
    P = np.eye(len(g)) - np.outer(g, n) / (n @ g)
    return sec_to.in_frame.T @ P @ M @ sec_from.in_frame


def first_return(spec, sections, section_id, u, T1=0.0, cfg=DEFAULT_CONFIG,
                 with_tangent=False, t_max=T_MAX_DEFAULT):
    if T1 < 0:
        raise ConfigError("T1 must be non-negative")
    if getattr(spec, "is_suspension", False):
        x = float(np.ravel(u)[0])
        sec = sections[0]
        if not sec.inside(x):
            raise ConfigError("start point outside the section")
        fx = float(spec.map(x))
        tau = float(spec.roof)
        n_it = 1
        while tau <= T1:
            fx = float(spec.map(fx))
            tau += spec.roof
            n_it += 1
        der = None
        if with_tangent:
            der = np.array([[float(np.prod([spec.derivative(z) for z in
                                            _orbit(spec, x, n_it)]))]])
        return ReturnSample(section_id, np.array([x]), 0, np.array([fx]), tau, der,
                            sec.inside(fx, inner=True))
    sec = sections[section_id]
    u = np.asarray(u, float)
    if not sec.inside(u):
        raise ConfigError("start point outside its section")
    x0 = sec.to_ambient(u)
    d = spec.dim
    if with_tangent:
        t, y, j, msd = _crossing(spec, sections, x0, T1, t_max, cfg, k=d, frame=np.eye(d))
        M = y[d:].reshape(d, d).T
        tgt = sections[j]
        D = section_tangent(spec, sec, tgt, y[:d], M)
    else:
        t, y, j, msd = _crossing(spec, sections, x0, T1, t_max, cfg)
        tgt = sections[j]
        D = None
    v = tgt.to_coords(y[:d])
    return ReturnSample(section_id, u, j, v, float(t), D, tgt.inside(v, inner=True),
                        y[:d].copy(), msd)


def _orbit(spec, x, n):
    out = [x]
    for _ in range(n - 1):
        out.append(float(spec.map(out[-1])))
    return out


def returns_many(spec, sections, starts, T1=0.0, cfg=DEFAULT_CONFIG, with_tangent=False,
                 t_max=T_MAX_DEFAULT, threads=None, skip_failures=False):
    """first_return over (section_id, u) pairs, index ordered.

    With ``skip_failures`` a :class:`NoReturn` yields ``None``.
    """
    def one(s):
        try:
            return first_return(spec, sections, s[0], s[1], T1, cfg, with_tangent, t_max)
        except NoReturn:
            if skip_failures:
                return None
            raise
    return ordered_map(one, list(starts), threads)


def return_orbit(spec, sections, section_id, u, n, T1=0.0, cfg=DEFAULT_CONFIG,
                 with_tangent=False):
    out = []
    sid, v = section_id, np.asarray(u, float)
    for _ in range(n):
        r = first_return(spec, sections, sid, v, T1, cfg, with_tangent)
        out.append(r)
        sid, v = r.end_section, r.end
    return out


# ------------------------------------------------------------ Gamma_0

@dataclass
class Gamma0Trace:
    """Detected trace of the stable manifolds of equilibria on a section.

    ``points`` are section coordinates located by bisection on the jump of
    the return image; ``coef`` is the least-squares line u_c = c0 + c1 u_s.
    """

    section_id: int
    points: np.ndarray
    coef: np.ndarray
    taus: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def distance(self, u):
        """Distance from u to the polyline through the detected points."""
        u = np.asarray(u, float)
        P = self.points
        if len(P) == 1:
            return float(np.linalg.norm(u - P[0]))
        best = np.inf
        for a, b in zip(P[:-1], P[1:]):
            ab = b - a
            s = np.clip((u - a) @ ab / (ab @ ab), 0.0, 1.0)
            best = min(best, float(np.linalg.norm(u - a - s * ab)))
        return best


def _image(spec, sections, sid, u, T1, cfg, t_max):
    try:
        r = first_return(spec, sections, sid, u, T1, cfg, t_max=t_max)
    except NoReturn:
        return None, np.inf
    return r.end_ambient if r.end_ambient is not None else np.ravel(r.end), r.tau


def locate_jump(spec, sections, sid, ua, ub, T1=0.0, cfg=DEFAULT_CONFIG, tol=1e-10,
                t_max=T_MAX_DEFAULT, n_coarse=64, min_jump=None):
    """Locate the largest discontinuity of the return image on [ua, ub].

    A coarse scan picks the neighbouring pair with the largest image jump;
    bisection then keeps the half whose end images differ more.  A start
    with no return is itself on the singular locus.  Returns (u, tau) or
    None when the largest jump is below ``min_jump`` (default: 10 times
    the median coarse jump).
    """
    ua = np.asarray(ua, float)
    ub = np.asarray(ub, float)
    ss = np.linspace(0.0, 1.0, n_coarse + 1)
    pts = [ua + s_ * (ub - ua) for s_ in ss]
    imgs = [_image(spec, sections, sid, u, T1, cfg, t_max) for u in pts]
    for u, (im, tau) in zip(pts, imgs):
        if im is None:
            return u, tau
    jumps = np.array([np.linalg.norm(imgs[i + 1][0] - imgs[i][0]) for i in range(n_coarse)])
    i = int(np.argmax(jumps))
    thresh = 10.0 * np.median(jumps) if min_jump is None else min_jump
    if jumps[i] <= thresh:
        return None
    a, b = pts[i], pts[i + 1]
    fa, fb = imgs[i][0], imgs[i + 1][0]
    tau = max(imgs[i][1], imgs[i + 1][1])
    while np.linalg.norm(b - a) > tol:
        m = (a + b) / 2.0
        fm, tau = _image(spec, sections, sid, m, T1, cfg, t_max)
        if fm is None:
            return m, np.inf
        if np.linalg.norm(fm - fa) >= np.linalg.norm(fb - fm):
            b, fb = m, fm
        else:
            a, fa = m, fm
    return (a + b) / 2.0, tau


def lorenz_lobe(r: ReturnSample):
    """Which wing the return lands on: sign of x + y, since the wings
    circle the equilibria at +-(c, c, rho - 1)."""
    return int(np.sign(r.end_ambient[0] + r.end_ambient[1]))


def detect_gamma0(spec, sections, sid=0, n_lines=12, span=None, T1=0.0,
                  cfg=DEFAULT_CONFIG, threads=None, tol=1e-10, line_span=None):
    """Scan lines along the cu axis and bisect the image jump on each.

    Lines sit at stable-axis offsets spread over ``span`` (default half the
    inner half-width) and run over ``line_span`` of the cu axis (default
    the inner half-width).
    """
    sec = sections[sid]
    hw = sec.half_widths * sec.a0
    span = hw[0] * 0.5 if span is None else span
    line_span = hw[1] if line_span is None else line_span
    offs = np.linspace(-span, span, n_lines)

    def one(o):
        ua = np.array([o, -line_span])
        ub = np.array([o, line_span])
        return locate_jump(spec, sections, sid, ua, ub, T1, cfg, tol)
    found = [f for f in ordered_map(one, list(offs), threads) if f is not None]
    if not found:
        raise InsufficientRange("no image discontinuity found on any scan line")
    pts = np.array([f[0] for f in found])
    taus = np.array([f[1] for f in found])
    order = np.argsort(pts[:, 0])
    pts, taus = pts[order], taus[order]
    A = np.column_stack([np.ones(len(pts)), pts[:, 0]])
    coef = np.linalg.lstsq(A, pts[:, 1], rcond=None)[0]
    return Gamma0Trace(sid, pts, coef, taus)


def gamma1_flags(samples, sections, tol=1e-3):
    """True where the image lands within ``tol`` of the inner boundary."""
    out = []
    for r in samples:
        sec = sections[r.end_section]
        w = sec.half_widths * sec.a0
        out.append(bool(np.min(np.abs(w - np.abs(np.ravel(r.end)))) < tol))
    return np.array(out)


def return_time_singularity_fit(taus, dists, tau_min=None, min_decades=3.0):
    """Least squares tau = c - C log d and an envelope check.

    Returns dict with C, c, r2, residual rms, the envelope intercept c' for
    tau <= -C' log d + c' with C' = C, and whether C' <= 1.2 C holds.
    """
    taus = np.asarray(taus, float)
    dists = np.asarray(dists, float)
    keep = np.isfinite(taus) & (dists > 0)
    if tau_min is not None:
        keep &= taus > tau_min
    taus, dists = taus[keep], dists[keep]
    if len(taus) < 2:
        raise InsufficientRange("fewer than two usable samples")
    decades = np.log10(dists.max() / dists.min())
    if decades < min_decades:
        raise InsufficientRange(f"distances span {decades:.2f} decades < {min_decades}")
    x = -np.log(dists)
    A = np.column_stack([np.ones_like(x), x])
    (c, C), *_ = np.linalg.lstsq(A, taus, rcond=None)
    res = taus - (c + C * x)
    ss = np.sum((taus - taus.mean()) ** 2)
    r2 = 1.0 - np.sum(res ** 2) / ss if ss > 0 else 1.0
    c_env = float(np.max(taus - C * x))
    return {"C": float(C), "c": float(c), "r2": float(r2),
            "rms": float(np.sqrt(np.mean(res ** 2))), "c_envelope": c_env,
            "inequality_holds": bool(np.all(taus <= C * x + c_env + 1e-12)),
            "n": int(len(taus)), "decades": float(decades)}


# ------------------------------------------------------------ hyperbolicity

def cone_vectors(a, n=9):
    """Unit vectors of the in-section cone |v_s| <= a |v_u| (2D sections)."""
    s = np.linspace(-a, a, n)
    V = np.column_stack([s, np.ones_like(s)])
    return V / np.linalg.norm(V, axis=1)[:, None]


def return_map_hyperbolicity(samples, a=0.5, ds=1):
    """Per-sample contraction along E^s(Sigma) and minimal cone expansion.

    ``lambda_s`` is the smallest singular value of the section tangent,
    ``lambda_u`` the minimal stretch |Df v| / |v| over the cu-cone
    ``|v_s| <= a |v_u|``.  A cone violation is an image of a cone vector
    leaving the cone.
    """
    lam_s, lam_u, viol = [], [], []
    for r in samples:
        D = np.atleast_2d(r.tangent)
        if D.shape[0] == 1 or ds == 0:
            lam_s.append(0.0)
            lam_u.append(float(np.min(np.abs(D))))
            viol.append(0)
            continue
        sv = np.linalg.svd(D, compute_uv=False)
        lam_s.append(float(sv[-1]))
        V = cone_vectors(a)
        W = V @ D.T
        lam_u.append(float(np.min(np.linalg.norm(W, axis=1))))
        viol.append(int(np.sum(np.abs(W[:, 0]) >= a * np.abs(W[:, 1]))))
    lam_s, lam_u, viol = map(np.array, (lam_s, lam_u, viol))
    return {"lambda_s_max": float(lam_s.max()), "lambda_u_min": float(lam_u.min()),
            "lambda_s": lam_s, "lambda_u": lam_u, "cone_violations": int(viol.sum()),
            "per_sample_violations": viol,
            "frac_expanding": float(np.mean(lam_u > 1.0))}


# ------------------------------------------------------------ quotient

@dataclass
class QuotientMap:
    x: np.ndarray
    fx: np.ndarray
    branch: np.ndarray
    discontinuities: np.ndarray
    spread: float


def quotient_coordinate(u, s_dir):
    """Coordinate along the cu axis of the stable line through u."""
    u = np.atleast_2d(u)
    return u[:, 1] - s_dir[1] / s_dir[0] * u[:, 0] if abs(s_dir[0]) > 1e-12 else u[:, 1]


def quotient_map_extract(spec, sections=None, stable_direction=None, n_bins=64, sid=0,
                         T1=0.0, cfg=DEFAULT_CONFIG, leaf_offsets=(-0.5, 0.5),
                         span=None, threads=None):
    """Tabulate the map induced on stable leaves.

    For the suspension the section is one-dimensional and the map is read
    off directly.  For a flow, bin centres lie on the cu axis; each is
    returned together with points displaced along the stable direction by
    ``leaf_offsets`` and the spread of their collapsed images is compared
    with 5% of the section width.
    """
    if n_bins < 1:
        raise ConfigError("n_bins must be >= 1")
    if getattr(spec, "is_suspension", False):
        lo, hi = spec.domain
        x = lo + (np.arange(n_bins) + 0.5) * (hi - lo) / n_bins
        fx = np.array([spec.map(v) for v in x])
        br = np.array([spec.branch(v) for v in x])
        disc = np.array(spec.breaks, float)
        return QuotientMap(x, fx, br, disc, 0.0)
    sec = sections[sid]
    s_dir = np.array([1.0, 0.0]) if stable_direction is None else np.asarray(stable_direction, float)
    s_dir = s_dir / np.linalg.norm(s_dir)
    hw = sec.half_widths * sec.a0
    span = hw[1] if span is None else span
    xs = -span + (np.arange(n_bins) + 0.5) * (2 * span / n_bins)

    def one(xv):
        u0 = np.array([0.0, xv])
        pts = [u0] + [u0 + o * s_dir for o in leaf_offsets]
        out = []
        for u in pts:
            if not sec.inside(u):
                continue
            try:
                r = first_return(spec, sections, sid, u, T1, cfg)
            except NoReturn:
                return None
            out.append(r)
        return out
    res = ordered_map(one, list(xs), threads)
    x_ok, fx, br, spreads = [], [], [], []
    for xv, rs in zip(xs, res):
        if not rs:
            continue
        q = quotient_coordinate(np.array([r.end for r in rs]), s_dir)
        x_ok.append(xv)
        fx.append(q[0])
        br.append(0)
        spreads.append(np.ptp(q))
    width = 2 * sec.half_widths[1]
    spread = float(max(spreads)) if spreads else 0.0
    if spread > 0.05 * width:
        raise FoliationFail(f"collapsed images spread {spread:.3g} > 5% of width {width:g}")
    x_ok, fx = np.array(x_ok), np.array(fx)
    disc = []
    if len(x_ok) > 2:
        # bisect inside the bin pair with the largest drop of the tabulated map
        i = int(np.argmin(np.diff(fx)))
        if fx[i + 1] < fx[i]:
            hit = locate_jump(spec, sections, sid, [0.0, x_ok[i]], [0.0, x_ok[i + 1]], T1,
                              cfg, tol=1e-6, n_coarse=1, min_jump=0.0)
            disc.append(hit[0][1])
    br = np.searchsorted(np.array(disc), x_ok) if disc else np.zeros(len(x_ok), int)
    return QuotientMap(x_ok, fx, br, np.array(disc), spread)


def monotone_branches(qm: QuotientMap):
    """List of (start, stop, sign of slope) for maximal monotone runs."""
    out = []
    dif = np.diff(qm.fx)
    i = 0
    n = len(qm.x)
    while i < n - 1:
        j = i
        sg = np.sign(dif[i])
        while j < n - 1 and np.sign(dif[j]) == sg and qm.branch[j] == qm.branch[j + 1]:
            j += 1
        out.append((i, j, int(sg)))
        i = j + 1 if j > i else i + 1
    return out


# ------------------------------------------------------------ io

def write_returns_csv(path, samples):
    if not samples:
        raise ConfigError("no samples to write")
    m = len(np.ravel(samples[0].start))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["section_from"] + [f"u{i + 1}" for i in range(m)] + ["section_to"]
                   + [f"v{i + 1}" for i in range(m)] + ["tau", "hit_inner"])
        for r in samples:
            w.writerow([r.start_section] + [repr(float(v)) for v in np.ravel(r.start)]
                       + [r.end_section] + [repr(float(v)) for v in np.ravel(r.end)]
                       + [repr(float(r.tau)), int(r.hit_inner)])


def write_quotient_csv(path, qm: QuotientMap):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "fx", "branch"])
        for a, b, c in zip(qm.x, qm.fx, qm.branch):
            w.writerow([repr(float(a)), repr(float(b)), int(c)])
