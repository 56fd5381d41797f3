"""cu-disks in sections and their expansion under the return map.

A disk lives in one section and is a graph over the cu coordinate:

    u(t) = (center_s + g(t), center_cu + t),   t in [-radius, radius],

with ``g`` tabulated on at least 65 offsets.  Only one-dimensional disks
(a single cu coordinate per section) are handled; that covers the flows in
R^3 and the interval-map suspensions.

The expansion step works in offset space.  The disk is pushed through the
return map F (``chain`` compositions of the first return after T1), and
neighbouring samples whose images disagree with the linearised prediction
are bisected down to break points.  Breaks are of three kinds:

* ``G``  a jump of F (the singular locus Gamma_0),
* ``S``  the image leaves the inner chart (stable boundary of a strip),
* ``X``  no usable image (no return, a different target section, or a
  fold of the image over the cu axis near the tangency locus of the
  section), which bounds the strip extension.

The selection rules then mirror the cases of the inductive construction.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import PchipInterpolator

from .errors import (ApertureExceeded, ConfigError, ConstantsInfeasible, DensityLost,
                     NewtonFail, Nontermination, NoReturn, OutOfSection,
                     SplitUnresolvable)
from .flow import DEFAULT_CONFIG, tangent_map
from .parallel import ordered_map
from .poincare import first_return, return_map_hyperbolicity
from .vectorfield import evaluate

N_SAMPLES = 65
N_REGRAPH = 81
DEFAULT_APERTURE = 0.1
CASES = ("1", "2a", "2b-i", "2b-ii")
TIE_TOL = 1e-9


# ------------------------------------------------------------ constants

@dataclass(frozen=True)
class DiskConstants:
    """Cone aperture ``a`` and the expansion constants of the case machine.

    ``feasible`` is False for unchecked defaults or when the measured
    lambda1 admits no lambda2 < a1 / 5 with a1 < 1.
    """

    a: float = DEFAULT_APERTURE
    lambda1: float = float("nan")
    lambda2: float = float("nan")
    a1: float = 0.9
    feasible: bool = False
    diagnostic: str = "unchecked defaults"


def make_constants(lambda1, lambda2, a1, a=DEFAULT_APERTURE):
    """Validate explicit constants against 2 l1 < l2 (1 - 2a), l2 < a1 < 1, a1 / l2 > 5."""
    if not 0 < a < 0.5:
        raise ConfigError("cone aperture must lie in (0, 1/2)")
    problems = []
    if not 2 * lambda1 < lambda2 * (1 - 2 * a):
        problems.append("2 lambda1 >= lambda2 (1 - 2a)")
    if not lambda2 < a1 < 1:
        problems.append("a1 outside (lambda2, 1)")
    if not a1 / lambda2 > 5:
        problems.append("a1 / lambda2 <= 5")
    if problems:
        raise ConstantsInfeasible("; ".join(problems))
    return DiskConstants(a, lambda1, lambda2, a1, True, "")


def choose_constants(lambda1, a=DEFAULT_APERTURE, margin=1.05, strict=True):
    """Smallest admissible lambda2 (times ``margin``) and a1 halfway to 1."""
    lam2 = margin * 2.0 * lambda1 / (1.0 - 2.0 * a)
    if 5.0 * lam2 < 1.0:
        return make_constants(lambda1, lam2, (1.0 + 5.0 * lam2) / 2.0, a)
    msg = (f"measured lambda1 = {lambda1:.4g} forces lambda2 >= {lam2:.4g}; "
           f"a1 / lambda2 > 5 needs lambda2 < 0.2, i.e. cone expansion above "
           f"{margin * 10.0 / (1.0 - 2.0 * a):.3g}")
    if strict:
        raise ConstantsInfeasible(msg)
    return DiskConstants(a, lambda1, lam2, 0.9, False, msg)


@dataclass
class _Composite:
    tangent: np.ndarray


def measure_constants(spec, sections, starts, T1=0.0, chain=1, a=DEFAULT_APERTURE,
                      cfg=DEFAULT_CONFIG, threads=None, strict=True):
    """lambda1 = max(contraction along E^s, 1 / minimal cone expansion) of F.

    ``starts`` are (section_id, u) pairs, typically points of the attractor.
    """
    def one(s):
        img = _push_one(spec, sections, s[0], np.asarray(s[1], float), T1, chain, cfg,
                        True)
        return None if img is None else _Composite(img.D)
    samples = [r for r in ordered_map(one, list(starts), threads) if r is not None]
    if not samples:
        raise ConfigError("no start returned")
    ds = _stable_dim(sections[starts[0][0]])
    h = return_map_hyperbolicity(samples, a=a, ds=ds)
    lam1 = max(h["lambda_s_max"], 1.0 / h["lambda_u_min"])
    return choose_constants(lam1, a, strict=strict)


# ------------------------------------------------------------ disks

def _stable_dim(section):
    return len(np.atleast_1d(section.half_widths)) - 1


@dataclass
class CuDisk:
    section_id: int
    center: np.ndarray
    radius: float
    offsets: np.ndarray
    graph: np.ndarray
    tangent_aperture: float

    @property
    def ds(self):
        return self.graph.shape[1]

    def g(self, t):
        t = np.atleast_1d(np.asarray(t, float))
        if self.ds == 0:
            return np.zeros((len(t), 0))
        return np.column_stack([np.interp(t, self.offsets, self.graph[:, i])
                                for i in range(self.ds)])

    def points(self, t=None):
        t = self.offsets if t is None else np.atleast_1d(np.asarray(t, float))
        c = np.asarray(self.center, float)
        return np.column_stack([c[:self.ds] + self.g(t), c[self.ds] + t])

    def subdisk(self, c, r, n=N_SAMPLES):
        t = c + np.linspace(-r, r, n)
        g = self.g(t)
        gc = self.g(c)[0]
        center = self.points(c)[0]
        graph = g - gc
        off = t - c
        return CuDisk(self.section_id, center, float(r), off, graph,
                      _aperture(off, graph))


def _aperture(off, graph):
    if graph.shape[1] == 0 or len(off) < 2:
        return 0.0
    slopes = np.linalg.norm(np.diff(graph, axis=0), axis=1) / np.diff(off)
    return float(np.max(slopes))


def make_disk(section, center, radius, g=0.0, a=DEFAULT_APERTURE, n=N_SAMPLES,
              section_id=None):
    """Disk of given inner radius around ``center`` (section coordinates).

    ``g`` is a constant, an array of stable offsets, or a callable of the
    cu offset returning the stable offsets.
    """
    if radius <= 0:
        raise ConfigError("radius must be positive")
    if n < N_SAMPLES:
        raise ConfigError(f"need at least {N_SAMPLES} samples")
    center = np.atleast_1d(np.asarray(center, float))
    ds = _stable_dim(section)
    if center.shape != (ds + 1,):
        raise ConfigError(f"center must have {ds + 1} section coordinates")
    off = np.linspace(-radius, radius, n)
    if callable(g):
        graph = np.array([np.atleast_1d(g(t)) for t in off], float).reshape(n, ds)
        graph = graph - np.atleast_1d(g(0.0)).reshape(1, ds)
    else:
        # a constant graph is a translate of the flat disk through ``center``
        graph = np.zeros((n, ds))
    ap = _aperture(off, graph)
    if ap > 2 * a * (1 + 1e-12):
        raise ApertureExceeded(f"graph slope {ap:.4g} exceeds 2a = {2 * a:g}")
    sid = getattr(section, "id", 0) if section_id is None else section_id
    disk = CuDisk(sid, center, float(radius), off, graph, ap)
    for u in disk.points():
        if not section.inside(u):
            raise OutOfSection(f"disk point {u} lies outside section {sid}")
    return disk


# ------------------------------------------------------------ pushing

@dataclass
class _Img:
    sid: int
    u: np.ndarray
    tau: float
    D: np.ndarray | None
    inner: bool
    msd: float


def _push_one(spec, sections, sid, u, T1, chain, cfg, with_tangent):
    D = None
    tau = 0.0
    msd = np.inf
    inner = True
    try:
        for _ in range(chain):
            r = first_return(spec, sections, sid, u, T1, cfg, with_tangent)
            if with_tangent:
                Dr = np.atleast_2d(r.tangent)
                D = Dr if D is None else Dr @ D
            tau += r.tau
            msd = min(msd, r.min_singularity_distance)
            inner = r.hit_inner
            sid, u = r.end_section, np.atleast_1d(r.end)
    except (NoReturn, ConfigError):
        return None
    return _Img(sid, u, tau, D, inner, msd)


def _push(spec, sections, sid, pts, T1, chain, cfg, threads, with_tangent=True):
    return ordered_map(lambda u: _push_one(spec, sections, sid, u, T1, chain, cfg,
                                           with_tangent), list(pts), threads)


def _suspicious(ia, ib, du):
    """True when two neighbouring images are not linked by the linearisation."""
    if ia is None or ib is None:
        return not (ia is None and ib is None)
    if ia.sid != ib.sid or ia.inner != ib.inner:
        return True
    if (ia.D @ du)[-1] * (ib.D @ du)[-1] <= 0:
        return True
    act = ib.u - ia.u
    pred = 0.5 * (ia.D + ib.D) @ du
    return bool(np.linalg.norm(act - pred) > 0.5 * np.linalg.norm(pred)
                + 1e-12 * (1.0 + np.linalg.norm(ia.u)))


def _pair_kind(ia, ib, du):
    """Break kind between two neighbouring images, or None if smooth."""
    if not _suspicious(ia, ib, du):
        return None
    return _classify(ia, ib, du)


def _classify(ia, ib, du):
    if ia is None or ib is None or ia.sid != ib.sid:
        return "X"
    h = float(np.linalg.norm(du))
    gap = float(np.linalg.norm(ib.u - ia.u))
    scale = max(np.linalg.norm(ia.D), np.linalg.norm(ib.D))
    if gap > max(1e-8, 1e3 * scale * h):
        return "G"
    if (ia.D @ du)[-1] * (ib.D @ du)[-1] < 0:
        return "X"   # fold of the image over the cu axis
    if ia.inner != ib.inner:
        return "S"
    return "G"


def _gap(ia, ib):
    if ia is None or ib is None or ia.sid != ib.sid:
        return np.inf
    return float(np.linalg.norm(ib.u - ia.u))


def _bisect(spec, sections, disk, ta, tb, ia, ib, T1, chain, cfg):
    tol = max(1e-14, 1e-12 * disk.radius)
    while tb - ta > tol:
        tm = 0.5 * (ta + tb)
        im = _push_one(spec, sections, disk.section_id, disk.points(tm)[0], T1, chain,
                       cfg, True)
        pa, pm, pb = disk.points([ta, tm, tb])
        sa, sb = _suspicious(ia, im, pm - pa), _suspicious(im, ib, pb - pm)
        if sa and sb:
            # near a log singularity both halves fail the linear test;
            # the jump sits in the half whose images are further apart
            sa = _gap(ia, im) >= _gap(im, ib)
        if sa:
            tb, ib = tm, im
        elif sb:
            ta, ia = tm, im
        else:
            return None
    pa, pb = disk.points([ta, tb])
    return ta, tb, _classify(ia, ib, pb - pa)


def _find_breaks(spec, sections, disk, t, imgs, T1, chain, cfg):
    """Break intervals (lo, hi, kind) along sampled offsets ``t``."""
    pts = disk.points(t)
    out = []
    for i in range(len(t) - 1):
        a, b = imgs[i], imgs[i + 1]
        if a is None and b is None:
            out.append((t[i], t[i + 1], "X"))
            continue
        if not _suspicious(a, b, pts[i + 1] - pts[i]):
            continue
        br = _bisect(spec, sections, disk, t[i], t[i + 1], a, b, T1, chain, cfg)
        if br is not None:
            out.append(br)
    return out


# ------------------------------------------------------------ selection

def _gaps(rho, intervals):
    """Complement of the union of ``intervals`` inside [-rho, rho]."""
    gaps = []
    lo = -rho
    for a, b in sorted((a, b) for a, b in intervals):
        if a > lo:
            gaps.append((lo, min(a, rho)))
        lo = max(lo, b)
    if lo < rho:
        gaps.append((lo, rho))
    return [(a, b) for a, b in gaps if b > a]


def _place(lo, hi, r, gL, gR):
    """Best centre for a radius-r ball in [lo, hi] away from G at gL / gR."""
    if hi - lo < 2 * r:
        return None
    cmin, cmax = lo + r, hi - r
    if gL is None and gR is None:
        return 0.5 * (cmin + cmax), np.inf
    if gL is None:
        return cmin, gR - cmin - r
    if gR is None:
        return cmax, cmax - r - gL
    c = min(max(0.5 * (gL + gR), cmin), cmax)
    return c, min(c - r - gL, gR - c - r)


def _g_neighbours(lo, hi, G):
    left = [b for a, b in G if b <= lo + 1e-300]
    right = [a for a, b in G if a >= hi - 1e-300]
    return (max(left) if left else None), (min(right) if right else None)


def _widest(gaps, rho):
    """Longest gap; near ties (break positions are bisected) go to the first."""
    longest = max(hi - lo for lo, hi in gaps)
    return next(g for g in gaps if g[1] - g[0] >= longest - TIE_TOL * rho)


def _case2a(rho, breaks, a, a1):
    G = [(lo, hi) for lo, hi, k in breaks if k == "G"]
    gaps = _gaps(rho, [(lo, hi) for lo, hi, _ in breaks])
    r = a1 * rho / 4.0
    bound = 1.0 - 2.0 * a
    tie = TIE_TOL * rho
    best = None
    for lo, hi in gaps:
        gL, gR = _g_neighbours(lo, hi, G)
        p = _place(lo, hi, r, gL, gR)
        if p is not None and p[1] > bound * r and (best is None or p[1] > best[1] + tie):
            best = (p[0], p[1], r)
    if best is not None:
        return best[0], best[2], best[1], False
    # no quarter ball keeps its distance: shrink to the largest that does
    for lo, hi in gaps:
        gL, gR = _g_neighbours(lo, hi, G)
        r_ok, r_bad = 0.0, r
        for _ in range(60):
            rm = 0.5 * (r_ok + r_bad)
            p = _place(lo, hi, rm, gL, gR)
            if p is not None and p[1] > bound * rm:
                r_ok = rm
            else:
                r_bad = rm
        if r_ok > 0:
            rr = 0.9 * r_ok
            p = _place(lo, hi, rr, gL, gR)
            if best is None or rr > best[2] + tie:
                best = (p[0], p[1], rr)
    if best is None:
        raise SplitUnresolvable("no sub-ball clear of the singular locus")
    return best[0], best[2], best[1], True


def select_ball(rho, breaks, constants):
    """Apply the case rules to break intervals of a disk of radius ``rho``.

    Returns (case, centre offset, radius, info) where ``info`` holds the
    distance to Gamma_0 and its required bound for case 2a.
    """
    a, a1 = constants.a, constants.a1
    info = {"gamma0_distance": np.nan, "distance_bound": np.nan, "shrunk": False}
    if not breaks:
        return "1", 0.0, rho, info
    allgaps = _gaps(rho, [(lo, hi) for lo, hi, _ in breaks])
    if allgaps:
        lo, hi = _widest(allgaps, rho)
        if hi - lo >= 2 * a1 * rho:
            return "1", 0.5 * (lo + hi), a1 * rho, info
    if any(k == "G" for _, _, k in breaks):
        c, r, d, shrunk = _case2a(rho, breaks, a, a1)
        info.update(gamma0_distance=d, distance_bound=(1 - 2 * a) * r, shrunk=shrunk)
        return "2a", c, r, info
    xgaps = _gaps(rho, [(lo, hi) for lo, hi, k in breaks if k == "X"])
    if not xgaps:
        raise SplitUnresolvable("disk has no usable image")
    lo, hi = _widest(xgaps, rho)
    if hi - lo >= 2 * a1 * rho:
        return "2b-i", 0.5 * (lo + hi), a1 * rho, info
    return "2b-ii", 0.5 * (lo + hi), min(a1 * rho, 0.5 * (hi - lo)), info


# ------------------------------------------------------------ one step

@dataclass
class DiskStep:
    index: int
    case: str
    before: CuDisk
    chosen_center: float
    chosen_radius: float
    after: CuDisk
    growth: float
    reset_factor: float
    gamma0_distance: float = np.nan
    distance_bound: float = np.nan
    shrunk: bool = False
    pre_offsets: np.ndarray = field(default_factory=lambda: np.zeros(0))
    post_offsets: np.ndarray = field(default_factory=lambda: np.zeros(0))
    breaks: list = field(default_factory=list)

    @property
    def net_growth(self):
        return self.after.radius / self.before.radius


def _regraph(spec, sections, disk, c, r, imgs_ball, t_ball, T1, chain, cfg, threads, a):
    w_all = np.array([im.u for im in imgs_ball])
    sid = imgs_ball[0].sid
    ds = w_all.shape[1] - 1
    w = w_all[:, ds]
    dw = np.diff(w)
    if not (np.all(dw > 0) or np.all(dw < 0)):
        raise SplitUnresolvable("image folds over the cu axis")
    mid = len(t_ball) // 2
    wc = w[mid]
    rho_new = min(abs(w[mid] - w[0]), abs(w[-1] - w[mid]))
    order = np.argsort(w)
    inv = PchipInterpolator(w[order], t_ball[order])
    targets = wc + np.linspace(-rho_new, rho_new, N_REGRAPH)
    t_new = np.clip(inv(targets), c - r, c + r)
    t_new[N_REGRAPH // 2] = c
    imgs = _push(spec, sections, disk.section_id, disk.points(t_new), T1, chain, cfg,
                 threads, with_tangent=False)
    if any(im is None or im.sid != sid for im in imgs):
        raise SplitUnresolvable("re-graph samples lost their return")
    v = np.array([im.u for im in imgs])
    center = v[N_REGRAPH // 2].copy()
    off = v[:, ds] - center[ds]
    srt = np.argsort(off)
    off, v, t_new = off[srt], v[srt], t_new[srt]
    if np.any(np.diff(off) <= 0):
        raise SplitUnresolvable("re-graph offsets not strictly monotone")
    rho_new = float(min(-off[0], off[-1]))
    graph = v[:, :ds] - center[:ds]
    ap = _aperture(off, graph)
    if ap > 2 * a:
        raise SplitUnresolvable(f"image aperture {ap:.3g} exceeds 2a = {2 * a:g}")
    if np.max(np.diff(off)) > rho_new / 32.0:
        raise SplitUnresolvable("re-graph spacing exceeds radius / 32")
    new = CuDisk(sid, center, rho_new, off, graph, ap)
    return new, t_new - c, off


def _iterate(spec, sections, disk, T1, constants, chain, cfg, threads, index=0):
    t = disk.offsets
    imgs = _push(spec, sections, disk.section_id, disk.points(t), T1, chain, cfg, threads)
    breaks = _find_breaks(spec, sections, disk, t, imgs, T1, chain, cfg)
    for _ in range(4):
        case, c, r, info = select_ball(disk.radius, breaks, constants)
        t_ball = c + np.linspace(-r, r, N_SAMPLES)
        imgs_ball = _push(spec, sections, disk.section_id, disk.points(t_ball), T1, chain,
                          cfg, threads)
        extra = [b for b in _find_breaks(spec, sections, disk, t_ball, imgs_ball, T1,
                                         chain, cfg) if b[2] != "S"]
        if not extra:
            break
        breaks = breaks + extra
    else:
        raise SplitUnresolvable("selected ball keeps meeting undetected breaks")
    after, pre, post = _regraph(spec, sections, disk, c, r, imgs_ball, t_ball, T1, chain,
                                cfg, threads, constants.a)
    growth = after.radius / r
    if case == "2b-ii":
        after = after.subdisk(0.0, after.radius / 2.0)
    return DiskStep(index, case, disk, float(c), float(r), after, float(growth),
                    float(r / disk.radius), info["gamma0_distance"],
                    info["distance_bound"], info["shrunk"], pre, post, breaks)


def iterate_disk(spec, sections, disk, T1=0.0, constants=None, chain=1,
                 cfg=DEFAULT_CONFIG, threads=None):
    """One step of the case machine: returns (image disk, case tag)."""
    constants = DiskConstants() if constants is None else constants
    st = _iterate(spec, sections, disk, T1, constants, chain, cfg, threads)
    return st.after, st.case


# ------------------------------------------------------------ expansion

@dataclass
class ExpansionTrace:
    steps: list
    terminated: bool
    final_disk: CuDisk
    return_chain: int
    T1: float
    constants: DiskConstants
    initial_disk: CuDisk
    diagnostic: str = ""
    retries: int = 0
    notes: list = field(default_factory=list)

    def case1_growth_ok(self, lambda2=None):
        lam2 = self.constants.lambda2 if lambda2 is None else lambda2
        return all(s.growth >= 1.0 / lam2 for s in self.steps if s.case == "1")

    def growth_bound_ok(self):
        """Per-step bound: growth >= 1, resets recorded below 1."""
        return all(s.growth >= 1.0 for s in self.steps)


def expand_until_uniform(spec, sections, disk0, delta_target, max_steps=60, T1=0.0,
                         chain=1, constants=None, cfg=DEFAULT_CONFIG, threads=None,
                         raise_on_fail=True, _monitor=None):
    """Run the case machine until the inner radius reaches ``delta_target``.

    A step that cannot be re-graphed is retried from the same disk with
    half the radius (at most five times in a row).
    """
    sec = sections[disk0.section_id]
    inner = float(np.atleast_1d(sec.half_widths)[-1] * sec.a0)
    if delta_target > inner:
        raise ConfigError(f"delta_target exceeds the inner half-width {inner:g}")
    constants = DiskConstants() if constants is None else constants
    disk, steps, retries, fails, notes = disk0, [], 0, 0, []
    while disk.radius < delta_target and len(steps) < max_steps:
        try:
            st = _iterate(spec, sections, disk, T1, constants, chain, cfg, threads,
                          len(steps))
        except SplitUnresolvable as exc:
            fails += 1
            retries += 1
            notes.append(f"step {len(steps)}: {exc}; radius halved")
            if fails > 5:
                raise
            disk = disk.subdisk(0.0, disk.radius / 2.0)
            continue
        fails = 0
        steps.append(st)
        disk = st.after
        if _monitor is not None:
            _monitor(st)
    done = disk.radius >= delta_target
    trace = ExpansionTrace(steps, done, disk, chain, T1, constants, disk0,
                           "" if done else f"radius {disk.radius:.4g} after {max_steps} steps",
                           retries, notes)
    if not done and raise_on_fail:
        raise Nontermination(trace.diagnostic, trace)
    return trace


def preimage_chain(trace):
    """Nested pre-images of D_0, ..., D_n as offset intervals of D_0.

    Also returns, per step, the diameter of the pull-back of D_{k+1} into
    D_k divided by the diameter of D_{k+1}.
    """
    disks = [trace.initial_disk] + [s.after for s in trace.steps]
    ratios = []
    for s in trace.steps:
        lo, hi = _pull(s, -s.after.radius, s.after.radius)
        ratios.append((hi - lo) / (2.0 * s.after.radius))
    chain = []
    for k, dk in enumerate(disks):
        lo, hi = -dk.radius, dk.radius
        for s in reversed(trace.steps[:k]):
            lo, hi = _pull(s, lo, hi)
            lo, hi = lo + s.chosen_center, hi + s.chosen_center
        chain.append((lo, hi))
    return chain, np.array(ratios)


def _pull(step, lo, hi):
    """Offsets (relative to the chosen ball centre) of the pre-image of [lo, hi]."""
    o, t = step.post_offsets, step.pre_offsets
    vals = np.interp([lo, hi], o, t)
    return float(min(vals)), float(max(vals))


# ------------------------------------------------------------ periodic orbit

@dataclass
class PeriodicOrbit:
    point: np.ndarray
    section_id: int
    section_point: np.ndarray
    period: float
    residual: float
    floquet_multipliers: np.ndarray
    iterates: int
    natural_returns: int
    multipliers_ok: bool


def _leaf_direction(D):
    """Stable-leaf direction in section coordinates from a section tangent."""
    _, _, Vt = np.linalg.svd(D)
    return Vt[-1]


def _q(u, s_dir):
    u = np.atleast_2d(u)
    if u.shape[1] == 1:
        return u[:, 0]
    return u[:, 1] - s_dir[1] / s_dir[0] * u[:, 0] if abs(s_dir[0]) > 1e-12 else u[:, 1]


def _newton_section(spec, sections, sid, u, T1, n_ret, cfg, tol=1e-11, max_iter=40):
    u = np.asarray(u, float)
    best = (np.inf, u)
    for _ in range(max_iter):
        im = _push_one(spec, sections, sid, u, T1, n_ret, cfg, True)
        if im is None or im.sid != sid:
            break
        G = im.u - u
        res = float(np.linalg.norm(G))
        if res < best[0]:
            best = (res, u.copy(), im)
        if res < tol:
            return u, im, res
        J = im.D - np.eye(len(u))
        step = np.linalg.lstsq(J, -G, rcond=None)[0]
        lam = 1.0
        while lam > 1e-4:
            un = u + lam * step
            if sections[sid].inside(un):
                tr = _push_one(spec, sections, sid, un, T1, n_ret, cfg, False)
                if tr is not None and tr.sid == sid and np.linalg.norm(tr.u - un) < res:
                    break
            lam /= 2.0
        else:
            break
        u = un
    raise NewtonFail(f"section Newton stalled at residual {best[0]:.3g}", best)


def _shoot(spec, x0, T0, sec, cfg, tol=1e-11, max_iter=20):
    """Single shooting on (x, T) with the phase condition n.(x - base) = 0."""
    x, T = np.asarray(x0, float).copy(), float(T0)
    d = spec.dim
    for _ in range(max_iter):
        y, M = tangent_map(spec, x, T, cfg)
        R = y - x
        if np.linalg.norm(R) < tol:
            break
        A = np.zeros((d + 1, d + 1))
        A[:d, :d] = M - np.eye(d)
        A[:d, d] = evaluate(spec, y)
        A[d, :d] = sec.normal
        rhs = np.concatenate([-R, [-(sec.normal @ (x - sec.base))]])
        dz = np.linalg.solve(A, rhs)
        x, T = x + dz[:d], T + dz[d]
    y, M = tangent_map(spec, x, T, cfg)
    return x, T, float(np.linalg.norm(y - x)), np.linalg.eigvals(M)


def _multipliers_ok(mult, tol=1e-3):
    m = np.abs(mult)
    k = int(np.argmin(np.abs(m - 1.0)))
    rest = np.delete(m, k)
    return bool(abs(m[k] - 1.0) < tol and np.any(rest > 1.0)
                and np.all((rest > 1.0 + tol) | (rest < 1.0 - tol)))


def locate_periodic_orbit(trace, spec, sections, max_iterates=6, n_scan=257,
                          cfg=DEFAULT_CONFIG, threads=None):
    """Fixed point of F^j on the final disk, then full-space refinement.

    The scan projects images along stable leaves (the least-expanded
    direction of the section tangent) onto the cu axis and seeds Newton at
    sign changes of projected displacement where F^j is continuous.
    """
    if not trace.terminated:
        raise ConfigError("trace did not terminate; no uniform disk to work on")
    disk = trace.final_disk
    sid, T1, chain = disk.section_id, trace.T1, trace.return_chain
    sec = sections[sid]
    t = np.linspace(-disk.radius, disk.radius, n_scan)
    pts = disk.points(t)
    imgs = [_Img(sid, p, 0.0, np.eye(len(p)), True, np.inf) for p in pts]
    best = None
    for j in range(1, max_iterates + 1):
        imgs = ordered_map(
            lambda im: None if im is None or im.sid != sid else _compose(
                im, _push_one(spec, sections, sid, im.u, T1, chain, cfg, True)),
            imgs, threads)
        seeds = []
        for i in range(n_scan - 1):
            a, b = imgs[i], imgs[i + 1]
            if a is None or b is None or a.sid != sid or b.sid != sid:
                continue
            if _pair_kind(a, b, pts[i + 1] - pts[i]) is not None:
                continue
            s_dir = _leaf_direction(a.D) if len(a.u) > 1 else None
            qa = _q(a.u, s_dir) - _q(pts[i], s_dir)
            qb = _q(b.u, s_dir) - _q(pts[i + 1], s_dir)
            if qa[0] == 0 or qa[0] * qb[0] < 0:
                w = 0.0 if qa[0] == qb[0] else qa[0] / (qa[0] - qb[0])
                seeds.append(pts[i] + w * (pts[i + 1] - pts[i]))
            elif qb[0] == 0 and i == n_scan - 2:
                seeds.append(pts[i + 1])
        for u0 in seeds:
            try:
                u, im, res = _newton_section(spec, sections, sid, u0, T1, j * chain, cfg)
            except NewtonFail as exc:
                if best is None or exc.best[0] < best[0]:
                    best = exc.best
                continue
            return _finish(spec, sections, sec, sid, u, im, j, chain, cfg)
    raise NewtonFail("no fixed point of the composed return on the final disk", best)


def _compose(prev, new):
    if new is None:
        return None
    return _Img(new.sid, new.u, prev.tau + new.tau, new.D @ prev.D, new.inner,
                min(prev.msd, new.msd))


def _finish(spec, sections, sec, sid, u, im, j, chain, cfg):
    if getattr(spec, "is_suspension", False):
        mult = np.array([float(im.D[0, 0]), 1.0])
        res = float(np.linalg.norm(im.u - u))
        n_nat = int(round(im.tau / spec.roof))
        return PeriodicOrbit(np.array([u[0], 0.0]), sid, u, im.tau, res, mult, j,
                             n_nat, _multipliers_ok(mult))
    x0 = sec.to_ambient(u)
    x, T, res, mult = _shoot(spec, x0, im.tau, sec, cfg)
    mult = mult[np.argsort(-np.abs(mult))]
    return PeriodicOrbit(x, sid, sec.to_coords(x), T, res, mult, j, j * chain,
                         _multipliers_ok(mult))


# ------------------------------------------------------------ invariant sets

def invariant_set_uniform_size(spec, sections, membership, disk, delta_target,
                               max_steps=60, T1=0.0, chain=1, constants=None,
                               cfg=DEFAULT_CONFIG, threads=None, start_min=0.99,
                               lost_below=0.90):
    """Grow a disk inside a positively invariant set given as a predicate.

    ``membership(points, section_id)`` returns a boolean per row of section
    coordinates.
    """
    def frac(dk):
        return float(np.mean(np.asarray(membership(dk.points(), dk.section_id), bool)))

    f0 = frac(disk)
    if f0 < start_min:
        raise ConfigError(f"only {f0:.3f} of the disk samples pass membership")

    def monitor(st):
        f = frac(st.after)
        if f < lost_below:
            raise DensityLost(f"membership fraction fell to {f:.3f} at step {st.index}")

    trace = expand_until_uniform(spec, sections, disk, delta_target, max_steps, T1, chain,
                                 constants, cfg, threads, True, monitor)
    f = frac(trace.final_disk)
    if f < start_min:
        raise DensityLost(f"final disk density {f:.3f} below {start_min}")
    return trace.final_disk


# ------------------------------------------------------------ io

def write_trace_csv(path, trace, orbit=None):
    k = len(np.atleast_1d(trace.initial_disk.center))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "case", "section"] + [f"center{i + 1}" for i in range(k)]
                   + ["radius", "growth"])
        for s in trace.steps:
            w.writerow([s.index, s.case, s.after.section_id]
                       + [repr(float(v)) for v in s.after.center]
                       + [repr(s.after.radius), repr(s.growth)])
        if orbit is not None:
            w.writerow([])
            m = len(orbit.floquet_multipliers)
            w.writerow([f"p{i + 1}" for i in range(len(orbit.point))]
                       + ["period", "residual"]
                       + [f"mult{i + 1}_{c}" for i in range(m) for c in ("re", "im")])
            mult = np.asarray(orbit.floquet_multipliers, complex)
            w.writerow([repr(float(v)) for v in orbit.point]
                       + [repr(orbit.period), repr(orbit.residual)]
                       + [repr(float(x)) for z in mult for x in (z.real, z.imag)])


def read_trace_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    head = rows[0]
    steps, orbit = [], None
    i = 1
    while i < len(rows) and rows[i]:
        steps.append({h: (v if h == "case" else float(v)) for h, v in zip(head, rows[i])})
        i += 1
    if len(rows) >= i + 3:
        orbit = dict(zip(rows[i + 1], map(float, rows[i + 2])))
    return steps, orbit
