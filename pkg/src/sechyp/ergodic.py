"""Empirical measures, time averages and entropy estimates.

Measures are compared through a finite dictionary of bounded Lipschitz
observables: the distance between two measures is the largest difference
of their averages, each scaled by the observable's Lipschitz constant.
Default dictionaries live on the unit cube obtained by normalising the
field's trapping box, so distances are in those units.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.cluster.hierarchy import fcluster, linkage
from scipy.optimize import nnls
from scipy.signal import lfilter
from scipy.spatial.distance import pdist, squareform
from scipy.stats import spearmanr

from . import _eyechart
from .errors import (ConfigError, DictMismatch, EmptyBall, GridMiss,
                     UndersampledWords)
from .flow import DEFAULT_CONFIG, flow_map, integrate
from .parallel import ordered_map
from .vectorfield import c1_distance_estimate, evaluate, perturb

DICT_VERSION = "unitbox-v1"
N_CHECKPOINTS = 20
CHECKPOINT_SPAN = 64.0  # first checkpoint at T/64 of the averaging window
N_BATCHES = 1000
BOWEN_BOX = ((-1.0, -1.0), (1.0, 1.0))


# ------------------------------------------------------------ dictionary

@dataclass(frozen=True)
class Observable:
    name: str
    fn: object
    lipschitz: float


class ObservableDictionary:
    """Ordered list of observables with their Lipschitz constants."""

    def __init__(self, observables, version=DICT_VERSION):
        if not observables:
            raise ConfigError("a dictionary needs at least one observable")
        for ob in observables:
            if not ob.lipschitz > 0:
                raise ConfigError(f"observable {ob.name} needs a positive Lipschitz constant")
        self.observables = list(observables)
        self.version = version

    def __len__(self):
        return len(self.observables)

    @property
    def names(self):
        return [ob.name for ob in self.observables]

    @property
    def lipschitz(self):
        return np.array([ob.lipschitz for ob in self.observables])

    def evaluate(self, X):
        X = np.atleast_2d(np.asarray(X, float))
        return np.column_stack([np.asarray(ob.fn(X), float) * np.ones(len(X))
                                for ob in self.observables])

    def scaled(self, c):
        """Every observable and its constant multiplied by c > 0."""
        if not c > 0:
            raise ConfigError("scale must be positive")
        obs = [Observable(ob.name, (lambda X, f=ob.fn: c * f(X)), c * ob.lipschitz)
               for ob in self.observables]
        return ObservableDictionary(obs, self.version + f"*{c!r}")

    def key(self):
        return (self.version, tuple(self.names))


def default_dictionary(box, normalize=True, n_bumps=3, bump_width=0.1):
    """Clipped coordinates, pairwise products and fixed Gaussian bumps.

    With ``normalize`` the box is mapped to the unit cube first and all
    Lipschitz constants refer to the Euclidean metric there.  The constant
    observable ``one`` is always first.
    """
    lo, hi = (np.asarray(a, float) for a in box)
    if lo.shape != hi.shape or np.any(hi <= lo):
        raise ConfigError("dictionary box needs lo < hi")
    d = lo.size
    if normalize:
        def coord(X, i):
            return (np.clip(X[:, i], lo[i], hi[i]) - lo[i]) / (hi[i] - lo[i])
        M = np.ones(d)
        tag = "u"
    else:
        def coord(X, i):
            return np.clip(X[:, i], lo[i], hi[i])
        M = np.maximum(np.abs(lo), np.abs(hi))
        tag = "x"
    obs = [Observable("one", lambda X: np.ones(len(X)), 1.0)]
    for i in range(d):
        obs.append(Observable(f"{tag}{i + 1}", lambda X, i=i: coord(X, i), 1.0))
    for i in range(d):
        for j in range(i, d):
            if i == j:
                L = 2.0 * M[i]
            else:
                L = float(np.hypot(M[i], M[j]))
            obs.append(Observable(f"{tag}{i + 1}*{tag}{j + 1}",
                                  lambda X, i=i, j=j: coord(X, i) * coord(X, j), L))
    if normalize and n_bumps:
        levels = [0.5, 0.35, 0.65, 0.2, 0.8][:n_bumps]
        s = bump_width
        for k, c in enumerate(levels):
            cen = np.full(d, c)
            if d > 2 and k > 0:
                cen[-1] = 0.5 + (c - 0.5) / 3.0

            def bump(X, cen=cen):
                U = np.column_stack([coord(X, i) for i in range(d)])
                return np.exp(-np.sum((U - cen) ** 2, axis=1) / (2 * s * s))
            obs.append(Observable(f"bump{k + 1}", bump, 1.0 / (s * np.sqrt(np.e))))
    version = DICT_VERSION if normalize else "rawbox-v1"
    return ObservableDictionary(obs, version)


def dictionary_box(spec):
    if getattr(spec, "is_suspension", False):
        return (spec.domain[0], 0.0), (spec.domain[1], spec.roof)
    if spec.box is not None:
        return spec.box
    if spec.name == "bowen":
        return BOWEN_BOX
    raise ConfigError(f"{spec.name} has no trapping box; pass a dictionary box")


def dictionary_for(spec, **kw):
    return default_dictionary(dictionary_box(spec), **kw)


# ------------------------------------------------------------ exact shift orbits

def _full_shift_base(spec):
    """Slope b if the suspended map is the full b-adic shift, else None."""
    slopes = np.asarray(spec.slopes, float)
    b = slopes[0]
    lo, hi = spec.domain
    cells = np.concatenate([[lo], spec.breaks, [hi]])
    if not np.all(slopes == b) or b != round(b) or len(cells) - 1 != b:
        return None
    for i in range(len(cells) - 1):
        f_lo = slopes[i] * cells[i] + spec.offsets[i]
        f_hi = slopes[i] * cells[i + 1] + spec.offsets[i]
        if abs(f_lo - lo) > 1e-12 or abs(f_hi - hi) > 1e-12:
            return None
    return int(b)


def shift_orbit(spec, x0, n, seed=0):
    """Orbit x_0..x_{n-1} of a full-branch affine map, free of round-off decay.

    Floating-point iteration of x -> b x mod 1 exhausts the mantissa after
    about 53 steps and then sits on a fixed point.  The orbit is instead
    read off a digit stream: the leading base-b digits of x0 followed by
    seeded random digits, i.e. the exact orbit of a point within 1e-16 of x0.
    """
    b = _full_shift_base(spec)
    if b is None:
        raise ConfigError("exact orbits need a full-branch map with equal integer slopes")
    lo, hi = spec.domain
    y = (float(x0) - lo) / (hi - lo)
    if not 0.0 <= y <= 1.0:
        raise ConfigError("x0 outside the map's domain")
    y = min(y, np.nextafter(1.0, 0.0))
    n_lead = int(np.ceil(53 / np.log2(b))) + 1
    lead = np.empty(n_lead, np.int64)
    for k in range(n_lead):
        y *= b
        lead[k] = int(np.floor(y))
        y -= lead[k]
    rng = np.random.default_rng(seed)
    digits = np.concatenate([lead, rng.integers(0, b, n + 64)]).astype(float)
    # y_k = (d_k + y_{k+1}) / b, evaluated backwards as a first-order filter
    ys = lfilter([1.0 / b], [1.0, -1.0 / b], digits[::-1])[::-1]
    return lo + (hi - lo) * ys[:n]


def suspension_states(spec, x0, T, burn_in=0.0, per_roof=4, seed=0):
    """Midpoint samples (x, s) of the suspension flow over [burn_in, T]."""
    roof = spec.roof
    n0 = int(np.floor(burn_in / roof))
    n1 = int(np.ceil(T / roof))
    xs = shift_orbit(spec, x0, n1, seed)[n0:]
    s = (np.arange(per_roof) + 0.5) * roof / per_roof
    X = np.column_stack([np.repeat(xs, per_roof), np.tile(s, len(xs))])
    t = (np.repeat(np.arange(n0, n1), per_roof) * roof + np.tile(s, len(xs)))
    keep = (t >= burn_in) & (t <= T)
    return t[keep], X[keep]


# ------------------------------------------------------------ time averages

@dataclass
class TimeAverage:
    """Averages over [burn_in, T] with the running-average trace.

    ``trace[k]`` is the average over [burn_in, checkpoints[k]];
    ``batch_se`` the batch-means standard error of each observable at the
    first checkpoint of the tail third, the scale of the Cauchy gap a
    convergent orbit would show.
    """

    averages: np.ndarray
    checkpoints: np.ndarray
    trace: np.ndarray
    batch_se: np.ndarray
    half_averages: tuple
    T: float
    burn_in: float


def _checkpoints(burn_in, T, n=N_CHECKPOINTS, span=CHECKPOINT_SPAN):
    return burn_in + (T - burn_in) * np.geomspace(1.0 / span, 1.0, n)


def _tail_start(n):
    return n - (n + 2) // 3


def _average_from_cumulative(t, C, burn_in, T, quantum=None):
    """Running averages from a cumulative integral C(t) (rows per time).

    With ``quantum`` (the roof of a suspension) checkpoints and batch edges
    are moved to whole multiples of it, so periodic observables average
    exactly.
    """
    cps = _checkpoints(burn_in, T)
    n_b = N_BATCHES
    if quantum is not None:
        cps = burn_in + np.maximum(np.round((cps - burn_in) / quantum), 1) * quantum
        n_b = int(min(N_BATCHES, round((T - burn_in) / quantum)))
    Ck = np.column_stack([np.interp(cps, t, C[:, j]) for j in range(C.shape[1])])
    trace = Ck / (cps - burn_in)[:, None]
    edges = np.linspace(burn_in, T, n_b + 1)
    if quantum is not None:
        edges = burn_in + np.round((edges - burn_in) / quantum) * quantum
    Ce = np.column_stack([np.interp(edges, t, C[:, j]) for j in range(C.shape[1])])
    bm = np.diff(Ce, axis=0) / np.diff(edges)[:, None]
    t0 = cps[_tail_start(len(cps))] - burn_in
    b = (T - burn_in) / n_b
    se = bm.std(axis=0, ddof=1) * np.sqrt(b / t0)
    mid = np.array([np.interp(0.5 * (burn_in + T), t, C[:, j]) for j in range(C.shape[1])])
    h = 0.5 * (T - burn_in)
    halves = (mid / h, (C[-1] - mid) / h)
    return trace, cps, se, halves


def _flow_samples(spec, x0, T, burn_in, cfg, dt, seed):
    if getattr(spec, "is_suspension", False):
        return suspension_states(spec, float(np.ravel(x0)[0]), T, burn_in, seed=seed)
    x = np.asarray(x0, float)
    if burn_in > 0:
        x = flow_map(spec, x, burn_in, cfg)
    traj = integrate(spec, x, T - burn_in, cfg, out_dt=dt)
    return traj.times + burn_in, traj.states


def _quadrature_weights(t):
    """Trapezoid weights on sample times t (uniform midpoints: equal weights)."""
    if len(t) == 1:
        return np.ones(1)
    w = np.zeros(len(t))
    dt = np.diff(t)
    w[:-1] += dt / 2
    w[1:] += dt / 2
    return w


def _use_eye_chart(spec, x0):
    return (getattr(spec, "name", "") == "bowen" and not getattr(spec, "bumps", ())
            and len(np.ravel(x0)) == 2 and _eyechart.inside_eye(np.ravel(x0)))


def _eye_average(spec, x0, dictionary, T, burn_in):
    cps = _checkpoints(burn_in, T)
    edges = np.linspace(burn_in, T, N_BATCHES + 1)
    grid = np.unique(np.concatenate([edges, cps, [0.5 * (burn_in + T)]]))
    grid = grid[grid > 0]
    I = _eyechart.running_integrals(spec.params["alpha"], spec.params["e"],
                                    np.ravel(x0), dictionary.evaluate, grid)
    t = np.concatenate([[0.0], grid])
    C = np.vstack([np.zeros(len(dictionary)), I])
    if burn_in > 0:
        C = C - np.array([np.interp(burn_in, t, C[:, j]) for j in range(C.shape[1])])
    return t, C


def time_average(spec, x0, dictionary, T, burn_in=0.0, cfg=DEFAULT_CONFIG, dt=0.01,
                 seed=0):
    """Time averages of every dictionary observable along the orbit of x0.

    Flow orbits are sampled every ``dt`` and integrated by the trapezoid
    rule; suspensions use the exact shift orbit.  Orbits of the unperturbed
    bowen field that start inside the eye are integrated in the eye chart,
    with the observables carried as extra ODE states.
    """
    if not T > burn_in >= 0:
        raise ConfigError("need T > burn_in >= 0")
    if _use_eye_chart(spec, x0) and np.any(evaluate(spec, np.ravel(x0)) != 0):
        t, C = _eye_average(spec, x0, dictionary, T, burn_in)
        t, C = t[t >= burn_in], C[t >= burn_in]
        if t[0] > burn_in:
            t = np.concatenate([[burn_in], t])
            C = np.vstack([np.zeros(C.shape[1]), C])
        return _time_average_from(t, C, T, burn_in)
    t, X = _flow_samples(spec, x0, T, burn_in, cfg, dt, seed)
    return _sampled_average(spec, t, dictionary.evaluate(X), T, burn_in)


def _sampled_average(spec, t, F, T, burn_in):
    if getattr(spec, "is_suspension", False):
        w = np.full(len(t), spec.roof / 4)
        C = np.vstack([np.zeros(F.shape[1]), np.cumsum(F * w[:, None], axis=0)])
        t = np.concatenate([[burn_in], t + spec.roof / 8])  # values at cell ends
        return _time_average_from(t, C, T, burn_in, spec.roof)
    C = np.vstack([np.zeros(F.shape[1]),
                   np.cumsum(0.5 * (F[1:] + F[:-1]) * np.diff(t)[:, None], axis=0)])
    return _time_average_from(t, C, T, burn_in)


def _time_average_from(t, C, T, burn_in, quantum=None):
    avg = C[-1] / (t[-1] - burn_in)
    trace, cps, se, halves = _average_from_cumulative(t, C, burn_in, t[-1], quantum)
    return TimeAverage(avg, cps, trace, se, halves, float(T), float(burn_in))


def cauchy_gap(ta: TimeAverage, lipschitz):
    """Largest scaled distance between the final average and the tail trace."""
    tail = ta.trace[_tail_start(len(ta.checkpoints)):]
    return float(np.max(np.abs(tail - ta.averages) / lipschitz))


def non_convergent(ta: TimeAverage, lipschitz, factor=3.0):
    """Cauchy gap test against the convergent-orbit baseline.

    The baseline for observable i is twice its batch-means standard error
    at the start of the tail; the orbit is flagged when some observable's
    tail gap exceeds ``factor`` baselines (and is not at round-off level).
    """
    tail = ta.trace[_tail_start(len(ta.checkpoints)):]
    gap = np.max(np.abs(tail - ta.averages), axis=0)
    base = 2.0 * ta.batch_se
    floor = 1e-9 * np.maximum(lipschitz, 1.0)
    return bool(np.any(gap > np.maximum(factor * base, floor)))


# ------------------------------------------------------------ empirical measures

@dataclass
class EmpiricalMeasure:
    lo: np.ndarray
    hi: np.ndarray
    bins: tuple
    weights: np.ndarray
    observable_averages: np.ndarray
    dictionary_key: tuple
    T: float
    burn_in: float
    missed: float = 0.0

    def nonzero(self):
        idx = np.nonzero(self.weights)
        return np.column_stack(idx), self.weights[idx]


def _histogram(X, w, lo, hi, bins):
    inside = np.all((X >= lo) & (X <= hi), axis=1)
    missed = float(w[~inside].sum() / w.sum())
    H, _ = np.histogramdd(X[inside], bins=bins, range=list(zip(lo, hi)), weights=w[inside])
    return H / H.sum(), missed


def empirical_measure(source, dictionary, grid=None, T=None, burn_in=0.0,
                      cfg=DEFAULT_CONFIG, dt=0.01, seed=0, miss_tol=1e-3):
    """Occupation measure of an orbit on a grid plus dictionary averages.

    ``source`` is a :class:`JetTrajectory`, or a pair ``(spec, x0)`` with
    ``T`` given.  ``grid`` is ``(lo, hi, bins)``; by default the dictionary
    box of the system with 16 bins per axis.
    """
    if isinstance(source, tuple):
        spec, x0 = source
        if T is None or not T > burn_in >= 0:
            raise ConfigError("need T > burn_in >= 0")
        t, X = _flow_samples(spec, x0, T, burn_in, cfg, dt, seed)
        if grid is None:
            lo, hi = dictionary_box(spec)
            grid = (lo, hi, (16,) * len(lo))
        suspension = getattr(spec, "is_suspension", False)
    else:
        t, X = source.times, source.states
        T, burn_in = float(t[-1]), float(t[0])
        suspension = False
        if grid is None:
            raise ConfigError("a grid is required for a bare trajectory")
    return _measure_from(t, X, dictionary.evaluate(X), dictionary, grid, T, burn_in,
                         suspension, miss_tol)


def _measure_from(t, X, F, dictionary, grid, T, burn_in, suspension, miss_tol):
    lo, hi, bins = grid
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    bins = tuple(int(b) for b in np.broadcast_to(bins, lo.shape))
    w = np.ones(len(t)) if suspension else _quadrature_weights(t)
    W, missed = _histogram(X, w, lo, hi, bins)
    if missed > miss_tol:
        raise GridMiss(f"{100 * missed:.3g}% of the orbit lies outside the grid")
    avg = (w @ F) / w.sum()
    return EmpiricalMeasure(lo, hi, bins, W, avg, dictionary.key(), float(T),
                            float(burn_in), missed)


def merge_measures(measures):
    """Equal-weight mixture of empirical measures on the same grid."""
    m0 = measures[0]
    W = np.mean([m.weights for m in measures], axis=0)
    avg = np.mean([m.observable_averages for m in measures], axis=0)
    return EmpiricalMeasure(m0.lo, m0.hi, m0.bins, W / W.sum(), avg, m0.dictionary_key,
                            m0.T, m0.burn_in, max(m.missed for m in measures))


def weak_star_distance(mu, nu, dictionary):
    """max_psi |mu(psi) - nu(psi)| / L_psi over the dictionary.

    Arguments are EmpiricalMeasures or raw average vectors.
    """
    L = dictionary.lipschitz
    vals = []
    for m in (mu, nu):
        if isinstance(m, EmpiricalMeasure):
            if m.dictionary_key != dictionary.key():
                raise DictMismatch("measure was built with a different dictionary")
            vals.append(m.observable_averages)
        else:
            vals.append(np.asarray(m, float))
    a, b = vals
    if a.shape != L.shape or b.shape != L.shape:
        raise DictMismatch(f"average vectors of length {a.shape}/{b.shape} "
                           f"vs dictionary of {L.size}")
    return float(np.max(np.abs(a - b) / L))


# ------------------------------------------------------------ physical measures

@dataclass
class PhysicalMeasures:
    k: int
    labels: np.ndarray  # cluster per initial, -1 for non-convergent
    representatives: list
    basin_counts: np.ndarray
    n_initials: int
    nonconvergent: np.ndarray
    averages: np.ndarray
    cluster_tol: float
    measures: list = field(repr=False, default_factory=list)

    @property
    def basin_fractions(self):
        return self.basin_counts / self.n_initials

    @property
    def nonconvergent_fraction(self):
        return int(self.nonconvergent.sum()) / self.n_initials


def _single_linkage(V, tol):
    if len(V) == 1:
        return np.zeros(1, int)
    Z = linkage(pdist(V, "chebyshev"), method="single")
    raw = fcluster(Z, t=tol, criterion="distance")
    # relabel by first appearance so labels do not depend on scipy internals
    order = {}
    return np.array([order.setdefault(r, len(order)) for r in raw])


def count_physical_measures(spec, initials, dictionary, T, burn_in=0.0, cluster_tol=None,
                            cfg=DEFAULT_CONFIG, dt=0.01, grid=None, gap_factor=3.0,
                            seed=0, threads=None, min_initials=50):
    """Cluster initial conditions by their time-average vectors.

    Orbits failing the Cauchy gap test are reported as non-convergent and
    left out of the clustering.  The default ``cluster_tol`` is five times
    the median half-versus-half distance of the convergent orbits.
    """
    initials = np.atleast_2d(np.asarray(initials, float))
    if len(initials) < min_initials:
        raise ConfigError(f"need at least {min_initials} initial conditions")
    if cluster_tol is not None and not cluster_tol > 0:
        raise ConfigError("cluster_tol must be positive")
    L = dictionary.lipschitz
    if grid is None:
        lo, hi = dictionary_box(spec)
        grid = (lo, hi, (16,) * len(lo))

    def one(job):
        i, x0 = job
        if _use_eye_chart(spec, x0):
            return time_average(spec, x0, dictionary, T, burn_in, cfg, dt, seed + i), None
        t, X = _flow_samples(spec, x0, T, burn_in, cfg, dt, seed + i)
        F = dictionary.evaluate(X)
        mu = _measure_from(t, X, F, dictionary, grid, T, burn_in,
                           getattr(spec, "is_suspension", False), 1.0)
        return _sampled_average(spec, t, F, T, burn_in), mu
    res = ordered_map(one, list(enumerate(initials)), threads)
    tas = [r[0] for r in res]
    A = np.array([ta.averages for ta in tas])
    flags = np.array([non_convergent(ta, L, gap_factor) for ta in tas])
    ok = np.nonzero(~flags)[0]
    if cluster_tol is None:
        halves = [float(np.max(np.abs(tas[i].half_averages[0] - tas[i].half_averages[1]) / L))
                  for i in ok]
        cluster_tol = 5.0 * float(np.median(halves)) if halves else 1.0
    labels = np.full(len(initials), -1)
    reps, counts = [], []
    if len(ok):
        lab = _single_linkage(A[ok] / L, cluster_tol)
        labels[ok] = lab
        for c in range(lab.max() + 1):
            members = ok[lab == c]
            counts.append(len(members))
            ms = [res[i][1] for i in members if res[i][1] is not None]
            if ms:
                reps.append(merge_measures(ms))
            else:
                reps.append(A[members].mean(axis=0))
    return PhysicalMeasures(len(counts), labels, reps, np.array(counts, int), len(initials),
                            flags, A, float(cluster_tol), [r[1] for r in res])


def cluster_separation(pm: PhysicalMeasures, dictionary):
    """(largest within-cluster, smallest cross-cluster) weak* distance."""
    D = squareform(pdist(pm.averages / dictionary.lipschitz, "chebyshev"))
    within, cross = 0.0, np.inf
    lab = pm.labels
    for i in range(len(lab)):
        for j in range(i + 1, len(lab)):
            if lab[i] < 0 or lab[j] < 0:
                continue
            if lab[i] == lab[j]:
                within = max(within, D[i, j])
            else:
                cross = min(cross, D[i, j])
    return float(within), float(cross)


def representative_averages(pm: PhysicalMeasures):
    return np.array([r.observable_averages if isinstance(r, EmpiricalMeasure) else r
                     for r in pm.representatives])


# ------------------------------------------------------------ historic behaviour

@dataclass
class HistoricResult:
    checkpoints: np.ndarray
    averages: np.ndarray
    liminf_est: float
    limsup_est: float
    gap: float


def geometric_schedule(T0, ratio=1.5, n=12):
    return T0 * ratio ** np.arange(n)


def historic_behavior_detect(spec, x0, psi, T_schedule, cfg=DEFAULT_CONFIG, dt=0.01):
    """Running averages of psi at geometric checkpoints.

    ``gap`` is max - min over the tail third of the checkpoints; it tends to
    0 on the basin of a physical measure and stays large for historic
    behaviour.
    """
    cps = np.asarray(T_schedule, float)
    if len(cps) < 12:
        raise ConfigError("need at least 12 checkpoints")
    if cps[0] <= 0 or np.any(cps[1:] / cps[:-1] < 1.5 - 1e-12):
        raise ConfigError("checkpoints must be positive with ratio >= 1.5")
    x0 = np.ravel(np.asarray(x0, float))
    if np.all(evaluate(spec, x0) == 0):
        v = float(np.ravel(psi(x0[None]))[0])
        avg = np.full(len(cps), v)
    elif _use_eye_chart(spec, x0):
        I = _eyechart.running_integrals(spec.params["alpha"], spec.params["e"], x0,
                                        psi, cps)
        avg = I / cps
    else:
        traj = integrate(spec, x0, cps[-1], cfg, out_dt=dt)
        f = np.ravel(psi(traj.states))
        t = traj.times
        C = np.concatenate([[0.0], np.cumsum(0.5 * (f[1:] + f[:-1]) * np.diff(t))])
        avg = np.interp(cps, t, C) / cps
    tail = avg[_tail_start(len(cps)):]
    return HistoricResult(cps, avg, float(tail.min()), float(tail.max()),
                          float(tail.max() - tail.min()))


# ------------------------------------------------------------ statistical stability

def hull_projection(target, vertices, lipschitz):
    """Best convex combination of ``vertices`` (rows) for ``target``.

    Weighted least squares on the simplex, solved as a non-negative least
    squares problem with a heavily weighted sum-to-one row; a single vertex
    at least as close as the mixture is preferred (sparsest tie-break).
    Returns (coefficients, weak* distance).
    """
    V = np.atleast_2d(np.asarray(vertices, float))
    b = np.asarray(target, float)
    L = np.asarray(lipschitz, float)
    k = len(V)

    def dist(t):
        return float(np.max(np.abs(t @ V - b) / L))
    if k == 1:
        t = np.ones(1)
        return t, dist(t)
    A = (V / L).T
    M = 1e3 * max(1.0, float(np.abs(A).max()))
    A_aug = np.vstack([A, M * np.ones(k)])
    b_aug = np.concatenate([b / L, [M]])
    t, _ = nnls(A_aug, b_aug)
    t = t / t.sum() if t.sum() > 0 else np.full(k, 1.0 / k)
    best, d = t, dist(t)
    for j in range(k):
        e = np.zeros(k)
        e[j] = 1.0
        dj = dist(e)
        if dj <= d:
            best, d = e, dj
    return best, d


@dataclass
class StabilityCurve:
    eps: np.ndarray
    c1_distance: np.ndarray
    hull_distance: np.ndarray
    coefficients: list
    spearman: float
    base_k: int
    per_measure: list
    T: float


def statistical_stability_curve(spec, perturbations, dictionary, T, n_initials=None,
                                initials=None, burn_in=0.0, base=None, cfg=DEFAULT_CONFIG,
                                dt=0.01, cluster_tol=None, c1_samples=256, seed=0,
                                threads=None):
    """Hull distances of perturbed physical measures to the base hull.

    ``perturbations`` must be sorted by increasing magnitude.  Every field
    is run from the same ``initials``; the base field's measures can be
    passed in as ``base``.  ``spearman`` is the rank correlation between
    magnitude and hull distance over the points with positive magnitude.
    """
    mags = np.array([p.magnitude for p in perturbations], float)
    if np.any(np.diff(mags) < 0):
        raise ConfigError("perturbations must be sorted by magnitude")
    if initials is None:
        if n_initials is None:
            raise ConfigError("give initials or n_initials")
        from .vectorfield import sample_box
        initials = sample_box(spec.box, n_initials, seed)
    initials = np.atleast_2d(initials)
    kw = dict(cfg=cfg, dt=dt, seed=seed, threads=threads, min_initials=1)
    if base is None:
        base = count_physical_measures(spec, initials, dictionary, T, burn_in,
                                       cluster_tol, **kw)
    V = representative_averages(base)
    L = dictionary.lipschitz
    c1, hd, coefs, per = [], [], [], []
    for p in perturbations:
        if p.magnitude == 0:
            pm = base
            c1.append(0.0)
        else:
            sp = perturb(spec, p)
            pm = count_physical_measures(sp, initials, dictionary, T, burn_in,
                                         base.cluster_tol, **kw)
            c1.append(c1_distance_estimate(spec, sp, spec.box, c1_samples))
        if pm.k == 0:
            raise ConfigError(f"no convergent orbit at magnitude {p.magnitude!r}; "
                              "increase T or burn_in")
        rows = []
        for target in representative_averages(pm):
            t, d = hull_projection(target, V, L)
            rows.append((t, d))
        j = int(np.argmax([r[1] for r in rows]))
        hd.append(rows[j][1])
        coefs.append(rows[j][0])
        per.append(rows)
    hd = np.array(hd)
    pos = mags > 0
    rho = float(spearmanr(mags[pos], hd[pos])[0]) if pos.sum() >= 2 else np.nan
    return StabilityCurve(mags, np.array(c1), hd, coefs, rho, base.k, per, float(T))


# ------------------------------------------------------------ entropy

def sample_orbits(spec, cloud, n_max, step=1.0, cfg=DEFAULT_CONFIG, threads=None):
    """States at times 0, step, .., n_max*step for every cloud point.

    Map suspensions are iterated directly (one return per step).
    """
    cloud = np.atleast_2d(np.asarray(cloud, float))
    if getattr(spec, "is_suspension", False):
        x = cloud[:, 0].copy()
        out = [x.copy()]
        for _ in range(n_max):
            x = spec.map(x)
            out.append(x.copy())
        return np.stack(out, axis=1)[:, :, None]

    def one(x0):
        return integrate(spec, x0, n_max * step, cfg, out_dt=step).states[: n_max + 1]
    return np.array(ordered_map(one, list(cloud), threads))


@dataclass
class GeneratorCount:
    n_values: np.ndarray
    eps_values: np.ndarray
    counts: np.ndarray  # (len(eps), len(n))
    rates: np.ndarray


def _fit_rate(n, r):
    half = n >= n[len(n) // 2] if len(n) > 2 else np.ones(len(n), bool)
    if half.sum() < 2:
        return 0.0
    return float(np.polyfit(n[half], np.log(r[half]), 1)[0])


def generator_count(orbits, n_values, eps_values):
    """Greedy (n, eps)-spanning sets of a cloud of sampled orbits.

    ``orbits`` has shape (N, >= max(n), d); the Bowen distance over n steps
    is the largest Euclidean distance among the first n samples.  Covers are
    built by refinement: the cover for (n, eps) is found inside the common
    refinement of the covers for (n - 1, eps) and (n, next larger eps), so
    the counts are exactly monotone in both arguments.
    """
    O = np.asarray(orbits, float)
    if O.ndim == 2:
        O = O[:, :, None]
    n_values = np.asarray(sorted(set(int(n) for n in n_values)))
    eps_values = np.asarray(sorted(set(float(e) for e in eps_values), reverse=True))
    if n_values[0] < 1 or n_values[-1] > O.shape[1]:
        raise ConfigError("n values must lie in 1..orbit length")
    if eps_values[-1] <= 0:
        raise ConfigError("eps must be positive")
    N = len(O)
    counts = np.zeros((len(eps_values), len(n_values)), int)
    prev_eps = [None] * len(n_values)
    for ie, eps in enumerate(eps_values):
        prev_n = np.zeros(N, int)
        for jn, n in enumerate(n_values):
            parent = prev_n if prev_eps[jn] is None else _meet(prev_n, prev_eps[jn])
            lab = _greedy_refine(O[:, :n], parent, eps)
            counts[ie, jn] = lab.max() + 1
            prev_n = lab
            prev_eps[jn] = lab
    rates = np.array([_fit_rate(n_values, counts[i]) for i in range(len(eps_values))])
    return GeneratorCount(n_values, eps_values, counts, rates)


def _meet(a, b):
    _, lab = np.unique(np.column_stack([a, b]), axis=0, return_inverse=True)
    return lab.ravel()


def _greedy_refine(O, parent, eps):
    order = np.argsort(parent, kind="stable")
    bounds = np.flatnonzero(np.diff(parent[order])) + 1
    lab = np.empty(len(parent), int)
    nxt = 0
    for grp in np.split(order, bounds):
        rest = grp
        while len(rest):
            c = rest[0]
            d = np.max(np.linalg.norm(O[rest] - O[c], axis=2), axis=1)
            hit = d < eps
            lab[rest[hit]] = nxt
            nxt += 1
            rest = rest[~hit]
    return lab


@dataclass
class ExpansivenessProbe:
    rates: np.ndarray
    ball_sizes: np.ndarray
    empty: np.ndarray
    eps: float
    delta: float

    @property
    def max_rate(self):
        return float(self.rates.max())


def entropy_expansiveness_probe(spec, samples, eps, n_max, T_back, n_candidates=200,
                                delta=None, check_dt=0.1, decades=8.0, T_guard=None,
                                cfg=DEFAULT_CONFIG, seed=0, threads=None):
    """Forward generator rate of approximate two-sided eps-balls.

    Each sample p is treated as the past point of x = phi_{T_back}(p).
    Candidates p + r*u (u a random unit vector) are kept when their orbit
    stays eps-close to that of p at every ``check_dt`` over
    [0, T_back + n_max + T_guard]; the kept points approximate
    B(x, eps, inf).  The guard interval (default n_max) stands in for the
    rest of the forward orbit.  For
    flows r is log-uniform on [eps 10^-decades, eps], since only points
    exponentially close along the unstable direction survive; for map
    suspensions r is uniform in the ball.  The rate is that of
    :func:`generator_count` at scale ``delta`` (default eps / 4) over
    n = 1..n_max unit steps after T_back.
    """
    if not eps > 0:
        raise ConfigError("eps must be positive")
    if n_max < 2:
        raise ConfigError("n_max must be at least 2")
    samples = np.atleast_2d(np.asarray(samples, float))
    delta = eps / 4 if delta is None else delta
    suspension = getattr(spec, "is_suspension", False)
    rng = np.random.default_rng(seed)
    d = samples.shape[1]
    jobs = []
    for p in samples:
        g = rng.standard_normal((n_candidates, d))
        g /= np.linalg.norm(g, axis=1)[:, None]
        if suspension:
            r = eps * rng.random(n_candidates) ** (1.0 / d)
        else:
            r = eps * 10.0 ** (-decades * rng.random(n_candidates))
        C = p + g * r[:, None]
        if suspension:
            C = C[(C[:, 0] >= spec.domain[0]) & (C[:, 0] <= spec.domain[1])]
        jobs.append((p, C))
    T_guard = n_max if T_guard is None else T_guard
    window = T_back + n_max + T_guard

    def paths(X):
        if suspension:
            return sample_orbits(spec, X, int(window))
        k = int(round(window / check_dt))
        return np.array([integrate(spec, x, window, cfg, out_dt=check_dt).states[: k + 1]
                         for x in X])

    def one(job):
        p, C = job
        P = paths(np.vstack([p[None], C]))
        ref, cand = P[0], P[1:]
        stay = np.all(np.linalg.norm(cand - ref, axis=2) < eps, axis=1)
        if not stay.any():
            return 0.0, 0, True
        kept = P[np.concatenate([[True], stay])]
        stride = 1 if suspension else int(round(1.0 / check_dt))
        start = int(T_back) if suspension else int(round(T_back / check_dt))
        fwd = kept[:, start::stride][:, :n_max + 1]
        gc = generator_count(fwd, np.arange(1, fwd.shape[1] + 1), [delta])
        return max(float(gc.rates[0]), 0.0), int(stay.sum()), False
    res = ordered_map(one, jobs, threads)
    rates = np.array([r[0] for r in res])
    sizes = np.array([r[1] for r in res])
    empty = np.array([r[2] for r in res])
    if empty.all():
        raise EmptyBall("no candidate stayed eps-close on any sample")
    return ExpansivenessProbe(rates, sizes, empty, float(eps), float(delta))


@dataclass
class PartitionEntropy:
    k: np.ndarray
    H: np.ndarray
    H_over_k: np.ndarray
    inf: float
    singleton_fraction: float
    undersampled: bool
    subadditivity_violation: float


def _word_codes(symbols, k):
    s = np.asarray(symbols)
    A = int(s.max()) + 1
    n = len(s) - k + 1
    if k * np.log2(max(A, 2)) < 62:
        code = np.zeros(n, np.int64)
        for j in range(k):
            code = code * A + s[j:j + n]
        return code
    W = np.lib.stride_tricks.sliding_window_view(s, k)
    _, inv = np.unique(W, axis=0, return_inverse=True)
    return inv.ravel()


def block_entropy(symbols, k):
    """Plug-in entropy (nats) of the length-k word distribution."""
    _, c = np.unique(_word_codes(symbols, k), return_counts=True)
    p = c / c.sum()
    return float(-np.sum(p * np.log(p))), c


def partition_entropy(symbols, k_max, strict=True, singleton_tol=0.1):
    """H(P^k)/k for k = 1..k_max from an itinerary.

    ``symbols`` are cell indices of the partition along a long orbit.  With
    ``strict`` an itinerary in which more than 10% of the distinct top-level
    words occur once raises :class:`UndersampledWords`; otherwise the
    result is only flagged.
    """
    s = np.asarray(symbols).astype(np.int64)
    if not 1 <= k_max <= 8:
        raise ConfigError("k_max must lie in 1..8")
    if len(s) <= k_max:
        raise ConfigError("itinerary shorter than the word length")
    if s.min() < 0:
        raise ConfigError("symbols must be non-negative")
    _, s = np.unique(s, return_inverse=True)
    ks = np.arange(1, k_max + 1)
    H = np.empty(k_max)
    for k in ks:
        H[k - 1], c = block_entropy(s, k)
    single = float(np.mean(c == 1))
    under = single > singleton_tol
    if under and strict:
        raise UndersampledWords(f"{100 * single:.3g}% of length-{k_max} words are singletons")
    viol = 0.0
    for a in ks:
        for b in ks:
            if a + b <= k_max:
                viol = max(viol, H[a + b - 1] - H[a - 1] - H[b - 1])
    Hk = H / ks
    return PartitionEntropy(ks, H, Hk, float(Hk.min()), single, under, float(viol))


def grid_symbols(states, lo, hi, cells):
    """Flat cell index of each state on a regular grid."""
    X = np.atleast_2d(states)
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    cells = np.broadcast_to(np.asarray(cells, int), lo.shape)
    idx = np.clip(((X - lo) / (hi - lo) * cells).astype(int), 0, cells - 1)
    return np.ravel_multi_index(idx.T, cells)


@dataclass
class SRBCheck:
    entropy_est: float
    cu_jacobian_avg: float
    defect: float
    mean_return_time: float
    return_time_cv: float
    ruelle_ok: bool
    flagged: bool


def srb_identity_check(spec, x0, n_returns, k_max=8, sections=None, ds=1, cfg=DEFAULT_CONFIG,
                       symbol_fn=None, tol=0.05, seed=0):
    """Compare the return-map entropy with the mean log cu-Jacobian.

    The partition entropy of the return itinerary is divided by the mean
    return time (Abramov); the cu-Jacobian average is the growth rate of
    the volume of the leading d - ds Lyapunov directions.  Both are clamped
    at 0 from below for the entropy.  ``flagged`` marks a return-time
    coefficient of variation above 1.
    """
    if getattr(spec, "is_suspension", False):
        xs = shift_orbit(spec, float(np.ravel(x0)[0]), n_returns, seed)
        sym = spec.branch(xs)
        taus = np.full(n_returns, spec.roof)
        cu = float(np.mean(np.log(np.abs(spec.derivative(xs))))) / spec.roof
    else:
        from .poincare import return_orbit
        if sections is None:
            raise ConfigError("flows need sections for the return itinerary")
        u0 = sections[0].to_coords(x0) if len(np.ravel(x0)) == spec.dim else x0
        rs = return_orbit(spec, sections, 0, u0, n_returns, 0.0, cfg)
        taus = np.array([r.tau for r in rs])
        if symbol_fn is None:
            sym = np.array([int(r.end_ambient[0] > 0) for r in rs])
        else:
            sym = np.array([symbol_fn(r) for r in rs])
        T = float(taus.sum())
        k_cu = spec.dim - ds
        traj = integrate(spec, sections[0].to_ambient(u0), T, cfg,
                         with_frame=np.eye(spec.dim)[:, :k_cu], out_dt=T)
        logs = np.sum(np.log(np.abs(np.diagonal(traj.r_factors[1:], axis1=1, axis2=2))))
        cu = float(logs / T)
    pe = partition_entropy(sym, k_max, strict=False)
    mean_tau = float(taus.mean())
    h = max(pe.inf, 0.0) / mean_tau
    defect = h - cu
    cv = float(taus.std() / mean_tau)
    return SRBCheck(h, cu, defect, mean_tau, cv, bool(defect <= tol), bool(cv > 1.0))


# ------------------------------------------------------------ io

def _fmt(v):
    return repr(float(v))


def write_measure_csv(path, mu: EmpiricalMeasure):
    idx, w = mu.nonzero()
    axes = "ijkl"[: idx.shape[1]] if idx.shape[1] <= 4 else [f"i{a}" for a in range(idx.shape[1])]
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(list(axes) + ["weight"])
        for row, v in zip(idx, w):
            wr.writerow([int(a) for a in row] + [_fmt(v)])


def write_averages_csv(path, averages, dictionary):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["initial_id"] + dictionary.names + ["dictionary"])
        for i, a in enumerate(np.atleast_2d(averages)):
            wr.writerow([i] + [_fmt(v) for v in a] + [dictionary.version])


def write_clusters_csv(path, pm: PhysicalMeasures):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["initial_id", "cluster", "gap_flag"])
        for i, (c, f) in enumerate(zip(pm.labels, pm.nonconvergent)):
            wr.writerow([i, int(c), int(f)])


def write_stability_csv(path, curve: StabilityCurve):
    k = curve.base_k
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["eps", "c1_dist", "hull_dist"] + [f"t{j + 1}" for j in range(k)])
        for e, c, rows in zip(curve.eps, curve.c1_distance, curve.per_measure):
            for t, d in rows:
                wr.writerow([_fmt(e), _fmt(c), _fmt(d)] + [_fmt(v) for v in t])


def write_entropy_csv(path, pe: PartitionEntropy):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["k", "H_over_k"])
        for k, h in zip(pe.k, pe.H_over_k):
            wr.writerow([int(k), _fmt(h)])
