"""Registry of concrete vector fields, perturbations and C1 distances.

Built-in systems
----------------
``linear``
    x' = A x.  Parameter ``A`` (square matrix).
``rotation``
    The isometry x' = -y, y' = x (a ``linear`` instance, kept as a
    negative control).
``lorenz``
    x' = sigma (y - x), y' = x (rho - z) - y, z' = x y - beta z with
    defaults sigma=10, rho=28, beta=8/3.
``bowen``
    Planar heteroclinic eye.  With P(x, y) = y^2 - (1 - x^2)^2 the field is
    ``alpha * (-dP/dy, dP/dx) + (e x (1 - x^2) / 4, -e x^2 y / 2)``.  The
    curve P = 0, |x| <= 1 stays invariant, so the saddles s1 = (1, 0) and
    s2 = (-1, 0) remain joined by the two arcs y = +-(1 - x^2); the origin
    is a source.  The saddle eigenvalues are ``4 alpha -+ e/2`` at s1 and
    ``4 alpha +- e/2`` at s2, so the contracting product beats the
    expanding one as soon as e > 0.
``double-lorenz``
    Two Lorenz copies centred at (-D, 0, 0) and (D, 0, 0), blended by a C2
    step in the first coordinate of half-width ``width``; each copy is
    exactly Lorenz inside its own box, which gives two disjoint attracting
    sets.
``geolorenz-quotient``
    Suspension, with unit roof, of the interval map f(x) = 2x + 1 on
    [-1, 0) and 2x - 1 on [0, 1].  It is a :class:`MapSuspension`, not an
    ODE, and the Poincare and measure code treat it analytically.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from scipy.stats import qmc

from . import _kernels as K
from .errors import BlowUp, ConfigError

BUMP_SUP_DERIVATIVE = 6.0 / np.sqrt(5.0) * 0.64  # sup |chi'| of (1-s^2)^3


@dataclass(frozen=True)
class Singularity:
    point: tuple
    eigenvalues: tuple


@dataclass(frozen=True)
class VectorFieldSpec:
    name: str
    dim: int
    params: dict
    kind: int
    packed: tuple
    has_analytic_jacobian: bool = True
    trapping_region: tuple | None = None
    singularities: tuple = ()
    bumps: tuple = ()
    trap_grace: float = 0.1

    is_suspension = False

    @property
    def p(self):
        return np.asarray(self.packed, dtype=float)

    @property
    def b(self):
        if not self.bumps:
            return np.zeros((0, 2 + 2 * self.dim))
        return np.asarray(self.bumps, dtype=float)

    @property
    def kernel_args(self):
        return self.kind, self.p, self.b

    @property
    def box(self):
        if self.trapping_region is None:
            return None
        lo, hi = self.trapping_region
        return np.asarray(lo, float), np.asarray(hi, float)

    def singular_points(self):
        if not self.singularities:
            return np.zeros((0, self.dim))
        return np.array([s.point for s in self.singularities], dtype=float)


@dataclass(frozen=True)
class MapSuspension:
    """Suspension flow of a piecewise affine interval map with a constant roof.

    State is (x, s) with s in [0, roof); the section is s = 0.  ``slopes``
    and ``offsets`` give the affine branches on the cells delimited by
    ``breaks`` (the singular locus), so f(x) = slopes[i] x + offsets[i].
    """

    name: str
    breaks: tuple = (0.0,)
    slopes: tuple = (2.0, 2.0)
    offsets: tuple = (1.0, -1.0)
    domain: tuple = (-1.0, 1.0)
    roof: float = 1.0
    params: dict = field(default_factory=dict)
    dim: int = 2
    trapping_region: tuple | None = ((-1.0, 0.0), (1.0, 1.0))
    singularities: tuple = ()

    is_suspension = True

    def branch(self, x):
        return np.searchsorted(np.asarray(self.breaks), np.asarray(x, float),
                               side="right")

    def map(self, x):
        x = np.asarray(x, float)
        i = self.branch(x)
        return np.asarray(self.slopes)[i] * x + np.asarray(self.offsets)[i]

    def derivative(self, x):
        return np.asarray(self.slopes)[self.branch(x)]

    def singular_points(self):
        return np.zeros((0, self.dim))


@dataclass(frozen=True)
class Perturbation:
    mode: str
    magnitude: float
    target_param: str | None = None
    bump_center: tuple | None = None
    bump_radius: float | None = None
    bump_direction: tuple | None = None


# ----------------------------------------------------------- builders

def _linearize_equilibria(kind, packed, dim, points):
    out = []
    p = np.asarray(packed, float)
    b = np.zeros((0, 2 + 2 * dim))
    for pt in points:
        J = np.empty((dim, dim))
        K.jac(kind, p, b, np.asarray(pt, float), J)
        ev = np.linalg.eigvals(J)
        ev = ev[np.lexsort((ev.imag, ev.real))]
        out.append(Singularity(tuple(float(v) for v in pt),
                               tuple(complex(v) for v in ev)))
    return tuple(out)


def linear(A=((1.0, 0.0), (0.0, -2.0)), name="linear", trapping_region=None):
    A = np.atleast_2d(np.asarray(A, dtype=float))
    d = A.shape[0]
    if A.shape != (d, d) or d < 2:
        raise ConfigError(f"linear field needs a square matrix of size >= 2, got {A.shape}")
    packed = tuple(A.ravel())
    params = {"A": tuple(map(tuple, A))}
    sing = _linearize_equilibria(K.LINEAR, packed, d, [np.zeros(d)])
    return VectorFieldSpec(name, d, params, K.LINEAR, packed,
                           trapping_region=trapping_region, singularities=sing)


def rotation():
    return linear(((0.0, -1.0), (1.0, 0.0)), name="rotation")


LORENZ_BOX = ((-30.0, -40.0, -10.0), (30.0, 40.0, 60.0))
# corner starts overshoot every Lorenz box for ~0.2 time units
LORENZ_TRAP_GRACE = 0.5


def lorenz(sigma=10.0, rho=28.0, beta=8.0 / 3.0, trapping_region=LORENZ_BOX):
    packed = (float(sigma), float(rho), float(beta))
    pts = [np.zeros(3)]
    if rho > 1:
        c = np.sqrt(beta * (rho - 1))
        pts += [np.array([c, c, rho - 1]), np.array([-c, -c, rho - 1])]
    sing = _linearize_equilibria(K.LORENZ, packed, 3, pts)
    return VectorFieldSpec("lorenz", 3,
                           {"sigma": packed[0], "rho": packed[1], "beta": packed[2]},
                           K.LORENZ, packed, trapping_region=trapping_region,
                           singularities=sing, trap_grace=LORENZ_TRAP_GRACE)


def bowen(alpha=1.0, e=5.0):
    if e <= 0:
        raise ConfigError("bowen needs e > 0 for the eigenvalue inequality")
    packed = (float(alpha), float(e))
    pts = [np.array([1.0, 0.0]), np.array([-1.0, 0.0]), np.zeros(2)]
    sing = _linearize_equilibria(K.BOWEN, packed, 2, pts)
    spec = VectorFieldSpec("bowen", 2, {"alpha": packed[0], "e": packed[1]},
                           K.BOWEN, packed,
                           singularities=sing)
    lp1, lm1 = bowen_saddle_rates(spec, 0)
    lp2, lm2 = bowen_saddle_rates(spec, 1)
    if not lm1 * lm2 > lp1 * lp2:
        raise ConfigError("bowen parameters violate the saddle eigenvalue inequality")
    return spec


def bowen_saddle_rates(spec, index):
    """(expanding rate, contracting rate) of saddle s1 (index 0) or s2."""
    ev = np.real(np.asarray(spec.singularities[index].eigenvalues))
    return float(ev.max()), float(-ev.min())


def double_lorenz(sigma=10.0, rho=28.0, beta=8.0 / 3.0, D=60.0, width=10.0):
    packed = (float(sigma), float(rho), float(beta), float(D), float(width))
    c = np.sqrt(beta * (rho - 1))
    pts = []
    for sgn in (-1.0, 1.0):
        off = np.array([sgn * D, 0.0, 0.0])
        pts += [off, off + [c, c, rho - 1], off + [-c, -c, rho - 1]]
    sing = _linearize_equilibria(K.DOUBLE_LORENZ, packed, 3, pts)
    lo, hi = LORENZ_BOX
    region = ((-D + lo[0], lo[1], lo[2]), (D + hi[0], hi[1], hi[2]))
    return VectorFieldSpec("double-lorenz", 3,
                           {"sigma": packed[0], "rho": packed[1], "beta": packed[2],
                            "D": packed[3], "width": packed[4]},
                           K.DOUBLE_LORENZ, packed, trapping_region=region,
                           singularities=sing, trap_grace=LORENZ_TRAP_GRACE)


def double_lorenz_boxes(spec):
    """The two component trapping boxes of a double-lorenz spec."""
    D = spec.params["D"]
    lo, hi = np.array(LORENZ_BOX[0]), np.array(LORENZ_BOX[1])
    shift = np.array([D, 0.0, 0.0])
    return (lo - shift, hi - shift), (lo + shift, hi + shift)


def geolorenz_quotient():
    return MapSuspension("geolorenz-quotient")


_PACK_ORDER = {
    K.LORENZ: ("sigma", "rho", "beta"),
    K.BOWEN: ("alpha", "e"),
    K.DOUBLE_LORENZ: ("sigma", "rho", "beta", "D", "width"),
}

REGISTRY: dict[str, Callable] = {
    "linear": linear,
    "rotation": rotation,
    "lorenz": lorenz,
    "bowen": bowen,
    "double-lorenz": double_lorenz,
    "geolorenz-quotient": geolorenz_quotient,
}

DEFAULTS = {
    "linear": {"A": [[1.0, 0.0], [0.0, -2.0]]},
    "rotation": {},
    "lorenz": {"sigma": 10.0, "rho": 28.0, "beta": 8.0 / 3.0},
    "bowen": {"alpha": 1.0, "e": 5.0},
    "double-lorenz": {"sigma": 10.0, "rho": 28.0, "beta": 8.0 / 3.0, "D": 60.0, "width": 10.0},
    "geolorenz-quotient": {},
}


def register(name, factory, defaults=None):
    REGISTRY[name] = factory
    DEFAULTS[name] = dict(defaults or {})


def register_linear(name, A):
    A = [list(map(float, row)) for row in A]
    register(name, lambda A=A: linear(A, name=name), {"A": A})


def get_system(name, **params):
    try:
        factory = REGISTRY[name]
    except KeyError:
        raise ConfigError(f"unknown system {name!r}; known: {sorted(REGISTRY)}") from None
    try:
        return factory(**params)
    except TypeError as exc:
        raise ConfigError(f"bad parameters for {name}: {exc}") from None


# ---------------------------------------------------------- operations

def evaluate(spec, x):
    x = np.asarray(x, dtype=float)
    if x.shape != (spec.dim,) or not np.all(np.isfinite(x)):
        raise ConfigError(f"point must be finite with length {spec.dim}")
    if spec.is_suspension:
        return np.array([0.0, 1.0 / spec.roof])
    out = np.empty(spec.dim)
    K.rhs(spec.kind, spec.p, spec.b, x, out)
    if not np.all(np.isfinite(out)):
        raise BlowUp(f"non-finite field value at {x}")
    return out


def evaluate_many(spec, X):
    X = np.asarray(X, dtype=float)
    out = np.empty_like(X)
    kind, p, b = spec.kernel_args
    for i in range(X.shape[0]):
        K.rhs(kind, p, b, X[i], out[i])
    return out


def fd_jacobian(spec, x):
    x = np.asarray(x, dtype=float)
    h = max(1e-6, 1e-6 * np.linalg.norm(x))
    J = np.empty((spec.dim, spec.dim))
    for j in range(spec.dim):
        e = np.zeros(spec.dim)
        e[j] = h
        J[:, j] = (evaluate(spec, x + e) - evaluate(spec, x - e)) / (2 * h)
    return J


def jacobian(spec, x):
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ConfigError("jacobian requires a finite point")
    if spec.is_suspension:
        return np.zeros((2, 2))
    if not spec.has_analytic_jacobian:
        J = fd_jacobian(spec, x)
    else:
        J = np.empty((spec.dim, spec.dim))
        K.jac(spec.kind, spec.p, spec.b, x, J)
    if not np.all(np.isfinite(J)):
        raise BlowUp(f"non-finite Jacobian at {x}")
    return J


def divergence(spec, x):
    return float(np.trace(jacobian(spec, x)))


def perturb(spec, pert: Perturbation):
    if spec.is_suspension:
        raise ConfigError("map suspensions cannot be perturbed")
    if pert.magnitude < 0:
        raise ConfigError("perturbation magnitude must be >= 0")
    if pert.mode == "parameter-shift":
        order = _PACK_ORDER.get(spec.kind)
        if order is None or pert.target_param not in order:
            raise ConfigError(f"{spec.name} has no parameter {pert.target_param!r}")
        if pert.magnitude == 0:
            return spec
        params = dict(spec.params)
        params[pert.target_param] = params[pert.target_param] + pert.magnitude
        packed = tuple(params[k] for k in order)
        return replace(spec, params=params, packed=packed)
    if pert.mode == "bump":
        if pert.bump_radius is None or pert.bump_radius <= 0:
            raise ConfigError("bump perturbation needs bump_radius > 0")
        if pert.magnitude == 0:
            return spec
        c = np.asarray(pert.bump_center, float)
        v = np.asarray(pert.bump_direction, float)
        if c.shape != (spec.dim,) or v.shape != (spec.dim,):
            raise ConfigError("bump center/direction must have the field's dimension")
        v = v / np.linalg.norm(v)
        row = (float(pert.magnitude), float(pert.bump_radius), *map(float, c), *map(float, v))
        return replace(spec, bumps=spec.bumps + (row,))
    raise ConfigError(f"unknown perturbation mode {pert.mode!r}")


def bump_c1_bounds(pert: Perturbation):
    """Analytic [lower, upper] bounds of the C1 size of a bump term."""
    eps, r = pert.magnitude, pert.bump_radius
    return eps, eps * (1.0 + BUMP_SUP_DERIVATIVE / r)


def sample_box(region, n, seed=0):
    """First ``n`` points of a deterministic Halton sequence in ``region``."""
    lo, hi = (np.asarray(a, float) for a in region)
    sampler = qmc.Halton(d=lo.size, scramble=False, seed=seed)
    sampler.fast_forward(1)  # skip the origin corner
    return qmc.scale(sampler.random(n), lo, hi)


def c1_distance_estimate(a, b, region, n_samples, points=None):
    if a.dim != b.dim:
        raise ConfigError(f"dimension mismatch: {a.dim} vs {b.dim}")
    if n_samples < 1:
        raise ConfigError("n_samples must be >= 1")
    X = sample_box(region, n_samples) if points is None else np.asarray(points, float)
    best = 0.0
    for x in X:
        g = np.linalg.norm(evaluate(a, x) - evaluate(b, x))
        dj = np.linalg.norm(jacobian(a, x) - jacobian(b, x), 2)
        best = max(best, g + dj)
    return float(best)
