"""Exact interval simulation of disk growth under the doubling quotient map.

Everything is done in ``Fraction`` arithmetic on [-1, 1] with
f(x) = 2x + 1 (x < 0), 2x - 1 (x >= 0).  The n-fold map is affine with slope
2^n on each cell between consecutive points k / 2^(n-1), so an interval
either avoids those points (and is simply stretched) or is cut by them.

Selection rules, stated on intervals:

* no cut point inside: keep the whole interval ("1");
* otherwise the longest piece, if at least 2 a1 r long, gives a ball of
  radius a1 r at its midpoint ("1");
* otherwise a ball of radius a1 r / 4 inside one piece, placed as far from
  the cut points as the piece allows, keeping distance > (1 - 2a) times its
  radius; the piece giving the largest distance wins, the first on ties ("2a");
* if no piece admits such a ball, 9/10 of the largest radius that does,
  placed the same way ("2a").

Not derived from the package code: this is the reference the package's
trace is compared with, step by step.
"""

from fractions import Fraction as F


def fmap(x, n):
    for _ in range(n):
        x = 2 * x + 1 if x < 0 else 2 * x - 1
    return x


def cut_points(lo, hi, n):
    """Discontinuities of the n-fold map strictly inside (lo, hi)."""
    step = F(1, 2 ** (n - 1))
    k = (lo // step) + 1
    out = []
    while k * step < hi:
        if -1 < k * step < 1:
            out.append(k * step)
        k += 1
    return out


def touches_cut(c, r, n):
    """True when an endpoint of [c - r, c + r] is a cut point of the n-fold map."""
    step = F(1, 2 ** (n - 1))
    return any(-1 < e < 1 and (e / step).denominator == 1 for e in (c - r, c + r))


def _pieces(lo, hi, cuts):
    edges = [lo] + cuts + [hi]
    return [(edges[i], edges[i + 1], i > 0, i < len(cuts)) for i in range(len(edges) - 1)]


def _quarter(lo, hi, r, cut_left, cut_right):
    if hi - lo < 2 * r:
        return None
    cmin, cmax = lo + r, hi - r
    if cut_left and cut_right:
        c = (lo + hi) / 2
        return c, c - r - lo
    if cut_right:
        return cmin, hi - cmin - r
    if cut_left:
        return cmax, cmax - r - lo
    return (cmin + cmax) / 2, None


def step(c, r, n, a, a1):
    """One selection and push: (case, new centre, new radius)."""
    lo, hi = c - r, c + r
    cuts = cut_points(lo, hi, n)
    slope = 2 ** n
    if not cuts:
        return "1", fmap(c, n), slope * r
    pieces = _pieces(lo, hi, cuts)
    best = max(pieces, key=lambda p: (p[1] - p[0], -p[0]))
    if best[1] - best[0] >= 2 * a1 * r:
        m = (best[0] + best[1]) / 2
        return "1", fmap(m, n), slope * a1 * r
    rq = a1 * r / 4
    choice = None
    for plo, phi, cl, cr in pieces:
        p = _quarter(plo, phi, rq, cl, cr)
        if p is None or p[1] is None:
            continue
        if p[1] > (1 - 2 * a) * rq and (choice is None or p[1] > choice[1]):
            choice = p
    if choice is not None:
        return "2a", fmap(choice[0], n), slope * rq
    # shrink: 9/10 of the largest radius that keeps the distance bound
    best = None
    for plo, phi, cl, cr in pieces:
        length = phi - plo
        sup = length / (4 - 4 * a) if cl and cr else length / (3 - 2 * a)
        if best is None or sup > best[0]:
            best = (sup, plo, phi, cl, cr)
    sup, plo, phi, cl, cr = best
    rs = F(9, 10) * sup
    c_new, _ = _quarter(plo, phi, rs, cl, cr)
    return "2a", fmap(c_new, n), slope * rs


def interval_trace(center, radius, delta, n=4, a=F(1, 10), a1=F(9, 10), max_steps=60):
    c, r = F(center), F(radius)
    out = []
    while r < delta and len(out) < max_steps:
        case, c, r = step(c, r, n, a, a1)
        out.append((case, c, r))
    return out


if __name__ == "__main__":
    for case, c, r in interval_trace("0.1234", "0.0005", F(3, 10)):
        print(case, float(c), float(r))
