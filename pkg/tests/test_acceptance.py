"""Acceptance suite: one test and one printed verdict line per criterion."""

import time
from fractions import Fraction

import numpy as np
import pytest

from sechyp import cli, cudisk as cd, ergodic as eg, flow, hyperbolicity as hy
from sechyp import poincare as pc, vectorfield as vf
from sechyp.flow import IntegratorConfig

from conftest import record
from oracle_values import LORENZ_LYAPUNOV, LORENZ_PERIODS
from quotient_oracle import interval_trace, touches_cut

L = vf.lorenz()
Q = vf.geolorenz_quotient()
QS = [pc.SuspensionSection(-1.0, 1.0, 0, a0=1.0)]
LOOSE = IntegratorConfig(rel_tol=1e-8, abs_tol=1e-10)
SIGMA, RHO, BETA = 10.0, 28.0, 8.0 / 3.0


@pytest.fixture(scope="module")
def oriented():
    sec0 = pc.lorenz_section(L)
    Z = pc.section_splitting_samples(L, sec0, [1.0, 1.0, 20.0], 40)
    rep = hy.estimate_splitting(L, Z, 1, 5.0)
    return [pc.lorenz_section(L, rep)], rep


@pytest.fixture(scope="module")
def section_orbit(oriented):
    S, _ = oriented
    x = flow.flow_map(L, np.array([1.0, 1.0, 20.0]), 50.0)
    _, u, _ = pc.flow_to_sections(L, S, x, 10.0)
    return pc.return_orbit(L, S, 0, u, 300)


def test_criterion_01_flow_correctness():
    t0 = time.time()
    X = flow.integrate(L, flow.flow_map(L, [1.0, 1.0, 20.0], 20.0), 40.0, out_dt=2.0).states[:20]
    rng = np.random.default_rng(0)
    semi, liou = 0.0, 0.0
    for x in X:
        s, t = rng.uniform(0.1, 1.0, 2)
        direct = flow.flow_map(L, x, s + t)
        composed = flow.flow_map(L, flow.flow_map(L, x, t), s)
        semi = max(semi, np.linalg.norm(direct - composed) / (1 + np.linalg.norm(x)))
        traj = flow.integrate(L, x, 2.0, with_frame=np.eye(3), out_dt=1e-3)
        div = flow.divergence_integral(L, traj)
        liou = max(liou, abs(flow.log_det_tangent(traj) - div) / abs(div))
    dt = time.time() - t0
    ok = semi < 1e-6 and liou < 1e-4 and dt < 10
    assert record(1, ok, f"semigroup defect {semi:.2e}, Liouville rel {liou:.2e}, {dt:.1f} s")


def test_criterion_02_lyapunov_oracle():
    t0 = time.time()
    lin = hy.lyapunov_spectrum(vf.linear(np.diag([1.0, -2.0, -3.0])), np.zeros(3), 20.0)
    lin_err = np.abs(lin.exponents - [1.0, -2.0, -3.0]).max()
    res = hy.lyapunov_spectrum(L, [1.0, 1.0, 20.0], 2000.0, transient=50.0)
    lam = res.exponents
    ref = np.array(LORENZ_LYAPUNOV)
    rel = np.abs(lam[[0, 2]] - ref[[0, 2]]) / np.abs(ref[[0, 2]])
    ssum = abs(lam.sum() + (SIGMA + 1 + BETA))
    dt = time.time() - t0
    ok = lin_err < 1e-3 and rel.max() < 0.05 and abs(lam[1]) < 1e-2 and ssum < 1e-2 and dt < 120
    assert record(2, ok, f"linear err {lin_err:.1e}; lorenz {np.round(lam, 4)} "
                         f"(max rel {rel.max():.3f}, |l2| {abs(lam[1]):.1e}, sum err {ssum:.1e}), "
                         f"{dt:.0f} s")


def test_criterion_03_sectional_expansion():
    t0 = time.time()
    x = flow.flow_map(L, [1.0, 1.0, 20.0], 50.0)
    pts = flow.integrate(L, x, 10.0, out_dt=2.0).states[1:]
    rep = hy.estimate_splitting(L, pts, 1, 5.0)
    theta = hy.sectional_expansion_check(L, rep, 1, T=20.0)["theta"]
    rot = vf.rotation()
    rrep = hy.estimate_splitting(rot, np.array([[1.0, 0.0]]), 0, 5.0)
    theta_rot = hy.sectional_expansion_check(rot, rrep, 1, T=10.0)["theta"]
    dt = time.time() - t0
    rel = abs(theta - LORENZ_LYAPUNOV[0]) / LORENZ_LYAPUNOV[0]
    ok = theta > 0 and rel < 0.1 and theta_rot < 0.01 and dt < 60
    assert record(3, ok, f"lorenz theta {theta:.4f} (rel to l1 {rel:.3f}), "
                         f"rotation theta {theta_rot:.1e}, {dt:.0f} s")


def test_criterion_04_return_time_law(oriented):
    t0 = time.time()
    S, _ = oriented
    g = pc.detect_gamma0(L, S, 0, n_lines=12, span=6.0)
    taus, ds = [], []
    for p in g.points:
        for side in (-1.0, 1.0):
            for d in np.logspace(-6, -1, 9):
                u = p + np.array([0.0, side * d])
                r = pc.first_return(L, S, 0, u)
                taus.append(r.tau)
                ds.append(g.distance(u))
    fit = pc.return_time_singularity_fit(taus, ds)
    # unstable eigenvalue of the linearization at the origin
    J = np.array([[-SIGMA, SIGMA, 0.0], [RHO, -1.0, 0.0], [0.0, 0.0, -BETA]])
    C_ref = 1.0 / np.linalg.eigvals(J).real.max()
    rel = abs(fit["C"] - C_ref) / C_ref
    decades = np.log10(max(ds) / min(ds))
    dt = time.time() - t0
    ok = (len(taus) >= 200 and decades >= 3 and fit["inequality_holds"] and rel < 0.2
          and fit["r2"] >= 0.9 and dt < 300)
    assert record(4, ok, f"{len(taus)} samples over {decades:.1f} decades, C {fit['C']:.4f} vs "
                         f"{C_ref:.4f} (rel {rel:.3f}), R2 {fit['r2']:.3f}, "
                         f"bound holds {fit['inequality_holds']}, {dt:.0f} s")


def test_criterion_05_return_map_hyperbolicity(oriented, section_orbit):
    t0 = time.time()
    S, _ = oriented
    starts = [(0, r.end) for r in section_orbit[:200]]
    rs = pc.returns_many(L, S, starts, T1=2.0, with_tangent=True)
    h = pc.return_map_hyperbolicity(rs, a=0.5)
    dt = time.time() - t0
    ok = h["frac_expanding"] >= 0.95 and h["cone_violations"] == 0 and dt < 300
    assert record(5, ok, f"{len(rs)} returns (T1 = 2), expanding {h['frac_expanding']:.3f}, "
                         f"cone violations {h['cone_violations']} at a = 0.5, {dt:.0f} s")


def _quotient_matches():
    K4 = cd.make_constants(1 / 16, 0.17, 0.9)
    centres = [Fraction("0.1234")] + [Fraction(int(v), 10000)
                                      for v in np.round(vf.sample_box(((-0.9,), (0.9,)), 12)[:, 0]
                                                        * 10000)]
    r0 = Fraction(5, 10000)
    n_ok, n_run = 0, 0
    for c in centres:
        ref = interval_trace(c, r0, Fraction(3, 10))
        if touches_cut(c, r0, 4) or any(touches_cut(cc, rr, 4) for _, cc, rr in ref[:-1]):
            continue
        tr = cd.expand_until_uniform(Q, QS, cd.make_disk(QS[0], [float(c)], float(r0)), 0.3, 60,
                                     T1=3.0, constants=K4)
        n_run += 1
        same = len(tr.steps) == len(ref) and all(
            s.case == case and s.after.radius == pytest.approx(float(r), rel=1e-12)
            for s, (case, _, r) in zip(tr.steps, ref))
        n_ok += same
    return n_ok, n_run


def test_criterion_06_cudisk(oriented, section_orbit):
    t0 = time.time()
    n_ok, n_run = _quotient_matches()
    S, _ = oriented
    sec = S[0]
    starts = [(0, r.end) for r in section_orbit]
    K = cd.measure_constants(L, S, starts, a=0.15, strict=False)
    delta = 0.3 * float(sec.half_widths[1])
    d = cd.make_disk(sec, section_orbit[-1].end, 1e-3, a=0.15)
    tr = cd.expand_until_uniform(L, S, d, delta, 60, constants=K, raise_on_fail=False)
    rmax = max([s.after.radius for s in tr.steps] + [d.radius])
    growth_ok = tr.case1_growth_ok()
    detail = (f"quotient traces {n_ok}/{n_run} exact; lorenz delta {delta:.2f}: "
              f"terminated {tr.terminated} in {len(tr.steps)} steps, largest radius {rmax:.3f}, "
              f"case-1 growth ok {growth_ok}, constants feasible {K.feasible}")
    ok = n_ok == n_run > 0 and tr.terminated and growth_ok
    if tr.terminated:
        po = cd.locate_periodic_orbit(tr, L, S)
        err = min(abs(po.period - p) for p in LORENZ_PERIODS.get(po.natural_returns, (np.inf,)))
        ok = ok and po.residual < 1e-8 and err < 1e-4
        detail += f"; periodic orbit residual {po.residual:.1e}, period error {err:.1e}"
    else:
        # diagnostic only: the same pipeline at a disk size the trace does reach
        tr2 = cd.expand_until_uniform(L, S, d, 2.0, 60, constants=K, raise_on_fail=False)
        if tr2.terminated:
            po = cd.locate_periodic_orbit(tr2, L, S)
            err = min(abs(po.period - p) for p in LORENZ_PERIODS.get(po.natural_returns, (np.inf,)))
            detail += (f"; at delta 2: {len(tr2.steps)} steps, periodic orbit with "
                       f"{po.natural_returns} returns, residual {po.residual:.1e}, "
                       f"period error {err:.1e} (not counted)")
    dt = time.time() - t0
    ok = ok and dt < 600
    assert record(6, ok, detail + f", {dt:.0f} s")


def test_criterion_07_physical_measures():
    t0 = time.time()
    D = eg.dictionary_for(L)
    X0 = vf.sample_box(L.trapping_region, 100)
    pm = eg.count_physical_measures(L, X0, D, T=5000.0, burn_in=50.0, cfg=LOOSE)
    frac = pm.basin_fractions
    S2 = vf.double_lorenz()
    D2 = eg.dictionary_for(S2)
    rng = np.random.default_rng(0)
    boxes = vf.double_lorenz_boxes(S2)
    pick = rng.integers(0, 2, 100)
    Y0 = np.array([boxes[k][0] + (boxes[k][1] - boxes[k][0]) * rng.random(3) for k in pick])
    pm2 = eg.count_physical_measures(S2, Y0, D2, T=2000.0, burn_in=50.0, cfg=LOOSE)
    within, cross = eg.cluster_separation(pm2, D2)
    split = bool(np.all((pm2.labels == pm2.labels[0]) == (pick == pick[0])))
    dt = time.time() - t0
    ok = (pm.k == 1 and frac[0] == 1.0 and pm.nonconvergent.sum() == 0 and pm2.k == 2 and split
          and cross > 10 * within and dt < 1800)
    assert record(7, ok, f"lorenz k {pm.k}, fraction {frac.round(3).tolist()}, non-convergent "
                         f"{int(pm.nonconvergent.sum())}; double-lorenz k {pm2.k}, split matches "
                         f"{split}, within {within:.3f} / cross {cross:.3f}, {dt:.0f} s")


def test_criterion_08_statistical_stability():
    t0 = time.time()
    D = eg.dictionary_for(L)
    X0 = vf.sample_box(((-10, -10, 15), (10, 10, 35)), 4)
    perts = [vf.Perturbation("parameter-shift", m, "rho") for m in (0.0, 0.05, 0.1, 0.2, 0.4)]
    c = eg.statistical_stability_curve(L, perts, D, 20000.0, initials=X0, burn_in=50.0, cfg=LOOSE)
    hd = c.hull_distance
    # distance decreases with shrinking eps, i.e. rank-correlates positively with eps
    dt = time.time() - t0
    ok = (hd[0] == 0.0 and np.all(hd[1:] > 0) and np.all(np.diff(hd[1:]) > 0)
          and c.spearman >= 0.9 and hd[1] < 0.02 and dt < 2700)
    assert record(8, ok, f"eps {c.eps.tolist()}, hull distances {np.round(hd, 5).tolist()}, "
                         f"spearman(eps, d) {c.spearman:.2f}, {dt:.0f} s")


def test_criterion_09_bowen_control():
    t0 = time.time()
    B = vf.bowen()
    rng = np.random.default_rng(0)
    pts = []
    while len(pts) < 50:
        p = rng.uniform(-1, 1, 2)
        P = (1 - p[0] ** 2) ** 2 - p[1] ** 2
        if 0.05 < P < 0.9:
            pts.append(p)
    psi = lambda X: X[:, 0]  # noqa: E731
    s1, s2 = (np.array(B.singularities[i].point)[None] for i in (0, 1))
    sep = abs(psi(s1)[0] - psi(s2)[0])
    sched = eg.geometric_schedule(10.0, 1.5, 30)
    gaps = np.array([eg.historic_behavior_detect(B, p, psi, sched).gap for p in pts])
    frac = float(np.mean(gaps > 0.3 * sep))
    h = eg.historic_behavior_detect(L, [1.0, 1.0, 20.0], lambda X: X[:, 2],
                                    eg.geometric_schedule(100.0, 1.5, 12))
    lrel = h.gap / abs(h.averages[-1])
    dt = time.time() - t0
    ok = frac >= 0.9 and lrel < 0.02 and dt < 600
    assert record(9, ok, f"bowen gap > {0.3 * sep:.2f} for {100 * frac:.0f}% "
                         f"(min gap {gaps.min():.3f}); lorenz gap {100 * lrel:.2f}% of mean, "
                         f"{dt:.0f} s")


def test_criterion_10_entropy_suite():
    t0 = time.time()
    log2 = np.log(2.0)
    rng = np.random.default_rng(1)
    O = eg.sample_orbits(Q, rng.uniform(-1, 1, (2 ** 20, 1)), 12)
    gc = eg.generator_count(O, range(1, 13), [0.1, 0.05])
    rate = gc.rates[list(gc.eps_values).index(0.05)]
    xs = eg.shift_orbit(Q, 0.3, 10 ** 6, seed=3)
    pe = eg.partition_entropy(Q.branch(xs), 8)
    srb = eg.srb_identity_check(Q, 0.3, 10 ** 6)
    tr = flow.integrate(L, [1.0, 1.0, 20.0], 250.0, LOOSE, out_dt=10.0)
    probe = eg.entropy_expansiveness_probe(L, tr.states[5:25], 0.1, 8, 2.0, n_candidates=200,
                                           cfg=LOOSE)
    dt = time.time() - t0
    r_rel = abs(rate - log2) / log2
    h_rel = abs(pe.inf - log2) / log2
    ok = (r_rel < 0.1 and h_rel < 0.1 and probe.max_rate < 0.05
          and pe.subadditivity_violation <= 0.05 and abs(srb.defect) <= 0.05 * log2 and dt < 900)
    assert record(10, ok, f"generator rate/log2 {rate / log2:.3f}, H/k/log2 {pe.inf / log2:.4f}, "
                          f"subadditivity {pe.subadditivity_violation:.1e}, lorenz probe max "
                          f"{probe.max_rate:.3f}, srb defect {srb.defect:.1e}, {dt:.0f} s")


_CLI_RUNS = {
    "simulate": "[system]\nname = lorenz\n[simulate]\nT = 2.0\n",
    "lyapunov": "[system]\nname = lorenz\n[lyapunov]\nT = 20.0\ntransient = 1.0\n",
    "splitting": "[system]\nname = lorenz\n[splitting]\nn_samples = 4\n",
    "poincare": "[system]\nname = lorenz\n[poincare]\nn_returns = 20\n",
    "cudisk": ("[system]\nname = geolorenz-quotient\n[cudisk]\ncenter = 0.1234\nradius = 0.0005\n"
               "delta = 0.3\nT1 = 3.0\nlambda1 = 0.0625\nlambda2 = 0.17\na1 = 0.9\n"),
    "measures": ("[system]\nname = lorenz\n[integrator]\nrel_tol = 1e-8\nabs_tol = 1e-10\n"
                 "[measures]\nn_initials = 50\nT = 60.0\nburn_in = 10.0\n"),
    "stability": ("[system]\nname = lorenz\n[integrator]\nrel_tol = 1e-8\nabs_tol = 1e-10\n"
                  "[stability]\nn_initials = 2\nT = 100.0\nmagnitudes = [0.0, 0.1]\n"),
    "entropy": ("[system]\nname = geolorenz-quotient\n[entropy]\nn = 100000\nn_cloud = 20000\n"
                "n_max = 8\n"),
    "bowen": "[system]\nname = bowen\n[bowen]\nn_initials = 3\n",
}


def test_criterion_11_reproducibility(tmp_path):
    t0 = time.time()
    bad = []
    for exp, body in _CLI_RUNS.items():
        cfg = tmp_path / f"{exp}.ini"
        cfg.write_text("[run]\nseed = 7\n" + body)
        out = tmp_path / exp
        if cli.main([exp, "--config", str(cfg), "--out", str(out), "--threads", "1"]) != 0:
            bad.append(f"{exp} run")
            continue
        # the replay runs with 8 workers and compares byte for byte
        if cli.main(["replay", str(out / cli.MANIFEST), "--threads", "8"]) != 0:
            bad.append(f"{exp} replay")
    dt = time.time() - t0
    ok = not bad
    assert record(11, ok, f"{len(_CLI_RUNS)} experiments run with 1 thread and replayed with 8, "
                          f"failures {bad or 'none'}, {dt:.0f} s")
