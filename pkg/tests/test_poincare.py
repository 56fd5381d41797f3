import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sechyp import flow, hyperbolicity as hy, poincare as pc, vectorfield as vf
from sechyp.errors import ConfigError, CoverFail, InsufficientRange, NoReturn

L = vf.lorenz()
Q = vf.geolorenz_quotient()


@pytest.fixture(scope="module")
def oriented():
    sec0 = pc.lorenz_section(L)
    Z = pc.section_splitting_samples(L, sec0, [1.0, 1.0, 20.0], 40)
    rep = hy.estimate_splitting(L, Z, 1, 5.0)
    sec = pc.lorenz_section(L, rep)
    return [sec], rep


@pytest.fixture(scope="module")
def attractor_starts(oriented):
    S, _ = oriented
    x = flow.flow_map(L, np.array([1.0, 1.0, 20.0]), 50.0)
    _, u, _ = pc.flow_to_sections(L, S, x, 10.0)
    rs = pc.return_orbit(L, S, 0, u, 60)
    return [r.end for r in rs]


def test_section_chart_invariants():
    sec = pc.lorenz_section(L)
    np.testing.assert_allclose(sec.in_frame.T @ sec.in_frame, np.eye(2), atol=1e-12)
    assert abs(sec.in_frame.T @ sec.normal).max() < 1e-12
    assert sec.delta0 == pytest.approx(0.25 * 25.0)
    with pytest.raises(ConfigError):
        pc.make_section(L, [0.0, 0.0, 27.0], a0=1.0)
    with pytest.raises(ConfigError):
        pc.make_section(L, [0.0, 0.0, 0.0])


def test_build_single_lorenz_section():
    x = flow.flow_map(L, [1.0, 1.0, 20.0], 30.0)
    cloud = flow.integrate(L, x, 50.0, out_dt=0.1).states
    S = pc.build_sections(L, cloud, 1, base=[0.0, 0.0, 27.0], half_widths=[25.0, 25.0])
    assert len(S) == 1
    np.testing.assert_array_equal(S[0].base, [0.0, 0.0, 27.0])


def test_cover_fail_on_equilibrium_cloud():
    with pytest.raises(CoverFail):
        pc.build_sections(L, np.zeros((1, 3)), 1)


def test_suspension_return_is_the_map():
    S = pc.build_sections(Q, None)
    for x in (-0.7, -0.2, 0.1, 0.45):
        r = pc.first_return(Q, S, 0, [x], with_tangent=True)
        assert r.tau == 1.0
        assert r.end[0] == Q.map(x)
        assert r.tangent[0, 0] == 2.0


def test_lorenz_return_matches_tight_oracle():
    S = [pc.lorenz_section(L)]
    u = S[0].to_coords([2.0, 2.0, 27.0])
    r = pc.first_return(L, S, 0, u)
    tight = flow.DEFAULT_CONFIG.tighter(10.0)
    ro = pc.first_return(L, S, 0, u, cfg=tight)
    assert abs(r.tau - ro.tau) < 1e-6
    np.testing.assert_allclose(r.end, ro.end, atol=1e-6)
    assert abs(S[0].signed_distance(r.end_ambient)) < 1e-9


def test_stable_axis_of_origin_never_returns():
    S = [pc.lorenz_section(L)]
    with pytest.raises(NoReturn):
        pc.first_return(L, S, 0, np.zeros(2), t_max=20.0)


def test_returns_compose(oriented, attractor_starts):
    S, _ = oriented
    for u in attractor_starts[:10]:
        r1 = pc.first_return(L, S, 0, u)
        r2 = pc.first_return(L, S, r1.end_section, r1.end)
        two = pc.first_return(L, S, 0, u, T1=r1.tau + 1e-6)
        assert two.tau == pytest.approx(r1.tau + r2.tau, abs=1e-6)
        np.testing.assert_allclose(two.end, r2.end, atol=1e-6)


def test_tangent_chain_rule(oriented, attractor_starts):
    S, _ = oriented
    sec = S[0]
    for u in attractor_starts[:5]:
        rs = pc.return_orbit(L, S, 0, u, 3, with_tangent=True)
        prod = rs[2].tangent @ rs[1].tangent @ rs[0].tangent
        total = sum(r.tau for r in rs)
        _, M = flow.tangent_map(L, sec.to_ambient(u), total)
        direct = pc.section_tangent(L, sec, sec, rs[2].end_ambient, M)
        assert np.linalg.norm(prod - direct) <= 1e-4 * np.linalg.norm(direct)


def test_inner_hits_respect_delta0(oriented, attractor_starts):
    S, _ = oriented
    sec = S[0]
    for u in attractor_starts:
        r = pc.first_return(L, S, 0, u)
        if r.hit_inner:
            assert sec.boundary_distance(r.end) >= sec.delta0 * (1 - 1e-6)


def test_stable_leaf_coherence(oriented, attractor_starts):
    S, rep = oriented
    s_dir = pc.stable_direction_in_section(L, S[0], rep)
    for u in attractor_starts[:10]:
        v = u + 5e-4 * s_dir
        ra = pc.first_return(L, S, 0, u)
        rb = pc.first_return(L, S, 0, v)
        assert ra.end_section == rb.end_section
        assert abs(ra.tau - rb.tau) < 0.1
        assert np.linalg.norm(ra.end - rb.end) < np.linalg.norm(v - u)


def test_singularity_fit_synthetic():
    d = np.logspace(-7, -1, 60)
    out = pc.return_time_singularity_fit(-2.0 * np.log(d), d)
    assert out["C"] == pytest.approx(2.0)
    assert out["rms"] < 1e-12 and out["inequality_holds"]
    with pytest.raises(InsufficientRange):
        pc.return_time_singularity_fit(-2.0 * np.log(d[:20]), d[:20])


def test_singularity_fit_far_samples():
    rng = np.random.default_rng(0)
    d = np.logspace(-1, 2.5, 60)
    tau = rng.uniform(0.5, 1.0, 60)
    out = pc.return_time_singularity_fit(tau, d)
    assert out["inequality_holds"]


def test_suspension_hyperbolicity():
    S = pc.build_sections(Q, None)
    rs = [pc.first_return(Q, S, 0, [x], with_tangent=True) for x in np.linspace(-0.9, 0.9, 7)]
    h = pc.return_map_hyperbolicity(rs, ds=0)
    assert h["lambda_u_min"] == 2.0
    assert h["lambda_s_max"] == 0.0


def test_lorenz_return_hyperbolicity(oriented, attractor_starts):
    S, _ = oriented
    rs = pc.returns_many(L, S, [(0, u) for u in attractor_starts], T1=2.0, with_tangent=True)
    h = pc.return_map_hyperbolicity(rs, a=0.5)
    assert h["frac_expanding"] >= 0.95
    assert h["cone_violations"] == 0
    assert h["lambda_s_max"] < 1


def test_quotient_extract_on_suspension():
    qm = pc.quotient_map_extract(Q, n_bins=32)
    np.testing.assert_allclose(qm.fx, np.where(qm.x < 0, 2 * qm.x + 1, 2 * qm.x - 1))
    assert len(pc.monotone_branches(qm)) == 2
    one = pc.quotient_map_extract(Q, n_bins=1)
    assert len(one.x) == 1


def test_lorenz_quotient_two_branches(oriented):
    S, rep = oriented
    sd = pc.stable_direction_in_section(L, S[0], rep)
    # scan the cu extent of the attractor (about +-9 in this chart)
    qm = pc.quotient_map_extract(L, S, sd, n_bins=24, span=10.0)
    br = pc.monotone_branches(qm)
    assert len(br) == 2
    assert len(qm.discontinuities) == 1
    g0 = pc.detect_gamma0(L, S, 0, n_lines=3, span=1.0)
    assert abs(qm.discontinuities[0] - g0.coef[0]) < 1e-3
    for i, j, sg in br:
        assert sg > 0
        slope = np.diff(qm.fx[i:j + 1]) / np.diff(qm.x[i:j + 1])
        assert np.median(np.abs(slope)) > 1


def test_returns_csv(tmp_path):
    S = pc.build_sections(Q, None)
    rs = pc.return_orbit(Q, S, 0, [0.1234], 5)
    p = tmp_path / "r.csv"
    pc.write_returns_csv(p, rs)
    rows = p.read_text().splitlines()
    assert rows[0] == "section_from,u1,section_to,v1,tau,hit_inner"
    assert len(rows) == 6


@settings(max_examples=40, deadline=None)
@given(st.floats(-1.0, 1.0), st.integers(1, 6))
def test_suspension_return_orbit_is_map_iteration(x, n):
    S = pc.build_sections(Q, None)
    rs = pc.return_orbit(Q, S, 0, [x], n)
    y = x
    for r in rs:
        y = float(Q.map(y))
        assert r.end[0] == y and r.tau == 1.0
