import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sechyp import flow, hyperbolicity as hy, vectorfield as vf
from sechyp.errors import ConfigError, SplitFail

from oracle_values import LORENZ_LYAPUNOV

L = vf.lorenz()
SADDLE3 = vf.linear(np.diag([-2.0, 1.0, 3.0]))


@pytest.fixture(scope="module")
def lorenz_samples():
    x = flow.flow_map(L, [1.0, 1.0, 20.0], 50.0)
    return flow.integrate(L, x, 10.0, out_dt=2.0).states[1:]


@pytest.fixture(scope="module")
def lorenz_report(lorenz_samples):
    return hy.estimate_splitting(L, lorenz_samples, 1, 5.0)


def test_subspace_distance_basics():
    e = np.eye(3)
    assert hy.subspace_distance(e[:, :1], e[:, :1]) == 0.0
    assert hy.subspace_distance(e[:, :1], e[:, 1:2]) == pytest.approx(1.0)
    v = np.array([[np.cos(0.3)], [np.sin(0.3)], [0.0]])
    assert hy.subspace_distance(e[:, :1], v) == pytest.approx(np.sin(0.3))


def test_linear_fit_exact():
    t = np.linspace(0, 5, 11)
    s, c, r2, rms = hy.linear_fit(t, 2.0 - 3.0 * t)
    assert (s, c) == pytest.approx((-3.0, 2.0))
    assert r2 == pytest.approx(1.0) and rms < 1e-12


def test_linear_spectrum():
    res = hy.lyapunov_spectrum(vf.linear(np.diag([1.0, -2.0, -3.0])), np.zeros(3), 20.0)
    np.testing.assert_allclose(res.exponents, [1.0, -2.0, -3.0], atol=1e-3)
    assert res.trace.shape == (10, 3)


def test_spectrum_is_descending_and_truncation_agrees():
    lin = vf.linear(np.diag([-3.0, 1.0, -2.0]))
    full = hy.lyapunov_spectrum(lin, np.zeros(3), 20.0)
    assert np.all(np.diff(full.exponents) <= 0)
    with pytest.raises(ConfigError):
        hy.lyapunov_spectrum(lin, np.zeros(3), 20.0, k=4)


def test_reversed_time_negates_linear_spectrum():
    A = np.array([[0.5, 1.0, 0.0], [0.0, -1.0, 0.2], [0.0, 0.0, 2.0]])
    fwd = hy.lyapunov_spectrum(vf.linear(A), np.zeros(3), 30.0).exponents
    bwd = hy.lyapunov_spectrum(vf.linear(-A), np.zeros(3), 30.0).exponents
    np.testing.assert_allclose(bwd, -fwd[::-1], atol=1e-2)


def test_lorenz_spectrum_short_run():
    res = hy.lyapunov_spectrum(L, [1.0, 1.0, 20.0], 500.0, transient=20.0)
    np.testing.assert_allclose(res.exponents[[0, 2]], np.array(LORENZ_LYAPUNOV)[[0, 2]],
                               rtol=0.1)
    assert abs(res.exponents[1]) < 0.05
    assert res.exponents.sum() == pytest.approx(res.div_average, abs=1e-3)
    assert res.exponents.sum() == pytest.approx(-(10 + 1 + 8 / 3), abs=1e-2)


def test_flow_direction_exponent_is_small():
    x = flow.flow_map(L, [1.0, 1.0, 20.0], 30.0)
    assert abs(hy.flow_direction_exponent(L, x, 200.0)) < 0.05


def test_linear_splitting():
    rep = hy.estimate_splitting(SADDLE3, np.zeros((2, 3)), 1, 5.0)
    for Es, Ecu in zip(rep.Es_frames, rep.Ecu_frames):
        assert hy.subspace_distance(Es, np.eye(3)[:, :1]) < 1e-8
        assert hy.subspace_distance(Ecu, np.eye(3)[:, 1:]) < 1e-8
        np.testing.assert_allclose(Es.T @ Es, np.eye(1), atol=1e-8)
        np.testing.assert_allclose(Ecu.T @ Ecu, np.eye(2), atol=1e-8)
    assert rep.contraction_rate == pytest.approx(np.exp(-2.0), rel=1e-3)
    assert rep.ds + rep.dcu == 3


def test_split_fail_without_gap():
    with pytest.raises(SplitFail):
        hy.estimate_splitting(vf.linear(np.diag([1.0, 1.0, 1.0])), np.zeros((1, 3)), 1, 5.0)
    with pytest.raises(ConfigError):
        hy.estimate_splitting(SADDLE3, np.zeros((1, 3)), 1, 2.0)


def test_lorenz_splitting(lorenz_report):
    rep = lorenz_report
    assert rep.contraction_rate == pytest.approx(np.exp(LORENZ_LYAPUNOV[2]), rel=0.1)
    assert rep.residuals["contraction"]["r2"] >= 0.99
    assert rep.domination_rate < 1
    # gap ratio of D phi_5 beyond the oracle exponents with a 50% safety factor
    assert np.exp(rep.log_gaps.min()) > np.exp((-LORENZ_LYAPUNOV[2] - LORENZ_LYAPUNOV[0]) * 2.5)


def test_lorenz_splitting_is_invariant(lorenz_samples, lorenz_report):
    later = [flow.flow_map(L, z, 1.0) for z in lorenz_samples]
    rep2 = hy.estimate_splitting(L, later, 1, 5.0)
    for i in range(len(later)):
        _, M = flow.tangent_map(L, lorenz_report.points[i], 1.0)
        assert hy.subspace_distance(M @ lorenz_report.Es_frames[i], rep2.Es_frames[i]) < 1e-6
        assert hy.subspace_distance(M @ lorenz_report.Ecu_frames[i], rep2.Ecu_frames[i]) < 1e-6


def test_linear_cone_invariance():
    sad = vf.linear(np.diag([-2.0, 1.0]))
    rep = hy.estimate_splitting(sad, np.zeros((1, 2)), 1, 5.0)
    out = hy.cone_invariance_check(sad, rep, 1.0, [1.0])
    assert out["violations"] == 0
    assert out["min_margin"] >= 3.0 - 1e-6
    thin = hy.cone_invariance_check(sad, rep, 1e-6, [1.0])
    assert thin["violations"] == 0
    with pytest.raises(ConfigError):
        hy.cone_invariance_check(sad, rep, 1.0, [0.5])


def test_lorenz_cone_invariance(lorenz_report):
    out = hy.cone_invariance_check(L, lorenz_report, 0.5, [1.0, 2.0, 5.0])
    assert out["violations"] == 0


def test_linear_sectional_rate():
    rep = hy.estimate_splitting(SADDLE3, np.zeros((1, 3)), 1, 5.0)
    out = hy.sectional_expansion_check(SADDLE3, rep, 1, T=10.0)
    assert out["theta"] == pytest.approx(4.0, abs=1e-8)
    assert out["K"] == pytest.approx(1.0, abs=1e-8)


def test_rotation_sectional_rate_is_zero():
    rot = vf.rotation()
    rep = hy.estimate_splitting(rot, np.array([[1.0, 0.0]]), 0, 5.0)
    out = hy.sectional_expansion_check(rot, rep, 1, T=10.0)
    assert abs(out["theta"]) < 0.01


def test_lorenz_sectional_rate(lorenz_report):
    out = hy.sectional_expansion_check(L, lorenz_report, 1, T=20.0)
    assert out["theta"] == pytest.approx(LORENZ_LYAPUNOV[0] + LORENZ_LYAPUNOV[1], rel=0.1)


def test_splitting_csv_roundtrip(tmp_path):
    rep = hy.estimate_splitting(SADDLE3, np.zeros((2, 3)), 1, 5.0)
    p = tmp_path / "split.csv"
    hy.write_splitting_csv(p, rep)
    back = hy.read_splitting_csv(p)
    np.testing.assert_array_equal(back.points, rep.points)
    np.testing.assert_array_equal(back.Es_frames, rep.Es_frames)


# ---------------------------------------------------------------- properties

@settings(max_examples=20, deadline=None)
@given(st.lists(st.floats(-3.0, 3.0), min_size=3, max_size=3, unique=True))
def test_linear_spectrum_sum_is_trace(diag):
    res = hy.lyapunov_spectrum(vf.linear(np.diag(diag)), np.zeros(3), 20.0)
    np.testing.assert_allclose(res.exponents, sorted(diag, reverse=True), atol=1e-3)
    assert res.exponents.sum() == pytest.approx(res.div_average, abs=1e-3)


_ROT = np.linalg.qr(np.arange(1.0, 10.0).reshape(3, 3) ** 1.5)[0]


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 2), st.floats(-3.0, -1.0), st.floats(-0.5, 0.5), st.floats(1.0, 3.0),
       st.permutations(range(3)))
def test_top_exponents_agree_across_k(k, a, b, c, order):
    diag = np.array([a, b, c])[list(order)]
    lin = vf.linear(_ROT @ np.diag(diag) @ _ROT.T)
    full = hy.lyapunov_spectrum(lin, np.zeros(3), 20.0).exponents
    part = hy.lyapunov_spectrum(lin, np.zeros(3), 20.0, k=k).exponents
    np.testing.assert_allclose(part, full[:k], atol=1e-3)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.0, np.pi / 2), st.floats(0.0, np.pi / 2))
def test_subspace_distance_symmetric_and_bounded(a, b):
    u = np.array([[np.cos(a)], [np.sin(a)]])
    v = np.array([[np.cos(b)], [np.sin(b)]])
    d = hy.subspace_distance(u, v)
    assert d == pytest.approx(hy.subspace_distance(v, u))
    assert 0.0 <= d <= 1.0
    assert d == pytest.approx(abs(np.sin(a - b)), abs=1e-12)
