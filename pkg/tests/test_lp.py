import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from pwaclf import lp as L

from lp_oracle import enumerate_bases, random_lp


def _ineq(c, A, b, lo=0.0, hi=np.inf):
    return L.LinearProgram.from_inequalities(c, A, b, lo=lo, hi=hi)


def test_single_variable_lower_bound():
    res = L.solve_lp(_ineq([1.0], [[-1.0]], [-1.0], lo=-np.inf))
    assert res.status == "optimal"
    assert res.x[0] == pytest.approx(1.0)


def test_infeasible_pair():
    res = L.solve_lp(_ineq([0.0], [[1.0], [-1.0]], [0.0, -1.0], lo=-np.inf))
    assert res.status == "infeasible"


def test_unbounded():
    res = L.solve_lp(_ineq([-1.0, 0.0], [[0.0, 1.0]], [1.0]))
    assert res.status == "unbounded"


def test_equality_rows():
    lp = L.LinearProgram.from_inequalities([1.0, 2.0], A_eq=[[1.0, 1.0]], b_eq=[3.0])
    res = L.solve_lp(lp)
    np.testing.assert_allclose(res.x, [3.0, 0.0], atol=1e-12)


def test_no_rows_uses_bounds():
    lp = L.LinearProgram.from_inequalities([1.0, -1.0], lo=[-2.0, 0.0], hi=[3.0, 4.0])
    res = L.solve_lp(lp)
    np.testing.assert_allclose(res.x, [-2.0, 4.0])


def test_beale_cycling_example():
    # classic degenerate instance on which textbook Dantzig pricing cycles
    c = [-0.75, 150.0, -0.02, 6.0]
    A = [[0.25, -60.0, -0.04, 9.0], [0.5, -90.0, -0.02, 3.0], [0.0, 0.0, 1.0, 0.0]]
    b = [0.0, 0.0, 1.0]
    res = L.solve_lp(_ineq(c, A, b))
    assert res.status == "optimal"
    assert res.objective == pytest.approx(-0.05, abs=1e-12)


def test_invalid_data():
    with pytest.raises(ValueError, match="NaN"):
        L.LinearProgram.from_inequalities([np.nan], [[1.0]], [1.0])
    with pytest.raises(ValueError, match="bounds"):
        L.LinearProgram.from_inequalities([1.0], lo=[1.0], hi=[0.0])
    with pytest.raises(ValueError, match="unknown LP method"):
        L.solve_lp(_ineq([1.0], [[1.0]], [1.0]), method="ellipsoid")


def test_duals_are_marginals():
    c, A, b = np.array([-1.0, -1.0]), np.array([[1.0, 2.0], [3.0, 1.0]]), np.array([4.0, 6.0])
    res = L.solve_lp(_ineq(c, A, b))
    eps = 1e-6
    for i in range(2):
        bb = b.copy()
        bb[i] += eps
        moved = L.solve_lp(_ineq(c, A, bb)).objective
        assert res.duals[i] == pytest.approx((moved - res.objective) / eps, abs=1e-6)
    assert np.all(res.duals <= 0)


def test_random_lps_match_basis_enumeration():
    rng = np.random.default_rng(7)
    infeasible = 0
    for _ in range(200):
        c, A, b = random_lp(rng)
        ref = enumerate_bases(c, A, b)
        res = L.solve_lp(_ineq(c, A, b))
        if ref is None:
            infeasible += 1
            assert res.status == "infeasible"
        else:
            assert res.status == "optimal"
            assert res.objective == pytest.approx(ref, abs=1e-8)
            kkt = L.kkt_residuals(_ineq(c, A, b), res)
            assert max(kkt.values()) < 1e-7
    assert 0 < infeasible < 200


@pytest.mark.parametrize("variant", L.HIGHS_VARIANTS)
def test_highs_variants_agree_with_simplex(variant):
    rng = np.random.default_rng(3)
    for _ in range(20):
        c, A, b = random_lp(rng)
        lp = _ineq(c, A, b)
        a, h = L.solve_lp(lp), L.solve_lp(lp, method=variant)
        assert a.status == h.status
        if a.status == "optimal":
            assert a.objective == pytest.approx(h.objective, abs=1e-7)


def test_incremental_lp_matches_one_shot():
    rng = np.random.default_rng(11)
    c, A, b = random_lp(rng, max_vars=6, max_rows=12)
    while enumerate_bases(c, A, b) is None:
        c, A, b = random_lp(rng, max_vars=6, max_rows=12)
    inc = L.IncrementalLP(c, np.zeros(len(c)), np.full(len(c), np.inf))
    inc.add_rows(sp.csr_matrix(A[-1:]), b[-1:])
    inc.solve()
    inc.add_rows(sp.csr_matrix(A[:-1]), b[:-1])
    res = inc.solve()
    assert res.status == "optimal"
    assert res.objective == pytest.approx(enumerate_bases(c, A, b), abs=1e-8)


def test_incremental_lp_width_check():
    inc = L.IncrementalLP(np.ones(2), np.zeros(2), np.ones(2))
    with pytest.raises(ValueError, match="row width"):
        inc.add_rows(np.ones((1, 3)), [1.0])


def test_write_lp(tmp_path):
    lp = L.LinearProgram.from_inequalities([1.0, -2.0], [[1.0, 1.0]], [3.0], lo=[0.0, -np.inf])
    path = tmp_path / "p.lp"
    L.solve_lp(lp, dump=path)
    text = path.read_text()
    assert "Minimize" in text and "r0: + 1 x0 + 1 x1 <= 3" in text and "x1 free" in text and "0 <= x0 <= +inf" in text


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_weak_duality_and_complementarity(seed):
    c, A, b = random_lp(np.random.default_rng(seed), max_vars=5, max_rows=8)
    lp = _ineq(c, A, b)
    res = L.solve_lp(lp)
    if res.status == "optimal":
        kkt = L.kkt_residuals(lp, res)
        assert kkt["gap"] < 1e-7 and kkt["complementarity"] < 1e-8


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), scale=st.floats(0.1, 100.0))
def test_objective_scales_with_rhs(seed, scale):
    # positive homogeneity: scaling b scales the optimum of an x >= 0 LP
    c, A, b = random_lp(np.random.default_rng(seed), max_vars=4, max_rows=6)
    r1 = L.solve_lp(_ineq(c, A, b))
    r2 = L.solve_lp(_ineq(c, A, scale * b))
    assert r1.status == r2.status
    if r1.status == "optimal":
        assert r2.objective == pytest.approx(scale * r1.objective, rel=1e-7, abs=1e-9)
