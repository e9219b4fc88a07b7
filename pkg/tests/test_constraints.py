import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dpplkit.constraints import (
    BoxBounds,
    LinearEquality,
    NonlinearEquality,
    TVPenalty,
    conservation_linear,
    conservation_nonlinear_pme,
    hierarchy_constraint,
    load_summation_matrix,
    trapezoid_weights,
    tv_subgradient,
    tv_value,
)
from dpplkit.errors import ConstraintError, InvalidArgumentError
from dpplkit.pdegen import exact_heat, exact_pme
from dpplkit.probdist import make_rng
from oracles import SUM_MATRIX, central_diff

def test_hierarchy_reference_matrix():
    lin = hierarchy_constraint(SUM_MATRIX)
    assert lin.A.shape == (4, 10)
    np.testing.assert_array_equal(lin.A[0], [1, 0, 0, 0, -1, -1, -1, -1, -1, -1])
    assert np.all(lin.b == 0)


def test_hierarchy_single():
    lin = hierarchy_constraint([[1]])
    np.testing.assert_array_equal(lin.A, [[1, -1]])
    assert lin.residual([3.0, 3.0])[0] == 0


def test_hierarchy_random_full_rank():
    rng = make_rng(5)
    S = (rng.uniform(size=(3, 5)) < 0.5).astype(float)
    S[S.sum(axis=1) == 0, 0] = 1
    lin = hierarchy_constraint(S)
    assert np.linalg.matrix_rank(lin.A) == 3


def test_hierarchy_zero_row():
    with pytest.raises(ConstraintError, match="row 1"):
        hierarchy_constraint([[1, 0], [0, 0]])
    with pytest.raises(ConstraintError):
        hierarchy_constraint([[2, 0]])


@settings(max_examples=50, deadline=None)
@given(arrays(float, 6, elements=st.floats(-100, 100)))
def test_coherent_points_in_null_space(bottom):
    lin = hierarchy_constraint(SUM_MATRIX)
    u = np.concatenate([SUM_MATRIX @ bottom, bottom])
    assert np.max(np.abs(lin.A @ u)) <= 1e-12 * max(1.0, np.max(np.abs(bottom)))


def test_linear_equality_validation():
    with pytest.raises(ConstraintError, match="rank"):
        LinearEquality([[1.0, 1.0], [2.0, 2.0]], [0.0, 0.0])
    with pytest.raises(ConstraintError):
        LinearEquality(np.eye(3)[:2].repeat(2, axis=0), np.zeros(4))
    with pytest.raises(ConstraintError):
        LinearEquality([[1.0, 0.0]], [0.0, 1.0])


def test_trapezoid_weights_examples():
    np.testing.assert_allclose(trapezoid_weights([0, 1]), [0.5, 0.5])
    np.testing.assert_allclose(trapezoid_weights([0, 0.5, 1]), [0.25, 0.5, 0.25])
    x = np.linspace(0, 1, 101)
    assert trapezoid_weights(x).sum() == pytest.approx(1.0, abs=1e-15)
    with pytest.raises(InvalidArgumentError):
        trapezoid_weights([0, 1, 1])
    with pytest.raises(InvalidArgumentError):
        trapezoid_weights([0])


def test_trapezoid_matches_numpy():
    x = np.sort(make_rng(1).uniform(0, 3, 17))
    f = np.sin(x)
    assert trapezoid_weights(x) @ f == pytest.approx(np.trapezoid(f, x) if hasattr(np, "trapezoid") else np.trapz(f, x), rel=1e-14)


def test_conservation_heat_zero_rhs():
    x = np.linspace(0, 2 * np.pi, 33)
    lin = conservation_linear("heat", 2.5, x, [0.5, 0.75, 1.0])
    assert lin.A.shape == (3, 3 * 33)
    assert np.all(lin.b == 0)


def test_conservation_pme_rhs():
    x = np.linspace(0, 1, 33)
    lin = conservation_linear("pme", {"m": 2.0}, x, [1.0])
    assert lin.b[0] == pytest.approx(2 ** 1.5 / 3, rel=1e-14)
    assert lin.b[0] == pytest.approx(0.94281, abs=1e-5)


def test_conservation_advection_rhs():
    x = np.linspace(0, 1, 33)
    assert conservation_linear("advection", 1.0, x, [0.0]).b[0] == 0.5
    with pytest.raises(ConstraintError):
        conservation_linear("advection", 2.0, x, [0.3])


def test_conservation_stefan_rhs_positive():
    x = np.linspace(0, 1, 33)
    lin = conservation_linear("stefan", 0.6, x, [0.2, 0.5])
    assert np.all(lin.b > 0) and lin.b[1] > lin.b[0]


def test_conservation_rows_disjoint():
    x = np.linspace(0, 1, 9)
    t = np.linspace(0, 1, 5)
    lin = conservation_linear("pme", 2.0, x, t[[1, 3]], t_grid=t)
    assert lin.A.shape == (2, 45)
    np.testing.assert_allclose(lin.A[0, 9:18], trapezoid_weights(x))
    np.testing.assert_allclose(lin.A[1, 27:36], trapezoid_weights(x))
    assert np.count_nonzero(lin.A) == 18


def test_conservation_errors():
    x = np.linspace(0, 1, 9)
    with pytest.raises(InvalidArgumentError):
        conservation_linear("burgers", 1.0, x, [0.1])
    with pytest.raises(ConstraintError):
        conservation_linear("pme", 2.0, x, [0.33], t_grid=[0.0, 0.5, 1.0])


def test_heat_constraint_refinement():
    # Periodic integrand: the trapezoid rule is exact to round-off at any grid.
    for nx in (16, 32, 64):
        x = np.linspace(0, 2 * np.pi, nx)
        lin = conservation_linear("heat", 2.0, x, [0.3])
        u = exact_heat(0.3, x, 2.0)
        assert np.max(np.abs(lin.residual(u))) <= 1e-14


def _circle():
    return NonlinearEquality(q=1, n=2, h=lambda u: np.array([u @ u - 1]), jac_h=lambda u: 2 * u[None, :])


def test_nonlinear_self_test():
    assert _circle().self_test(make_rng(0).normal(size=(5, 2))) < 1e-8
    bad = NonlinearEquality(q=1, n=2, h=lambda u: np.array([u @ u]), jac_h=lambda u: u[None, :])
    with pytest.raises(ConstraintError):
        bad.self_test([[1.0, 2.0]])


def test_linear_as_nonlinear():
    lin = LinearEquality([[1.0, 2.0, 0.0]], [1.0])
    nl = lin.as_nonlinear()
    nl.self_test(make_rng(2).normal(size=(3, 3)))
    assert nl.h(np.array([1.0, 0.0, 5.0]))[0] == 0


def _pme_field(m, x, t):
    tt, xx = np.meshgrid(t, x, indexing="ij")
    return exact_pme(tt, xx, m)


def test_pme_nonlinear_zero_field():
    x = np.linspace(0, 1, 16)
    t = np.linspace(0.5, 1, 6)
    nl = conservation_nonlinear_pme(2.0, x, t)
    assert np.all(nl.h(np.zeros(nl.n)) == 0)


def test_pme_nonlinear_jacobian_fd():
    x = np.linspace(0, 1, 12)
    t = np.linspace(0.6, 1, 5)
    anchor = (0.5, exact_pme(0.5, x, 2.5) + 0.1)
    rng = make_rng(8)
    for kwargs in ({}, {"anchor": anchor}, {"anchor": anchor, "dirichlet": True}):
        nl = conservation_nonlinear_pme(2.5, x, t, **kwargs)
        u = rng.uniform(0.2, 1.5, nl.n)
        assert nl.self_test([u], rtol=1e-5) < 1e-5


def test_pme_nonlinear_hessian_fd():
    x = np.linspace(0, 1, 10)
    t = np.linspace(0.6, 1, 4)
    nl = conservation_nonlinear_pme(3.0, x, t, anchor=(0.5, exact_pme(0.5, x, 3.0)))
    rng = make_rng(9)
    u = rng.uniform(0.2, 1.5, nl.n)
    lam = rng.normal(size=nl.q)
    H = nl.hess_lag(u, lam)
    fd = central_diff(lambda v: nl.jac_h(v).T @ lam, u, step=1e-6)
    np.testing.assert_allclose(H, fd, atol=1e-6 * max(1.0, np.abs(fd).max()))


def test_pme_nonlinear_refinement():
    # The front x = t is a kink of order 1/m in u, so the spatial trapezoid
    # error decays like h^(1 + 1/m) rather than h^2.
    m = 2.0
    errs = []
    for N in (64, 128, 256):
        x = np.linspace(0, 1, N)
        t = np.linspace(0, 1, N)
        U = _pme_field(m, x, t)
        nl = conservation_nonlinear_pme(m, x, t[N // 2:], anchor=(t[N // 2 - 1], U[N // 2 - 1]))
        h = nl.h(U[N // 2:].ravel())
        errs.append(abs(h[np.argmin(np.abs(t[N // 2:] - 0.75))]))
    assert errs[1] < errs[0] and errs[2] < errs[1]
    assert errs[0] / errs[1] > 2.0 and errs[1] / errs[2] > 2.0


def test_pme_nonlinear_residual_small_on_exact():
    m = 2.0
    x = np.linspace(0, 1, 64)
    t = np.linspace(0, 1, 64)
    U = _pme_field(m, x, t)
    nl = conservation_nonlinear_pme(m, x, t[51:], anchor=(t[50], U[50]))
    assert np.max(np.abs(nl.h(U[51:].ravel()))) < 5 * (1 / 64) ** 1.5


def test_pme_nonlinear_clamp_counter():
    x = np.linspace(0, 1, 8)
    t = np.linspace(0, 1, 3)
    nl = conservation_nonlinear_pme(2.5, x, t)
    u = np.full(nl.n, -0.1)
    nl.h(u)
    assert nl.diagnostics["clamps"] > 0


def test_pme_nonlinear_slice_rules():
    x = np.linspace(0, 1, 8)
    t = np.linspace(0, 1, 3)
    with pytest.raises(ConstraintError):
        conservation_nonlinear_pme(2.0, x, t, t_slices=[0.0])
    nl = conservation_nonlinear_pme(2.0, x, t, dirichlet=True)
    assert nl.q == 6


def test_tv_examples():
    assert tv_value(np.ones((3, 4))) == 0
    assert tv_value([[1, 1, 0, 0]]) == 1
    u = np.sort(make_rng(3).normal(size=10))
    assert tv_value(u[None, :]) == pytest.approx(u[-1] - u[0], rel=1e-14)


def test_tv_subgradient_examples():
    assert np.all(tv_subgradient(np.ones((2, 3))) == 0)
    np.testing.assert_array_equal(tv_subgradient([[0.0, 1.0]]), [[-1.0, 1.0]])


def test_tv_subgradient_fd():
    u = make_rng(4).normal(size=(3, 7))
    g = tv_subgradient(u)
    fd = central_diff(lambda v: tv_value(v), u, step=1e-7)
    np.testing.assert_allclose(g, fd, atol=1e-6)


@settings(max_examples=50, deadline=None)
@given(arrays(float, (2, 6), elements=st.floats(-10, 10)), arrays(float, (2, 6), elements=st.floats(-10, 10)))
def test_tv_convex(u, v):
    assert tv_value(0.5 * (u + v)) <= 0.5 * tv_value(u) + 0.5 * tv_value(v) + 1e-9


def test_tv_penalty_type():
    p = TVPenalty(0.5, 2, 3)
    u = np.array([0.0, 1.0, 1.0, 2.0, 2.0, 0.0])
    assert p.value(u) == pytest.approx(0.5 * 3)
    assert p.grad(u).shape == (6,)
    with pytest.raises(InvalidArgumentError):
        TVPenalty(-1.0, 2, 3)


def test_box_validation():
    BoxBounds([-np.inf, 0.0], [np.inf, 0.0])
    with pytest.raises(ConstraintError):
        BoxBounds([1.0], [0.0])


def test_load_summation_matrix(tmp_path):
    p = tmp_path / "s.csv"
    p.write_text("\n".join(",".join(str(int(v)) for v in row) for row in SUM_MATRIX) + "\n")
    np.testing.assert_array_equal(load_summation_matrix(p), SUM_MATRIX)
    h = tmp_path / "h.csv"
    h.write_text("a,b,c,d,e,f\n" + p.read_text())
    np.testing.assert_array_equal(load_summation_matrix(h, header=True), SUM_MATRIX)


def test_load_summation_matrix_errors(tmp_path):
    e = tmp_path / "e.csv"
    e.write_text("")
    with pytest.raises(ConstraintError):
        load_summation_matrix(e)
    b = tmp_path / "b.csv"
    b.write_text("1,2\n0,1\n")
    with pytest.raises(ConstraintError, match="non-binary"):
        load_summation_matrix(b)
    r = tmp_path / "r.csv"
    r.write_text("1,0\n1\n")
    with pytest.raises(ConstraintError, match="entries"):
        load_summation_matrix(r)
