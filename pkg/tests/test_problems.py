import numpy as np
import pytest

from proxsplit.problems import (OracleError, ProblemSpec, build,
                                lasso_enumerate, lasso_homotopy,
                                oracle_solve, tv1d_enumerate,
                                tv1d_taut_string)
from proxsplit.prox import AffineIndicator, L1, Quadratic, Zero
from proxsplit.spaces import Identity

from support import cls, lasso, tv


def _lasso_1d():
    A, y = np.array([[1.0]]), np.array([3.0])
    h = Quadratic(A.T @ A, -A.T @ y, 4.5)
    return ProblemSpec(Zero(), [(L1(1.0), Identity(1))], h, 1, "1-D",
                       "LASSO", {"A": A, "y": y, "lam": 1.0})


def test_lasso_1d_soft_threshold():
    sol = oracle_solve(_lasso_1d())
    assert sol.x_star == pytest.approx([2.0], abs=1e-15)
    assert sol.objective == pytest.approx(0.5 + 2.0)


def test_tv_two_levels():
    y = np.array([0.0, 0.0, 5.0, 5.0])
    x = tv1d_taut_string(y, 0.5)
    # each flat segment moves towards the other by lam / length
    assert np.allclose(x, [0.25, 0.25, 4.75, 4.75], atol=1e-14)
    assert np.allclose(tv1d_enumerate(y, 0.5), x, atol=1e-12)
    assert np.count_nonzero(np.abs(np.diff(x)) > 1e-12) == 1


def test_constrained_ls_symmetry():
    C = np.array([[1.0, 1.0]])
    p = ProblemSpec(AffineIndicator(C, [2.0]), [],
                    Quadratic(np.eye(2)), 2, "sym", "ConstrainedLS",
                    {"A": np.eye(2), "b": np.zeros(2), "C": C,
                     "d": np.array([2.0])})
    assert np.allclose(oracle_solve(p).x_star, [1.0, 1.0], atol=1e-14)


def test_boundary_regularization():
    p = build("LASSO", seed=3, dims=8)
    lam_max = float(np.max(np.abs(p.data["A"].T @ p.data["y"])))
    big = build("LASSO", seed=3, dims=8, reg=lam_max)
    assert np.array_equal(oracle_solve(big).x_star, np.zeros(8))
    t = build("TV1D", seed=2, dims=12, reg=0.0)
    assert np.array_equal(oracle_solve(t).x_star, t.data["y"])


@pytest.mark.parametrize("seed", range(4))
def test_homotopy_matches_enumeration(seed):
    p = build("LASSO", seed=seed, dims=8)
    d = p.data
    x1 = lasso_homotopy(d["A"], d["y"], d["lam"])
    x2 = lasso_enumerate(d["A"], d["y"], d["lam"])
    assert np.allclose(x1, x2, atol=1e-10)


@pytest.mark.parametrize("seed", range(4))
def test_taut_string_matches_enumeration(seed):
    p = build("TV1D", seed=seed, dims=7, reg=0.3)
    x1 = tv1d_taut_string(p.data["y"], 0.3)
    x2 = tv1d_enumerate(p.data["y"], 0.3)
    assert np.allclose(x1, x2, atol=1e-10)


@pytest.mark.parametrize("make", [lasso, tv, cls])
def test_oracle_perturbation(make):
    p, sol = make()
    rng = np.random.default_rng(11)
    f0 = p.objective(sol.x_star)
    for _ in range(100):
        d = rng.normal(size=p.n)
        d *= 1e-3 / np.linalg.norm(d)
        if p.kind == "ConstrainedLS":
            # stay feasible, otherwise the objective is trivially infinite
            C = p.data["C"]
            d -= C.T @ np.linalg.solve(C @ C.T, C @ d)
            d *= 1e-3 / np.linalg.norm(d)
        assert p.objective(sol.x_star + d) > f0


@pytest.mark.parametrize("make", [lasso, tv, cls])
def test_certificate(make):
    assert make()[1].certificate <= 1e-9


def test_build_deterministic_and_json_roundtrip():
    for kind, dims in (("LASSO", 10), ("TV1D", 20), ("ConstrainedLS", 6)):
        a, b = build(kind, seed=5, dims=dims), build(kind, seed=5, dims=dims)
        assert a.to_json() == b.to_json()
        c = ProblemSpec.from_json(a.to_json())
        x = np.random.default_rng(0).normal(size=a.n)
        if kind == "ConstrainedLS":
            x = oracle_solve(a).x_star
        assert c.objective(x) == a.objective(x)


def test_dimension_limits():
    with pytest.raises(ValueError):
        build("TV1D", dims=0)
    with pytest.raises(ValueError):
        build("TV1D", dims=10 ** 6)
    with pytest.raises(ValueError):
        build("Nope")


def test_oracle_error_type():
    assert issubclass(OracleError, RuntimeError)
