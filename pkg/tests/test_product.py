import numpy as np
import pytest

from proxsplit.engines import SolverConfig, solve
from proxsplit.problems import ProblemSpec
from proxsplit.product import (BlockProxError, ConsensusFun, block_sum,
                               consensus_state, lift,
                               parallel_consensus_step, parallel_init,
                               parallel_primal_dual_step, report_duals)
from proxsplit.prox import (Box, ContractViolation, Custom, L1, ProxError,
                            Quadratic, SquaredL2, Zero)
from proxsplit.spaces import BlockVector, Identity, estimate_norm

from parallel_checks import (FAMILIES, consensus_single_dev,
                             lift_vs_parallel, single_term_dev)
from parallel_checks import problem as _problem
from parallel_checks import shifted_abs as _shifted_abs


def test_lift_single_term_is_identity():
    p = _problem(1, f=Box(-2, 2))
    lp = lift(p, "Stacked")
    q = lp.as_problem()
    g, L = q.terms[0]
    rng = np.random.default_rng(0)
    x = rng.normal(size=p.n)
    u = BlockVector([rng.normal(size=p.n - 1)], [1.0])
    assert np.array_equal(L.apply(x).blocks[0], p.terms[0][1].apply(x))
    assert np.array_equal(L.adjoint(u), p.terms[0][1].adjoint(u.blocks[0]))
    assert np.array_equal(g.prox(0.7, u).blocks[0],
                          p.terms[0][0].prox(0.7, u.blocks[0]))
    c = lift(ProblemSpec(Box(-1, 1), [(L1(1), Identity(3))], Zero(), 3),
             "Consensus")
    F, G, _ = c.consensus_functions()
    xb = BlockVector([np.array([3.0, 0.2, -4.0])], [1.0])
    assert np.array_equal(F.prox(1.0, xb).blocks[0], [1.0, 0.2, -1.0])


def test_consensus_prox_averages():
    F = ConsensusFun(Zero(), [0.5, 0.5])
    out = F.prox(1.0, BlockVector([[0.0], [2.0]], [0.5, 0.5]))
    assert [b[0] for b in out.blocks] == [1.0, 1.0]


def test_stacked_adjoint_example():
    lp = lift(ProblemSpec(Zero(), [(L1(1), Identity(2)),
                                   (L1(1), Identity(2))], Zero(), 2))
    u = BlockVector([[2.0, 2.0], [4.0, 4.0]], [0.5, 0.5])
    assert np.array_equal(lp.stacked_operator().adjoint(u), [3.0, 3.0])


def test_lift_contract():
    p = _problem(2)
    with pytest.raises(ContractViolation):
        lift(p, "Consensus")
    q = ProblemSpec(Zero(), [(L1(1), Identity(2)), (L1(1), Identity(2))],
                    Zero(), 2)
    with pytest.raises(ValueError):
        lift(q, "Consensus", weights=[0.5, 0.6])
    with pytest.raises(ValueError):
        lift(q, "Stacked", weights=[1.0, 0.0])
    with pytest.raises(ValueError):
        lift(q, "Stacked", weights=[1.0, -1.0])
    lift(q, "Consensus", weights=[0.3, 0.7])
    assert np.allclose(lift(q).sigmas(2.0), [1.0, 1.0])


@pytest.mark.parametrize("family,form", [("DR", "I"), ("DR", "II"),
                                         ("DY", "I")])
def test_consensus_single_block_is_dr_and_dy(family, form):
    assert consensus_single_dev(family, form) <= 1e-10


def test_consensus_symmetry():
    s = np.array([0.3, -1.0, 2.0])
    st = consensus_state([s, s.copy()], [0.5, 0.5])
    g = L1(0.2)
    for _ in range(20):
        st = parallel_consensus_step(st, Box(-1, 1), [g, g], None, 0.5,
                                     [0.5, 0.5], "DR", "I", 1.5)
        assert np.array_equal(st.primary.blocks[0], st.primary.blocks[1])


@pytest.mark.parametrize("family", ["DR", "DY"])
def test_consensus_median_desk_problem(family):
    # min over [lo, hi] of |x - a| + 2|x - b| (+ eps/2 (x - c)^2 for DY)
    a = np.array([0.0, 1.0, -2.0])
    b = np.array([1.0, -1.0, 3.0])
    lo, hi = -1.5, 2.0
    eps = 0.05 if family == "DY" else 0.0
    c = np.array([0.5, 0.5, 0.5])
    h = Quadratic(eps * np.eye(3), -eps * c) if eps else None
    # oracle: brute-force 1-D grid per coordinate
    grid = np.linspace(lo, hi, 350001)
    oracle = np.array([grid[np.argmin(np.abs(grid - a[k]) +
                                      2 * np.abs(grid - b[k]) +
                                      0.5 * eps * (grid - c[k]) ** 2)]
                       for k in range(3)])
    w = [0.5, 0.5]
    st = consensus_state([np.zeros(3), np.zeros(3)], w)
    for _ in range(3000):
        st = parallel_consensus_step(st, Box(lo, hi),
                                     [_shifted_abs(a), _shifted_abs(b, 2.0)],
                                     h, 0.5, w, family, "I", 1.5)
    assert np.max(np.abs(st.half["x"] - oracle)) <= 2e-5


@pytest.mark.parametrize("family", FAMILIES)
def test_parallel_single_term_matches_engine(family):
    assert single_term_dev(family) <= 1e-10


@pytest.mark.parametrize("M", [1, 2, 3])
@pytest.mark.parametrize("family", FAMILIES)
def test_lift_then_solve_equals_parallel(M, family):
    assert lift_vs_parallel(M, family) <= 1e-10


def test_pd3o_parallel_is_consensus_dy():
    rng = np.random.default_rng(4)
    n, M = 5, 3
    w = np.array([0.2, 0.3, 0.5])
    gs = [L1(0.3), Box(-0.4, 0.6), _shifted_abs(rng.normal(size=n))]
    f = Box(-1.0, 1.0)
    h = Quadratic(np.eye(n), rng.normal(size=n))
    tau = 0.7
    terms = [(g, Identity(n)) for g in gs]
    us = [rng.normal(size=n) for _ in range(M)]
    x0 = rng.normal(size=n)
    a = parallel_init("PD3O", terms, x0, tau, us)
    # s_m = s~ - (tau / w_m) u_m
    b = consensus_state([a.primary - tau / w[m] * us[m] for m in range(M)], w)
    for _ in range(50):
        a = parallel_primal_dual_step(a, f, terms, h, tau, w / tau, "PD3O",
                                      1.2)
        b = parallel_consensus_step(b, f, gs, h, tau, w, "DY", "I", 1.2)
        assert np.max(np.abs(a.half["x"] - b.half["x"])) <= 1e-10
        for m in range(M):
            sm = a.primary - tau / w[m] * a.duals[m]
            assert np.max(np.abs(sm - b.primary.blocks[m])) <= 1e-10


def test_permutation_bitwise():
    rng = np.random.default_rng(5)
    n = 6
    w = np.array([0.2, 0.3, 0.5])
    gs = [L1(0.3), Box(-0.4, 0.6), SquaredL2(2.0)]
    s0 = [rng.normal(size=n) for _ in range(3)]
    perm = [2, 0, 1]
    a = consensus_state(s0, w)
    b = consensus_state([s0[k] for k in perm], w[perm])
    for _ in range(40):
        a = parallel_consensus_step(a, Box(-1, 1), gs, None, 0.5, w, "DR",
                                    "I", 1.5)
        b = parallel_consensus_step(b, Box(-1, 1), [gs[k] for k in perm],
                                    None, 0.5, w[perm], "DR", "I", 1.5)
        assert np.array_equal(a.half["x"], b.half["x"])
        for i, k in enumerate(perm):
            assert np.array_equal(a.primary.blocks[k], b.primary.blocks[i])
    p = _problem(3, seed=6, f=Box(-2, 2))
    terms = p.terms
    sig = np.array([0.1, 0.2, 0.3])
    a = parallel_init("CV_I", terms, np.ones(p.n), 0.01)
    b = parallel_init("CV_I", [terms[k] for k in perm], np.ones(p.n), 0.01)
    for _ in range(40):
        a = parallel_primal_dual_step(a, p.f, terms, p.h, 0.01, sig, "CV_I",
                                      1.2)
        b = parallel_primal_dual_step(b, p.f, [terms[k] for k in perm], p.h,
                                      0.01, sig[perm], "CV_I", 1.2)
        assert np.array_equal(a.primary, b.primary)
        for i, k in enumerate(perm):
            assert np.array_equal(a.duals[k], b.duals[i])


def test_block_sum_order_independent():
    rng = np.random.default_rng(7)
    vs = [rng.normal(size=4) * 10 ** k for k in range(-8, 9, 4)]
    c = rng.random(len(vs))
    ref = block_sum(vs, c)
    for _ in range(10):
        idx = rng.permutation(len(vs))
        assert np.array_equal(block_sum([vs[i] for i in idx], c[idx]), ref)


def test_reported_duals_are_optimal():
    base = _problem(2, seed=8)
    lp = lift(base, "Stacked")
    q = lp.as_problem()
    nb = estimate_norm(q.terms[0][1])
    tau = 1.0 / base.h.lipschitz
    cfg = SolverConfig("LV", tau=tau, sigma=1.0 / (tau * nb ** 2),
                       rho_schedule=1.2, max_iter=50000, stop_tol=1e-12)
    res = solve(q, cfg, norms={"L": nb})
    assert res.status == "converged"
    x = res.x
    u = report_duals(lp, res.state.half["u"])
    (g1, L1_), (g2, L2_) = base.terms
    # stationarity in the original metric: grad h + sum L_m^* u_m = 0
    r = base.h.grad(x) + L1_.adjoint(u[0]) + L2_.adjoint(u[1])
    assert np.linalg.norm(r) <= 1e-9
    # u_m in dg_m(L_m x), in resolvent form to tolerate rounding near kinks
    for g, L, um in ((g1, L1_, u[0]), (g2, L2_, u[1])):
        y = L.apply(x)
        assert np.linalg.norm(y - g.prox(1.0, y + um)) <= 1e-9


def test_threads_match_and_guard():
    p = _problem(3, seed=9, f=Box(-2, 2))
    sig = [0.1, 0.2, 0.3]
    a = b = parallel_init("CP_I", p.terms, np.ones(p.n), 0.01)
    for _ in range(10):
        a = parallel_primal_dual_step(a, p.f, p.terms, p.h, 0.01, sig,
                                      "CP_I", 1.0, threads=1)
        b = parallel_primal_dual_step(b, p.f, p.terms, p.h, 0.01, sig,
                                      "CP_I", 1.0, threads=3)
        assert np.array_equal(a.primary, b.primary)
    unsafe = Custom(lambda t, x: x)
    st = consensus_state([np.zeros(2), np.zeros(2)], [0.5, 0.5])
    with pytest.raises(ContractViolation):
        parallel_consensus_step(st, Zero(), [L1(1), unsafe], None, 1.0,
                                [0.5, 0.5], threads=2)
    with pytest.raises(ContractViolation):
        lift(ProblemSpec(Zero(), [(L1(1), Identity(2)),
                                  (unsafe, Identity(2))], Zero(), 2),
             threads=2).block_g()


def test_block_error_is_tagged():
    def boom(tau, x):
        raise ProxError("no")
    st = consensus_state([np.zeros(2), np.zeros(2)], [0.5, 0.5])
    with pytest.raises(BlockProxError) as err:
        parallel_consensus_step(st, Zero(), [L1(1), Custom(boom)], None, 1.0,
                                [0.5, 0.5])
    assert err.value.block == 1
