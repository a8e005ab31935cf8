"""Acceptance suite: one test per criterion, each reporting PASS or FAIL."""

import dataclasses
import time

import numpy as np
import pytest

import equivalences as eq
import prox_checks as pc
from parallel_checks import (FAMILIES, consensus_single_dev,
                             lift_vs_parallel, single_term_dev)
from proxsplit.engines import (Algorithm, SolverConfig, fb_step, init_state,
                               make_step, solve, split_roles,
                               validate_params)
from proxsplit.problems import ProblemSpec
from proxsplit.prox import Box, L1, Quadratic, SquaredL2
from proxsplit.spaces import DenseMatrix, Diff1D
from support import beta_of, desk, fejer_worst, lasso, tv
from verdicts import record

A = Algorithm


def _gap(problem, oracle, x):
    return abs(problem.objective(x) - oracle.objective)


# 1 ----------------------------------------------------------------------

def test_c01_equivalence_suite():
    t0 = time.perf_counter()
    devs = {name: max(fn(seed) for seed in range(3))
            for name, fn in eq.IDENTITIES.items()}
    secs = time.perf_counter() - t0
    worst = max(devs.values())
    ok = len(devs) == 10 and worst <= 1e-10 and secs < 10.0
    record(1, ok, f"{len(devs)} identities x 3 seeds x {eq.ITERS} iters, "
           f"worst deviation {worst:.1e} (<= 1e-10), {secs:.2f} s (< 10 s)")
    assert ok, devs


# 2 ----------------------------------------------------------------------

def test_c02_fb_extended_range():
    p, o = lasso(0)
    b = beta_of(p)
    gamma = 1.0 / b
    quad = SolverConfig("FB", gamma=gamma, rho_schedule=1.99,
                        quadratic_mode=True, max_iter=20000)
    d_quad = validate_params(quad, p).delta
    d_gen = validate_params(SolverConfig("FB", gamma=gamma), p).delta
    res = solve(p, quad, oracle=o, gap_tol=1e-8)
    gap = _gap(p, o, res.x)
    ok = (gap <= 1e-8 and res.iterations <= 20000 and d_quad == 2.0
          and d_gen == 1.5 and res.report.theorem_tag == "Thm 2.8")
    record(2, ok, f"FB gamma=1/beta rho=1.99: gap {gap:.1e} (<= 1e-8) after "
           f"{res.iterations} iters (<= 20000); delta quadratic {d_quad}, "
           f"general {d_gen}")
    assert ok


# 3 ----------------------------------------------------------------------

def _boundary(alg, p):
    b = beta_of(p)
    nl = p.terms[0][1].norm_bound
    tau = 1.0 / b
    return dict(tau=tau, sigma=1.0 / (tau * nl ** 2))


def test_c03_boundary_step_sizes():
    lines, ok = [], True
    for kind, (p, o) in (("LASSO n=20", lasso(0, 20)), ("TV1D n=50", tv(0,
                                                                        50))):
        for alg, strict, loose in ((A.CP_I, "Thm 4.1", "Thm 4.2"),
                                   (A.LV, "Thm 3.1", "Thm 3.2")):
            kw = _boundary(alg, p)
            cfg = SolverConfig(alg, rho_schedule=1.0, max_iter=200000, **kw)
            prod = cfg.tau * cfg.sigma * p.terms[0][1].norm_bound ** 2
            rej = not validate_params(cfg, p, theorem=strict).admissible
            acc = validate_params(cfg, p, theorem=loose).admissible
            default = validate_params(cfg, p).theorem_tag
            res = solve(p, cfg, oracle=o, gap_tol=1e-7)
            gap = _gap(p, o, res.x)
            good = (prod == 1.0 and rej and acc and default == loose
                    and gap <= 1e-6)
            ok &= good
            lines.append(f"{alg.value} {kind}: gap {gap:.1e}, "
                         f"rejected {strict} {rej}, accepted {loose} {acc}")
    record(3, ok, "; ".join(lines))
    assert ok


# 4 ----------------------------------------------------------------------

def test_c04_one_step_fb():
    rng = np.random.default_rng(0)
    n, xi = 12, 0.37
    c = rng.normal(size=n)
    f = L1(0.4)
    h = Quadratic(np.eye(n) / xi, c)
    x0 = rng.normal(size=n)
    st = fb_step(init_state(A.FB, split_roles(
        ProblemSpec(f, [], h, n), A.FB), SolverConfig("FB", gamma=xi), x0),
        f, h, xi, 1.0)
    # minimizer of 1/(2 xi) |x|^2 + <c, x> + 0.4 |x|_1: soft threshold
    exact = np.sign(-xi * c) * np.maximum(np.abs(xi * c) - 0.4 * xi, 0.0)
    err = float(np.max(np.abs(st.primary - exact)))
    ok = err <= 1e-12
    record(4, ok, f"FB with Q=(1/xi)Id, gamma=xi: one-step error {err:.1e} "
           f"(<= 1e-12)")
    assert ok


# 5 ----------------------------------------------------------------------

QUAD = (A.FB, A.LV, A.CV_I, A.CV_II)
VARIANTS = [(a, False) for a in A] + [(a, True) for a in QUAD]
_FEJER = {}


def _fejer(alg, quad):
    if (alg, quad) not in _FEJER:
        _FEJER[(alg, quad)] = max(
            fejer_worst(alg, *desk(alg, seed), iters=1000, quad=quad)[0]
            for seed in range(5))
    return _FEJER[(alg, quad)]


@pytest.mark.parametrize("alg,quad", VARIANTS)
def test_c05_fejer(alg, quad):
    assert _fejer(alg, quad) <= 1e-9


def test_c05_fejer_summary():
    expected = len(VARIANTS)
    worst = max(_fejer(a, q) for a, q in VARIANTS)
    ok = len(_FEJER) == expected and worst <= 1e-9
    record(5, ok, f"{len(_FEJER)}/{expected} algorithm variants x 5 seeds x "
           f"1000 iters, worst per-step increase {worst:.1e} (<= 1e-9)")
    assert ok


# 6 ----------------------------------------------------------------------

def _cv_problem(seed=0):
    """Q acts on the first half, L on the second; the box keeps it bounded."""
    rng = np.random.default_rng(seed)
    k = 4
    q = rng.uniform(1.0, 3.0, size=k)
    ell = rng.uniform(0.5, 2.0, size=k)
    Q = np.diag(np.concatenate([q, np.zeros(k)]))
    L = np.diag(np.concatenate([np.zeros(k), ell]))
    c = rng.normal(size=2 * k)
    lam = 0.4
    p = ProblemSpec(Box(-1.0, 1.0), [(L1(lam), DenseMatrix(
        L, norm_bound=float(ell.max())))], Quadratic(Q, c), 2 * k, "cv",
        "custom", {})
    # separable oracle on [-1, 1]: a quadratic coordinate is clipped, an
    # l1 coordinate sits at 0 unless the linear term beats lam * ell
    x = np.empty(2 * k)
    x[:k] = np.clip(-c[:k] / q, -1.0, 1.0)
    x[k:] = np.where(np.abs(c[k:]) > lam * ell, -np.sign(c[k:]), 0.0)
    grid = np.linspace(-1.0, 1.0, 200001)
    for j in range(2 * k):
        if j < k:
            vals = 0.5 * q[j] * grid ** 2 + c[j] * grid
        else:
            vals = lam * ell[j - k] * np.abs(grid) + c[j] * grid
        assert abs(grid[np.argmin(vals)] - x[j]) <= 1e-5
    return p, x, float(q.max()), float(ell.max())


def test_c06_cv_quadratic_extension():
    p, x_star, beta, nl = _cv_problem()
    tau = 1.0 / beta
    sigma = 0.9 / (tau * nl ** 2)
    lines, ok = [], True
    for alg in (A.CV_I, A.CV_II):
        gen = SolverConfig(alg, tau=tau, sigma=sigma, rho_schedule=1.9)
        quad = SolverConfig(alg, tau=tau, sigma=sigma, rho_schedule=1.9,
                            quadratic_mode=True, max_iter=100000,
                            stop_tol=1e-14)
        lhs = tau * (sigma * nl ** 2 + beta / 2)
        r_gen, r_quad = validate_params(gen, p), validate_params(quad, p)
        res = solve(p, quad)
        gap = abs(p.objective(res.x) - p.objective(x_star))
        good = (lhs >= 1 and not r_gen.admissible and r_quad.admissible
                and r_quad.theorem_tag == "Thm 6.2" and gap <= 1e-6)
        ok &= good
        lines.append(f"{alg.value}: tau(sigma|L|^2+beta/2)={lhs:.2f}, "
                     f"general admissible {r_gen.admissible}, quadratic "
                     f"admissible {r_quad.admissible}, gap {gap:.1e}")
    record(6, ok, "; ".join(lines))
    assert ok


# 7 ----------------------------------------------------------------------

class CountingMatrix(DenseMatrix):
    """Dense operator that counts its forward applications."""

    calls = 0

    def _apply(self, x):
        type(self).calls += 1
        return super()._apply(x)


def test_c07_pddr_quadratic():
    p, o = lasso(0)
    Qc = CountingMatrix(p.h.Q.to_dense())
    inst = dataclasses.replace(p, h=Quadratic(Qc, p.h.c, p.h.t))
    b = beta_of(p)
    nl = p.terms[0][1].norm_bound
    tau = 1.9 / b
    lines, ok = [], True
    for alg in (A.PDDR_QUAD_I, A.PDDR_QUAD_II):
        cfg = SolverConfig(alg, tau=tau, sigma=0.99 / (tau * nl ** 2),
                           rho_schedule=1.9, max_iter=100000)
        res = solve(p, cfg, oracle=o, gap_tol=1e-7)
        gap = _gap(p, o, res.x)
        roles = split_roles(inst, alg)
        step = make_step(alg, roles, cfg)
        st = init_state(alg, roles, cfg)
        counts = []
        for i in range(20):
            CountingMatrix.calls = 0
            st = step(st, 1.9)
            counts.append(CountingMatrix.calls)
        good = res.report.admissible and gap <= 1e-6 and set(counts) == {2}
        ok &= good
        lines.append(f"{alg.value}: gap {gap:.1e} after {res.iterations} "
                     f"iters, Q applications per iter {sorted(set(counts))}")
    record(7, ok, "; ".join(lines))
    assert ok


# 8 ----------------------------------------------------------------------

def test_c08_parallel_lifting():
    single = max(single_term_dev(f) for f in FAMILIES)
    cons = max(consensus_single_dev(fam, form) for fam, form in
               (("DR", "I"), ("DR", "II"), ("DY", "I")))
    lifted = max(lift_vs_parallel(M, f) for M in (1, 3) for f in FAMILIES)
    ok = max(single, cons, lifted) <= 1e-10
    record(8, ok, f"M=1 vs single engines {max(single, cons):.1e}, "
           f"M in (1, 3) lift-then-solve vs parallel {lifted:.1e} "
           f"(<= 1e-10, 50 iters, {len(FAMILIES)} families + DR/DY)")
    assert ok


# 9 ----------------------------------------------------------------------

def test_c09_prox_property_suite():
    rng = np.random.default_rng(2024)
    worst = {"moreau": 0.0, "firm": -np.inf, "subgrad": 0.0, "fd": 0.0}
    for kind in pc.KINDS:
        for _ in range(100):
            worst["moreau"] = max(worst["moreau"], pc.moreau_error(kind, rng))
            worst["firm"] = max(worst["firm"],
                                pc.firm_nonexpansive_excess(kind, rng))
            worst["subgrad"] = max(worst["subgrad"],
                                   pc.subgradient_error(kind, rng))
            if kind in pc.SMOOTH:
                worst["fd"] = max(worst["fd"],
                                  pc.gradient_fd_error(kind, rng))
    ok = (worst["moreau"] <= 1e-12 and worst["firm"] <= 1e-10
          and worst["subgrad"] <= 1e-9 and worst["fd"] <= 1e-6)
    record(9, ok, f"{len(pc.KINDS)} kinds x 100 inputs: Moreau "
           f"{worst['moreau']:.1e}, firm-nonexpansive excess "
           f"{worst['firm']:.1e}, subgradient {worst['subgrad']:.1e}, "
           f"finite differences {worst['fd']:.1e}")
    assert ok


# 10 ---------------------------------------------------------------------

def test_c10_pdfp_guard():
    n = 30
    rng = np.random.default_rng(0)
    D = Diff1D(n)
    h = Quadratic(np.eye(n), -rng.normal(size=n))
    tau = 1.2
    sigma = 0.99 / (tau * D.norm_bound ** 2)

    def rep(f, rho):
        p = ProblemSpec(f, [(L1(0.5), D)], h, n)
        return validate_params(SolverConfig("PDFP", tau=tau, sigma=sigma,
                                            rho_schedule=rho), p)
    l1_one, l1_more = rep(L1(0.1), 1.0), rep(L1(0.1), 1.2)
    delta = 2.0 - tau * 1.0 / 2.0
    q_near = rep(SquaredL2(0.5), delta - 1e-3)
    q_over = rep(SquaredL2(0.5), delta + 1e-3)
    ok = (l1_one.admissible and l1_one.rho_pinned
          and l1_one.theorem_tag == "Thm 3.5" and not l1_more.admissible
          and q_near.admissible and q_near.theorem_tag == "Thm 3.4"
          and q_near.delta == delta and not q_over.admissible)
    record(10, ok, f"f=l1: pinned {l1_one.rho_pinned} under "
           f"{l1_one.theorem_tag}, rho=1.2 admissible {l1_more.admissible}; "
           f"f quadratic: delta {q_near.delta} (2-tau*beta/2={delta}), "
           f"rho=delta-1e-3 admissible {q_near.admissible}, rho=delta+1e-3 "
           f"admissible {q_over.admissible}")
    assert ok
