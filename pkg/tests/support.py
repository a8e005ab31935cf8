"""Shared builders for the test suite."""

from functools import lru_cache

import numpy as np

from proxsplit.engines import (Algorithm, SolverConfig, init_state,
                               make_step, metric_distance, reference_state,
                               split_roles, validate_params)
from proxsplit.problems import ProblemSpec, build, oracle_solve
from proxsplit.prox import LinearTerm, Quadratic, Zero
from proxsplit.spaces import DenseMatrix


@lru_cache(maxsize=None)
def lasso(seed=0, n=20):
    p = build("LASSO", seed=seed, dims=(n, n))
    return p, oracle_solve(p)


@lru_cache(maxsize=None)
def tv(seed=0, n=50):
    p = build("TV1D", seed=seed, dims=n)
    return p, oracle_solve(p)


@lru_cache(maxsize=None)
def cls(seed=0):
    p = build("ConstrainedLS", seed=seed)
    return p, oracle_solve(p)


def beta_of(problem):
    return float(problem.h.smooth_info.lipschitz)


def norm_of(problem):
    return problem.terms[0][1].norm_bound if problem.terms else 1.0


def step_sizes(alg, problem, quad=False):
    """Admissible step sizes used throughout the tests."""
    alg = Algorithm.parse(alg)
    b, nl = beta_of(problem), norm_of(problem)
    b = b if b > 0 else 1.0
    t = 1.0 / b
    A = Algorithm
    if quad and alg is A.LV:
        return dict(tau=t, sigma=1.0 / (t * nl ** 2))
    table = {
        A.FB: dict(gamma=t), A.PPA: dict(gamma=1.0),
        A.DR: dict(tau=t), A.ADMM: dict(tau=t), A.ADMM_ALT: dict(tau=t),
        A.LIFTED_ADMM: dict(tau=t), A.DY: dict(tau=1.5 * t),
        A.CP_I: dict(tau=t, sigma=1.0 / (t * nl ** 2)),
        A.CP_II: dict(tau=t, sigma=1.0 / (t * nl ** 2)),
        A.PMM: dict(tau=t, sigma=1.0 / (t * nl ** 2)),
        A.LV: dict(tau=1.5 * t, sigma=1.0 / (1.5 * t * nl ** 2)),
        A.PDFP: dict(tau=1.5 * t, sigma=0.99 / (1.5 * t * nl ** 2)),
        A.CV_I: dict(tau=0.5 * t, sigma=0.99 * b / nl ** 2),
        A.CV_II: dict(tau=0.5 * t, sigma=0.99 * b / nl ** 2),
        A.PD3O: dict(tau=1.5 * t, sigma=1.0 / (1.5 * t * nl ** 2)),
        A.PDDR_QUAD_I: dict(tau=1.9 * t, sigma=0.99 / (1.9 * t * nl ** 2)),
        A.PDDR_QUAD_II: dict(tau=1.9 * t, sigma=0.99 / (1.9 * t * nl ** 2)),
        A.GCP: dict(tau=t, sigma=1.0 / (t * nl ** 2), eta=1.0 / t),
        A.EGCP: dict(tau=t, sigma=0.99 / (t * nl ** 2), eta=0.99 / t),
    }
    return table[alg]


def config(alg, problem, rho=None, quad=False, max_iter=1000, stop_tol=0.0,
           margin=0.05):
    """Admissible configuration; ``rho`` defaults to ``delta - margin``."""
    kw = step_sizes(alg, problem, quad)
    if rho is None:
        probe = SolverConfig(alg, quadratic_mode=quad, **kw)
        rep = validate_params(probe, problem)
        rho = 1.0 if rep.rho_pinned else rep.delta - margin
    cfg = SolverConfig(alg, rho_schedule=rho, quadratic_mode=quad,
                       max_iter=max_iter, stop_tol=stop_tol, **kw)
    rep = validate_params(cfg, problem)
    if not rep.admissible:
        raise AssertionError(f"test config rejected: {rep.violated}")
    return cfg


def flat(blocks):
    out = []
    for b in blocks:
        if hasattr(b, "blocks"):
            out.extend(np.ravel(x) for x in b.blocks)
        else:
            out.append(np.ravel(b))
    return np.concatenate(out) if out else np.zeros(0)


def max_dev(a, b):
    return float(np.max(np.abs(flat(a) - flat(b))))


def _ppa_problem(seed):
    """``min 1/2 x'Qx + c'x`` alone, solved by a linear solve."""
    rng = np.random.default_rng(100 + seed)
    B = rng.normal(size=(12, 12))
    Q = B @ B.T / 12 + 0.1 * np.eye(12)
    c = rng.normal(size=12)
    p = ProblemSpec(Zero(), [], Quadratic(Q, c), 12, "ppa", "custom", {})
    return p, np.linalg.solve(Q, -c), None


def _pmm_problem(seed):
    """``min 1/2 ||Ax - y||^2 + <c, x>`` with the square in the term."""
    rng = np.random.default_rng(200 + seed)
    A = rng.normal(size=(15, 10)) / np.sqrt(15)
    y, c = rng.normal(size=15), 0.3 * rng.normal(size=10)
    x = np.linalg.solve(A.T @ A, A.T @ y - c)
    L = DenseMatrix(A)
    L = L.with_norm_bound(float(np.linalg.norm(A, 2)) * (1 + 1e-9))
    p = ProblemSpec(Zero(), [(Quadratic(np.eye(15), -y), L)],
                    LinearTerm(c), 10, "pmm", "custom", {})
    return p, x, A @ x - y


def desk(alg, seed, kind="LASSO"):
    """Problem, primal solution and term dual suited to `alg`."""
    alg = Algorithm.parse(alg)
    if alg is Algorithm.PPA:
        return _ppa_problem(seed)
    if alg is Algorithm.PMM:
        return _pmm_problem(seed)
    p, o = lasso(seed) if kind == "LASSO" else tv(seed)
    return p, o.x_star, o.duals[0]


def fejer_worst(alg, problem, x_star, u_star, iters=1000, quad=False,
                buffered=False):
    """Largest one-step increase of the metric distance to the solution."""
    cfg = config(alg, problem, quad=quad, max_iter=iters)
    roles = split_roles(problem, alg)
    ref = reference_state(alg, roles, cfg, x_star, u_star, buffered)
    step = make_step(alg, roles, cfg, buffered)
    st = init_state(alg, roles, cfg, buffered=buffered)
    d0 = metric_distance(alg, roles, cfg, st, ref, buffered)
    worst = -np.inf
    for i in range(iters):
        st = step(st, cfg.rho_at(i))
        d = metric_distance(alg, roles, cfg, st, ref, buffered)
        if not np.isfinite(d):
            raise AssertionError(f"{alg} diverged at iteration {i}")
        worst = max(worst, d - d0)
        d0 = d
    return worst, d


def fixed_point_dev(alg, problem, x_star, u_star, quad=False,
                    buffered=False):
    cfg = config(alg, problem, quad=quad)
    roles = split_roles(problem, alg)
    ref = reference_state(alg, roles, cfg, x_star, u_star, buffered)
    one = make_step(alg, roles, cfg, buffered)(ref, cfg.rho_at(0))
    return max_dev(one.blocks(), ref.blocks())
