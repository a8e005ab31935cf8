"""Command-line front end: validate, run, and write a trace and a report.

Usage::

    proxsplit run --problem lasso --algorithm cp --tau 1/beta \\
        --sigma "1/(tau*L**2)" --rho 1.9 --out runs/cp
    proxsplit recommend --problem lasso

Step sizes accept arithmetic on the numbers ``beta`` (Lipschitz constant
of ``grad h``), ``L`` and ``K`` (operator-norm bounds) and on the step
sizes given before them (``tau``, then ``sigma``, ``eta``, ``gamma``).

Exit status: 0 converged, 1 bad configuration, 2 iteration limit reached,
3 parameters rejected by the validator, 4 divergence.
"""

import argparse
import ast
import csv
import json
import operator
import os
import sys
import time
from pathlib import Path

import numpy as np

from .engines import (Algorithm, DivergenceError, NormBoundMissing,
                      SolverConfig, init_state, make_step, metric_distance,
                      primal_estimate, reference_state, relaxed_drive,
                      split_roles, validate_params)
from .problems import OracleError, ProblemSpec, build, oracle_solve
from .product import lift, report_duals
from .prox import ContractViolation
from .spaces import DenseMatrix, estimate_norm

EXIT_OK, EXIT_CONFIG, EXIT_MAX_ITER, EXIT_REJECTED, EXIT_DIVERGED = 0, 1, 2, 3, 4
CSV_HEADER = ["iter", "residual", "objective", "dist_P", "seconds"]
RECOMMEND_EPS = 0.01
BUILTIN = {"lasso": "LASSO", "tv1d": "TV1D", "constrainedls": "ConstrainedLS"}


class ConfigError(ValueError):
    """The run configuration cannot be used."""


_OPS = {ast.Add: operator.add, ast.Sub: operator.sub, ast.Mult: operator.mul,
        ast.Div: operator.truediv, ast.Pow: operator.pow,
        ast.USub: operator.neg, ast.UAdd: operator.pos}


def eval_expr(text, names):
    """Evaluate an arithmetic expression over numbers and `names`."""
    def ev(node):
        if isinstance(node, ast.Expression):
            return ev(node.body)
        if isinstance(node, ast.Constant) and isinstance(node.value,
                                                         (int, float)):
            return float(node.value)
        if isinstance(node, ast.Name):
            if node.id not in names or names[node.id] is None:
                raise ConfigError(f"unknown name {node.id!r} in {text!r}")
            return float(names[node.id])
        if isinstance(node, ast.BinOp) and type(node.op) in _OPS:
            return _OPS[type(node.op)](ev(node.left), ev(node.right))
        if isinstance(node, ast.UnaryOp) and type(node.op) in _OPS:
            return _OPS[type(node.op)](ev(node.operand))
        raise ConfigError(f"unsupported expression {text!r}")
    try:
        tree = ast.parse(str(text), mode="eval")
    except SyntaxError as exc:
        raise ConfigError(f"cannot parse {text!r}") from exc
    try:
        return ev(tree)
    except ZeroDivisionError as exc:
        raise ConfigError(f"division by zero in {text!r}") from exc


def parse_rho(text):
    """Constant ``"1.9"`` or ramp ``"a:b:k"`` (linear from a to b over k
    iterations, then b)."""
    parts = str(text).split(":")
    try:
        if len(parts) == 1:
            return float(parts[0])
        if len(parts) == 3:
            a, b, k = float(parts[0]), float(parts[1]), int(parts[2])
        else:
            raise ValueError
    except ValueError:
        raise ConfigError(f"--rho expects a number or a:b:ramp, got {text!r}")
    if k <= 0:
        raise ConfigError("the ramp length must be positive")

    def schedule(i):
        return a + (b - a) * min(i, k) / k
    schedule.spec = str(text)
    return schedule


def _attach_norms(problem):
    """Give every dense operator a certified norm bound."""
    terms = []
    for g, L in problem.terms:
        if L.norm_bound is None and isinstance(L, DenseMatrix):
            L = L.with_norm_bound(estimate_norm(L))
        terms.append((g, L))
    problem.terms = terms
    return problem


def load_problem(source, seed, dims=None, reg=None):
    """Built-in kind name or path to a JSON problem file."""
    key = str(source).lower()
    if key in BUILTIN:
        return build(BUILTIN[key], seed=seed, dims=dims, reg=reg)
    path = Path(source)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read problem file {source!r}: {exc}")
    try:
        return ProblemSpec.from_json(text)
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"invalid problem file {source!r}: {exc}")


def _config_defaults(path):
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read config {path!r}: {exc}")
    if not isinstance(data, dict):
        raise ConfigError("the config file must hold a JSON object")
    return {k.replace("-", "_"): v for k, v in data.items()}


def _parse_dims(text):
    if text is None:
        return None
    if isinstance(text, (list, tuple)):
        vals = [int(v) for v in text]
    else:
        try:
            vals = [int(v) for v in str(text).split(",")]
        except ValueError:
            raise ConfigError(f"--dims expects integers, got {text!r}")
    return vals[0] if len(vals) == 1 else tuple(vals)


def _names(problem, roles):
    beta = float(roles.h.smooth_info.lipschitz) or float(
        problem.h.smooth_info.lipschitz) or None
    return {"beta": beta, "L": roles.L.norm_bound,
            "K": None if roles.K is None else roles.K.norm_bound}


def _resolve(args):
    """Problem, roles-ready problem, config and the oracle from the args."""
    seed = args.seed
    env = os.environ.get("PROXSPLIT_SEED")
    if env is not None:
        try:
            seed = int(env)
        except ValueError:
            raise ConfigError(f"PROXSPLIT_SEED must be an integer, got {env!r}")
    if args.problem is None:
        raise ConfigError("--problem is required")
    base = _attach_norms(load_problem(args.problem, seed,
                                      _parse_dims(args.dims), args.reg))
    alg = Algorithm.parse(args.algorithm)
    problem, lifted = base, None
    if len(base.terms) > 1:
        lifted = lift(base, "Stacked", threads=args.threads)
        problem = lifted.as_problem()
    roles = split_roles(problem, alg)
    names = _names(problem, roles)
    steps = {}
    for key in ("tau", "sigma", "eta", "gamma"):
        val = getattr(args, key)
        if val is not None:
            steps[key] = eval_expr(val, {**names, **steps})
    cfg = SolverConfig(alg, rho_schedule=parse_rho(args.rho),
                       max_iter=args.max_iter, stop_tol=args.tol,
                       quadratic_mode=args.quadratic_mode, **steps)
    oracle = None
    if lifted is None:
        try:
            oracle = oracle_solve(base)
        except (OracleError, ValueError, NotImplementedError):
            oracle = None
    return base, problem, lifted, roles, cfg, oracle, seed


def _fmt(v):
    return "" if v is None else repr(float(v))


def cmd_run(args):
    out = Path(args.out)
    try:
        base, problem, lifted, roles, cfg, oracle, seed = _resolve(args)
        report = validate_params(cfg, problem)
    except (ConfigError, ContractViolation, NormBoundMissing, ValueError,
            TypeError) as exc:
        print(f"proxsplit: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out.mkdir(parents=True, exist_ok=True)
    summary = {"problem": {"source": args.problem, "seed": seed,
                           "kind": base.kind, "n": base.n,
                           "terms": len(base.terms)},
               "config": cfg.to_dict(), "validation": report.to_dict(),
               "unsafe": bool(args.unsafe)}
    if callable(cfg.rho_schedule):
        summary["config"]["rho_schedule"] = cfg.rho_schedule.spec
    if not report.admissible and not args.unsafe:
        summary.update(status="rejected", iterations=0, objective=None)
        _write_report(out, summary)
        _print_verdict(report)
        return EXIT_REJECTED

    ref = None
    if oracle is not None:
        u = oracle.duals[0] if (oracle.duals and base.terms) else None
        try:
            ref = reference_state(cfg.algorithm, roles, cfg, oracle.x_star, u)
        except (ContractViolation, ValueError, np.linalg.LinAlgError):
            ref = None
    state = init_state(cfg.algorithm, roles, cfg)
    step = make_step(cfg.algorithm, roles, cfg)
    every = max(1, int(args.trace_every))
    t0 = time.perf_counter()
    status, code, last, res = "max_iter", EXIT_MAX_ITER, state, None
    with open(out / "trace.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        try:
            for last in relaxed_drive(step, state, cfg):
                res = last.half["residual"]
                done = res <= cfg.stop_tol
                if last.iter % every == 0 or done or \
                        last.iter == cfg.max_iter:
                    x = primal_estimate(last)
                    dist = None if ref is None else metric_distance(
                        cfg.algorithm, roles, cfg, last, ref)
                    writer.writerow([last.iter, _fmt(res),
                                     _fmt(problem.objective(x)), _fmt(dist),
                                     f"{time.perf_counter() - t0:.6f}"])
                if done:
                    status, code = "converged", EXIT_OK
        except DivergenceError as exc:
            status, code = "diverged", EXIT_DIVERGED
            summary["divergence_iteration"] = exc.iteration
    x = primal_estimate(last)
    obj = problem.objective(x) if status != "diverged" else None
    summary.update(status=status, iterations=last.iter,
                   residual=res, objective=obj,
                   seconds=time.perf_counter() - t0,
                   x=np.asarray(x).tolist() if status != "diverged" else None)
    if lifted is not None and last.duals:
        summary["duals"] = [d.tolist() for d in
                            report_duals(lifted, last.duals[0])]
    if oracle is not None:
        summary["oracle"] = {"objective": oracle.objective,
                             "method": oracle.method}
        if obj is not None:
            summary["objective_gap"] = abs(obj - oracle.objective)
    _write_report(out, summary)
    print(f"{cfg.algorithm.value}: {status} after {last.iter} iterations, "
          f"objective {obj}, {report.theorem_tag} delta={report.delta:g}"
          + (" (unsafe)" if args.unsafe and not report.admissible else ""))
    return code


def _write_report(out, summary):
    with open(out / "report.json", "w") as fh:
        json.dump(summary, fh, indent=2, default=_json_default)
        fh.write("\n")


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(type(obj).__name__)


def _print_verdict(report):
    print(f"rejected under {report.theorem_tag}:", file=sys.stderr)
    for c in report.violated:
        print(f"  {c.name}: lhs={c.lhs!r} {c.op} rhs={c.rhs!r} fails",
              file=sys.stderr)


def recommend(problem, eps=RECOMMEND_EPS):
    """Forward-backward settings worth trying, with their verdicts.

    With ``xi = 1/beta``: ``(gamma=(2-eps) xi, rho=1)``, ``(gamma=xi,
    rho=1)`` and ``(gamma=xi, rho=2-eps)``; the last two rely on ``h``
    being quadratic and are omitted otherwise.

    Returns
    -------
    list of dict
        Keys ``gamma``, ``rho``, ``quadratic_mode``, ``report`` and
        ``flag``.
    """
    split_roles(problem, Algorithm.FB)
    beta = float(problem.h.smooth_info.lipschitz)
    if not beta > 0:
        raise ContractViolation("recommend needs a smooth part with beta > 0")
    xi = 1.0 / beta
    quad = bool(problem.h.smooth_info.is_quadratic)
    cands = [((2.0 - eps) * xi, 1.0, False)]
    if quad:
        cands += [(xi, 1.0, True), (xi, 2.0 - eps, True)]
    out = []
    for gamma, rho, qm in cands:
        cfg = SolverConfig(Algorithm.FB, gamma=gamma, rho_schedule=rho,
                           quadratic_mode=qm)
        out.append({"gamma": gamma, "rho": rho, "quadratic_mode": qm,
                    "report": validate_params(cfg, problem),
                    "flag": None if quad else "h is not quadratic: "
                    "only the general-case setting applies"})
    return out


def cmd_recommend(args):
    seed = args.seed
    env = os.environ.get("PROXSPLIT_SEED")
    try:
        if env is not None:
            seed = int(env)
        if args.problem is None:
            raise ConfigError("--problem is required")
        problem = load_problem(args.problem, seed, _parse_dims(args.dims),
                               args.reg)
        cands = recommend(problem)
    except (ConfigError, ContractViolation, ValueError) as exc:
        print(f"proxsplit: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    rows = [{"gamma": c["gamma"], "rho": c["rho"],
             "quadratic_mode": c["quadratic_mode"],
             "admissible": c["report"].admissible,
             "theorem_tag": c["report"].theorem_tag,
             "delta": c["report"].delta, "flag": c["flag"]} for c in cands]
    print(json.dumps(rows, indent=2))
    return EXIT_OK


def _add_problem_args(p, defaults):
    p.add_argument("--config", help="JSON file of default options")
    p.add_argument("--problem", default=defaults.get("problem"),
                   help="built-in kind (lasso, tv1d, constrainedls) or a "
                        "JSON problem file")
    p.add_argument("--seed", type=int, default=defaults.get("seed", 0))
    p.add_argument("--dims", default=defaults.get("dims"),
                   help="comma-separated dimensions of a built-in problem")
    p.add_argument("--reg", type=float, default=defaults.get("reg"),
                   help="regularization weight of a built-in problem")


def build_parser(defaults=None):
    d = defaults or {}
    parser = argparse.ArgumentParser(
        prog="proxsplit",
        description="Relaxed proximal splitting with validated parameters.")
    parser.add_argument("--config", help="JSON file of default options")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="validate and run one algorithm")
    _add_problem_args(run, d)
    run.add_argument("--algorithm", default=d.get("algorithm", "fb"))
    for key in ("tau", "sigma", "eta", "gamma"):
        run.add_argument(f"--{key}", default=d.get(key),
                         help="number or expression")
    run.add_argument("--rho", default=str(d.get("rho", "1.0")),
                     help="constant or a:b:ramp")
    run.add_argument("--max-iter", type=int, default=d.get("max_iter", 1000))
    run.add_argument("--tol", type=float, default=d.get("tol", 1e-10))
    run.add_argument("--quadratic-mode", action="store_true",
                     default=bool(d.get("quadratic_mode", False)))
    run.add_argument("--unsafe", action="store_true",
                     default=bool(d.get("unsafe", False)),
                     help="run even if the validator rejects the parameters")
    run.add_argument("--trace-every", type=int,
                     default=d.get("trace_every", 1))
    run.add_argument("--out", default=d.get("out", "proxsplit-run"))
    run.add_argument("--threads", type=int, default=d.get("threads", 1))
    run.set_defaults(func=cmd_run)

    rec = sub.add_parser("recommend",
                         help="forward-backward settings worth trying")
    _add_problem_args(rec, d)
    rec.set_defaults(func=cmd_recommend)
    return parser


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    try:
        defaults = _config_defaults(known.config)
    except ConfigError as exc:
        print(f"proxsplit: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    parser = build_parser(defaults)
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
