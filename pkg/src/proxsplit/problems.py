"""Desk-scale model problems and exact oracles.

Every problem has the template ``f(x) + sum_m g_m(L_m x) + h(x)``. The oracles
are algorithmically disjoint from the splitting engines (homotopy path and
sign enumeration for the LASSO, the direct taut-string algorithm for 1-D
total variation, a KKT solve for equality-constrained least squares) and
always certify first-order optimality before returning.

.. autosummary::

   ProblemSpec
   OracleSolution
   build
   oracle_solve
"""

import itertools
import json
from dataclasses import dataclass, field

import numpy as np

from .prox import (AffineIndicator, FunSpec, L1, Quadratic, Zero,
                   fun_from_dict)
from .spaces import DenseMatrix, Diff1D, Identity

__all__ = [
    "MAX_DIM", "OracleError", "ProblemSpec", "OracleSolution", "build",
    "oracle_solve", "lasso_homotopy", "lasso_enumerate", "tv1d_taut_string",
    "tv1d_enumerate", "linop_from_dict",
]

MAX_DIM = 200
CERT_TOL = 1e-9


class OracleError(RuntimeError):
    """The oracle could not certify its answer."""


@dataclass
class ProblemSpec:
    """``minimize f(x) + sum_m g_m(L_m x) + h(x)`` over ``R^n``.

    Attributes
    ----------
    f : FunSpec
    terms : list of (FunSpec, LinOp)
    h : FunSpec
        Smooth (``smooth_info`` set), possibly ``Zero()``.
    n : int
        Dimension of the primal variable.
    description : str
    kind : str
        Generator name, or ``"custom"``.
    data : dict
        Raw arrays the problem was built from, used by the oracle.
    """

    f: FunSpec
    terms: list
    h: FunSpec
    n: int
    description: str = ""
    kind: str = "custom"
    data: dict = field(default_factory=dict)

    def __post_init__(self):
        self.terms = [tuple(t) for t in self.terms]
        for g, L in self.terms:
            if L.in_dim != self.n:
                raise ValueError(
                    f"operator input dimension {L.in_dim} != n = {self.n}")
        if self.h.smooth_info is None:
            raise ValueError("h must be smooth")

    @property
    def dims(self):
        return {"n": self.n, "terms": [L.out_dim for _, L in self.terms]}

    def objective(self, x):
        val = self.f.value(x) + self.h.value(x)
        for g, L in self.terms:
            val += g.value(L.apply(x))
        return float(val)

    def to_dict(self):
        return {
            "kind": self.kind, "n": self.n, "description": self.description,
            "f": self.f.to_dict(), "h": self.h.to_dict(),
            "terms": [{"g": g.to_dict(), "L": L.to_dict()}
                      for g, L in self.terms],
            "data": {k: np.asarray(v).tolist() if not np.isscalar(v) else v
                     for k, v in self.data.items()},
        }

    @classmethod
    def from_dict(cls, d):
        data = {k: (np.array(v) if isinstance(v, list) else v)
                for k, v in d.get("data", {}).items()}
        return cls(f=fun_from_dict(d["f"]),
                   terms=[(fun_from_dict(t["g"]), linop_from_dict(t["L"]))
                          for t in d["terms"]],
                   h=fun_from_dict(d["h"]), n=int(d["n"]),
                   description=d.get("description", ""),
                   kind=d.get("kind", "custom"), data=data)

    def to_json(self):
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def linop_from_dict(d):
    kind = d["kind"]
    if kind == "Identity":
        return Identity(d["n"])
    if kind == "Diff1D":
        return Diff1D(d["n"])
    if "matrix" in d:
        return DenseMatrix(np.array(d["matrix"], dtype=np.float64))
    raise ValueError(f"cannot deserialize operator kind {kind!r}")


@dataclass
class OracleSolution:
    """Certified solution of a model problem.

    Attributes
    ----------
    x_star : ndarray
    duals : list of ndarray
        One dual vector ``u_m`` per term, with ``u_m`` in the subdifferential
        of ``g_m`` at ``L_m x_star``. For constrained least squares, the KKT
        multiplier of the equality constraint.
    objective : float
    method : str
    certificate : float
        Residual of the first-order conditions, at most ``1e-9``.
    """

    x_star: np.ndarray
    duals: list
    objective: float
    method: str
    certificate: float


def _check_dims(n):
    if n < 1:
        raise ValueError("dimension must be positive")
    if n > MAX_DIM:
        raise ValueError(
            f"n = {n} exceeds the desk-scale limit {MAX_DIM}; oracle too costly")


def build(kind, seed=0, dims=None, reg=None):
    """Build a seeded model problem.

    Parameters
    ----------
    kind : {"LASSO", "TV1D", "ConstrainedLS"}
    seed : int
    dims : int or tuple, optional
        LASSO: ``(m, n)`` or ``n`` (then ``m = n``). TV1D: ``n``.
        ConstrainedLS: ``(m, p, n)`` with ``p < n`` equality constraints, or
        ``n``.
    reg : float, optional
        Regularization weight; defaults to a tenth of the threshold above
        which the solution vanishes (LASSO), or 0.5 (TV1D).

    Returns
    -------
    ProblemSpec

    Notes
    -----
    LASSO: ``h = 1/2 ||A x - y||^2``, ``g = reg ||.||_1``, ``L = Id``,
    ``f = 0``. TV1D: ``h = 1/2 ||x - y||^2``, ``g = reg ||.||_1``,
    ``L`` forward differences. ConstrainedLS: ``f`` the indicator of
    ``{C x = d}`` and ``h = 1/2 ||A x - b||^2``.
    """
    rng = np.random.default_rng(seed)
    kind = kind.upper() if kind.upper() in ("LASSO", "TV1D") else kind
    if kind == "LASSO":
        m, n = (dims, dims) if np.isscalar(dims) else (dims or (20, 20))
        _check_dims(n)
        A = rng.standard_normal((m, n)) / np.sqrt(m)
        x_true = np.zeros(n)
        nz = rng.choice(n, size=max(1, n // 4), replace=False)
        x_true[nz] = rng.standard_normal(nz.size) * 2.0
        y = A @ x_true + 0.1 * rng.standard_normal(m)
        lam = reg if reg is not None else 0.1 * float(np.max(np.abs(A.T @ y)))
        h = Quadratic(A.T @ A, -A.T @ y, 0.5 * float(y @ y))
        return ProblemSpec(Zero(), [(L1(lam), Identity(n))], h, n,
                           f"LASSO m={m} n={n} lambda={lam:.6g} seed={seed}",
                           "LASSO", {"A": A, "y": y, "lam": lam})
    if kind == "TV1D":
        n = 50 if dims is None else int(dims if np.isscalar(dims) else dims[0])
        _check_dims(n)
        levels = rng.standard_normal(4) * 2.0
        cuts = np.sort(rng.choice(np.arange(1, n), size=min(3, n - 1),
                                  replace=False))
        clean = np.repeat(levels[:len(cuts) + 1],
                          np.diff(np.concatenate(([0], cuts, [n]))))
        y = clean + 0.3 * rng.standard_normal(n)
        lam = 0.5 if reg is None else float(reg)
        h = Quadratic(np.eye(n), -y, 0.5 * float(y @ y))
        terms = [(L1(lam), Diff1D(n))] if lam > 0 else [
            (Zero(), Diff1D(n))]
        return ProblemSpec(Zero(), terms, h, n,
                           f"TV1D n={n} lambda={lam:.6g} seed={seed}",
                           "TV1D", {"y": y, "lam": lam})
    if kind == "ConstrainedLS":
        if dims is None:
            m, p, n = 15, 3, 10
        elif np.isscalar(dims):
            n = int(dims)
            m, p = n + 5, max(1, n // 3)
        else:
            m, p, n = dims
        _check_dims(n)
        if p >= n:
            raise ValueError("need fewer constraints than unknowns")
        A = rng.standard_normal((m, n)) / np.sqrt(m)
        b = rng.standard_normal(m)
        C = rng.standard_normal((p, n))
        d = rng.standard_normal(p)
        h = Quadratic(A.T @ A, -A.T @ b, 0.5 * float(b @ b))
        return ProblemSpec(AffineIndicator(C, d), [], h, n,
                           f"ConstrainedLS m={m} p={p} n={n} seed={seed}",
                           "ConstrainedLS", {"A": A, "b": b, "C": C, "d": d})
    raise ValueError(f"unknown problem kind {kind!r}")


# ---------------------------------------------------------------- LASSO

def _lasso_kkt(A, y, lam, x):
    c = A.T @ (y - A @ x)
    on = x != 0
    res = np.where(on, np.abs(c - lam * np.sign(x)),
                   np.maximum(np.abs(c) - lam, 0.0))
    return float(np.max(res, initial=0.0)) / (1.0 + lam), c


def _lasso_polish(A, y, lam, support, signs):
    x = np.zeros(A.shape[1])
    if support.size:
        As = A[:, support]
        x[support] = np.linalg.solve(As.T @ As, As.T @ y - lam * signs)
    return x


def lasso_homotopy(A, y, lam, max_steps=None):
    """Exact LASSO solution by the piecewise-linear homotopy path.

    Follows the path from ``lambda_max = ||A^T y||_inf`` down to `lam`,
    adding and dropping coordinates at the breakpoints, then re-solves the
    final support exactly. Requires columns in general position.
    """
    A = np.asarray(A, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = A.shape[1]
    c = A.T @ y
    lam_cur = float(np.max(np.abs(c)))
    x = np.zeros(n)
    if lam >= lam_cur:
        return x
    active = [int(np.argmax(np.abs(c)))]
    signs = {active[0]: float(np.sign(c[active[0]]))}
    max_steps = max_steps or 50 * n
    for _ in range(max_steps):
        S = np.array(active)
        s = np.array([signs[j] for j in active])
        As = A[:, S]
        d = np.linalg.solve(As.T @ As, s)
        v = A.T @ (As @ d)
        c = A.T @ (y - A @ x)
        gamma = lam_cur - lam
        event = None
        for j in range(n):
            if j in signs:
                continue
            for num, den, sg in ((lam_cur - c[j], 1.0 - v[j], 1.0),
                                 (lam_cur + c[j], 1.0 + v[j], -1.0)):
                if den > 1e-14:
                    g = num / den
                    if 1e-14 < g < gamma:
                        gamma, event = g, ("add", j, sg)
        for k, j in enumerate(S):
            if d[k] * x[j] < 0:
                g = -x[j] / d[k]
                if 1e-14 < g < gamma:
                    gamma, event = g, ("drop", j, 0.0)
        x[S] += gamma * d
        lam_cur -= gamma
        if event is None:
            break
        what, j, sg = event
        if what == "add":
            active.append(j)
            signs[j] = sg
        else:
            x[j] = 0.0
            active.remove(j)
            del signs[j]
    support = np.flatnonzero(x)
    return _lasso_polish(A, y, lam, support, np.sign(x[support]))


def lasso_enumerate(A, y, lam):
    """LASSO solution by enumerating all sign patterns (``3^n`` candidates).

    For each pattern the candidate solves the linear system of its support,
    and the one passing the KKT check is returned. Intended for ``n <= 10``.
    """
    A = np.asarray(A, dtype=np.float64)
    n = A.shape[1]
    best = None
    for pattern in itertools.product((0, 1, -1), repeat=n):
        pattern = np.array(pattern, dtype=np.float64)
        support = np.flatnonzero(pattern)
        try:
            x = _lasso_polish(A, y, lam, support, pattern[support])
        except np.linalg.LinAlgError:
            continue
        if np.any(np.sign(x[support]) != pattern[support]):
            continue
        cert, _ = _lasso_kkt(A, y, lam, x)
        if cert <= 1e-9 and (best is None or cert < best[1]):
            best = (x, cert)
    if best is None:
        raise OracleError("no sign pattern satisfies the KKT conditions")
    return best[0]


# ----------------------------------------------------------------- TV1D

def tv1d_taut_string(y, lam):
    """Exact 1-D total variation denoising, ``min 1/2||x-y||^2 + lam ||Dx||_1``.

    Direct (taut-string) algorithm in one pass, with the lower and upper
    bounds of the current segment value tracked through the dual variable.
    """
    y = np.asarray(y, dtype=np.float64)
    n = y.size
    out = np.empty(n)
    if lam <= 0:
        return y.copy()
    k = k0 = kplus = kminus = 0
    umin, umax = lam, -lam
    vmin, vmax = y[0] - lam, y[0] + lam
    while True:
        while k == n - 1:
            if umin < 0.0:
                out[k0:kminus + 1] = vmin
                k0 = k = kminus = kminus + 1
                vmin = y[k]
                umin = lam
                umax = vmin + umin - vmax
            elif umax > 0.0:
                out[k0:kplus + 1] = vmax
                k0 = k = kplus = kplus + 1
                vmax = y[k]
                umax = -lam
                umin = vmax + umax - vmin
            else:
                vmin += umin / (k - k0 + 1)
                out[k0:k + 1] = vmin
                return out
        umin += y[k + 1] - vmin
        if umin < -lam:
            out[k0:kminus + 1] = vmin
            k0 = k = kplus = kminus = kminus + 1
            vmin = y[k]
            vmax = vmin + 2 * lam
            umin, umax = lam, -lam
            continue
        umax += y[k + 1] - vmax
        if umax > lam:
            out[k0:kplus + 1] = vmax
            k0 = k = kplus = kminus = kplus + 1
            vmax = y[k]
            vmin = vmax - 2 * lam
            umin, umax = lam, -lam
            continue
        k += 1
        if umin >= lam:
            kminus = k
            vmin += (umin - lam) / (kminus - k0 + 1)
            umin = lam
        if umax <= -lam:
            kplus = k
            vmax += (umax + lam) / (kplus - k0 + 1)
            umax = -lam


def _tv_from_jumps(y, lam, jumps):
    """Piecewise-constant candidate given the sign of every jump."""
    n = y.size
    x = np.empty(n)
    starts = [0] + [k + 1 for k in range(n - 1) if jumps[k] != 0]
    ends = starts[1:] + [n]
    for a, b in zip(starts, ends):
        s_left = jumps[a - 1] if a > 0 else 0.0
        s_right = jumps[b - 1] if b < n else 0.0
        x[a:b] = y[a:b].mean() + lam * (s_right - s_left) / (b - a)
    return x


def _tv_dual(y, x):
    return np.cumsum(x - y)[:-1]


def _tv_kkt(y, lam, x):
    u = _tv_dual(y, x)
    dx = np.diff(x)
    res = [abs(float(np.sum(x - y)))]
    res.append(float(np.max(np.maximum(np.abs(u) - lam, 0.0), initial=0.0)))
    on = dx != 0
    if np.any(on):
        res.append(float(np.max(np.abs(u[on] - lam * np.sign(dx[on])))))
    return max(res) / (1.0 + lam), u


def tv1d_enumerate(y, lam):
    """TV denoising by enumerating all ``3^(n-1)`` jump-sign patterns."""
    y = np.asarray(y, dtype=np.float64)
    for pattern in itertools.product((0.0, 1.0, -1.0), repeat=y.size - 1):
        x = _tv_from_jumps(y, lam, pattern)
        dx = np.diff(x)
        if np.any(np.sign(dx) != np.array(pattern)):
            continue
        cert, _ = _tv_kkt(y, lam, x)
        if cert <= 1e-9:
            return x
    raise OracleError("no jump pattern satisfies the optimality conditions")


# --------------------------------------------------------------- oracle

def oracle_solve(p):
    """Exact, certified solution of a problem produced by :func:`build`.

    Raises
    ------
    OracleError
        If the first-order certificate exceeds ``1e-9``; this signals a bug
        in the test infrastructure and is never silenced.
    """
    d = p.data
    if p.kind == "LASSO":
        A, y, lam = d["A"], d["y"], float(d["lam"])
        if p.n > 20:
            raise ValueError("LASSO oracle is limited to n <= 20")
        x = lasso_homotopy(A, y, lam)
        cert, c = _lasso_kkt(A, y, lam, x)
        duals, method = [c], "lasso-homotopy"
    elif p.kind == "TV1D":
        y, lam = d["y"], float(d["lam"])
        x = tv1d_taut_string(y, lam)
        dx = np.diff(x)
        # re-solve exactly from the detected jump structure
        x = _tv_from_jumps(y, lam, np.sign(dx))
        cert, u = _tv_kkt(y, lam, x)
        duals, method = [u], "taut-string"
    elif p.kind == "ConstrainedLS":
        A, b, C, dd = d["A"], d["b"], d["C"], d["d"]
        n, q = A.shape[1], C.shape[0]
        K = np.block([[A.T @ A, C.T], [C, np.zeros((q, q))]])
        sol = np.linalg.solve(K, np.concatenate([A.T @ b, dd]))
        x, mu = sol[:n], sol[n:]
        r1 = A.T @ (A @ x - b) + C.T @ mu
        r2 = C @ x - dd
        cert = float(max(np.max(np.abs(r1)), np.max(np.abs(r2))))
        cert /= 1.0 + float(np.max(np.abs(A.T @ b)))
        duals, method = [mu], "kkt-solve"
    else:
        raise ValueError(f"no oracle for problem kind {p.kind!r}")
    if not cert <= CERT_TOL:
        raise OracleError(f"{method} certificate {cert:.3e} exceeds {CERT_TOL}")
    return OracleSolution(x, duals, p.objective(x), method, cert)
