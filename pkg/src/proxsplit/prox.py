"""Closed convex functions with exact proximity operators.

Every function object exposes ``prox(tau, x)``, ``value(x)`` and, when it is
differentiable everywhere, ``grad(x)`` together with ``smooth_info``.
Conjugate proxes are never hand coded: :func:`prox_conjugate` goes through
the Moreau identity

    prox_{tau f*}(x) = x - tau * prox_{f/tau}(x / tau).

.. autosummary::

   Zero
   Quadratic
   L1
   SquaredL2
   AffineIndicator
   Box
   LinearTerm
   Custom
   prox
   prox_conjugate
   grad
   prox_postcomposition
"""

from typing import NamedTuple, Optional

import numpy as np
import scipy.linalg as sla
from scipy.sparse.linalg import LinearOperator, cg

from .spaces import (BlockVector, DenseMatrix, DimensionError, Identity,
                     LinOp, ScaledSum, as_vector)

__all__ = [
    "ContractViolation", "ProxError", "UnsupportedPostcomposition",
    "SmoothInfo", "ProxResult", "FunSpec", "Zero", "Quadratic", "L1",
    "SquaredL2", "AffineIndicator", "Box", "LinearTerm", "Custom",
    "Conjugate", "Reflected", "conjugate", "reflect", "prox",
    "prox_conjugate", "grad", "prox_postcomposition", "fun_from_dict",
]

# tolerance used to decide membership in constraint sets when evaluating
# indicator functions at computed points
FEAS_TOL = 1e-8
# ridge added to rank-deficient postcomposition systems
RIDGE = 1e-12


class ContractViolation(ValueError):
    """An operation was called outside of its documented contract."""


class ProxError(RuntimeError):
    """A proximity operator could not be evaluated."""


class UnsupportedPostcomposition(TypeError):
    """The infimal postcomposition of this function kind is not a linear solve."""


class SmoothInfo(NamedTuple):
    """Lipschitz constant of the gradient and quadratic flag."""

    lipschitz: float
    is_quadratic: bool


class ProxResult(NamedTuple):
    point: object
    objective_at_point: Optional[float] = None


class FunSpec:
    """Base class of the catalog. Instances are immutable after creation."""

    kind = "FunSpec"
    smooth_info = None
    # True when x -> prox_{tau f}(x) is affine for every tau
    affine_prox = False
    thread_safe = True

    def value(self, x):
        raise NotImplementedError(f"{self.kind} has no value oracle")

    __call__ = value

    def prox(self, tau, x):
        raise NotImplementedError

    def grad(self, x):
        raise ContractViolation(f"{self.kind} is not differentiable")

    def subgradient_distance(self, p, v):
        """Distance from `v` to the subdifferential of the function at `p`."""
        raise NotImplementedError(
            f"no subdifferential oracle for {self.kind}")

    def to_dict(self):
        raise NotImplementedError(f"{self.kind} is not serializable")

    def __repr__(self):
        return f"{self.kind}()"


def _check_tau(tau):
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")


class Zero(FunSpec):
    """The zero function."""

    kind = "Zero"
    smooth_info = SmoothInfo(0.0, True)
    affine_prox = True

    def value(self, x):
        return 0.0

    def prox(self, tau, x):
        _check_tau(tau)
        return x.copy() if isinstance(x, BlockVector) else np.array(
            x, dtype=np.float64)

    def grad(self, x):
        return np.zeros_like(x, dtype=np.float64)

    def subgradient_distance(self, p, v):
        return float(np.linalg.norm(v))

    def to_dict(self):
        return {"kind": self.kind}


def _as_operator(Q, n=None):
    if isinstance(Q, LinOp):
        return Q
    Q = np.asarray(Q, dtype=np.float64)
    if Q.ndim == 0:
        if n is None:
            raise ValueError("a scalar Q needs the dimension")
        Q = Q * np.eye(n)
    return DenseMatrix(Q)


class Quadratic(FunSpec):
    """``x -> 1/2 <x, Q x> + <c, x> + t`` with ``Q`` symmetric positive semidefinite.

    Parameters
    ----------
    Q : array_like or LinOp
        Symmetric PSD operator; checked on construction.
    c : array_like, optional
        Linear part, zero by default.
    t : float, optional
        Constant.

    Notes
    -----
    The gradient Lipschitz constant is the largest eigenvalue of ``Q``. The
    prox solves ``(tau Q + Id) x' = x - tau c`` by a cached Cholesky
    factorization, with conjugate gradient as fallback.
    """

    kind = "Quadratic"
    affine_prox = True

    def __init__(self, Q, c=None, t=0.0):
        op = _as_operator(Q, None if c is None else len(c))
        if op.in_dim != op.out_dim:
            raise DimensionError(op.in_dim, op.out_dim, "square Q")
        dense = op.to_dense()
        scale = max(1.0, float(np.max(np.abs(dense))) if dense.size else 1.0)
        if not np.allclose(dense, dense.T, rtol=0, atol=1e-12 * scale):
            raise ValueError("Q must be symmetric")
        dense = 0.5 * (dense + dense.T)
        eig = np.linalg.eigvalsh(dense)
        if eig[0] < -1e-10:
            raise ValueError(
                f"Q must be positive semidefinite (smallest eigenvalue {eig[0]})")
        self.Q = op
        self._dense = dense
        self.n = op.in_dim
        self.c = np.zeros(self.n) if c is None else as_vector(c, self.n)
        self.t = float(t)
        self.smooth_info = SmoothInfo(max(float(eig[-1]), 0.0), True)
        self._factors = {}

    @property
    def lipschitz(self):
        return self.smooth_info.lipschitz

    def value(self, x):
        return float(0.5 * np.dot(x, self.Q.apply(x)) + np.dot(self.c, x)
                     + self.t)

    def grad(self, x):
        return self.Q.apply(x) + self.c

    def _solve(self, tau, rhs):
        key = float(tau)
        fac = self._factors.get(key)
        if fac is None:
            A = tau * self._dense + np.eye(self.n)
            try:
                fac = ("chol", sla.cho_factor(A))
            except np.linalg.LinAlgError:
                fac = ("cg", A)
            if len(self._factors) > 16:
                self._factors.clear()
            self._factors[key] = fac
        how, data = fac
        if how == "chol":
            return sla.cho_solve(data, rhs)
        op = LinearOperator(data.shape, matvec=lambda v: data @ v)
        sol, info = cg(op, rhs, rtol=1e-12, atol=0.0, maxiter=10 * self.n)
        if info != 0:
            raise ProxError("conjugate gradient failed in Quadratic prox")
        return sol

    def prox(self, tau, x):
        _check_tau(tau)
        return self._solve(tau, x - tau * self.c)

    def subgradient_distance(self, p, v):
        return float(np.linalg.norm(v - self.grad(p)))

    def to_dict(self):
        return {"kind": self.kind, "Q": self._dense.tolist(),
                "c": self.c.tolist(), "t": self.t}


class L1(FunSpec):
    """Weighted l1 norm ``x -> w * ||x||_1``; `weight` may be per-coordinate."""

    kind = "L1"

    def __init__(self, weight=1.0):
        w = np.asarray(weight, dtype=np.float64)
        if np.any(w <= 0) or not np.all(np.isfinite(w)):
            raise ValueError("L1 weight must be positive")
        self.weight = w

    def value(self, x):
        return float(np.sum(self.weight * np.abs(x)))

    def prox(self, tau, x):
        _check_tau(tau)
        thr = tau * self.weight
        return np.sign(x) * np.maximum(np.abs(x) - thr, 0.0)

    def subgradient_distance(self, p, v):
        w = np.broadcast_to(self.weight, np.shape(p))
        on = p != 0
        d = np.where(on, v - w * np.sign(p),
                     np.maximum(np.abs(v) - w, 0.0))
        return float(np.linalg.norm(d))

    def to_dict(self):
        return {"kind": self.kind, "weight": self.weight.tolist()}

    def __repr__(self):
        return f"L1(weight={self.weight})"


class SquaredL2(FunSpec):
    """``x -> (w/2) ||x||^2``."""

    kind = "SquaredL2"
    affine_prox = True

    def __init__(self, weight=1.0):
        if not weight > 0:
            raise ValueError("SquaredL2 weight must be positive")
        self.weight = float(weight)
        self.smooth_info = SmoothInfo(self.weight, True)

    def value(self, x):
        return 0.5 * self.weight * float(np.dot(x, x))

    def grad(self, x):
        return self.weight * np.asarray(x, dtype=np.float64)

    def prox(self, tau, x):
        _check_tau(tau)
        return x / (1.0 + tau * self.weight)

    def subgradient_distance(self, p, v):
        return float(np.linalg.norm(v - self.grad(p)))

    def to_dict(self):
        return {"kind": self.kind, "weight": self.weight}

    def __repr__(self):
        return f"SquaredL2(weight={self.weight})"


class AffineIndicator(FunSpec):
    """Indicator of the affine set ``{x : A x = y}``.

    The prox is the orthogonal projection
    ``x - A^* (A A^*)^{-1} (A x - y)``; it does not depend on `tau`.

    Raises
    ------
    ProxError
        On construction, if ``A A^*`` is singular.
    """

    kind = "AffineIndicator"
    affine_prox = True

    def __init__(self, A, y):
        A = _as_operator(A)
        self.A = A
        self.y = as_vector(y, A.out_dim)
        M = A.to_dense()
        self._M = M
        if np.linalg.matrix_rank(M) < M.shape[0]:
            raise ProxError(
                "normal equations of the affine set are singular")
        try:
            self._fac = sla.cho_factor(M @ M.T)
        except np.linalg.LinAlgError as exc:
            raise ProxError(
                "normal equations of the affine set are singular") from exc

    def project(self, x):
        r = self._M @ x - self.y
        return x - self._M.T @ sla.cho_solve(self._fac, r)

    def prox(self, tau, x):
        _check_tau(tau)
        return self.project(x)

    def residual(self, x):
        return float(np.linalg.norm(self._M @ x - self.y))

    def value(self, x):
        scale = 1.0 + float(np.linalg.norm(self.y))
        return 0.0 if self.residual(x) <= FEAS_TOL * scale else np.inf

    def subgradient_distance(self, p, v):
        # normal cone of an affine set is range(A^*); p must be feasible
        if self.value(p) != 0.0:
            return np.inf
        coef = sla.cho_solve(self._fac, self._M @ v)
        return float(np.linalg.norm(v - self._M.T @ coef))

    def to_dict(self):
        return {"kind": self.kind, "A": self._M.tolist(), "y": self.y.tolist()}


class Box(FunSpec):
    """Indicator of the box ``{x : lo <= x <= hi}``; bounds may be infinite."""

    kind = "Box"

    def __init__(self, lo=-np.inf, hi=np.inf):
        self.lo = np.asarray(lo, dtype=np.float64)
        self.hi = np.asarray(hi, dtype=np.float64)
        if np.any(self.lo > self.hi):
            raise ValueError("Box needs lo <= hi")

    def prox(self, tau, x):
        _check_tau(tau)
        return np.clip(x, self.lo, self.hi)

    def value(self, x):
        ok = np.all(x >= self.lo - FEAS_TOL) and np.all(x <= self.hi + FEAS_TOL)
        return 0.0 if ok else np.inf

    def subgradient_distance(self, p, v):
        if self.value(p) != 0.0:
            return np.inf
        lo = np.broadcast_to(self.lo, np.shape(p))
        hi = np.broadcast_to(self.hi, np.shape(p))
        at_lo = p <= lo
        at_hi = p >= hi
        # normal cone: v <= 0 at lo, v >= 0 at hi, anything if lo == hi
        d = np.where(at_lo & at_hi, 0.0,
                     np.where(at_lo, np.maximum(v, 0.0),
                              np.where(at_hi, np.minimum(v, 0.0), v)))
        return float(np.linalg.norm(d))

    def to_dict(self):
        return {"kind": self.kind, "lo": self.lo.tolist(),
                "hi": self.hi.tolist()}


class LinearTerm(FunSpec):
    """``x -> <c, x>``."""

    kind = "LinearTerm"
    smooth_info = SmoothInfo(0.0, True)
    affine_prox = True

    def __init__(self, c):
        self.c = as_vector(c)

    def value(self, x):
        return float(np.dot(self.c, x))

    def grad(self, x):
        return self.c.copy()

    def prox(self, tau, x):
        _check_tau(tau)
        return x - tau * self.c

    def subgradient_distance(self, p, v):
        return float(np.linalg.norm(v - self.c))

    def to_dict(self):
        return {"kind": self.kind, "c": self.c.tolist()}


class Custom(FunSpec):
    """Function defined by a user-supplied prox callable ``prox_fn(tau, x)``.

    Parameters
    ----------
    prox_fn : callable
    value_fn : callable, optional
    grad_fn : callable, optional
        Gradient; requires `lipschitz`.
    lipschitz : float, optional
    thread_safe : bool
        Whether `prox_fn` may be called from several threads at once. Parallel
        block evaluations refuse functions that are not declared safe.
    """

    kind = "Custom"

    def __init__(self, prox_fn, value_fn=None, grad_fn=None, lipschitz=None,
                 thread_safe=False):
        self._prox = prox_fn
        self._value = value_fn
        self._grad = grad_fn
        self.thread_safe = bool(thread_safe)
        if grad_fn is not None:
            if lipschitz is None:
                raise ValueError("a gradient needs a Lipschitz constant")
            self.smooth_info = SmoothInfo(float(lipschitz), False)

    def prox(self, tau, x):
        _check_tau(tau)
        return self._prox(tau, x)

    def value(self, x):
        if self._value is None:
            return super().value(x)
        return float(self._value(x))

    def grad(self, x):
        if self._grad is None:
            return super().grad(x)
        return self._grad(x)


class Conjugate(FunSpec):
    """Convex conjugate ``f*``, with prox obtained by the Moreau identity."""

    kind = "Conjugate"

    def __init__(self, f):
        self.f = f
        self.thread_safe = f.thread_safe

    def prox(self, tau, x):
        return prox_conjugate(self.f, tau, x).point

    def __repr__(self):
        return f"Conjugate({self.f!r})"


class Reflected(FunSpec):
    """``x -> f(-x)``; its prox at ``x`` is ``-prox_f(-x)``."""

    kind = "Reflected"

    def __init__(self, f):
        self.f = f
        self.thread_safe = f.thread_safe
        self.affine_prox = f.affine_prox
        self.smooth_info = f.smooth_info

    def prox(self, tau, x):
        return -self.f.prox(tau, -x)

    def value(self, x):
        return self.f.value(-x)

    def grad(self, x):
        return -self.f.grad(-x)

    def __repr__(self):
        return f"Reflected({self.f!r})"


def conjugate(f):
    """Return ``f*``; conjugating twice gives back `f`."""
    if isinstance(f, Conjugate):
        return f.f
    return Conjugate(f)


def reflect(f):
    """Return ``x -> f(-x)``."""
    if isinstance(f, Reflected):
        return f.f
    return Reflected(f)


def prox(f, tau, x):
    """Proximity operator ``argmin_x' f(x') + ||x - x'||^2 / (2 tau)``.

    Examples
    --------
    >>> prox(L1(1.0), 1.0, np.array([2.0, -0.5, 0.0])).point
    array([ 1., -0.,  0.])
    """
    _check_tau(tau)
    p = f.prox(tau, x)
    try:
        val = f.value(p)
    except NotImplementedError:
        val = None
    return ProxResult(p, val)


def prox_conjugate(f, tau, x):
    """Prox of ``tau f*`` through the Moreau identity.

    Computes ``x - tau * prox_{f/tau}(x / tau)``; no formula for ``f*`` is
    ever needed.

    Examples
    --------
    >>> prox_conjugate(L1(1.0), 1.0, np.array([3.0, -0.2])).point
    array([ 1. , -0.2])
    """
    _check_tau(tau)
    return ProxResult(x - tau * f.prox(1.0 / tau, x / tau))


def grad(h, x):
    """Gradient of a smooth function.

    Raises
    ------
    ContractViolation
        If `h` is not differentiable everywhere.
    """
    if h.smooth_info is None:
        raise ContractViolation(f"grad called on nonsmooth {h.kind}")
    return h.grad(x)


def _scaled_identity(op):
    """Return ``a`` if `op` is ``a * Id``, else None."""
    if isinstance(op, Identity):
        return 1.0
    if (isinstance(op, ScaledSum) and len(op.ops) == 1
            and isinstance(op.ops[0], Identity)):
        return float(op.coefs[0])
    return None


def prox_postcomposition(f, L, tau, r):
    """Solve ``min_x tau f(x) + 1/2 ||L x - r||^2``.

    This is the prox of the infimal postcomposition of ``f`` by ``L``: the
    returned ``r_out = L x_witness`` is unique even when the minimizer is
    not, in which case the minimum-norm witness is returned.

    Supported kinds are Zero, Quadratic, SquaredL2, LinearTerm and
    AffineIndicator (reducible to a linear solve); any kind is accepted when
    ``L`` is a nonzero multiple of the identity, since the problem is then a
    plain prox.

    Returns
    -------
    r_out, x_witness : ndarray

    Raises
    ------
    UnsupportedPostcomposition
        For other function kinds.
    ProxError
        When the problem is unbounded below.
    """
    _check_tau(tau)
    r = np.asarray(r, dtype=np.float64)
    a = _scaled_identity(L)
    if a is not None and a != 0.0:
        x = f.prox(tau / a ** 2, r / a)
        return a * x, x
    M = L.to_dense()
    n = M.shape[1]
    if isinstance(f, AffineIndicator):
        A = f._M
        x0 = np.linalg.lstsq(A, f.y, rcond=None)[0]
        N = sla.null_space(A)
        if N.shape[1] == 0:
            x = x0
        else:
            z = np.linalg.lstsq(M @ N, r - M @ x0, rcond=None)[0]
            x = x0 + N @ z
        return M @ x, x
    if isinstance(f, Zero):
        Q, c = np.zeros((n, n)), np.zeros(n)
    elif isinstance(f, Quadratic):
        Q, c = f._dense, f.c
    elif isinstance(f, SquaredL2):
        Q, c = f.weight * np.eye(n), np.zeros(n)
    elif isinstance(f, LinearTerm):
        Q, c = np.zeros((n, n)), f.c
    else:
        raise UnsupportedPostcomposition(
            f"infimal postcomposition of {f.kind} is not a linear solve")
    A = tau * Q + M.T @ M
    rhs = M.T @ r - tau * c
    try:
        x = sla.cho_solve(sla.cho_factor(A), rhs)
    except np.linalg.LinAlgError:
        # rank deficient: ridge-regularized solve, which tends to the
        # minimum-norm solution as the ridge goes to zero
        ridge = RIDGE * max(1.0, float(np.max(np.abs(A))))
        try:
            x = sla.cho_solve(sla.cho_factor(A + ridge * np.eye(n)), rhs)
        except np.linalg.LinAlgError:
            x = np.linalg.lstsq(A, rhs, rcond=None)[0]
    if np.linalg.norm(A @ x - rhs) > 1e-8 * (1.0 + np.linalg.norm(rhs)):
        raise ProxError("postcomposition problem is unbounded below")
    return M @ x, x


_KINDS = {
    "Zero": lambda d: Zero(),
    "Quadratic": lambda d: Quadratic(np.array(d["Q"]), d.get("c"),
                                     d.get("t", 0.0)),
    "L1": lambda d: L1(np.array(d["weight"])),
    "SquaredL2": lambda d: SquaredL2(d["weight"]),
    "AffineIndicator": lambda d: AffineIndicator(np.array(d["A"]), d["y"]),
    "Box": lambda d: Box(np.array(d["lo"]), np.array(d["hi"])),
    "LinearTerm": lambda d: LinearTerm(d["c"]),
}


def fun_from_dict(d):
    """Inverse of ``FunSpec.to_dict``."""
    try:
        return _KINDS[d["kind"]](d)
    except KeyError as exc:
        raise ValueError(f"unknown function kind in {d!r}") from exc
