"""Step maps of the relaxed splitting algorithms, the relaxation driver and
the parameter validator.

Every algorithm is a map ``T`` on a state ``z`` made of a primary block and
zero or more dual blocks. The driver iterates ``z + rho (T z - z)``; each
step function performs one such relaxed update and exposes the half-step
values (the unrelaxed image ``T z`` and the primal estimate) read-only.

Step functions share the signature ``step(state, ..., rho=1.0)`` and never
modify their input.
"""

import enum
import math
import time
from dataclasses import dataclass, field, replace
from types import MappingProxyType

import numpy as np

from .prox import (AffineIndicator, Box, ContractViolation, FunSpec, L1,
                   LinearTerm, Quadratic, SquaredL2, Zero,
                   prox_postcomposition)
from .spaces import (BlockVector, DenseMatrix, Identity, LinOp, ScaledSum,
                     Stacked, is_finite, norm)

__all__ = [
    "Algorithm", "SolverConfig", "IterState", "Condition", "ValidationReport",
    "Roles", "RunResult", "DivergenceError", "ParameterRejected",
    "NormBoundMissing", "validate_params", "split_roles", "relaxed_drive",
    "run", "km_step", "make_step", "init_state", "solve", "fb_step",
    "ppa_step", "dr_step", "admm_step", "admm_alt_step", "lifted_admm_step",
    "cp_step", "pmm_step", "lv_step", "pdfp_step", "gcp_step", "cv_step",
    "egcp_step", "pd3o_step", "dy_step", "pddr_quad_step",
    "reference_state", "metric_distance", "primal_estimate", "Tilted",
    "EPS_RHO", "GOLDEN",
]

# margin kept from 0 and delta by relaxation schedules after burn-in
EPS_RHO = 1e-3
# relative slack of the step-size comparisons, so that a boundary value
# produced by floating-point division is classified as the boundary
CMP_TOL = 1e-12
GOLDEN = (1.0 + math.sqrt(5.0)) / 2.0


class Algorithm(str, enum.Enum):
    FB = "FB"
    PPA = "PPA"
    DR = "DR"
    ADMM = "ADMM"
    ADMM_ALT = "ADMM_ALT"
    LIFTED_ADMM = "LIFTED_ADMM"
    CP_I = "CP_I"
    CP_II = "CP_II"
    PMM = "PMM"
    LV = "LV"
    PDFP = "PDFP"
    GCP = "GCP"
    CV_I = "CV_I"
    CV_II = "CV_II"
    EGCP = "EGCP"
    PD3O = "PD3O"
    DY = "DY"
    PDDR_QUAD_I = "PDDR_QUAD_I"
    PDDR_QUAD_II = "PDDR_QUAD_II"

    @classmethod
    def parse(cls, name):
        if isinstance(name, cls):
            return name
        key = str(name).strip().upper().replace("-", "_")
        key = _ALIASES.get(key, key)
        try:
            return cls(key)
        except ValueError:
            raise ValueError(f"unknown algorithm {name!r}") from None


_ALIASES = {"CP": "CP_I", "CV": "CV_I", "PDDR": "PDDR_QUAD_I",
            "PDDR_I": "PDDR_QUAD_I", "PDDR_II": "PDDR_QUAD_II",
            "PDDR_QUAD": "PDDR_QUAD_I"}

A = Algorithm
STEP_SIZES = {
    A.FB: ("gamma",), A.PPA: ("gamma",),
    A.DR: ("tau",), A.ADMM: ("tau",), A.ADMM_ALT: ("tau",),
    A.LIFTED_ADMM: ("tau",), A.DY: ("tau",),
    A.CP_I: ("tau", "sigma"), A.CP_II: ("tau", "sigma"),
    A.PMM: ("tau", "sigma"), A.LV: ("tau", "sigma"),
    A.PDFP: ("tau", "sigma"), A.CV_I: ("tau", "sigma"),
    A.CV_II: ("tau", "sigma"), A.PD3O: ("tau", "sigma"),
    A.PDDR_QUAD_I: ("tau", "sigma"), A.PDDR_QUAD_II: ("tau", "sigma"),
    A.GCP: ("tau", "sigma", "eta"), A.EGCP: ("tau", "sigma", "eta"),
}


class DivergenceError(ArithmeticError):
    """A NaN or infinite value appeared in an iterate."""

    def __init__(self, iteration, message=None):
        self.iteration = iteration
        super().__init__(message or
                         f"non-finite iterate at iteration {iteration}")


class NormBoundMissing(ValueError):
    """A step-size condition needs an operator norm that is not known."""

    def __init__(self, name, op):
        self.operator = name
        super().__init__(
            f"no norm bound for operator {name!r} ({type(op).__name__}); "
            f"pass norms={{{name!r}: bound}} or attach one with "
            f"with_norm_bound(estimate_norm(op))")


class ParameterRejected(ValueError):
    """The validator rejected the configuration."""

    def __init__(self, report):
        self.report = report
        names = ", ".join(c.name for c in report.violated)
        super().__init__(f"{report.theorem_tag}: violated {names}")


@dataclass
class SolverConfig:
    """Algorithm choice, step sizes and stopping rule.

    Parameters
    ----------
    algorithm : Algorithm or str
    tau, sigma, eta, gamma : float, optional
        Step sizes. Exactly those used by `algorithm` must be set.
    rho_schedule : float or callable
        Constant relaxation parameter, or ``i -> rho_i``.
    max_iter : int
    stop_tol : float
        Threshold of the relative fixed-point residual.
    quadratic_mode : bool
        Use the extended ranges available when ``h`` is quadratic.
    burn_in : int
        Number of leading iterations exempt from the ``[eps, delta - eps]``
        requirement on the schedule.
    """

    algorithm: Algorithm
    tau: float = None
    sigma: float = None
    eta: float = None
    gamma: float = None
    rho_schedule: object = 1.0
    max_iter: int = 1000
    stop_tol: float = 1e-10
    quadratic_mode: bool = False
    burn_in: int = 0

    def __post_init__(self):
        self.algorithm = Algorithm.parse(self.algorithm)
        needed = STEP_SIZES[self.algorithm]
        for name in ("tau", "sigma", "eta", "gamma"):
            val = getattr(self, name)
            if name in needed:
                if val is None:
                    raise ValueError(
                        f"{self.algorithm.value} needs the step size {name}")
                if not (np.isfinite(val) and val > 0):
                    raise ValueError(f"{name} must be positive, got {val}")
                setattr(self, name, float(val))
            elif val is not None:
                raise ValueError(
                    f"{self.algorithm.value} does not use {name}; leave it "
                    f"unset")
        if not callable(self.rho_schedule):
            rho = float(self.rho_schedule)
            if not (np.isfinite(rho) and rho >= 0):
                raise ValueError(f"rho must be nonnegative, got {rho}")
            self.rho_schedule = rho
        if int(self.max_iter) < 0:
            raise ValueError("max_iter must be nonnegative")
        self.max_iter = int(self.max_iter)
        if not self.stop_tol >= 0:
            raise ValueError("stop_tol must be nonnegative")

    def rho_at(self, i):
        if callable(self.rho_schedule):
            return float(self.rho_schedule(i))
        return self.rho_schedule

    def to_dict(self):
        rho = ("callable" if callable(self.rho_schedule)
               else self.rho_schedule)
        d = {"algorithm": self.algorithm.value, "rho_schedule": rho,
             "max_iter": self.max_iter, "stop_tol": self.stop_tol,
             "quadratic_mode": self.quadratic_mode, "burn_in": self.burn_in}
        for name in STEP_SIZES[self.algorithm]:
            d[name] = getattr(self, name)
        return d


@dataclass(frozen=True)
class IterState:
    """Iterate of a splitting algorithm.

    Attributes
    ----------
    primary : ndarray
        ``x``, ``s`` or ``w`` depending on the algorithm.
    duals : tuple of ndarray or BlockVector
    aux : mapping
        Buffers of the economical forms, such as ``l = L^* u``.
    iter : int
    half : mapping
        Read-only values of the last step: ``"z"`` is the unrelaxed image of
        ``(primary, *duals)``, ``"x"`` the primal estimate, plus named
        half-step values such as ``"u"``.
    """

    primary: object
    duals: tuple = ()
    aux: object = field(default_factory=dict)
    iter: int = 0
    half: object = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "duals", tuple(self.duals))
        object.__setattr__(self, "aux", MappingProxyType(dict(self.aux)))
        object.__setattr__(self, "half", MappingProxyType(dict(self.half)))

    def blocks(self):
        return (self.primary,) + self.duals

    def isfinite(self):
        vals = list(self.blocks()) + list(self.aux.values())
        return all(is_finite(v) for v in vals)


def _next(state, primary, duals=(), aux=None, **half):
    return IterState(primary, tuple(duals),
                     state.aux if aux is None else aux, state.iter + 1, half)


def _relax(a, b, rho):
    return a + rho * (b - a)


def _pconj(g, sigma, v):
    """``prox_{sigma g*}(v)`` by the Moreau identity."""
    return v - sigma * g.prox(1.0 / sigma, v / sigma)


def _grad(h, x):
    if h.smooth_info is None:
        raise ContractViolation(f"{h.kind} is not smooth")
    return h.grad(x)


class Tilted(FunSpec):
    """``x -> f(x) + <c, x>``; its prox is ``prox_f(x - tau c)``."""

    kind = "Tilted"

    def __init__(self, f, c):
        self.f = f
        self.c = np.asarray(c, dtype=np.float64)
        self.affine_prox = f.affine_prox
        self.thread_safe = f.thread_safe
        if f.smooth_info is not None:
            self.smooth_info = f.smooth_info

    def prox(self, tau, x):
        return self.f.prox(tau, x - tau * self.c)

    def value(self, x):
        return self.f.value(x) + float(np.dot(self.c, x))

    def grad(self, x):
        return self.f.grad(x) + self.c

    def __repr__(self):
        return f"Tilted({self.f!r})"


# ---------------------------------------------------------------- step maps

def _metric_prox(f, gamma, d, v):
    """``argmin_x f(x) + ||x - v||_D^2 / (2 gamma)`` for diagonal ``D``."""
    if isinstance(f, Zero):
        return np.array(v, dtype=np.float64)
    if isinstance(f, L1):
        t = gamma * f.weight / d
        return np.sign(v) * np.maximum(np.abs(v) - t, 0.0)
    if isinstance(f, Box):
        return np.clip(v, f.lo, f.hi)
    if isinstance(f, SquaredL2):
        return d * v / (d + gamma * f.weight)
    if isinstance(f, LinearTerm):
        return v - gamma * f.c / d
    if isinstance(f, Quadratic):
        return np.linalg.solve(gamma * f._dense + np.diag(d),
                               d * v - gamma * f.c)
    if isinstance(f, AffineIndicator):
        Ad = f._M / d
        lam = np.linalg.lstsq(Ad @ f._M.T, f._M @ v - f.y, rcond=None)[0]
        return v - (f._M.T @ lam) / d
    raise ContractViolation(
        f"no diagonal-metric prox for {f.kind}; use P=None")


def fb_step(state, f, h, gamma, rho=1.0, P=None):
    """Forward-backward step ``x -> prox_{gamma f}(x - gamma grad h(x))``.

    With a diagonal metric ``P`` (positive vector), the backward step is the
    prox of ``f`` in the norm ``||.||_P`` and the forward step is
    ``x - gamma P^{-1} grad h(x)``. The half step exposes the implicit
    subgradient ``(x - x_half) / gamma - grad h(x)`` of ``f`` at ``x_half``
    (for ``P=None``).
    """
    x = state.primary
    gx = _grad(h, x)
    if P is None:
        xh = f.prox(gamma, x - gamma * gx)
        sub = (x - xh) / gamma - gx
    else:
        d = np.broadcast_to(np.asarray(P, dtype=np.float64), np.shape(x))
        if np.any(d <= 0):
            raise ValueError("the metric P must be positive")
        xh = _metric_prox(f, gamma, d, x - gamma * gx / d)
        sub = d * (x - xh) / gamma - gx
    return _next(state, _relax(x, xh, rho), z=(xh,), x=xh, subgradient=sub)


def ppa_step(state, f, gamma, rho=1.0):
    """Proximal point step ``x -> prox_{gamma f}(x)``."""
    x = state.primary
    xh = f.prox(gamma, x)
    return _next(state, _relax(x, xh, rho), z=(xh,), x=xh)


def dr_step(state, f, g, tau, c=None, rho=1.0):
    """Douglas-Rachford step on ``s`` for ``f + g + <c, .>``.

    ``x_half = prox_{tau f}(s - tau c)`` and
    ``s+ = s + rho (prox_{tau g}(2 x_half - s) - x_half)``. The dual
    estimate ``u_half`` in ``dg(x_half)`` is reconstructed from ``s``.
    """
    s = state.primary
    xh = f.prox(tau, s if c is None else s - tau * c)
    y = 2.0 * xh - s
    w = g.prox(tau, y)
    sh = s + (w - xh)
    return _next(state, _relax(s, sh, rho), z=(sh,), x=xh, w=w,
                 u=(y - w) / tau)


def admm_step(state, f, g, tau, rho=1.0):
    """Relaxed ADMM on ``(w, v~)``, equivalent to DR with ``s = w - v~``."""
    w, v = state.primary, state.duals[0]
    xh = f.prox(tau, w - v)
    vh = v + xh - w
    wn = g.prox(tau, xh + vh)
    vn = vh + (rho - 1.0) * (xh - wn)
    return _next(state, wn, (vn,), z=(wn, vh), x=xh, u=vh / tau)


def admm_alt_step(state, f, g, tau, rho=1.0):
    """ADMM with the relaxation inside the multiplier update.

    Converges for ``rho`` in ``(0, (1 + sqrt 5)/2)``. The reported image
    ``z`` is the actual new state, since the unrelaxed image would cost a
    second prox of ``g``.
    """
    w, v = state.primary, state.duals[0]
    xh = f.prox(tau, w - v)
    vn = v + rho * (xh - w)
    wn = g.prox(tau, vn + xh)
    return _next(state, wn, (vn,), z=(wn, vn), x=xh, u=vn / tau)


def lifted_admm_step(state, f, L, g, K, c, tau, rho=1.0):
    """ADMM for ``min f(x) + g(y)`` s.t. ``Lx + Ky = c``, in DR form on ``s``.

    ``x_half = argmin tau f(x) + 1/2 ||Lx - s||^2``,
    ``y+ = argmin tau g(y) + 1/2 ||Ky - c + 2 L x_half - s||^2`` and
    ``s+ = s - rho (L x_half + K y+ - c)``.
    """
    s = state.primary
    lx, xh = prox_postcomposition(f, L, tau, s)
    ky, y = prox_postcomposition(g, K, tau, c - 2.0 * lx + s)
    r = lx + ky - c
    sh = s - r
    return _next(state, s - rho * r, z=(sh,), x=xh, y=y,
                 u=(2.0 * lx - s + ky - c) / tau)


def cp_step(state, f, g, L, tau, sigma, form="I", rho=1.0):
    """Chambolle-Pock step on ``(x, u)``, form I (primal first) or II."""
    x, u = state.primary, state.duals[0]
    if form == "I":
        xh = f.prox(tau, x - tau * L.adjoint(u))
        uh = _pconj(g, sigma, u + sigma * L.apply(2.0 * xh - x))
    elif form == "II":
        uh = _pconj(g, sigma, u + sigma * L.apply(x))
        xh = f.prox(tau, x - tau * L.adjoint(2.0 * uh - u))
    else:
        raise ValueError(f"form must be 'I' or 'II', got {form!r}")
    return _next(state, _relax(x, xh, rho), (_relax(u, uh, rho),),
                 z=(xh, uh), x=xh, u=uh)


def pmm_step(state, g, L, c, tau, sigma, rho=1.0):
    """Proximal method of multipliers for ``g(Lx) + <c, x>``.

    With ``a = L^* u + c``: ``u+ = u + rho (prox_{sigma g*}(u + sigma
    L(x - 2 tau a)) - u)`` and ``x+ = x - rho tau a``.
    """
    x, u = state.primary, state.duals[0]
    a = L.adjoint(u) + c
    xh = x - tau * a
    uh = _pconj(g, sigma, u + sigma * L.apply(x - 2.0 * tau * a))
    return _next(state, x - rho * tau * a, (_relax(u, uh, rho),),
                 z=(xh, uh), x=xh, u=uh)


def lv_step(state, g, L, h, tau, sigma, rho=1.0, buffered=False):
    """Loris-Verhoeven step for ``g(Lx) + h(x)``.

    ``u_half = prox_{sigma g*}(u + sigma L(x - tau grad h(x) - tau L^* u))``
    and ``x+ = x - rho tau (grad h(x) + L^* u_half)``. The buffered form
    carries ``l = L^* u`` in ``aux`` and calls ``grad h`` and ``L^*`` once.
    """
    x, u = state.primary, state.duals[0]
    b = _grad(h, x)
    if buffered:
        l = state.aux["l"]
        uh = _pconj(g, sigma, u + sigma * L.apply(x - tau * (b + l)))
        lh = L.adjoint(uh)
        xh = x - tau * (b + lh)
        return _next(state, x - rho * tau * (b + lh), (_relax(u, uh, rho),),
                     {"l": _relax(l, lh, rho)}, z=(xh, uh), x=xh, u=uh)
    uh = _pconj(g, sigma,
                u + sigma * L.apply(x - tau * b - tau * L.adjoint(u)))
    d = b + L.adjoint(uh)
    xh = x - tau * d
    return _next(state, x - rho * tau * d, (_relax(u, uh, rho),),
                 z=(xh, uh), x=xh, u=uh)


def pdfp_step(state, f, g, L, h, tau, sigma, rho=1.0):
    """PDFP step for ``f(x) + g(Lx) + h(x)``: two prox of ``f`` per step."""
    x, u = state.primary, state.duals[0]
    v = x - tau * _grad(h, x)
    xt = f.prox(tau, v - tau * L.adjoint(u))
    uh = _pconj(g, sigma, u + sigma * L.apply(xt))
    xh = f.prox(tau, v - tau * L.adjoint(uh))
    return _next(state, _relax(x, xh, rho), (_relax(u, uh, rho),),
                 z=(xh, uh), x=xh, u=uh, x_tilde=xt)


def gcp_step(state, f, K, g, L, c, tau, sigma, eta, rho=1.0,
             efficient=False):
    """Generalized Chambolle-Pock step for ``f(Kx) + g(Lx) + <c, x>``.

    The state is ``(x, (u, v))``. With ``efficient=True`` the primary block
    is ``x~ = x / tau`` and ``aux`` carries ``b = K^* v`` and
    ``l = L^* u + b + c``, so that each operator is applied once per step.
    """
    u, v = state.duals
    if efficient:
        xt = state.primary
        b, l = state.aux["b"], state.aux["l"]
        vh = _pconj(f, eta, v + eta * tau * K.apply(xt - l))
        lh = l + K.adjoint(vh) - b
        uh = _pconj(g, sigma, u + sigma * tau * L.apply(xt - 2.0 * lh))
        un = _relax(u, uh, rho)
        bn = b + rho * (lh - l)
        ln = L.adjoint(un) + bn + c
        return _next(state, xt - rho * lh, (un, _relax(v, vh, rho)),
                     {"b": bn, "l": ln}, z=(xt - lh, uh, vh),
                     x=tau * (xt - lh), u=uh, v=vh)
    x = state.primary
    lu = L.adjoint(u)
    vh = _pconj(f, eta,
                v + eta * K.apply(x - tau * (lu + K.adjoint(v) + c)))
    xh = x - tau * (lu + K.adjoint(vh) + c)
    uh = _pconj(g, sigma, u + sigma * L.apply(2.0 * xh - x))
    return _next(state, _relax(x, xh, rho),
                 (_relax(u, uh, rho), _relax(v, vh, rho)),
                 z=(xh, uh, vh), x=xh, u=uh, v=vh)


def egcp_step(state, f, K, g, L, c, Qdual, t, tau, sigma, eta, rho=1.0):
    """Generalized Chambolle-Pock step with a smooth dual term.

    Solves ``f(Kx) + g(Lx) + <c, x>`` where ``f*`` is replaced by
    ``f* + 1/2 <., Qdual .> + <t, .>``; the ``v`` prox carries the forward
    term ``-eta (Qdual v + t)``.
    """
    x = state.primary
    u, v = state.duals
    fwd = (0.0 if Qdual is None else Qdual.apply(v)) + (0.0 if t is None
                                                        else t)
    lu = L.adjoint(u)
    vh = _pconj(f, eta, v + eta * K.apply(x - tau * (lu + K.adjoint(v) + c))
                - eta * fwd)
    xh = x - tau * (lu + K.adjoint(vh) + c)
    uh = _pconj(g, sigma, u + sigma * L.apply(2.0 * xh - x))
    return _next(state, _relax(x, xh, rho),
                 (_relax(u, uh, rho), _relax(v, vh, rho)),
                 z=(xh, uh, vh), x=xh, u=uh, v=vh)


def cv_step(state, f, g, L, h, tau, sigma, form="I", rho=1.0):
    """Condat-Vu step for ``f(x) + g(Lx) + h(x)``, form I or II."""
    x, u = state.primary, state.duals[0]
    v = x - tau * _grad(h, x)
    if form == "I":
        xh = f.prox(tau, v - tau * L.adjoint(u))
        uh = _pconj(g, sigma, u + sigma * L.apply(2.0 * xh - x))
    elif form == "II":
        uh = _pconj(g, sigma, u + sigma * L.apply(x))
        xh = f.prox(tau, v - tau * L.adjoint(2.0 * uh - u))
    else:
        raise ValueError(f"form must be 'I' or 'II', got {form!r}")
    return _next(state, _relax(x, xh, rho), (_relax(u, uh, rho),),
                 z=(xh, uh), x=xh, u=uh)


def pd3o_step(state, f, g, L, h, tau, sigma, rho=1.0, compact=False):
    """PD3O step for ``f(x) + g(Lx) + h(x)`` on ``(s, u)``.

    With ``compact=True`` the primary block is ``s~ = s + tau L^* u`` and
    ``grad h``, ``L`` and ``L^*`` are each called once.
    """
    u = state.duals[0]
    if compact:
        st = state.primary
        xh = f.prox(tau, st - tau * L.adjoint(u))
        a = xh - tau * _grad(h, xh) - st
        uh = _pconj(g, sigma, u + sigma * L.apply(xh + a))
        return _next(state, st + rho * a, (_relax(u, uh, rho),),
                     z=(st + a, uh), x=xh, u=uh)
    s = state.primary
    xh = f.prox(tau, s)
    fwd = xh - tau * _grad(h, xh)
    uh = _pconj(g, sigma,
                u + sigma * L.apply(xh + fwd - s - tau * L.adjoint(u)))
    sh = fwd - tau * L.adjoint(uh)
    return _next(state, _relax(s, sh, rho), (_relax(u, uh, rho),),
                 z=(sh, uh), x=xh, u=uh)


def dy_step(state, f, g, h, tau, rho=1.0):
    """Davis-Yin step for ``f + g + h`` on ``s``."""
    s = state.primary
    xh = f.prox(tau, s)
    y = 2.0 * xh - s - tau * _grad(h, xh)
    w = g.prox(tau, y)
    sh = s + w - xh
    return _next(state, _relax(s, sh, rho), z=(sh,), x=xh, w=w)


def pddr_quad_step(state, f, g, L, Q, c, tau, sigma, form="I", rho=1.0):
    """Primal-dual Douglas-Rachford step for ``f + g(L.) + 1/2<Q.,.> + <c,.>``.

    The quadratic is split in two halves, one per resolvent, so ``Q`` is
    applied exactly twice per step in both forms.
    """
    s, u = state.primary, state.duals[0]
    half = 0.5 * tau
    Qs = Q.apply(s)
    if form == "I":
        xh = f.prox(tau, s - half * Qs - tau * c)
        w = 2.0 * xh - s
        Qw = Q.apply(w)
        uh = _pconj(g, sigma,
                    u + sigma * L.apply(w - half * Qw - tau * L.adjoint(u)))
        sh = xh - half * Qw - tau * L.adjoint(uh)
        return _next(state, _relax(s, sh, rho), (_relax(u, uh, rho),),
                     z=(sh, uh), x=xh, u=uh)
    if form != "II":
        raise ValueError(f"form must be 'I' or 'II', got {form!r}")
    p = s - half * Qs
    uh = _pconj(g, sigma, u + sigma * L.apply(p - tau * L.adjoint(u)))
    yh = p - tau * L.adjoint(uh)
    w = 2.0 * yh - s
    xh = f.prox(tau, w - half * Q.apply(w) - tau * c)
    sh = s + xh - yh
    return _next(state, _relax(s, sh, rho), (_relax(u, uh, rho),),
                 z=(sh, uh), x=xh, u=uh, y=yh)


def km_step(T):
    """Turn a plain operator ``z -> T z`` into a step map."""
    def step(state, rho=1.0):
        z = state.primary
        tz = T(z)
        return _next(state, _relax(z, tz, rho), z=(tz,), x=tz)
    return step


# ------------------------------------------------------------------- driver

def _residual(state, image):
    num = 0.0
    den = 0.0
    for a, b in zip(state.blocks(), image):
        num += norm(b - a) ** 2
        den += norm(a) ** 2
    return math.sqrt(num) / (1.0 + math.sqrt(den))


def relaxed_drive(step, state, cfg, hooks=()):
    """Iterate a step map with the relaxation schedule of `cfg`.

    Yields the state after each relaxed update, with the relative residual
    ``||T z - z|| / (1 + ||z||)`` stored in ``half["residual"]``. Stops after
    ``cfg.max_iter`` updates or once the residual is at most
    ``cfg.stop_tol``.

    Raises
    ------
    DivergenceError
        If an iterate contains NaN or Inf; carries the iteration index.
    """
    for i in range(cfg.max_iter):
        rho = cfg.rho_at(i)
        with np.errstate(over="ignore", invalid="ignore"):
            new = step(state, rho)
        if not new.isfinite():
            raise DivergenceError(new.iter)
        res = _residual(state, new.half["z"])
        new = replace(new, half={**new.half, "residual": res, "rho": rho})
        for hook in hooks:
            hook(new)
        yield new
        if res <= cfg.stop_tol:
            return
        state = new


@dataclass
class RunResult:
    """Outcome of a run.

    ``status`` is ``"converged"`` (residual below tolerance), ``"gap"``
    (objective gap below ``gap_tol``) or ``"max_iter"``.
    """

    status: str
    state: IterState
    iterations: int
    residual: float
    x: object = None
    objective: float = None
    report: object = None
    unsafe: bool = False
    seconds: float = 0.0


def run(step, state, cfg, hooks=(), stop=None):
    """Drive `step` to completion and return a :class:`RunResult`.

    `stop` is an optional predicate on the state, checked after each update,
    that ends the run with status ``"gap"``.
    """
    t0 = time.perf_counter()
    last = state
    res = math.inf
    status = "max_iter"
    for last in relaxed_drive(step, state, cfg, hooks):
        res = last.half["residual"]
        if res <= cfg.stop_tol:
            status = "converged"
            break
        if stop is not None and stop(last):
            status = "gap"
            break
    return RunResult(status, last, last.iter - state.iter, res,
                     x=primal_estimate(last),
                     seconds=time.perf_counter() - t0)


# ------------------------------------------------------------ problem roles

@dataclass(frozen=True)
class Roles:
    """Functions and operators of a problem, as one algorithm reads them.

    Generic template ``f(Kx) + g(Lx) + h(x) + <c, x>``; ``Q``, ``c`` hold
    the quadratic part of ``h`` for the algorithms that need it, and
    ``u_term`` tells whether ``g`` is the problem's term function (so the
    oracle dual applies to it).
    """

    f: FunSpec
    g: FunSpec
    L: LinOp
    h: FunSpec
    n: int
    K: LinOp = None
    c: np.ndarray = None
    Q: LinOp = None
    g_is_term: bool = True


def _zero_op(n):
    return DenseMatrix(np.zeros((n, n)), norm_bound=0.0)


def _quadratic_parts(h, n):
    if isinstance(h, Zero):
        return _zero_op(n), np.zeros(n)
    if isinstance(h, LinearTerm):
        return _zero_op(n), h.c
    if isinstance(h, Quadratic):
        return h.Q, h.c
    if isinstance(h, SquaredL2):
        return DenseMatrix(h.weight * np.eye(n), norm_bound=h.weight), \
            np.zeros(n)
    return None


def _is_identity(L):
    return isinstance(L, Identity)


def _one_term(problem, alg):
    if len(problem.terms) > 1:
        raise ContractViolation(
            f"{alg.value} takes a single composite term; lift the "
            f"{len(problem.terms)} terms with proxsplit.product.lift first")
    if problem.terms:
        return problem.terms[0]
    return Zero(), Identity(problem.n)


def split_roles(problem, algorithm):
    """Map a :class:`ProblemSpec` to the roles `algorithm` works with.

    Raises
    ------
    ContractViolation
        If the problem does not have the structure the algorithm handles.
    """
    alg = Algorithm.parse(algorithm)
    n = problem.n
    f, h = problem.f, problem.h
    zero_c = np.zeros(n)

    if alg in (A.FB, A.PPA):
        funcs = [] if isinstance(f, Zero) else [f]
        for g, L in problem.terms:
            if isinstance(g, Zero):
                continue
            if not _is_identity(L):
                raise ContractViolation(
                    f"{alg.value} cannot handle g(Lx) with L != Id")
            funcs.append(g)
        if len(funcs) > 1:
            raise ContractViolation(
                f"{alg.value} handles one nonsmooth function, got "
                f"{len(funcs)}")
        fr = funcs[0] if funcs else Zero()
        if alg is A.PPA and not isinstance(h, Zero):
            if len(funcs) == 0:
                fr, h = h, Zero()
            else:
                raise ContractViolation(
                    "PPA has no gradient step; h must be Zero")
        return Roles(f=fr, g=Zero(), L=Identity(n), h=h, n=n, c=zero_c,
                     g_is_term=False)

    if alg in (A.DR, A.ADMM, A.ADMM_ALT, A.DY):
        funcs = [] if isinstance(f, Zero) else [f]
        tagged = [False] if funcs else []
        for g, L in problem.terms:
            if not _is_identity(L):
                raise ContractViolation(
                    f"{alg.value} needs L = Id; use a primal-dual algorithm")
            if not isinstance(g, Zero):
                funcs.append(g)
                tagged.append(True)
        c = zero_c
        hh = Zero()
        if alg is A.DY:
            hh = h
        elif isinstance(h, LinearTerm) and alg is A.DR:
            c = h.c
        elif not isinstance(h, Zero):
            funcs.insert(0, h)
            tagged.insert(0, False)
        if len(funcs) > 2:
            raise ContractViolation(
                f"{alg.value} splits two functions, got {len(funcs)}")
        while len(funcs) < 2:
            funcs.append(Zero())
            tagged.append(False)
        return Roles(f=funcs[0], g=funcs[1], L=Identity(n), h=hh, n=n, c=c,
                     g_is_term=tagged[1])

    if alg is A.LIFTED_ADMM:
        g, L = _one_term(problem, alg)
        if isinstance(f, Zero):
            fr = h
        elif isinstance(h, Zero):
            fr = f
        else:
            raise ContractViolation(
                "LIFTED_ADMM needs f or h to be Zero")
        m = L.out_dim
        return Roles(f=fr, g=g, L=L, h=Zero(), n=n,
                     K=ScaledSum([Identity(m)], [-1.0]),
                     c=np.zeros(m))

    if alg in (A.GCP, A.EGCP):
        if isinstance(h, (Zero, LinearTerm)):
            c = zero_c if isinstance(h, Zero) else h.c
            hsmooth = None
        else:
            c = zero_c
            hsmooth = h
        terms = list(problem.terms)
        if len(terms) == 2 and isinstance(f, Zero) and hsmooth is None:
            (fr, K), (g, L) = terms
            return Roles(f=fr, g=g, L=L, h=Zero(), n=n, K=K, c=c)
        g, L = _one_term(problem, alg)
        if hsmooth is not None:
            if not isinstance(f, Zero):
                raise ContractViolation(
                    f"{alg.value} has no slot for both f and a nonlinear h")
            fr = hsmooth
        else:
            fr = f
        return Roles(f=fr, g=g, L=L, h=Zero(), n=n, K=Identity(n), c=c)

    g, L = _one_term(problem, alg)
    if alg in (A.CP_I, A.CP_II):
        if isinstance(h, Zero):
            fr = f
        elif isinstance(f, Zero):
            fr = h
        elif isinstance(h, LinearTerm):
            fr = Tilted(f, h.c)
        else:
            raise ContractViolation(
                "CP has no gradient step; use CV or PD3O when both f and "
                "h are present")
        return Roles(f=fr, g=g, L=L, h=Zero(), n=n, c=zero_c)
    if alg is A.PMM:
        if not isinstance(f, Zero) or not isinstance(h, (Zero, LinearTerm)):
            raise ContractViolation(
                "PMM solves g(Lx) + <c, x>: f must be Zero and h linear")
        c = zero_c if isinstance(h, Zero) else h.c
        return Roles(f=Zero(), g=g, L=L, h=Zero(), n=n, c=c)
    if alg is A.LV:
        if not isinstance(f, Zero):
            raise ContractViolation(
                "LV has no prox of f; f must be Zero (use PDFP or PD3O)")
        return Roles(f=Zero(), g=g, L=L, h=h, n=n, c=zero_c)
    if alg in (A.PDDR_QUAD_I, A.PDDR_QUAD_II):
        parts = _quadratic_parts(h, n)
        if parts is None:
            raise ContractViolation(
                f"{alg.value} needs a quadratic h, got {h.kind}")
        Q, c = parts
        return Roles(f=f, g=g, L=L, h=h, n=n, Q=Q, c=c)
    return Roles(f=f, g=g, L=L, h=h, n=n, c=zero_c)


# ---------------------------------------------------------------- validator

@dataclass(frozen=True)
class Condition:
    """One inequality of a theorem, evaluated."""

    name: str
    lhs: float
    op: str
    rhs: float
    holds: bool

    def to_dict(self):
        return {"name": self.name, "lhs": self.lhs, "op": self.op,
                "rhs": self.rhs, "holds": self.holds}


def _cond(name, lhs, op, rhs):
    lhs, rhs = float(lhs), float(rhs)
    slack = CMP_TOL * max(1.0, abs(rhs))
    if op == "<":
        ok = lhs < rhs - slack
    elif op == "<=":
        ok = lhs <= rhs + slack
    elif op == ">":
        ok = lhs > rhs
    elif op == ">=":
        ok = lhs >= rhs - slack
    elif op == "==":
        ok = abs(lhs - rhs) <= slack
    else:
        raise ValueError(op)
    return Condition(name, lhs, op, rhs, bool(ok))


@dataclass
class ValidationReport:
    """Verdict of :func:`validate_params`.

    ``delta`` is the upper bound on the relaxation parameters; ``violated``
    lists the conditions that fail, and is empty iff ``admissible``.
    """

    admissible: bool
    delta: float
    violated: list
    theorem_tag: str
    conditions: list = field(default_factory=list)
    rho_pinned: bool = False
    algorithm: str = ""

    def to_dict(self):
        return {"admissible": self.admissible, "delta": self.delta,
                "theorem_tag": self.theorem_tag,
                "algorithm": self.algorithm, "rho_pinned": self.rho_pinned,
                "conditions": [c.to_dict() for c in self.conditions],
                "violated": [c.to_dict() for c in self.violated]}


def _sym_norm(M):
    """Spectral norm of a symmetric matrix."""
    M = 0.5 * (M + M.T)
    if M.size == 0:
        return 0.0
    return float(np.max(np.abs(np.linalg.eigvalsh(M))))


class _Ctx:
    def __init__(self, cfg, problem, roles, norms):
        self.cfg = cfg
        self.problem = problem
        self.roles = roles
        self.norms = dict(norms or {})
        self.beta = float(roles.h.smooth_info.lipschitz)

    def opnorm(self, name):
        op = getattr(self.roles, name)
        if name in self.norms:
            return float(self.norms[name])
        if op.norm_bound is None:
            raise NormBoundMissing(name, op)
        return op.norm_bound

    def tau_sigma_L2(self):
        c = self.cfg
        return c.sigma * c.tau * self.opnorm("L") ** 2


def _tau_beta(ctx, strict=True, tag_op=None):
    cfg, beta = ctx.cfg, ctx.beta
    op = tag_op or ("<" if strict else "<=")
    return _cond("tau*beta/2 < 1 (tau in (0, 2/beta))", cfg.tau * beta / 2.0,
                 op, 1.0), 2.0 - cfg.tau * beta / 2.0


def _thm_fb_general(ctx):
    g, b = ctx.cfg.gamma, ctx.beta
    return [_cond("gamma in (0, 2/beta): gamma*beta/2 < 1", g * b / 2.0, "<",
                  1.0)], 2.0 - g * b / 2.0, False


def _thm_fb_quadratic(ctx):
    g, b = ctx.cfg.gamma, ctx.beta
    return [_cond("gamma in (0, 1/beta]: gamma*beta <= 1", g * b, "<=",
                  1.0)], 2.0, False


def _thm_always(ctx):
    return [], 2.0, False


def _thm_lv(strict):
    def thm(ctx):
        c, d = _tau_beta(ctx)
        op = "<" if strict else "<="
        return [c, _cond(f"sigma*tau*||L||^2 {op} 1", ctx.tau_sigma_L2(), op,
                         1.0)], d, False
    return thm


def _thm_lv_quadratic(ctx):
    cfg = ctx.cfg
    return [_cond("tau*beta <= 1", cfg.tau * ctx.beta, "<=", 1.0),
            _cond("sigma*tau*||L||^2 <= 1", ctx.tau_sigma_L2(), "<=", 1.0)
            ], 2.0, False


def _thm_cp(strict):
    def thm(ctx):
        op = "<" if strict else "<="
        return [_cond(f"sigma*tau*||L||^2 {op} 1", ctx.tau_sigma_L2(), op,
                      1.0)], 2.0, False
    return thm


def _thm_pdfp_affine(ctx):
    c, d = _tau_beta(ctx)
    return [_cond("prox of f is affine", float(ctx.roles.f.affine_prox), "==",
                  1.0), c,
            _cond("sigma*tau*||L||^2 < 1", ctx.tau_sigma_L2(), "<", 1.0)
            ], d, False


def _thm_pdfp_general(ctx):
    c, d = _tau_beta(ctx)
    return [c, _cond("sigma*tau*||L||^2 < 1", ctx.tau_sigma_L2(), "<", 1.0)
            ], 1.0, True


def _thm_gcp(strict):
    def thm(ctx):
        op = "<" if strict else "<="
        cfg = ctx.cfg
        return [_cond(f"tau*sigma*||L||^2 {op} 1", ctx.tau_sigma_L2(), op,
                      1.0),
                _cond(f"tau*eta*||K||^2 {op} 1",
                      cfg.tau * cfg.eta * ctx.opnorm("K") ** 2, op, 1.0)
                ], 2.0, False
    return thm


def _thm_cv(ctx):
    cfg, b = ctx.cfg, ctx.beta
    sl2 = cfg.sigma * ctx.opnorm("L") ** 2
    lhs = cfg.tau * (sl2 + b / 2.0)
    gap = 1.0 / cfg.tau - sl2
    delta = 2.0 - (b / 2.0) / gap if gap > 0 else 0.0
    return [_cond("tau*(sigma*||L||^2 + beta/2) < 1", lhs, "<", 1.0)
            ], delta, False


def _thm_cv_quadratic(ctx):
    cfg, r = ctx.cfg, ctx.roles
    Q = _quadratic_parts(r.h, r.n)[0].to_dense()
    Ld = r.L.to_dense()
    return [_cond("tau*sigma*||L||^2 < 1", ctx.tau_sigma_L2(), "<", 1.0),
            _cond("tau*||Q + sigma L*L|| <= 1",
                  cfg.tau * _sym_norm(Q + cfg.sigma * Ld.T @ _wdiag(r.L)
                                      @ Ld), "<=", 1.0)], 2.0, False


def _wdiag(L):
    """Gram weights of the codomain: identity, or the block weights."""
    if isinstance(L, Stacked):
        return np.diag(np.concatenate([np.full(d, w) for d, w in
                                       zip(L.out_dim, L.weights)]))
    return np.eye(L.out_dim)


def _thm_egcp(ctx):
    cfg, r = ctx.cfg, ctx.roles
    Kd = r.K.to_dense()
    Qd = ctx.norms.get("Qdual")
    Qd = np.zeros((Kd.shape[0],) * 2) if Qd is None else np.asarray(Qd)
    return [_cond("tau*sigma*||L||^2 < 1", ctx.tau_sigma_L2(), "<", 1.0),
            _cond("tau*eta*||K||^2 < 1",
                  cfg.tau * cfg.eta * ctx.opnorm("K") ** 2, "<", 1.0),
            _cond("eta*||tau K K* + Q|| <= 1",
                  cfg.eta * _sym_norm(cfg.tau * Kd @ Kd.T + Qd), "<=", 1.0)
            ], 2.0, False


def _thm_pd3o(strict):
    def thm(ctx):
        c, d = _tau_beta(ctx)
        op = "<" if strict else "<="
        return [c, _cond(f"sigma*tau*||L||^2 {op} 1", ctx.tau_sigma_L2(), op,
                         1.0)], d, False
    return thm


def _thm_dy(ctx):
    c, d = _tau_beta(ctx)
    return [c], d, False


def _thm_pddr(ctx):
    c, _ = _tau_beta(ctx)
    return [c, _cond("sigma*tau*||L||^2 < 1", ctx.tau_sigma_L2(), "<", 1.0)
            ], 2.0, False


def _thm_admm_alt(ctx):
    return [], GOLDEN, False


# algorithm -> [(tag, parallel tag, quadratic?, evaluator)], most permissive
# general theorem last among the non-quadratic ones
THEOREMS = {
    A.FB: [("Thm 2.7", None, False, _thm_fb_general),
           ("Thm 2.8", None, True, _thm_fb_quadratic)],
    A.PPA: [("Thm 2.3", None, False, _thm_always)],
    A.DR: [("Thm 4.4", "Thm 8.1", False, _thm_always)],
    A.ADMM: [("Thm 4.6", None, False, _thm_always)],
    A.ADMM_ALT: [("ADMM-ALT golden-ratio range", None, False,
                  _thm_admm_alt)],
    A.LIFTED_ADMM: [("Thm 4.7", None, False, _thm_always)],
    A.CP_I: [("Thm 4.1", None, False, _thm_cp(True)),
             ("Thm 4.2", "Thm 8.2", False, _thm_cp(False))],
    A.CP_II: [("Thm 4.1", None, False, _thm_cp(True)),
              ("Thm 4.2", "Thm 8.2", False, _thm_cp(False))],
    A.PMM: [("Thm 4.3", None, False, _thm_cp(False))],
    A.LV: [("Thm 3.1", "Thm 8.3", False, _thm_lv(True)),
           ("Thm 3.2", "Thm 8.4", False, _thm_lv(False)),
           ("Thm 3.3", "Thm 8.5", True, _thm_lv_quadratic)],
    A.PDFP: [("Thm 3.5", None, False, _thm_pdfp_general),
             ("Thm 3.4", None, False, _thm_pdfp_affine)],
    A.GCP: [("Thm 5.1", None, False, _thm_gcp(True)),
            ("Thm 5.2", None, False, _thm_gcp(False))],
    A.EGCP: [("Thm 6.3", None, False, _thm_egcp)],
    A.CV_I: [("Thm 6.1", "Thm 8.6", False, _thm_cv),
             ("Thm 6.2", "Thm 8.7", True, _thm_cv_quadratic)],
    A.CV_II: [("Thm 6.1", "Thm 8.6", False, _thm_cv),
              ("Thm 6.2", "Thm 8.7", True, _thm_cv_quadratic)],
    A.PD3O: [("Thm 7.1", None, False, _thm_pd3o(True)),
             ("Thm 7.2", "Thm 8.9", False, _thm_pd3o(False))],
    A.DY: [("Thm 7.3", "Thm 8.8", False, _thm_dy)],
    A.PDDR_QUAD_I: [("Thm 7.4", None, False, _thm_pddr)],
    A.PDDR_QUAD_II: [("Thm 7.4", None, False, _thm_pddr)],
}


def _pick_theorem(alg, roles, cfg, theorem):
    table = THEOREMS[alg]
    if theorem is not None:
        for entry in table:
            if theorem in (entry[0], entry[1]):
                return entry
        tags = ", ".join(e[0] for e in table)
        raise ValueError(f"{theorem!r} does not cover {alg.value}; "
                         f"choose among {tags}")
    if cfg.quadratic_mode:
        quad = [e for e in table if e[2]]
        if quad:
            return quad[-1]
    general = [e for e in table if not e[2]]
    if alg is A.PDFP:
        return general[1] if roles.f.affine_prox else general[0]
    return general[-1]


def _rho_conditions(cfg, delta, pinned, alg):
    if pinned:
        vals = _rho_samples(cfg)
        worst = max(vals, key=lambda r: abs(r - 1.0))
        return [_cond("rho == 1 (relaxation not covered)", worst, "==", 1.0)]
    lo_eps = EPS_RHO
    if not callable(cfg.rho_schedule):
        r = cfg.rho_schedule
        return [_cond("rho >= eps", r, ">=", lo_eps),
                _cond("rho <= delta - eps", r, "<=", delta - lo_eps)]
    vals = _rho_samples(cfg)
    late = vals[cfg.burn_in:] or [1.0]
    early = vals[:cfg.burn_in] or [0.0]
    return [_cond("rho >= eps after burn-in", min(late), ">=", lo_eps),
            _cond("rho <= delta - eps after burn-in", max(late), "<=",
                  delta - lo_eps),
            _cond("rho >= 0 during burn-in", min(early), ">=", 0.0),
            _cond("rho <= delta during burn-in", max(early), "<=", delta)]


def _rho_samples(cfg, cap=100000):
    if not callable(cfg.rho_schedule):
        return [cfg.rho_schedule]
    return [cfg.rho_at(i) for i in range(max(1, min(cfg.max_iter, cap)))]


def validate_params(cfg, problem, norms=None, theorem=None):
    """Check a configuration against the convergence theorem that covers it.

    Parameters
    ----------
    cfg : SolverConfig
    problem : ProblemSpec
    norms : dict, optional
        Operator-norm bounds by role name (``"L"``, ``"K"``); default to the
        ``norm_bound`` of the operators. ``"Qdual"`` may hold the dual
        quadratic of EGCP as a matrix.
    theorem : str, optional
        Evaluate this theorem instead of the most permissive applicable one,
        e.g. ``"Thm 3.1"`` for the strict-inequality version.

    Returns
    -------
    ValidationReport

    Raises
    ------
    ContractViolation
        If ``quadratic_mode`` is set while ``h`` is not quadratic, or the
        problem does not fit the algorithm.
    NormBoundMissing
        If a needed operator norm is unknown.
    """
    alg = cfg.algorithm
    if cfg.quadratic_mode and not problem.h.smooth_info.is_quadratic:
        raise ContractViolation(
            f"quadratic_mode needs a quadratic h, got {problem.h.kind}")
    roles = split_roles(problem, alg)
    tag, ptag, quad, thm = _pick_theorem(alg, roles, cfg, theorem)
    if quad and not problem.h.smooth_info.is_quadratic:
        raise ContractViolation(f"{tag} needs a quadratic h")
    conds, delta, pinned = thm(_Ctx(cfg, problem, roles, norms))
    delta = min(2.0, float(delta))
    if not delta > 0:
        # the step-size condition already fails; keep delta in (0, 2]
        delta = float(np.finfo(float).eps)
    conds = list(conds) + _rho_conditions(cfg, delta, pinned, alg)
    violated = [c for c in conds if not c.holds]
    lifted = isinstance(roles.L, Stacked) and len(roles.L.ops) > 1
    shown = ptag if (lifted and ptag) else tag
    return ValidationReport(not violated, delta, violated, shown, conds,
                            pinned, alg.value)


# ----------------------------------------------------------------- assembly

def make_step(algorithm, roles, cfg, buffered=False, P=None):
    """Bind a step map to the roles and step sizes of a configuration.

    ``buffered`` selects the economical forms of LV, GCP and PD3O.
    """
    alg = Algorithm.parse(algorithm)
    r = roles
    t, s, e = cfg.tau, cfg.sigma, cfg.eta
    table = {
        A.FB: lambda z, p: fb_step(z, r.f, r.h, cfg.gamma, p, P),
        A.PPA: lambda z, p: ppa_step(z, r.f, cfg.gamma, p),
        A.DR: lambda z, p: dr_step(z, r.f, r.g, t, r.c, p),
        A.ADMM: lambda z, p: admm_step(z, r.f, r.g, t, p),
        A.ADMM_ALT: lambda z, p: admm_alt_step(z, r.f, r.g, t, p),
        A.LIFTED_ADMM: lambda z, p: lifted_admm_step(z, r.f, r.L, r.g, r.K,
                                                     r.c, t, p),
        A.CP_I: lambda z, p: cp_step(z, r.f, r.g, r.L, t, s, "I", p),
        A.CP_II: lambda z, p: cp_step(z, r.f, r.g, r.L, t, s, "II", p),
        A.PMM: lambda z, p: pmm_step(z, r.g, r.L, r.c, t, s, p),
        A.LV: lambda z, p: lv_step(z, r.g, r.L, r.h, t, s, p, buffered),
        A.PDFP: lambda z, p: pdfp_step(z, r.f, r.g, r.L, r.h, t, s, p),
        A.GCP: lambda z, p: gcp_step(z, r.f, r.K, r.g, r.L, r.c, t, s, e, p,
                                     buffered),
        A.EGCP: lambda z, p: egcp_step(z, r.f, r.K, r.g, r.L, r.c, None,
                                       None, t, s, e, p),
        A.CV_I: lambda z, p: cv_step(z, r.f, r.g, r.L, r.h, t, s, "I", p),
        A.CV_II: lambda z, p: cv_step(z, r.f, r.g, r.L, r.h, t, s, "II", p),
        A.PD3O: lambda z, p: pd3o_step(z, r.f, r.g, r.L, r.h, t, s, p,
                                       buffered),
        A.DY: lambda z, p: dy_step(z, r.f, r.g, r.h, t, p),
        A.PDDR_QUAD_I: lambda z, p: pddr_quad_step(z, r.f, r.g, r.L, r.Q,
                                                   r.c, t, s, "I", p),
        A.PDDR_QUAD_II: lambda z, p: pddr_quad_step(z, r.f, r.g, r.L, r.Q,
                                                    r.c, t, s, "II", p),
    }
    return table[alg]


def _dual_zero(L):
    if isinstance(L.out_dim, tuple):
        return BlockVector([np.zeros(d) for d in L.out_dim], L.weights)
    return np.zeros(L.out_dim)


def init_state(algorithm, roles, cfg, x0=None, u0=None, v0=None,
               buffered=False):
    """Starting state from a primal guess and optional duals (zeros)."""
    alg = Algorithm.parse(algorithm)
    r = roles
    x = np.zeros(r.n) if x0 is None else np.array(x0, dtype=np.float64)
    if alg in (A.FB, A.PPA, A.DR, A.DY):
        return IterState(x)
    if alg in (A.ADMM, A.ADMM_ALT):
        return IterState(x, (np.zeros(r.n),))
    if alg is A.LIFTED_ADMM:
        return IterState(r.L.apply(x))
    u = _dual_zero(r.L) if u0 is None else u0
    if alg in (A.GCP, A.EGCP):
        v = np.zeros(r.K.out_dim) if v0 is None else v0
        if alg is A.GCP and buffered:
            b = r.K.adjoint(v)
            return IterState(x / cfg.tau, (u, v),
                             {"b": b, "l": r.L.adjoint(u) + b + r.c})
        return IterState(x, (u, v))
    if alg is A.LV and buffered:
        return IterState(x, (u,), {"l": r.L.adjoint(u)})
    if alg is A.PD3O and buffered:
        return IterState(x + cfg.tau * r.L.adjoint(u), (u,))
    return IterState(x, (u,))


def primal_estimate(state):
    """Primal estimate of the last step, or the primary block."""
    if "x" in state.half:
        return state.half["x"]
    return state.primary


# ------------------------------------------------- fixed points and metrics

def _g_dual(roles, x_star, u_term):
    """Element ``u`` of ``dg(x*)`` with ``0 in df(x*) + u + c`` (L = Id)."""
    r = roles
    if r.g_is_term and u_term is not None:
        return np.asarray(u_term, dtype=np.float64)
    if r.f.smooth_info is not None:
        return -r.f.grad(x_star) - r.c - (0.0 if isinstance(r.h, Zero)
                                         else r.h.grad(x_star))
    if r.g.smooth_info is not None:
        return r.g.grad(x_star)
    raise ContractViolation("cannot infer the dual of g at the solution")


def reference_state(algorithm, roles, cfg, x_star, u_star=None,
                    buffered=False):
    """Fixed point of the step map that corresponds to a primal-dual solution.

    Parameters
    ----------
    x_star : ndarray
        Primal solution.
    u_star : ndarray, optional
        Dual solution of the problem's composite term (``u* in
        dg(L x*)``); zero when the problem has no term.
    """
    alg = Algorithm.parse(algorithm)
    r = roles
    x = np.asarray(x_star, dtype=np.float64)
    t = cfg.tau
    if alg in (A.FB, A.PPA):
        return IterState(x)
    if alg in (A.DR, A.ADMM, A.ADMM_ALT):
        ug = _g_dual(r, x, u_star)
        if alg is A.DR:
            return IterState(x - t * ug)
        return IterState(x, (t * ug,))
    if alg is A.DY:
        ug = _g_dual(r, x, u_star)
        return IterState(x - t * r.h.grad(x) - t * ug)
    u = _dual_zero(r.L) if u_star is None else u_star
    if alg is A.LIFTED_ADMM:
        return IterState(r.L.apply(x) - t * u)
    if alg in (A.GCP, A.EGCP):
        rhs = -r.L.adjoint(u) - r.c
        kx = r.K.apply(x)
        if r.f.smooth_info is not None:
            v = r.f.grad(kx)
        else:
            v = np.linalg.lstsq(r.K.to_dense().T, rhs, rcond=None)[0]
        if alg is A.GCP and buffered:
            b = r.K.adjoint(v)
            return IterState(x / t, (u, v),
                             {"b": b, "l": r.L.adjoint(u) + b + r.c})
        return IterState(x, (u, v))
    if alg is A.PD3O:
        s = x - t * r.h.grad(x) - t * r.L.adjoint(u)
        if buffered:
            return IterState(s + t * r.L.adjoint(u), (u,))
        return IterState(s, (u,))
    if alg in (A.PDDR_QUAD_I, A.PDDR_QUAD_II):
        Qd = r.Q.to_dense()
        M = np.eye(r.n) - 0.5 * t * Qd
        if alg is A.PDDR_QUAD_I:
            rhs = x - t * (Qd @ x) - t * r.L.adjoint(u)
        else:
            rhs = x + t * r.L.adjoint(u)
        return IterState(np.linalg.solve(M, rhs), (u,))
    if alg is A.LV and buffered:
        return IterState(x, (u,), {"l": r.L.adjoint(u)})
    return IterState(x, (u,))


def _flat(v):
    if isinstance(v, BlockVector):
        return np.concatenate(v.blocks)
    return np.asarray(v, dtype=np.float64)


def _dense_L(L):
    return L.to_dense()


def metric_distance(algorithm, roles, cfg, state, ref, buffered=False):
    """Distance from `state` to `ref` in the metric of the algorithm.

    The metric is the one in which the step map is a (relaxed) proximal
    point or forward-backward iteration: for instance
    ``[[I/tau, -L*], [-L, I/sigma]]`` for Chambolle-Pock form I and
    ``diag(I/tau, I/sigma - tau L L*)`` for Loris-Verhoeven. Weighted
    product spaces are flattened with their weights folded into the matrix.
    """
    alg = Algorithm.parse(algorithm)
    r = roles
    t, s = cfg.tau, cfg.sigma
    quad = cfg.quadratic_mode
    if alg in (A.FB, A.PPA):
        d = state.primary - ref.primary
        if quad and alg is A.FB:
            Q = _quadratic_parts(r.h, r.n)[0].to_dense()
            return math.sqrt(max(float(d @ (d / cfg.gamma - Q @ d)), 0.0))
        return float(np.linalg.norm(d))
    if alg in (A.DR, A.DY, A.LIFTED_ADMM):
        return float(np.linalg.norm(state.primary - ref.primary))
    if alg in (A.ADMM, A.ADMM_ALT):
        ds = (state.primary - state.duals[0]) - (ref.primary - ref.duals[0])
        if alg is A.ADMM:
            return float(np.linalg.norm(ds))
        dv = state.duals[0] - ref.duals[0]
        dw = state.primary - ref.primary
        return math.sqrt(float(dw @ dw + dv @ dv / cfg.rho_at(0)))
    Ld = _dense_L(r.L)
    W = _wdiag(r.L)
    dx = state.primary - ref.primary
    if alg is A.GCP and buffered:
        dx = t * dx
    if alg is A.PD3O and buffered:
        dx = dx - t * r.L.adjoint(state.duals[0] - ref.duals[0])
    du = _flat(state.duals[0] - ref.duals[0])
    WL = W @ Ld
    if alg in (A.CP_I, A.CP_II, A.PMM, A.CV_I, A.CV_II, A.GCP, A.EGCP):
        sign = -1.0 if alg in (A.CP_I, A.PMM, A.CV_I, A.GCP, A.EGCP) else 1.0
        Px = np.eye(r.n) / t
        if quad and alg in (A.CV_I, A.CV_II):
            Px = Px - _quadratic_parts(r.h, r.n)[0].to_dense()
        val = dx @ Px @ dx + 2.0 * sign * (du @ WL @ dx) + du @ W @ du / s
        if alg in (A.GCP, A.EGCP):
            dv = state.duals[1] - ref.duals[1]
            Kd = r.K.to_dense()
            Pv = np.eye(Kd.shape[0]) / cfg.eta - t * Kd @ Kd.T
            val += dv @ Pv @ dv
        return math.sqrt(max(float(val), 0.0))
    # diagonal metrics on (primary, u)
    Pu = W / s - t * WL @ WL.T
    if alg is A.PDFP:
        R = np.column_stack([r.f.prox(t, e) - r.f.prox(t, 0.0 * e)
                             for e in np.eye(r.n)])
        Pu = W / s - t * WL @ R @ WL.T
        Px = np.eye(r.n) / t
    elif alg in (A.PDDR_QUAD_I, A.PDDR_QUAD_II):
        Px = np.eye(r.n) / t - 0.5 * r.Q.to_dense()
    elif alg is A.LV and quad:
        Px = np.eye(r.n) / t - _quadratic_parts(r.h, r.n)[0].to_dense()
    else:
        Px = np.eye(r.n) / t
    val = dx @ Px @ dx + du @ Pu @ du
    return math.sqrt(max(float(val), 0.0))


# -------------------------------------------------------------------- solve

def solve(problem, cfg, x0=None, oracle=None, unsafe=False, hooks=(),
          norms=None, theorem=None, gap_tol=None, buffered=False):
    """Validate, then run `cfg.algorithm` on `problem`.

    Parameters
    ----------
    problem : ProblemSpec
    cfg : SolverConfig
    x0 : ndarray, optional
        Primal starting point; zeros by default. Duals start at zero.
    oracle : OracleSolution, optional
        Enables objective-gap stopping through `gap_tol`.
    unsafe : bool
        Run even when the validator rejects the configuration.
    hooks : sequence of callables
        Called with each new state.
    gap_tol : float, optional
        Stop once ``|F(x) - F*| <= gap_tol`` (needs `oracle`).

    Returns
    -------
    RunResult

    Raises
    ------
    ParameterRejected
        If the configuration is rejected and `unsafe` is False.
    DivergenceError
    """
    report = validate_params(cfg, problem, norms, theorem)
    if not report.admissible and not unsafe:
        raise ParameterRejected(report)
    roles = split_roles(problem, cfg.algorithm)
    state = init_state(cfg.algorithm, roles, cfg, x0, buffered=buffered)
    step = make_step(cfg.algorithm, roles, cfg, buffered)
    stop = None
    if gap_tol is not None:
        if oracle is None:
            raise ValueError("objective-gap stopping needs the oracle")
        fstar = oracle.objective

        def stop(st):
            return abs(problem.objective(primal_estimate(st)) - fstar) \
                <= gap_tol
    res = run(step, state, cfg, hooks, stop)
    res.report = report
    res.unsafe = bool(unsafe and not report.admissible)
    x = res.x
    if cfg.algorithm is A.LIFTED_ADMM:
        x = res.state.half.get("x", x)
    res.x = x
    res.objective = problem.objective(x) if x is not None else None
    return res
