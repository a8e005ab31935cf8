"""Product-space liftings and the explicit parallel iterations.

Two ways to handle ``f(x) + sum_m g_m(L_m x) + h(x)`` with two-operator
splittings:

* Consensus: copy ``x`` into ``M`` blocks with weights ``w_m`` summing to
  one and add the indicator of the consensus set. Requires ``L_m = Id``.
* Stacked: collect ``L_m`` into one operator into ``U_1 x ... x U_M``
  with the weighted inner product ``sum_m w_m <u_m, u'_m>``.

The explicit parallel steps work in the original metric: block duals are
``u'_m = w_m u_m`` and block dual steps ``sigma_m = sigma w_m``.
"""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .engines import IterState, _pconj, _relax, _grad, _next
from .problems import ProblemSpec
from .prox import ContractViolation, FunSpec, ProxError, SmoothInfo
from .spaces import BlockVector, Identity, Stacked

__all__ = [
    "LiftedProblem", "BlockSum", "ConsensusFun", "BlockSmooth",
    "BlockProxError", "lift", "parallel_consensus_step",
    "parallel_primal_dual_step", "block_sum", "consensus_state",
    "parallel_init", "report_duals",
]

WEIGHT_TOL = 1e-12


class BlockProxError(ProxError):
    """A block prox failed; `block` is its index."""

    def __init__(self, block, cause):
        self.block = block
        super().__init__(f"prox of block {block} failed: {cause}")


def block_sum(vectors, coefs=None):
    """``sum_m coefs_m v_m`` with exactly rounded coordinates.

    The result does not depend on the order of the blocks, so permuting the
    blocks leaves it bitwise unchanged.
    """
    if coefs is None:
        terms = [np.asarray(v, dtype=np.float64) for v in vectors]
    else:
        terms = [c * np.asarray(v, dtype=np.float64)
                 for c, v in zip(coefs, vectors)]
    stacked = np.stack(terms)
    return np.array([math.fsum(col) for col in stacked.T])


def _map_blocks(fn, count, threads=1):
    """Evaluate ``fn(m)`` for every block; results in index order."""
    def guarded(m):
        try:
            return fn(m)
        except BlockProxError:
            raise
        except (ProxError, ValueError, ArithmeticError) as exc:
            raise BlockProxError(m, exc) from exc
    if threads > 1 and count > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(guarded, range(count)))
    return [guarded(m) for m in range(count)]


def _check_threads(funcs, threads):
    threads = int(threads)
    if threads < 1:
        raise ValueError("threads must be at least 1")
    if threads > 1:
        for m, g in enumerate(funcs):
            if not g.thread_safe:
                raise ContractViolation(
                    f"block {m} ({g.kind}) is not declared thread-safe; "
                    f"run with threads=1")
    return threads


class BlockSum(FunSpec):
    """Separable sum ``u -> sum_m g_m(u_m)`` on a weighted product space.

    In the weighted metric the prox is blockwise with step ``tau / w_m``,
    and the generic Moreau identity gives the conjugate prox
    ``(1/w_m) prox_{tau w_m g_m*}(w_m u_m)``.

    Parameters
    ----------
    funcs : sequence of FunSpec
    weights : sequence of float
    threads : int
        Worker threads for the block proxes.

    Raises
    ------
    ContractViolation
        If ``threads > 1`` while some block function is not declared
        thread-safe.
    """

    kind = "BlockSum"

    def __init__(self, funcs, weights, threads=1):
        self.funcs = tuple(funcs)
        self.weights = np.asarray(weights, dtype=np.float64)
        if len(self.funcs) != len(self.weights):
            raise ValueError("one weight per block function is needed")
        self.thread_safe = all(g.thread_safe for g in self.funcs)
        self.threads = _check_threads(self.funcs, threads)
        self.affine_prox = all(g.affine_prox for g in self.funcs)

    def prox(self, tau, u):
        if not isinstance(u, BlockVector):
            raise TypeError("BlockSum acts on block vectors")
        out = _map_blocks(
            lambda m: self.funcs[m].prox(tau / self.weights[m], u.blocks[m]),
            len(self.funcs), self.threads)
        return BlockVector(out, u.weights)

    def prox_conjugate(self, tau, u):
        """``(1/w_m) prox_{tau w_m g_m*}(w_m u_m)`` per block."""
        out = []
        for m, (g, w) in enumerate(zip(self.funcs, self.weights)):
            out.append(_pconj(g, tau * w, w * u.blocks[m]) / w)
        return BlockVector(out, u.weights)

    def value(self, u):
        return float(sum(g.value(b) for g, b in zip(self.funcs, u.blocks)))

    def __repr__(self):
        return f"BlockSum({list(self.funcs)!r})"


class ConsensusFun(FunSpec):
    """``f(x_1) + indicator{x_1 = ... = x_M}`` in the weighted metric.

    Its prox averages with the weights, applies ``prox_f`` and broadcasts.
    """

    kind = "ConsensusFun"

    def __init__(self, f, weights):
        self.f = f
        self.weights = np.asarray(weights, dtype=np.float64)
        self.affine_prox = f.affine_prox

    def prox(self, tau, x):
        xp = self.f.prox(tau, block_sum(x.blocks, self.weights))
        return BlockVector([xp] * len(x.blocks), x.weights)

    def value(self, x):
        first = x.blocks[0]
        if any(not np.array_equal(first, b) for b in x.blocks[1:]):
            return math.inf
        return self.f.value(first)


class BlockSmooth(FunSpec):
    """``x -> sum_m w_m h(x_m)``; its gradient in the weighted metric is
    ``(grad h(x_m))_m``."""

    kind = "BlockSmooth"

    def __init__(self, h, weights):
        self.h = h
        self.weights = np.asarray(weights, dtype=np.float64)
        self.smooth_info = SmoothInfo(h.smooth_info.lipschitz,
                                      h.smooth_info.is_quadratic)

    def grad(self, x):
        return BlockVector([self.h.grad(b) for b in x.blocks], x.weights)

    def value(self, x):
        return float(sum(w * self.h.value(b)
                         for w, b in zip(self.weights, x.blocks)))


def _check_weights(weights, M, consensus):
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if w.shape[0] != M:
        raise ValueError(f"expected {M} weights, got {w.shape[0]}")
    if np.any(~np.isfinite(w)) or np.any(w <= 0):
        raise ValueError("weights must be positive")
    if consensus and abs(math.fsum(w) - 1.0) > WEIGHT_TOL:
        raise ValueError(f"consensus weights must sum to 1, got {w.sum()}")
    return w


@dataclass
class LiftedProblem:
    """A problem with ``M`` composite terms, rewritten on a product space.

    Attributes
    ----------
    mode : str
        ``"Consensus"`` or ``"Stacked"``.
    weights : ndarray
    base : ProblemSpec
    threads : int
    """

    mode: str
    weights: np.ndarray
    base: ProblemSpec
    threads: int = 1

    @property
    def M(self):
        return len(self.base.terms)

    def sigmas(self, sigma):
        """Block dual steps ``sigma_m = sigma w_m``."""
        return sigma * self.weights

    def block_g(self):
        return BlockSum([g for g, _ in self.base.terms], self.weights,
                        self.threads)

    def stacked_operator(self):
        return Stacked([L for _, L in self.base.terms], self.weights)

    def as_problem(self):
        """Single-term problem for the Stacked mode."""
        if self.mode != "Stacked":
            raise ContractViolation(
                "a consensus lifting lives on X^M; use consensus_functions")
        b = self.base
        return ProblemSpec(f=b.f, terms=[(self.block_g(),
                                          self.stacked_operator())],
                           h=b.h, n=b.n, description=b.description,
                           kind=b.kind, data=b.data)

    def consensus_functions(self):
        """``(F, G, H)`` on ``X^M`` for the Consensus mode.

        ``F`` carries ``f`` and the consensus constraint, ``G`` the block
        functions, ``H`` the smooth part.
        """
        if self.mode != "Consensus":
            raise ContractViolation("not a consensus lifting")
        b = self.base
        return (ConsensusFun(b.f, self.weights), self.block_g(),
                BlockSmooth(b.h, self.weights))


def lift(problem, mode="Stacked", weights=None, threads=1):
    """Lift a problem with several composite terms to a product space.

    Parameters
    ----------
    problem : ProblemSpec
    mode : {"Consensus", "Stacked"}
    weights : sequence of float, optional
        Defaults to ``1/M`` each.
    threads : int
        Worker threads for block proxes.

    Raises
    ------
    ContractViolation
        Consensus mode with an operator other than the identity.
    ValueError
        Non-positive weights, or consensus weights not summing to one.
    """
    M = len(problem.terms)
    if M == 0:
        raise ValueError("nothing to lift: the problem has no terms")
    if mode not in ("Consensus", "Stacked"):
        raise ValueError(f"unknown lifting mode {mode!r}")
    consensus = mode == "Consensus"
    if consensus:
        for m, (_, L) in enumerate(problem.terms):
            if not isinstance(L, Identity):
                raise ContractViolation(
                    f"consensus lifting needs L_m = Id; term {m} has "
                    f"{type(L).__name__}")
    if weights is None:
        weights = np.full(M, 1.0 / M)
    w = _check_weights(weights, M, consensus)
    return LiftedProblem(mode, w, problem, int(threads))


def consensus_state(x_blocks, weights):
    """State for the consensus steps from a list of ``M`` blocks."""
    return IterState(BlockVector(x_blocks, weights))


def parallel_consensus_step(state, f, gs, h, tau, weights, family="DR",
                            form="I", rho=1.0, threads=1):
    """Douglas-Rachford or Davis-Yin step on the consensus lifting.

    The primary block is ``s = (s_1, ..., s_M)`` as a :class:`BlockVector`.

    * DR form I: ``x = prox_{tau f}(sum w_m s_m)``,
      ``s_m+ = s_m + rho (prox_{(tau/w_m) g_m}(2x - s_m) - x)``.
    * DR form II: ``x_m = prox_{(tau/w_m) g_m}(s_m)``,
      ``x = prox_{tau f}(sum w_m (2 x_m - s_m))``, ``s_m+ = s_m + rho (x - x_m)``.
    * DY: form I with ``2x - s_m - tau grad h(x)`` inside the block prox.
    """
    s = state.primary
    w = np.asarray(weights, dtype=np.float64)
    M = len(gs)
    threads = _check_threads(gs, threads)
    if len(s.blocks) != M:
        raise ValueError(f"state has {len(s.blocks)} blocks for {M} functions")

    def gprox(m, v):
        return gs[m].prox(tau / w[m], v)

    if family == "DR" and form == "II":
        xs = _map_blocks(lambda m: gprox(m, s.blocks[m]), M, threads)
        xh = f.prox(tau, block_sum([2.0 * a - b for a, b in
                                    zip(xs, s.blocks)], w))
        sh = [b + (xh - a) for a, b in zip(xs, s.blocks)]
        new = [b + rho * (xh - a) for a, b in zip(xs, s.blocks)]
        return _next(state, BlockVector(new, s.weights),
                     z=(BlockVector(sh, s.weights),), x=xh, x_blocks=xs)
    if family not in ("DR", "DY"):
        raise ValueError(f"unknown consensus family {family!r}")
    if form != "I":
        raise ValueError("Davis-Yin has a single form")
    xh = f.prox(tau, block_sum(s.blocks, w))
    fwd = 2.0 * xh
    if family == "DY":
        fwd = fwd - tau * _grad(h, xh)
    ys = _map_blocks(lambda m: gprox(m, fwd - s.blocks[m]), M, threads)
    sh = [b + (y - xh) for y, b in zip(ys, s.blocks)]
    new = [b + rho * (y - xh) for y, b in zip(ys, s.blocks)]
    return _next(state, BlockVector(new, s.weights),
                 z=(BlockVector(sh, s.weights),), x=xh, w_blocks=ys)


def parallel_init(family, terms, x0, tau, u0=None):
    """Starting state for :func:`parallel_primal_dual_step`.

    LV and PD3O carry ``s~ = x + tau sum_m L_m^* u_m``.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    us = tuple(np.zeros(L.out_dim) for _, L in terms) if u0 is None \
        else tuple(np.asarray(u, dtype=np.float64) for u in u0)
    lu = block_sum([L.adjoint(u) for (_, L), u in zip(terms, us)])
    if family == "LV":
        return IterState(x0, us, {"s_tilde": x0 + tau * lu})
    if family == "PD3O":
        return IterState(x0 + tau * lu, us)
    return IterState(x0, us)


def parallel_primal_dual_step(state, f, terms, h, tau, sigmas, family="CP_I",
                              rho=1.0, threads=1):
    """Primal-dual step with one dual block per term ``g_m(L_m x)``.

    Duals are kept in the original metric. Block dual updates are
    independent and may run on `threads` workers; the primal combination
    ``sum_m L_m^* u_m`` is order independent.

    Families: ``CP_I``, ``CP_II``, ``CV_I``, ``CV_II``, ``LV`` (primary
    ``x`` with ``s~`` in ``aux``) and ``PD3O`` (primary ``s~``).
    """
    us = state.duals
    M = len(terms)
    if len(us) != M:
        raise ValueError(f"state has {len(us)} duals for {M} terms")
    sig = np.asarray(sigmas, dtype=np.float64)
    threads = _check_threads([g for g, _ in terms], threads)

    def lstar(vs):
        return block_sum([L.adjoint(v) for (_, L), v in zip(terms, vs)])

    def dual(m, arg):
        g, L = terms[m]
        return _pconj(g, sig[m], us[m] + sig[m] * L.apply(arg))

    def relax_all(new_us):
        return tuple(_relax(u, v, rho) for u, v in zip(us, new_us))

    if family in ("CP_I", "CV_I", "CP_II", "CV_II"):
        x = state.primary
        v = x if family.startswith("CP") else x - tau * _grad(h, x)
        if family.endswith("_I"):
            xh = f.prox(tau, v - tau * lstar(us))
            uh = _map_blocks(lambda m: dual(m, 2.0 * xh - x), M, threads)
        else:
            uh = _map_blocks(lambda m: dual(m, x), M, threads)
            xh = f.prox(tau, v - tau * lstar([2.0 * a - b
                                              for a, b in zip(uh, us)]))
        return _next(state, _relax(x, xh, rho), relax_all(uh),
                     z=(xh,) + tuple(uh), x=xh, u=tuple(uh))
    if family == "LV":
        x = state.primary
        st = state.aux["s_tilde"]
        a = x - tau * _grad(h, x) - st
        uh = _map_blocks(lambda m: dual(m, x + a), M, threads)
        un = relax_all(uh)
        stn = st + rho * a
        xh = st + a - tau * lstar(uh)
        return _next(state, stn - tau * lstar(un), un, {"s_tilde": stn},
                     z=(xh,) + tuple(uh), x=xh, u=tuple(uh))
    if family == "PD3O":
        st = state.primary
        xh = f.prox(tau, st - tau * lstar(us))
        a = xh - tau * _grad(h, xh) - st
        uh = _map_blocks(lambda m: dual(m, xh + a), M, threads)
        return _next(state, st + rho * a, relax_all(uh),
                     z=(st + a,) + tuple(uh), x=xh, u=tuple(uh))
    raise ValueError(f"unknown primal-dual family {family!r}")


def report_duals(lifted, u):
    """Duals of the original problem from weighted-space duals.

    The weighted metric scales the dual variables: the original dual of
    term ``m`` is ``w_m u_m``.
    """
    if isinstance(u, BlockVector):
        blocks = u.blocks
    else:
        blocks = u
    return [w * np.asarray(b) for w, b in zip(lifted.weights, blocks)]
