"""Property checks for the prox catalog on random inputs.

Every conjugate prox here is an independent closed form, so the Moreau
check compares two unrelated code paths.
"""

import numpy as np

from proxsplit.prox import (AffineIndicator, Box, Custom, L1, LinearTerm,
                            Quadratic, SquaredL2, Zero)

KINDS = ("Zero", "Quadratic", "L1", "SquaredL2", "AffineIndicator", "Box",
         "LinearTerm", "Custom")
SMOOTH = ("Zero", "Quadratic", "SquaredL2", "LinearTerm")


def make(kind, rng, n=6):
    """Random instance of `kind` together with its conjugate-prox oracle.

    The oracle maps ``(s, v)`` to ``prox_{s f*}(v)``.
    """
    if kind == "Zero":
        return Zero(), lambda s, v: np.zeros_like(v)
    if kind == "Quadratic":
        B = rng.normal(size=(n, n))
        Q = B @ B.T + 0.1 * np.eye(n)
        c = rng.normal(size=n)
        f = Quadratic(Q, c, rng.normal())
        # f*(u) = 1/2 (u-c)' Q^{-1} (u-c) - t; optimality gives (sI+Q)p = sc+Qv
        return f, lambda s, v: np.linalg.solve(s * np.eye(n) + Q,
                                               s * c + Q @ v)
    if kind == "L1":
        w = rng.uniform(0.1, 2.0, size=n)
        return L1(w), lambda s, v: np.clip(v, -w, w)
    if kind == "SquaredL2":
        w = rng.uniform(0.1, 3.0)
        return SquaredL2(w), lambda s, v: v / (1.0 + s / w)
    if kind == "AffineIndicator":
        m = n // 2
        A = rng.normal(size=(m, n))
        y = rng.normal(size=m)
        x0 = np.linalg.lstsq(A, y, rcond=None)[0]
        U = np.linalg.svd(A, full_matrices=False)[2].T

        def conj(s, v):
            # f*(u) = <u, x0> on range(A'), +inf elsewhere
            r = v - s * x0
            return U @ (U.T @ r)
        return AffineIndicator(A, y), conj
    if kind == "Box":
        lo = -rng.uniform(0.1, 2.0, size=n)
        hi = rng.uniform(0.1, 2.0, size=n)

        def conj(s, v):
            # support function, slope lo left of 0 and hi right of 0
            return np.where(v > s * hi, v - s * hi,
                            np.where(v < s * lo, v - s * lo, 0.0))
        return Box(lo, hi), conj
    if kind == "LinearTerm":
        c = rng.normal(size=n)
        return LinearTerm(c), lambda s, v: c.copy()
    if kind == "Custom":
        w = 0.5

        def p(tau, x):
            return np.sign(x) * np.maximum(np.abs(x) - tau * w, 0.0)
        f = Custom(p, value_fn=lambda x: w * float(np.sum(np.abs(x))))
        return f, lambda s, v: np.clip(v, -w, w)
    raise KeyError(kind)


def _draw(rng, n=6):
    tau = float(np.exp(rng.uniform(np.log(0.05), np.log(20.0))))
    return tau, rng.normal(scale=3.0, size=n)


def moreau_error(kind, rng):
    f, conj = make(kind, rng)
    tau, x = _draw(rng)
    lhs = f.prox(tau, x) + tau * conj(1.0 / tau, x / tau)
    return float(np.max(np.abs(lhs - x)) / (1.0 + np.max(np.abs(x))))


def firm_nonexpansive_excess(kind, rng):
    f, _ = make(kind, rng)
    tau, x = _draw(rng)
    x2 = rng.normal(scale=3.0, size=x.size)
    d = f.prox(tau, x) - f.prox(tau, x2)
    return float(d @ d - (x - x2) @ d)


def subgradient_error(kind, rng):
    """Distance of ``(x - p)/tau`` from the subdifferential at ``p``."""
    f, _ = make(kind, rng)
    tau, x = _draw(rng)
    p = f.prox(tau, x)
    v = (x - p) / tau
    if kind in SMOOTH:
        return float(np.linalg.norm(v - f.grad(p)))
    if kind in ("L1", "Custom"):
        w = f.weight if kind == "L1" else np.full(x.size, 0.5)
        nz = p != 0
        err = np.zeros(x.size)
        err[nz] = np.abs(v[nz] - w[nz] * np.sign(p[nz]))
        err[~nz] = np.maximum(np.abs(v[~nz]) - w[~nz], 0.0)
        return float(np.max(err) / (1.0 + np.max(w)))
    if kind == "Box":
        at_hi, at_lo = p >= f.hi, p <= f.lo
        inside = ~(at_hi | at_lo)
        viol = np.concatenate([np.maximum(-v[at_hi], 0),
                               np.maximum(v[at_lo], 0),
                               np.abs(v[inside])])
        return float(np.max(viol, initial=0.0))
    if kind == "AffineIndicator":
        A = f._M
        feas = np.linalg.norm(A @ p - f.y)
        coef = np.linalg.lstsq(A.T, v, rcond=None)[0]
        return float(feas + np.linalg.norm(A.T @ coef - v))
    raise KeyError(kind)


def gradient_fd_error(kind, rng, h=1e-5):
    """Relative error of the gradient against central differences."""
    f, _ = make(kind, rng)
    x = rng.normal(size=6)
    g = f.grad(x)
    fd = np.empty_like(x)
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = h
        fd[k] = (f.value(x + e) - f.value(x - e)) / (2 * h)
    return float(np.linalg.norm(fd - g) / max(1.0, np.linalg.norm(g)))
