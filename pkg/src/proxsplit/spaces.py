"""Vectors, block vectors and linear operators.

Points of the primal space are plain 1-D ``float64`` numpy arrays. Points of
a product space ``U_1 x ... x U_M`` are :class:`BlockVector` instances, whose
inner product is weighted by positive per-block weights.

.. autosummary::

   BlockVector
   Identity
   DenseMatrix
   Diff1D
   Stacked
   ScaledSum
   apply
   adjoint_apply
   estimate_norm
   weighted_inner
"""

import numpy as np

__all__ = [
    "DimensionError", "NormEstimateError", "BlockVector", "LinOp", "Identity",
    "DenseMatrix", "Diff1D", "Stacked", "ScaledSum", "Composed", "Adjoint",
    "as_vector", "inner", "norm", "apply", "adjoint_apply", "estimate_norm",
    "weighted_inner", "gram",
]


class DimensionError(ValueError):
    """Raised when a vector does not have the dimension an operator expects.

    Attributes
    ----------
    expected, actual : int or tuple of int
        The expected and the received dimensions.
    """

    def __init__(self, expected, actual, what="vector"):
        self.expected = expected
        self.actual = actual
        super().__init__(
            f"dimension mismatch for {what}: expected {expected}, got {actual}")


class NormEstimateError(RuntimeError):
    """Power iteration did not settle within the iteration budget.

    Attributes
    ----------
    rayleigh : float
        Last Rayleigh quotient of ``L*L``, i.e. the last estimate of
        ``||L||**2``.
    iterations : int
        Number of iterations performed.
    """

    def __init__(self, rayleigh, iterations):
        self.rayleigh = rayleigh
        self.iterations = iterations
        super().__init__(
            f"power iteration did not converge after {iterations} iterations "
            f"(last Rayleigh quotient {rayleigh!r})")


def as_vector(x, dim=None):
    """Return `x` as a finite 1-D float64 array (a copy).

    Raises
    ------
    ValueError
        If an entry is NaN or infinite.
    DimensionError
        If `dim` is given and does not match.
    """
    v = np.array(x, dtype=np.float64).reshape(-1)
    if dim is not None and v.shape[0] != dim:
        raise DimensionError(dim, v.shape[0])
    if not np.all(np.isfinite(v)):
        raise ValueError("vector entries must be finite")
    return v


class BlockVector:
    """Element of a product space with a weighted inner product.

    The inner product is ``sum_m w_m <a_m, b_m>``. Arithmetic with another
    block vector of the same structure, or with a scalar, is blockwise.

    Parameters
    ----------
    blocks : sequence of array_like
        The blocks, each converted to a 1-D float64 array.
    weights : sequence of float, optional
        Positive weights, one per block. Defaults to all ones.
    """

    __array_priority__ = 100

    def __init__(self, blocks, weights=None):
        blocks = tuple(np.asarray(b, dtype=np.float64).reshape(-1)
                       for b in blocks)
        if not blocks:
            raise ValueError("a block vector needs at least one block")
        if weights is None:
            weights = np.ones(len(blocks))
        weights = np.asarray(weights, dtype=np.float64).reshape(-1)
        if weights.shape[0] != len(blocks):
            raise DimensionError(len(blocks), weights.shape[0], "weights")
        if np.any(weights <= 0) or not np.all(np.isfinite(weights)):
            raise ValueError("block weights must be positive and finite")
        self.blocks = blocks
        self.weights = weights

    @property
    def dims(self):
        return tuple(b.shape[0] for b in self.blocks)

    def __len__(self):
        return len(self.blocks)

    def __getitem__(self, m):
        return self.blocks[m]

    def __iter__(self):
        return iter(self.blocks)

    def __repr__(self):
        return f"BlockVector(dims={self.dims}, weights={self.weights.tolist()})"

    def _check(self, other):
        if self.dims != other.dims:
            raise DimensionError(self.dims, other.dims, "block vector")
        if not np.array_equal(self.weights, other.weights):
            raise ValueError("block vectors carry different weights")

    def _map(self, fn):
        return BlockVector([fn(b) for b in self.blocks], self.weights)

    def _zip(self, other, fn):
        if isinstance(other, BlockVector):
            self._check(other)
            return BlockVector([fn(a, b) for a, b in zip(self.blocks,
                                                         other.blocks)],
                               self.weights)
        if np.ndim(other) == 0:
            return self._map(lambda a: fn(a, other))
        return NotImplemented

    def __add__(self, other):
        return self._zip(other, np.add)

    __radd__ = __add__

    def __sub__(self, other):
        return self._zip(other, np.subtract)

    def __rsub__(self, other):
        return self._zip(other, lambda a, b: b - a)

    def __mul__(self, other):
        return self._zip(other, np.multiply)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return self._zip(other, np.true_divide)

    def __neg__(self):
        return self._map(np.negative)

    def copy(self):
        return self._map(np.copy)

    def zeros_like(self):
        return self._map(np.zeros_like)

    def isfinite(self):
        return all(np.all(np.isfinite(b)) for b in self.blocks)

    def with_weights(self, weights):
        """Same blocks, different weights."""
        return BlockVector(self.blocks, weights)


def weighted_inner(a, b):
    """Weighted inner product ``sum_m w_m <a_m, b_m>`` of two block vectors.

    Examples
    --------
    >>> a = BlockVector([[2.0], [2.0]], weights=[0.25, 0.75])
    >>> weighted_inner(a, a)
    4.0
    """
    if not isinstance(a, BlockVector) or not isinstance(b, BlockVector):
        raise TypeError("weighted_inner expects two BlockVector instances")
    a._check(b)
    return float(sum(w * np.dot(x, y)
                     for w, x, y in zip(a.weights, a.blocks, b.blocks)))


def inner(a, b):
    """Inner product of two arrays or of two block vectors."""
    if isinstance(a, BlockVector):
        return weighted_inner(a, b)
    return float(np.dot(a, b))


def norm(a):
    """Norm induced by :func:`inner`."""
    if isinstance(a, BlockVector):
        return float(np.sqrt(weighted_inner(a, a)))
    return float(np.linalg.norm(a))


def is_finite(a):
    if isinstance(a, BlockVector):
        return a.isfinite()
    return bool(np.all(np.isfinite(a)))


class LinOp:
    """Bounded linear operator between finite-dimensional spaces.

    Subclasses implement ``_apply`` and ``_adjoint``. The public methods
    check dimensions and never modify their input.

    Attributes
    ----------
    in_dim, out_dim : int
        Dimensions of the domain and of the codomain. For a stacked operator
        `out_dim` is the tuple of block dimensions.
    norm_bound : float or None
        Upper bound on the operator norm, when one is known.
    """

    kind = "LinOp"

    def __init__(self, in_dim, out_dim, norm_bound=None):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.norm_bound = None if norm_bound is None else float(norm_bound)

    def __repr__(self):
        return (f"{type(self).__name__}(in_dim={self.in_dim}, "
                f"out_dim={self.out_dim}, norm_bound={self.norm_bound})")

    def _check_in(self, x):
        _check_dim(self.in_dim, x)

    def _check_out(self, u):
        _check_dim(self.out_dim, u)

    def apply(self, x):
        self._check_in(x)
        return self._apply(x)

    def adjoint(self, u):
        self._check_out(u)
        return self._adjoint(u)

    __call__ = apply

    def with_norm_bound(self, bound):
        """Shallow copy of the operator carrying `bound` as its norm bound."""
        new = object.__new__(type(self))
        new.__dict__.update(self.__dict__)
        new.norm_bound = float(bound)
        return new

    def to_dense(self):
        """Matrix of the operator, built column by column."""
        eye = np.eye(self.in_dim)
        cols = [_flat(self.apply(eye[:, j])) for j in range(self.in_dim)]
        return np.column_stack(cols) if cols else np.zeros((0, 0))

    @property
    def H(self):
        """The adjoint operator."""
        return Adjoint(self)

    def to_dict(self):
        return {"kind": self.kind, "matrix": self.to_dense().tolist()}


def _flat(v):
    if isinstance(v, BlockVector):
        return np.concatenate(v.blocks)
    return v


def _check_dim(expected, v):
    if isinstance(expected, tuple):
        if not isinstance(v, BlockVector):
            raise DimensionError(expected, np.shape(v), "block vector")
        if v.dims != expected:
            raise DimensionError(expected, v.dims, "block vector")
        return
    if isinstance(v, BlockVector) or np.ndim(v) != 1 or len(v) != expected:
        actual = v.dims if isinstance(v, BlockVector) else np.shape(v)
        raise DimensionError(expected, actual)


class Identity(LinOp):
    """Identity on ``R^n``."""

    kind = "Identity"

    def __init__(self, n):
        super().__init__(int(n), int(n), 1.0)

    def _apply(self, x):
        return np.array(x, dtype=np.float64)

    _adjoint = _apply

    def to_dense(self):
        return np.eye(self.in_dim)

    def to_dict(self):
        return {"kind": self.kind, "n": self.in_dim}


class DenseMatrix(LinOp):
    """Operator given by an explicit matrix.

    Parameters
    ----------
    matrix : array_like, shape (m, n)
    norm_bound : float, optional
        Known bound on the spectral norm. Use :func:`estimate_norm` to get a
        safe one.
    """

    kind = "DenseMatrix"

    def __init__(self, matrix, norm_bound=None):
        matrix = np.array(matrix, dtype=np.float64)
        if matrix.ndim != 2:
            raise ValueError("DenseMatrix expects a 2-D array")
        if not np.all(np.isfinite(matrix)):
            raise ValueError("matrix entries must be finite")
        matrix.setflags(write=False)
        self.matrix = matrix
        super().__init__(matrix.shape[1], matrix.shape[0], norm_bound)

    def _apply(self, x):
        return self.matrix @ x

    def _adjoint(self, u):
        return self.matrix.T @ u

    def to_dense(self):
        return np.array(self.matrix)


class Diff1D(LinOp):
    """Forward differences ``(Lx)_k = x_{k+1} - x_k`` from ``R^n`` to ``R^(n-1)``.

    The adjoint is the negative divergence. The norm bound 2 follows from
    the triangle inequality.
    """

    kind = "Diff1D"

    def __init__(self, n):
        n = int(n)
        if n < 2:
            raise ValueError("Diff1D needs n >= 2")
        super().__init__(n, n - 1, 2.0)

    def _apply(self, x):
        return np.diff(x)

    def _adjoint(self, u):
        out = np.zeros(self.in_dim)
        out[:-1] -= u
        out[1:] += u
        return out

    def to_dict(self):
        return {"kind": self.kind, "n": self.in_dim}


class Stacked(LinOp):
    """Stacked operator ``x -> (L_1 x, ..., L_M x)`` into a weighted product.

    The codomain carries the inner product ``sum_m w_m <u_m, u'_m>``, so the
    adjoint is ``u -> sum_m w_m L_m^* u_m``.

    Parameters
    ----------
    ops : sequence of LinOp
        Operators sharing the same input dimension.
    weights : sequence of float, optional
        Positive block weights; defaults to all ones.
    """

    kind = "Stacked"

    def __init__(self, ops, weights=None):
        ops = tuple(ops)
        if not ops:
            raise ValueError("Stacked needs at least one operator")
        n = ops[0].in_dim
        for op in ops:
            if op.in_dim != n:
                raise DimensionError(n, op.in_dim, "stacked operator input")
            if isinstance(op.out_dim, tuple):
                raise ValueError("nested Stacked operators are not supported")
        if weights is None:
            weights = np.ones(len(ops))
        weights = np.asarray(weights, dtype=np.float64).reshape(-1)
        if weights.shape[0] != len(ops):
            raise DimensionError(len(ops), weights.shape[0], "weights")
        if np.any(weights <= 0):
            raise ValueError("block weights must be positive")
        self.ops = ops
        self.weights = weights
        bound = None
        if all(op.norm_bound is not None for op in ops):
            bound = float(np.sqrt(sum(w * op.norm_bound ** 2
                                      for w, op in zip(weights, ops))))
        super().__init__(n, tuple(op.out_dim for op in ops), bound)

    def _apply(self, x):
        return BlockVector([op.apply(x) for op in self.ops], self.weights)

    def _adjoint(self, u):
        out = np.zeros(self.in_dim)
        for w, op, um in zip(self.weights, self.ops, u.blocks):
            out += w * op.adjoint(um)
        return out

    def _check_out(self, u):
        _check_dim(self.out_dim, u)
        if not np.array_equal(u.weights, self.weights):
            raise ValueError("block vector weights differ from the operator's")

    def to_dict(self):
        return {"kind": self.kind, "weights": self.weights.tolist(),
                "ops": [op.to_dict() for op in self.ops]}


class ScaledSum(LinOp):
    """Linear combination ``sum_k a_k L_k`` of operators with equal shapes."""

    kind = "ScaledSum"

    def __init__(self, ops, coefs):
        ops = tuple(ops)
        coefs = np.asarray(coefs, dtype=np.float64).reshape(-1)
        if not ops or len(ops) != coefs.shape[0]:
            raise ValueError("ScaledSum needs one coefficient per operator")
        for op in ops[1:]:
            if (op.in_dim, op.out_dim) != (ops[0].in_dim, ops[0].out_dim):
                raise DimensionError((ops[0].in_dim, ops[0].out_dim),
                                     (op.in_dim, op.out_dim), "summand")
        self.ops = ops
        self.coefs = coefs
        bound = None
        if all(op.norm_bound is not None for op in ops):
            bound = float(sum(abs(a) * op.norm_bound
                              for a, op in zip(coefs, ops)))
        super().__init__(ops[0].in_dim, ops[0].out_dim, bound)

    def _apply(self, x):
        out = self.coefs[0] * self.ops[0].apply(x)
        for a, op in zip(self.coefs[1:], self.ops[1:]):
            out = out + a * op.apply(x)
        return out

    def _adjoint(self, u):
        out = self.coefs[0] * self.ops[0].adjoint(u)
        for a, op in zip(self.coefs[1:], self.ops[1:]):
            out = out + a * op.adjoint(u)
        return out

    def to_dict(self):
        return {"kind": self.kind, "coefs": self.coefs.tolist(),
                "ops": [op.to_dict() for op in self.ops]}


class Composed(LinOp):
    """Composition ``outer o inner``."""

    kind = "Composed"

    def __init__(self, outer, inner):
        if outer.in_dim != inner.out_dim:
            raise DimensionError(outer.in_dim, inner.out_dim, "composition")
        self.outer = outer
        self.inner = inner
        bound = None
        if outer.norm_bound is not None and inner.norm_bound is not None:
            bound = outer.norm_bound * inner.norm_bound
        super().__init__(inner.in_dim, outer.out_dim, bound)

    def _apply(self, x):
        return self.outer.apply(self.inner.apply(x))

    def _adjoint(self, u):
        return self.inner.adjoint(self.outer.adjoint(u))


class Adjoint(LinOp):
    """Adjoint ``L^*`` of an operator, as an operator."""

    kind = "Adjoint"

    def __init__(self, op):
        self.op = op
        super().__init__(op.out_dim, op.in_dim, op.norm_bound)

    def _apply(self, x):
        return self.op.adjoint(x)

    def _adjoint(self, u):
        return self.op.apply(u)


def gram(op):
    """The self-adjoint operator ``L^* L``."""
    return Composed(Adjoint(op), op)


def apply(op, x):
    """Return ``L x``.

    Raises
    ------
    DimensionError
        If `x` does not live in the domain of `op`.

    Examples
    --------
    >>> apply(Diff1D(3), np.array([1.0, 4.0, 9.0]))
    array([3., 5.])
    """
    return op.apply(x)


def adjoint_apply(op, u):
    """Return ``L^* u``; for a stacked operator this is ``sum_m w_m L_m^* u_m``.

    Examples
    --------
    >>> op = Stacked([Identity(2), Identity(2)], weights=[0.5, 0.5])
    >>> adjoint_apply(op, BlockVector([[2, 2], [4, 4]], [0.5, 0.5]))
    array([3., 3.])
    """
    return op.adjoint(u)


def estimate_norm(op, tol=1e-6, max_iter=20000, seed=0):
    """Estimate ``||L||`` by power iteration on ``L^* L``.

    The start vector is all ones plus seeded uniform noise, so that it is
    almost surely not orthogonal to the top eigenvector. The iteration stops
    once the relative change of the Rayleigh quotient drops below ``tol**2``.
    The returned value is ``sqrt(lambda_max) * (1 + tol)``: inflated so that
    step-size conditions built on it err on the safe side.

    Parameters
    ----------
    op : LinOp
    tol : float
        Relative tolerance, also the inflation factor.
    max_iter : int
    seed : int
        Seed of the start-vector noise.

    Returns
    -------
    float
        Inflated estimate of the operator norm. Store it on the operator with
        ``op.with_norm_bound(value)``.

    Raises
    ------
    NormEstimateError
        If the Rayleigh quotient has not settled after `max_iter` iterations.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    if op.in_dim < 1:
        raise ValueError("operator has an empty domain")
    rng = np.random.default_rng(seed)
    v = np.ones(op.in_dim) + rng.uniform(-0.5, 0.5, op.in_dim)
    v /= np.linalg.norm(v)
    lam = 0.0
    for it in range(1, max_iter + 1):
        w = op.adjoint(op.apply(v))
        lam_new = float(np.dot(v, w))
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        v = w / nw
        if abs(lam_new - lam) <= tol ** 2 * abs(lam_new):
            return float(np.sqrt(max(lam_new, 0.0)) * (1.0 + tol))
        lam = lam_new
    raise NormEstimateError(lam, max_iter)
