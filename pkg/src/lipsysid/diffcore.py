"""Dense float64 numerics with a small reverse-mode tape.

Matrices and vectors are plain ``numpy`` float64 arrays. Every op in this
module accepts either arrays or :class:`Var` handles: with arrays only it
returns an array and records nothing, so the same forward code serves both
evaluation and training.

    tape = Tape()
    w = tape.watch(W)
    loss = mean(square(matmul(x, w)))
    (gw,) = tape.gradient(loss, [w])
"""
from __future__ import annotations

import numpy as np

__all__ = [
    "Tape",
    "Var",
    "value_of",
    "add",
    "sub",
    "mul",
    "scale",
    "neg",
    "matmul",
    "transpose",
    "exp",
    "relu",
    "leaky_relu",
    "square",
    "sqrt",
    "sum_all",
    "mean",
    "solve",
    "take_rows",
    "cayley",
    "cayley_adjoint",
    "spectral_norm",
]


class Var:
    """Handle to an array recorded on a :class:`Tape`."""

    __slots__ = ("value", "tape", "index")

    def __init__(self, value, tape, index):
        self.value = value
        self.tape = tape
        self.index = index

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    @property
    def T(self):
        return transpose(self)

    def __repr__(self):
        return f"Var(shape={self.value.shape}, index={self.index})"


class Tape:
    """Ordered record of primitive ops; replayed backwards by :meth:`gradient`."""

    def __init__(self):
        # each node: (parents, backward_fn); backward_fn(g) -> tuple of parent grads
        self._nodes = []

    def __len__(self):
        return len(self._nodes)

    def watch(self, value) -> Var:
        """Register a leaf (a trainable input)."""
        arr = np.asarray(value, dtype=np.float64)
        self._nodes.append(((), None))
        return Var(arr, self, len(self._nodes) - 1)

    def record(self, value, parents, backward) -> Var:
        self._nodes.append((parents, backward))
        return Var(value, self, len(self._nodes) - 1)

    def gradient(self, output: Var, inputs, seed=None):
        """Adjoints of ``output`` with respect to each of ``inputs``.

        ``seed`` defaults to ones (so a scalar loss gets d loss / d input).
        Inputs the output does not depend on get zero arrays.
        """
        if output.tape is not self:
            raise ValueError("output was recorded on a different tape")
        grads = [None] * len(self._nodes)
        grads[output.index] = (
            np.ones_like(output.value) if seed is None else np.asarray(seed, dtype=np.float64)
        )
        for idx in range(output.index, -1, -1):
            g = grads[idx]
            if g is None:
                continue
            parents, backward = self._nodes[idx]
            if backward is None:
                continue
            for parent, pg in zip(parents, backward(g)):
                if parent is None or pg is None:
                    continue
                j = parent.index
                grads[j] = pg if grads[j] is None else grads[j] + pg
        out = []
        for v in inputs:
            g = grads[v.index]
            out.append(np.zeros_like(v.value) if g is None else g)
        return out


def value_of(x):
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _tape_of(*xs):
    tape = None
    for x in xs:
        if isinstance(x, Var):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise ValueError("operands recorded on different tapes")
    return tape


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (adjoint of numpy broadcasting)."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _parents(*xs):
    return tuple(x if isinstance(x, Var) else None for x in xs)


def add(a, b):
    tape = _tape_of(a, b)
    va, vb = value_of(a), value_of(b)
    out = va + vb
    if tape is None:
        return out
    return tape.record(
        out, _parents(a, b), lambda g: (_unbroadcast(g, va.shape), _unbroadcast(g, vb.shape))
    )


def sub(a, b):
    tape = _tape_of(a, b)
    va, vb = value_of(a), value_of(b)
    out = va - vb
    if tape is None:
        return out
    return tape.record(
        out, _parents(a, b), lambda g: (_unbroadcast(g, va.shape), _unbroadcast(-g, vb.shape))
    )


def mul(a, b):
    """Elementwise product with broadcasting."""
    tape = _tape_of(a, b)
    va, vb = value_of(a), value_of(b)
    out = va * vb
    if tape is None:
        return out
    return tape.record(
        out,
        _parents(a, b),
        lambda g: (_unbroadcast(g * vb, va.shape), _unbroadcast(g * va, vb.shape)),
    )


def scale(a, c: float):
    tape = _tape_of(a)
    out = value_of(a) * c
    if tape is None:
        return out
    return tape.record(out, (a,), lambda g: (g * c,))


def neg(a):
    return scale(a, -1.0)


def matmul(a, b):
    tape = _tape_of(a, b)
    va, vb = value_of(a), value_of(b)
    out = va @ vb
    if tape is None:
        return out

    def backward(g):
        ga = g @ vb.T if vb.ndim == 2 else np.outer(g, vb)
        gb = va.T @ g if va.ndim == 2 else np.outer(va, g)
        return ga, gb

    return tape.record(out, _parents(a, b), backward)


def transpose(a):
    tape = _tape_of(a)
    out = value_of(a).T
    if tape is None:
        return out
    return tape.record(out, (a,), lambda g: (g.T,))


def exp(a):
    tape = _tape_of(a)
    out = np.exp(value_of(a))
    if tape is None:
        return out
    return tape.record(out, (a,), lambda g: (g * out,))


def relu(a):
    return leaky_relu(a, 0.0)


def leaky_relu(a, slope: float = 0.01):
    tape = _tape_of(a)
    va = value_of(a)
    pos = va > 0
    out = np.where(pos, va, slope * va)
    if tape is None:
        return out
    return tape.record(out, (a,), lambda g: (np.where(pos, g, slope * g),))


def square(a):
    tape = _tape_of(a)
    va = value_of(a)
    out = va * va
    if tape is None:
        return out
    return tape.record(out, (a,), lambda g: (2.0 * g * va,))


def sqrt(a):
    tape = _tape_of(a)
    out = np.sqrt(value_of(a))
    if tape is None:
        return out
    return tape.record(out, (a,), lambda g: (0.5 * g / out,))


def sum_all(a):
    tape = _tape_of(a)
    va = value_of(a)
    out = np.asarray(va.sum())
    if tape is None:
        return out
    return tape.record(out, (a,), lambda g: (np.full(va.shape, float(g)),))


def mean(a):
    n = value_of(a).size
    return scale(sum_all(a), 1.0 / n)


def take_rows(a, rows):
    """``a[rows]`` for a 2-D operand; adjoint scatters back with accumulation."""
    tape = _tape_of(a)
    va = value_of(a)
    rows = np.asarray(rows)
    out = va[rows]
    if tape is None:
        return out

    def backward(g):
        full = np.zeros_like(va)
        np.add.at(full, rows, g)
        return (full,)

    return tape.record(out, (a,), backward)


def solve(m, b):
    """``m⁻¹ b`` through LAPACK LU with partial pivoting.

    The adjoint solves with ``mᵀ`` rather than differentiating elimination:
    b̄ = m⁻ᵀ ḡ, m̄ = −b̄ xᵀ.
    """
    tape = _tape_of(m, b)
    vm, vb = value_of(m), value_of(b)
    try:
        x = np.linalg.solve(vm, vb)
    except np.linalg.LinAlgError as exc:
        raise FloatingPointError(f"singular system in solve: {exc}") from exc
    if tape is None:
        return x

    def backward(g):
        gb = np.linalg.solve(vm.T, g)
        gm = -(gb @ x.T) if x.ndim == 2 else -np.outer(gb, x)
        return gm, gb

    return tape.record(x, _parents(m, b), backward)


def _cayley_core(X, Y):
    n = X.shape[0]
    Z = X - X.T + Y.T @ Y
    M = np.eye(n) + Z
    try:
        W = np.linalg.solve(M, np.eye(n))
    except np.linalg.LinAlgError as exc:
        raise FloatingPointError(
            "I + Z is numerically singular; parameters have overflowed"
        ) from exc
    if not np.all(np.isfinite(W)):
        raise FloatingPointError("non-finite inverse in Cayley transform")
    # Aᵀ = (I+Z)⁻¹(I−Z) = 2W − I and Bᵀ = −2YW
    A = (2.0 * W - np.eye(n)).T
    B = (-2.0 * (Y @ W)).T
    return A, B, W


def cayley(X, Y):
    """Map free ``X`` (n_out×n_out) and ``Y`` (n_in×n_out) to ``(A, B)``
    with ``A Aᵀ + B Bᵀ = I``.

    Recorded as a single tape node whose backward is :func:`cayley_adjoint`.
    Returns a pair of arrays, or a pair of :class:`Var` when either input is one.
    """
    vX, vY = value_of(X), value_of(Y)
    if vX.ndim != 2 or vX.shape[0] != vX.shape[1]:
        raise ValueError(f"X must be square, got {vX.shape}")
    if vY.ndim != 2 or vY.shape[1] != vX.shape[0]:
        raise ValueError(f"Y must have {vX.shape[0]} columns, got {vY.shape}")
    A, B, W = _cayley_core(vX, vY)
    tape = _tape_of(X, Y)
    if tape is None:
        return A, B
    # Pack (A, B) into one node so the adjoint sees both cotangents together.
    n = A.shape[0]
    packed = np.concatenate([A, B], axis=1)

    def backward(g):
        gX, gY = _cayley_adjoint_from(vY, W, g[:, :n], g[:, n:])
        return gX, gY

    node = tape.record(packed, _parents(X, Y), backward)
    return _split_cols(node, n)


def _split_cols(node: Var, n: int):
    tape = node.tape
    v = node.value
    total = v.shape[1]

    def left_bw(g):
        full = np.zeros_like(v)
        full[:, :n] = g
        return (full,)

    def right_bw(g):
        full = np.zeros_like(v)
        full[:, n:] = g
        return (full,)

    a = tape.record(v[:, :n], (node,), left_bw)
    b = tape.record(v[:, n:total], (node,), right_bw)
    return a, b


def _cayley_adjoint_from(Y, W, A_bar, B_bar):
    At_bar = A_bar.T
    Bt_bar = B_bar.T
    W_bar = 2.0 * At_bar - 2.0 * (Y.T @ Bt_bar)
    Y_bar = -2.0 * (Bt_bar @ W.T)
    # d(M⁻¹) = −M⁻¹ dM M⁻¹
    Z_bar = -(W.T @ W_bar @ W.T)
    X_bar = Z_bar - Z_bar.T
    Y_bar = Y_bar + Y @ (Z_bar + Z_bar.T)
    return X_bar, Y_bar


def cayley_adjoint(X, Y, A_bar, B_bar):
    """Adjoints ``(X̄, Ȳ)`` of the Cayley map given output adjoints ``(Ā, B̄)``."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    _, _, W = _cayley_core(X, Y)
    return _cayley_adjoint_from(Y, W, np.asarray(A_bar, float), np.asarray(B_bar, float))


def spectral_norm(M, tol: float = 1e-9, max_iter: int = 10_000, seed: int = 0) -> float:
    """Largest singular value by power iteration on ``MᵀM``.

    Deterministic: the start vector comes from ``seed``. Stops when the
    Rayleigh estimate changes by less than ``tol`` relative.
    """
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2:
        raise ValueError("spectral_norm expects a 2-D matrix")
    if M.size == 0 or not np.any(M):
        return 0.0
    MtM = M.T @ M
    x = np.random.default_rng(seed).standard_normal(M.shape[1])
    x /= np.linalg.norm(x)
    lam = 0.0
    for _ in range(max_iter):
        y = MtM @ x
        ny = np.linalg.norm(y)
        if ny == 0.0:
            # start vector landed in the null space; restart orthogonal-ish
            x = np.roll(x, 1) + 1.0
            x /= np.linalg.norm(x)
            continue
        lam_new = float(x @ y)
        x = y / ny
        if abs(lam_new - lam) <= tol * abs(lam_new):
            lam = lam_new
            break
        lam = lam_new
    # one more Rayleigh quotient on the converged vector
    lam = max(lam, float(x @ (MtM @ x)))
    return float(np.sqrt(max(lam, 0.0)))
