"""Dense-matrix reverse-mode differentiation.

Every value is a 2-D array wrapped in a :class:`GradMatrix`. Nodes that depend
on a ``requires_grad`` leaf are recorded on their :class:`Tape` in creation
order, which is already a topological order, so a reverse sweep over the list
visits each node once.

Each primitive carries two vector-Jacobian products:

* a numpy one, used by :meth:`Tape.backward` and by ``Tape.grad`` when no graph
  is requested;
* a node-level one written with the primitives themselves, used by
  ``Tape.grad(..., create_graph=True)``. The gradient it returns is recorded on
  the tape, which is how an SGD step inside an unrolled inner loop stays
  differentiable with respect to the data that produced it.

The outer loss is still differentiated with a single first-order sweep.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, StateError

DTYPES = {"f32": np.float32, "f64": np.float64}


class Tape:
    """Records differentiable operations. Build a fresh tape per outer iteration."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.nodes: list[GradMatrix] = []
        self.consumed = False

    def leaf(self, value, requires_grad=True) -> "GradMatrix":
        arr = np.array(value, dtype=self.dtype, copy=True, ndmin=2)
        if arr.ndim != 2:
            raise DimensionError(f"leaf must be 2-D, got shape {arr.shape}")
        node = GradMatrix(self, arr, requires_grad=requires_grad)
        if requires_grad:
            self._record(node)
        return node

    def const(self, value) -> "GradMatrix":
        return self.leaf(value, requires_grad=False)

    def scalar(self, value, requires_grad=False) -> "GradMatrix":
        return self.leaf([[value]], requires_grad=requires_grad)

    def _record(self, node):
        node.index = len(self.nodes)
        self.nodes.append(node)

    # -- reverse sweeps -----------------------------------------------------

    def backward(self, loss: "GradMatrix") -> dict:
        """Populate ``.grad`` on every requires-grad leaf of this tape.

        Leaves that do not reach ``loss`` get an exact zero gradient. Returns a
        map from leaf to gradient array. A tape can be swept this way once.
        """
        if self.consumed:
            raise StateError("backward already ran on this tape; build a new tape")
        _check_loss(loss, self)
        leaves = [n for n in self.nodes[: loss.index + 1] if n.parents is None]
        found = self._sweep(loss, {n.index for n in leaves}, lowest=0)
        self.consumed = True
        out = {}
        for node in self.nodes:
            if node.parents is None:
                g = found.get(node.index)
                node.grad = np.zeros_like(node.value) if g is None else np.array(g, copy=True)
                out[node] = node.grad
        return out

    def grad(self, loss: "GradMatrix", wrt: Sequence["GradMatrix"], create_graph=False):
        """Gradients of ``loss`` with respect to ``wrt``, without touching ``.grad``.

        With ``create_graph`` the results are recorded nodes on this tape and can
        themselves be differentiated by a later sweep.
        """
        _check_loss(loss, self)
        wrt = list(wrt)
        keep = {w.index for w in wrt if w.index >= 0 and w.index <= loss.index}
        found = {}
        if keep:
            sweep = self._sweep_graph if create_graph else self._sweep
            found = sweep(loss, keep, lowest=min(keep))
        result = []
        for w in wrt:
            g = found.get(w.index) if w.index in keep else None
            if g is None:
                result.append(GradMatrix(self, np.zeros_like(w.value)))
            else:
                result.append(g if isinstance(g, GradMatrix) else GradMatrix(self, g))
        return result

    def _sweep(self, loss, keep, lowest):
        grads = {loss.index: np.ones_like(loss.value)}
        found = {}
        nodes = self.nodes
        for i in range(loss.index, lowest - 1, -1):
            g = grads.pop(i, None)
            if g is None:
                continue
            if i in keep:
                found[i] = g
            node = nodes[i]
            if node.parents is None or i == lowest:
                continue
            pgrads = node.bwd_np(g)
            for parent, pg in zip(node.parents, pgrads):
                j = parent.index
                if pg is None or j < lowest:
                    continue
                grads[j] = grads[j] + pg if j in grads else pg
        return found

    def _sweep_graph(self, loss, keep, lowest):
        grads = {loss.index: GradMatrix(self, np.ones_like(loss.value))}
        found = {}
        nodes = self.nodes
        for i in range(loss.index, lowest - 1, -1):
            g = grads.pop(i, None)
            if g is None:
                continue
            if i in keep:
                found[i] = g
            node = nodes[i]
            if node.parents is None or i == lowest:
                continue
            pgrads = node.bwd_node(g, node)
            for parent, pg in zip(node.parents, pgrads):
                j = parent.index
                if pg is None or j < lowest:
                    continue
                grads[j] = add(grads[j], pg) if j in grads else pg
        return found


def _check_loss(loss, tape):
    if loss.tape is not tape:
        raise ContractError("loss belongs to a different tape")
    if loss.value.shape != (1, 1):
        raise ContractError(f"loss must be 1x1, got {loss.value.shape}")


class GradMatrix:
    """A 2-D value on a tape together with its accumulated gradient."""

    __slots__ = ("tape", "value", "grad", "requires_grad", "parents", "bwd_np", "bwd_node", "index")

    def __init__(self, tape, value, requires_grad=False, parents=None, bwd_np=None, bwd_node=None):
        self.tape = tape
        self.value = value
        self.grad = None
        self.requires_grad = requires_grad
        self.parents = parents
        self.bwd_np = bwd_np
        self.bwd_node = bwd_node
        self.index = -1

    @property
    def shape(self):
        return self.value.shape

    @property
    def rows(self):
        return self.value.shape[0]

    @property
    def cols(self):
        return self.value.shape[1]

    def item(self) -> float:
        return float(self.value[0, 0])

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self):
        flag = ", requires_grad" if self.requires_grad else ""
        return f"GradMatrix(shape={self.value.shape}{flag})"

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale_const(self, -1.0)

    @property
    def T(self):
        return transpose(self)


def _node(tape, value, parents, bwd_np, bwd_node):
    """Create an op output, recording it only if some parent needs gradients."""
    if any(p.requires_grad for p in parents):
        node = GradMatrix(tape, value, True, parents, bwd_np, bwd_node)
        tape._record(node)
        return node
    return GradMatrix(tape, value)


def _same_shape(a, b, name):
    if a.value.shape != b.value.shape:
        raise DimensionError(f"{name}: shapes {a.value.shape} and {b.value.shape} differ")


# -- linear primitives -------------------------------------------------------


def matmul(a: GradMatrix, b: GradMatrix) -> GradMatrix:
    if a.value.shape[1] != b.value.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.value.shape} by {b.value.shape}")
    av, bv = a.value, b.value
    return _node(
        a.tape,
        av @ bv,
        (a, b),
        lambda g: (g @ bv.T, av.T @ g),
        lambda g, out: (matmul(g, transpose(b)), matmul(transpose(a), g)),
    )


def transpose(a: GradMatrix) -> GradMatrix:
    return _node(
        a.tape,
        a.value.T,
        (a,),
        lambda g: (g.T,),
        lambda g, out: (transpose(g),),
    )


def add(a: GradMatrix, b: GradMatrix) -> GradMatrix:
    _same_shape(a, b, "add")
    return _node(a.tape, a.value + b.value, (a, b), lambda g: (g, g), lambda g, out: (g, g))


def sub(a: GradMatrix, b: GradMatrix) -> GradMatrix:
    _same_shape(a, b, "sub")
    return _node(
        a.tape,
        a.value - b.value,
        (a, b),
        lambda g: (g, -g),
        lambda g, out: (g, scale_const(g, -1.0)),
    )


def mul(a: GradMatrix, b: GradMatrix) -> GradMatrix:
    """Elementwise product of equal-shape matrices."""
    _same_shape(a, b, "mul")
    av, bv = a.value, b.value
    return _node(
        a.tape,
        av * bv,
        (a, b),
        lambda g: (g * bv, g * av),
        lambda g, out: (mul(g, b), mul(g, a)),
    )


def scale_const(a: GradMatrix, c: float) -> GradMatrix:
    c = float(c)
    return _node(a.tape, a.value * c, (a,), lambda g: (g * c,), lambda g, out: (scale_const(g, c),))


def add_const(a: GradMatrix, c: float) -> GradMatrix:
    c = float(c)
    return _node(a.tape, a.value + c, (a,), lambda g: (g,), lambda g, out: (g,))


def scale(a: GradMatrix, s: GradMatrix) -> GradMatrix:
    """Multiply ``a`` by the 1x1 node ``s``."""
    if s.value.shape != (1, 1):
        raise DimensionError(f"scale: factor must be 1x1, got {s.value.shape}")
    av, sv = a.value, s.value[0, 0]
    return _node(
        a.tape,
        av * sv,
        (a, s),
        lambda g: (g * sv, np.sum(g * av).reshape(1, 1)),
        lambda g, out: (scale(g, s), sum_all(mul(a, g))),
    )


def sum_all(a: GradMatrix) -> GradMatrix:
    shape = a.value.shape
    return _node(
        a.tape,
        np.sum(a.value).reshape(1, 1),
        (a,),
        lambda g: (np.full(shape, g[0, 0], dtype=g.dtype),),
        lambda g, out: (broadcast(g, shape),),
    )


def broadcast(s: GradMatrix, shape) -> GradMatrix:
    """Fill a matrix of ``shape`` with the single entry of ``s``."""
    if s.value.shape != (1, 1):
        raise DimensionError(f"broadcast: source must be 1x1, got {s.value.shape}")
    shape = tuple(shape)
    return _node(
        s.tape,
        np.full(shape, s.value[0, 0], dtype=s.value.dtype),
        (s,),
        lambda g: (np.sum(g).reshape(1, 1),),
        lambda g, out: (sum_all(g),),
    )


def add_row(a: GradMatrix, row: GradMatrix) -> GradMatrix:
    """Add a 1xd row vector to every row of ``a`` (bias add)."""
    if row.value.shape != (1, a.value.shape[1]):
        raise DimensionError(f"add_row: row {row.value.shape} does not fit {a.value.shape}")
    return _node(
        a.tape,
        a.value + row.value,
        (a, row),
        lambda g: (g, g.sum(axis=0, keepdims=True)),
        lambda g, out: (g, colsum(g)),
    )


def colsum(a: GradMatrix) -> GradMatrix:
    n = a.value.shape[0]
    return _node(
        a.tape,
        a.value.sum(axis=0, keepdims=True),
        (a,),
        lambda g: (np.repeat(g, n, axis=0),),
        lambda g, out: (tile_rows(g, n),),
    )


def tile_rows(row: GradMatrix, n: int) -> GradMatrix:
    return _node(
        row.tape,
        np.repeat(row.value, n, axis=0),
        (row,),
        lambda g: (g.sum(axis=0, keepdims=True),),
        lambda g, out: (colsum(g),),
    )


def rowsum(a: GradMatrix) -> GradMatrix:
    d = a.value.shape[1]
    return _node(
        a.tape,
        a.value.sum(axis=1, keepdims=True),
        (a,),
        lambda g: (np.repeat(g, d, axis=1),),
        lambda g, out: (tile_cols(g, d),),
    )


def tile_cols(col: GradMatrix, d: int) -> GradMatrix:
    return _node(
        col.tape,
        np.repeat(col.value, d, axis=1),
        (col,),
        lambda g: (g.sum(axis=1, keepdims=True),),
        lambda g, out: (rowsum(g),),
    )


def mul_col(a: GradMatrix, col: GradMatrix) -> GradMatrix:
    """Scale row i of ``a`` by ``col[i, 0]``."""
    if col.value.shape != (a.value.shape[0], 1):
        raise DimensionError(f"mul_col: column {col.value.shape} does not fit {a.value.shape}")
    av, cv = a.value, col.value
    return _node(
        a.tape,
        av * cv,
        (a, col),
        lambda g: (g * cv, (g * av).sum(axis=1, keepdims=True)),
        lambda g, out: (mul_col(g, col), rowsum(mul(g, a))),
    )


def take_rows(a: GradMatrix, idx) -> GradMatrix:
    idx = np.asarray(idx, dtype=np.intp)
    n = a.value.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise DimensionError(f"take_rows: index out of range for {n} rows")

    def bwd_np(g):
        out = np.zeros((n, g.shape[1]), dtype=g.dtype)
        np.add.at(out, idx, g)
        return (out,)

    return _node(a.tape, a.value[idx], (a,), bwd_np, lambda g, out: (put_rows(g, idx, n),))


def put_rows(a: GradMatrix, idx, n: int) -> GradMatrix:
    """Scatter-add the rows of ``a`` into an ``n``-row zero matrix at ``idx``."""
    idx = np.asarray(idx, dtype=np.intp)
    value = np.zeros((n, a.value.shape[1]), dtype=a.value.dtype)
    np.add.at(value, idx, a.value)
    return _node(a.tape, value, (a,), lambda g: (g[idx],), lambda g, out: (take_rows(g, idx),))


# -- nonlinear primitives ------------------------------------------------------


def _sigmoid_np(x):
    # branch on sign so exp never sees a large positive argument
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)


def sigmoid(a: GradMatrix) -> GradMatrix:
    s = _sigmoid_np(a.value)
    return _node(
        a.tape,
        s,
        (a,),
        lambda g: (g * s * (1.0 - s),),
        lambda g, out: (mul(g, mul(out, add_const(scale_const(out, -1.0), 1.0))),),
    )


def softplus(a: GradMatrix) -> GradMatrix:
    """log(1 + e^x) in the overflow-free form max(x, 0) + log1p(e^-|x|)."""
    x = a.value
    value = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))
    return _node(
        a.tape,
        value,
        (a,),
        lambda g: (g * _sigmoid_np(x),),
        lambda g, out: (mul(g, sigmoid(a)),),
    )


def tanh(a: GradMatrix) -> GradMatrix:
    t = np.tanh(a.value)
    return _node(
        a.tape,
        t,
        (a,),
        lambda g: (g * (1.0 - t * t),),
        lambda g, out: (mul(g, add_const(scale_const(mul(out, out), -1.0), 1.0)),),
    )


def exp(a: GradMatrix) -> GradMatrix:
    e = np.exp(a.value)
    return _node(a.tape, e, (a,), lambda g: (g * e,), lambda g, out: (mul(g, out),))


def recip(a: GradMatrix) -> GradMatrix:
    r = 1.0 / a.value
    return _node(
        a.tape,
        r,
        (a,),
        lambda g: (-g * r * r,),
        lambda g, out: (scale_const(mul(g, mul(out, out)), -1.0),),
    )


def logsumexp_rows(a: GradMatrix) -> GradMatrix:
    """Row-wise log-sum-exp, returned as an n x 1 column."""
    x = a.value
    m = x.max(axis=1, keepdims=True)
    lse = m + np.log(np.exp(x - m).sum(axis=1, keepdims=True))
    d = x.shape[1]

    def bwd_np(g):
        return (g * np.exp(x - lse),)

    def bwd_node(g, out):
        return (mul(tile_cols(g, d), exp(sub(a, tile_cols(out, d)))),)

    return _node(a.tape, lse, (a,), bwd_np, bwd_node)


def clip(a: GradMatrix, lo: float, hi: float, pass_lo: float | None = None, pass_hi: float | None = None):
    """Clip values to [lo, hi].

    The gradient is passed through wherever the input lies in
    [pass_lo, pass_hi] (defaults: [lo, hi], the ordinary clip derivative), so a
    clip with a small safety margin can still let boundary values move.
    """
    pass_lo = lo if pass_lo is None else pass_lo
    pass_hi = hi if pass_hi is None else pass_hi
    x = a.value
    mask = ((x >= pass_lo) & (x <= pass_hi)).astype(x.dtype)
    mask_node = GradMatrix(a.tape, mask)
    return _node(
        a.tape,
        np.clip(x, lo, hi),
        (a,),
        lambda g: (g * mask,),
        lambda g, out: (mul(g, mask_node),),
    )


def row_norms(a: GradMatrix, eps: float) -> GradMatrix:
    """Guarded row norms max(||row||, eps) as an n x 1 column."""
    x = a.value
    nrm = np.sqrt((x * x).sum(axis=1, keepdims=True))
    live = (nrm >= eps).astype(x.dtype)
    r = np.where(live > 0, nrm, eps).astype(x.dtype)
    live_node = GradMatrix(a.tape, live)

    def bwd_np(g):
        return (x * (g * live / r),)

    def bwd_node(g, out):
        return (mul_col(a, mul(mul(g, recip(out)), live_node)),)

    return _node(a.tape, r, (a,), bwd_np, bwd_node)


def row_normalize(a: GradMatrix, eps: float = 1e-8) -> GradMatrix:
    """Map each row r to r / max(||r||, eps)."""
    if not eps > 0:
        raise ContractError(f"row_normalize: eps must be positive, got {eps}")
    x = a.value
    nrm = np.sqrt((x * x).sum(axis=1, keepdims=True))
    live = (nrm >= eps).astype(x.dtype)
    r = np.where(live > 0, nrm, eps).astype(x.dtype)
    y = x / r
    live_node = GradMatrix(a.tape, live)

    def bwd_np(g):
        radial = (g * y).sum(axis=1, keepdims=True) * live
        return ((g - y * radial) / r,)

    def bwd_node(g, out):
        radial = mul(rowsum(mul(g, out)), live_node)
        return (mul_col(sub(g, mul_col(out, radial)), recip(row_norms(a, eps))),)

    return _node(a.tape, y, (a,), bwd_np, bwd_node)


# -- finite-difference checking ---------------------------------------------


def grad_check(
    builder: Callable[[Tape, list], GradMatrix],
    leaves: Sequence[np.ndarray],
    step: float = 1e-5,
    oracle_dtype=np.float64,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``builder(tape, nodes)`` must build the scalar loss from the leaf nodes and
    be a deterministic function of the leaf values. The analytic gradient is
    always taken in 64-bit. ``oracle_dtype=np.longdouble`` evaluates the
    differences in extended precision, which removes their rounding error
    where a gradient entry is small next to the loss.
    """
    if not step > 0:
        raise ContractError(f"grad_check: step must be positive, got {step}")
    base = [np.array(v, dtype=np.float64, ndmin=2) for v in leaves]

    def evaluate(values, dtype=np.float64):
        tape = Tape(dtype)
        nodes = [tape.leaf(v) for v in values]
        return tape, nodes, builder(tape, nodes)

    tape, nodes, loss = evaluate(base)
    f0 = loss.item()
    if evaluate(base)[2].item() != f0:
        raise ContractError("grad_check: builder is not deterministic (value drift between calls)")
    tape.backward(loss)
    analytic = [n.grad for n in nodes]

    wide = [v.astype(oracle_dtype) for v in base]
    worst = 0.0
    for k, arr in enumerate(wide):
        for idx in np.ndindex(arr.shape):
            plus = [v.copy() for v in wide]
            minus = [v.copy() for v in wide]
            plus[k][idx] += step
            minus[k][idx] -= step
            hi = evaluate(plus, oracle_dtype)[2].value[0, 0]
            lo = evaluate(minus, oracle_dtype)[2].value[0, 0]
            numeric = (hi - lo) / (2 * step)
            a = analytic[k][idx]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-12)
            worst = max(worst, err)
    return float(worst)
