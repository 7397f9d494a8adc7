"""Tape-based reverse-mode differentiation over dense 2-D float64 arrays.

Every value on a tape is a ``(rows, cols)`` matrix.  Operations append a
node holding the forward value and whatever the backward rule needs; a
backward sweep walks the nodes in reverse creation order, so inputs always
precede their consumers.

Besides the usual scalar-root backward pass, :meth:`Tape.per_sample_sq_norms`
computes the squared global norm of every *per-sample* gradient without
materialising them.  Each node carries an optional ``owner`` array mapping
its rows to sample indices, which is how rows that belong to the same
sample (e.g. the K importance draws of one input) are grouped.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Node:
    __slots__ = ("tape", "id", "value", "grad", "op", "inputs", "saved", "owner", "name", "requires_grad")

    def __init__(self, tape, value, op, inputs=(), saved=None, owner=None, name=None, requires_grad=False):
        self.tape = tape
        self.id = len(tape.nodes)
        self.value = value
        self.grad = None
        self.op = op
        self.inputs = tuple(inputs)
        self.saved = saved
        self.owner = owner
        self.name = name
        self.requires_grad = requires_grad
        tape.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        label = self.name or self.op
        return f"Node({label}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, scale(self.tape._wrap(other), -1.0))

    def __rsub__(self, other):
        return add(other, scale(self, -1.0))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_matrix(value):
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise ShapeError(f"tape values must be at most 2-D, got shape {arr.shape}")
    return arr


class Tape:
    """An ordered record of primitive operations.

    A tape is single-use and single-threaded: build it, run one or more
    backward sweeps, then discard it.
    """

    def __init__(self):
        self.nodes = []

    def leaf(self, value, name=None, requires_grad=True, owner=None):
        """Register an input.  Parameters should pass ``requires_grad=True``."""
        value = _as_matrix(value).copy()
        if owner is not None:
            owner = np.asarray(owner, dtype=np.intp)
            if owner.shape != (value.shape[0],):
                raise ShapeError(f"owner length {owner.shape} does not match rows of {value.shape}")
        return Node(self, value, "leaf", owner=owner, name=name, requires_grad=requires_grad)

    def constant(self, value, owner=None):
        return self.leaf(value, requires_grad=False, owner=owner)

    def _wrap(self, x):
        if isinstance(x, Node):
            if x.tape is not self:
                raise ValueError("cannot mix nodes from different tapes")
            return x
        return self.constant(x)

    @property
    def parameters(self):
        return [n for n in self.nodes if n.op == "leaf" and n.requires_grad]

    def vjp(self, node, seed):
        """Back-propagate ``seed`` (shaped like ``node``) through the tape.

        Leaves every node's ``.grad`` set; nodes not reached get zeros.
        """
        seed = _as_matrix(seed)
        if seed.shape != node.shape:
            raise ShapeError(f"seed shape {seed.shape} does not match node shape {node.shape}")
        for n in self.nodes:
            n.grad = None
        node.grad = seed.copy()
        for n in reversed(self.nodes[: node.id + 1]):
            if n.grad is None or n.op == "leaf":
                continue
            for inp, g in zip(n.inputs, _BACKWARD[n.op](n, n.grad)):
                if g is None:
                    continue
                if inp.grad is None:
                    inp.grad = g
                else:
                    inp.grad = inp.grad + g
        for n in self.nodes:
            if n.grad is None:
                n.grad = np.zeros_like(n.value)

    def backward(self, root):
        """Gradients of the scalar ``root`` for every parameter leaf, keyed by name."""
        if root.shape != (1, 1):
            raise ShapeError(f"backward needs a scalar (1, 1) root, got {root.shape}")
        self.vjp(root, np.ones((1, 1)))
        return {(p.name if p.name is not None else p.id): p.grad for p in self.parameters}

    def per_sample_sq_norms(self, losses, n_samples):
        """Squared global gradient norm of each per-sample loss.

        ``losses`` is an ``(n_samples, 1)`` node whose row ``i`` depends only
        on rows owned by sample ``i``.  Every parameter must enter the graph
        exactly once, either as the right operand of ``matmul`` or as the
        bias of ``add_row``.  Norms are computed from Gram matrices of
        activations and output gradients, so no per-sample gradient is
        ever built.
        """
        if losses.shape != (n_samples, 1):
            raise ShapeError(f"losses must have shape ({n_samples}, 1), got {losses.shape}")
        self.vjp(losses, np.ones((n_samples, 1)))
        params = {p.id for p in self.parameters}
        seen = set()
        sq = np.zeros(n_samples)
        for n in self.nodes[: losses.id + 1]:
            for pos, inp in enumerate(n.inputs):
                if inp.id not in params:
                    continue
                if inp.id in seen:
                    raise NotImplementedError(f"parameter {inp.name!r} is used more than once")
                seen.add(inp.id)
                if n.op == "matmul" and pos == 1:
                    act = n.inputs[0]
                    sq += _grouped_outer_sq_norm(act.value, n.grad, act.owner, n_samples)
                elif n.op == "add_row" and pos == 1:
                    sq += _grouped_sum_sq_norm(n.grad, n.owner, n_samples)
                else:
                    raise NotImplementedError(
                        f"per-sample norms unsupported for parameter {inp.name!r} in op {n.op!r}"
                    )
        return sq


def _check_owner(owner, rows, n_samples):
    if owner is None:
        raise ValueError("rows have no sample owner; cannot group per sample")
    if owner.shape[0] != rows:
        raise ShapeError(f"owner length {owner.shape[0]} does not match {rows} rows")
    if rows % n_samples:
        raise NotImplementedError("unequal group sizes are not supported")


def _grouped_outer_sq_norm(act, gout, owner, n_samples):
    # ||sum_r a_r g_r^T||_F^2 over the rows r of each sample.
    rows = act.shape[0]
    _check_owner(owner, rows, n_samples)
    k = rows // n_samples
    if k == 1:
        return np.einsum("ij,ij->i", act, act) * np.einsum("ij,ij->i", gout, gout)
    order = np.argsort(owner, kind="stable")
    a = act[order].reshape(n_samples, k, -1)
    g = gout[order].reshape(n_samples, k, -1)
    gram_a = np.einsum("nka,nla->nkl", a, a)
    gram_g = np.einsum("nkb,nlb->nkl", g, g)
    return np.einsum("nkl,nkl->n", gram_a, gram_g)


def _grouped_sum_sq_norm(gout, owner, n_samples):
    rows = gout.shape[0]
    _check_owner(owner, rows, n_samples)
    summed = np.zeros((n_samples, gout.shape[1]))
    np.add.at(summed, owner, gout)
    return np.einsum("ij,ij->i", summed, summed)


def _merge_owner(a, b):
    if a.owner is None:
        return b.owner if b.shape[0] == a.shape[0] else None
    return a.owner


def _same_shape(op, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def matmul(a, b):
    tape = a.tape
    b = tape._wrap(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    return Node(tape, a.value @ b.value, "matmul", (a, b), owner=a.owner)


def add(a, b):
    if not isinstance(a, Node):
        a, b = b, a
    tape = a.tape
    b = tape._wrap(b)
    _same_shape("add", a, b)
    return Node(tape, a.value + b.value, "add", (a, b), owner=_merge_owner(a, b))


def add_row(a, row):
    """Add a ``(1, cols)`` row vector to every row of ``a``."""
    tape = a.tape
    row = tape._wrap(row)
    if row.shape != (1, a.shape[1]):
        raise ShapeError(f"add_row: row shape {row.shape} does not broadcast over {a.shape}")
    return Node(tape, a.value + row.value, "add_row", (a, row), owner=a.owner)


def mul(a, b):
    if not isinstance(a, Node):
        a, b = b, a
    tape = a.tape
    b = tape._wrap(b)
    _same_shape("mul", a, b)
    return Node(tape, a.value * b.value, "mul", (a, b), owner=_merge_owner(a, b))


def scale(a, c):
    return Node(a.tape, a.value * c, "scale", (a,), saved=float(c), owner=a.owner)


def shift(a, c):
    """Add a scalar constant."""
    return Node(a.tape, a.value + c, "shift", (a,), owner=a.owner)


def relu(a):
    return Node(a.tape, np.maximum(a.value, 0.0), "relu", (a,), owner=a.owner)


def exp(a):
    return Node(a.tape, np.exp(a.value), "exp", (a,), owner=a.owner)


def log(a):
    return Node(a.tape, np.log(a.value), "log", (a,), owner=a.owner)


def square(a):
    return Node(a.tape, a.value * a.value, "square", (a,), owner=a.owner)


def clip(a, lo, hi):
    """Clamp to ``[lo, hi]``; gradient passes only where the input is inside."""
    return Node(a.tape, np.clip(a.value, lo, hi), "clip", (a,), saved=(lo, hi), owner=a.owner)


def sum(a, axis=None):  # noqa: A001 - mirrors numpy naming
    if axis is None:
        return Node(a.tape, a.value.sum().reshape(1, 1), "sum", (a,), saved=None)
    if axis != 1:
        raise ValueError("sum supports axis=None or axis=1")
    return Node(a.tape, a.value.sum(axis=1, keepdims=True), "sum", (a,), saved=1, owner=a.owner)


def mean(a):
    return Node(a.tape, a.value.mean().reshape(1, 1), "mean", (a,))


def logsumexp_rows(a):
    """Row-wise ``m + log(sum(exp(v - m)))`` with ``m`` the row maximum."""
    v = a.value
    m = v.max(axis=1, keepdims=True)
    e = np.exp(v - m)
    s = e.sum(axis=1, keepdims=True)
    out = m + np.log(s)
    return Node(a.tape, out, "logsumexp_rows", (a,), saved=e / s, owner=a.owner)


def repeat_rows(a, k):
    """Repeat each row ``k`` times consecutively (``np.repeat`` along axis 0)."""
    owner = None if a.owner is None else np.repeat(a.owner, k)
    return Node(a.tape, np.repeat(a.value, k, axis=0), "repeat_rows", (a,), saved=int(k), owner=owner)


def reshape(a, shape):
    rows, cols = shape
    if rows * cols != a.value.size:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {shape}")
    owner = None
    if a.owner is not None:
        if rows == a.shape[0]:
            owner = a.owner
        elif a.shape[0] % rows == 0:
            grouped = a.owner.reshape(rows, -1)
            if np.all(grouped == grouped[:, :1]):
                owner = grouped[:, 0].copy()
    return Node(a.tape, a.value.reshape(rows, cols), "reshape", (a,), owner=owner)


def _bw_matmul(n, g):
    a, b = n.inputs
    return g @ b.value.T, a.value.T @ g


def _bw_logsumexp(n, g):
    return (g * n.saved,)


def _bw_sum(n, g):
    (a,) = n.inputs
    return (np.broadcast_to(g, a.shape).copy(),)


def _bw_clip(n, g):
    (a,) = n.inputs
    lo, hi = n.saved
    inside = (a.value >= lo) & (a.value <= hi)
    return (g * inside,)


def _bw_repeat(n, g):
    (a,) = n.inputs
    k = n.saved
    return (g.reshape(a.shape[0], k, a.shape[1]).sum(axis=1),)


_BACKWARD = {
    "matmul": _bw_matmul,
    "add": lambda n, g: (g, g),
    "add_row": lambda n, g: (g, g.sum(axis=0, keepdims=True)),
    "mul": lambda n, g: (g * n.inputs[1].value, g * n.inputs[0].value),
    "scale": lambda n, g: (g * n.saved,),
    "shift": lambda n, g: (g,),
    "relu": lambda n, g: (g * (n.inputs[0].value > 0),),
    "exp": lambda n, g: (g * n.value,),
    "log": lambda n, g: (g / n.inputs[0].value,),
    "square": lambda n, g: (2.0 * n.inputs[0].value * g,),
    "clip": _bw_clip,
    "sum": _bw_sum,
    "mean": lambda n, g: (np.full(n.inputs[0].shape, g.item() / n.inputs[0].value.size),),
    "logsumexp_rows": _bw_logsumexp,
    "repeat_rows": _bw_repeat,
    "reshape": lambda n, g: (g.reshape(n.inputs[0].shape),),
}
