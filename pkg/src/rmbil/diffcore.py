"""Small dense-tensor reverse-mode autodiff, an ELU MLP, and Adam.

Every tensor holds a float64 numpy array. Operations are recorded on an
explicit :class:`Tape` (pass ``tape=None`` to evaluate without recording),
and :func:`backward` walks the tape once in reverse.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "NonFiniteError",
    "Tensor",
    "Tape",
    "backward",
    "elu",
    "Mlp",
    "mlp_forward",
    "OptimState",
    "adam_step",
]

ELU_ALPHA = 1.0
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
LR_DECAY = 0.5
LR_DECAY_EVERY = 100

class NonFiniteError(FloatingPointError):
    """Raised when a primitive produces NaN or Inf."""


def _check_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite value produced by {what}")
    return arr


class Tensor:
    """A float64 array with an identity used by the tape."""

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def id(self):
        # object identity: the tape keeps every recorded tensor alive, so
        # this stays unique for the whole backward sweep (and survives copies
        # and unpickling, unlike a global counter)
        return id(self)

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.data.shape})"


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


@dataclass
class _Node:
    op: str
    inputs: tuple
    output: Tensor
    vjp: object  # callable: output grad -> tuple of input grads


@dataclass
class Tape:
    """Ordered record of primitive ops.

    Inputs are always recorded before their consumers, so reversing the node
    list is a valid topological order for the backward sweep.
    """

    nodes: list = field(default_factory=list)

    def _record(self, op, inputs, out, vjp):
        _check_finite(out.data, op)
        self.nodes.append(_Node(op, inputs, out, vjp))
        return out

    # primitives -----------------------------------------------------------
    def add(self, a, b):
        a, b = _as_tensor(a), _as_tensor(b)
        out = Tensor(a.data + b.data)
        sa, sb = a.data.shape, b.data.shape
        return self._record("add", (a, b), out,
                            lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))

    def sub(self, a, b):
        a, b = _as_tensor(a), _as_tensor(b)
        out = Tensor(a.data - b.data)
        sa, sb = a.data.shape, b.data.shape
        return self._record("sub", (a, b), out,
                            lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))

    def mul(self, a, b):
        a, b = _as_tensor(a), _as_tensor(b)
        out = Tensor(a.data * b.data)
        av, bv = a.data, b.data
        return self._record(
            "mul", (a, b), out,
            lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))

    def scale(self, a, c):
        a = _as_tensor(a)
        c = float(c)
        return self._record("scale", (a,), Tensor(a.data * c), lambda g: (g * c,))

    def matmul(self, a, b):
        """``a @ b`` for a of shape (..., k) and b of shape (k, j)."""
        a, b = _as_tensor(a), _as_tensor(b)
        if a.data.shape[-1] != b.data.shape[0]:
            raise ValueError(f"matmul shape mismatch {a.data.shape} @ {b.data.shape}")
        av, bv = a.data, b.data

        def vjp(g):
            ga = g @ bv.T
            a2 = av.reshape(-1, av.shape[-1])
            gb = a2.T @ g.reshape(-1, g.shape[-1])
            return ga, gb

        return self._record("matmul", (a, b), Tensor(av @ bv), vjp)

    def elu(self, a):
        a = _as_tensor(a)
        x = a.data
        neg = x < 0
        ex = np.exp(np.where(neg, x, 0.0))
        out = np.where(neg, ELU_ALPHA * (ex - 1.0), x)
        dout = np.where(neg, ELU_ALPHA * ex, 1.0)
        return self._record("elu", (a,), Tensor(out), lambda g: (g * dout,))

    def exp(self, a):
        a = _as_tensor(a)
        with np.errstate(over="ignore"):  # overflow is reported by _check_finite
            out = np.exp(a.data)
        return self._record("exp", (a,), Tensor(out), lambda g: (g * out,))

    def square(self, a):
        a = _as_tensor(a)
        x = a.data
        return self._record("square", (a,), Tensor(x * x), lambda g: (2.0 * g * x,))

    def sum(self, a, axis=None):
        a = _as_tensor(a)
        shape = a.data.shape

        def vjp(g):
            if axis is None:
                return (np.broadcast_to(g, shape).copy(),)
            return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

        return self._record("sum", (a,), Tensor(a.data.sum(axis=axis)), vjp)

    def reshape(self, a, shape):
        a = _as_tensor(a)
        old = a.data.shape
        return self._record("reshape", (a,), Tensor(a.data.reshape(shape)),
                            lambda g: (g.reshape(old),))

    def concat(self, tensors, axis=-1):
        tensors = tuple(_as_tensor(t) for t in tensors)
        sizes = [t.data.shape[axis] for t in tensors]
        splits = np.cumsum(sizes)[:-1]
        out = np.concatenate([t.data for t in tensors], axis=axis)
        return self._record("concat", tensors, Tensor(out),
                            lambda g: tuple(np.split(g, splits, axis=axis)))

    def slice(self, a, index):
        """``a[..., index]`` on the last axis with a python slice."""
        a = _as_tensor(a)
        shape = a.data.shape

        def vjp(g):
            full = np.zeros(shape)
            full[..., index] = g
            return (full,)

        return self._record("slice", (a,), Tensor(a.data[..., index]), vjp)

    def bmv(self, m, v):
        """Batched matrix-vector product: m (..., n, k), v (..., k) -> (..., n)."""
        m, v = _as_tensor(m), _as_tensor(v)
        mv, vv = m.data, v.data
        out = np.einsum("...nk,...k->...n", mv, vv)

        def vjp(g):
            gm = _unbroadcast(g[..., :, None] * vv[..., None, :], mv.shape)
            gv = _unbroadcast(np.einsum("...nk,...n->...k", mv, g), vv.shape)
            return gm, gv

        return self._record("bmv", (m, v), Tensor(out), vjp)


class _NoTape(Tape):
    """Evaluates primitives without keeping any record."""

    def _record(self, op, inputs, out, vjp):
        _check_finite(out.data, op)
        return out


NO_TAPE = _NoTape()


def elu(x):
    """ELU with alpha = 1 on plain arrays."""
    x = np.asarray(x, dtype=np.float64)
    return np.where(x < 0, ELU_ALPHA * (np.exp(np.minimum(x, 0.0)) - 1.0), x)


def backward(tape, output, seed, wrt):
    """Reverse sweep over ``tape`` seeded at ``output``.

    Returns a list of gradients aligned with ``wrt``; leaves the sweep never
    reaches get zeros.
    """
    seed = np.asarray(seed, dtype=np.float64)
    if seed.shape != output.data.shape:
        raise ValueError(f"seed shape {seed.shape} does not match output {output.data.shape}")
    grads = {output.id: seed}
    for node in reversed(tape.nodes):
        g = grads.pop(node.output.id, None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if inp.id in grads:
                grads[inp.id] = grads[inp.id] + gi
            else:
                grads[inp.id] = gi
    return [grads.get(p.id, np.zeros_like(p.data)) for p in wrt]


class Mlp:
    """Two-hidden-layer ELU perceptron with a linear output layer."""

    def __init__(self, n_in, n_out, hidden=64, seed=0, out_scale=1.0, name="mlp"):
        rng = np.random.default_rng(seed)
        sizes = [n_in, hidden, hidden, n_out]
        self.params = []
        for k, (i, o) in enumerate(zip(sizes[:-1], sizes[1:])):
            w = rng.normal(0.0, np.sqrt(1.0 / i), size=(i, o))
            if k == len(sizes) - 2:
                w *= out_scale
            self.params.append(Tensor(w, requires_grad=True, name=f"{name}.W{k}"))
            self.params.append(Tensor(np.zeros(o), requires_grad=True, name=f"{name}.b{k}"))

    @property
    def n_in(self):
        return self.params[0].data.shape[0]

    @property
    def n_out(self):
        return self.params[-1].data.shape[0]

    @property
    def hidden(self):
        return self.params[0].data.shape[1]

    def shapes(self):
        return [p.data.shape for p in self.params]

    def forward(self, x, tape=None):
        return mlp_forward(self, x, tape)

    def reference_forward(self, x):
        """Tape-free evaluation written out directly in numpy."""
        w0, b0, w1, b1, w2, b2 = (p.data for p in self.params)
        h = elu(np.asarray(x, dtype=np.float64) @ w0 + b0)
        h = elu(h @ w1 + b1)
        return h @ w2 + b2

    def copy(self):
        other = object.__new__(Mlp)
        other.params = [Tensor(p.data.copy(), requires_grad=True, name=p.name)
                        for p in self.params]
        return other


def mlp_forward(params, x, tape=None):
    """Evaluate ``params`` (an :class:`Mlp`) on ``x`` of shape (..., n_in)."""
    ops = NO_TAPE if tape is None else tape
    x = _as_tensor(x)
    if x.data.shape[-1] != params.n_in:
        raise ValueError(f"input width {x.data.shape[-1]} != mlp input width {params.n_in}")
    w0, b0, w1, b1, w2, b2 = params.params
    h = ops.elu(ops.add(ops.matmul(x, w0), b0))
    h = ops.elu(ops.add(ops.matmul(h, w1), b1))
    return ops.add(ops.matmul(h, w2), b2)


@dataclass
class OptimState:
    """Adam moments plus the step-decay learning-rate schedule."""

    lr: float
    m: list
    v: list
    step: int = 0
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS
    decay: float = LR_DECAY
    decay_every: int = LR_DECAY_EVERY

    @classmethod
    def for_params(cls, params, lr):
        if not lr > 0:
            raise ValueError("learning rate must be positive")
        return cls(lr=float(lr), m=[np.zeros_like(p.data) for p in params],
                   v=[np.zeros_like(p.data) for p in params])

    def lr_at(self, epoch):
        return self.lr * self.decay ** (epoch // self.decay_every)


def adam_step(params, grads, state, epoch=0):
    """One in-place Adam update; the learning rate halves every 100 epochs."""
    if len(grads) != len(params):
        raise ValueError("gradients must cover every parameter")
    for g in grads:
        _check_finite(g, "gradient")
    state.step += 1
    lr = state.lr_at(epoch)
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state
