"""Dense float64 tensors with a reverse-mode gradient tape.

Operations record onto the innermost active :class:`GradTape` whenever one of
their inputs requires a gradient.  Outside a tape, tensors behave as plain
immutable values.

    >>> x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    >>> with GradTape():
    ...     loss = (x * x).sum()
    ...     backward(loss)
    >>> x.grad
    array([2., 4., 6.])
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from scipy import sparse


class ShapeError(ValueError):
    """Operand shapes do not conform for an operation."""


class DomainError(ValueError):
    """Input outside the domain of an operation (e.g. log of a non-positive value)."""


class _Node:
    __slots__ = ("out", "parents", "backward_fn")

    def __init__(self, out, parents, backward_fn):
        self.out = out
        self.parents = parents
        self.backward_fn = backward_fn


class GradTape:
    """Ordered record of differentiable operations.

    Use as a context manager; tapes nest and operations go to the innermost one.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.active = False

    def __enter__(self) -> "GradTape":
        self.active = True
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        self.active = False
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)


_TAPES: list[GradTape] = []


def active_tape() -> GradTape | None:
    return _TAPES[-1] if _TAPES else None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "_tape")

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64) if not isinstance(data, np.ndarray) \
            or data.dtype != np.float64 else data
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: _Node | None = None
        self._tape: GradTape | None = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise TypeError("division is only supported by a scalar")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return slice_(self, idx)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _not_scalar(t):
    raise ShapeError(f"item: expected a single element, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out_data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(out_data)
    tape = _TAPES[-1] if _TAPES else None
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        node = _Node(out, parents, backward_fn)
        out._node = node
        out._tape = tape
        tape.nodes.append(node)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape:
        return
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- binary ops ---------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a bias vector to every row of ``x``."""
    x, bias = as_tensor(x), as_tensor(bias)
    if bias.ndim != 1 or x.shape[-1] != bias.shape[0]:
        raise ShapeError(f"add_bias: incompatible shapes {x.shape} and {bias.shape}")
    lead = tuple(range(x.ndim - 1))
    return _record(x.data + bias.data, (x, bias), lambda g: (g, g.sum(axis=lead)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    """Elementwise product with broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _record(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    a = as_tensor(a)
    return _record(a.data * c, (a,), lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _record(ad @ bd, (a, b), bw)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"concat: incompatible shapes {shapes} along axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _record(out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


# -- structural ops -----------------------------------------------------------
def slice_(a: Tensor, idx) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    basic = all(isinstance(i, (slice, int, type(None), type(Ellipsis)))
                for i in (idx if isinstance(idx, tuple) else (idx,)))

    def bw(g):
        full = np.zeros(shape)
        if basic:
            full[idx] = g  # basic indexing never repeats an element
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _record(a.data[idx], (a,), bw)


def gather(a: Tensor, rows) -> Tensor:
    """Select rows (first-axis entries) by integer index; repeats allowed."""
    a = as_tensor(a)
    rows = np.asarray(rows, dtype=np.intp)
    shape = a.shape
    if rows.size and (rows.min() < -shape[0] or rows.max() >= shape[0]):
        raise ShapeError(f"gather: row index out of range for shape {shape}")

    def bw(g):
        if rows.ndim != 1 or g.ndim != 2:
            full = np.zeros(shape)
            np.add.at(full, rows, g)
            return (full,)
        # scatter-add as a sparse product; much faster than ufunc.at
        scatter = sparse.csr_matrix((np.ones(len(rows)), (rows % shape[0], np.arange(len(rows)))),
                                    shape=(shape[0], len(rows)))
        return (np.asarray(scatter @ g),)

    return _record(a.data[rows], (a,), bw)


def transpose(a: Tensor, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    inv = tuple(np.argsort(axes))
    return _record(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(sum_(a, axis, keepdims), 1.0 / count)


# -- elementwise ops ------------------------------------------------------------
def abs_(a: Tensor) -> Tensor:
    a = as_tensor(a)
    sign = np.sign(a.data)
    return _record(np.abs(a.data), (a,), lambda g: (g * sign,))


def exp(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError(f"log: non-positive input (min {a.data.min():.3g})")
    ad = a.data
    return _record(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a: Tensor) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError(f"sqrt: non-positive input (min {a.data.min():.3g})")
    out = np.sqrt(a.data)
    return _record(out, (a,), lambda g: (g * 0.5 / out,))


def square(a: Tensor) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _record(ad * ad, (a,), lambda g: (2.0 * g * ad,))


def tanh(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _record(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a: Tensor) -> Tensor:
    a = as_tensor(a)
    # tanh form is stable for large |x|
    out = 0.5 * (np.tanh(0.5 * a.data) + 1.0)
    return _record(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return _record(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    a = as_tensor(a)
    factor = np.where(a.data > 0, 1.0, slope)
    return _record(a.data * factor, (a,), lambda g: (g * factor,))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record(out, (a,), bw)


# -- composites -------------------------------------------------------------------
def elu(a: Tensor) -> Tensor:
    """ELU with unit scale, written with relu/exp so no extra primitive is needed."""
    return relu(a) + exp(-relu(-a)) - 1.0


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shift = Tensor(a.data.max(axis=axis, keepdims=True))
    z = a - shift
    return z - log(sum_(exp(z), axis=axis, keepdims=True))


def identity(a: Tensor) -> Tensor:
    return a


# -- gradient machinery -------------------------------------------------------------
def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires-grad tensor that ``loss`` depends on.

    Gradients accumulate across calls; clear them with :func:`zero_grad`.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    seed = np.ones(loss.shape)
    if loss._node is None:
        if loss.requires_grad:
            loss.grad = seed if loss.grad is None else loss.grad + seed
            return
        raise RuntimeError("backward: loss was not produced under an active GradTape")
    nodes = loss._tape.nodes
    end = len(nodes)
    while nodes[end - 1] is not loss._node:
        end -= 1
    pending: dict[int, np.ndarray] = {id(loss): seed}
    for i in range(end - 1, -1, -1):
        node = nodes[i]
        g = pending.pop(id(node.out), None)
        if g is None:
            continue
        out = node.out
        out.grad = g if out.grad is None else out.grad + g
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent._node is None:
                parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
            else:
                key = id(parent)
                prev = pending.get(key)
                pending[key] = pg if prev is None else prev + pg


def zero_grad(params) -> None:
    for p in params:
        p.grad = None


def grad_check(f: Callable[..., Tensor], x, eps: float = 1e-5) -> float:
    """Largest relative gap between tape gradients and central differences.

    ``f`` is called with ``x`` unchanged, so ``x`` may be a tensor or a list of
    tensors (e.g. layer parameters); each entry is perturbed in place and
    restored.  The error per coordinate is
    ``|analytic - numeric| / max(1, |numeric|)``.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    saved = [(t.requires_grad, t.grad) for t in xs]
    for t in xs:
        t.requires_grad = True
        t.grad = None
    try:
        with GradTape():
            y = f(x)
            if not np.all(np.isfinite(y.data)):
                raise DomainError("grad_check: function value is not finite")
            backward(y)
        analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in xs]
        worst = 0.0
        for t, an in zip(xs, analytic):
            flat = t.data.reshape(-1)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + eps
                up = float(np.sum(f(x).data))
                flat[j] = orig - eps
                down = float(np.sum(f(x).data))
                flat[j] = orig
                num = (up - down) / (2 * eps)
                a = float(an.reshape(-1)[j])
                if not (np.isfinite(num) and np.isfinite(a)):
                    raise DomainError("grad_check: non-finite gradient encountered")
                worst = max(worst, abs(a - num) / max(1.0, abs(num)))
        return worst
    finally:
        for t, (rg, gr) in zip(xs, saved):
            t.requires_grad = rg
            t.grad = gr


def uniform_init(rng: np.random.Generator, fan_in: int, shape) -> Tensor:
    bound = np.sqrt(1.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


# -- recurrent cell -----------------------------------------------------------------
def init_gru(rng: np.random.Generator, d_in: int, d_h: int) -> dict[str, Tensor]:
    """Gate weights packed as [reset | update | candidate] along the last axis."""
    return {
        "w_x": uniform_init(rng, d_h, (d_in, 3 * d_h)),
        "w_h": uniform_init(rng, d_h, (d_h, 3 * d_h)),
        "b_x": uniform_init(rng, d_h, (3 * d_h,)),
        "b_h": uniform_init(rng, d_h, (3 * d_h,)),
    }


def gru_cell(x: Tensor, h_prev: Tensor, params: dict[str, Tensor]) -> Tensor:
    """One GRU step: r, z gates, candidate n = tanh(xW + r*(hU)), h' = (1-z)*n + z*h."""
    d_h = h_prev.shape[-1]
    w_x, w_h = params["w_x"], params["w_h"]
    if w_x.shape != (x.shape[-1], 3 * d_h) or w_h.shape != (d_h, 3 * d_h):
        raise ShapeError(f"gru_cell: input {x.shape} / hidden {h_prev.shape} do not match "
                         f"weights {w_x.shape} / {w_h.shape}")
    gx = add_bias(matmul(x, w_x), params["b_x"])
    gh = add_bias(matmul(h_prev, w_h), params["b_h"])
    rz = sigmoid(gx[:, : 2 * d_h] + gh[:, : 2 * d_h])
    r = rz[:, :d_h]
    z = rz[:, d_h:]
    n = tanh(gx[:, 2 * d_h:] + r * gh[:, 2 * d_h:])
    return n + z * (h_prev - n)
