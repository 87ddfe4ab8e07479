"""
Dense float64 tensors with tape-based reverse-mode differentiation.

A :class:`Tensor` is an immutable wrapper around a numpy array. Tensors
created through :meth:`GradientTape.watch` are leaves on a tape; every
operation that touches a tracked tensor appends a node to the same tape.
Because nodes are appended after their inputs, the tape order is already a
topological order and backward simply walks it in reverse.

    tape = GradientTape()
    w = tape.watch("w", np.ones((3, 2)))
    loss = mean(relu(matmul(Tensor(x), w)))
    grads = tape.gradient(loss)      # {"w": ndarray of shape (3, 2)}

A tape is meant to be rebuilt for every training step.
"""

from __future__ import annotations

from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import ContractError, DomainError, ShapeError

__all__ = [
    "Tensor",
    "GradientTape",
    "as_tensor",
    "backward",
    "finite_diff_check",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "relu",
    "exp",
    "log",
    "sqrt",
    "abs_",
    "square",
    "sum_",
    "mean",
    "var",
    "std",
    "l2_norm",
    "pairwise_sq_dists",
    "softmax",
    "gather",
    "take_rows",
    "concat_rows",
    "detach",
]


class Tensor:
    """Immutable n-d array of float64, optionally recorded on a tape."""

    __slots__ = ("data", "tape", "name", "_parents", "_vjp", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, tape: "GradientTape | None" = None, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        arr.flags.writeable = False
        self.data = arr
        self.tape = tape
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], tuple] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def requires_grad(self) -> bool:
        return self.tape is not None

    def item(self) -> float:
        if self.data.shape != ():
            raise ShapeError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, tracked={self.requires_grad})"

    def __len__(self):
        return self.data.shape[0]

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __matmul__ = lambda self, o: matmul(self, o)
    __neg__ = lambda self: neg(self)


class GradientTape:
    """Ordered record of the operations applied to watched tensors."""

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.leaves: dict[str, Tensor] = {}

    def watch(self, name: str, value) -> Tensor:
        if name in self.leaves:
            raise ContractError(f"parameter {name!r} is already watched on this tape")
        t = Tensor(value, tape=self, name=name)
        self.leaves[name] = t
        self.nodes.append(t)
        return t

    def watch_all(self, params: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
        return {k: self.watch(k, v) for k, v in params.items()}

    def gradient(self, output: Tensor) -> dict[str, np.ndarray]:
        return backward(self, output)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def detach(x) -> Tensor:
    return Tensor(as_tensor(x).data)


def _result(value, parents: Sequence[Tensor], vjp) -> Tensor:
    tape = None
    for p in parents:
        if p.tape is not None:
            if tape is not None and p.tape is not tape:
                raise ContractError("operands are recorded on different tapes")
            tape = p.tape
    out = Tensor(value, tape=tape)
    if tape is not None:
        out._parents = tuple(parents)
        out._vjp = vjp
        tape.nodes.append(out)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise binary ---------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return _result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    return _result(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    if np.any(b.data == 0):
        raise DomainError("div: division by zero")
    out = a.data / b.data
    return _result(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return _result(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


# -- elementwise unary ----------------------------------------------------------


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0  # subgradient 0 at the kink
    return _result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log: input must be strictly positive")
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise DomainError("sqrt: input must be non-negative")
    out = np.sqrt(a.data)

    def vjp(g):
        # zero subgradient at 0 keeps d(x, x) = 0 differentiable
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, g / (2.0 * safe), 0.0),)

    return _result(out, (a,), vjp)


def abs_(a) -> Tensor:
    a = as_tensor(a)
    return _result(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _result(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


# -- reductions -----------------------------------------------------------------


def _expand(g: np.ndarray, shape, axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def _check_axis(a: Tensor, axis, op: str):
    if axis is not None and not (-a.ndim <= axis < a.ndim):
        raise ShapeError(f"{op}: axis {axis} out of range for shape {a.shape}")


def sum_(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    _check_axis(a, axis, "sum")
    return _result(
        a.data.sum(axis=axis, keepdims=keepdims),
        (a,),
        lambda g: (np.array(_expand(g, a.shape, axis, keepdims)),),
    )


def mean(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    _check_axis(a, axis, "mean")
    n = a.data.size if axis is None else a.shape[axis]
    if n == 0:
        raise ShapeError("mean: empty reduction")
    return _result(
        a.data.mean(axis=axis, keepdims=keepdims),
        (a,),
        lambda g: (np.array(_expand(g, a.shape, axis, keepdims)) / n,),
    )


def var(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    """Population (divide-by-N) variance."""
    a = as_tensor(a)
    _check_axis(a, axis, "var")
    n = a.data.size if axis is None else a.shape[axis]
    if n == 0:
        raise ShapeError("var: empty reduction")
    centered = a.data - a.data.mean(axis=axis, keepdims=True)
    out = (centered * centered).mean(axis=axis, keepdims=keepdims)
    return _result(
        out,
        (a,),
        lambda g: (2.0 * centered * _expand(g, a.shape, axis, keepdims) / n,),
    )


def std(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    return sqrt(var(a, axis=axis, keepdims=keepdims))


def l2_norm(a, keepdims: bool = False) -> Tensor:
    """Euclidean norm along the last axis."""
    return sqrt(sum_(square(a), axis=-1, keepdims=keepdims))


def pairwise_sq_dists(a, b) -> Tensor:
    """Matrix of squared Euclidean distances between rows of ``a`` and rows of ``b``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"pairwise_sq_dists: incompatible shapes {a.shape}, {b.shape}")
    # explicit differences keep the result exactly non-negative
    diff = a.data[:, None, :] - b.data[None, :, :]
    out = np.einsum("ijk,ijk->ij", diff, diff)

    def vjp(g):
        w = 2.0 * g[:, :, None] * diff
        return (w.sum(axis=1), -w.sum(axis=0))

    return _result(out, (a, b), vjp)


def softmax(a) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _result(out, (a,), vjp)


# -- indexing -------------------------------------------------------------------


def gather(a, rows, cols) -> Tensor:
    """Pick ``a[rows[i], cols[i]]`` for every i; returns a 1-d tensor."""
    a = as_tensor(a)
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    if a.ndim != 2 or rows.shape != cols.shape or rows.ndim != 1:
        raise ShapeError("gather: needs a 2-d tensor and equal-length 1-d index arrays")
    if rows.size and (rows.min() < 0 or rows.max() >= a.shape[0] or cols.min() < 0 or cols.max() >= a.shape[1]):
        raise ShapeError(f"gather: index out of range for shape {a.shape}")

    def vjp(g):
        out = np.zeros(a.shape)
        np.add.at(out, (rows, cols), g)
        return (out,)

    return _result(a.data[rows, cols], (a,), vjp)


def take_rows(a, idx) -> Tensor:
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeError(f"take_rows: index out of range for {a.shape[0]} rows")

    def vjp(g):
        out = np.zeros(a.shape)
        np.add.at(out, idx, g)
        return (out,)

    return _result(a.data[idx], (a,), vjp)


def concat_rows(parts: Sequence) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat_rows: nothing to concatenate")
    tail = parts[0].shape[1:]
    if any(p.shape[1:] != tail for p in parts):
        raise ShapeError("concat_rows: trailing shapes differ")
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])
    return _result(
        np.concatenate([p.data for p in parts], axis=0),
        parts,
        lambda g: tuple(g[bounds[i] : bounds[i + 1]] for i in range(len(parts))),
    )


# -- differentiation ------------------------------------------------------------


def backward(tape: GradientTape, output: Tensor) -> dict[str, np.ndarray]:
    """Gradients of a scalar ``output`` with respect to every watched leaf.

    Leaves the output does not depend on get zero gradients.
    """
    if output.shape != ():
        raise ContractError(f"backward needs a scalar output, got shape {output.shape}")
    grads = {name: np.zeros(leaf.shape) for name, leaf in tape.leaves.items()}
    if output.tape is None:
        return grads
    if output.tape is not tape:
        raise ContractError("output was not recorded on this tape")

    adjoint: dict[int, np.ndarray] = {id(output): np.ones(())}
    for node in reversed(tape.nodes):
        g = adjoint.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            if node.name in grads:
                grads[node.name] = grads[node.name] + g
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if parent.tape is None:
                continue
            key = id(parent)
            adjoint[key] = adjoint[key] + pg if key in adjoint else np.array(pg, dtype=np.float64)
    return grads


def finite_diff_check(
    fn: Callable[[dict[str, Tensor]], Tensor],
    params: Mapping[str, np.ndarray],
    h: float = 1e-5,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``fn`` maps a dict of parameter tensors to a scalar tensor. The error for
    each component is ``|analytic - numeric| / max(1, |numeric|)``.
    """
    if h <= 0:
        raise ContractError("finite_diff_check: step h must be positive")
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    tape = GradientTape()
    out = fn(tape.watch_all(params))
    if not np.isfinite(out.data).all():
        raise DomainError("finite_diff_check: function output is not finite")
    analytic = backward(tape, out)

    def evaluate(p):
        val = fn({k: Tensor(v) for k, v in p.items()}).item()
        if not np.isfinite(val):
            raise DomainError("finite_diff_check: function output is not finite")
        return val

    worst = 0.0
    for name, value in params.items():
        flat = value.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = evaluate(params)
            flat[i] = orig - h
            f_minus = evaluate(params)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            err = abs(analytic[name].reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
