"""Reverse-mode automatic differentiation over numpy arrays.

A small tape: every operation returns a new :class:`Tensor` holding the
result, references to its parents, and a vector-Jacobian closure.  Calling
``backward()`` on a scalar output walks the tape in reverse topological
order and accumulates gradients into every node with ``requires_grad``.

Gradients are plain numpy arrays in the dtype of the forward data; tests
run the engine in float64, training may run it in float32.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import InvalidInput


class Tensor:
    """Array node in the autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _vjp=None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in _parents)
        self._parents = _parents
        self._vjp = _vjp

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        """Seed a scalar output with gradient 1 and back-propagate."""
        if self.data.size != 1:
            raise InvalidInput("backward() requires a scalar output")
        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in order:
            if node._vjp is None or node.grad is None:
                continue
            for parent, g in zip(node._parents, node._vjp(node.grad)):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = g.astype(parent.data.dtype, copy=True)
                else:
                    parent.grad += g

    # Operator sugar; constants are wrapped on the fly.
    def __add__(self, other):
        return add(self, as_tensor(other))

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __mul__(self, other):
        return mul(self, as_tensor(other))

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))

    def __neg__(self):
        return scale(self, -1.0)

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, shape if len(shape) != 1 else shape[0])

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    order.reverse()
    return order


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to the shape of the broadcast operand."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise / structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return Tensor(out, _parents=(a, b), _vjp=vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return Tensor(out, _parents=(a, b), _vjp=vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def vjp(g):
        return _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)

    return Tensor(out, _parents=(a, b), _vjp=vjp)


def scale(x: Tensor, factor: float) -> Tensor:
    """Multiply by a python scalar constant."""
    out = x.data * factor

    def vjp(g):
        return (g * factor,)

    return Tensor(out, _parents=(x,), _vjp=vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """np.matmul semantics, including batched stacks of matrices."""
    out = np.matmul(a.data, b.data)

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)

    return Tensor(out, _parents=(a, b), _vjp=vjp)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.transpose(x.data, axes)

    def vjp(g):
        return (np.transpose(g, inverse),)

    return Tensor(out, _parents=(x,), _vjp=vjp)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.data.shape
    out = x.data.reshape(shape)

    def vjp(g):
        return (g.reshape(old),)

    return Tensor(out, _parents=(x,), _vjp=vjp)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = tuple(parts)
    sizes = [p.data.shape[axis] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor(out, _parents=parts, _vjp=vjp)


def take(x: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather along an axis; backward scatter-adds into the source."""
    idx = np.asarray(indices, dtype=np.intp)
    out = np.take(x.data, idx, axis=axis)

    def vjp(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (slice(None),) * axis + (idx,), g)
        return (gx,)

    return Tensor(out, _parents=(x,), _vjp=vjp)


# ---------------------------------------------------------------------------
# nonlinearities


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0.0).astype(x.data.dtype)

    def vjp(g):
        return (np.where(mask, g, 0.0),)

    return Tensor(out, _parents=(x,), _vjp=vjp)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def vjp(g):
        return (g * (1.0 - out * out),)

    return Tensor(out, _parents=(x,), _vjp=vjp)


# ---------------------------------------------------------------------------
# dense / similarity / reductions


def fully_connected(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x (B, I) @ w (I, O) + b (O,)."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[0]:
        raise InvalidInput(
            f"fully_connected shape mismatch: x {x.data.shape} vs w {w.data.shape}"
        )
    out = x.data @ w.data + b.data

    def vjp(g):
        return g @ w.data.T, x.data.T @ g, g.sum(axis=0)

    return Tensor(out, _parents=(x, w, b), _vjp=vjp)


def dot_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Dot product over the last axis: (..., D) x (..., D) -> (...)."""
    out = np.sum(a.data * b.data, axis=-1)

    def vjp(g):
        ge = g[..., None]
        return _unbroadcast(ge * b.data, a.data.shape), _unbroadcast(ge * a.data, b.data.shape)

    return Tensor(out, _parents=(a, b), _vjp=vjp)


def sum_squares(x: Tensor) -> Tensor:
    out = np.asarray(np.sum(x.data * x.data), dtype=x.data.dtype)

    def vjp(g):
        return (2.0 * g * x.data,)

    return Tensor(out, _parents=(x,), _vjp=vjp)


# ---------------------------------------------------------------------------
# convolution and pooling


def _same_pad(kernel: int) -> int:
    if kernel % 2 == 0:
        raise InvalidInput("padding='same' requires an odd kernel")
    return kernel // 2


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
           padding: int | str = "same") -> Tensor:
    """2-D convolution, x (B, C, H, W), w (O, C, kh, kw), b (O,).

    padding='same' keeps H and W at stride 1; an integer pads both sides.
    """
    bsz, cin, h, wdt = x.data.shape
    cout, cin_w, kh, kw = w.data.shape
    if cin != cin_w:
        raise InvalidInput(f"conv2d channel mismatch: input {cin}, kernel {cin_w}")
    if stride < 1:
        raise InvalidInput("conv2d stride must be >= 1")
    pad = _same_pad(kh) if padding == "same" else int(padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    hp, wp = xp.shape[2], xp.shape[3]
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]  # (B, C, Ho, Wo, kh, kw)
    cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5)).reshape(
        bsz * ho * wo, cin * kh * kw
    )
    wmat = w.data.reshape(cout, -1)
    out_flat = cols @ wmat.T
    if b is not None:
        out_flat = out_flat + b.data
    out = out_flat.reshape(bsz, ho, wo, cout).transpose(0, 3, 1, 2)

    parents = (x, w) if b is None else (x, w, b)

    def vjp(g):
        gm = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, cout)
        gw = (gm.T @ cols).reshape(w.data.shape)
        gcols = (gm @ wmat).reshape(bsz, ho, wo, cin, kh, kw)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += (
                    gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                )
        gx = gxp[:, :, pad:pad + h, pad:pad + wdt] if pad else gxp
        if b is None:
            return gx, gw
        return gx, gw, gm.sum(axis=0)

    return Tensor(out, _parents=parents, _vjp=vjp)


def max_pool2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; trailing odd row/column is dropped.

    Ties route the gradient to the lowest flat index inside the window.
    """
    bsz, c, h, w = x.data.shape
    ho, wo = h // 2, w // 2
    cropped = x.data[:, :, : 2 * ho, : 2 * wo]
    windows = cropped.reshape(bsz, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(
        bsz, c, ho, wo, 4
    )
    argmax = windows.argmax(axis=-1)  # first occurrence == lowest flat index
    out = np.take_along_axis(windows, argmax[..., None], axis=-1)[..., 0]

    def vjp(g):
        gw_win = np.zeros((bsz, c, ho, wo, 4), dtype=g.dtype)
        np.put_along_axis(gw_win, argmax[..., None], g[..., None], axis=-1)
        gx = np.zeros_like(x.data)
        gx[:, :, : 2 * ho, : 2 * wo] = (
            gw_win.reshape(bsz, c, ho, wo, 2, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(bsz, c, 2 * ho, 2 * wo)
        )
        return (gx,)

    return Tensor(out, _parents=(x,), _vjp=vjp)


# ---------------------------------------------------------------------------
# operator catalog and gradient checking


@dataclass(frozen=True)
class DiffOp:
    """A named differentiable operation: forward builds the tape node whose
    closure implements the matching backward."""

    name: str
    apply: Callable[..., Tensor]


def op_catalog() -> dict[str, DiffOp]:
    """Every differentiable operation the learnable modules are built from."""
    ops = [
        DiffOp("conv2d", conv2d),
        DiffOp("max_pool2", max_pool2),
        DiffOp("fully_connected", fully_connected),
        DiffOp("tanh", tanh),
        DiffOp("relu", relu),
        DiffOp("concat", concat),
        DiffOp("dot_similarity", dot_similarity),
        DiffOp("scale", scale),
        DiffOp("sum_squares", sum_squares),
    ]
    return {op.name: op for op in ops}


def grad_check(f: Callable[[list[Tensor]], Tensor], xs: Sequence[np.ndarray],
               eps: float = 1e-5) -> float:
    """Compare analytic gradients of a scalar function against central
    differences; returns the maximum relative error over every element of
    every input.

    Relative error uses max(1, |central difference|) as denominator so
    near-zero gradients are compared absolutely.
    """
    if not (1e-7 <= eps <= 1e-3):
        raise InvalidInput(f"eps {eps} outside [1e-7, 1e-3]")
    base = [np.array(x, dtype=np.float64) for x in xs]

    def evaluate(values) -> float:
        out = f([Tensor(v.copy(), requires_grad=True) for v in values])
        if out.data.size != 1:
            raise InvalidInput("grad_check requires a scalar-valued function")
        return float(out.data)

    leaves = [Tensor(v.copy(), requires_grad=True) for v in base]
    out = f(leaves)
    if out.data.size != 1:
        raise InvalidInput("grad_check requires a scalar-valued function")
    out.backward()
    analytic = [
        np.zeros_like(v) if t.grad is None else t.grad.astype(np.float64)
        for v, t in zip(base, leaves)
    ]

    worst = 0.0
    for i, v in enumerate(base):
        flat = v.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            plus = evaluate(base)
            flat[j] = orig - eps
            minus = evaluate(base)
            flat[j] = orig
            numeric = (plus - minus) / (2.0 * eps)
            err = abs(analytic[i].reshape(-1)[j] - numeric) / max(1.0, abs(numeric))
            if err > worst:
                worst = err
    if not math.isfinite(worst):
        raise InvalidInput("non-finite gradients in grad_check")
    return worst
