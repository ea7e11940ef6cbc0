"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable operation is a plain function that computes its forward
result with numpy and records a closure producing the gradients of its
parents. Shapes must match exactly; the few operations that combine tensors
of different ranks (``add_row``, ``mul_row``, ``scale_by``) say so in their
names.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from .errors import DomainError, ShapeError

DTYPE = np.float64

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """An n-dimensional array with an optional gradient accumulator.

    Tensors produced by operations remember their parents and a backward
    closure; calling :meth:`backward` on a scalar result fills ``grad`` on
    every tensor in the graph that requires gradients.
    """

    __slots__ = ("data", "requires_grad", "_grad", "_parents", "_backward", "name")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        *,
        name: str | None = None,
        _parents: tuple["Tensor", ...] = (),
        _backward: BackwardFn | None = None,
    ):
        self.data = np.array(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self._grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def grad(self) -> np.ndarray | None:
        if self._grad is None and self.requires_grad:
            self._grad = np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value: np.ndarray | None) -> None:
        if value is not None:
            value = np.asarray(value, dtype=DTYPE)
            if value.shape != self.data.shape:
                raise ShapeError(f"grad shape {value.shape} != data shape {self.data.shape}")
        self._grad = value

    def zero_grad(self) -> None:
        if self.requires_grad:
            self._grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def backward(self) -> None:
        """Accumulate d(self)/d(t) into ``t.grad`` for every reachable tensor."""
        if self.data.ndim != 0:
            raise ShapeError(f"backward() needs a 0-d scalar loss, got shape {self.shape}")
        order = _topological_order(self)
        pending: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node._grad = g.copy() if node._grad is None else node._grad + g
            if node._backward is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg

    # Operator sugar; all of these insist on identical shapes.
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)


def _topological_order(root: Tensor) -> list[Tensor]:
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
        for parent in node._parents:
            if id(parent) not in seen and parent.requires_grad:
                stack.append((parent, False))
    return order


_state = threading.local()


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Within this block (on this thread) operations record no graph."""
    prev = getattr(_state, "disabled", False)
    _state.disabled = True
    try:
        yield
    finally:
        _state.disabled = prev


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward: BackwardFn) -> Tensor:
    needs = not getattr(_state, "disabled", False) and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(x.data * c, (x,), lambda g: (g * c,))


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.data)
    return _result(out, (x,), lambda g: (g * out * (1.0 - out),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _result(out, (x,), lambda g: (g * (1.0 - out * out),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    # np.maximum keeps NaN visible so divergence is not masked to zero
    return _result(np.maximum(x.data, 0.0), (x,), lambda g: (g * mask,))


def power(x: Tensor, exponent: float) -> Tensor:
    """Elementwise ``x ** exponent`` for a constant exponent."""
    e = float(exponent)
    out = x.data**e
    return _result(out, (x,), lambda g: (g * e * x.data ** (e - 1.0),))


_UNARY = {"sigmoid": sigmoid, "tanh": tanh, "relu": relu}
_BINARY = {"add": add, "mul": mul}


def pointwise(kind: str, *operands) -> Tensor:
    """Dispatch an elementwise operation by name.

    ``kind`` is one of ``sigmoid``, ``tanh``, ``relu`` (one tensor),
    ``add``, ``mul`` (two tensors of identical shape) or ``scale``
    (a tensor and a real factor).
    """
    if kind in _UNARY:
        (x,) = operands
        return _UNARY[kind](x)
    if kind in _BINARY:
        a, b = operands
        return _BINARY[kind](a, b)
    if kind == "scale":
        x, c = operands
        return scale(x, c)
    raise DomainError(f"unknown pointwise kind {kind!r}")


# ---------------------------------------------------------------------------
# Explicit mixed-rank helpers (no implicit broadcasting anywhere else)
# ---------------------------------------------------------------------------


def add_row(x: Tensor, row: Tensor) -> Tensor:
    """Add a length-E vector to every row of an ``[N, E]`` matrix."""
    if x.ndim != 2 or row.shape != (x.shape[1],):
        raise ShapeError(f"add_row: cannot add {row.shape} to rows of {x.shape}")
    return _result(x.data + row.data, (x, row), lambda g: (g, g.sum(axis=0)))


def mul_row(x: Tensor, row: Tensor) -> Tensor:
    """Multiply every row of an ``[N, E]`` matrix elementwise by a length-E vector."""
    if x.ndim != 2 or row.shape != (x.shape[1],):
        raise ShapeError(f"mul_row: cannot multiply rows of {x.shape} by {row.shape}")
    xd, rd = x.data, row.data
    return _result(xd * rd, (x, row), lambda g: (g * rd, (g * xd).sum(axis=0)))


def scale_by(x: Tensor, s: Tensor) -> Tensor:
    """Multiply every element of ``x`` by the 0-d tensor ``s``."""
    if s.ndim != 0:
        raise ShapeError(f"scale_by: factor must be 0-d, got {s.shape}")
    xd, sd = x.data, s.data

    def backward(g):
        return g * sd, np.array((g * xd).sum())

    return _result(xd * sd, (x, s), backward)


# ---------------------------------------------------------------------------
# Reductions and structural operations
# ---------------------------------------------------------------------------


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _result(np.array(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),))


def sum_rows(x: Tensor) -> Tensor:
    """Sum all trailing axes, leaving one value per leading index."""
    shape = x.shape
    n = shape[0]
    out = x.data.reshape(n, -1).sum(axis=1)
    return _result(out, (x,), lambda g: (np.broadcast_to(g.reshape((n,) + (1,) * (len(shape) - 1)), shape).copy(),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {old} as {tuple(shape)}") from exc
    return _result(out, (x,), lambda g: (g.reshape(old),))


def select(x: Tensor, axis: int, index: int) -> Tensor:
    """Take one slice along ``axis`` (dropping that axis)."""
    shape = x.shape
    out = np.take(x.data, index, axis=axis)

    def backward(g):
        full = np.zeros(shape, dtype=DTYPE)
        sl = [slice(None)] * len(shape)
        sl[axis] = index
        full[tuple(sl)] = g
        return (full,)

    return _result(out, (x,), backward)


def take_rows(x: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous slice ``x[start:stop]`` along the leading axis."""
    shape = x.shape
    out = x.data[start:stop]

    def backward(g):
        full = np.zeros(shape, dtype=DTYPE)
        full[start:stop] = g
        return (full,)

    return _result(out, (x,), backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"stack: shapes differ: {sorted(shapes)}")
    out = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)
    return _result(out, tuple(tensors), lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _result(out, tuple(tensors), lambda g: tuple(np.split(g, bounds, axis=axis)))


# ---------------------------------------------------------------------------
# Dense layers
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _result(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``x @ weight + bias`` for ``x[N, D]``, ``weight[D, E]``, ``bias[E]``."""
    out = matmul(x, weight)
    if bias is not None:
        out = add_row(out, bias)
    return out


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: zero with probability ``rate`` and rescale survivors."""
    if not 0.0 <= rate < 1.0:
        raise DomainError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise DomainError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _result(x.data * keep, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# Convolutions and pooling, NCHW layout
# ---------------------------------------------------------------------------


def _check_pos(name: str, value: int) -> None:
    if int(value) != value or value < 1:
        raise DomainError(f"{name} must be a positive integer, got {value}")


def conv_output_size(size: int, k: int, stride: int, dilation: int, padding: int) -> int:
    return (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def _conv_forward(x, w, stride, dilation, padding):
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    ho = conv_output_size(h, kh, stride, dilation, padding)
    wo = conv_output_size(wd, kw, stride, dilation, padding)
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=DTYPE)
    for i in range(kh):
        r0 = i * dilation
        for j in range(kw):
            c0 = j * dilation
            cols[:, :, i, j] = xp[:, :, r0 : r0 + stride * (ho - 1) + 1 : stride, c0 : c0 + stride * (wo - 1) + 1 : stride]
    out = np.tensordot(w, cols, axes=([1, 2, 3], [1, 2, 3]))  # (f, n, ho, wo)
    return out.transpose(1, 0, 2, 3), cols, xp.shape


def _scatter_windows(g_cols_fn, padded_shape, kh, kw, stride, dilation, ho, wo):
    gx = np.zeros(padded_shape, dtype=DTYPE)
    for i in range(kh):
        r0 = i * dilation
        for j in range(kw):
            c0 = j * dilation
            gx[:, :, r0 : r0 + stride * (ho - 1) + 1 : stride, c0 : c0 + stride * (wo - 1) + 1 : stride] += g_cols_fn(i, j)
    return gx


def conv2d(
    x: Tensor,
    kernel: Tensor,
    bias: Tensor | None = None,
    *,
    stride: int = 1,
    dilation: int = 1,
    padding: int = 0,
) -> Tensor:
    """2-D cross-correlation of ``x[N, C, H, W]`` with ``kernel[F, C, kh, kw]``.

    Output spatial size is ``(H + 2*padding - dilation*(kh-1) - 1) // stride + 1``
    (likewise for W). ``dilation > 1`` gives an atrous convolution.
    """
    _check_pos("stride", stride)
    _check_pos("dilation", dilation)
    if padding < 0:
        raise DomainError(f"padding must be non-negative, got {padding}")
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {x.shape} and {kernel.shape}")
    if x.shape[1] != kernel.shape[1]:
        raise ShapeError(f"conv2d: input has {x.shape[1]} channels, kernel expects {kernel.shape[1]}")
    if bias is not None and bias.shape != (kernel.shape[0],):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({kernel.shape[0]},)")
    n, c, h, wd = x.shape
    f, _, kh, kw = kernel.shape
    if dilation * (kh - 1) + 1 > h + 2 * padding or dilation * (kw - 1) + 1 > wd + 2 * padding:
        raise ShapeError(f"conv2d: dilated {kh}x{kw} kernel does not fit padded {h}x{wd} input")
    out, cols, padded_shape = _conv_forward(x.data, kernel.data, stride, dilation, padding)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    ho, wo = out.shape[2:]
    kd = kernel.data
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def backward(g):
        gk = np.tensordot(g, cols, axes=([0, 2, 3], [0, 4, 5])) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            gp = _scatter_windows(
                lambda i, j: np.tensordot(kd[:, :, i, j], g, axes=([0], [1])).transpose(1, 0, 2, 3),
                padded_shape, kh, kw, stride, dilation, ho, wo,
            )
            gx = gp[:, :, padding : padding + h, padding : padding + wd] if padding else gp
        if bias is None:
            return gx, gk
        return gx, gk, g.sum(axis=(0, 2, 3))

    return _result(out, parents, backward)


def transposed_conv_output_size(size: int, k: int, stride: int, padding: int, output_padding: int = 0) -> int:
    return (size - 1) * stride - 2 * padding + k + output_padding


def transposed_conv2d(
    x: Tensor,
    kernel: Tensor,
    bias: Tensor | None = None,
    *,
    stride: int = 1,
    padding: int = 0,
    output_padding: int = 0,
) -> Tensor:
    """Transposed convolution of ``x[N, C, H, W]`` with ``kernel[C, F, kh, kw]``.

    This is the input-gradient of :func:`conv2d` with the same kernel, so the
    output side is ``(H - 1)*stride - 2*padding + kh + output_padding``.
    ``output_padding`` (extra rows/columns at the far edge) must be smaller
    than ``stride``.
    """
    _check_pos("stride", stride)
    if padding < 0 or not 0 <= output_padding < stride:
        raise DomainError(f"need padding >= 0 and 0 <= output_padding < stride, got {padding}, {output_padding}")
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"transposed_conv2d expects 4-d input and kernel, got {x.shape} and {kernel.shape}")
    if x.shape[1] != kernel.shape[0]:
        raise ShapeError(f"transposed_conv2d: input has {x.shape[1]} channels, kernel expects {kernel.shape[0]}")
    if bias is not None and bias.shape != (kernel.shape[1],):
        raise ShapeError(f"transposed_conv2d: bias shape {bias.shape} != ({kernel.shape[1]},)")
    n, c, h, wd = x.shape
    _, f, kh, kw = kernel.shape
    ho = transposed_conv_output_size(h, kh, stride, padding, output_padding)
    wo = transposed_conv_output_size(wd, kw, stride, padding, output_padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"transposed_conv2d: empty output for input {x.shape}")
    full_shape = (n, f, ho + 2 * padding, wo + 2 * padding)
    xd, kd = x.data, kernel.data
    full = _scatter_windows(
        lambda i, j: np.tensordot(xd, kd[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2),
        full_shape, kh, kw, stride, 1, h, wd,
    )
    out = full[:, :, padding : padding + ho, padding : padding + wo]
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def backward(g):
        gfull = np.pad(g, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else g
        gx = gk = None
        if x.requires_grad or kernel.requires_grad:
            cols = np.empty((n, f, kh, kw, h, wd), dtype=DTYPE)
            for i in range(kh):
                for j in range(kw):
                    cols[:, :, i, j] = gfull[:, :, i : i + stride * (h - 1) + 1 : stride, j : j + stride * (wd - 1) + 1 : stride]
            if x.requires_grad:
                gx = np.tensordot(cols, kd, axes=([1, 2, 3], [1, 2, 3])).transpose(0, 3, 1, 2)
            if kernel.requires_grad:
                gk = np.tensordot(xd, cols, axes=([0, 2, 3], [0, 4, 5]))
        if bias is None:
            return gx, gk
        return gx, gk, g.sum(axis=(0, 2, 3))

    return _result(out, parents, backward)


def max_pool2d(x: Tensor, window: int, stride: int | None = None) -> Tensor:
    """Max pooling over ``window x window`` patches (no padding).

    The gradient flows only to the first maximum in row-major scan order
    within each window.
    """
    _check_pos("window", window)
    stride = window if stride is None else stride
    _check_pos("stride", stride)
    if x.ndim != 4:
        raise ShapeError(f"max_pool2d expects a 4-d input, got {x.shape}")
    n, c, h, wd = x.shape
    if window > h or window > wd:
        raise DomainError(f"max_pool2d: window {window} exceeds input {h}x{wd}")
    ho = (h - window) // stride + 1
    wo = (wd - window) // stride + 1
    patches = np.lib.stride_tricks.sliding_window_view(x.data, (window, window), axis=(2, 3))
    patches = patches[:, :, ::stride, ::stride][:, :, :ho, :wo].reshape(n, c, ho, wo, window * window)
    arg = patches.argmax(axis=-1)
    out = np.take_along_axis(patches, arg[..., None], axis=-1)[..., 0]
    rows = (np.arange(ho) * stride)[None, None, :, None] + arg // window
    cols = (np.arange(wo) * stride)[None, None, None, :] + arg % window
    ni = np.arange(n)[:, None, None, None]
    ci = np.arange(c)[None, :, None, None]

    def backward(g):
        gx = np.zeros((n, c, h, wd), dtype=DTYPE)
        np.add.at(gx, (np.broadcast_to(ni, arg.shape), np.broadcast_to(ci, arg.shape), rows, cols), g)
        return (gx,)

    return _result(out, (x,), backward)


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
