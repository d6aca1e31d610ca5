"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable operation goes through :func:`forward_op`, which looks up
an entry in the operation registry, computes the value with numpy and, when
any input requires a gradient, records a node holding the backward rule.
:func:`backward` orders the recorded nodes topologically (the tape), replays
the rules in reverse and then marks the tape as consumed; replaying a consumed
tape raises :class:`TapeConsumedError` instead of silently accumulating.

Data are float64 numpy arrays in row-major order; image activations are NCHW.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Any, Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64


class AutodiffError(Exception):
    """Base class for errors raised by the tensor engine."""


class ShapeError(AutodiffError, ValueError):
    pass


class UnknownOpError(AutodiffError, KeyError):
    pass


class TapeConsumedError(AutodiffError, RuntimeError):
    pass


class NonScalarRootError(AutodiffError, ValueError):
    pass


_grad_enabled = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@dataclass(eq=False)
class Node:
    """One recorded operation: inputs, output and the saved backward context."""

    kind: str
    inputs: tuple["Tensor", ...]
    ctx: Any
    attrs: dict
    consumed: bool = False
    output: "Tensor | None" = field(default=None, repr=False)


class Tensor:
    """A float64 array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise NonScalarRootError(f"tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # arithmetic sugar; every method routes through forward_op
    def __add__(self, other):
        return forward_op("add", [self, as_tensor(other)])

    __radd__ = __add__

    def __sub__(self, other):
        return forward_op("sub", [self, as_tensor(other)])

    def __rsub__(self, other):
        return forward_op("sub", [as_tensor(other), self])

    def __mul__(self, other):
        return forward_op("mul", [self, as_tensor(other)])

    __rmul__ = __mul__

    def __truediv__(self, other):
        return forward_op("div", [self, as_tensor(other)])

    def __neg__(self):
        return forward_op("neg", [self])

    def __matmul__(self, other):
        return forward_op("matmul", [self, as_tensor(other)])

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return forward_op("sum", [self], {"axis": axis, "keepdims": keepdims})

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return forward_op("mean", [self], {"axis": axis, "keepdims": keepdims})

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return forward_op("reshape", [self], {"shape": tuple(shape)})

    def transpose(self, *axes) -> "Tensor":
        return forward_op("transpose", [self], {"axes": tuple(axes) or None})

    def relu(self) -> "Tensor":
        return forward_op("relu", [self])

    def abs(self) -> "Tensor":
        return forward_op("abs", [self])


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def ones_like(t: Tensor) -> Tensor:
    return Tensor(np.ones_like(t.data))


# ---------------------------------------------------------------- registry


@dataclass(frozen=True)
class OpDef:
    forward: Callable[..., tuple[np.ndarray, Any]]
    backward: Callable[..., Sequence[np.ndarray | None]]


_OPS: dict[str, OpDef] = {}


def register_op(kind: str):
    """Register ``forward(arrays, attrs) -> (out, ctx)`` and its backward.

    The decorated object must expose ``forward`` and ``backward`` callables;
    ``backward(grad_out, ctx, arrays, attrs)`` returns one gradient (or None)
    per input.
    """

    def deco(cls):
        _OPS[kind] = OpDef(cls.forward, cls.backward)
        return cls

    return deco


def op_kinds() -> list[str]:
    return sorted(_OPS)


def forward_op(kind: str, inputs: Sequence[Tensor], attrs: dict | None = None) -> Tensor:
    """Evaluate operation ``kind`` on ``inputs`` and record it for backward."""
    try:
        opdef = _OPS[kind]
    except KeyError:
        raise UnknownOpError(f"unknown operation kind {kind!r}") from None
    attrs = dict(attrs or {})
    inputs = tuple(as_tensor(t) for t in inputs)
    out_data, ctx = opdef.forward([t.data for t in inputs], attrs)
    needs_grad = _grad_enabled and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(out_data, dtype=DTYPE)
    out.grad = None
    out.requires_grad = needs_grad
    out.name = None
    out.node = None
    if needs_grad:
        node = Node(kind, inputs, ctx, attrs)
        node.output = out
        out.node = node
    return out


def build_tape(root: Tensor) -> list[Node]:
    """Return the nodes reachable from ``root`` in topological order."""
    order: list[Node] = []
    seen: set[int] = set()
    if root.node is None:
        return order
    stack: list[tuple[Node, bool]] = [(root.node, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for inp in node.inputs:
            if inp.node is not None and id(inp.node) not in seen:
                stack.append((inp.node, False))
    return order


def backward(root: Tensor) -> None:
    """Populate ``.grad`` of every requires_grad tensor reachable from ``root``.

    Leaf gradients accumulate into existing buffers; optimizers zero them.
    """
    if root.size != 1:
        raise NonScalarRootError(
            f"backward needs a scalar root, got shape {root.shape}"
        )
    if root.node is None:
        raise AutodiffError("backward called on a tensor with no recorded operations")
    tape = build_tape(root)
    if any(node.consumed for node in tape):
        raise TapeConsumedError(
            "tape already consumed by a previous backward; run a new forward first"
        )
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(tape):
        out = node.output
        g = grads.pop(id(out), None)
        if g is None:
            continue
        out.grad = g
        in_grads = _OPS[node.kind].backward(g, node.ctx, [t.data for t in node.inputs], node.attrs)
        for inp, ig in zip(node.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            if ig.shape != inp.data.shape:
                raise ShapeError(
                    f"{node.kind}: backward produced grad of shape {ig.shape} "
                    f"for input of shape {inp.data.shape}"
                )
            if inp.node is None:
                inp.grad = ig.copy() if inp.grad is None else inp.grad + ig
            else:
                prev = grads.get(id(inp))
                grads[id(inp)] = ig if prev is None else prev + ig
    for node in tape:
        node.consumed = True
        node.ctx = None


# ------------------------------------------------------------- elementwise


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def _check_broadcast(kind: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: cannot broadcast shapes {a.shape} and {b.shape}") from None


@register_op("add")
class _Add:
    @staticmethod
    def forward(xs, attrs):
        _check_broadcast("add", *xs)
        return xs[0] + xs[1], None

    @staticmethod
    def backward(g, ctx, xs, attrs):
        return _unbroadcast(g, xs[0].shape), _unbroadcast(g, xs[1].shape)


@register_op("sub")
class _Sub:
    @staticmethod
    def forward(xs, attrs):
        _check_broadcast("sub", *xs)
        return xs[0] - xs[1], None

    @staticmethod
    def backward(g, ctx, xs, attrs):
        return _unbroadcast(g, xs[0].shape), _unbroadcast(-g, xs[1].shape)


@register_op("mul")
class _Mul:
    @staticmethod
    def forward(xs, attrs):
        _check_broadcast("mul", *xs)
        return xs[0] * xs[1], None

    @staticmethod
    def backward(g, ctx, xs, attrs):
        a, b = xs
        return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


@register_op("div")
class _Div:
    @staticmethod
    def forward(xs, attrs):
        _check_broadcast("div", *xs)
        return xs[0] / xs[1], None

    @staticmethod
    def backward(g, ctx, xs, attrs):
        a, b = xs
        return _unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)


@register_op("neg")
class _Neg:
    @staticmethod
    def forward(xs, attrs):
        return -xs[0], None

    @staticmethod
    def backward(g, ctx, xs, attrs):
        return (-g,)


@register_op("relu")
class _Relu:
    @staticmethod
    def forward(xs, attrs):
        return np.maximum(xs[0], 0.0), None

    @staticmethod
    def backward(g, ctx, xs, attrs):
        return (g * (xs[0] > 0),)


@register_op("abs")
class _Abs:
    # subgradient 0 at the kink
    @staticmethod
    def forward(xs, attrs):
        return np.abs(xs[0]), None

    @staticmethod
    def backward(g, ctx, xs, attrs):
        return (g * np.sign(xs[0]),)


@register_op("exp")
class _Exp:
    @staticmethod
    def forward(xs, attrs):
        out = np.exp(xs[0])
        return out, out

    @staticmethod
    def backward(g, ctx, xs, attrs):
        return (g * ctx,)


@register_op("log")
class _Log:
    @staticmethod
    def forward(xs, attrs):
        return np.log(xs[0]), None

    @staticmethod
    def backward(g, ctx, xs, attrs):
        return (g / xs[0],)


# --------------------------------------------------------------- reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


@register_op("sum")
class _Sum:
    @staticmethod
    def forward(xs, attrs):
        return np.sum(xs[0], axis=attrs.get("axis"), keepdims=attrs.get("keepdims", False)), None

    @staticmethod
    def backward(g, ctx, xs, attrs):
        x = xs[0]
        axes = _norm_axis(attrs.get("axis"), x.ndim)
        if not attrs.get("keepdims", False):
            g = np.expand_dims(g, axes) if axes else g
        return (np.broadcast_to(g, x.shape).copy(),)


@register_op("mean")
class _Mean:
    @staticmethod
    def forward(xs, attrs):
        return np.mean(xs[0], axis=attrs.get("axis"), keepdims=attrs.get("keepdims", False)), None

    @staticmethod
    def backward(g, ctx, xs, attrs):
        x = xs[0]
        axes = _norm_axis(attrs.get("axis"), x.ndim)
        count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
        if not attrs.get("keepdims", False):
            g = np.expand_dims(g, axes) if axes else g
        return (np.broadcast_to(g / count, x.shape).copy(),)


# ------------------------------------------------------------ shape changes


@register_op("reshape")
class _Reshape:
    @staticmethod
    def forward(xs, attrs):
        x = xs[0]
        shape = attrs["shape"]
        try:
            return x.reshape(shape), None
        except ValueError:
            raise ShapeError(f"reshape: cannot reshape {x.shape} into {shape}") from None

    @staticmethod
    def backward(g, ctx, xs, attrs):
        return (g.reshape(xs[0].shape),)


@register_op("transpose")
class _Transpose:
    @staticmethod
    def forward(xs, attrs):
        return np.transpose(xs[0], attrs.get("axes")), None

    @staticmethod
    def backward(g, ctx, xs, attrs):
        axes = attrs.get("axes")
        if axes is None:
            return (np.transpose(g),)
        return (np.transpose(g, np.argsort(axes)),)


@register_op("matmul")
class _Matmul:
    @staticmethod
    def forward(xs, attrs):
        a, b = xs
        if a.ndim != 2 or b.ndim != 2:
            raise ShapeError(f"matmul: expected 2-D operands, got {a.shape} and {b.shape}")
        if a.shape[1] != b.shape[0]:
            raise ShapeError(
                f"matmul: inner dimensions differ ({a.shape[1]} vs {b.shape[0]}) "
                f"for shapes {a.shape} and {b.shape}"
            )
        return a @ b, None

    @staticmethod
    def backward(g, ctx, xs, attrs):
        a, b = xs
        return g @ b.T, a.T @ g


# ------------------------------------------------------------- conv family


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def _windows(x: np.ndarray, ky: int, kx: int, sy: int, sx: int, py: int, px: int):
    if py or px:
        x = np.pad(x, ((0, 0), (0, 0), (py, py), (px, px)))
    win = sliding_window_view(x, (ky, kx), axis=(2, 3))[:, :, ::sy, ::sx]
    return x.shape, win  # win: N, C, OH, OW, ky, kx


def _fold(grad_win: np.ndarray, padded_shape, ky, kx, sy, sx, py, px) -> np.ndarray:
    """Scatter-add window gradients (N, C, OH, OW, ky, kx) back onto the input."""
    n, c, oh, ow = grad_win.shape[:4]
    dxp = np.zeros(padded_shape, dtype=DTYPE)
    for i in range(ky):
        for j in range(kx):
            dxp[:, :, i : i + sy * oh : sy, j : j + sx * ow : sx] += grad_win[..., i, j]
    h, w = padded_shape[2] - 2 * py, padded_shape[3] - 2 * px
    return dxp[:, :, py : py + h, px : px + w]


def _pad(x, py, px):
    if py or px:
        return np.pad(x, ((0, 0), (0, 0), (py, py), (px, px)))
    return x


def _im2col(xp: np.ndarray, ky, kx, sy, sx, oh, ow) -> np.ndarray:
    """Columns laid out as (C, ky, kx, N, OH, OW)."""
    n, c = xp.shape[:2]
    cols = np.empty((c, ky, kx, n, oh, ow), dtype=DTYPE)
    xt = xp.transpose(1, 0, 2, 3)
    for i in range(ky):
        for j in range(kx):
            cols[:, i, j] = xt[:, :, i : i + sy * oh : sy, j : j + sx * ow : sx]
    return cols


def _col2im(dcols: np.ndarray, padded_shape, sy, sx, py, px) -> np.ndarray:
    c, ky, kx, n, oh, ow = dcols.shape
    dxp = np.zeros((padded_shape[1], padded_shape[0], padded_shape[2], padded_shape[3]), dtype=DTYPE)
    for i in range(ky):
        for j in range(kx):
            dxp[:, :, i : i + sy * oh : sy, j : j + sx * ow : sx] += dcols[:, i, j]
    h, w = padded_shape[2] - 2 * py, padded_shape[3] - 2 * px
    return dxp[:, :, py : py + h, px : px + w].transpose(1, 0, 2, 3)


def _conv_geometry(kind, x, ky, kx, sy, sx, py, px):
    if x.ndim != 4:
        raise ShapeError(f"{kind}: expected NCHW input, got shape {x.shape}")
    oh = conv_output_size(x.shape[2], ky, sy, py)
    ow = conv_output_size(x.shape[3], kx, sx, px)
    if oh <= 0 or ow <= 0:
        raise ShapeError(
            f"{kind}: non-positive output size {oh}x{ow} for input {x.shape[2]}x{x.shape[3]}, "
            f"kernel {ky}x{kx}, stride {sy}x{sx}, padding {py}x{px}"
        )
    return oh, ow


@register_op("conv2d")
class _Conv2d:
    """Cross-correlation of x (N,Cin,H,W) with w (Cout,Cin,Ky,Kx), optional bias."""

    @staticmethod
    def forward(xs, attrs):
        x, w = xs[0], xs[1]
        if w.ndim != 4:
            raise ShapeError(f"conv2d: weight must be 4-D, got shape {w.shape}")
        if x.ndim == 4 and x.shape[1] != w.shape[1]:
            raise ShapeError(
                f"conv2d: input has {x.shape[1]} channels but weight expects {w.shape[1]}"
            )
        sy, sx = _pair(attrs.get("stride", 1))
        py, px = _pair(attrs.get("padding", 0))
        cout, _, ky, kx = w.shape
        oh, ow = _conv_geometry("conv2d", x, ky, kx, sy, sx, py, px)
        xp = _pad(x, py, px)
        cols = _im2col(xp, ky, kx, sy, sx, oh, ow)
        n = x.shape[0]
        out = (w.reshape(cout, -1) @ cols.reshape(-1, n * oh * ow)).reshape(cout, n, oh, ow)
        if len(xs) > 2:
            out += xs[2].reshape(-1, 1, 1, 1)
        return out.transpose(1, 0, 2, 3), (xp.shape, cols)

    @staticmethod
    def backward(g, ctx, xs, attrs):
        pshape, cols = ctx
        w = xs[1]
        sy, sx = _pair(attrs.get("stride", 1))
        py, px = _pair(attrs.get("padding", 0))
        cout = w.shape[0]
        g2 = g.transpose(1, 0, 2, 3).reshape(cout, -1)
        cols2 = cols.reshape(-1, g2.shape[1])
        dw = (g2 @ cols2.T).reshape(w.shape)
        dcols = (w.reshape(cout, -1).T @ g2).reshape(cols.shape)
        dx = _col2im(dcols, pshape, sy, sx, py, px)
        grads = [dx, dw]
        if len(xs) > 2:
            grads.append(g2.sum(axis=1))
        return grads


@register_op("dw_conv2d")
class _DepthwiseConv2d:
    """Depthwise cross-correlation: w has shape (C,1,Ky,Kx), one filter per channel."""

    @staticmethod
    def forward(xs, attrs):
        x, w = xs[0], xs[1]
        if w.ndim != 4 or w.shape[1] != 1:
            raise ShapeError(f"dw_conv2d: weight must have shape (C,1,Ky,Kx), got {w.shape}")
        if x.ndim == 4 and x.shape[1] != w.shape[0]:
            raise ShapeError(
                f"dw_conv2d: input has {x.shape[1]} channels but weight has {w.shape[0]} filters"
            )
        sy, sx = _pair(attrs.get("stride", 1))
        py, px = _pair(attrs.get("padding", 0))
        ky, kx = w.shape[2], w.shape[3]
        oh, ow = _conv_geometry("dw_conv2d", x, ky, kx, sy, sx, py, px)
        xp = _pad(x, py, px)
        out = np.zeros((x.shape[0], x.shape[1], oh, ow), dtype=DTYPE)
        for i in range(ky):
            for j in range(kx):
                out += xp[:, :, i : i + sy * oh : sy, j : j + sx * ow : sx] * w[:, 0, i, j].reshape(1, -1, 1, 1)
        if len(xs) > 2:
            out += xs[2].reshape(1, -1, 1, 1)
        return out, xp

    @staticmethod
    def backward(g, ctx, xs, attrs):
        xp = ctx
        w = xs[1]
        sy, sx = _pair(attrs.get("stride", 1))
        py, px = _pair(attrs.get("padding", 0))
        ky, kx = w.shape[2], w.shape[3]
        oh, ow = g.shape[2], g.shape[3]
        dw = np.zeros_like(w)
        dxp = np.zeros_like(xp)
        for i in range(ky):
            for j in range(kx):
                sl = (slice(None), slice(None), slice(i, i + sy * oh, sy), slice(j, j + sx * ow, sx))
                dw[:, 0, i, j] = (g * xp[sl]).sum(axis=(0, 2, 3))
                dxp[sl] += g * w[:, 0, i, j].reshape(1, -1, 1, 1)
        h, wd = xp.shape[2] - 2 * py, xp.shape[3] - 2 * px
        grads = [dxp[:, :, py : py + h, px : px + wd], dw]
        if len(xs) > 2:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads


@register_op("maxpool2d")
class _MaxPool:
    @staticmethod
    def forward(xs, attrs):
        x = xs[0]
        ky, kx = _pair(attrs["kernel"])
        sy, sx = _pair(attrs.get("stride", attrs["kernel"]))
        py, px = _pair(attrs.get("padding", 0))
        _conv_geometry("maxpool2d", x, ky, kx, sy, sx, py, px)
        if py or px:
            x = np.pad(x, ((0, 0), (0, 0), (py, py), (px, px)), constant_values=-np.inf)
        win = sliding_window_view(x, (ky, kx), axis=(2, 3))[:, :, ::sy, ::sx]
        flat = win.reshape(*win.shape[:4], ky * kx)
        arg = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
        return out, (x.shape, arg)

    @staticmethod
    def backward(g, ctx, xs, attrs):
        pshape, arg = ctx
        ky, kx = _pair(attrs["kernel"])
        sy, sx = _pair(attrs.get("stride", attrs["kernel"]))
        py, px = _pair(attrs.get("padding", 0))
        onehot = np.zeros((*g.shape, ky * kx), dtype=DTYPE)
        np.put_along_axis(onehot, arg[..., None], g[..., None], axis=-1)
        gw = onehot.reshape(*g.shape, ky, kx)
        return (_fold(gw, pshape, ky, kx, sy, sx, py, px),)


@register_op("avgpool2d")
class _AvgPool:
    @staticmethod
    def forward(xs, attrs):
        x = xs[0]
        ky, kx = _pair(attrs["kernel"])
        sy, sx = _pair(attrs.get("stride", attrs["kernel"]))
        py, px = _pair(attrs.get("padding", 0))
        _conv_geometry("avgpool2d", x, ky, kx, sy, sx, py, px)
        pshape, win = _windows(x, ky, kx, sy, sx, py, px)
        return win.mean(axis=(4, 5)), pshape

    @staticmethod
    def backward(g, ctx, xs, attrs):
        ky, kx = _pair(attrs["kernel"])
        sy, sx = _pair(attrs.get("stride", attrs["kernel"]))
        py, px = _pair(attrs.get("padding", 0))
        gw = np.broadcast_to((g / (ky * kx))[..., None, None], (*g.shape, ky, kx))
        return (_fold(gw, ctx, ky, kx, sy, sx, py, px),)


@register_op("global_avgpool")
class _GlobalAvgPool:
    @staticmethod
    def forward(xs, attrs):
        x = xs[0]
        if x.ndim != 4:
            raise ShapeError(f"global_avgpool: expected NCHW input, got shape {x.shape}")
        return x.mean(axis=(2, 3)), None

    @staticmethod
    def backward(g, ctx, xs, attrs):
        x = xs[0]
        hw = x.shape[2] * x.shape[3]
        return (np.broadcast_to((g / hw)[:, :, None, None], x.shape).copy(),)


@register_op("batchnorm")
class _BatchNorm:
    """Per-channel normalization over (N, H, W) for NCHW or over N for (N, C).

    attrs: ``training`` (use batch statistics), ``eps``; in inference mode
    ``running_mean``/``running_var`` arrays are required.
    """

    @staticmethod
    def forward(xs, attrs):
        x, gamma, beta = xs
        if x.shape[1] != gamma.shape[0] or gamma.shape != beta.shape:
            raise ShapeError(
                f"batchnorm: input has {x.shape[1]} channels, gamma {gamma.shape}, beta {beta.shape}"
            )
        axes = (0, 2, 3) if x.ndim == 4 else (0,)
        bshape = (1, -1, 1, 1) if x.ndim == 4 else (1, -1)
        eps = attrs.get("eps", 1e-5)
        if attrs.get("training", True):
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
        else:
            mean = np.asarray(attrs["running_mean"], dtype=DTYPE)
            var = np.asarray(attrs["running_var"], dtype=DTYPE)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x - mean.reshape(bshape)) * inv.reshape(bshape)
        out = xhat * gamma.reshape(bshape) + beta.reshape(bshape)
        return out, (xhat, inv, axes, bshape)

    @staticmethod
    def backward(g, ctx, xs, attrs):
        xhat, inv, axes, bshape = ctx
        gamma = xs[1]
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        gx = g * gamma.reshape(bshape)
        if attrs.get("training", True):
            m = g.size // g.shape[1]
            dx = (
                inv.reshape(bshape)
                / m
                * (m * gx - gx.sum(axis=axes, keepdims=True) - xhat * (gx * xhat).sum(axis=axes, keepdims=True))
            )
        else:
            dx = gx * inv.reshape(bshape)
        return dx, dgamma, dbeta


@register_op("softmax_cross_entropy")
class _SoftmaxCrossEntropy:
    """Mean softmax cross-entropy of logits (N, K) against integer ``labels``."""

    @staticmethod
    def forward(xs, attrs):
        z = xs[0]
        labels = np.asarray(attrs["labels"])
        if z.ndim != 2 or labels.shape != (z.shape[0],):
            raise ShapeError(
                f"softmax_cross_entropy: logits {z.shape} do not match labels {labels.shape}"
            )
        if labels.size and (labels.min() < 0 or labels.max() >= z.shape[1]):
            raise ValueError(
                f"softmax_cross_entropy: label out of range [0, {z.shape[1]}): "
                f"min {labels.min()}, max {labels.max()}"
            )
        zmax = z.max(axis=1, keepdims=True)
        shifted = z - zmax
        lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        logp = shifted - lse
        n = z.shape[0]
        loss = -logp[np.arange(n), labels].mean()
        return np.asarray(loss), logp

    @staticmethod
    def backward(g, ctx, xs, attrs):
        logp = ctx
        labels = np.asarray(attrs["labels"])
        n = logp.shape[0]
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (g * p / n,)


@register_op("heaviside_ste")
class _HeavisideSTE:
    """Binarize against ``threshold``; gradient passes straight through on |x| <= 1.

    With ``relaxed=True`` the forward value is clip(x, -1, 1), whose true
    derivative equals the straight-through rule; used for gradient checks.
    """

    @staticmethod
    def forward(xs, attrs):
        x = xs[0]
        if attrs.get("relaxed", False):
            return np.clip(x, -1.0, 1.0), None
        return (x >= attrs.get("threshold", 0.0)).astype(DTYPE), None

    @staticmethod
    def backward(g, ctx, xs, attrs):
        return (g * (np.abs(xs[0]) <= 1.0),)


# ----------------------------------------------------------- convenience


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    ins = [x, w] if bias is None else [x, w, bias]
    return forward_op("conv2d", ins, {"stride": stride, "padding": padding})


def dw_conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    ins = [x, w] if bias is None else [x, w, bias]
    return forward_op("dw_conv2d", ins, {"stride": stride, "padding": padding})


def maxpool2d(x: Tensor, kernel, stride=None, padding=0) -> Tensor:
    return forward_op("maxpool2d", [x], {"kernel": kernel, "stride": stride or kernel, "padding": padding})


def avgpool2d(x: Tensor, kernel, stride=None, padding=0) -> Tensor:
    return forward_op("avgpool2d", [x], {"kernel": kernel, "stride": stride or kernel, "padding": padding})


def global_avgpool(x: Tensor) -> Tensor:
    return forward_op("global_avgpool", [x])


def relu(x: Tensor) -> Tensor:
    return forward_op("relu", [x])


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    return forward_op("softmax_cross_entropy", [logits], {"labels": np.asarray(labels)})
