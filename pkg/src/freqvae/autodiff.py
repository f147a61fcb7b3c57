"""Dense float32 tensors with reverse-mode automatic differentiation.

The op set is exactly what the convolutional VAE and its losses need:
convolution, transposed convolution, nearest up-sampling, affine maps,
pointwise nonlinearities, a few structural ops, and scalar reductions.
Forward values are float32; scalar reductions accumulate in float64
before rounding back to float32.

Gradients accumulate (add, never overwrite) into ``Tensor.grad`` until
``zero_grad`` is called.  There is no broadcasting beyond bias addition;
any other shape mismatch raises :class:`ShapeError`.
"""

from __future__ import annotations

import itertools
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ShapeError, UsageError

_ids = itertools.count()

# While False, ops do not record nodes and outputs never require grad.
_grad_enabled = True


class no_grad:
    """Context manager that disables graph recording (evaluation mode)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """N-dimensional float32 array with an optional gradient buffer.

    ``data`` is row-major float32.  ``grad`` is lazily allocated with the
    same shape on the first backward pass that reaches this tensor.
    Tensors written by an op are treated as immutable afterwards.
    """

    __slots__ = ("data", "grad", "requires_grad", "node", "id")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=np.float32)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.node: Optional[Node] = None
        self.id = next(_ids)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, tape: "Tape | None" = None) -> None:
        backward(self, tape)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        head = np.array2string(self.data, precision=4, threshold=16)
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}, data={head})"

    # Python arithmetic wires into the op layer for readability in the losses.
    def __add__(self, other):
        return add_scalar(self, other) if _is_number(other) else add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add_scalar(self, -other) if _is_number(other) else sub(self, other)

    def __rsub__(self, other):
        return add_scalar(neg(self), other)

    def __mul__(self, other):
        return scale(self, other) if _is_number(other) else mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not _is_number(other):
            raise UsageError("tensor/tensor division is not an op; use div_by_col")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return neg(self)


def _is_number(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer))


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, np.float32), requires_grad=requires_grad)


class Node:
    """One recorded operation: inputs, output, and its backward rule.

    ``backward`` maps the gradient at the output to a tuple of gradients
    aligned with ``inputs`` (``None`` for inputs that need no gradient).
    """

    __slots__ = ("op", "inputs", "out", "backward")

    def __init__(self, op: str, inputs: Sequence[Tensor], out: Tensor,
                 backward: Callable[[np.ndarray], tuple]):
        self.op = op
        self.inputs = tuple(inputs)
        self.out = out
        self.backward = backward


def _make(op: str, inputs: Sequence[Tensor], data: np.ndarray,
          backward: Callable[[np.ndarray], tuple]) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(op, inputs, out, backward)
    return out


class Tape:
    """Topologically ordered record of the operations below one root.

    Every node's inputs precede it in ``nodes``; a backward traversal in
    reverse order therefore visits each node exactly once with its output
    gradient fully accumulated.
    """

    def __init__(self, nodes: list[Node]):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
        nodes: list[Node] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if t.node is None:
                continue
            if expanded:
                nodes.append(t.node)
                continue
            if t.id in visited:
                continue
            visited.add(t.id)
            stack.append((t, True))
            for parent in t.node.inputs:
                stack.append((parent, False))
        return cls(nodes)

    def __len__(self):
        return len(self.nodes)


def backward(root: Tensor, tape: Optional[Tape] = None) -> None:
    """Populate ``grad`` on every requires_grad tensor reachable from ``root``.

    ``root`` must be scalar-shaped.  Gradients add into existing buffers;
    call ``zero_grad`` between training steps.
    """
    if root.size != 1:
        raise UsageError(f"backward root must be scalar, got shape {root.shape}")
    if tape is None:
        tape = Tape.from_root(root)

    def flush(t: Tensor, g: np.ndarray) -> None:
        if t.requires_grad:
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
            t.grad += g

    seed = np.ones_like(root.data)
    if root.node is None:
        flush(root, seed)
        return

    flow: dict[int, np.ndarray] = {root.id: seed}
    for node in reversed(tape.nodes):
        g = flow.pop(node.out.id, None)
        if g is None:
            continue
        flush(node.out, g)
        for t, gt in zip(node.inputs, node.backward(g)):
            if gt is None:
                continue
            gt = gt.astype(np.float32, copy=False)
            acc = flow.get(t.id)
            flow[t.id] = gt if acc is None else acc + gt
    # Leaves never appear as a node output; flush whatever reached them.
    for node in tape.nodes:
        for t in node.inputs:
            if t.node is None:
                g = flow.pop(t.id, None)
                if g is not None:
                    flush(t, g)


# ---------------------------------------------------------------------------
# elementwise arithmetic

def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)
    return _make("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("sub", a, b)
    return _make("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("mul", a, b)
    return _make("mul", (a, b), a.data * b.data,
                 lambda g: (g * b.data, g * a.data))


def neg(a: Tensor) -> Tensor:
    return _make("neg", (a,), -a.data, lambda g: (-g,))


def scale(a: Tensor, s) -> Tensor:
    s = np.float32(s)
    return _make("scale", (a,), a.data * s, lambda g: (g * s,))


def add_scalar(a: Tensor, s) -> Tensor:
    s = np.float32(s)
    return _make("add_scalar", (a,), a.data + s, lambda g: (g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make("exp", (a,), out, lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _make("log", (a,), np.log(a.data), lambda g: (g / a.data,))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    out = np.clip(a.data, lo, hi)
    mask = ((a.data >= lo) & (a.data <= hi)).astype(np.float32)
    return _make("clamp", (a,), out, lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# nonlinearities

def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make("relu", (a,), np.where(mask, a.data, np.float32(0.0)),
                 lambda g: (g * mask,))


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    slope = np.float32(slope)
    deriv = np.where(a.data > 0, np.float32(1.0), slope)
    return _make("leaky_relu", (a,), np.where(a.data > 0, a.data, a.data * slope),
                 lambda g: (g * deriv,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make("tanh", (a,), out, lambda g: (g * (1.0 - out * out),))


# ---------------------------------------------------------------------------
# structure

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"reshape: {a.shape} has {a.size} elements, target {shape}")
    return _make("reshape", (a,), a.data.reshape(shape),
                 lambda g: (g.reshape(a.shape),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product via ``np.matmul``.

    Supports 2D @ 2D plus the two stacked forms used by the spectral ops,
    (H,H) @ (M,H,W) and (M,H,W) @ (W,N).  Gradients sum over any stacked
    leading axes of the smaller operand.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be >=2D, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def back(g):
        ga = gb = None
        if a.requires_grad:
            ga = np.matmul(g, b.data.swapaxes(-1, -2))
            ga = _sum_to_shape(ga, a.shape)
        if b.requires_grad:
            gb = np.matmul(a.data.swapaxes(-1, -2), g)
            gb = _sum_to_shape(gb, b.shape)
        return ga, gb

    return _make("matmul", (a, b), out, back)


def _sum_to_shape(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    return g


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``x @ weight + bias`` for ``x`` of shape (N, D)."""
    if x.ndim != 2 or weight.ndim != 2 or bias.ndim != 1:
        raise ShapeError(
            f"dense: expected x (N,D), weight (D,E), bias (E); got "
            f"{x.shape}, {weight.shape}, {bias.shape}")
    if x.shape[1] != weight.shape[0] or weight.shape[1] != bias.shape[0]:
        raise ShapeError(
            f"dense: inner dims disagree, x {x.shape} @ weight {weight.shape} "
            f"+ bias {bias.shape}")
    out = x.data @ weight.data + bias.data

    def back(g):
        gx = g @ weight.data.T if x.requires_grad else None
        gw = x.data.T @ g if weight.requires_grad else None
        gb = g.sum(axis=0, dtype=np.float64).astype(np.float32) \
            if bias.requires_grad else None
        return gx, gw, gb

    return _make("dense", (x, weight, bias), out, back)


def div_by_col(x: Tensor, d: Tensor, eps: float = 0.0) -> Tensor:
    """Divide each row of ``x`` (M,K) by the per-row scalar ``d`` (M,1) + eps."""
    if x.ndim != 2 or d.shape != (x.shape[0], 1):
        raise ShapeError(f"div_by_col: x {x.shape} needs d ({x.shape[0]},1), got {d.shape}")
    denom = d.data + np.float32(eps)
    out = x.data / denom

    def back(g):
        gx = g / denom if x.requires_grad else None
        gd = None
        if d.requires_grad:
            gd = -(g * x.data / (denom * denom)).sum(axis=1, keepdims=True,
                                                     dtype=np.float64).astype(np.float32)
        return gx, gd

    return _make("div_by_col", (x, d), out, back)


# ---------------------------------------------------------------------------
# reductions

def sum_all(a: Tensor) -> Tensor:
    val = np.float32(a.data.sum(dtype=np.float64))
    return _make("sum_all", (a,), np.asarray(val),
                 lambda g: (np.broadcast_to(g, a.shape).astype(np.float32),))


def mean_all(a: Tensor) -> Tensor:
    inv = 1.0 / a.size
    val = np.float32(a.data.sum(dtype=np.float64) * inv)
    return _make("mean_all", (a,), np.asarray(val),
                 lambda g: ((np.broadcast_to(g, a.shape) * inv).astype(np.float32),))


# ---------------------------------------------------------------------------
# convolution machinery
#
# conv2d kernels are laid out (out_ch, in_ch, kh, kw); transposed_conv2d
# kernels are (in_ch, out_ch, kh, kw), so that transposed_conv2d with the
# same raw kernel array is the exact adjoint of conv2d.

def _pad2d(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _out_size(h: int, k: int, s: int, p: int) -> int:
    return (h + 2 * p - k) // s + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, s: int) -> np.ndarray:
    # xp: (N,C,Hp,Wp) -> (N*Ho*Wo, C*kh*kw), one patch per output pixel
    n, c = xp.shape[:2]
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::s, ::s]
    ho, wo = win.shape[2], win.shape[3]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)


def _conv_fwd(x: np.ndarray, k: np.ndarray, s: int, p: int):
    n, c, h, w = x.shape
    f, _, kh, kw = k.shape
    ho, wo = _out_size(h, kh, s, p), _out_size(w, kw, s, p)
    cols = _im2col(_pad2d(x, p), kh, kw, s)
    out = cols @ k.reshape(f, -1).T
    out = np.ascontiguousarray(out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2))
    return out, cols


def _conv_bwd_weights(cols: np.ndarray, gout: np.ndarray, kshape) -> np.ndarray:
    f = gout.shape[1]
    gmat = gout.transpose(0, 2, 3, 1).reshape(-1, f)
    return (gmat.T @ cols).reshape(kshape)


def _conv_bwd_input(gout: np.ndarray, k: np.ndarray, s: int, p: int, hw) -> np.ndarray:
    n, f, ho, wo = gout.shape
    _, c, kh, kw = k.shape
    h, w = hw
    if s == 1 and kh == kw and p <= kh - 1:
        # at stride 1 the adjoint is itself a correlation: flip the kernel
        # spatially, swap its channel axes, and run the same GEMM path
        kt = np.ascontiguousarray(k[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        gx, _ = _conv_fwd(gout, kt, 1, kh - 1 - p)
        return gx
    gmat = gout.transpose(0, 2, 3, 1).reshape(-1, f)
    gcols = gmat @ k.reshape(f, -1)
    g6 = np.ascontiguousarray(
        gcols.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 1, 2, 4, 5))
    hp, wp = h + 2 * p, w + 2 * p
    gx = np.zeros((n, c, hp, wp), np.float32)
    for i in range(kh):
        for j in range(kw):
            gx[:, :, i:i + s * ho:s, j:j + s * wo:s] += g6[:, :, :, :, i, j]
    return gx[:, :, p:hp - p, p:wp - p]


def _check_conv_args(name, x, kernel, bias, stride, padding, in_axis):
    if x.ndim != 4:
        raise ShapeError(f"{name}: input must be (N,C,H,W), got {x.shape}")
    if kernel.ndim != 4:
        raise ShapeError(f"{name}: kernel must be 4D, got {kernel.shape}")
    if stride < 1:
        raise ShapeError(f"{name}: stride must be >= 1, got {stride}")
    if padding < 0:
        raise ShapeError(f"{name}: padding must be >= 0, got {padding}")
    if x.shape[1] != kernel.shape[in_axis]:
        raise ShapeError(
            f"{name}: input has {x.shape[1]} channels (axis 1) but kernel "
            f"{kernel.shape} expects {kernel.shape[in_axis]} (axis {in_axis})")


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1,
           padding: int = 0) -> Tensor:
    """Cross-correlation of (N,C,H,W) with kernel (F,C,kh,kw) plus bias (F,)."""
    _check_conv_args("conv2d", x, kernel, bias, stride, padding, in_axis=1)
    f, _, kh, kw = kernel.shape
    n, c, h, w = x.shape
    if bias.shape != (f,):
        raise ShapeError(f"conv2d: bias must be ({f},), got {bias.shape}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(
            f"conv2d: kernel ({kh},{kw}) exceeds padded input "
            f"({h + 2 * padding},{w + 2 * padding}) on axes (2,3)")
    out, cols = _conv_fwd(x.data, kernel.data, stride, padding)
    out += bias.data[None, :, None, None]

    def back(g):
        gx = _conv_bwd_input(g, kernel.data, stride, padding, (h, w)) \
            if x.requires_grad else None
        gk = _conv_bwd_weights(cols, g, kernel.shape) if kernel.requires_grad else None
        gb = g.sum(axis=(0, 2, 3), dtype=np.float64).astype(np.float32) \
            if bias.requires_grad else None
        return gx, gk, gb

    return _make("conv2d", (x, kernel, bias), out, back)


def transposed_conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1,
                      padding: int = 0) -> Tensor:
    """Transposed convolution: the adjoint of conv2d with the same kernel.

    ``x`` is (N,C,H,W), the kernel is (C,F,kh,kw), and the output is
    (N,F,H'',W'') with H'' = (H-1)*stride - 2*padding + kh.
    """
    _check_conv_args("transposed_conv2d", x, kernel, bias, stride, padding, in_axis=0)
    n, c, h, w = x.shape
    _, f, kh, kw = kernel.shape
    if bias.shape != (f,):
        raise ShapeError(f"transposed_conv2d: bias must be ({f},), got {bias.shape}")
    h2 = (h - 1) * stride - 2 * padding + kh
    w2 = (w - 1) * stride - 2 * padding + kw
    if h2 < 1 or w2 < 1:
        raise ShapeError(
            f"transposed_conv2d: computed output size ({h2},{w2}) is not positive")
    out = _conv_bwd_input(x.data, kernel.data, stride, padding, (h2, w2))
    out += bias.data[None, :, None, None]

    def back(g):
        gx = gk = gb = None
        if x.requires_grad or kernel.requires_grad:
            gx_full, gcols = _conv_fwd(g, kernel.data, stride, padding)
            if x.requires_grad:
                gx = gx_full
            if kernel.requires_grad:
                gk = _conv_bwd_weights(gcols, x.data, kernel.shape)
        if bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3), dtype=np.float64).astype(np.float32)
        return gx, gk, gb

    return _make("transposed_conv2d", (x, kernel, bias), out, back)


def upsample_nearest2x(x: Tensor) -> Tensor:
    """Replicate each pixel of (N,C,H,W) into a 2x2 block."""
    if x.ndim != 4:
        raise ShapeError(f"upsample_nearest2x: input must be (N,C,H,W), got {x.shape}")
    n, c, h, w = x.shape
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def back(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _make("upsample_nearest2x", (x,), out, back)
