"""Minimal dense-tensor reverse-mode autodiff over numpy float64 arrays.

Tensors record the primitive that produced them; ``Tensor.backward`` walks
the recorded graph in reverse topological order and accumulates gradients
into every leaf created with ``requires_grad=True``.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Graph", "ShapeMismatch", "UnboundInput", "NotScalarLoss",
    "tensor", "add", "sub", "mul", "div", "matmul", "conv1d", "relu", "tanh",
    "sigmoid", "mean", "transpose", "concat", "stack", "moving_average",
    "dropout", "rfft", "irfft", "lstm", "split_exact", "forward", "backward",
    "grad_check", "no_grad", "trace_kinks",
]


class ShapeMismatch(ValueError):
    pass


class UnboundInput(KeyError):
    pass


class NotScalarLoss(ValueError):
    pass


_GRAD_ENABLED = True
_KINK_TRACE: list | None = None


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def trace_kinks():
    """Record the activation pattern of every non-smooth primitive evaluated inside."""
    global _KINK_TRACE
    prev, _KINK_TRACE = _KINK_TRACE, []
    try:
        yield _KINK_TRACE
    finally:
        _KINK_TRACE = prev


def _record_kink(mask: np.ndarray) -> None:
    if _KINK_TRACE is not None:
        _KINK_TRACE.append(np.packbits(mask).tobytes())


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = "leaf"
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

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise NotScalarLoss(f"backward() needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        self.grad = np.asarray(grad, dtype=np.float64)
        for node in reversed(_topo_order([self])):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return mul(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, idx): return getitem(self, idx)

    def sum(self, axis=None, keepdims=False): return sum_(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 else shape)
    def swapaxes(self, a, b): return swapaxes(self, a, b)
    def relu(self): return relu(self)
    def tanh(self): return tanh(self)
    def sigmoid(self): return sigmoid(self)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    out = Tensor(data)
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if g.shape != t.data.shape:
        g = _unbroadcast(g, t.data.shape)
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def _topo_order(roots: Iterable[Tensor]) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    for root in roots:
        if id(root) in seen:
            continue
        stack = [(root, False)]
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
    return order


# --- elementwise -----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "add")

    def bw(g):
        _accum(a, g)
        _accum(b, g)
    return _result(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def bw(g):
        _accum(a, g)
        _accum(b, -g)
    return _result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def bw(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)
    return _result(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "div")
    out = a.data / b.data

    def bw(g):
        _accum(a, g / b.data)
        _accum(b, -g * out / b.data)
    return _result(out, (a, b), bw, "div")


def square(x) -> Tensor:
    x = _as_tensor(x)
    return _result(x.data * x.data, (x,), lambda g: _accum(x, 2.0 * g * x.data), "square")


def sqrt(x) -> Tensor:
    x = _as_tensor(x)
    out = np.sqrt(x.data)
    return _result(out, (x,), lambda g: _accum(x, 0.5 * g / out), "sqrt")


def exp(x) -> Tensor:
    x = _as_tensor(x)
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: _accum(x, g * out), "exp")


def abs_(x) -> Tensor:
    x = _as_tensor(x)
    _record_kink(x.data > 0)
    _record_kink(x.data < 0)
    return _result(np.abs(x.data), (x,), lambda g: _accum(x, g * np.sign(x.data)), "abs")


def relu(x) -> Tensor:
    x = _as_tensor(x)
    if _KINK_TRACE is not None:
        _record_kink(x.data > 0)
    out = np.maximum(x.data, 0.0)
    return _result(out, (x,), lambda g: _accum(x, g * (out > 0)), "relu")


def tanh(x) -> Tensor:
    x = _as_tensor(x)
    out = np.tanh(x.data)
    return _result(out, (x,), lambda g: _accum(x, g * (1.0 - out * out)), "tanh")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 + 0.5 * np.tanh(0.5 * z)


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    out = _sigmoid(x.data)
    return _result(out, (x,), lambda g: _accum(x, g * out * (1.0 - out)), "sigmoid")


# --- reductions and shape ----------------------------------------------------

def sum_(x, axis=None, keepdims=False) -> Tensor:
    x = _as_tensor(x)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(x, np.broadcast_to(g, x.shape))
    return _result(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), bw, "sum")


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = _as_tensor(x)
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([x.shape[a] for a in axes]))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(x, np.broadcast_to(g / n, x.shape))
    return _result(np.mean(x.data, axis=axis, keepdims=keepdims), (x,), bw, "mean")


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeMismatch(f"reshape: cannot view {x.shape} as {shape}") from None
    return _result(out, (x,), lambda g: _accum(x, g.reshape(x.shape)), "reshape")


def transpose(x, axes=None) -> Tensor:
    x = _as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = np.argsort(axes)
    return _result(np.transpose(x.data, axes), (x,),
                   lambda g: _accum(x, np.transpose(g, inv)), "transpose")


def swapaxes(x, a: int, b: int) -> Tensor:
    x = _as_tensor(x)
    return _result(np.swapaxes(x.data, a, b), (x,),
                   lambda g: _accum(x, np.swapaxes(g, a, b)), "swapaxes")


def getitem(x, idx) -> Tensor:
    x = _as_tensor(x)

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        _accum(x, full)
    return _result(x.data[idx], (x,), bw, "slice")


slice_ = getitem


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    ax = axis % xs[0].ndim
    for x in xs[1:]:
        if x.ndim != xs[0].ndim or any(
                x.shape[i] != xs[0].shape[i] for i in range(x.ndim) if i != ax):
            raise ShapeMismatch(f"concat: incompatible shapes {xs[0].shape} and {x.shape}")
    bounds = np.cumsum([0] + [x.shape[ax] for x in xs])

    def bw(g):
        for x, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
            sl = [slice(None)] * g.ndim
            sl[ax] = slice(lo, hi)
            _accum(x, g[tuple(sl)])
    return _result(np.concatenate([x.data for x in xs], axis=ax), xs, bw, "concat")


def stack(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    for x in xs[1:]:
        if x.shape != xs[0].shape:
            raise ShapeMismatch(f"stack: incompatible shapes {xs[0].shape} and {x.shape}")
    out = np.stack([x.data for x in xs], axis=axis)
    ax = axis % out.ndim

    def bw(g):
        for i, x in enumerate(xs):
            _accum(x, np.take(g, i, axis=ax))
    return _result(out, xs, bw, "stack")


# --- linear algebra and convolution -----------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def bw(g):
        if a.requires_grad:
            _accum(a, g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            _accum(b, np.swapaxes(a.data, -1, -2) @ g)
    return _result(a.data @ b.data, (a, b), bw, "matmul")


def conv1d(x, w, b=None, stride: int = 1, dilation: int = 1, padding: str = "causal") -> Tensor:
    """1-D convolution over the time axis of ``x`` (B, T, C_in) with ``w`` (K, C_in, C_out).

    ``padding`` is ``"causal"`` (left pad only, output[t] sees inputs <= t),
    ``"same"`` (symmetric) or ``"valid"``.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 3 or w.ndim != 3 or x.shape[2] != w.shape[1]:
        raise ShapeMismatch(f"conv1d: incompatible shapes {x.shape} and {w.shape}")
    k = w.shape[0]
    span = (k - 1) * dilation
    if padding == "causal":
        left, right = span, 0
    elif padding == "same":
        left, right = span // 2, span - span // 2
    elif padding == "valid":
        left = right = 0
    else:
        raise ValueError(f"unknown padding {padding!r}")
    T = x.shape[1]
    xp = np.pad(x.data, ((0, 0), (left, right), (0, 0)))
    t_out = (T + left + right - span - 1) // stride + 1
    if t_out < 1:
        raise ShapeMismatch(f"conv1d: input length {T} too short for kernel span {span + 1}")
    hi = stride * (t_out - 1) + 1
    c_in = x.shape[2]
    # im2col: one matmul over all taps
    cols = np.concatenate([xp[:, j * dilation: j * dilation + hi: stride, :] for j in range(k)], axis=-1)
    w2 = w.data.reshape(k * c_in, -1)
    out = cols @ w2
    parents = [x, w]
    if b is not None:
        b = _as_tensor(b)
        out = out + b.data
        parents.append(b)

    def bw(g):
        if w.requires_grad:
            g2 = g.reshape(-1, g.shape[-1])
            _accum(w, (cols.reshape(-1, k * c_in).T @ g2).reshape(w.shape))
        if x.requires_grad:
            gc = g @ w2.T
            gp = np.zeros_like(xp)
            for j in range(k):
                gp[:, j * dilation: j * dilation + hi: stride, :] += gc[..., j * c_in:(j + 1) * c_in]
            _accum(x, gp[:, left:left + T, :])
        if b is not None:
            _accum(b, g.sum(axis=(0, 1)))
    return _result(out, parents, bw, "conv1d")


def moving_average(x, kernel: int, axis: int = -2) -> Tensor:
    """Centered moving average along ``axis`` with replicate padding; output length = input length.

    Computed as ``x + mean_j(window_j - x)`` so that constant series come back bit-exact.
    """
    x = _as_tensor(x)
    if kernel < 1 or kernel % 2 == 0:
        raise ValueError(f"moving_average kernel must be odd and positive, got {kernel}")
    ax = axis % x.ndim
    p = kernel // 2
    xm = np.moveaxis(x.data, ax, 0)
    T = xm.shape[0]
    xp = np.concatenate([np.repeat(xm[:1], p, axis=0), xm, np.repeat(xm[-1:], p, axis=0)])
    win = np.lib.stride_tricks.sliding_window_view(xp, T, axis=0)   # (kernel, ..., T)
    acc = (win - np.moveaxis(xm, 0, -1)).sum(axis=0)
    out = np.moveaxis(xm + np.moveaxis(acc, -1, 0) / kernel, 0, ax)

    def bw(g):
        gm = np.moveaxis(g, ax, 0) / kernel
        gp = np.zeros_like(xp)
        for j in range(kernel):
            gp[j:j + T] += gm
        gx = gp[p:p + T].copy()
        gx[0] += gp[:p].sum(axis=0)
        gx[-1] += gp[p + T:].sum(axis=0)
        _accum(x, np.moveaxis(gx, 0, ax))
    return _result(out, (x,), bw, "moving_average")


def split_exact(x, trend) -> tuple[Tensor, Tensor]:
    """Return (x - trend, trend') whose floating-point sum reproduces ``x`` wherever representable.

    Values of ``trend'`` differ from ``trend`` only by rounding; gradients are
    those of the exact identity seasonal = x - trend.
    """
    x, trend = _as_tensor(x), _as_tensor(trend)
    t = trend.data
    s = x.data - t
    bad = (s + t) != x.data
    if bad.any():
        t = np.where(bad, x.data - s, t)
        bad = (s + t) != x.data
        if bad.any():
            # last resort: nudge the seasonal value by one ulp either way
            for direction in (np.inf, -np.inf):
                s2 = np.nextafter(s, direction)
                fix = bad & ((s2 + t) == x.data)
                s = np.where(fix, s2, s)
                bad &= ~fix

    def bw_s(g):
        _accum(x, g)
        _accum(trend, -g)
    seasonal = _result(s, (x, trend), bw_s, "seasonal")
    trend_out = _result(t, (trend,), lambda g: _accum(trend, g), "trend")
    return seasonal, trend_out


def dropout(x, rate: float, train: bool, rng: np.random.Generator | None = None) -> Tensor:
    x = _as_tensor(x)
    if not train or rate <= 0.0:
        return x
    if rng is None:
        rng = np.random.default_rng()
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _result(x.data * mask, (x,), lambda g: _accum(x, g * mask), "dropout")


# --- frequency domain ---------------------------------------------------------

def rfft(x, axis: int = -2) -> Tensor:
    """Unnormalized real FFT along ``axis``; the result carries a trailing (real, imag) axis."""
    x = _as_tensor(x)
    ax = axis % x.ndim
    n = x.shape[ax]
    spec = np.fft.rfft(x.data, axis=ax)

    def bw(g):
        full_shape = list(g.shape[:-1])
        full_shape[ax] = n
        h = np.zeros(full_shape, dtype=np.complex128)
        sl = [slice(None)] * len(full_shape)
        sl[ax] = slice(0, spec.shape[ax])
        h[tuple(sl)] = g[..., 0] + 1j * g[..., 1]
        _accum(x, n * np.fft.ifft(h, axis=ax).real)
    return _result(np.stack([spec.real, spec.imag], axis=-1), (x,), bw, "rfft")


def irfft(z, n: int, axis: int = -2) -> Tensor:
    """Inverse of :func:`rfft` (1/n normalization) for a (real, imag)-pair tensor."""
    z = _as_tensor(z)
    ax = axis % (z.ndim - 1)
    nbins = n // 2 + 1
    if z.shape[-1] != 2 or z.shape[ax] != nbins:
        raise ShapeMismatch(f"irfft: expected {nbins} bins with a pair axis, got {z.shape}")
    out = np.fft.irfft(z.data[..., 0] + 1j * z.data[..., 1], n=n, axis=ax)
    weight = np.full(nbins, 2.0)
    weight[0] = 1.0
    if n % 2 == 0:
        weight[-1] = 1.0
    wshape = [1] * (z.ndim - 1)
    wshape[ax] = nbins
    weight = weight.reshape(wshape) / n

    def bw(g):
        spec = np.fft.rfft(g, axis=ax) * weight
        _accum(z, np.stack([spec.real, spec.imag], axis=-1))
    return _result(out, (z,), bw, "irfft")


# --- recurrent ---------------------------------------------------------------------

def lstm(x, w_ih, w_hh, b) -> Tensor:
    """Single LSTM layer over ``x`` (B, T, D); returns all hidden states (B, T, H).

    Gate order in the 4H axis is input, forget, cell, output. Zero initial state.
    """
    x, w_ih, w_hh, b = (_as_tensor(t) for t in (x, w_ih, w_hh, b))
    B, T, D = x.shape
    H = w_hh.shape[0]
    if w_ih.shape != (D, 4 * H) or w_hh.shape != (H, 4 * H) or b.shape != (4 * H,):
        raise ShapeMismatch(
            f"lstm: input {x.shape} incompatible with weights {w_ih.shape}, {w_hh.shape}, {b.shape}")
    xw = x.data @ w_ih.data + b.data
    gates = np.empty((T, B, 4 * H))
    cs = np.empty((T + 1, B, H))
    hs = np.empty((T + 1, B, H))
    tcs = np.empty((T, B, H))
    cs[0] = 0.0
    hs[0] = 0.0
    for t in range(T):
        a = xw[:, t] + hs[t] @ w_hh.data
        a[:, 2 * H:3 * H] = np.tanh(a[:, 2 * H:3 * H])
        a[:, :2 * H] = _sigmoid(a[:, :2 * H])
        a[:, 3 * H:] = _sigmoid(a[:, 3 * H:])
        gates[t] = a
        cs[t + 1] = a[:, H:2 * H] * cs[t] + a[:, :H] * a[:, 2 * H:3 * H]
        tcs[t] = np.tanh(cs[t + 1])
        hs[t + 1] = a[:, 3 * H:] * tcs[t]
    out = np.ascontiguousarray(np.swapaxes(hs[1:], 0, 1))

    def bw(g):
        dxw = np.empty((T, B, 4 * H))
        dh_next = np.zeros((B, H))
        dc_next = np.zeros((B, H))
        gt = np.swapaxes(g, 0, 1)
        for t in range(T - 1, -1, -1):
            a = gates[t]
            i, f, c_hat, o = a[:, :H], a[:, H:2 * H], a[:, 2 * H:3 * H], a[:, 3 * H:]
            dh = gt[t] + dh_next
            dc = dc_next + dh * o * (1.0 - tcs[t] ** 2)
            da = dxw[t]
            da[:, :H] = dc * c_hat * i * (1.0 - i)
            da[:, H:2 * H] = dc * cs[t] * f * (1.0 - f)
            da[:, 2 * H:3 * H] = dc * i * (1.0 - c_hat ** 2)
            da[:, 3 * H:] = dh * tcs[t] * o * (1.0 - o)
            dc_next = dc * f
            dh_next = da @ w_hh.data.T
        if w_hh.requires_grad:
            hp = hs[:-1].reshape(-1, H)
            _accum(w_hh, hp.T @ dxw.reshape(-1, 4 * H))
        dxw_b = np.swapaxes(dxw, 0, 1)
        if w_ih.requires_grad:
            _accum(w_ih, x.data.reshape(-1, D).T @ dxw_b.reshape(-1, 4 * H))
        _accum(b, dxw.reshape(-1, 4 * H).sum(axis=0))
        if x.requires_grad:
            _accum(x, dxw_b @ w_ih.data.T)
    return _result(out, (x, w_ih, w_hh, b), bw, "lstm")


# --- graphs ----------------------------------------------------------------------------

class Graph:
    """A computation over named inputs with a set of named parameter leaves.

    ``fn`` receives a dict of input tensors and returns either one tensor or a
    dict of named output tensors. ``nodes`` holds the topologically ordered
    primitive applications recorded by the most recent :func:`forward`.
    """

    def __init__(self, fn: Callable[[dict[str, Tensor]], Tensor | dict[str, Tensor]],
                 parameters: dict[str, Tensor] | None = None, inputs: Sequence[str] = ()):
        self.fn = fn
        self.parameters = dict(parameters or {})
        self.input_names = tuple(inputs)
        self.nodes: list[Tensor] = []


def forward(graph: Graph, inputs: dict) -> dict[str, Tensor]:
    missing = [name for name in graph.input_names if name not in inputs]
    if missing:
        raise UnboundInput(f"unbound graph inputs: {', '.join(missing)}")
    bound = {k: _as_tensor(v) for k, v in inputs.items()}
    out = graph.fn(bound)
    if isinstance(out, Tensor):
        out = {"output": out}
    graph.nodes = _topo_order(out.values())
    return out


def backward(graph: Graph, loss: Tensor) -> dict[str, np.ndarray]:
    if loss.size != 1:
        raise NotScalarLoss(f"loss must be scalar, got shape {loss.shape}")
    for p in graph.parameters.values():
        p.grad = None
    loss.backward()
    return {name: (p.grad if p.grad is not None else np.zeros_like(p.data))
            for name, p in graph.parameters.items()}


def grad_check(graph: Graph, inputs: dict, eps: float = 1e-5, *, max_elements: int | None = None,
               rng: np.random.Generator | None = None, floor: float = 1e-6,
               stats: dict | None = None) -> float:
    """Max elementwise relative error between analytic and central-difference gradients.

    Non-scalar outputs are reduced with a fixed random projection. Elements
    whose +/-eps stencil crosses a kink of a piecewise-linear primitive (the
    recorded activation pattern changes) are skipped; ``stats`` receives the
    checked/skipped counts.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    first = forward(graph, inputs)
    projections = {k: rng.standard_normal(v.shape) / np.sqrt(v.size) for k, v in first.items()}

    def objective() -> tuple[Tensor, list]:
        with trace_kinks() as kinks:
            out = forward(graph, inputs)
            total = None
            for k, v in out.items():
                term = sum_(mul(v, projections[k]))
                total = term if total is None else add(total, term)
        return total, kinks

    loss, base_kinks = objective()
    grads = backward(graph, loss)
    elements = [(name, i) for name, p in graph.parameters.items() for i in range(p.size)]
    if max_elements is not None and len(elements) > max_elements:
        pick = rng.choice(len(elements), size=max_elements, replace=False)
        elements = [elements[j] for j in sorted(pick)]
    worst, checked, skipped = 0.0, 0, 0
    with no_grad():
        for name, i in elements:
            p = graph.parameters[name]
            flat = p.data.reshape(-1)
            orig = flat[i]
            flat[i] = orig + eps
            f_plus, k_plus = objective()
            flat[i] = orig - eps
            f_minus, k_minus = objective()
            flat[i] = orig
            if k_plus != base_kinks or k_minus != base_kinks:
                skipped += 1
                continue
            numeric = (f_plus.data.item() - f_minus.data.item()) / (2.0 * eps)
            analytic = grads[name].reshape(-1)[i]
            err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
            worst = max(worst, err)
            checked += 1
    if stats is not None:
        stats["checked"] = stats.get("checked", 0) + checked
        stats["skipped"] = stats.get("skipped", 0) + skipped
    return worst
