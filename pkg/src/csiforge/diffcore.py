"""Reverse-mode automatic differentiation over dense float64 arrays.

Tensors wrap numpy arrays. While a Graph is active, every primitive op
records itself on the graph's tape; backward_grad replays the tape in
reverse. Complex quantities are carried as a trailing real/imag axis,
there is no complex differentiation.
"""

import threading

import numpy as np

__all__ = [
    "DiffError", "Tensor", "Graph", "forward_eval", "backward_grad",
    "stop_gradient", "custom_op", "gradcheck",
]


class DiffError(RuntimeError):
    """Malformed input to a primitive; the message names the offending op."""


class Tensor:
    """Dense float64 array plus autodiff bookkeeping."""

    __slots__ = ("data", "grad", "requires_grad", "_tracked")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._tracked = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # operator sugar; scalars and arrays are lifted to constant tensors
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("op", "inputs", "out", "backward")

    def __init__(self, op, inputs, out, backward):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.backward = backward


class Graph:
    """One traced forward pass of a tensor program.

    ``Graph(fn)`` wraps a callable over Tensors; ``forward_eval`` runs it
    while recording every primitive in execution (topological) order.
    """

    def __init__(self, fn=None):
        self.fn = fn
        self._nodes = []
        self._params = {}  # id -> Tensor, requires_grad inputs seen on tape

    def __len__(self):
        return len(self._nodes)


# one recording stack per thread: distinct graph instances may evaluate
# concurrently over shared read-only parameters
_LOCAL = threading.local()


def _graph_stack():
    stack = getattr(_LOCAL, "stack", None)
    if stack is None:
        stack = []
        _LOCAL.stack = stack
    return stack


def _active_graph():
    stack = _graph_stack()
    return stack[-1] if stack else None


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op, out_data, inputs, backward):
    """Create the output tensor and, if a live input is present, tape the op."""
    out = Tensor(out_data)
    graph = _active_graph()
    if graph is not None:
        live = False
        for t in inputs:
            if t.requires_grad:
                graph._params[id(t)] = t
                live = True
            elif t._tracked:
                live = True
        if live:
            out._tracked = True
            graph._nodes.append(_Node(op, inputs, out, backward))
    return out


def custom_op(name, out_data, inputs, backward):
    """Record a user-defined primitive.

    ``backward(out_grad)`` must return one gradient array (or None) per
    input, in order.
    """
    inputs = tuple(_as_tensor(t) for t in inputs)
    return _record(name, out_data, inputs, backward)


def forward_eval(graph, inputs):
    """Run the graph's program on ``inputs``, recording the tape."""
    graph._nodes.clear()
    graph._params.clear()
    stack = _graph_stack()
    stack.append(graph)
    try:
        return graph.fn(*inputs)
    finally:
        stack.pop()


def backward_grad(graph, loss):
    """Accumulate d(loss)/d(param) for every requires_grad tensor on the tape.

    Populates ``.grad`` and returns a dict keyed by the parameter tensors.
    Parameters reachable only through stop_gradient receive exact zeros.
    """
    if loss.size != 1:
        raise DiffError(f"backward_grad: loss must be scalar, got shape {loss.shape}")
    if not loss._tracked:
        raise DiffError("backward_grad: loss is not connected to any tracked parameter")
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph._nodes):
        gout = grads.pop(id(node.out), None)
        if gout is None:
            continue
        gins = node.backward(gout)
        for t, g in zip(node.inputs, gins):
            if g is None or not (t.requires_grad or t._tracked):
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = np.asarray(g, dtype=np.float64)
    result = {}
    for key, t in graph._params.items():
        g = grads.get(key)
        if g is None:
            g = np.zeros_like(t.data)
        t.grad = g
        result[t] = g
    return result


def stop_gradient(x):
    """Forward identity whose backward contributes exactly zero."""
    x = _as_tensor(x)
    out = Tensor(x.data)
    graph = _active_graph()
    if graph is not None and (x.requires_grad or x._tracked):
        if x.requires_grad:
            graph._params[id(x)] = x
        # taped only so the parameter is registered; output stays untracked
        graph._nodes.append(_Node("stop_gradient", (x,), out, lambda g: (None,)))
    return out


# ---------------------------------------------------------------------------
# primitives

def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _binary(op, a, b, fwd, bwd):
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = fwd(a.data, b.data)
    except ValueError as exc:
        raise DiffError(f"{op}: {exc}") from exc
    return _record(op, out, (a, b), lambda g: bwd(g, a.data, b.data))


def add(a, b):
    return _binary(
        "add", a, b, np.add,
        lambda g, x, y: (_unbroadcast(g, x.shape), _unbroadcast(g, y.shape)))


def sub(a, b):
    return _binary(
        "sub", a, b, np.subtract,
        lambda g, x, y: (_unbroadcast(g, x.shape), _unbroadcast(-g, y.shape)))


def mul(a, b):
    return _binary(
        "mul", a, b, np.multiply,
        lambda g, x, y: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)))


def div(a, b):
    return _binary(
        "div", a, b, np.divide,
        lambda g, x, y: (_unbroadcast(g / y, x.shape),
                         _unbroadcast(-g * x / (y * y), y.shape)))


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DiffError(f"matmul: operands must be >=2-D, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DiffError(f"matmul: inner dims disagree, {a.shape} @ {b.shape}")

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    try:
        out = a.data @ b.data
    except ValueError as exc:
        raise DiffError(f"matmul: {exc}") from exc
    return _record("matmul", out, (a, b), backward)


def linear(x, w, b):
    """Fused x @ w + b for (..., k) inputs, (k, n) weight, (n,) bias."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if x.ndim < 2 or w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise DiffError(f"linear: shapes {x.shape} @ {w.shape}")

    def backward(g):
        gx = g @ w.data.T
        batch = tuple(range(g.ndim - 2))
        gw = np.tensordot(x.data, g, axes=(batch + (g.ndim - 2,),
                                           batch + (g.ndim - 2,)))
        gb = g.sum(axis=tuple(range(g.ndim - 1)))
        return gx, gw, gb

    return _record("linear", x.data @ w.data + b.data, (x, w, b), backward)


def _unary(op, x, fwd, bwd):
    x = _as_tensor(x)
    out = fwd(x.data)
    return _record(op, out, (x,), lambda g: bwd(g, x.data, out))


def tanh(x):
    return _unary("tanh", x, np.tanh, lambda g, x_, y: (g * (1.0 - y * y),))


def relu(x):
    return _unary("relu", x, lambda v: np.maximum(v, 0.0),
                  lambda g, x_, y: (g * (x_ > 0.0),))


def sign(x):
    # comparator with sign(0) = +1; non-differentiable, backward is zero
    return _unary("sign", x, lambda v: np.where(v >= 0.0, 1.0, -1.0),
                  lambda g, x_, y: (np.zeros_like(x_),))


def exp(x):
    return _unary("exp", x, np.exp, lambda g, x_, y: (g * y,))


def log(x):
    return _unary("log", x, np.log, lambda g, x_, y: (g / x_,))


def sqrt(x):
    return _unary("sqrt", x, np.sqrt, lambda g, x_, y: (g * 0.5 / y,))


def reshape(x, shape):
    x = _as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DiffError(f"reshape: {exc}") from exc
    return _record("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes):
    x = _as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record("transpose", x.data.transpose(axes), (x,),
                   lambda g: (g.transpose(inv),))


def concat(tensors, axis):
    tensors = tuple(_as_tensor(t) for t in tensors)
    if not tensors:
        raise DiffError("concat: empty input sequence")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DiffError(f"concat: {exc}") from exc
    return _record("concat", out, tensors, backward)


def pad(x, pads):
    """Zero-pad; ``pads`` is a (before, after) pair per axis."""
    x = _as_tensor(x)
    pads = tuple((int(b), int(a)) for b, a in pads)
    if len(pads) != x.ndim:
        raise DiffError(f"pad: need {x.ndim} pad pairs, got {len(pads)}")
    slices = tuple(slice(b, b + s) for (b, _), s in zip(pads, x.shape))
    return _record("pad", np.pad(x.data, pads), (x,), lambda g: (g[slices],))


def crop(x, slices):
    """Basic slicing; backward scatters into zeros."""
    x = _as_tensor(x)
    slices = tuple(slices)

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[slices] = g
        return (gx,)

    return _record("crop", x.data[slices], (x,), backward)


def take(x, indices, axis=0):
    """Gather along ``axis`` (integer index array); backward scatter-adds."""
    x = _as_tensor(x)
    if axis != 0:
        raise DiffError("take: only axis=0 is supported")
    indices = np.asarray(indices, dtype=np.intp)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, indices, g)
        return (gx,)

    return _record("take", x.data[indices], (x,), backward)


def roll(x, shifts, axes):
    x = _as_tensor(x)
    shifts = tuple(int(s) for s in np.atleast_1d(shifts))
    axes = tuple(int(a) for a in np.atleast_1d(axes))
    neg = tuple(-s for s in shifts)
    return _record("roll", np.roll(x.data, shifts, axes), (x,),
                   lambda g: (np.roll(g, neg, axes),))


def cumsum(x, axis):
    x = _as_tensor(x)

    def backward(g):
        rev = np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis)
        return (rev,)

    return _record("cumsum", np.cumsum(x.data, axis=axis), (x,), backward)


def _reduce(op, x, axis, keepdims, fwd, scale):
    x = _as_tensor(x)
    out = fwd(x.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            gx = np.broadcast_to(g, x.shape)
        elif keepdims:
            gx = np.broadcast_to(g, x.shape)
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            axes = tuple(a % x.ndim for a in axes)
            shape = tuple(1 if i in axes else s for i, s in enumerate(x.shape))
            gx = np.broadcast_to(g.reshape(shape), x.shape)
        return (gx * scale,)

    return _record(op, out, (x,), backward)


def tsum(x, axis=None, keepdims=False):
    return _reduce("sum", x, axis, keepdims, np.sum, 1.0)


def tmean(x, axis=None, keepdims=False):
    x_t = _as_tensor(x)
    if axis is None:
        count = x_t.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([x_t.shape[a] for a in axes]))
    return _reduce("mean", x_t, axis, keepdims, np.mean, 1.0 / count)


def softmax(x, axis=-1, mask=None):
    """Softmax along ``axis``; optional boolean mask marks valid entries.

    Rows with no valid entry come out as all zeros (they must correspond to
    padding and be discarded by the caller).
    """
    x = _as_tensor(x)
    if mask is None:
        shifted = x.data - x.data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        s = e.sum(axis=axis, keepdims=True)
        y = e / s
    else:
        mask = np.asarray(mask, dtype=bool)
        xm = x.data + np.where(mask, 0.0, -1e30)
        e = np.exp(xm - xm.max(axis=axis, keepdims=True))
        e = e * mask  # fully-masked rows become exact zeros
        s = e.sum(axis=axis, keepdims=True)
        y = e / np.where(s == 0.0, 1.0, s)

    def backward(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _record("softmax", y, (x,), backward)


def layernorm(x, axis=-1, eps=1e-6):
    """Normalize to zero mean / unit variance along ``axis`` (no affine)."""
    x = _as_tensor(x)
    mu = x.data.mean(axis=axis, keepdims=True)
    var = x.data.var(axis=axis, keepdims=True)
    sigma = np.sqrt(var + eps)
    y = (x.data - mu) / sigma

    def backward(g):
        gm = g.mean(axis=axis, keepdims=True)
        gy = (g * y).mean(axis=axis, keepdims=True)
        return ((g - gm - y * gy) / sigma,)

    return _record("layernorm", y, (x,), backward)


def layernorm_affine(x, gain, bias, eps=1e-6):
    """Fused last-axis normalization with learnable gain and bias."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    sigma = np.sqrt(var + eps)
    norm = (x.data - mu) / sigma

    def backward(g):
        batch = tuple(range(g.ndim - 1))
        g_gain = (g * norm).sum(axis=batch)
        g_bias = g.sum(axis=batch)
        gn = g * gain.data
        gm = gn.mean(axis=-1, keepdims=True)
        gy = (gn * norm).mean(axis=-1, keepdims=True)
        return ((gn - gm - norm * gy) / sigma, g_gain, g_bias)

    return _record("layernorm_affine", norm * gain.data + bias.data,
                   (x, gain, bias), backward)


# ---------------------------------------------------------------------------
# verification helper

def gradcheck(fn, inputs, eps=1e-5, rtol=1e-4, atol=1e-10):
    """Central finite-difference check of d fn / d inputs.

    ``fn`` maps the given Tensors to a scalar Tensor. Returns the worst
    relative error over all input elements.
    """
    params = [Tensor(np.array(t.data, copy=True), requires_grad=True) for t in inputs]
    graph = Graph(fn)
    loss = forward_eval(graph, params)
    backward_grad(graph, loss)
    worst = 0.0
    for p in params:
        flat = p.data.reshape(-1)
        gflat = p.grad.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + eps
            hi = float(forward_eval(Graph(fn), params).data)
            flat[i] = keep - eps
            lo = float(forward_eval(Graph(fn), params).data)
            flat[i] = keep
            fd = (hi - lo) / (2.0 * eps)
            err = abs(gflat[i] - fd) / max(abs(fd), abs(gflat[i]), atol / rtol)
            worst = max(worst, err)
    return worst
