"""Dense float64 tensors with reverse-mode automatic differentiation.

The graph is a dynamic tape: every operation records its parents and a
closure that routes the upstream gradient to them. Graphs are rebuilt on
each forward pass; `Tensor.backward` walks the tape once in reverse
topological order. Everything is float64 so gradient checks and cross-run
determinism are unambiguous.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from .errors import ConfigError

# Test hooks: names added here deliberately corrupt the matching backward
# rule (used by the self-test fault-injection check).
_fault_hooks: set[str] = set()

# When active (via count_macs), conv2d adds its multiply-accumulate count.
_mac_counter: list | None = None


@contextmanager
def count_macs():
    """Count conv2d multiply-accumulates executed inside the block."""
    global _mac_counter
    saved = _mac_counter
    _mac_counter = box = [0]
    try:
        yield box
    finally:
        _mac_counter = saved


class Tensor:
    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._grad_owned = False  # True when .grad is a buffer we allocated
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- autodiff machinery -------------------------------------------------

    def backward(self):
        """Populate .grad on every reachable requires_grad tensor.

        Gradients accumulate additively across multiple uses of a tensor.
        """
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar loss tensor")
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
        _accum(self, np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, -_as_tensor(other))

    def __rsub__(self, other):
        return add(_as_tensor(other), -self)

    def __truediv__(self, other):
        return div(self, other)

    def __pow__(self, n):
        return power(self, n)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        n = self.data.size if axis is None else self.data.shape[axis]
        return tsum(self, axis) * (1.0 / n)

    def reshape(self, shape):
        return reshape(self, shape)

    def item(self):
        return float(self.data.reshape(()))


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _accum(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g
        t._grad_owned = False
    elif t._grad_owned:
        t.grad += g
    else:
        t.grad = t.grad + g
        t._grad_owned = True


def _own_grad_buffer(t):
    """Grad buffer safe for in-place scatter accumulation."""
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
        t._grad_owned = True
    elif not t._grad_owned:
        t.grad = t.grad.copy()
        t._grad_owned = True
    return t.grad


def _from_op(data, parents, backward):
    """Build an op result; `backward(g)` must _accum into the parents."""
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    """Reduce gradient g back to `shape` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise / reduction ops -------------------------------------------


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _from_op(a.data + b.data, (a, b), backward)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _from_op(a.data * b.data, (a, b), backward)


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g):
        _accum(a, _unbroadcast(g / b.data, a.data.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _from_op(a.data / b.data, (a, b), backward)


def power(a, n):
    a = _as_tensor(a)
    n = float(n)

    def backward(g):
        _accum(a, g * n * a.data ** (n - 1.0))

    return _from_op(a.data**n, (a,), backward)


def exp(a):
    a = _as_tensor(a)
    out_data = np.exp(a.data)

    def backward(g):
        _accum(a, g * out_data)

    return _from_op(out_data, (a,), backward)


def log(a):
    a = _as_tensor(a)

    def backward(g):
        _accum(a, g / a.data)

    return _from_op(np.log(a.data), (a,), backward)


def xlogx(a):
    """Elementwise x*ln(x) with the convention 0*ln(0) = 0."""
    a = _as_tensor(a)
    pos = a.data > 0.0
    out_data = np.where(pos, a.data * np.log(np.where(pos, a.data, 1.0)), 0.0)

    def backward(g):
        _accum(a, g * np.where(pos, np.log(np.where(pos, a.data, 1.0)) + 1.0, 0.0))

    return _from_op(out_data, (a,), backward)


def relu(a):
    """Elementwise max(0, x); subgradient at 0 is 0."""
    a = _as_tensor(a)
    mask = a.data > 0.0

    def backward(g):
        _accum(a, g * mask)

    return _from_op(np.where(mask, a.data, 0.0), (a,), backward)


def tsum(a, axis=None):
    a = _as_tensor(a)

    def backward(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.data.shape).copy())
        else:
            _accum(a, np.broadcast_to(np.expand_dims(g, axis), a.data.shape).copy())

    return _from_op(a.data.sum(axis=axis), (a,), backward)


def reshape(a, shape):
    a = _as_tensor(a)

    def backward(g):
        _accum(a, g.reshape(a.data.shape))

    return _from_op(a.data.reshape(shape), (a,), backward)


def getitem(a, idx):
    """Basic slice/int indexing. For integer-array row selection use take_rows."""
    a = _as_tensor(a)

    def backward(g):
        if a.requires_grad:
            _own_grad_buffer(a)[idx] += g

    return _from_op(a.data[idx], (a,), backward)


def take_rows(a, rows):
    """Select rows along axis 0 by an integer index list (duplicates allowed)."""
    a = _as_tensor(a)
    rows = np.asarray(rows, dtype=np.intp)

    def backward(g):
        if a.requires_grad:
            np.add.at(_own_grad_buffer(a), rows, g)

    return _from_op(a.data[rows], (a,), backward)


def scatter_rows(update, rows, n_rows):
    """Place update[i] at row rows[i] of a zero tensor with n_rows rows."""
    update = _as_tensor(update)
    rows = np.asarray(rows, dtype=np.intp)
    out_data = np.zeros((n_rows,) + update.data.shape[1:])
    np.add.at(out_data, rows, update.data)

    def backward(g):
        _accum(update, g[rows])

    return _from_op(out_data, (update,), backward)


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accum(t, g[tuple(sl)])

    return _from_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def softmax(a, axis=-1):
    """Numerically stable softmax (max-subtraction) along `axis`."""
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        _accum(a, s * (g - (g * s).sum(axis=axis, keepdims=True)))

    return _from_op(s, (a,), backward)


# -- spatial ops ------------------------------------------------------------


def pad2d(a, top, bottom, left, right):
    """Zero-pad the last two axes by the given per-side amounts."""
    a = _as_tensor(a)
    if not (top or bottom or left or right):
        return a
    pad = [(0, 0)] * (a.data.ndim - 2) + [(top, bottom), (left, right)]

    def backward(g):
        sl = (Ellipsis, slice(top, g.shape[-2] - bottom),
              slice(left, g.shape[-1] - right))
        _accum(a, g[sl])

    return _from_op(np.pad(a.data, pad), (a,), backward)


def zero_pad2d(a, p):
    """Zero-pad the last two axes by p on every side."""
    return pad2d(a, p, p, p, p)


def upsample_nearest2(a):
    """Nearest-neighbor 2x upsampling of a [N, C, H, W] tensor."""
    a = _as_tensor(a)
    n, c, h, w = a.data.shape

    def backward(g):
        _accum(a, g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)))

    return _from_op(np.repeat(np.repeat(a.data, 2, axis=2), 2, axis=3), (a,), backward)


def global_avg_pool(a):
    """Spatial mean per channel: [N, C, H, W] -> [N, C, 1, 1]."""
    a = _as_tensor(a)
    n, c, h, w = a.data.shape
    if h < 1 or w < 1:
        raise ConfigError("global_avg_pool needs H, W >= 1")

    def backward(g):
        _accum(a, np.broadcast_to(g / (h * w), a.data.shape).copy())

    return _from_op(a.data.mean(axis=(2, 3), keepdims=True), (a,), backward)


def _im2col(xdata, kh, kw, stride, ph, pw):
    """Lower [N, C, H, W] to [N, C*kh*kw, Ho*Wo] columns (feature-major).

    Copies one contiguous [Ho, Wo] block per (sample, channel, offset), so
    no transposed gather is needed; a 1x1 stride-1 kernel is a pure view.
    """
    n, c, h, w = xdata.shape
    ho = (h + 2 * ph - kh) // stride + 1
    wo = (w + 2 * pw - kw) // stride + 1
    if ph or pw:
        xdata = np.pad(xdata, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    if kh == kw == 1 and stride == 1:
        return xdata.reshape(n, c, ho * wo), ho, wo
    cols = np.empty((n, c, kh, kw, ho, wo))
    for u in range(kh):
        for v in range(kw):
            cols[:, :, u, v] = xdata[
                :, :, u : u + stride * ho : stride, v : v + stride * wo : stride
            ]
    return cols.reshape(n, c * kh * kw, ho * wo), ho, wo


def _lower_w(xdata, kw, ph, pw):
    """Width-only lowering: [N, C, H, W] -> [N, C*kw, (H+2ph)*Wo] columns.

    Only kw horizontally shifted copies are made (versus kh*kw for a full
    im2col); the kernel's vertical extent is handled by summing row-shifted
    slices of the matmul result. A 1x1 kernel is a pure view.
    """
    n, c, h, w = xdata.shape
    wo = w + 2 * pw - kw + 1
    if ph or pw:
        xdata = np.pad(xdata, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    hp = h + 2 * ph
    if kw == 1:
        return xdata.reshape(n, c, hp * wo)
    cols = np.empty((n, c, kw, hp, wo))
    for v in range(kw):
        cols[:, :, v] = xdata[:, :, :, v : v + wo]
    return cols.reshape(n, c * kw, hp * wo)


def _conv_s1(xdata, wdata, ph, pw):
    """Stride-1 correlation on raw arrays.

    Returns (out [N, C_out, Ho, Wo], columns, Wo); the columns are reusable
    for the weight gradient. out[i, j] = sum_u M_u[i + u, j] where M_u is the
    width-lowered matmul with kernel row u, so each summand is a contiguous
    slice of M.
    """
    n, c_in, h, w = xdata.shape
    c_out, _, kh, kw = wdata.shape
    ho = h + 2 * ph - kh + 1
    wo = w + 2 * pw - kw + 1
    cols = _lower_w(xdata, kw, ph, pw)
    ww = wdata.transpose(2, 0, 1, 3).reshape(kh, c_out, c_in * kw)
    m = np.matmul(ww[:, None], cols[None])  # [kh, N, C_out, Hp*Wo]
    size = ho * wo
    out = m[0, :, :, :size]
    if kh > 1:
        out = out.copy()
        for u in range(1, kh):
            out += m[u, :, :, u * wo : u * wo + size]
    return out.reshape(n, c_out, ho, wo), cols, wo


def conv2d(x, weight, bias, stride=1, padding=0):
    """Direct 2-D convolution (cross-correlation) via im2col + matmul.

    x: [N, C_in, H, W], weight: [C_out, C_in, kh, kw], bias: [C_out].
    Output spatial dims (H + 2*padding - kh) / stride + 1 must be positive
    integers. Differentiable w.r.t. x, weight and bias.
    """
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ConfigError("conv2d expects 4-D input and weight")
    n, c_in, h, w = x.data.shape
    c_out, c_in_w, kh, kw = weight.data.shape
    if c_in != c_in_w:
        raise ConfigError(f"conv2d channel mismatch: input {c_in}, weight {c_in_w}")
    if bias.data.shape != (c_out,):
        raise ConfigError("conv2d bias must have shape [C_out]")
    dh, dw = h + 2 * padding - kh, w + 2 * padding - kw
    if dh < 0 or dw < 0 or dh % stride or dw % stride:
        raise ConfigError(
            f"conv2d output dims not positive integers for input {h}x{w}, "
            f"kernel {kh}x{kw}, stride {stride}, padding {padding}"
        )
    ho, wo = dh // stride + 1, dw // stride + 1

    if _mac_counter is not None:
        _mac_counter[0] += n * ho * wo * c_out * c_in * kh * kw

    if stride == 1 and padding < kh and padding < kw:
        out, cols, _ = _conv_s1(x.data, weight.data, padding, padding)
        out = out + bias.data[:, None, None]

        def backward(g):
            go = np.ascontiguousarray(g).reshape(n, c_out, ho * wo)
            gw = np.empty((kh, c_out, c_in * kw))
            for u in range(kh):
                gw[u] = np.matmul(
                    go, cols[:, :, u * wo : u * wo + ho * wo].transpose(0, 2, 1)
                ).sum(axis=0)
            gw = gw.reshape(kh, c_out, c_in, kw).transpose(1, 2, 0, 3)
            if "conv-backward" in _fault_hooks:
                gw = gw * 1.001  # deliberate 0.1% relative corruption
            _accum(weight, gw)
            _accum(bias, g.sum(axis=(0, 2, 3)))
            if x.requires_grad:
                # Full correlation of the output gradient with the spatially
                # flipped, channel-transposed kernel is another stride-1 conv.
                wf = weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
                gx, _, _ = _conv_s1(
                    go.reshape(n, c_out, ho, wo), wf, kh - 1 - padding, kw - 1 - padding
                )
                _accum(x, gx)

        return _from_op(out, (x, weight, bias), backward)

    cols, _, _ = _im2col(x.data, kh, kw, stride, padding, padding)
    wmat = weight.data.reshape(c_out, -1)
    out = np.matmul(wmat, cols) + bias.data[:, None]
    out = out.reshape(n, c_out, ho, wo)

    def backward(g):
        go = np.ascontiguousarray(g).reshape(n, c_out, ho * wo)
        gw = np.matmul(go, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.data.shape)
        if "conv-backward" in _fault_hooks:
            gw = gw * 1.001  # deliberate 0.1% relative corruption
        _accum(weight, gw)
        _accum(bias, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gcols = np.matmul(wmat.T, go).reshape(n, c_in, kh, kw, ho, wo)
            gpad = np.zeros((n, c_in, h + 2 * padding, w + 2 * padding))
            for i in range(kh):
                for j in range(kw):
                    gpad[
                        :, :, i : i + stride * ho : stride, j : j + stride * wo : stride
                    ] += gcols[:, :, i, j]
            if padding:
                gpad = gpad[:, :, padding : padding + h, padding : padding + w]
            _accum(x, gpad)

    return _from_op(out, (x, weight, bias), backward)


# -- parameters and the optimizer -------------------------------------------


class Parameter(Tensor):
    """Trainable tensor with an SGD momentum buffer.

    The gradient buffer is kept allocated (zeros) so that parameters left
    untouched by a backward pass carry an exact zero gradient.
    """

    def __init__(self, data):
        super().__init__(data, requires_grad=True)
        self.grad = np.zeros_like(self.data)
        self._grad_owned = True
        self.momentum = np.zeros_like(self.data)


def sgd_step(params, lr, momentum=0.0):
    """v <- momentum*v + grad; w <- w - lr*v; then zero the grads."""
    params = list(params)
    for p in params:
        if p.grad is None:
            raise ValueError("sgd_step: parameter has no gradient")
    for p in params:
        p.momentum = momentum * p.momentum + p.grad
        p.data -= lr * p.momentum
        p.grad = np.zeros_like(p.data)
        p._grad_owned = True


def zero_grads(params):
    for p in params:
        p.grad = np.zeros_like(p.data)
        p._grad_owned = True
