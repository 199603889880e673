"""Reverse-mode automatic differentiation on numpy arrays.

The engine is deliberately small: a `Tensor` wraps a float32 (or float64,
for high-precision gradient checking) numpy array and remembers the nodes
that produced it plus a closure that pushes an upstream gradient to its
parents. `backward()` replays those closures in exact reverse execution
order, visiting every reachable node once.

Only the operations needed by the segmentation networks and their losses
are provided. All forward math keeps finite inputs finite: sigmoid and
softplus use the numerically stable branch-on-sign forms.
"""

from __future__ import annotations

import itertools
import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DomainError, ShapeError

_node_counter = itertools.count()


class Tensor:
    """N-dimensional float array with an optional gradient buffer.

    `grad` is lazily allocated by `backward()` and accumulates across
    calls until `zero_grad()` resets it.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_seq")

    def __init__(self, data, requires_grad=False, dtype=np.float32):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(dtype)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._seq = next(_node_counter)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self):
        """Populate `grad` of every leaf tensor this scalar depends on.

        Leaf gradients accumulate across calls until `zero_grad()`;
        intermediate gradients are consumed during the traversal, so a
        second backward over the same graph reproduces the same leaf
        grads once the leaves are zeroed.
        """
        if self.data.size != 1:
            raise ContractError(
                f"backward requires a scalar loss, got shape {self.data.shape}"
            )
        nodes = []
        seen = set()
        stack = [self]
        while stack:
            node = stack.pop()
            if id(node) in seen:
                continue
            seen.add(id(node))
            if node.requires_grad:
                nodes.append(node)
                stack.extend(node._parents)
        # Reverse execution order: every consumer fires before its producer.
        nodes.sort(key=lambda n: n._seq, reverse=True)
        self._accum(np.ones_like(self.data))
        for node in nodes:
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                node.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _wrap(data, parents, backward):
    out = Tensor(data)
    out.data = data  # keep dtype chosen by the op
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def as_tensor(x, like=None):
    """Promote a python scalar / ndarray to a constant Tensor."""
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else np.float32
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g, shape):
    # Sum out axes that numpy broadcasting expanded.
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b):
    a, b = as_tensor(a), as_tensor(b, like=a)
    out = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.data.shape))

    return _wrap(out, (a, b), backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b, like=a)
    out = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g, b.data.shape))

    return _wrap(out, (a, b), backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b, like=a)
    out = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.data.shape))

    return _wrap(out, (a, b), backward)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b, like=a)
    out = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _wrap(out, (a, b), backward)


def neg(a):
    def backward(g):
        a._accum(-g)

    return _wrap(-a.data, (a,), backward)


def log(a):
    if np.any(a.data <= 0.0):
        raise DomainError("log requires strictly positive inputs")
    out = np.log(a.data)

    def backward(g):
        a._accum(g / a.data)

    return _wrap(out, (a,), backward)


def relu(a):
    out = np.maximum(a.data, 0.0)

    def backward(g):
        # Subgradient 0 at exactly 0.
        a._accum(g * (a.data > 0.0))

    return _wrap(out, (a,), backward)


def _sigmoid_np(x):
    # Stable form: t = exp(-|x|) is in (0, 1], so nothing overflows. The
    # magnitude clip keeps t a normal float (denormals stall the FPU) at
    # an error far below float32 resolution.
    t = np.exp(-np.minimum(np.abs(x), 30.0))
    out = 1.0 / (1.0 + t)
    neg = x < 0
    out[neg] = 1.0 - out[neg]
    return out


def _softplus_np(x):
    # log(1 + e^x) = max(x, 0) + log1p(e^{-|x|})
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.minimum(np.abs(x), 30.0)))


def sigmoid(a):
    out = _sigmoid_np(a.data)

    def backward(g):
        a._accum(g * out * (1.0 - out))

    return _wrap(out, (a,), backward)


def softplus(a):
    out = _softplus_np(a.data)

    def backward(g):
        a._accum(g * _sigmoid_np(a.data))

    return _wrap(out, (a,), backward)


def mean(a):
    """Mean over all elements, returning a scalar tensor."""
    out = np.asarray(a.data.mean(), dtype=a.data.dtype)

    def backward(g):
        a._accum(np.broadcast_to(g / a.data.size, a.data.shape))

    return _wrap(out, (a,), backward)


def tensor_sum(a, axis=None):
    """Sum over `axis` (or everything), without keeping reduced dims."""
    out = a.data.sum(axis=axis)

    def backward(g):
        if axis is None:
            a._accum(np.broadcast_to(g, a.data.shape))
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            g_exp = np.expand_dims(g, axes)
            a._accum(np.broadcast_to(g_exp, a.data.shape))

    return _wrap(np.asarray(out, dtype=a.data.dtype), (a,), backward)


def concat_channels(a, b):
    """Concatenate two NCHW tensors along the channel axis."""
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ShapeError("concat_channels expects NCHW tensors")
    if a.data.shape[0] != b.data.shape[0] or a.data.shape[2:] != b.data.shape[2:]:
        raise ShapeError(
            f"concat_channels: incompatible shapes {a.data.shape} and {b.data.shape}"
        )
    out = np.concatenate([a.data, b.data], axis=1)
    ca = a.data.shape[1]

    def backward(g):
        if a.requires_grad:
            a._accum(g[:, :ca])
        if b.requires_grad:
            b._accum(g[:, ca:])

    return _wrap(out, (a, b), backward)


def _pad_nchw(x, p):
    if p == 0:
        return x
    n, c, h, w = x.shape
    xp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=x.dtype)
    xp[:, :, p : p + h, p : p + w] = x
    return xp


def _im2col(xp, kh, kw, stride, ho, wo):
    # (N, Cin*kh*kw, Ho*Wo) patch matrix; every slot assignment below is
    # a plain strided copy with no axis permutation.
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[
                :, :, i : i + stride * ho : stride, j : j + stride * wo : stride
            ]
    return cols.reshape(n, c * kh * kw, ho * wo)


def conv2d(x, kernel, bias, stride=1, padding=0):
    """2-D cross-correlation of an NCHW input with an OIHW kernel.

    Output spatial dims are floor((H + 2*padding - kh) / stride) + 1 (same
    for W). Differentiable w.r.t. input, kernel and bias. Both passes run
    as im2col plus batched GEMMs, which is what makes desk-scale training
    tractable on a single core.
    """
    if stride < 1:
        raise ShapeError(f"conv2d stride must be >= 1, got {stride}")
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError("conv2d expects a 4-D input and a 4-D kernel")
    n, cin, h, w = x.data.shape
    cout, kcin, kh, kw = kernel.data.shape
    if cin != kcin:
        raise ShapeError(
            f"conv2d: input has {cin} channels but kernel expects {kcin}"
        )
    if bias.data.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.data.shape} != ({cout},)")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError(
            f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}"
        )
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    pointwise = kh == 1 and kw == 1 and stride == 1 and padding == 0
    if pointwise:
        xp = x.data
        cols = x.data.reshape(n, cin, h * w)  # no patch copy needed
    else:
        xp = _pad_nchw(x.data, padding)
        cols = _im2col(xp, kh, kw, stride, ho, wo)  # (N, K, F)
    k2d = kernel.data.reshape(cout, cin * kh * kw)
    out = np.matmul(k2d[None], cols)  # (N, Cout, F)
    out += bias.data[None, :, None]
    out = out.reshape(n, cout, ho, wo)

    def backward(g):
        g3 = g.reshape(n, cout, ho * wo)
        if bias.requires_grad:
            bias._accum(g3.sum(axis=(0, 2)))
        if kernel.requires_grad:
            # Batched GEMM + reduce keeps BLAS on strided views and
            # avoids materializing a transposed copy of `cols`.
            gk = np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0)
            kernel._accum(gk.reshape(kernel.data.shape))
        if x.requires_grad:
            gcols = np.matmul(k2d.T[None], g3)  # (N, K, F)
            if pointwise:
                x._accum(gcols.reshape(n, cin, h, w))
            else:
                gcols = gcols.reshape(n, cin, kh, kw, ho, wo)
                gxp = np.zeros_like(xp)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i : i + stride * ho : stride,
                            j : j + stride * wo : stride] += gcols[:, :, i, j]
                if padding > 0:
                    gxp = gxp[:, :, padding : padding + h, padding : padding + w]
                x._accum(gxp)

    return _wrap(out, (x, kernel, bias), backward)


def maxpool2d(x, window=2):
    """2x2 max pooling with stride 2; gradient routes to the argmax.

    Ties break toward the first element in row-major window order, which
    keeps repeated backward passes bit-identical.
    """
    if window != 2:
        raise ShapeError("maxpool2d supports window=2 only")
    n, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2d requires even spatial dims, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    win = x.data.reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, h2, w2, 4)
    idx = win.argmax(axis=-1)  # first max wins, matching row-major order
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        onehot = idx[..., None] == np.arange(4)
        gwin = g[..., None] * onehot
        gx = gwin.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        x._accum(np.ascontiguousarray(gx.reshape(n, c, h, w)))

    return _wrap(np.ascontiguousarray(out), (x,), backward)


def upsample_nearest2d(x, factor=2):
    """Nearest-neighbour upsampling by an integer factor."""
    if factor < 1:
        raise ShapeError(f"upsample factor must be >= 1, got {factor}")
    n, c, h, w = x.data.shape
    out = x.data.repeat(factor, axis=2).repeat(factor, axis=3)

    def backward(g):
        gx = g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5))
        x._accum(gx)

    return _wrap(out, (x,), backward)


def to_nhwc(x):
    """Differentiable NCHW -> NHWC layout change."""
    out = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1))

    def backward(g):
        x._accum(np.ascontiguousarray(g.transpose(0, 3, 1, 2)))

    return _wrap(out, (x,), backward)


def to_nchw(x):
    """Differentiable NHWC -> NCHW layout change."""
    out = np.ascontiguousarray(x.data.transpose(0, 3, 1, 2))

    def backward(g):
        x._accum(np.ascontiguousarray(g.transpose(0, 2, 3, 1)))

    return _wrap(out, (x,), backward)


def _pad_nhwc(x, p):
    if p == 0:
        return x
    n, h, w, c = x.shape
    xp = np.zeros((n, h + 2 * p, w + 2 * p, c), dtype=x.dtype)
    xp[:, p : p + h, p : p + w, :] = x
    return xp


def conv2d_nhwc(x, kernel, bias, stride=1, padding=0):
    """conv2d on channel-last activations; the training hot path.

    Same contract as `conv2d` with the batch in NHWC order; the kernel
    stays OIHW so parameter vectors and checkpoints are layout-agnostic.
    Chooses between two GEMM plans: wide layers run one shifted
    pointwise GEMM per kernel tap (no patch matrix at all), narrow
    layers gather a patch matrix and run a single tall GEMM.
    """
    if stride < 1:
        raise ShapeError(f"conv2d stride must be >= 1, got {stride}")
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError("conv2d expects a 4-D input and a 4-D kernel")
    n, h, w, cin = x.data.shape
    cout, kcin, kh, kw = kernel.data.shape
    if cin != kcin:
        raise ShapeError(
            f"conv2d: input has {cin} channels but kernel expects {kcin}"
        )
    if bias.data.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.data.shape} != ({cout},)")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError(
            f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}"
        )
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    if cin * kh * kw <= 36:
        return _conv_nhwc_patch(x, kernel, bias, stride, padding,
                                n, h, w, cin, cout, kh, kw, hp, wp, ho, wo)
    return _conv_nhwc_shifted(x, kernel, bias, stride, padding,
                              n, h, w, cin, cout, kh, kw, hp, wp, ho, wo)


def _conv_nhwc_shifted(x, kernel, bias, stride, padding,
                       n, h, w, cin, cout, kh, kw, hp, wp, ho, wo):
    # All kernel taps stacked into one wide GEMM per pass; the per-tap
    # spatial shift happens on the padded grid with strided slices.
    xp = _pad_nhwc(x.data, padding)
    x2 = xp.reshape(-1, cin)
    kstk = np.ascontiguousarray(
        kernel.data.transpose(1, 2, 3, 0).reshape(cin, kh * kw * cout)
    )
    y6 = (x2 @ kstk).reshape(n, hp, wp, kh, kw, cout)
    out = np.empty((n, ho, wo, cout), dtype=x.data.dtype)
    out[:] = bias.data
    for i in range(kh):
        for j in range(kw):
            out += y6[:, i : i + stride * ho : stride,
                      j : j + stride * wo : stride, i, j, :]

    def backward(g):
        if bias.requires_grad:
            bias._accum(g.sum(axis=(0, 1, 2)))
        need_k = kernel.requires_grad
        need_x = x.requires_grad
        if not (need_k or need_x):
            return
        gbig = np.zeros((n, hp, wp, kh, kw, cout), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gbig[:, i : i + stride * ho : stride,
                     j : j + stride * wo : stride, i, j, :] = g
        g2 = gbig.reshape(-1, kh * kw * cout)
        if need_k:
            gk = (x2.T @ g2).reshape(cin, kh, kw, cout)
            kernel._accum(gk.transpose(3, 0, 1, 2))
        if need_x:
            gxp = (g2 @ kstk.T).reshape(n, hp, wp, cin)
            if padding > 0:
                gxp = gxp[:, padding : padding + h, padding : padding + w, :]
            x._accum(gxp)

    return _wrap(out, (x, kernel, bias), backward)


def _conv_nhwc_patch(x, kernel, bias, stride, padding,
                     n, h, w, cin, cout, kh, kw, hp, wp, ho, wo):
    xp = _pad_nhwc(x.data, padding)
    kk = cin * kh * kw
    if kh == 1 and kw == 1 and stride == 1:
        cols = xp.reshape(-1, cin)
    else:
        cols6 = np.empty((n, ho, wo, kh, kw, cin), dtype=x.data.dtype)
        for i in range(kh):
            for j in range(kw):
                cols6[:, :, :, i, j, :] = xp[
                    :, i : i + stride * ho : stride, j : j + stride * wo : stride, :
                ]
        cols = cols6.reshape(-1, kk)
    # kernel rows keyed (kh, kw, cin) to match the patch layout
    k2 = kernel.data.transpose(2, 3, 1, 0).reshape(kk, cout)
    out = (cols @ k2).reshape(n, ho, wo, cout)
    out += bias.data

    def backward(g):
        g2 = g.reshape(-1, cout)
        if bias.requires_grad:
            bias._accum(g2.sum(axis=0))
        if kernel.requires_grad:
            gk = (cols.T @ g2).reshape(kh, kw, cin, cout)
            kernel._accum(gk.transpose(3, 2, 0, 1))
        if x.requires_grad:
            gcols = g2 @ k2.T
            if kh == 1 and kw == 1 and stride == 1:
                x._accum(gcols.reshape(n, h, w, cin))
                return
            gcols6 = gcols.reshape(n, ho, wo, kh, kw, cin)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i : i + stride * ho : stride,
                        j : j + stride * wo : stride, :] += gcols6[:, :, :, i, j, :]
            if padding > 0:
                gxp = gxp[:, padding : padding + h, padding : padding + w, :]
            x._accum(gxp)

    return _wrap(out, (x, kernel, bias), backward)


def maxpool2d_nhwc(x, window=2):
    """2x2/stride-2 max pool on NHWC; first max in row-major window
    order wins ties, same rule as the NCHW variant."""
    if window != 2:
        raise ShapeError("maxpool2d supports window=2 only")
    n, h, w, c = x.data.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2d requires even spatial dims, got {h}x{w}")
    s00 = x.data[:, ::2, ::2, :]
    s01 = x.data[:, ::2, 1::2, :]
    s10 = x.data[:, 1::2, ::2, :]
    s11 = x.data[:, 1::2, 1::2, :]
    out = np.maximum(np.maximum(s00, s01), np.maximum(s10, s11))

    def backward(g):
        gx = np.zeros_like(x.data)
        taken = s00 == out
        gx[:, ::2, ::2, :] = g * taken
        m = (s01 == out) & ~taken
        gx[:, ::2, 1::2, :] = g * m
        taken |= m
        m = (s10 == out) & ~taken
        gx[:, 1::2, ::2, :] = g * m
        taken |= m
        gx[:, 1::2, 1::2, :] = g * ((s11 == out) & ~taken)
        x._accum(gx)

    return _wrap(np.ascontiguousarray(out), (x,), backward)


def upsample_nearest2d_nhwc(x, factor=2):
    if factor < 1:
        raise ShapeError(f"upsample factor must be >= 1, got {factor}")
    n, h, w, c = x.data.shape
    out = x.data.repeat(factor, axis=1).repeat(factor, axis=2)

    def backward(g):
        gx = g.reshape(n, h, factor, w, factor, c).sum(axis=(2, 4))
        x._accum(gx)

    return _wrap(out, (x,), backward)


def concat_channels_nhwc(a, b):
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ShapeError("concat_channels expects 4-D tensors")
    if a.data.shape[:3] != b.data.shape[:3]:
        raise ShapeError(
            f"concat_channels: incompatible shapes {a.data.shape} and {b.data.shape}"
        )
    out = np.concatenate([a.data, b.data], axis=3)
    ca = a.data.shape[3]

    def backward(g):
        if a.requires_grad:
            a._accum(g[..., :ca])
        if b.requires_grad:
            b._accum(g[..., ca:])

    return _wrap(out, (a, b), backward)


class AdamState:
    """First/second moment buffers plus the shared step counter."""

    def __init__(self):
        self.step = 0
        self.m = {}
        self.v = {}

    def buffers_for(self, name, shape, dtype):
        if name not in self.m:
            self.m[name] = np.zeros(shape, dtype=dtype)
            self.v[name] = np.zeros(shape, dtype=dtype)
        elif self.m[name].shape != tuple(shape):
            raise ContractError(
                f"Adam state for '{name}' has shape {self.m[name].shape}, "
                f"expected {tuple(shape)}"
            )
        return self.m[name], self.v[name]


def _adam_update(p, g, m, v, t, lr, beta1, beta2, eps):
    # Kingma-Ba update with bias correction; denominator is sqrt(v_hat)+eps.
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * (g * g)
    mhat = m / (1.0 - beta1**t)
    vhat = v / (1.0 - beta2**t)
    p -= lr * mhat / (np.sqrt(vhat) + eps)


class Adam:
    """Adam over a named, ordered mapping of parameter Tensors."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state = AdamState()

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self):
        self.state.step += 1
        t = self.state.step
        for name, p in self.params.items():
            if p.grad is None:
                continue
            m, v = self.state.buffers_for(name, p.data.shape, p.data.dtype)
            _adam_update(p.data, p.grad, m, v, t, self.lr, self.beta1, self.beta2, self.eps)


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update applied in place to a ParamVector.

    `params` and `grads` are ParamVector-like (iterables of entries with
    .name/.shape/.values); moment buffers live in `state`.
    """
    p_entries = list(params.entries)
    g_entries = list(grads.entries)
    if [e.name for e in p_entries] != [e.name for e in g_entries]:
        raise ContractError("adam_step: params and grads name mismatch")
    for pe, ge in zip(p_entries, g_entries):
        if pe.values.shape != ge.values.shape:
            raise ContractError(
                f"adam_step: shape mismatch for '{pe.name}': "
                f"{pe.values.shape} vs {ge.values.shape}"
            )
    state.step += 1
    for pe, ge in zip(p_entries, g_entries):
        m, v = state.buffers_for(pe.name, pe.values.shape, pe.values.dtype)
        _adam_update(pe.values, ge.values, m, v, state.step, lr, beta1, beta2, eps)


def gradient_check(build_loss, tensors, eps=1e-3):
    """Compare analytic gradients against central finite differences.

    `build_loss` maps the list of Tensors to a scalar loss Tensor; the
    check re-runs it with float64 copies so FD cancellation stays far
    below the 1e-3 tolerance. Returns the max relative error over all
    checked coordinates.
    """
    t64 = [Tensor(t.data.astype(np.float64), requires_grad=True) for t in tensors]
    loss = build_loss(t64)
    loss.backward()
    worst = 0.0
    for t in t64:
        flat = t.data.reshape(-1)
        gflat = t.grad.reshape(-1) if t.grad is not None else np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = float(build_loss(t64).data)
            flat[i] = orig - eps
            dn = float(build_loss(t64).data)
            flat[i] = orig
            fd = (up - dn) / (2.0 * eps)
            denom = max(abs(fd), abs(gflat[i]), 1.0)
            worst = max(worst, abs(fd - gflat[i]) / denom)
    return worst


def gradient_check_sampled(build_loss, tensors, n_points, rng, eps=1e-3):
    """Finite-difference check at randomly sampled coordinates.

    Cheaper variant of `gradient_check` for large parameter sets: picks
    `n_points` coordinates uniformly across all tensors.
    """
    t64 = [Tensor(t.data.astype(np.float64), requires_grad=True) for t in tensors]
    loss = build_loss(t64)
    loss.backward()
    sizes = np.array([t.data.size for t in t64])
    total = int(sizes.sum())
    worst = 0.0
    for _ in range(n_points):
        flat_idx = int(rng.integers(total))
        ti = int(np.searchsorted(np.cumsum(sizes), flat_idx, side="right"))
        local = flat_idx - int(np.concatenate([[0], np.cumsum(sizes)])[ti])
        t = t64[ti]
        flat = t.data.reshape(-1)
        gflat = t.grad.reshape(-1) if t.grad is not None else np.zeros_like(flat)
        orig = flat[local]
        flat[local] = orig + eps
        up = float(build_loss(t64).data)
        flat[local] = orig - eps
        dn = float(build_loss(t64).data)
        flat[local] = orig
        fd = (up - dn) / (2.0 * eps)
        denom = max(abs(fd), abs(gflat[local]), 1.0)
        worst = max(worst, abs(fd - gflat[local]) / denom)
    return worst
