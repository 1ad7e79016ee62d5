"""Differentiable operations.

Shapes are explicit: the only broadcasting is a bias added along the channel
or feature axis. Every op checks its operand shapes and raises
``DimensionError`` naming the axis that disagrees.
"""
import numpy as np

from .. import kernels
from .tensor import DimensionError, Tensor, make


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(a, b, op):
    if a.shape != b.shape:
        for axis, (sa, sb) in enumerate(zip(a.shape, b.shape)):
            if sa != sb:
                raise DimensionError(f"{op}: axis {axis} differs ({sa} vs {sb})")
        raise DimensionError(f"{op}: rank differs ({a.ndim} vs {b.ndim})")


# -- elementwise ------------------------------------------------------------

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "add")
    return make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "sub")
    return make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "mul")
    return make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a, c):
    c = float(c)
    return make(a.data * c, (a,), lambda g: (g * c,))


def add_scalar(a, c):
    return make(a.data + float(c), (a,), lambda g: (g,))


def relu(x):
    mask = x.data > 0
    return make(x.data * mask, (x,), lambda g: (g * mask,))


def tanh(x):
    y = np.tanh(x.data)
    return make(y, (x,), lambda g: (g * (1.0 - y * y),))


def abs_(x):
    # subgradient 0 at the kink
    s = np.sign(x.data)
    return make(np.abs(x.data), (x,), lambda g: (g * s,))


# -- reductions and reshapes ------------------------------------------------

def sum_(x):
    shape = x.shape
    return make(np.sum(x.data).reshape(()), (x,),
                lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x):
    n = x.size
    shape = x.shape
    return make(np.mean(x.data).reshape(()), (x,),
                lambda g: (np.full(shape, g / n),))


def stack_scalars(xs):
    """Concatenate scalar tensors into a vector."""
    data = np.array([float(x.data) for x in xs])

    def bw(g):
        return tuple(g[i].reshape(xs[i].shape) for i in range(len(xs)))

    return make(data, tuple(xs), bw)


def dot_const(x, coeffs):
    """Scalar ``sum(coeffs * x)`` for a constant coefficient array."""
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if coeffs.shape != x.shape:
        raise DimensionError(f"dot_const: coefficient shape {coeffs.shape} vs {x.shape}")
    return make(np.sum(coeffs * x.data).reshape(()), (x,), lambda g: (g * coeffs,))


def reshape(x, shape):
    old = x.shape
    return make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x, axes):
    inv = np.argsort(axes)
    return make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def take_rows(x, idx):
    """Rows ``x[idx]`` of a 2-D tensor."""
    idx = np.asarray(idx, dtype=np.int64)
    shape = x.shape

    def bw(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return make(x.data[idx], (x,), bw)


def global_avg_pool(x):
    """Mean over every axis after the first two: [N, C, ...] -> [N, C]."""
    if x.ndim < 3:
        raise DimensionError(f"global_avg_pool: need rank >= 3, got {x.ndim}")
    axes = tuple(range(2, x.ndim))
    count = int(np.prod([x.shape[a] for a in axes]))
    shape = x.shape

    def bw(g):
        return (np.broadcast_to(g.reshape(g.shape + (1,) * len(axes)), shape) / count,)

    return make(x.data.mean(axis=axes), (x,), bw)


def time_avg_pool(x):
    """Mean over time of a sequence [N, T, H] -> [N, H]."""
    if x.ndim != 3:
        raise DimensionError(f"time_avg_pool: need rank 3, got {x.ndim}")
    t = x.shape[1]
    shape = x.shape
    return make(x.data.mean(axis=1), (x,),
                lambda g: (np.broadcast_to(g[:, None, :], shape) / t,))


# -- linear maps -------------------------------------------------------------

def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul: need 2-D operands, got ranks {a.ndim} and {b.ndim}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner axis differs ({a.shape[1]} vs {b.shape[0]})")
    return make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def dense(x, weight, bias=None):
    """Affine map [N, F] x [F, G] + [G] -> [N, G]."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    if x.ndim != 2:
        raise DimensionError(f"dense: input must be [N, F], got rank {x.ndim}")
    if weight.ndim != 2:
        raise DimensionError(f"dense: weight must be [F, G], got rank {weight.ndim}")
    if x.shape[1] != weight.shape[0]:
        raise DimensionError(
            f"dense: feature axis 1 of input ({x.shape[1]}) != axis 0 of weight ({weight.shape[0]})")
    out = x.data @ weight.data
    if bias is None:
        return make(out, (x, weight), lambda g: (g @ weight.data.T, x.data.T @ g))
    if bias.shape != (weight.shape[1],):
        raise DimensionError(f"dense: bias axis 0 is {bias.shape}, expected ({weight.shape[1]},)")
    out = out + bias.data
    return make(out, (x, weight, bias),
                lambda g: (g @ weight.data.T, x.data.T @ g, g.sum(axis=0)))


def conv2d(x, weight, bias=None, stride=1, dilation=1, padding=0):
    """Cross-correlation [N, C, H, W] * [O, C, kH, kW] -> [N, O, H', W']."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    if x.ndim != 4:
        raise DimensionError(f"conv2d: input must be [N, C, H, W], got rank {x.ndim}")
    if weight.ndim != 4:
        raise DimensionError(f"conv2d: weight must be [O, C, kH, kW], got rank {weight.ndim}")
    n, c, h, w = x.shape
    o, wc, kh, kw = weight.shape
    if wc != c:
        raise DimensionError(f"conv2d: channel axis 1 of input ({c}) != axis 1 of weight ({wc})")
    if kh != kw or kh not in (1, 3):
        raise DimensionError(f"conv2d: kernel axes 2,3 must be 1x1 or 3x3, got {kh}x{kw}")
    if stride < 1 or dilation < 1 or padding < 0:
        raise DimensionError("conv2d: stride and dilation must be >= 1, padding >= 0")
    ho = kernels.conv_out_size(h, kh, stride, dilation, padding)
    wo = kernels.conv_out_size(w, kw, stride, dilation, padding)
    if ho < 1:
        raise DimensionError(f"conv2d: axis 2 (height {h}) too small for the kernel")
    if wo < 1:
        raise DimensionError(f"conv2d: axis 3 (width {w}) too small for the kernel")
    cols = kernels.im2col(x.data, kh, kw, stride, dilation, padding)   # [N, C*k*k, L]
    wmat = weight.data.reshape(o, c * kh * kw)
    out = np.matmul(wmat, cols).reshape(n, o, ho, wo)
    if bias is not None:
        if bias.shape != (o,):
            raise DimensionError(f"conv2d: bias axis 0 is {bias.shape}, expected ({o},)")
        out = out + bias.data[None, :, None, None]

    def bw(g):
        g2 = g.reshape(n, o, ho * wo)
        gw = (g2.transpose(1, 0, 2).reshape(o, -1)
              @ cols.transpose(1, 0, 2).reshape(c * kh * kw, -1).T).reshape(weight.shape)
        gx = None
        if x.requires_grad:
            gcols = np.matmul(wmat.T, g2)
            gx = kernels.col2im(gcols, x.shape, kh, kw, stride, dilation, padding)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make(out, parents, bw)


def rnn_tanh(xproj, w_hh, bias):
    """Vanilla recurrent layer ``h_t = tanh(xproj_t + h_{t-1} W_hh + b)``.

    ``xproj`` is the already-projected input sequence [N, T, H]; the initial
    state is zero. Returns every hidden state, [N, T, H]. Backward is
    truncated nowhere (full backprop through time).
    """
    if xproj.ndim != 3:
        raise DimensionError(f"rnn_tanh: input must be [N, T, H], got rank {xproj.ndim}")
    n, t, hdim = xproj.shape
    if w_hh.shape != (hdim, hdim):
        raise DimensionError(f"rnn_tanh: recurrent weight is {w_hh.shape}, expected ({hdim}, {hdim})")
    if bias.shape != (hdim,):
        raise DimensionError(f"rnn_tanh: bias axis 0 is {bias.shape}, expected ({hdim},)")
    hs = np.empty((n, t, hdim))
    h = np.zeros((n, hdim))
    for step in range(t):
        h = np.tanh(xproj.data[:, step] + h @ w_hh.data + bias.data)
        hs[:, step] = h

    def bw(g):
        gx = np.empty_like(hs)
        gw = np.zeros_like(w_hh.data)
        carry = np.zeros((n, hdim))
        for step in range(t - 1, -1, -1):
            dh = g[:, step] + carry
            dpre = dh * (1.0 - hs[:, step] ** 2)
            gx[:, step] = dpre
            prev = hs[:, step - 1] if step > 0 else np.zeros((n, hdim))
            gw += prev.T @ dpre
            carry = dpre @ w_hh.data.T
        gb = gx.sum(axis=(0, 1))
        return gx, gw, gb

    return make(hs, (xproj, w_hh, bias), bw)


# -- losses -------------------------------------------------------------------

def log_softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy of integer labels against [N, K] logits."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy: logits must be [N, K], got rank {logits.ndim}")
    n, k = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"softmax_cross_entropy: labels axis 0 is {labels.shape}, expected ({n},)")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"softmax_cross_entropy: labels must lie in [0, {k})")
    logp = log_softmax(logits.data)
    loss = -logp[np.arange(n), labels].mean()

    def bw(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (g * p / n,)

    return make(np.asarray(loss).reshape(()), (logits,), bw)


def squared_distances(a, b):
    """Pairwise squared Euclidean distances [M, D] x [K, D] -> [M, K]."""
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError("squared_distances: need 2-D operands")
    if a.shape[1] != b.shape[1]:
        raise DimensionError(f"squared_distances: axis 1 differs ({a.shape[1]} vs {b.shape[1]})")
    diff = a.data[:, None, :] - b.data[None, :, :]
    out = np.einsum("mkd,mkd->mk", diff, diff)

    def bw(g):
        gd = 2.0 * g[:, :, None] * diff
        return gd.sum(axis=1), -gd.sum(axis=0)

    return make(out, (a, b), bw)
