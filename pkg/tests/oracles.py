"""Independent reference computations used as test oracles.

Nothing here imports the code under test except the ``Tensor`` container.
"""
import math

import numpy as np


def loop_conv2d(x, w, stride=1, dilation=1, padding=0):
    """Direct nested-loop cross-correlation (float or integer)."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ho = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    wo = (wd + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    out = np.zeros((n, o, ho, wo), dtype=np.result_type(x, w))
    for b in range(n):
        for oc in range(o):
            for y in range(ho):
                for xx in range(wo):
                    acc = 0
                    for ch in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                sy = y * stride + i * dilation - padding
                                sx = xx * stride + j * dilation - padding
                                if 0 <= sy < h and 0 <= sx < wd:
                                    acc += x[b, ch, sy, sx] * w[oc, ch, i, j]
                    out[b, oc, y, xx] = acc
    return out


def tap_int_conv2d(a, w, stride=1, dilation=1, padding=0):
    """Integer conv as a sum over kernel taps of shifted channel contractions.

    Exact in int64 and fast enough for thousands of random cases.
    """
    a = np.asarray(a, dtype=np.int64)
    w = np.asarray(w, dtype=np.int64)
    n, c, h, wd = a.shape
    o, _, kh, kw = w.shape
    ho = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    wo = (wd + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    ap = np.zeros((n, c, h + 2 * padding, wd + 2 * padding), dtype=np.int64)
    ap[:, :, padding:padding + h, padding:padding + wd] = a
    out = np.zeros((n, o, ho, wo), dtype=np.int64)
    for i in range(kh):
        for j in range(kw):
            patch = ap[:, :, i * dilation: i * dilation + stride * (ho - 1) + 1: stride,
                       j * dilation: j * dilation + stride * (wo - 1) + 1: stride]
            out += np.einsum("nchw,oc->nohw", patch, w[:, :, i, j])
    return out


def loop_dense(x, w, b):
    n, f = x.shape
    g = w.shape[1]
    out = np.zeros((n, g))
    for i in range(n):
        for j in range(g):
            s = b[j]
            for k in range(f):
                s += x[i, k] * w[k, j]
            out[i, j] = s
    return out


def cross_entropy_formula(logits, labels):
    total = 0.0
    for row, y in zip(logits, labels):
        m = max(row)
        lse = m + math.log(sum(math.exp(v - m) for v in row))
        total += lse - row[y]
    return total / len(labels)


def prototypical_formula(emb, n_way, k_shot, n_query):
    """Loss from first principles: class means, -squared distances, CE."""
    support = emb[:n_way * k_shot]
    query = emb[n_way * k_shot:]
    protos = [support[c * k_shot:(c + 1) * k_shot].mean(axis=0) for c in range(n_way)]
    logits = [[-float(np.sum((q - p) ** 2)) for p in protos] for q in query]
    labels = [c for c in range(n_way) for _ in range(n_query)]
    return cross_entropy_formula(logits, labels)


def central_difference(f, x, idx, eps):
    """d f / d x[idx] by central differences; restores ``x``."""
    old = x[idx]
    x[idx] = old + eps
    fp = f()
    x[idx] = old - eps
    fm = f()
    x[idx] = old
    return (fp - fm) / (2 * eps)


def rel_err(a, b, floor=1e-6):
    return abs(a - b) / max(abs(a), abs(b), floor)


def zero_interleave(w, d):
    """Kernel dilated by inserting d-1 zeros between taps."""
    o, c, kh, kw = w.shape
    out = np.zeros((o, c, (kh - 1) * d + 1, (kw - 1) * d + 1), dtype=w.dtype)
    out[:, :, ::d, ::d] = w
    return out
