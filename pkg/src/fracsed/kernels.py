"""Hot inner loops.

Every kernel has a numba implementation and a pure-numpy implementation with
identical semantics. The module-level names (``im2col``, ``col2im``,
``int_conv2d``, ``plane_conv2d``) point at one or the other depending on
``fracsed._jit.USE_NUMBA``. Integer kernels are bit-identical across the two
paths; the float kernels only copy or add values, and the numpy ``col2im``
adds taps in the same order as the numba loop, so they agree bit-for-bit too.
"""
import numpy as np

from ._jit import USE_NUMBA, njit


def conv_out_size(size, k, stride, dilation, padding):
    """Output extent of a 2-D convolution along one axis."""
    return (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1


# --------------------------------------------------------------------------
# numpy path
# --------------------------------------------------------------------------

def _np_pad(x, padding):
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _np_im2col(x, kh, kw, stride, dilation, padding):
    n, c, h, w = x.shape
    ho = conv_out_size(h, kh, stride, dilation, padding)
    wo = conv_out_size(w, kw, stride, dilation, padding)
    xp = _np_pad(x, padding)
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        hi = i * dilation
        for j in range(kw):
            wj = j * dilation
            cols[:, :, i, j] = xp[:, :, hi:hi + stride * (ho - 1) + 1:stride,
                                  wj:wj + stride * (wo - 1) + 1:stride]
    return cols.reshape(n, c * kh * kw, ho * wo)


def _np_col2im(cols, x_shape, kh, kw, stride, dilation, padding):
    n, c, h, w = x_shape
    ho = conv_out_size(h, kh, stride, dilation, padding)
    wo = conv_out_size(w, kw, stride, dilation, padding)
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    xp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    for i in range(kh):
        hi = i * dilation
        for j in range(kw):
            wj = j * dilation
            xp[:, :, hi:hi + stride * (ho - 1) + 1:stride,
               wj:wj + stride * (wo - 1) + 1:stride] += cols[:, :, i, j]
    if padding == 0:
        return xp
    return xp[:, :, padding:padding + h, padding:padding + w]


def _np_int_conv2d(a, w, stride, dilation, padding):
    n = a.shape[0]
    o, c, kh, kw = w.shape
    ho = conv_out_size(a.shape[2], kh, stride, dilation, padding)
    wo = conv_out_size(a.shape[3], kw, stride, dilation, padding)
    cols = _np_im2col(a.astype(np.int64), kh, kw, stride, dilation, padding)
    out = np.matmul(w.reshape(o, c * kh * kw).astype(np.int64), cols)
    return out.reshape(n, o, ho, wo)


def _np_plane_conv2d(a, plane, stride, dilation, padding):
    # a 0/1 weight plane is just an integer conv with weights in {0, 1}
    return _np_int_conv2d(a, plane.astype(np.int64), stride, dilation, padding)


# --------------------------------------------------------------------------
# numba path
# --------------------------------------------------------------------------

@njit
def _nb_im2col(x, kh, kw, stride, dilation, padding):
    n, c, h, w = x.shape
    ho = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    wo = (w + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    cols = np.zeros((n, c * kh * kw, ho * wo), dtype=x.dtype)
    for b in range(n):
        for ch in range(c):
            for i in range(kh):
                for j in range(kw):
                    row = (ch * kh + i) * kw + j
                    for y in range(ho):
                        src_y = y * stride + i * dilation - padding
                        if src_y < 0 or src_y >= h:
                            continue
                        for xx in range(wo):
                            src_x = xx * stride + j * dilation - padding
                            if src_x < 0 or src_x >= w:
                                continue
                            cols[b, row, y * wo + xx] = x[b, ch, src_y, src_x]
    return cols


@njit
def _nb_col2im_impl(cols, n, c, h, w, kh, kw, stride, dilation, padding):
    ho = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    wo = (w + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    out = np.zeros((n, c, h, w), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            for b in range(n):
                for ch in range(c):
                    row = (ch * kh + i) * kw + j
                    for y in range(ho):
                        dst_y = y * stride + i * dilation - padding
                        if dst_y < 0 or dst_y >= h:
                            continue
                        for xx in range(wo):
                            dst_x = xx * stride + j * dilation - padding
                            if dst_x < 0 or dst_x >= w:
                                continue
                            out[b, ch, dst_y, dst_x] += cols[b, row, y * wo + xx]
    return out


def _nb_col2im(cols, x_shape, kh, kw, stride, dilation, padding):
    n, c, h, w = x_shape
    return _nb_col2im_impl(np.ascontiguousarray(cols), n, c, h, w,
                           kh, kw, stride, dilation, padding)


@njit
def _nb_int_conv2d_impl(a, w, stride, dilation, padding):
    n, c, h, wd = a.shape
    o, _, kh, kw = w.shape
    cols = _nb_im2col(a, kh, kw, stride, dilation, padding)
    rows, length = cols.shape[1], cols.shape[2]
    wmat = w.reshape(o, rows)
    out = np.zeros((n, o, length), dtype=np.int64)
    # output position innermost: contiguous, vectorizable
    for b in range(n):
        for oc in range(o):
            for r in range(rows):
                coef = wmat[oc, r]
                if coef == 0:
                    continue
                for l in range(length):
                    out[b, oc, l] += coef * cols[b, r, l]
    return out


@njit
def _nb_plane_conv2d_impl(a, plane, stride, dilation, padding):
    # binary weights: add the im2col row where the bit is set, never multiply
    n, c, h, wd = a.shape
    o, _, kh, kw = plane.shape
    cols = _nb_im2col(a, kh, kw, stride, dilation, padding)
    rows, length = cols.shape[1], cols.shape[2]
    pmat = plane.reshape(o, rows)
    out = np.zeros((n, o, length), dtype=np.int64)
    for b in range(n):
        for oc in range(o):
            for r in range(rows):
                if pmat[oc, r] == 0:
                    continue
                for l in range(length):
                    out[b, oc, l] += cols[b, r, l]
    return out


def _out_hw(a, w, stride, dilation, padding):
    return (conv_out_size(a.shape[2], w.shape[2], stride, dilation, padding),
            conv_out_size(a.shape[3], w.shape[3], stride, dilation, padding))


def _nb_int_conv2d(a, w, stride, dilation, padding):
    out = _nb_int_conv2d_impl(np.ascontiguousarray(a, dtype=np.int64),
                              np.ascontiguousarray(w, dtype=np.int64),
                              stride, dilation, padding)
    return out.reshape(out.shape[:2] + _out_hw(a, w, stride, dilation, padding))


def _nb_plane_conv2d(a, plane, stride, dilation, padding):
    out = _nb_plane_conv2d_impl(np.ascontiguousarray(a, dtype=np.int64),
                                np.ascontiguousarray(plane, dtype=np.uint8),
                                stride, dilation, padding)
    return out.reshape(out.shape[:2] + _out_hw(a, plane, stride, dilation, padding))


def _nb_im2col_wrap(x, kh, kw, stride, dilation, padding):
    return _nb_im2col(np.ascontiguousarray(x), kh, kw, stride, dilation, padding)


NUMPY_KERNELS = {
    "im2col": _np_im2col,
    "col2im": _np_col2im,
    "int_conv2d": _np_int_conv2d,
    "plane_conv2d": _np_plane_conv2d,
}

NUMBA_KERNELS = {
    "im2col": _nb_im2col_wrap,
    "col2im": _nb_col2im,
    "int_conv2d": _nb_int_conv2d,
    "plane_conv2d": _nb_plane_conv2d,
}

_ACTIVE = NUMBA_KERNELS if USE_NUMBA else NUMPY_KERNELS

im2col = _ACTIVE["im2col"]
col2im = _ACTIVE["col2im"]
int_conv2d = _ACTIVE["int_conv2d"]
plane_conv2d = _ACTIVE["plane_conv2d"]

BACKEND = "numba" if USE_NUMBA else "numpy"
