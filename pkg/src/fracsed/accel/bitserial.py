"""Bit-plane weight storage and bit-serial integer convolution.

A signed code ``w`` in ``[-(2**(n-1) - 1), 2**(n-1) - 1]`` is stored offset by
``2**(n-1)``, which makes it a plain unsigned n-bit number. Plane ``b`` holds
bit ``b`` of every offset code. The convolution runs one plane at a time
(binary weights, so only additions), shifts each partial result by ``b`` and
removes the offset once per output: ``sum_b 2**b (plane_b * a) - 2**(n-1) (1 * a)``.
"""
from dataclasses import dataclass

import numpy as np

from .. import kernels
from ..quant import ACT_BITS, check_bits, qmax

INT32_MIN = -(1 << 31)
INT32_MAX = (1 << 31) - 1


class CodeRangeError(ValueError):
    pass


class AccumulatorOverflowError(OverflowError):
    def __init__(self, layer, index, value):
        self.layer = layer
        self.index = tuple(int(i) for i in index)
        self.value = int(value)
        super().__init__(f"layer {layer}: 32-bit accumulator overflow at output index "
                         f"{self.index} (value {self.value})")


@dataclass
class BitPlanePackedWeights:
    bitwidth: int
    planes: np.ndarray      # [n, *shape] uint8 in {0, 1}, plane 0 is the LSB
    shape: tuple
    scales: np.ndarray = None

    @property
    def offset(self):
        return 1 << (self.bitwidth - 1)

    @property
    def storage_bits(self):
        return self.bitwidth * int(np.prod(self.shape))

    @property
    def storage_bytes(self):
        return (self.storage_bits + 7) // 8

    def to_bytes(self):
        """All planes, LSB plane first, bit-packed back to back."""
        return np.packbits(self.planes.reshape(-1)).tobytes()

    def unpack(self):
        weights = (1 << np.arange(self.bitwidth, dtype=np.int64)).reshape((-1,) + (1,) * len(self.shape))
        return (self.planes.astype(np.int64) * weights).sum(axis=0) - self.offset


def pack_bitplanes(codes, n, scales=None):
    """Split signed n-bit codes into n offset-encoded bit planes."""
    n = check_bits(n)
    codes = np.asarray(codes)
    if codes.size and (codes.min() < -qmax(n) or codes.max() > qmax(n)):
        bad = np.argwhere((codes < -qmax(n)) | (codes > qmax(n)))[0]
        raise CodeRangeError(f"code {int(codes[tuple(bad)])} at {tuple(int(i) for i in bad)} "
                             f"outside the symmetric {n}-bit range")
    offset_codes = codes.astype(np.int64) + (1 << (n - 1))
    planes = np.stack([((offset_codes >> b) & 1).astype(np.uint8) for b in range(n)])
    return BitPlanePackedWeights(n, planes, tuple(codes.shape),
                                 None if scales is None else np.asarray(scales, dtype=np.float64))


def unpack_bitplanes(packed):
    return packed.unpack()


def _check_int32(acc, layer):
    bad = (acc > INT32_MAX) | (acc < INT32_MIN)
    if np.any(bad):
        idx = np.argwhere(bad)[0]
        raise AccumulatorOverflowError(layer, idx, acc[tuple(idx)])


def bit_serial_conv(packed, activations, stride=1, dilation=1, padding=0, layer="conv"):
    """Exact integer convolution of 8-bit activation codes with packed weights.

    Returns int32 accumulators [N, O, H', W']. Every intermediate sum is
    checked against the signed 32-bit range.
    """
    a = np.asarray(activations)
    lim = 1 << (ACT_BITS - 1)
    if a.size and (a.min() < -lim or a.max() > lim - 1):
        raise CodeRangeError(f"layer {layer}: activation codes outside the {ACT_BITS}-bit range")
    if len(packed.shape) != 4 or a.ndim != 4 or a.shape[1] != packed.shape[1]:
        raise ValueError(f"layer {layer}: activations {a.shape} do not match weights {packed.shape}")
    a = a.astype(np.int64)
    acc = None
    for b in range(packed.bitwidth):
        part = kernels.plane_conv2d(a, packed.planes[b], stride, dilation, padding)
        acc = (part << b) if acc is None else acc + (part << b)
        _check_int32(acc, layer)
    ones = np.ones(packed.shape, dtype=np.uint8)
    window = kernels.plane_conv2d(a, ones, stride, dilation, padding)
    correction = packed.offset * window
    _check_int32(correction, layer)
    acc = acc - correction
    _check_int32(acc, layer)
    return acc.astype(np.int32)


def reference_int_conv(weight_codes, activations, stride=1, dilation=1, padding=0):
    """Direct integer convolution (int64) for cross-checks."""
    return kernels.int_conv2d(np.asarray(activations, dtype=np.int64),
                              np.asarray(weight_codes, dtype=np.int64), stride, dilation, padding)
