"""Symmetric signed fake quantization.

Codes live on the symmetric grid ``[-(2**(n-1) - 1), 2**(n-1) - 1]``; the most
negative two's-complement value is never used. Weights get one scale per output
channel, activations one scale per tensor and always 8 bits.
"""
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autodiff import Tensor, make

MIN_BITS = 2
MAX_BITS = 8
ACT_BITS = 8


def qmax(bits):
    return (1 << (bits - 1)) - 1


def check_bits(bits):
    if int(bits) != bits or not MIN_BITS <= bits <= MAX_BITS:
        raise ValueError(f"bitwidth must be an integer in [{MIN_BITS}, {MAX_BITS}], got {bits}")
    return int(bits)


@dataclass(frozen=True)
class QuantSpec:
    """Bitwidth plus scale(s). ``axis`` is the channel axis of a per-channel scale."""

    bitwidth: int
    scale: object
    axis: Optional[int] = None

    def __post_init__(self):
        check_bits(self.bitwidth)
        s = np.asarray(self.scale, dtype=np.float64)
        if s.size == 0 or np.any(~(s > 0)) or not np.all(np.isfinite(s)):
            raise ValueError("scales must be positive and finite")
        if self.axis is None and s.ndim != 0:
            raise ValueError("per-tensor spec needs a scalar scale")

    @property
    def qmax(self):
        return qmax(self.bitwidth)

    def broadcast_scale(self, ndim):
        s = np.asarray(self.scale, dtype=np.float64)
        if self.axis is None:
            return s
        shape = [1] * ndim
        shape[self.axis] = -1
        return s.reshape(shape)


def round_half_away(x):
    """Round to nearest integer, ties away from zero, exactly."""
    t = np.trunc(x)
    frac = x - t   # exact in binary floating point
    return t + np.sign(x) * (np.abs(frac) >= 0.5)


def channel_absmax(values, axis=None):
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("cannot calibrate an empty tensor")
    if axis is None:
        return np.asarray(np.max(np.abs(values)))
    other = tuple(a for a in range(values.ndim) if a != axis % values.ndim)
    return np.max(np.abs(values), axis=other)


def scale_from_absmax(absmax, bits):
    absmax = np.asarray(absmax, dtype=np.float64)
    s = absmax / qmax(check_bits(bits))
    return np.where(absmax > 0, s, 1.0)


def calibrate_scale(values, bitwidth, per_channel_axis=None):
    """Max-abs scale so the largest magnitude maps to the top code.

    Returns a scalar array for per-tensor calibration, or one scale per slice
    along ``per_channel_axis``. All-zero slices get scale 1.
    """
    if isinstance(values, Tensor):
        values = values.data
    return scale_from_absmax(channel_absmax(values, per_channel_axis), bitwidth)


def make_spec(values, bitwidth, per_channel_axis=None):
    return QuantSpec(bitwidth, calibrate_scale(values, bitwidth, per_channel_axis),
                     per_channel_axis)


def quantize_to_codes(x, spec):
    """Integer codes of ``x`` on the grid of ``spec`` (no dequantization)."""
    if isinstance(x, Tensor):
        x = x.data
    x = np.asarray(x, dtype=np.float64)
    s = spec.broadcast_scale(x.ndim)
    q = spec.qmax
    codes = np.clip(round_half_away(x / s), -q, q)
    return codes.astype(np.int64)


def dequantize(codes, spec):
    codes = np.asarray(codes)
    return spec.broadcast_scale(codes.ndim) * codes.astype(np.float64)


def fake_quant(x, spec):
    """``scale * clamp(round(x / scale))`` as a float array."""
    return dequantize(quantize_to_codes(x, spec), spec)


def inside_range(x, spec):
    """Mask of elements the clamp leaves alone (the STE passes these)."""
    s = spec.broadcast_scale(np.ndim(x))
    return np.abs(x) <= (spec.qmax + 0.5) * s


def ste_grad(upstream, x, spec):
    """Clipped straight-through gradient of ``fake_quant``."""
    if isinstance(x, Tensor):
        x = x.data
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != np.shape(x):
        raise ValueError(f"ste_grad: upstream {upstream.shape} vs input {np.shape(x)}")
    return np.where(inside_range(x, spec), upstream, 0.0)


def fake_quant_op(x, spec):
    """Autodiff version of ``fake_quant`` with the clipped STE backward."""
    mask = inside_range(x.data, spec)
    return make(fake_quant(x.data, spec), (x,), lambda g: (np.where(mask, g, 0.0),))
