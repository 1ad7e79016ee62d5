"""Integer forward pass of a quantized ``Network`` on the bit-serial datapath.

Conv, dense and the recurrent input projection run as bit-serial integer
convolutions on 8-bit activation codes (dense layers as 1x1 convolutions).
Accumulators are rescaled by activation and weight scales, biased, and
requantized at the next layer input. The tanh recurrence itself and the
pooling stay in floating point, as in the training path.
"""
import numpy as np

from .. import autodiff as ad
from ..quant import MAX_BITS
from .bitserial import bit_serial_conv, pack_bitplanes, reference_int_conv


class EquivalenceError(AssertionError):
    pass


def _layer_bits(net, layer, searchable):
    if not searchable:
        return MAX_BITS
    return net.integer_bits()[layer.name]


def _weight_for_conv(codes, kind):
    # dense [F, G] -> conv [G, F, 1, 1]
    if kind == "conv2d":
        return codes
    return codes.T.reshape(codes.shape[1], codes.shape[0], 1, 1)


def simulate_forward(net, x, records=None):
    """Run ``x`` through the integer datapath; returns float outputs.

    ``records``, if a dict, receives per weight layer the activation codes,
    weight codes, packed weights and int32 accumulators.
    """
    if net.mode not in ("fixed", "frozen"):
        raise ValueError(f"simulation needs integer bitwidths, network is in {net.mode!r} mode")
    h = np.asarray(x, dtype=np.float64)
    for layer in net.spec.layers:
        kind = layer.kind
        if kind == "activation":
            h = np.where(h > 0, h, 0.0)
            continue
        if kind == "pool":
            h = h.mean(axis=(2, 3)) if h.ndim == 4 else h.mean(axis=1)
            continue
        if kind == "recurrent" and h.ndim == 4:
            n, c, t, f = h.shape
            h = np.transpose(h, (0, 2, 1, 3)).reshape(n, t, c * f)
        a_spec = net.act[layer.name].spec()
        a_codes = net.act_codes(layer.name, h)
        suffix, _, axis, searchable = layer.weight_tensors()[0]
        pname = f"{layer.name}.{suffix}"
        bits = _layer_bits(net, layer, searchable)
        w_spec = net.weight_spec(pname, bits)
        w_codes = net.weight_codes(pname, bits)
        packed = pack_bitplanes(_weight_for_conv(w_codes, kind), bits, w_spec.scale)
        bias = net.params[f"{layer.name}.bias"].data
        scale = float(a_spec.scale) * np.asarray(w_spec.scale)
        if kind == "conv2d":
            acc = bit_serial_conv(packed, a_codes, layer.stride, layer.dilation, layer.padding, layer.name)
            out = acc * scale[None, :, None, None] + bias[None, :, None, None]
        elif kind == "dense":
            acc = bit_serial_conv(packed, a_codes[:, :, None, None], layer=layer.name)
            out = acc[:, :, 0, 0] * scale[None, :] + bias
        else:
            n, t, f = a_codes.shape
            acc = bit_serial_conv(packed, a_codes.reshape(n * t, f, 1, 1), layer=layer.name)
            proj = (acc[:, :, 0, 0] * scale[None, :]).reshape(n, t, layer.out_channels)
            w_hh = ad.Tensor(net._weight(f"{layer.name}.w_hh", None).data)
            out = ad.rnn_tanh(ad.Tensor(proj), w_hh, ad.Tensor(bias)).data
        if records is not None:
            records[layer.name] = {"act_codes": a_codes, "weight_codes": w_codes,
                                   "packed": packed, "acc": acc}
        if layer.activation == "relu":
            out = np.where(out > 0, out, 0.0)
        h = out
    return h


def verify_equivalence(net, x, rtol=1e-9):
    """Check the integer datapath against the fake-quant training path.

    Raises ``EquivalenceError`` unless, for every weight layer, the simulator's
    activation codes equal the training path's, the bit-serial accumulators
    equal a direct integer convolution of the same codes, and the network
    outputs agree (same argmax for logits).
    """
    net.training = False
    trace = {}
    ref = net.forward(x, trace=trace).data
    records = {}
    out = simulate_forward(net, x, records)
    for name, rec in records.items():
        layer = net.spec.layer(name)
        train_codes = net.act_codes(name, trace[name].data)
        if not np.array_equal(train_codes, rec["act_codes"]):
            bad = np.argwhere(train_codes != rec["act_codes"])[0]
            raise EquivalenceError(f"layer {name}: activation codes differ at {tuple(bad)}")
        a = rec["act_codes"]
        if layer.kind == "dense":
            a = a[:, :, None, None]
        elif layer.kind == "recurrent":
            a = a.reshape(-1, a.shape[-1], 1, 1)
        w = _weight_for_conv(rec["weight_codes"], layer.kind)
        direct = reference_int_conv(w, a, layer.stride, layer.dilation, layer.padding) \
            if layer.kind == "conv2d" else reference_int_conv(w, a)
        if not np.array_equal(direct, rec["acc"].astype(np.int64)):
            raise EquivalenceError(f"layer {name}: bit-serial accumulators differ from direct conv")
    if net.spec.output == "logits":
        if not np.array_equal(out.argmax(axis=1), ref.argmax(axis=1)):
            raise EquivalenceError("simulated and training-path logits disagree on argmax")
    if not np.allclose(out, ref, rtol=rtol, atol=rtol * max(1.0, float(np.abs(ref).max()))):
        raise EquivalenceError(
            f"simulated outputs deviate from training path (max abs diff {np.abs(out - ref).max():.3g})")
    return {"layers": list(records), "max_abs_diff": float(np.abs(out - ref).max())}
