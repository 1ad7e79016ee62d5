"""Declarative model graphs and the trainable network built from them.

A ``ModelSpec`` is a flat list of ``LayerSpec`` entries with per-sample shapes
resolved at construction. The trainer (``Network``), the size loss and the
accelerator cost model all read the same spec.
"""
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import quant
from .kernels import conv_out_size

LAYER_KINDS = ("conv2d", "recurrent", "dense", "pool", "activation")
BIAS_BYTES = 4


@dataclass
class LayerSpec:
    name: str
    kind: str
    in_shape: tuple
    out_shape: tuple = ()
    out_channels: int = 0
    kernel: int = 1
    stride: int = 1
    dilation: int = 1
    padding: int = 0
    activation: Optional[str] = None
    searchable: bool = False

    @property
    def has_weights(self):
        return self.kind in ("conv2d", "recurrent", "dense")

    def weight_tensors(self):
        """``(suffix, shape, channel_axis, searchable)`` for every quantized weight."""
        if self.kind == "conv2d":
            c = self.in_shape[0]
            return [("weight", (self.out_channels, c, self.kernel, self.kernel), 0, self.searchable)]
        if self.kind == "dense":
            return [("weight", (self.in_shape[0], self.out_channels), 1, self.searchable)]
        if self.kind == "recurrent":
            feat = recurrent_features(self.in_shape)
            h = self.out_channels
            # only the input projection is searched; the recurrence stays 8-bit
            return [("w_ih", (feat, h), 1, self.searchable), ("w_hh", (h, h), 1, False)]
        return []

    @property
    def bias_count(self):
        return self.out_channels if self.has_weights else 0

    @property
    def weight_count(self):
        return sum(int(np.prod(s)) for _, s, _, _ in self.weight_tensors())


def recurrent_features(in_shape):
    # conv map (C, T, F) is read as a sequence of T frames with C*F features
    if len(in_shape) == 3:
        return in_shape[0] * in_shape[2]
    return in_shape[1]


@dataclass
class ModelSpec:
    name: str
    input_shape: tuple
    layers: list = field(default_factory=list)
    output: str = "logits"

    def __post_init__(self):
        self.input_shape = tuple(self.input_shape)
        self._resolve()

    def _resolve(self):
        shape = self.input_shape
        seen = set()
        for layer in self.layers:
            if layer.kind not in LAYER_KINDS:
                raise ValueError(f"layer {layer.name}: unknown kind {layer.kind!r}")
            if layer.name in seen:
                raise ValueError(f"duplicate layer name {layer.name!r}")
            seen.add(layer.name)
            layer.in_shape = tuple(shape)
            layer.out_shape = _infer_out_shape(layer, shape)
            shape = layer.out_shape

    @property
    def output_shape(self):
        return self.layers[-1].out_shape if self.layers else self.input_shape

    def layer(self, name):
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)

    @property
    def searchable_layers(self):
        return [l for l in self.layers if l.searchable]

    @property
    def weight_layers(self):
        return [l for l in self.layers if l.has_weights]

    def to_dict(self):
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "output": self.output,
            "layers": [
                {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(l).items()}
                for l in self.layers
            ],
        }

    @classmethod
    def from_dict(cls, d):
        layers = []
        for ld in d["layers"]:
            ld = dict(ld)
            ld["in_shape"] = tuple(ld.get("in_shape", ()))
            ld["out_shape"] = tuple(ld.get("out_shape", ()))
            layers.append(LayerSpec(**ld))
        return cls(d["name"], tuple(d["input_shape"]), layers, d.get("output", "logits"))


def _infer_out_shape(layer, shape):
    kind = layer.kind
    if kind == "conv2d":
        if len(shape) != 3:
            raise ValueError(f"layer {layer.name}: conv2d needs a (C, H, W) input, got {shape}")
        if layer.kernel not in (1, 3):
            raise ValueError(f"layer {layer.name}: kernel must be 1 or 3")
        c, h, w = shape
        ho = conv_out_size(h, layer.kernel, layer.stride, layer.dilation, layer.padding)
        wo = conv_out_size(w, layer.kernel, layer.stride, layer.dilation, layer.padding)
        if ho < 1 or wo < 1:
            raise ValueError(f"layer {layer.name}: input {shape} too small for the kernel")
        return (layer.out_channels, ho, wo)
    if kind == "recurrent":
        if len(shape) == 3:
            return (shape[1], layer.out_channels)
        if len(shape) == 2:
            return (shape[0], layer.out_channels)
        raise ValueError(f"layer {layer.name}: recurrent needs a map or a sequence, got {shape}")
    if kind == "pool":
        if len(shape) == 3:
            return (shape[0],)
        if len(shape) == 2:
            return (shape[1],)
        raise ValueError(f"layer {layer.name}: pool needs rank >= 2 input, got {shape}")
    if kind == "dense":
        if len(shape) != 1:
            raise ValueError(f"layer {layer.name}: dense needs a flat input, got {shape}")
        return (layer.out_channels,)
    return tuple(shape)


def build_dcrnn_analogue(width_scale=1.0, num_classes=10, input_shape=(1, 32, 16), hidden=32):
    """Two dilated convs, a tanh recurrent layer over time, pooling, classifier."""
    if width_scale <= 0:
        raise ValueError("width_scale must be positive")
    c1 = max(1, int(round(16 * width_scale)))
    c2 = max(1, int(round(32 * width_scale)))
    layers = [
        LayerSpec("conv1", "conv2d", (), out_channels=c1, kernel=3, stride=2,
                  dilation=1, padding=1, activation="relu", searchable=True),
        LayerSpec("conv2", "conv2d", (), out_channels=c2, kernel=3, stride=2,
                  dilation=2, padding=2, activation="relu", searchable=True),
        LayerSpec("rnn", "recurrent", (), out_channels=hidden, searchable=True),
        LayerSpec("pool", "pool", ()),
        LayerSpec("fc", "dense", (), out_channels=num_classes, searchable=True),
    ]
    return ModelSpec("dcrnn", input_shape, layers, output="logits")


def build_protonet_analogue(embed_dim=16, input_shape=(1, 32, 16), widths=(8, 16, 16, 16)):
    """Four strided conv blocks, global pooling, projection to an embedding."""
    if embed_dim < 4:
        raise ValueError("embed_dim must be >= 4")
    layers = [
        LayerSpec(f"block{i + 1}", "conv2d", (), out_channels=w, kernel=3, stride=2,
                  padding=1, activation="relu", searchable=True)
        for i, w in enumerate(widths)
    ]
    layers.append(LayerSpec("pool", "pool", ()))
    layers.append(LayerSpec("embed", "dense", (), out_channels=embed_dim, searchable=True))
    return ModelSpec("protonet", input_shape, layers, output="embedding")


# --------------------------------------------------------------------------
# trainable network
# --------------------------------------------------------------------------

@dataclass
class LayerBitwidthState:
    """Fractional bitwidth of one searchable layer."""

    layer: str
    n: ad.Tensor
    n_frozen: Optional[int] = None

    @property
    def n_frac(self):
        return float(self.n.data)

    @property
    def grad_n(self):
        return 0.0 if self.n.grad is None else float(self.n.grad)

    def clamp(self):
        np.clip(self.n.data, quant.MIN_BITS, quant.MAX_BITS, out=self.n.data)

    def bits(self):
        if self.n_frozen is not None:
            return self.n_frozen
        return self.n_frac


def new_bitwidth_state(layer, init=8.0):
    return LayerBitwidthState(layer, ad.parameter(np.array(float(init)), name=f"{layer}.n"))


class ActObserver:
    """Per-tensor activation range: running max over the current epoch."""

    def __init__(self):
        self.absmax = 0.0
        self.epoch_max = 0.0

    def observe(self, x):
        self.epoch_max = max(self.epoch_max, float(np.max(np.abs(x))) if x.size else 0.0)
        return self.epoch_max

    def end_epoch(self):
        if self.epoch_max > 0:
            self.absmax = self.epoch_max
        self.epoch_max = 0.0

    def spec(self, absmax=None):
        a = self.absmax if absmax is None else absmax
        return quant.QuantSpec(quant.ACT_BITS, float(quant.scale_from_absmax(a, quant.ACT_BITS)))


MODES = ("float", "fixed", "fracbits", "frozen")


class Network:
    """Parameters, quantizer state and forward pass for a ``ModelSpec``.

    Modes:
      float     no quantization.
      fixed     every searchable weight at ``fixed_bits``; the plain QAT path.
      fracbits  searchable weights through the interpolated quantizer.
      frozen    integer bitwidths from ``round_and_freeze``.
    Non-searchable quantized weights (the recurrence) are always 8-bit in the
    quantized modes, and layer inputs go through 8-bit activation fake-quant.
    """

    def __init__(self, spec, seed=0):
        self.spec = spec
        self.params = {}
        rng = np.random.default_rng(seed)
        for layer in spec.weight_layers:
            for suffix, shape, axis, _ in layer.weight_tensors():
                fan_in = int(np.prod(shape)) // shape[axis]
                if suffix == "w_hh":
                    std = 0.5 / math.sqrt(fan_in)
                elif layer.kind == "recurrent":
                    std = 1.0 / math.sqrt(fan_in)
                else:
                    std = math.sqrt(2.0 / fan_in)
                self.params[f"{layer.name}.{suffix}"] = ad.parameter(
                    rng.normal(0.0, std, size=shape), name=f"{layer.name}.{suffix}")
            self.params[f"{layer.name}.bias"] = ad.parameter(
                np.zeros(layer.bias_count), name=f"{layer.name}.bias")
        self.mode = "float"
        self.fixed_bits = 8
        self.bit_states = {l.name: new_bitwidth_state(l.name) for l in spec.searchable_layers}
        self.weight_absmax = {}
        self.act = {l.name: ActObserver() for l in spec.weight_layers}
        self.training = False

    # -- bookkeeping ------------------------------------------------------

    def weight_params(self):
        return list(self.params.values())

    def bit_params(self):
        return [s.n for s in self.bit_states.values()]

    def quantized_weights(self):
        """``(param name, channel axis, searchable layer or None)`` per quantized weight."""
        out = []
        for layer in self.spec.weight_layers:
            for suffix, _, axis, searchable in layer.weight_tensors():
                out.append((f"{layer.name}.{suffix}", axis, layer.name if searchable else None))
        return out

    def calibrate_weights(self, names=None):
        for pname, axis, _ in self.quantized_weights():
            if names is None or pname in names:
                self.weight_absmax[pname] = quant.channel_absmax(self.params[pname].data, axis)

    def set_mode(self, mode, fixed_bits=None, init_bits=8.0):
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}")
        if mode == "fixed":
            self.fixed_bits = quant.check_bits(fixed_bits if fixed_bits is not None else self.fixed_bits)
        if mode == "fracbits":
            for s in self.bit_states.values():
                s.n.data[...] = float(init_bits)
                s.n_frozen = None
                s.clamp()
        if mode != "float":
            self.calibrate_weights()
        self.mode = mode

    def layer_bits(self, layer_name):
        """Current bitwidth of a searchable layer (float while searching)."""
        if self.mode == "fixed":
            return self.fixed_bits
        state = self.bit_states[layer_name]
        if self.mode == "frozen":
            return state.n_frozen
        return state.n_frac

    def integer_bits(self):
        """Per-layer integer bitwidth map for storage and simulation."""
        if self.mode == "fixed":
            return {name: self.fixed_bits for name in self.bit_states}
        if self.mode == "frozen":
            return {name: s.n_frozen for name, s in self.bit_states.items()}
        if self.mode == "float":
            return {name: None for name in self.bit_states}
        raise ValueError("fractional bitwidths have no integer storage size; freeze first")

    def weight_spec(self, pname, bits):
        axis = next(a for n, a, _ in self.quantized_weights() if n == pname)
        return quant.QuantSpec(int(bits), quant.scale_from_absmax(self.weight_absmax[pname], bits), axis)

    def weight_codes(self, pname, bits):
        return quant.quantize_to_codes(self.params[pname].data, self.weight_spec(pname, bits))

    def end_epoch(self):
        for obs in self.act.values():
            obs.end_epoch()

    # -- forward ------------------------------------------------------------

    def _weight(self, pname, searchable_layer):
        w = self.params[pname]
        if self.mode == "float":
            return w
        if searchable_layer is None:
            return quant.fake_quant_op(w, self.weight_spec(pname, quant.MAX_BITS))
        if self.mode == "fracbits":
            from .fracbits import interp_fake_quant_op
            state = self.bit_states[searchable_layer]
            axis = next(a for n, a, _ in self.quantized_weights() if n == pname)
            return interp_fake_quant_op(w, state.n, self.weight_absmax[pname], axis)
        return quant.fake_quant_op(w, self.weight_spec(pname, self.layer_bits(searchable_layer)))

    def _act(self, layer_name, x):
        obs = self.act[layer_name]
        if self.training:
            absmax = obs.observe(x.data)
        else:
            absmax = obs.absmax
        if self.mode == "float":
            return x
        return quant.fake_quant_op(x, obs.spec(absmax))

    def act_codes(self, layer_name, x):
        """8-bit codes of a layer input as the quantized forward sees them at eval."""
        return quant.quantize_to_codes(x, self.act[layer_name].spec())

    def forward(self, x, trace=None):
        """Run the network on a batch [N, *input_shape].

        ``trace``, if a dict, receives each weight layer's (quantized) input.
        """
        h = x if isinstance(x, ad.Tensor) else ad.Tensor(x)
        for layer in self.spec.layers:
            h = self._layer_forward(layer, h, trace)
        return h

    __call__ = forward

    def _layer_forward(self, layer, h, trace):
        kind = layer.kind
        if kind == "activation":
            return ad.relu(h)
        if kind == "pool":
            return ad.global_avg_pool(h) if h.ndim == 4 else ad.time_avg_pool(h)
        if kind == "recurrent" and h.ndim == 4:
            n, c, t, f = h.shape
            h = ad.reshape(ad.transpose(h, (0, 2, 1, 3)), (n, t, c * f))
        h = self._act(layer.name, h)
        if trace is not None:
            trace[layer.name] = h
        p = self.params
        w = {pn: self._weight(pn, sl) for pn, _, sl in self.quantized_weights()
             if pn.startswith(layer.name + ".")}
        bias = p[f"{layer.name}.bias"]
        if kind == "conv2d":
            out = ad.conv2d(h, w[f"{layer.name}.weight"], bias, stride=layer.stride,
                            dilation=layer.dilation, padding=layer.padding)
        elif kind == "dense":
            out = ad.dense(h, w[f"{layer.name}.weight"], bias)
        else:
            n, t, f = h.shape
            proj = ad.matmul(ad.reshape(h, (n * t, f)), w[f"{layer.name}.w_ih"])
            out = ad.rnn_tanh(ad.reshape(proj, (n, t, layer.out_channels)),
                              w[f"{layer.name}.w_hh"], bias)
        if layer.activation == "relu":
            out = ad.relu(out)
        return out

    # -- persistence ------------------------------------------------------------

    def state(self):
        return {
            "mode": self.mode,
            "fixed_bits": self.fixed_bits,
            "n_frac": {k: s.n_frac for k, s in self.bit_states.items()},
            "n_frozen": {k: s.n_frozen for k, s in self.bit_states.items()},
            "weight_absmax": {k: np.asarray(v).tolist() for k, v in self.weight_absmax.items()},
            "act_absmax": {k: o.absmax for k, o in self.act.items()},
        }

    def load_state(self, st):
        self.mode = st["mode"]
        self.fixed_bits = st["fixed_bits"]
        for k, s in self.bit_states.items():
            s.n.data[...] = st["n_frac"][k]
            s.n_frozen = st["n_frozen"][k]
        self.weight_absmax = {k: np.asarray(v, dtype=np.float64) for k, v in st["weight_absmax"].items()}
        for k, v in st["act_absmax"].items():
            self.act[k].absmax = float(v)
