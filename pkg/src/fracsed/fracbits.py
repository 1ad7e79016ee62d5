"""Differentiable per-layer bitwidth search with fractional bitwidths.

A layer with real bitwidth ``n`` in ``[lo, lo + 1]`` uses the blend
``(lo + 1 - n) * f_lo(w) + (n - lo) * f_{lo+1}(w)`` of its two neighbouring
integer quantizers, which is linear in ``n`` inside the bracket. A memory term
``|footprint(n) - S_target|`` pulls the bitwidths towards a byte budget. After
the search, bitwidths are rounded, frozen, and the weights fine-tuned.
"""
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import quant
from .models import BIAS_BYTES

log = logging.getLogger(__name__)

DEFAULT_BETA = 0.1


class NonFiniteLossError(FloatingPointError):
    def __init__(self, epoch, layer, detail=""):
        self.epoch = epoch
        self.layer = layer
        super().__init__(f"non-finite loss at epoch {epoch} (first bad layer: {layer}){detail}")


class InfeasibleTargetError(ValueError):
    """Requested budget is below the all-minimum-bitwidth footprint."""


# --------------------------------------------------------------------------
# interpolated quantizer
# --------------------------------------------------------------------------

def bracket(n):
    """Integer bracket ``(lo, lo + 1)`` used for the value and slope at ``n``.

    Integer ``n`` below the maximum uses ``[n, n + 1]`` (zero weight on the
    upper quantizer), ``n == MAX_BITS`` uses ``[MAX_BITS - 1, MAX_BITS]``.
    """
    lo = min(int(math.floor(n)), quant.MAX_BITS - 1)
    lo = max(lo, quant.MIN_BITS)
    return lo, lo + 1


def _check_bracket(n_frac, spec_floor, spec_ceil):
    lo, hi = spec_floor.bitwidth, spec_ceil.bitwidth
    if not (lo <= n_frac <= hi) or hi - lo not in (0, 1):
        raise ValueError(f"bitwidths ({lo}, {hi}) do not bracket n={n_frac}")
    return lo, hi


def interp_fake_quant(x, n_frac, spec_floor, spec_ceil):
    """Blend of the two neighbouring integer quantizers at fractional ``n_frac``."""
    if isinstance(x, ad.Tensor):
        x = x.data
    lo, hi = _check_bracket(n_frac, spec_floor, spec_ceil)
    if lo == hi:
        return quant.fake_quant(x, spec_floor)
    return (hi - n_frac) * quant.fake_quant(x, spec_floor) + (n_frac - lo) * quant.fake_quant(x, spec_ceil)


def bitwidth_grad(upstream, x, spec_floor, spec_ceil):
    """d/dn of the blend, contracted with ``upstream``."""
    if isinstance(x, ad.Tensor):
        x = x.data
    return float(np.sum(np.asarray(upstream) * (quant.fake_quant(x, spec_ceil) - quant.fake_quant(x, spec_floor))))


def interp_fake_quant_op(w, n, absmax, axis):
    """Autodiff blend: gradients flow to the weights (clipped STE through both
    quantizers) and to the scalar bitwidth tensor ``n``."""
    nf = float(n.data)
    lo, hi = bracket(nf)
    spec_lo = quant.QuantSpec(lo, quant.scale_from_absmax(absmax, lo), axis)
    spec_hi = quant.QuantSpec(hi, quant.scale_from_absmax(absmax, hi), axis)
    f_lo = quant.fake_quant(w.data, spec_lo)
    f_hi = quant.fake_quant(w.data, spec_hi)
    a, b = hi - nf, nf - lo
    out = a * f_lo + b * f_hi
    m_lo = quant.inside_range(w.data, spec_lo)
    m_hi = quant.inside_range(w.data, spec_hi)

    def bw(g):
        gw = a * np.where(m_lo, g, 0.0) + b * np.where(m_hi, g, 0.0)
        gn = np.sum(g * (f_hi - f_lo)).reshape(n.shape)
        return gw, gn

    return ad.make(out, (w, n), bw)


# --------------------------------------------------------------------------
# memory accounting
# --------------------------------------------------------------------------

@dataclass
class SizeLossConfig:
    s_target: float
    beta: float = DEFAULT_BETA
    scaler_bytes_per_channel: int = 4
    include_bias: bool = True
    unit_bytes: float = 1.0

    def __post_init__(self):
        if not self.s_target > 0:
            raise ValueError("S_target must be positive")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")


@dataclass
class SizeTerm:
    """One quantized weight tensor: element count, bitwidth, scale channels, biases."""

    weight_count: int
    bits: object
    channel_count: int
    bias_count: int = 0


def size_terms(spec, bits):
    """Size terms of a ``ModelSpec`` given per-searchable-layer bitwidths.

    ``bits`` maps layer name to an int, a float or a scalar ``Tensor``.
    Non-searchable quantized weights count at 8 bits.
    """
    terms = []
    for layer in spec.weight_layers:
        first = True
        for _, shape, axis, searchable in layer.weight_tensors():
            if searchable:
                if layer.name not in bits or bits[layer.name] is None:
                    raise KeyError(f"missing bitwidth for layer {layer.name}")
                b = bits[layer.name]
            else:
                b = quant.MAX_BITS
            terms.append(SizeTerm(int(np.prod(shape)), b, shape[axis],
                                  layer.bias_count if first else 0))
            first = False
    return terms


def _fixed_bytes(term, config):
    fixed = config.scaler_bytes_per_channel * term.channel_count
    if config.include_bias:
        fixed += BIAS_BYTES * term.bias_count
    return fixed


def size_loss(layers, config):
    """``|sum(weights * n / 8 + scaler bytes (+ bias bytes)) - S_target| / unit``.

    ``layers`` is a list of ``SizeTerm`` or ``(weight_count, n, channel_count
    [, bias_count])`` tuples. Returns a scalar ``Tensor`` differentiable in
    every bitwidth given as a ``Tensor``.
    """
    terms = [t if isinstance(t, SizeTerm) else SizeTerm(*t) for t in layers]
    if any(t.weight_count <= 0 or t.channel_count <= 0 for t in terms):
        raise ValueError("weight and channel counts must be positive")
    const = sum(_fixed_bytes(t, config) for t in terms)
    var_terms = [t for t in terms if isinstance(t.bits, ad.Tensor)]
    const += sum(t.weight_count * float(t.bits) / 8.0 for t in terms if not isinstance(t.bits, ad.Tensor))
    if var_terms:
        vec = ad.stack_scalars([t.bits for t in var_terms])
        footprint = ad.add_scalar(ad.dot_const(vec, [t.weight_count / 8.0 for t in var_terms]), const)
    else:
        footprint = ad.Tensor(np.array(const))
    diff = ad.add_scalar(footprint, -config.s_target)
    return ad.scale(ad.abs_(diff), 1.0 / config.unit_bytes)


def fractional_footprint(layers, config):
    """Footprint in bytes with fractional bitwidths (no byte rounding)."""
    terms = [t if isinstance(t, SizeTerm) else SizeTerm(*t) for t in layers]
    return sum(t.weight_count * float(t.bits) / 8.0 + _fixed_bytes(t, config) for t in terms)


def frozen_footprint(layers, config):
    """Stored bytes once bitwidths are integers: weights packed per tensor."""
    total = 0
    for t in (t if isinstance(t, SizeTerm) else SizeTerm(*t) for t in layers):
        b = int(t.bits)
        if b != float(t.bits):
            raise ValueError("frozen footprint needs integer bitwidths")
        total += (t.weight_count * b + 7) // 8 + _fixed_bytes(t, config)
    return total


def uniform_footprint(spec, bits, scaler_bytes=4):
    cfg = SizeLossConfig(1.0, scaler_bytes_per_channel=scaler_bytes)
    return frozen_footprint(size_terms(spec, {l.name: bits for l in spec.searchable_layers}), cfg)


def total_loss(acc_loss, size_loss_value, beta=DEFAULT_BETA):
    """Accuracy loss plus ``beta`` times the size loss (tensors or floats)."""
    if isinstance(acc_loss, ad.Tensor) or isinstance(size_loss_value, ad.Tensor):
        acc = acc_loss if isinstance(acc_loss, ad.Tensor) else ad.Tensor(np.array(float(acc_loss)))
        size = size_loss_value if isinstance(size_loss_value, ad.Tensor) else ad.Tensor(np.array(float(size_loss_value)))
        return ad.add(acc, ad.scale(size, beta))
    return acc_loss + beta * size_loss_value


def round_half_up(n):
    return int(math.floor(n + 0.5))


def round_and_freeze(states):
    """Round every fractional bitwidth half-up, clamp to the legal range, freeze."""
    out = []
    for s in states:
        b = min(max(round_half_up(s.n_frac), quant.MIN_BITS), quant.MAX_BITS)
        s.n_frozen = b
        out.append(b)
    return out


# --------------------------------------------------------------------------
# search driver
# --------------------------------------------------------------------------

@dataclass
class SearchConfig:
    epochs_search: int = 5
    epochs_finetune: int = 10
    lr: float = 0.05
    momentum: float = 0.9
    lr_bits: float = 0.02
    beta: float = DEFAULT_BETA
    s_target: Optional[float] = None
    scaler_bytes: int = 4
    # bytes per size-loss unit; None means 1/250 of the all-8-bit footprint
    size_unit: Optional[float] = None
    init_bits: float = 8.0
    # fixed-bitwidth QAT baseline: same driver, bitwidths pinned
    pinned_bits: Optional[int] = None
    seed: int = 0

    def __post_init__(self):
        if self.epochs_search < 1 or self.epochs_finetune < 1:
            raise ValueError("epochs_search and epochs_finetune must be >= 1")
        if self.pinned_bits is None and self.s_target is None:
            raise ValueError("a search needs s_target (bytes)")


@dataclass
class SearchResult:
    bits: dict
    accuracy: float
    accuracy_std: float
    footprint_bytes: int
    s_target: Optional[float]
    history: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)


def size_config_for(spec, config):
    f8 = uniform_footprint(spec, quant.MAX_BITS, config.scaler_bytes)
    unit = config.size_unit if config.size_unit is not None else f8 / 250.0
    target = config.s_target if config.s_target is not None else float(f8)
    return SizeLossConfig(target, config.beta, config.scaler_bytes, True, unit)


def check_feasible(spec, s_target, scaler_bytes=4):
    floor = uniform_footprint(spec, quant.MIN_BITS, scaler_bytes)
    if s_target < floor:
        raise InfeasibleTargetError(
            f"S_target={s_target:.0f} B is below the all-{quant.MIN_BITS}-bit footprint {floor} B")
    return floor


def _first_bad_layer(net, x):
    for name, p in net.params.items():
        if not np.all(np.isfinite(p.data)) or (p.grad is not None and not np.all(np.isfinite(p.grad))):
            return name.split(".")[0]
    trace = {}
    out = net.forward(x, trace=trace)
    names = list(trace)
    for i, name in enumerate(names):
        nxt = trace[names[i + 1]] if i + 1 < len(names) else out
        if not np.all(np.isfinite(nxt.data)):
            return name
    return "unknown"


def run_epoch(net, task, rng, w_opt, epoch, bit_opt=None, size_cfg=None, recalibrate=True):
    """One pass over the task's training batches. Returns the mean loss."""
    from .tasks import batch_inputs

    net.training = True
    losses = []
    states = list(net.bit_states.values())
    for batch in task.batches(rng):
        w_opt.zero_grad()
        if bit_opt is not None:
            bit_opt.zero_grad()
        loss = task.loss(net, batch)
        if bit_opt is not None and size_cfg is not None:
            terms = size_terms(net.spec, {s.layer: s.n for s in states})
            loss = total_loss(loss, size_loss(terms, size_cfg), size_cfg.beta)
        value = float(loss.data)
        if not math.isfinite(value):
            net.training = False
            raise NonFiniteLossError(epoch, _first_bad_layer(net, batch_inputs(task, batch)))
        ad.backward(loss)
        w_opt.step()
        if bit_opt is not None:
            before = [bracket(s.n_frac)[0] for s in states]
            bit_opt.step()
            for s, lo in zip(states, before):
                s.clamp()
                if recalibrate and bracket(s.n_frac)[0] != lo:
                    net.calibrate_weights([pn for pn, _, sl in net.quantized_weights() if sl == s.layer])
        losses.append(value)
    net.end_epoch()
    net.training = False
    return float(np.mean(losses)) if losses else float("nan")


def run_search(net, task, config):
    """Search bitwidths under the memory target, then round, freeze and fine-tune.

    With ``config.pinned_bits`` set the same schedule runs as plain
    fixed-bitwidth QAT. ``net`` is modified in place (usually a float-trained
    network) and ends in ``frozen`` (search) or ``fixed`` (pinned) mode.
    """
    rng = np.random.default_rng(config.seed)
    spec = net.spec
    size_cfg = size_config_for(spec, config)
    history = []
    w_opt = ad.SGD(net.weight_params(), config.lr, config.momentum)

    if config.pinned_bits is not None:
        net.set_mode("fixed", fixed_bits=config.pinned_bits)
        bit_opt = None
    else:
        check_feasible(spec, config.s_target, config.scaler_bytes)
        net.set_mode("fracbits", init_bits=config.init_bits)
        bit_opt = ad.SGD(net.bit_params(), config.lr_bits, 0.0)

    for epoch in range(config.epochs_search):
        loss = run_epoch(net, task, rng, w_opt, epoch, bit_opt, size_cfg if bit_opt else None)
        entry = {"phase": "search", "epoch": epoch, "loss": loss,
                 "n_frac": {k: s.n_frac for k, s in net.bit_states.items()}}
        if bit_opt is not None:
            terms = size_terms(spec, {k: s.n_frac for k, s in net.bit_states.items()})
            entry["footprint_bytes"] = fractional_footprint(terms, size_cfg)
        else:
            entry["footprint_bytes"] = uniform_footprint(spec, config.pinned_bits, config.scaler_bytes)
        entry["accuracy"] = task.evaluate(net, seed=config.seed)[0]
        history.append(entry)
        log.info("search epoch %d loss %.4f footprint %.0f acc %.4f",
                 epoch, loss, entry["footprint_bytes"], entry["accuracy"])

    if bit_opt is not None:
        round_and_freeze(list(net.bit_states.values()))
        net.set_mode("frozen")
    bits = net.integer_bits()
    footprint = frozen_footprint(size_terms(spec, bits), size_cfg)

    for epoch in range(config.epochs_finetune):
        loss = run_epoch(net, task, rng, w_opt, config.epochs_search + epoch)
        acc = task.evaluate(net, seed=config.seed)[0]
        history.append({"phase": "finetune", "epoch": config.epochs_search + epoch, "loss": loss,
                        "footprint_bytes": footprint, "accuracy": acc})

    acc, std = task.evaluate(net, seed=config.seed)
    return SearchResult(bits=bits, accuracy=acc, accuracy_std=std, footprint_bytes=int(footprint),
                        s_target=config.s_target, history=history)
