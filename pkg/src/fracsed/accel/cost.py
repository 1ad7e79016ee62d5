"""Cycle, latency, energy and memory model of a bit-serial NPU.

3x3 mode: one cycle consumes one weight bit of a 3x3x16 block against a 5x5x16
8-bit input patch and produces 3x3 outputs of one output channel (1296 1x8-bit
MACs). An n-bit layer repeats every block n times. 1x1 and dense layers use
the same 16-channel, 3x3-output tiling with 144 MACs per cycle per bit.
Only compute is modelled: no DMA, activation traffic or im2col overhead, so
energy is cycles times a constant energy per cycle.
"""
import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

from ..models import BIAS_BYTES
from ..quant import ACT_BITS, MAX_BITS, check_bits


@dataclass(frozen=True)
class AccelConfig:
    macs_per_cycle_per_bit: int = 1296
    macs_per_cycle_per_bit_1x1: int = 144
    clock_hz: float = 370e6
    cin_tile: int = 16
    spatial_tile: int = 3          # 3x3 outputs per cycle
    input_tile: int = 5            # from a 5x5 input patch
    energy_per_cycle: float = 0.2e-9
    activation_bits: int = ACT_BITS
    scaler_bytes: int = 4

    def __post_init__(self):
        for name in ("macs_per_cycle_per_bit", "macs_per_cycle_per_bit_1x1", "clock_hz", "cin_tile",
                     "spatial_tile", "input_tile", "energy_per_cycle", "scaler_bytes"):
            if not getattr(self, name) > 0:
                raise ValueError(f"AccelConfig.{name} must be positive")
        if self.activation_bits != ACT_BITS:
            raise ValueError("only 8-bit activations are modelled")
        tile = self.cin_tile * self.spatial_tile ** 2
        if self.macs_per_cycle_per_bit != 9 * tile:
            raise ValueError("3x3 MAC budget must equal 3*3*cin_tile*spatial_tile**2")
        if self.macs_per_cycle_per_bit_1x1 != tile:
            raise ValueError("1x1 MAC budget must equal cin_tile*spatial_tile**2")


def _tiled(n, cin, cout, ho, wo, cfg):
    t = cfg.spatial_tile
    return n * math.ceil(cin / cfg.cin_tile) * cout * math.ceil(ho / t) * math.ceil(wo / t)


def layer_cycles(layer, n, cfg=AccelConfig()):
    """Cycles of one layer with n-bit weights."""
    kind = layer.kind
    if kind in ("pool", "activation"):
        return 0
    if kind == "conv2d":
        if layer.kernel not in (1, 3):
            raise ValueError(f"layer {layer.name}: unsupported kernel {layer.kernel}")
        cin = layer.in_shape[0]
        cout, ho, wo = layer.out_shape
        return _tiled(n, cin, cout, ho, wo, cfg)
    if kind == "dense":
        return _tiled(n, layer.in_shape[0], layer.out_channels, 1, 1, cfg)
    if kind == "recurrent":
        # two dense products per timestep; the recurrence is 8-bit
        steps, hidden = layer.out_shape
        feat = layer.weight_tensors()[0][1][0]
        per_step = (_tiled(n, feat, hidden, 1, 1, cfg)
                    + _tiled(MAX_BITS, hidden, hidden, 1, 1, cfg))
        return steps * per_step
    raise ValueError(f"layer {layer.name}: unsupported layer kind {kind!r}")


def layer_macs(layer):
    if layer.kind == "conv2d":
        cout, ho, wo = layer.out_shape
        return cout * ho * wo * layer.in_shape[0] * layer.kernel ** 2
    if layer.kind == "dense":
        return layer.in_shape[0] * layer.out_channels
    if layer.kind == "recurrent":
        steps, hidden = layer.out_shape
        return steps * layer.weight_count
    return 0


@dataclass
class LayerCost:
    layer: str
    bits: Optional[int]
    weight_bytes: int
    scaler_bytes: int
    bias_bytes: int
    cycles: int
    latency_s: float
    energy_j: float

    @property
    def memory_bytes(self):
        return self.weight_bytes + self.scaler_bytes + self.bias_bytes


CSV_COLUMNS = ("layer", "bits", "weight_bytes", "scaler_bytes", "cycles", "latency_us",
               "energy_uj", "bias_bytes")


@dataclass
class CostReport:
    model: str
    layers: list = field(default_factory=list)

    @property
    def memory_bytes(self):
        return sum(l.memory_bytes for l in self.layers)

    @property
    def cycles(self):
        return sum(l.cycles for l in self.layers)

    @property
    def latency_s(self):
        return sum(l.latency_s for l in self.layers)

    @property
    def energy_j(self):
        return sum(l.energy_j for l in self.layers)

    def to_dict(self):
        return {
            "model": self.model,
            "layers": [dict(asdict(l), memory_bytes=l.memory_bytes) for l in self.layers],
            "total": {"memory_bytes": self.memory_bytes, "cycles": self.cycles,
                      "latency_s": self.latency_s, "energy_j": self.energy_j},
        }

    def to_json(self, path=None):
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    def to_csv(self, path=None):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for l in self.layers:
            w.writerow([l.layer, "" if l.bits is None else l.bits, l.weight_bytes, l.scaler_bytes,
                        l.cycles, repr(l.latency_s * 1e6), repr(l.energy_j * 1e6), l.bias_bytes])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_dict(cls, d):
        layers = [LayerCost(**{k: v for k, v in l.items() if k != "memory_bytes"}) for l in d["layers"]]
        return cls(d["model"], layers)


def model_cost(spec, bitwidths, cfg=AccelConfig()):
    """Per-layer and total memory, cycles, latency and energy of a model."""
    report = CostReport(spec.name)
    for layer in spec.layers:
        if not layer.has_weights:
            continue
        n = None
        if layer.searchable:
            if bitwidths.get(layer.name) is None:
                raise KeyError(f"missing bitwidth for layer {layer.name}")
            n = check_bits(bitwidths[layer.name])
        weight_bytes = 0
        scaler = 0
        for _, shape, axis, searchable in layer.weight_tensors():
            # bit planes of one tensor are stored back to back, padded to a byte
            storage_bits = (n if searchable else MAX_BITS) * math.prod(shape)
            weight_bytes += -(-storage_bits // 8)
            scaler += cfg.scaler_bytes * shape[axis]
        cyc = layer_cycles(layer, n if n is not None else MAX_BITS, cfg)
        report.layers.append(LayerCost(
            layer=layer.name, bits=n, weight_bytes=weight_bytes, scaler_bytes=scaler,
            bias_bytes=BIAS_BYTES * layer.bias_count, cycles=cyc,
            latency_s=cyc / cfg.clock_hz, energy_j=cyc * cfg.energy_per_cycle))
    return report


# --------------------------------------------------------------------------
# comparison
# --------------------------------------------------------------------------

@dataclass
class ModelPoint:
    name: str
    memory: float
    accuracy: float
    latency: Optional[float] = None
    energy: Optional[float] = None


def reduction_pct(baseline, value):
    if baseline is None or value is None or baseline == 0:
        return None
    return 100.0 * (1.0 - value / baseline)


def dominates(a, b):
    """``a`` is no worse on memory and accuracy and strictly better on one."""
    no_worse = a.memory <= b.memory and a.accuracy >= b.accuracy
    return no_worse and (a.memory < b.memory or a.accuracy > b.accuracy)


def compare_models(points, baseline=0):
    """Reduction percentages against ``baseline`` (index or name) plus dominance flags."""
    if len(points) < 2:
        raise ValueError("need at least two models to compare")
    if isinstance(baseline, str):
        base = next((p for p in points if p.name == baseline), None)
        if base is None:
            raise KeyError(f"baseline {baseline!r} not among the points")
    else:
        base = points[baseline]
    rows = []
    for p in points:
        dominated_by = [q.name for q in points if q is not p and dominates(q, p)]
        rows.append({
            "name": p.name,
            "memory": p.memory,
            "accuracy": p.accuracy,
            "latency": p.latency,
            "energy": p.energy,
            "memory_reduction_pct": reduction_pct(base.memory, p.memory),
            "latency_reduction_pct": reduction_pct(base.latency, p.latency),
            "energy_reduction_pct": reduction_pct(base.energy, p.energy),
            "dominated": bool(dominated_by),
            "dominated_by": dominated_by,
        })
    return rows


def points_from_reports(reports, accuracies, names=None):
    names = names or [r.model for r in reports]
    return [ModelPoint(n, r.memory_bytes, a, r.latency_s, r.energy_j)
            for n, r, a in zip(names, reports, accuracies)]
