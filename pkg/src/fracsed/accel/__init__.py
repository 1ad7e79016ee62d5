"""Bit-serial NPU: functional simulation and cost accounting."""
from .bitserial import (
    AccumulatorOverflowError, BitPlanePackedWeights, CodeRangeError, bit_serial_conv,
    pack_bitplanes, reference_int_conv, unpack_bitplanes,
)
from .cost import (
    AccelConfig, CostReport, LayerCost, ModelPoint, compare_models, dominates, layer_cycles,
    layer_macs, model_cost, points_from_reports, reduction_pct,
)
from .simulate import EquivalenceError, simulate_forward, verify_equivalence
