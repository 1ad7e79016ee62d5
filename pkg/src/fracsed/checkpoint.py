"""Checkpoint format: raw little-endian float64 arrays plus a JSON manifest.

``model.bin`` is the concatenation of every parameter in manifest order.
``model.json`` records, per tensor, its byte offset and shape and, for
quantized weights in fixed or frozen mode, the bitwidth and per-channel
scales; it also carries the model spec and the quantizer state needed to
rebuild the network.
"""
import json
import os

import numpy as np

from .models import ModelSpec, Network

FORMAT = "fracsed-checkpoint/1"
DTYPE = "<f8"


def _quant_info(net):
    if net.mode not in ("fixed", "frozen"):
        return {}
    bits = net.integer_bits()
    info = {}
    for pname, axis, layer in net.quantized_weights():
        b = bits[layer] if layer is not None else 8
        spec = net.weight_spec(pname, b)
        info[pname] = {"bits": int(b), "axis": axis, "scales": np.asarray(spec.scale).tolist()}
    return info


def save(net, directory, stem="model"):
    quant = _quant_info(net)
    tensors = []
    offset = 0
    chunks = []
    for name, p in net.params.items():
        raw = np.ascontiguousarray(p.data, dtype=DTYPE).tobytes()
        entry = {"name": name, "dtype": DTYPE, "shape": list(p.shape), "offset": offset,
                 "nbytes": len(raw)}
        if name in quant:
            entry["quant"] = quant[name]
        tensors.append(entry)
        chunks.append(raw)
        offset += len(raw)
    manifest = {"format": FORMAT, "spec": net.spec.to_dict(), "state": net.state(),
                "tensors": tensors}
    with open(os.path.join(directory, f"{stem}.bin"), "wb") as fh:
        for c in chunks:
            fh.write(c)
    with open(os.path.join(directory, f"{stem}.json"), "w") as fh:
        json.dump(manifest, fh, indent=2)
    return manifest


def load(directory, stem="model"):
    with open(os.path.join(directory, f"{stem}.json")) as fh:
        manifest = json.load(fh)
    if manifest.get("format") != FORMAT:
        raise ValueError(f"unsupported checkpoint format {manifest.get('format')!r}")
    raw = open(os.path.join(directory, f"{stem}.bin"), "rb").read()
    net = Network(ModelSpec.from_dict(manifest["spec"]))
    for t in manifest["tensors"]:
        if t["name"] not in net.params:
            raise ValueError(f"checkpoint tensor {t['name']} not in the model")
        arr = np.frombuffer(raw, dtype=t["dtype"], count=int(np.prod(t["shape"])), offset=t["offset"])
        net.params[t["name"]].data[...] = arr.reshape(t["shape"])
    net.load_state(manifest["state"])
    return net
