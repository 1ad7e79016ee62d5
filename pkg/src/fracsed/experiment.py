"""Desk-scale experiment protocol shared by the CLI and the end-to-end checks.

One seed of an experiment: generate the synthetic dataset, train the float
model, then start every quantized run (fixed-bitwidth QAT or a FracBits search)
from a copy of that float checkpoint, so all runs share the pretraining.
"""
import copy
import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .data import SynthDatasetSpec, generate_dataset
from .fracbits import SearchConfig, run_search, uniform_footprint
from .models import Network, build_dcrnn_analogue, build_protonet_analogue
from .tasks import make_task, train_float

log = logging.getLogger(__name__)

# difficulty where weight precision visibly matters but 8-bit QAT stays at float accuracy
GENERIC_DATA = SynthDatasetSpec(num_classes=10, samples_per_class=500, noise=0.6, val_fraction=0.2)
FEWSHOT_DATA = SynthDatasetSpec(num_classes=16, samples_per_class=60, noise=0.6, val_fraction=0.3)


@dataclass
class ExperimentConfig:
    task: str = "generic"
    dataset: SynthDatasetSpec = GENERIC_DATA
    model: dict = field(default_factory=dict)
    float_epochs: int = 12
    float_lr: float = 0.05
    search: SearchConfig = field(default_factory=lambda: SearchConfig(pinned_bits=8))
    task_args: dict = field(default_factory=dict)


def preset(task):
    """Default desk-scale configuration for ``task``."""
    if task == "generic":
        return ExperimentConfig()
    if task == "fewshot":
        # episodic fine-tuning loses accuracy at the generic rate; QAT keeps the float lr
        return ExperimentConfig(task="fewshot", dataset=FEWSHOT_DATA, float_epochs=15, float_lr=0.02,
                                search=SearchConfig(pinned_bits=8, lr=0.02),
                                task_args={"episodes_per_epoch": 60})
    raise ValueError(f"unknown task {task!r}")


def build_model(task, num_classes, input_shape, seed, **kwargs):
    if task == "generic":
        spec = build_dcrnn_analogue(num_classes=num_classes, input_shape=input_shape, **kwargs)
    elif task == "fewshot":
        spec = build_protonet_analogue(input_shape=input_shape, **kwargs)
    else:
        raise ValueError(f"unknown task {task!r}")
    return Network(spec, seed=seed)


def prepare(cfg, seed):
    """Dataset, task and float-trained network for one seed."""
    ds = generate_dataset(replace(cfg.dataset, seed=seed))
    task = make_task(cfg.task, ds, **cfg.task_args)
    net = build_model(cfg.task, ds.num_classes, ds.input_shape, seed, **cfg.model)
    history = train_float(net, task, cfg.float_epochs, lr=cfg.float_lr, seed=seed)
    acc, std = task.evaluate(net, seed=seed)
    return ds, task, net, {"accuracy": acc, "accuracy_std": std, "history": history}


def quantized_run(net, task, search_cfg):
    """Fixed or searched run from a copy of ``net``; returns (net, SearchResult)."""
    net = copy.deepcopy(net)
    result = run_search(net, task, search_cfg)
    return net, result


def sweep(cfg, seed, fixed_bits=(2, 3, 4, 5, 6, 7, 8), target_fraction=0.5):
    """Float baseline, fixed-bitwidth runs and one FracBits search for a seed."""
    t0 = time.perf_counter()
    _, task, net, flt = prepare(cfg, seed)
    float_seconds = time.perf_counter() - t0
    f8 = uniform_footprint(net.spec, 8, cfg.search.scaler_bytes)
    out = {"seed": seed, "float": flt, "footprint_8bit": f8, "fixed": {}}
    for b in fixed_bits:
        _, r = quantized_run(net, task, replace(cfg.search, pinned_bits=b, s_target=None, seed=seed))
        out["fixed"][b] = r
    target = target_fraction * f8
    t1 = time.perf_counter()
    _, r = quantized_run(net, task, replace(cfg.search, pinned_bits=None, s_target=target, seed=seed))
    out["search_seconds"] = time.perf_counter() - t1
    out["float_seconds"] = float_seconds
    out["fracbits"] = r
    out["seconds"] = time.perf_counter() - t0
    log.info("seed %d: float %.4f fracbits %.4f at %d B (target %.0f)",
             seed, flt["accuracy"], r.accuracy, r.footprint_bytes, target)
    return out


def mean_over_seeds(values):
    return float(np.mean(values))
