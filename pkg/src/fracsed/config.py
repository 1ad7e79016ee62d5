"""Run configuration: YAML file, command-line overrides, validation.

A run is reproducible from its resolved config alone (the seed is part of it).
"""
import json
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Optional

import yaml

from . import experiment
from .data import SynthDatasetSpec
from .fracbits import SearchConfig
from .quant import MAX_BITS, MIN_BITS

TASKS = ("generic", "fewshot")
QUANT_MODES = ("float", "fixed", "fracbits")


class ConfigError(ValueError):
    def __init__(self, field_name, message):
        self.field = field_name
        super().__init__(f"config field '{field_name}': {message}")


@dataclass
class RunConfig:
    task: str = "generic"
    seed: int = 0
    mode: str = "float"
    bits: Optional[int] = None
    s_target: Optional[float] = None
    # used when s_target is not given: fraction of the all-8-bit footprint
    s_target_fraction: float = 0.5
    dataset: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    task_args: dict = field(default_factory=dict)
    epochs_float: Optional[int] = None
    epochs_search: int = 5
    epochs_finetune: int = 10
    lr_float: Optional[float] = None
    # QAT and search weight learning rate; None takes the task preset's
    lr: Optional[float] = None
    lr_bits: float = 0.02
    momentum: float = 0.9
    beta: float = 0.1
    size_unit: Optional[float] = None

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


_FIELDS = {f.name for f in fields(RunConfig)}


def _positive(d, name, kind=float, allow_none=False):
    v = d.get(name)
    if v is None and allow_none:
        return
    if isinstance(v, bool) or not isinstance(v, (int, float)) or (kind is int and int(v) != v):
        raise ConfigError(name, f"expected {'an integer' if kind is int else 'a number'}, got {v!r}")
    if v <= 0:
        raise ConfigError(name, f"must be positive, got {v!r}")


def validate(cfg):
    if cfg.task not in TASKS:
        raise ConfigError("task", f"must be one of {TASKS}, got {cfg.task!r}")
    if cfg.mode not in QUANT_MODES:
        raise ConfigError("mode", f"must be one of {QUANT_MODES}, got {cfg.mode!r}")
    if isinstance(cfg.seed, bool) or not isinstance(cfg.seed, int) or cfg.seed < 0:
        raise ConfigError("seed", f"must be a non-negative integer, got {cfg.seed!r}")
    if cfg.mode == "fixed":
        if not isinstance(cfg.bits, int) or not MIN_BITS <= cfg.bits <= MAX_BITS:
            raise ConfigError("bits", f"fixed mode needs an integer in [{MIN_BITS}, {MAX_BITS}], got {cfg.bits!r}")
    d = cfg.to_dict()
    for name in ("epochs_search", "epochs_finetune"):
        _positive(d, name, int)
    _positive(d, "epochs_float", int, allow_none=True)
    for name in ("lr_bits", "s_target_fraction"):
        _positive(d, name)
    for name in ("lr", "lr_float", "s_target", "size_unit"):
        _positive(d, name, allow_none=True)
    if not 0 <= cfg.momentum < 1:
        raise ConfigError("momentum", f"must be in [0, 1), got {cfg.momentum!r}")
    if cfg.beta < 0:
        raise ConfigError("beta", f"must be non-negative, got {cfg.beta!r}")
    ds_fields = {f.name for f in fields(SynthDatasetSpec)}
    for key in cfg.dataset:
        if key not in ds_fields or key == "seed":
            raise ConfigError(f"dataset.{key}", "unknown dataset field (the seed is the run seed)")
    try:
        replace(experiment.preset(cfg.task).dataset, **cfg.dataset).validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError("dataset", str(exc)) from None
    return cfg


def from_dict(d):
    if not isinstance(d, dict):
        raise ConfigError("<root>", "config must be a mapping")
    for key in d:
        if key not in _FIELDS:
            raise ConfigError(key, "unknown field")
    for key in ("dataset", "model", "task_args"):
        if key in d and not isinstance(d[key], dict):
            raise ConfigError(key, "must be a mapping")
    return validate(RunConfig(**d))


def load(path=None, overrides=None):
    """Read a YAML config (optional) and apply flag overrides."""
    d = {}
    if path is not None:
        try:
            with open(path) as fh:
                d = yaml.safe_load(fh) or {}
        except OSError as exc:
            raise ConfigError("--config", f"cannot read {path}: {exc.strerror}") from None
        except yaml.YAMLError as exc:
            raise ConfigError("--config", f"invalid YAML: {exc}") from None
    if not isinstance(d, dict):
        raise ConfigError("<root>", "config must be a mapping")
    for k, v in (overrides or {}).items():
        if v is not None:
            d[k] = v
    return from_dict(d)


def search_config(cfg, s_target=None):
    """Search driver settings; fixed and float runs get pinned bitwidths."""
    pinned = None
    if cfg.mode == "fixed":
        pinned = cfg.bits
    elif cfg.mode == "float":
        pinned = MAX_BITS
    lr = cfg.lr if cfg.lr is not None else experiment.preset(cfg.task).search.lr
    return SearchConfig(
        epochs_search=cfg.epochs_search, epochs_finetune=cfg.epochs_finetune, lr=lr,
        momentum=cfg.momentum, lr_bits=cfg.lr_bits, beta=cfg.beta,
        s_target=s_target if pinned is None else None, size_unit=cfg.size_unit,
        pinned_bits=pinned, seed=cfg.seed)


def to_experiment(cfg):
    """Translate a run config into the experiment-protocol structures."""
    base = experiment.preset(cfg.task)
    return replace(
        base,
        dataset=replace(base.dataset, **cfg.dataset),
        model=dict(base.model, **cfg.model),
        task_args=dict(base.task_args, **cfg.task_args),
        float_epochs=cfg.epochs_float if cfg.epochs_float is not None else base.float_epochs,
        float_lr=cfg.lr_float if cfg.lr_float is not None else base.float_lr,
    )
