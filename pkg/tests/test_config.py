import json

import pytest

from fracsed import config
from fracsed.config import ConfigError, RunConfig
from fracsed.experiment import preset


def test_defaults_round_trip():
    cfg = config.load()
    assert cfg == RunConfig()
    assert config.from_dict(json.loads(cfg.to_json())) == cfg


def test_flags_override_file(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("task: fewshot\nseed: 3\ndataset:\n  noise: 0.2\n")
    cfg = config.load(p, {"seed": 7, "mode": None})
    assert (cfg.task, cfg.seed, cfg.mode, cfg.dataset) == ("fewshot", 7, "float", {"noise": 0.2})


@pytest.mark.parametrize("d,field", [
    ({"task": "speech"}, "task"),
    ({"mode": "fixed"}, "bits"),
    ({"mode": "fixed", "bits": 1}, "bits"),
    ({"seed": -1}, "seed"),
    ({"epochs_search": 0}, "epochs_search"),
    ({"epochs_float": 2.5}, "epochs_float"),
    ({"momentum": 1.0}, "momentum"),
    ({"beta": -0.1}, "beta"),
    ({"s_target": 0}, "s_target"),
    ({"dataset": {"seed": 1}}, "dataset.seed"),
    ({"dataset": {"num_classes": 1}}, "dataset"),
    ({"dataset": [1]}, "dataset"),
    ({"colour": "red"}, "colour"),
])
def test_errors_name_the_field(d, field):
    with pytest.raises(ConfigError) as exc:
        config.from_dict(d)
    assert exc.value.field == field
    assert f"'{field}'" in str(exc.value)


def test_bad_yaml(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("task: [unclosed\n")
    with pytest.raises(ConfigError, match="invalid YAML"):
        config.load(p)


def test_search_config_by_mode():
    assert config.search_config(RunConfig()).pinned_bits == 8
    fixed = config.search_config(RunConfig(mode="fixed", bits=3))
    assert fixed.pinned_bits == 3 and fixed.s_target is None
    frac = config.search_config(RunConfig(mode="fracbits"), s_target=5000.0)
    assert frac.pinned_bits is None and frac.s_target == 5000.0


def test_learning_rate_falls_back_to_preset():
    for task in ("generic", "fewshot"):
        assert config.search_config(RunConfig(task=task)).lr == preset(task).search.lr
    assert config.search_config(RunConfig(lr=0.3)).lr == 0.3


def test_to_experiment_merges_preset():
    exp = config.to_experiment(RunConfig(task="fewshot", dataset={"noise": 0.1}, epochs_float=2))
    base = preset("fewshot")
    assert exp.dataset.noise == 0.1 and exp.dataset.num_classes == base.dataset.num_classes
    assert exp.float_epochs == 2 and exp.float_lr == base.float_lr
    assert exp.task_args == base.task_args
