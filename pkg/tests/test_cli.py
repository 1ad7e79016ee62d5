import csv
import json
import os
import subprocess
import sys

import numpy as np
import pytest
import yaml

from fracsed import checkpoint
from fracsed.accel import model_cost
from fracsed.cli import PARETO_COLUMNS, main
from fracsed.data import load_dataset

TINY = {
    "task": "generic",
    "dataset": {"num_classes": 4, "samples_per_class": 80, "noise": 0.0, "val_fraction": 0.2},
    "epochs_float": 4,
    "epochs_search": 2,
    "epochs_finetune": 2,
    # few optimizer steps on this dataset, so the bitwidths need a larger step
    "lr_bits": 0.4,
}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    with open(d / "tiny.yaml", "w") as fh:
        yaml.safe_dump(TINY, fh)
    return d


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def runs(workdir):
    cfg = workdir / "tiny.yaml"
    out = {}
    assert run("train", "--config", cfg, "--mode", "float", "--out", workdir / "float") == 0
    for b in (8, 4):
        assert run("train", "--config", cfg, "--mode", "fixed", "--bits", b, "--out", workdir / f"w{b}") == 0
    assert run("search", "--config", cfg, "--out", workdir / "frac") == 0
    for name in ("float", "w8", "w4", "frac"):
        out[name] = workdir / name
    return out


def metrics(d):
    with open(d / "metrics.json") as fh:
        return json.load(fh)


class TestTrain:
    def test_outputs(self, runs):
        for d in runs.values():
            names = set(os.listdir(d))
            assert {"config.resolved.json", "model.bin", "model.json", "bitwidths.json", "metrics.json"} <= names

    def test_float_separable(self, runs):
        assert metrics(runs["float"])["accuracy"] >= 0.95

    def test_eight_bit_close_to_float(self, runs):
        assert abs(metrics(runs["w8"])["accuracy"] - metrics(runs["float"])["accuracy"]) <= 0.01

    def test_deterministic_checkpoint(self, runs, workdir):
        again = workdir / "w4-again"
        assert run("train", "--config", workdir / "tiny.yaml", "--mode", "fixed", "--bits", 4,
                   "--out", again) == 0
        for name in ("model.bin", "model.json", "bitwidths.json", "metrics.json"):
            assert (again / name).read_bytes() == (runs["w4"] / name).read_bytes(), name

    def test_checkpoint_reloads(self, runs):
        net = checkpoint.load(runs["w4"])
        assert net.mode == "fixed" and net.fixed_bits == 4
        with open(runs["w4"] / "model.json") as fh:
            manifest = json.load(fh)
        raw = np.fromfile(runs["w4"] / "model.bin", dtype="<f8")
        t = manifest["tensors"][0]
        stored = raw[t["offset"] // 8: (t["offset"] + t["nbytes"]) // 8].reshape(t["shape"])
        assert np.array_equal(stored, net.params[t["name"]].data)

    def test_resolved_config_reproduces(self, runs, workdir):
        again = workdir / "w4-from-resolved"
        assert run("train", "--config", runs["w4"] / "config.resolved.json", "--out", again) == 0
        assert (again / "model.bin").read_bytes() == (runs["w4"] / "model.bin").read_bytes()

    def test_bad_bitwidth_refused(self, workdir, capsys):
        assert run("train", "--config", workdir / "tiny.yaml", "--mode", "fixed", "--bits", 9,
                   "--out", workdir / "bad") == 2
        assert "'bits'" in capsys.readouterr().err
        assert not (workdir / "bad").exists()


class TestConfigErrors:
    def test_unknown_field_named(self, workdir, capsys):
        p = workdir / "typo.yaml"
        p.write_text("task: generic\nepochs_flaot: 3\n")
        assert run("train", "--config", p, "--out", workdir / "typo") == 2
        assert "epochs_flaot" in capsys.readouterr().err

    def test_bad_value_named(self, workdir, capsys):
        p = workdir / "neg.yaml"
        p.write_text("lr: -1\n")
        assert run("train", "--config", p, "--out", workdir / "neg") == 2
        assert "'lr'" in capsys.readouterr().err

    def test_missing_config_file(self, workdir):
        assert run("train", "--config", workdir / "nope.yaml", "--out", workdir / "x") == 2

    def test_non_empty_out_refused(self, runs, workdir):
        before = sorted(os.listdir(runs["w8"]))
        assert run("train", "--config", workdir / "tiny.yaml", "--out", runs["w8"]) == 2
        assert sorted(os.listdir(runs["w8"])) == before


class TestSearch:
    def test_footprint_near_target(self, runs):
        m = metrics(runs["frac"])
        assert abs(m["footprint_bytes"] - m["s_target"]) <= 0.05 * m["s_target"]
        assert m["s_target"] == 0.5 * m["footprint_8bit"]

    def test_bitwidths_file(self, runs):
        with open(runs["frac"] / "bitwidths.json") as fh:
            bits = json.load(fh)
        assert set(bits) == {"conv1", "conv2", "rnn", "fc"}
        assert all(isinstance(b, int) and 2 <= b <= 8 for b in bits.values())

    def test_infeasible_leaves_nothing(self, workdir, capsys):
        out = workdir / "infeasible"
        assert run("search", "--config", workdir / "tiny.yaml", "--s-target", 100, "--out", out) == 3
        assert "infeasible" in capsys.readouterr().err
        assert not out.exists()
        assert not [n for n in os.listdir(workdir) if n.startswith(".infeasible")]


class TestSimulate:
    def test_fracbits_memory_matches_footprint(self, runs, workdir):
        out = workdir / "sim-frac"
        assert run("simulate", runs["frac"], "--out", out) == 0
        with open(out / "cost.json") as fh:
            cost = json.load(fh)
        assert cost["total"]["memory_bytes"] == metrics(runs["frac"])["footprint_bytes"]
        assert cost["equivalence"]["inputs"] == 10
        with open(out / "cost.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert [r["layer"] for r in rows] == ["conv1", "conv2", "rnn", "fc"]

    def test_eight_bit_weight_bytes(self, runs, workdir):
        out = workdir / "sim-w8"
        assert run("simulate", runs["w8"], "--out", out) == 0
        net = checkpoint.load(runs["w8"])
        with open(out / "cost.csv") as fh:
            for row, layer in zip(csv.DictReader(fh), net.spec.weight_layers):
                assert int(row["weight_bytes"]) == layer.weight_count

    def test_float_run_refused(self, runs, workdir):
        assert run("simulate", runs["float"], "--out", workdir / "sim-float") == 2

    def test_mismatch_is_exit_4(self, runs, workdir, tmp_path):
        broken = tmp_path / "broken"
        os.makedirs(broken)
        for name in os.listdir(runs["w4"]):
            (broken / name).write_bytes((runs["w4"] / name).read_bytes())
        m = metrics(broken)
        m["footprint_bytes"] += 1
        (broken / "metrics.json").write_text(json.dumps(m))
        assert run("simulate", broken) == 4


class TestPareto:
    def test_table(self, runs, workdir):
        out = workdir / "pareto"
        dirs = [runs[k] for k in ("float", "w8", "w4", "frac")]
        assert run("pareto", *dirs, "--out", out) == 0
        with open(out / "pareto.csv") as fh:
            reader = csv.reader(fh)
            assert tuple(next(reader)) == PARETO_COLUMNS
            rows = list(reader)
        assert len(rows) == 4
        by_name = {r[1]: dict(zip(PARETO_COLUMNS, r)) for r in rows}
        assert float(by_name["w8"]["memory_reduction_pct"]) == 0.0
        assert by_name["float"]["latency_s"] == ""
        w8 = model_cost(checkpoint.load(runs["w8"]).spec, {n: 8 for n in ("conv1", "conv2", "rnn", "fc")})
        w4_mem = int(by_name["w4"]["memory_bytes"])
        assert float(by_name["w4"]["memory_reduction_pct"]) == pytest.approx(100 * (1 - w4_mem / w8.memory_bytes))
        with open(out / "pareto.json") as fh:
            assert json.load(fh)["baseline"] == "w8"

    def test_single_run_refused(self, runs, workdir, capsys):
        assert run("pareto", runs["w8"], "--out", workdir / "p1") == 2
        assert "usage" in capsys.readouterr().err
        assert not (workdir / "p1").exists()

    def test_mixed_tasks_refused(self, runs, workdir, tmp_path):
        other = tmp_path / "other"
        os.makedirs(other)
        for name in os.listdir(runs["w4"]):
            (other / name).write_bytes((runs["w4"] / name).read_bytes())
        cfg = json.loads((other / "config.resolved.json").read_text())
        cfg["task"] = "fewshot"
        (other / "config.resolved.json").write_text(json.dumps(cfg))
        assert run("pareto", runs["w8"], other, "--out", workdir / "pmix") == 2


def test_gen_data(workdir):
    out = workdir / "data"
    assert run("gen-data", "--config", workdir / "tiny.yaml", "--seed", 3, "--out", out) == 0
    ds = load_dataset(out / "dataset")
    assert len(ds.y) == 320 and ds.num_classes == 4 and ds.spec.seed == 3


def test_console_script_exit_code(workdir):
    p = subprocess.run([sys.executable, "-m", "fracsed.cli", "pareto", "--out", str(workdir / "px")],
                       capture_output=True, text=True)
    assert p.returncode == 2
    assert "usage: fracsed pareto" in p.stderr
