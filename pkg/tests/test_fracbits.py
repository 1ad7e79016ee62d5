import copy

import numpy as np
import pytest

from fracsed import autodiff as ad
from fracsed.accel import model_cost
from fracsed.data import SynthDatasetSpec, generate_dataset
from fracsed.fracbits import (
    InfeasibleTargetError, NonFiniteLossError, SearchConfig, SizeLossConfig, SizeTerm, bitwidth_grad,
    bracket, fractional_footprint, frozen_footprint, interp_fake_quant, interp_fake_quant_op,
    round_and_freeze, round_half_up, run_epoch, run_search, size_loss, total_loss,
    uniform_footprint,
)
from fracsed.models import Network, build_dcrnn_analogue, new_bitwidth_state
from fracsed.quant import QuantSpec, fake_quant, make_spec
from fracsed.tasks import GenericTask, train_float

from oracles import central_difference, rel_err


class TestInterp:
    @pytest.mark.parametrize("n", range(2, 9))
    def test_integer_collapse(self, n):
        x = np.random.default_rng(n).normal(size=(50,))
        spec = make_spec(x, n)
        assert np.array_equal(interp_fake_quant(x, float(n), spec, spec), fake_quant(x, spec))

    def test_fractional_blend(self):
        x = np.random.default_rng(0).normal(size=200)
        s4, s5 = make_spec(x, 4), make_spec(x, 5)
        out = interp_fake_quant(x, 4.3, s4, s5)
        f4, f5 = fake_quant(x, s4), fake_quant(x, s5)
        np.testing.assert_allclose(out, 0.7 * f4 + 0.3 * f5, rtol=0, atol=1e-15)

    def test_zero_input(self):
        x = np.zeros(5)
        s = QuantSpec(3, 0.5)
        assert np.array_equal(interp_fake_quant(x, 3.6, s, QuantSpec(4, 0.2)), x)

    def test_specs_must_bracket(self):
        x = np.ones(3)
        with pytest.raises(ValueError, match="bracket"):
            interp_fake_quant(x, 4.3, QuantSpec(5, 1.0), QuantSpec(6, 1.0))
        with pytest.raises(ValueError, match="bracket"):
            interp_fake_quant(x, 4.3, QuantSpec(3, 1.0), QuantSpec(5, 1.0))

    def test_bracket_affine_three_points(self):
        x = np.random.default_rng(1).normal(size=100)
        lo, hi = make_spec(x, 6), make_spec(x, 7)
        a, b, c = (interp_fake_quant(x, n, lo, hi) for n in (6.1, 6.4, 6.9))
        # b lies on the segment from a to c at fraction 3/8
        np.testing.assert_allclose(b, a + (c - a) * (0.3 / 0.8), rtol=0, atol=1e-14)

    def test_bracket_rule(self):
        assert bracket(4.3) == (4, 5)
        assert bracket(4.0) == (4, 5)
        assert bracket(8.0) == (7, 8)
        assert bracket(2.0) == (2, 3)


class TestBitwidthGrad:
    def test_zero_when_grids_agree(self):
        lo, hi = QuantSpec(4, 0.2), QuantSpec(5, 0.1)
        x = 0.2 * np.array([-7, -3, 0, 1, 5, 7], dtype=float)
        assert bitwidth_grad(np.ones_like(x), x, lo, hi) == 0.0

    def test_matches_central_difference(self):
        rng = np.random.default_rng(2)
        eps = 1e-4
        for _ in range(100):
            lo_bits = int(rng.integers(2, 8))
            n = lo_bits + rng.uniform(0.01, 0.99)
            x = rng.normal(size=int(rng.integers(5, 60))) * rng.uniform(0.1, 10)
            up = rng.normal(size=x.shape)
            lo, hi = make_spec(x, lo_bits), make_spec(x, lo_bits + 1)
            num = np.sum(up * (interp_fake_quant(x, n + eps, lo, hi)
                               - interp_fake_quant(x, n - eps, lo, hi))) / (2 * eps)
            ana = bitwidth_grad(up, x, lo, hi)
            assert rel_err(ana, num, floor=1e-12) <= 1e-8

    def test_linear_in_upstream(self):
        rng = np.random.default_rng(3)
        x, up = rng.normal(size=40), rng.normal(size=40)
        lo, hi = make_spec(x, 3), make_spec(x, 4)
        assert bitwidth_grad(2.5 * up, x, lo, hi) == pytest.approx(2.5 * bitwidth_grad(up, x, lo, hi), rel=1e-14)

    def test_op_gradients(self):
        rng = np.random.default_rng(4)
        w = ad.parameter(rng.normal(size=(4, 3)))
        n = ad.parameter(np.array(5.25))
        out = interp_fake_quant_op(w, n, np.abs(w.data).max(), None)
        up = rng.normal(size=(4, 3))
        ad.backward(ad.dot_const(out, up))
        lo, hi = make_spec(w.data, 5), make_spec(w.data, 6)
        assert n.grad == pytest.approx(bitwidth_grad(up, w.data, lo, hi), rel=1e-12)
        # both quantizers pass the weight gradient (no clipping at max-abs calibration)
        np.testing.assert_allclose(w.grad, up, rtol=1e-14)

    def test_op_integer_n_matches_fake_quant(self):
        w = ad.parameter(np.random.default_rng(5).normal(size=(6, 2)))
        for bits in range(2, 9):
            out = interp_fake_quant_op(w, ad.parameter(np.array(float(bits))), np.abs(w.data).max(axis=0), 1)
            assert np.array_equal(out.data, fake_quant(w.data, make_spec(w.data, bits, 1)))


class TestSizeLoss:
    def test_hand_example(self):
        cfg = SizeLossConfig(1000, scaler_bytes_per_channel=4, include_bias=False)
        assert size_loss([(1000, 4.0, 8)], cfg).item() == 468.0

    def test_zero_at_target(self):
        cfg = SizeLossConfig(1000 * 4 / 8 + 32, include_bias=False)
        assert size_loss([(1000, 4.0, 8)], cfg).item() == 0.0

    def test_bias_bytes_counted(self):
        cfg = SizeLossConfig(1000)
        assert size_loss([SizeTerm(1000, 4.0, 8, 8)], cfg).item() == 468.0 - 32

    def test_unit_normalization(self):
        cfg = SizeLossConfig(1000, include_bias=False, unit_bytes=4.0)
        assert size_loss([(1000, 4.0, 8)], cfg).item() == 117.0

    def test_gradient_sign_and_magnitude(self):
        for target, sign in ((100.0, 1.0), (1e6, -1.0)):
            n1, n2 = ad.parameter(np.array(5.5)), ad.parameter(np.array(3.2))
            cfg = SizeLossConfig(target, include_bias=False)
            ad.backward(total_loss(0.0, size_loss([(800, n1, 4), (160, n2, 2)], cfg), 0.1))
            assert n1.grad == pytest.approx(sign * 0.1 * 800 / 8)
            assert n2.grad == pytest.approx(sign * 0.1 * 160 / 8)

    def test_matches_central_difference(self):
        rng = np.random.default_rng(6)
        ns = [ad.parameter(np.array(v)) for v in rng.uniform(2, 8, size=3)]
        counts = [(300, 8), (1200, 16), (90, 10)]
        cfg = SizeLossConfig(700.0, unit_bytes=3.0)

        def f():
            return size_loss([(c, n, ch) for (c, ch), n in zip(counts, ns)], cfg)

        ad.backward(f())
        for n in ns:
            num = central_difference(lambda: f().item(), n.data, (), 1e-4)
            assert rel_err(float(n.grad), num) < 1e-6

    def test_rejects_empty_counts(self):
        with pytest.raises(ValueError):
            size_loss([(0, 4.0, 8)], SizeLossConfig(10))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            SizeLossConfig(0)
        with pytest.raises(ValueError):
            SizeLossConfig(10, beta=-1)


class TestTotalLoss:
    def test_examples(self):
        assert total_loss(1.0, 250.0, 0.1) == pytest.approx(26.0)
        assert total_loss(1.7, 250.0, 0.0) == 1.7
        assert total_loss(1.7, 0.0) == 1.7

    def test_tensor_inputs(self):
        t = total_loss(ad.Tensor(np.array(1.0)), ad.Tensor(np.array(250.0)), 0.1)
        assert t.item() == pytest.approx(26.0)


class TestFreeze:
    def test_rounding_rule(self):
        assert [round_half_up(v) for v in (4.3, 4.5, 4.49, 8.0, 2.5)] == [4, 5, 4, 8, 3]

    def test_round_and_freeze(self):
        states = [new_bitwidth_state(name, v) for name, v in
                  (("a", 4.3), ("b", 4.5), ("c", 8.0), ("d", 2.0), ("e", 7.6))]
        assert round_and_freeze(states) == [4, 5, 8, 2, 8]
        assert [s.n_frozen for s in states] == [4, 5, 8, 2, 8]

    def test_frozen_vs_fractional_bound(self):
        rng = np.random.default_rng(7)
        cfg = SizeLossConfig(1.0)
        for _ in range(50):
            k = int(rng.integers(1, 6))
            counts = rng.integers(1, 5000, size=k)
            fracs = rng.uniform(2, 8, size=k)
            terms = [SizeTerm(int(c), float(f), 4, 4) for c, f in zip(counts, fracs)]
            states = [new_bitwidth_state(str(i), f) for i, f in enumerate(fracs)]
            ints = round_and_freeze(states)
            frozen = frozen_footprint([SizeTerm(t.weight_count, b, 4, 4) for t, b in zip(terms, ints)], cfg)
            # per-tensor byte padding adds < 1 byte per tensor on top of the half-bit bound
            bound = sum(counts) / 16 + k
            assert abs(frozen - fractional_footprint(terms, cfg)) <= bound

    def test_frozen_footprint_needs_integers(self):
        with pytest.raises(ValueError):
            frozen_footprint([SizeTerm(10, 4.5, 1)], SizeLossConfig(1.0))


class TestFootprintAgreement:
    def test_dcrnn_uniform(self):
        spec = build_dcrnn_analogue()
        for b in range(2, 9):
            bits = {l.name: b for l in spec.searchable_layers}
            assert uniform_footprint(spec, b) == model_cost(spec, bits).memory_bytes

    def test_8bit_is_one_byte_per_weight(self):
        spec = build_dcrnn_analogue()
        rep = model_cost(spec, {l.name: 8 for l in spec.searchable_layers})
        for lc in rep.layers:
            assert lc.weight_bytes == spec.layer(lc.layer).weight_count


# ---------------------------------------------------------------------------
# search driver on a small task
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def small_setup():
    ds = generate_dataset(SynthDatasetSpec(num_classes=4, samples_per_class=80, noise=0.5,
                                           val_fraction=0.25, seed=0))
    task = GenericTask(ds, batch_size=16)
    net = Network(build_dcrnn_analogue(num_classes=4), seed=0)
    train_float(net, task, epochs=3, seed=0)
    return task, net


def _search(small_setup, seed, **kw):
    task, net = small_setup
    net = copy.deepcopy(net)
    cfg = SearchConfig(epochs_search=5, epochs_finetune=1, seed=seed, **kw)
    return net, run_search(net, task, cfg)


def weighted_mean_bits(spec, bits):
    counts = {l.name: l.weight_tensors()[0][1] for l in spec.searchable_layers}
    w = {k: int(np.prod(v)) for k, v in counts.items()}
    return sum(w[k] * bits[k] for k in w) / sum(w.values())


class TestRunSearch:
    def test_deterministic(self, small_setup):
        _, r1 = _search(small_setup, 3, s_target=5000.0)
        _, r2 = _search(small_setup, 3, s_target=5000.0)
        assert r1.bits == r2.bits
        assert r1.accuracy == r2.accuracy

    def test_result_and_history(self, small_setup):
        net, r = _search(small_setup, 0, s_target=6000.0)
        assert net.mode == "frozen"
        assert set(r.bits) == {"conv1", "conv2", "rnn", "fc"}
        assert r.footprint_bytes == model_cost(net.spec, r.bits).memory_bytes
        phases = [h["phase"] for h in r.history]
        assert phases == ["search"] * 5 + ["finetune"]
        assert all("accuracy" in h and "footprint_bytes" in h for h in r.history)

    def test_full_budget_keeps_high_bits(self, small_setup):
        spec = small_setup[1].spec
        f8 = uniform_footprint(spec, 8)
        means = [weighted_mean_bits(spec, _search(small_setup, s, s_target=float(f8))[1].bits)
                 for s in range(5)]
        assert np.mean(means) >= 7

    def test_minimum_budget_drives_bits_down(self, small_setup):
        spec = small_setup[1].spec
        f2 = uniform_footprint(spec, 2)
        means = [weighted_mean_bits(spec, _search(small_setup, s, s_target=float(f2), lr_bits=0.2)[1].bits)
                 for s in range(5)]
        assert np.mean(means) <= 3

    def test_infeasible_target(self, small_setup):
        spec = small_setup[1].spec
        with pytest.raises(InfeasibleTargetError):
            _search(small_setup, 0, s_target=uniform_footprint(spec, 2) - 1.0)

    def test_pinned_run_is_fixed_qat(self, small_setup):
        net, r = _search(small_setup, 0, pinned_bits=4)
        assert net.mode == "fixed"
        assert set(r.bits.values()) == {4}
        assert r.footprint_bytes == uniform_footprint(net.spec, 4)

    def test_non_finite_loss_names_layer(self, small_setup):
        task, net = small_setup
        net = copy.deepcopy(net)
        net.params["conv2.weight"].data[0, 0, 0, 0] = np.nan
        opt = ad.SGD(net.weight_params(), 0.01)
        with pytest.raises(NonFiniteLossError, match="conv2") as info:
            run_epoch(net, task, np.random.default_rng(0), opt, epoch=3)
        assert info.value.epoch == 3 and info.value.layer == "conv2"

    def test_config_validation(self):
        with pytest.raises(ValueError):
            SearchConfig(s_target=100.0, epochs_search=0)
        with pytest.raises(ValueError):
            SearchConfig()
