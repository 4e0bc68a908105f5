"""The finite-difference checker: it passes on real gradients and, just as
important, fails when a gradient is wrong."""

import numpy as np
import pytest

from anticipate import tensor as T
from anticipate.blocks import CausalDecoder, EncoderBlock
from anticipate.gradcheck import (
    CheckResult,
    check,
    module_checks,
    op_checks,
    probe,
    probe_weights,
    rand_param,
)
from anticipate.rngstream import rng_stream


def run_named_check(cases, wanted):
    for name, runner in cases:
        if name == wanted:
            return runner()
    raise AssertionError(f"no check named {wanted!r}")


class TestResultRule:
    def test_pass_fail_threshold(self):
        assert CheckResult("x", 9e-6, 1e-5).passed
        assert not CheckResult("x", 1e-5, 1e-5).passed
        assert not CheckResult("x", float("nan"), 1e-5).passed
        assert not CheckResult("x", float("inf"), 1e-5).passed


class TestHarness:
    def test_quadratic_by_hand(self):
        x = T.Tensor(np.array([0.3, -0.7, 1.1]), requires_grad=True)
        result = check("quad", lambda: T.reduce_sum(T.mul(x, x)), [x])
        assert result.passed
        assert result.max_rel_err < 1e-7

    def test_unused_parameter_counts_as_zero(self):
        x = T.Tensor(np.array([1.0, 2.0]), requires_grad=True)
        unused = T.Tensor(np.array([5.0]), requires_grad=True)
        result = check("partial", lambda: T.reduce_sum(x), [x, unused])
        assert result.passed

    def test_wrong_gradient_is_caught(self):
        # value-preserving rewrite with a doubled gradient: 2*f(x) - f(x).data
        x = T.Tensor(np.array([0.2, 0.9]), requires_grad=True)

        def fn():
            y = T.mul(x, x)
            return T.reduce_sum(T.sub(T.scale(y, 2.0), T.Tensor(y.data.copy())))

        result = check("doubled", fn, [x])
        assert not result.passed
        assert result.max_rel_err > 0.1
        assert result.name == "doubled"

    def test_rand_param_size_guard(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ValueError):
            rand_param(rng, (9, 9))


class TestOpChecks:
    def test_registry_covers_core_ops(self):
        names = [name for name, _ in op_checks()]
        assert len(names) == len(set(names))
        for required in ("matmul", "softmax", "layer_norm", "embedding_lookup",
                         "cross_entropy_with_logits", "bag_project"):
            assert required in names

    @pytest.mark.parametrize("name", [
        "scale", "softmax", "add_broadcast", "matmul",
        "embedding_lookup", "cross_entropy_with_logits",
    ])
    def test_representative_ops_pass(self, name):
        result = run_named_check(op_checks(), name)
        assert result.passed, f"{name}: {result.max_rel_err:.3e}"

    def test_sabotaged_backward_is_named(self, monkeypatch):
        real = T.gelu

        def lying_gelu(x):
            # same forward values, gradient doubled
            y = real(x)
            return T.sub(T.scale(y, 2.0), T.Tensor(y.data.copy()))

        monkeypatch.setattr(T, "gelu", lying_gelu)
        result = run_named_check(op_checks(), "gelu")
        assert not result.passed
        assert result.name == "gelu"
        assert result.max_rel_err > 1e-2


class TestModuleChecks:
    def test_registry_names(self):
        names = [name for name, _ in module_checks()]
        for required in ("multi_head_attention", "token_fuser",
                         "causal_decoder", "model_classification",
                         "model_pretrain_total"):
            assert required in names

    @pytest.mark.parametrize("name", [
        "multi_head_attention", "token_fuser_missing_modality",
        "contrastive_loss", "feature_loss",
    ])
    def test_representative_modules_pass(self, name):
        result = run_named_check(module_checks(), name)
        assert result.passed, f"{name}: {result.max_rel_err:.3e}"

    def test_seed_changes_test_point_not_verdict(self):
        a = run_named_check(module_checks(111), "contrastive_loss")
        b = run_named_check(module_checks(222), "contrastive_loss")
        assert a.passed and b.passed
        assert a.max_rel_err != b.max_rel_err


class TestDeepComposites:
    def test_two_stacked_blocks(self):
        g = rng_stream(2468, 1)
        first = EncoderBlock(4, 2, g, np.float64)
        second = EncoderBlock(4, 2, g, np.float64)
        x = rand_param(g, (2, 3, 4))
        w = probe_weights(g, (2, 3, 4))
        params = [x] + first.params() + second.params()
        result = check("stacked_blocks", lambda: probe(second(first(x)), w),
                       params, step=1e-5)
        assert result.passed, f"stacked blocks: {result.max_rel_err:.3e}"

    def test_full_width_decoder_spot_check(self):
        # Exhaustive differencing is too slow at production width; probe ten
        # random coordinates by hand against one taped backward pass instead.
        g = rng_stream(2468, 2)
        dec = CausalDecoder(dim=64, heads=4, depth=2, max_len=16, rng=g,
                            dtype=np.float64)
        x = T.Tensor(g.normal(size=(1, 16, 64)), requires_grad=True,
                     dtype=np.float64)
        w = g.uniform(-1.0, 1.0, size=(1, 16, 64))

        def loss():
            return T.reduce_sum(T.mul(dec(x), T.Tensor(w, dtype=np.float64)))

        params = [x] + dec.params()
        for p in params:
            p.zero_grad()
        with T.recording() as tape:
            value = loss()
        T.backward(tape, value)
        assert np.isfinite(value.item())

        coords = [(p, i) for p in params for i in range(p.data.size)]
        worst = 0.0
        for k in g.choice(len(coords), size=10, replace=False):
            p, i = coords[int(k)]
            flat = p.data.reshape(-1)
            analytic = float(p.grad.reshape(-1)[i])
            orig = flat[i]
            h = 1e-5 * max(1.0, abs(orig))
            flat[i] = orig + h
            hi = loss().item()
            flat[i] = orig - h
            lo = loss().item()
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * h)
            rel = abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))
            worst = max(worst, rel)
        assert worst < 1e-5, f"decoder spot check: {worst:.3e}"
