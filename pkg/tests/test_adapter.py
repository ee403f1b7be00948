"""Adapter contracts: projection, temporal attention, gate, equivalences."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import slicegate.numerics as N
from slicegate.adapter import GateDiagnostics, TemporalModel, adapter_parameter_count
from slicegate.errors import NumericError
from slicegate.model import BaselineModel, ModelConfig
from slicegate.numerics import Tensor, grad_check

SIGMOID_MINUS_5 = 0.0066928509242848554


def temporal(config, seed=0):
    return TemporalModel(config, seed=seed)


def rand_window(config, rng, batch=1):
    hw = config.slice_hw
    return rng.random((batch, 5, hw, hw)) * 255


class TestProjectTokens:
    def test_identical_slices_zero_epos_collapse(self, tiny_config, rng):
        model = temporal(tiny_config)
        model.params["adapter.e_pos"].data[:] = 0.0
        one = rng.random((1, 1, 16, 16)) * 255
        window = np.repeat(one, 5, axis=1)
        tokens = [model.encode(window[:, j]) for j in range(5)]
        proj = model.adapter.project_tokens(N.stack(tokens, axis=1)).data
        for j in range(1, 5):
            np.testing.assert_allclose(proj[:, :, j], proj[:, :, 0], atol=1e-12)

    def test_nonzero_epos_adds_exact_rows(self, tiny_config, rng):
        model = temporal(tiny_config)
        e_pos = model.params["adapter.e_pos"]
        window = np.repeat(rng.random((1, 1, 16, 16)) * 255, 5, axis=1)
        tokens = N.stack([model.encode(window[:, j]) for j in range(5)], axis=1)
        with_epos = model.adapter.project_tokens(tokens).data
        e_pos_saved = e_pos.data.copy()
        e_pos.data[:] = 0.0
        without = model.adapter.project_tokens(tokens).data
        np.testing.assert_allclose(with_epos - without,
                                   np.broadcast_to(e_pos_saved, with_epos.shape), atol=1e-12)

    def test_shape_audit_toy_scale(self, toy_config, rng):
        model = temporal(toy_config)
        window = Tensor(rng.standard_normal((1, 5, 64, 96)).astype(np.float32))
        assert model.adapter.project_tokens(window).shape == (1, 64, 5, 32)


class TestTemporalAttend:
    def _center_out(self, model, stacks, swap=False):
        x = stacks.copy()
        if swap:
            x[:, [0, 4]] = x[:, [4, 0]]
        tokens = N.stack([model.encode(x[:, j]) for j in range(5)], axis=1)
        proj = model.adapter.project_tokens(tokens)
        return model.adapter.temporal_attend(proj).data

    def test_edge_swap_invariant_when_epos_zero(self, tiny_config, rng):
        model = temporal(tiny_config)
        model.params["adapter.e_pos"].data[:] = 0.0
        stacks = rand_window(tiny_config, rng)
        a = self._center_out(model, stacks)
        b = self._center_out(model, stacks, swap=True)
        np.testing.assert_allclose(a, b, atol=1e-6)

    def test_edge_swap_sensitive_with_epos(self, tiny_config, rng):
        model = temporal(tiny_config)
        stacks = rand_window(tiny_config, rng)
        a = self._center_out(model, stacks)
        b = self._center_out(model, stacks, swap=True)
        assert np.abs(a - b).max() > 1e-6

    def test_gradcheck_through_temporal_stack(self, tiny_config):
        # 4-token miniature at D_proj = 8
        model = temporal(tiny_config)
        ad = model.adapter
        x = Tensor(np.random.default_rng(3).standard_normal((1, 4, 5, 8)), requires_grad=True)
        picks = [model.params[n] for n in
                 ("adapter.temporal0.attn.wq", "adapter.temporal3.mlp.w2", "adapter.w_out",
                  "adapter.e_pos")]

        def f(x_, *ps):
            return N.reduce_sum(ad.temporal_attend(N.add(x_, ad.e_pos)))

        res = grad_check(f, [x] + picks)
        assert res.passed, res.max_rel_error


class TestSpatialRefine:
    def test_single_token_reduces_to_value_projection_path(self, tiny_config, rng):
        model = temporal(tiny_config)
        layer = model.adapter.spatial
        x = Tensor(rng.standard_normal((1, 1, 8)))
        z = N.add(x, layer.attn.value_projection(layer.ln1(x)))
        expected = N.add(z, layer.mlp(layer.ln2(z)))
        np.testing.assert_allclose(model.adapter.spatial_refine(x).data, expected.data,
                                   atol=1e-12)

    def test_shape_preserved(self, toy_config, rng):
        model = temporal(toy_config)
        x = Tensor(rng.standard_normal((2, 64, 96)).astype(np.float32))
        assert model.adapter.spatial_refine(x).shape == (2, 64, 96)

    def test_gradcheck_miniature(self, tiny_config):
        model = temporal(tiny_config)
        x = Tensor(np.random.default_rng(5).standard_normal((1, 4, 8)), requires_grad=True)
        res = grad_check(lambda t: N.reduce_sum(model.adapter.spatial_refine(t)), [x])
        assert res.passed, res.max_rel_error


class TestGateFuse:
    def test_init_gate_is_sigmoid_minus_five(self, tiny_config, rng):
        model = temporal(tiny_config)
        for _ in range(20):
            h_t = Tensor(rng.standard_normal((2, 4, 8)))
            h_s = Tensor(rng.standard_normal((2, 4, 8)))
            _, g, _ = model.adapter.gate_fuse(h_t, h_s)
            np.testing.assert_allclose(g.data, SIGMOID_MINUS_5, atol=1e-9)

    def test_clamped_gate_returns_h_single_bit_identical(self, tiny_config, rng):
        model = temporal(tiny_config)
        h_t = Tensor(rng.standard_normal((1, 4, 8)))
        h_s = Tensor(rng.standard_normal((1, 4, 8)))
        fused, g, penalty = model.adapter.gate_fuse(h_t, h_s, clamp_zero=True)
        np.testing.assert_array_equal(fused.data, h_s.data)
        assert g.data.max() == 0.0 and float(penalty.data) == 0.0

    def test_formula_at_gate_zero_is_exact(self, tiny_config, rng):
        # Eq. definition with g = 0 also gives h_single exactly in floats.
        h_t = Tensor(rng.standard_normal((1, 4, 8)))
        h_s = Tensor(rng.standard_normal((1, 4, 8)))
        g = Tensor(np.zeros((1, 4, 1)))
        fused = N.add(N.mul(g, h_t), N.mul(N.add(N.mul(g, -1.0), 1.0), h_s))
        np.testing.assert_array_equal(fused.data, h_s.data)

    def test_half_gate_penalty_value(self, tiny_config):
        model = temporal(tiny_config)
        model.params["adapter.b_g"].data[:] = 0.0  # sigmoid(0) = 0.5 everywhere
        h = Tensor(np.random.default_rng(0).standard_normal((1, 4, 8)))
        _, g, penalty = model.adapter.gate_fuse(h, h)
        np.testing.assert_allclose(g.data, 0.5, atol=1e-12)
        assert float(penalty.data) == pytest.approx(0.25, abs=1e-12)
        assert 0.001 * float(penalty.data) == pytest.approx(2.5e-4, abs=1e-12)

    def test_shape_mismatch_rejected(self, tiny_config):
        model = temporal(tiny_config)
        with pytest.raises(NumericError):
            model.adapter.gate_fuse(Tensor(np.zeros((1, 4, 8))), Tensor(np.zeros((1, 5, 8))))

    @given(st.floats(min_value=-30.0, max_value=30.0))
    @settings(max_examples=60, deadline=None)
    def test_penalty_bounds(self, bias):
        g = 1.0 / (1.0 + np.exp(-bias))
        penalty = float(np.mean(g * (1.0 - g)))
        GateDiagnostics(g=np.full((4, 1), g), penalty=penalty)  # validates bounds
        assert 0.0 <= penalty <= 0.25

    def test_penalty_zero_iff_gate_saturated(self):
        for g_val, expect_zero in ((0.0, True), (1.0, True), (0.3, False)):
            penalty = g_val * (1 - g_val)
            assert (penalty == 0.0) is expect_zero


class TestForwardTemporal:
    def test_gate_zero_equivalence_exact_float64(self, tiny_config, rng):
        base = BaselineModel(tiny_config, seed=11)
        temp = TemporalModel(tiny_config, seed=11)
        temp.gate_clamp_zero = True
        stacks = rand_window(tiny_config, rng, batch=3)
        ids = np.array([0, 1, 0])
        with N.no_grad():
            logits_t, _, _ = temp.forward_batch(stacks, ids)
            logits_b = base.forward_batch(stacks[:, 2], ids)
        np.testing.assert_array_equal(logits_t.data, logits_b.data)

    def test_gate_zero_equivalence_float32(self, rng):
        config32 = ModelConfig(slice_hw=16, patch=4, d_v=8, d_p=8, d_proj=8, heads=2,
                               encoder_depth=1, decoder_depth=1,
                               class_names=("blob", "lens"), dtype="float32")
        base = BaselineModel(config32, seed=3)
        temp = TemporalModel(config32, seed=3)
        temp.gate_clamp_zero = True
        stacks = rand_window(config32, rng, batch=2)
        ids = np.array([1, 0])
        with N.no_grad():
            logits_t, _, _ = temp.forward_batch(stacks, ids)
            logits_b = base.forward_batch(stacks[:, 2], ids)
        np.testing.assert_allclose(logits_t.data, logits_b.data, atol=1e-6)

    def test_init_gate_uniform_across_batch(self, tiny_config, rng):
        model = temporal(tiny_config)
        stacks = rand_window(tiny_config, rng, batch=4)
        with N.no_grad():
            _, g, _ = model.forward_batch(stacks, np.array([0, 1, 0, 1]))
        np.testing.assert_allclose(g.data, SIGMOID_MINUS_5, atol=1e-9)

    def test_eval_mode_deterministic(self, tiny_config, rng):
        model = temporal(tiny_config)
        stacks = rand_window(tiny_config, rng)
        with N.no_grad():
            a, _, _ = model.forward_batch(stacks, np.array([0]))
            b, _, _ = model.forward_batch(stacks, np.array([0]))
        np.testing.assert_array_equal(a.data, b.data)

    def test_full_gradcheck_miniature(self, tiny_config):
        # BCE of the whole temporal forward on a 16x16/patch-4 miniature.
        # The gate is moved off its suppressing init so the temporal path
        # carries O(1) gradients (the check is at a generic point).
        model = temporal(tiny_config)
        rng = np.random.default_rng(17)
        model.params["adapter.w_g"].data[:] = rng.normal(0, 0.2, size=(8, 1))
        model.params["adapter.b_g"].data[:] = 0.0
        stacks = rand_window(tiny_config, rng)
        target = Tensor((rng.random((1, 16, 16)) > 0.7).astype(np.float64))
        ids = np.array([1])

        params = list(model.params.values())

        def f(*ps):
            logits, _, penalty = model.forward_batch(stacks, ids)
            return N.add(N.bce_with_logits(logits, target), N.mul(penalty, 0.001))

        res = grad_check(f, params, max_coords_per_input=6, rng=np.random.default_rng(0))
        assert res.passed, (res.max_rel_error,
                            params[res.worst_input].name, res.worst_coord)


class TestSingleSampleSurfaces:
    def _stack(self, tiny_config, rng):
        from slicegate.data import ContextStack

        slices = (rng.random((5, 16, 16)) * 255).astype(np.float32)
        target = np.zeros((16, 16), dtype=np.float32)
        target[4:8, 4:8] = 1.0
        return ContextStack(slices=slices, center_z=7, slice_indices=(5, 6, 7, 8, 9),
                            replicated_count=0, class_name="lens",
                            target_mask=target, is_negative=False)

    def test_forward_temporal_matches_batched_path(self, tiny_config, rng):
        model = temporal(tiny_config)
        stack = self._stack(tiny_config, rng)
        with N.no_grad():
            out, diag = model.forward_temporal(stack)
            cid = model.prompt_table.class_id("lens")
            logits, g, penalty = model.forward_batch(stack.slices[None], np.array([cid]))
        np.testing.assert_array_equal(out.logits.data, logits.data[0])
        np.testing.assert_array_equal(diag.g, g.data[0])
        assert diag.penalty == pytest.approx(float(penalty.data))
        assert out.slice_index == 7 and out.class_name == "lens"

    def test_window_tokens_bookkeeping(self, tiny_config, rng):
        from slicegate.adapter import WindowTokens

        model = temporal(tiny_config)
        stack = self._stack(tiny_config, rng)
        window = model.window_tokens(stack)
        assert isinstance(window, WindowTokens)
        assert window.tokens.shape == (5, 16, 8)
        assert window.slice_indices == (5, 6, 7, 8, 9)

    def test_window_tokens_rejects_bad_shape(self, tiny_config):
        from slicegate.adapter import WindowTokens

        with pytest.raises(NumericError):
            WindowTokens(tokens=Tensor(np.zeros((4, 16, 8))),
                         slice_indices=(0, 1, 2, 3))
        with pytest.raises(NumericError):
            WindowTokens(tokens=Tensor(np.zeros((5, 16, 8))),
                         slice_indices=(5, 4, 3, 2, 1))


class TestParameterCensus:
    def test_adapter_count_matches_closed_form(self, tiny_config, toy_config):
        for config in (tiny_config, toy_config):
            model = temporal(config)
            actual = sum(p.data.size for n, p in model.params.items()
                         if n.startswith("adapter."))
            assert actual == adapter_parameter_count(config)

    def test_drop_path_schedule_on_temporal_layers(self, toy_config):
        model = temporal(toy_config)
        rates = [layer.drop_path_rate for layer in model.adapter.temporal_layers]
        assert rates == pytest.approx([0.0, 1 / 30, 1 / 15, 0.1])
        assert model.adapter.spatial.drop_path_rate == 0.0

    def test_gate_init_values_exact(self, toy_config):
        model = temporal(toy_config)
        assert np.all(model.params["adapter.w_g"].data == 0.0)
        assert np.all(model.params["adapter.b_g"].data == -5.0)
