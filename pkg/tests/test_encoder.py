import numpy as np
import pytest

from helpers import finite_diff_grads, max_rel_error
from tokenprune import tensor as T
from tokenprune.encoder import (
    EncoderParams,
    ModelConfig,
    downstream_loss,
    embed,
    layer_forward,
    mha_forward,
    model_forward,
)
from tokenprune.errors import ConfigError, DegenerateAttentionError, InputError
from tokenprune.rng import Rng
from tokenprune.tensor import Tensor


def small_cfg(**kw):
    base = dict(num_layers=2, hidden=8, ffn_inner=16, heads=2, vocab_size=12, max_len=8, num_classes=2)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture(scope="module")
def params():
    return EncoderParams.init(small_cfg(), Rng(57))


class TestConfig:
    def test_divisibility_enforced(self):
        with pytest.raises(ConfigError):
            small_cfg(hidden=9)

    def test_min_layers(self):
        with pytest.raises(ConfigError):
            small_cfg(num_layers=0)


class TestEmbed:
    def test_single_token_definition(self, params):
        out = embed(params, [5])
        np.testing.assert_allclose(out.data[0], params["tok_emb"].data[5] + params["pos_emb"].data[0], atol=1e-15)

    def test_zero_positional_table(self):
        p = EncoderParams.init(small_cfg(), Rng(1))
        p["pos_emb"].data[...] = 0.0
        a = embed(p, [4, 5], positions=[0, 1])
        b = embed(p, [4, 5], positions=[3, 6])
        np.testing.assert_array_equal(a.data, b.data)

    def test_permutation_preserves_component_multiset(self, params):
        a = embed(params, [4, 5])
        b = embed(params, [5, 4])
        tok = params["tok_emb"].data
        pos = params["pos_emb"].data
        np.testing.assert_allclose(a.data[0] - pos[0], tok[4], atol=1e-15)
        np.testing.assert_allclose(b.data[1] - pos[1], tok[4], atol=1e-15)

    def test_id_out_of_range(self, params):
        with pytest.raises(InputError):
            embed(params, [99])

    def test_too_long(self, params):
        with pytest.raises(InputError):
            embed(params, list(range(9)), positions=list(range(9)))


class TestMha:
    def test_rows_sum_to_one(self, params):
        x = Tensor(np.random.default_rng(0).normal(size=(5, 8)))
        _, attn = mha_forward(x, params.layer(0), None, params.cfg)
        np.testing.assert_allclose(attn.data.sum(axis=2), 1.0, atol=1e-9)

    def test_zero_weight_equals_physical_removal(self, params):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(4, 8))
        w = np.array([1.0, 1.0, 0.0, 1.0])
        out_masked, attn = mha_forward(Tensor(x), params.layer(0), w, params.cfg)
        assert np.all(attn.data[:, :, 2] == 0.0)
        keep = [0, 1, 3]
        out_removed, _ = mha_forward(Tensor(x[keep]), params.layer(0), None, params.cfg)
        np.testing.assert_allclose(out_masked.data[keep], out_removed.data, atol=1e-9)

    def test_single_token(self, params):
        x = Tensor(np.random.default_rng(2).normal(size=(1, 8)))
        out, attn = mha_forward(x, params.layer(0), None, params.cfg)
        np.testing.assert_allclose(attn.data, 1.0, atol=1e-15)
        expected = x.data @ params.layer(0)["wv"].data @ params.layer(0)["wo"].data
        np.testing.assert_allclose(out.data, expected, atol=1e-12)

    def test_all_masked_is_degenerate(self, params):
        x = Tensor(np.ones((3, 8)))
        with pytest.raises(DegenerateAttentionError):
            mha_forward(x, params.layer(0), np.zeros(3), params.cfg)


class TestLayer:
    def test_zero_weights_reduce_to_double_ln(self):
        cfg = small_cfg()
        p = EncoderParams.init(cfg, Rng(3))
        for w in ("wq", "wk", "wv", "wo", "w1", "w2"):
            p[f"layers.0.{w}"].data[...] = 0.0
        x = Tensor(np.random.default_rng(4).normal(size=(4, 8)))
        out, _ = layer_forward(x, p.layer(0), cfg)
        ln = T.layer_norm(x, p["layers.0.ln1_g"], p["layers.0.ln1_b"])
        ln2 = T.layer_norm(ln, p["layers.0.ln2_g"], p["layers.0.ln2_b"])
        np.testing.assert_allclose(out.data, ln2.data, atol=1e-12)

    def test_finite_at_standard_init(self, params):
        x = Tensor(np.random.default_rng(5).normal(size=(6, 8)))
        out, attn = layer_forward(x, params.layer(0), params.cfg)
        assert np.isfinite(out.data).all()
        assert np.isfinite(attn.data).all()

    def test_layer_gradcheck_mean_output(self, params):
        rng = np.random.default_rng(6)
        x = Tensor(rng.normal(size=(3, 8)), requires_grad=True)
        layer = params.layer(0)
        tracked = [x, layer["wq"], layer["w1"], layer["ln1_g"]]

        def build():
            out, _ = layer_forward(x, layer, params.cfg)
            return T.tmean(out)

        for p in tracked:
            p.grad = None
        build().backward()
        analytic = [p.grad.copy() for p in tracked]
        numeric = finite_diff_grads(lambda: build().item(), tracked)
        assert max_rel_error(analytic, numeric) <= 1e-4


class TestModelForward:
    def test_single_layer_matches_manual_stack(self):
        cfg = small_cfg(num_layers=1)
        p = EncoderParams.init(cfg, Rng(7))
        tokens = [0, 4, 5, 1]
        trace = model_forward(p, tokens)
        x = embed(p, tokens)
        out, _ = layer_forward(x, p.layer(0), cfg)
        logits = T.matmul(T.gather_rows(out, [0]), p["head"])
        np.testing.assert_allclose(trace.logits.data, logits.data[0], atol=1e-12)

    def test_deterministic(self, params):
        tokens = [0, 4, 5, 6, 1]
        a = model_forward(params, tokens).logits.data
        b = model_forward(params, tokens).logits.data
        np.testing.assert_array_equal(a, b)

    def test_trace_rows_sum_over_unmasked(self, params):
        trace = model_forward(params, [0, 4, 5, 6, 1])
        for attn in trace.attention:
            np.testing.assert_allclose(attn.data.sum(axis=2), 1.0, atol=1e-9)

    def test_pad_masking_equals_truncation(self, params):
        real = [0, 4, 5, 1]
        padded = real + [2, 2]
        n = len(padded)
        w = np.ones(n)
        w[len(real):] = 0.0
        masked = model_forward(params, padded, key_weights_per_layer=[w] * params.cfg.num_layers)
        truncated = model_forward(params, real)
        np.testing.assert_allclose(masked.logits.data, truncated.logits.data, atol=1e-9)

    def test_wrong_weight_count(self, params):
        with pytest.raises(InputError):
            model_forward(params, [0, 4, 1], key_weights_per_layer=[np.ones(3)])


class TestDownstreamLoss:
    def test_uniform(self):
        assert abs(downstream_loss(Tensor([0.0, 0.0]), 0).item() - np.log(2)) < 1e-12

    def test_confident(self):
        assert downstream_loss(Tensor([10.0, -10.0]), 0).item() < 1e-8

    def test_label_out_of_range(self):
        with pytest.raises(InputError):
            downstream_loss(Tensor([0.0, 0.0]), 5)


class TestFullModelGradient:
    def test_ce_objective_matches_finite_differences(self):
        cfg = ModelConfig(num_layers=2, hidden=8, ffn_inner=16, heads=2, vocab_size=12, max_len=6, num_classes=2)
        p = EncoderParams.init(cfg, Rng(57))
        tokens = [0, 4, 7, 9, 5, 1]
        tracked = p.tensors()

        def build():
            return downstream_loss(model_forward(p, tokens).logits, 1)

        for t in tracked:
            t.grad = None
        build().backward()
        analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in tracked]
        numeric = finite_diff_grads(lambda: build().item(), tracked)
        assert max_rel_error(analytic, numeric) <= 1e-4
