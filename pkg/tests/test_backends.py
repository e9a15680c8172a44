"""Cross-backend agreement: the compiled kernels must match the reference."""

import numpy as np
import pytest

from tokenprune import backend

pytestmark = pytest.mark.skipif(
    "cython" not in backend.available_backends(), reason="compiled backend not built"
)


@pytest.fixture
def impls():
    return backend._impls["python"], backend._impls["cython"]


@pytest.fixture
def rng():
    return np.random.default_rng(42)


def test_selection_roundtrip():
    original = backend.active_backend()
    try:
        assert backend.use_backend("python").NAME == "python"
        assert backend.use_backend("cython").NAME == "cython"
        with pytest.raises(ValueError):
            backend.use_backend("fortran")
    finally:
        backend.use_backend(original)


def test_softmax_rows_agree(impls, rng):
    py, cy = impls
    x = rng.normal(size=(5, 9)) * 3
    np.testing.assert_allclose(py.softmax_rows_fwd(x), cy.softmax_rows_fwd(x), atol=1e-14)
    p = py.softmax_rows_fwd(x)
    g = rng.normal(size=(5, 9))
    np.testing.assert_allclose(py.softmax_rows_bwd(p, g), cy.softmax_rows_bwd(p, g), atol=1e-14)


def test_masked_softmax_agree(impls, rng):
    py, cy = impls
    x = rng.normal(size=(3, 6, 6)) * 2
    w = np.array([1.0, 0.7, 0.0, 1.0, 0.2, 1.0])
    p1, q1 = py.masked_softmax_fwd(x, w)
    p2, q2 = cy.masked_softmax_fwd(x, w)
    np.testing.assert_allclose(p1, p2, atol=1e-14)
    np.testing.assert_allclose(q1, q2, atol=1e-14)
    g = rng.normal(size=x.shape)
    gx1, gw1 = py.masked_softmax_bwd(p1, q1, w, g)
    gx2, gw2 = cy.masked_softmax_bwd(p2, q2, w, g)
    np.testing.assert_allclose(gx1, gx2, atol=1e-13)
    np.testing.assert_allclose(gw1, gw2, atol=1e-13)


def test_layernorm_agree(impls, rng):
    py, cy = impls
    x = rng.normal(size=(7, 12))
    gamma = rng.normal(size=12) + 1
    beta = rng.normal(size=12)
    y1, xh1, r1 = py.layernorm_fwd(x, gamma, beta, 1e-5)
    y2, xh2, r2 = cy.layernorm_fwd(x, gamma, beta, 1e-5)
    np.testing.assert_allclose(y1, y2, atol=1e-13)
    g = rng.normal(size=x.shape)
    out1 = py.layernorm_bwd(xh1, r1, gamma, g)
    out2 = cy.layernorm_bwd(xh2, r2, gamma, g)
    for a, b in zip(out1, out2):
        np.testing.assert_allclose(a, b, atol=1e-13)


@pytest.mark.parametrize("name", ["gelu", "sigmoid", "softplus", "clamp01"])
def test_elementwise_agree(impls, rng, name):
    py, cy = impls
    x = rng.normal(size=(4, 5)) * 2
    f1 = getattr(py, f"{name}_fwd")(x)
    f2 = getattr(cy, f"{name}_fwd")(x)
    np.testing.assert_allclose(f1, f2, atol=1e-15)
    g = rng.normal(size=x.shape)
    ctx = f1 if name == "sigmoid" else x
    b1 = getattr(py, f"{name}_bwd")(ctx, g)
    b2 = getattr(cy, f"{name}_bwd")(ctx, g)
    np.testing.assert_allclose(b1, b2, atol=1e-14)


def test_cross_entropy_agree(impls, rng):
    py, cy = impls
    logits = rng.normal(size=6) * 4
    l1, p1 = py.cross_entropy_fwd(logits, 2)
    l2, p2 = cy.cross_entropy_fwd(logits, 2)
    assert abs(l1 - l2) < 1e-14
    np.testing.assert_allclose(p1, p2, atol=1e-15)
    np.testing.assert_allclose(py.cross_entropy_bwd(p1, 2, 1.5), cy.cross_entropy_bwd(p2, 2, 1.5), atol=1e-15)


def test_score_aggregate_agree(impls, rng):
    py, cy = impls
    a = rng.uniform(size=(3, 5, 5))
    a /= a.sum(axis=2, keepdims=True)
    qw = np.array([1.0, 0.5, 0.0, 1.0, 0.9])
    s1, w1 = py.score_aggregate_fwd(a, qw)
    s2, w2 = cy.score_aggregate_fwd(a, qw)
    assert w1 == w2
    np.testing.assert_allclose(s1, s2, atol=1e-14)
    g = rng.normal(size=5)
    ga1, gq1 = py.score_aggregate_bwd(a, qw, s1, w1, g)
    ga2, gq2 = cy.score_aggregate_bwd(a, qw, s2, w2, g)
    np.testing.assert_allclose(ga1, ga2, atol=1e-14)
    np.testing.assert_allclose(gq1, gq2, atol=1e-14)


def test_encoder_forward_agrees_between_backends(rng):
    from tokenprune.encoder import EncoderParams, ModelConfig, model_forward
    from tokenprune.rng import Rng

    cfg = ModelConfig(num_layers=2, hidden=8, ffn_inner=16, heads=2, vocab_size=11, max_len=6, num_classes=2)
    params = EncoderParams.init(cfg, Rng(3))
    tokens = [0, 5, 6, 7, 8, 1]
    original = backend.active_backend()
    try:
        backend.use_backend("python")
        l1 = model_forward(params, tokens).logits.data.copy()
        backend.use_backend("cython")
        l2 = model_forward(params, tokens).logits.data.copy()
    finally:
        backend.use_backend(original)
    np.testing.assert_allclose(l1, l2, atol=1e-12)
