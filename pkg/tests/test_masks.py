import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import gradcheck
from tokenprune import tensor as T
from tokenprune.errors import InputError
from tokenprune.masks import (
    BETA,
    MaskSet,
    STRETCH_L,
    STRETCH_R,
    active_prob,
    binarize,
    deterministic_mask,
    effective_keep,
    monte_carlo_active_prob,
    sample_mask,
)
from tokenprune.rng import Rng
from tokenprune.tensor import Tensor


class TestSampleMask:
    def test_symmetric_case(self):
        assert sample_mask(0.0, 0.5) == pytest.approx(0.5, abs=1e-12)

    def test_saturated_open(self):
        for u in (0.05, 0.5, 0.95):
            assert sample_mask(20.0, u) == 1.0

    def test_hand_value_clamps_to_one(self):
        # sigmoid(ln(99)/beta) = 0.99899 -> stretched 1.0988 -> clamped
        assert sample_mask(0.0, 0.99) == 1.0

    def test_u_domain(self):
        with pytest.raises(InputError):
            sample_mask(0.0, 0.0)
        with pytest.raises(InputError):
            sample_mask(0.0, 1.0)

    @given(st.floats(-30, 30), st.floats(1e-6, 1 - 1e-6))
    @settings(max_examples=200, deadline=None)
    def test_output_in_unit_interval(self, la, u):
        v = sample_mask(la, u)
        assert 0.0 <= v <= 1.0

    def test_monotone_in_log_alpha_and_u(self):
        las = np.linspace(-6, 6, 101)
        vals = [sample_mask(la, 0.37) for la in las]
        assert all(b >= a for a, b in zip(vals, vals[1:]))
        us = np.linspace(0.01, 0.99, 101)
        vals_u = [sample_mask(0.3, u) for u in us]
        assert all(b >= a for a, b in zip(vals_u, vals_u[1:]))

    def test_tensor_matches_scalar_and_vector(self):
        rng = Rng(3)
        u = rng.u01_array(50)
        la = Tensor(np.full(50, 0.7), requires_grad=True)
        vec = sample_mask(la, u)
        scalars = np.array([sample_mask(0.7, ui) for ui in u])
        np.testing.assert_allclose(vec.data, scalars, atol=1e-15)

    def test_gradcheck_interior(self):
        la = Tensor(np.array([0.2, -0.4, 0.6]), requires_grad=True)
        u = np.array([0.4, 0.55, 0.45])
        coeff = np.array([1.0, 2.0, -1.5])
        gradcheck(lambda: T.weighted_sum(sample_mask(la, u), coeff), [la])


class TestDeterministicMask:
    def test_boundary_binarizes_to_keep(self):
        assert deterministic_mask(0.0) == pytest.approx(0.5, abs=1e-12)
        assert binarize(deterministic_mask(0.0)) is True

    def test_strongly_closed(self):
        assert deterministic_mask(-10.0) == 0.0
        assert binarize(deterministic_mask(-10.0)) is False

    def test_strongly_open(self):
        assert deterministic_mask(10.0) == 1.0
        assert binarize(deterministic_mask(10.0)) is True


class TestActiveProb:
    def test_hand_value(self):
        # sigmoid((2/3) * ln 11) = sigmoid(1.59860...)
        assert active_prob(0.0) == pytest.approx(0.8318221839916905, abs=1e-12)

    def test_limits(self):
        assert active_prob(-60.0) == pytest.approx(0.0, abs=1e-20)
        assert active_prob(60.0) == pytest.approx(1.0, abs=1e-15)

    def test_consistent_with_formula(self):
        for la in (-3.0, -1.0, 0.0, 1.0, 3.0):
            expected = 1.0 / (1.0 + math.exp(-(la - BETA * math.log(-STRETCH_L / STRETCH_R))))
            assert active_prob(la) == pytest.approx(expected, abs=1e-15)

    @pytest.mark.parametrize("la", [-3.0, -1.0, 0.0, 1.0, 3.0])
    def test_monte_carlo_within_three_sigma(self, la):
        rng = Rng(57 + int(la * 10))
        u = rng.u01_array(10**6)
        estimate, se = monte_carlo_active_prob(la, u)
        assert abs(estimate - active_prob(la)) <= 3.0 * se

    def test_tensor_path_matches_float(self):
        la = Tensor(0.8, requires_grad=True)
        assert active_prob(la).item() == pytest.approx(active_prob(0.8), abs=1e-15)

    def test_gradcheck(self):
        la = Tensor(0.3, requires_grad=True)
        gradcheck(lambda: active_prob(la), [la])


class TestReparameterizedGradient:
    def test_sampled_gradient_matches_finite_difference(self):
        # d/dla E[sample(la, U)] via common random numbers at 1e6 draws
        rng = Rng(99)
        u = rng.u01_array(10**6)
        la0 = 0.4

        def mean_at(la):
            return float(np.mean(sample_mask(la, u)))

        h = 1e-4
        fd = (mean_at(la0 + h) - mean_at(la0 - h)) / (2 * h)
        la = Tensor(np.full(u.shape[0], la0), requires_grad=True)
        out = T.tmean(sample_mask(la, u))
        out.backward()
        reparam = float(la.grad.sum())
        assert abs(reparam - fd) / abs(fd) <= 0.02


class TestEffectiveKeep:
    def test_closed_gate_retains(self):
        assert effective_keep(0.0, 0.0) == 1.0
        assert effective_keep(0.0, 0.7) == 1.0

    def test_open_gate_delegates(self):
        assert effective_keep(1.0, 0.3) == pytest.approx(0.3)

    def test_half_open(self):
        assert effective_keep(0.5, 0.0) == pytest.approx(0.5)

    def test_tensor_math(self):
        g = Tensor(0.5, requires_grad=True)
        r = Tensor(np.array([0.0, 1.0]), requires_grad=True)
        out = effective_keep(g, r)
        np.testing.assert_allclose(out.data, [0.5, 1.0], atol=1e-15)
        gradcheck(lambda: T.weighted_sum(effective_keep(g, r), np.array([1.0, 2.0])), [g, r])


class TestMaskSet:
    def test_init_biases(self):
        m = MaskSet(3, 8)
        gates, ranks = m.deterministic_values()
        assert all(binarize(g) is False for g in gates)
        assert all(binarize(v) is True for r in ranks for v in r)
        # biased but not saturated: active probabilities keep gradient alive
        assert 0.02 < active_prob(m.gate[0].item()) < 0.3
        assert 0.9 < active_prob(float(m.rank[0].data[0])) < 0.999

    def test_layers_do_not_share_buffers(self):
        m = MaskSet(2, 4)
        m.rank[0].data[1] = 9.0
        assert m.rank[1].data[1] != 9.0

    def test_copy_is_independent(self):
        m = MaskSet(2, 4)
        c = m.copy()
        c.gate[0].data[...] = 5.0
        assert m.gate[0].item() != 5.0

    def test_saturated_realizes_plan_exactly(self):
        keep = [[True, False, True, False], [True, True, False, False]]
        m = MaskSet.saturated(2, 4, gate_open=[True, False], rank_keep=keep)
        gates, ranks = m.deterministic_values()
        assert [binarize(g) for g in gates] == [True, False]
        for row, kr in zip(ranks, keep):
            assert [binarize(v) for v in row] == kr
        assert active_prob(m.gate[0].item()) == 1.0
        # closed side is not exactly zero, but small enough that float sums
        # against integer token counts round it away completely
        closed = active_prob(float(m.rank[0].data[1]))
        assert closed < 1e-25
        assert 1.0 + closed == 1.0
        assert 512.0 * closed + 7.0 == 7.0
