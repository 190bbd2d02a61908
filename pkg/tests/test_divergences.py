"""Divergence family, feature normalization, and the latent prior penalty."""

from __future__ import annotations

import math

import numpy as np
import pytest
import torch
from numpy.testing import assert_allclose

from taskfuse.divergences import (SYMMETRIC_KINDS, TransformFilterConfig, divergence,
                                  divergence_kinds, normalize_features, prior_divergence,
                                  require_distribution, uniform_prior)

P = np.array([0.5, 0.5])
Q = np.array([0.25, 0.75])

# Hand-derived closed forms for the (P, Q) pair above.
HAND_VALUES = {
    "kld": 0.5 * math.log(2.0) + 0.5 * math.log(2.0 / 3.0),   # 0.14384...
    "reverse-kld": 0.25 * math.log(0.5) + 0.75 * math.log(1.5),
    "jsd": 0.033822075568605205,
    "hellinger": 0.1845919112825145,
    "chi-squared": 1.0 / 3.0,
    "wasserstein": 0.25,
}
HAND_VALUES["jeffrey"] = HAND_VALUES["kld"] + HAND_VALUES["reverse-kld"]


def random_distribution(rng: np.random.Generator, n: int) -> np.ndarray:
    v = rng.uniform(0.05, 1.0, size=n)
    return v / v.sum()


class TestHandValues:
    def test_kld_reference_pair(self):
        assert_allclose(divergence("kld", P, Q), 0.1438, atol=1e-3)

    @pytest.mark.parametrize("kind", sorted(HAND_VALUES))
    def test_all_kinds_reference_pair(self, kind):
        assert_allclose(divergence(kind, P, Q), HAND_VALUES[kind], atol=1e-6)

    def test_hellinger_disjoint_support_near_one(self):
        p = np.array([1.0, 0.0])
        q = np.array([0.0, 1.0])
        assert_allclose(divergence("hellinger", p, q), 1.0, atol=1e-3)

    def test_self_divergence_near_zero(self):
        rng = np.random.default_rng(42)
        for _ in range(50):
            p = random_distribution(rng, int(rng.integers(2, 12)))
            for kind in divergence_kinds():
                assert abs(float(divergence(kind, p, p))) < 1e-6


class TestInvariants:
    def test_non_negativity(self):
        rng = np.random.default_rng(42)
        for _ in range(200):
            n = int(rng.integers(2, 16))
            p = random_distribution(rng, n)
            q = random_distribution(rng, n)
            for kind in divergence_kinds():
                d = float(divergence(kind, p, q))
                assert d >= -1e-12, f"{kind} produced {d}"

    def test_symmetric_kinds_bitwise(self):
        rng = np.random.default_rng(43)
        for _ in range(100):
            n = int(rng.integers(2, 16))
            p = random_distribution(rng, n)
            q = random_distribution(rng, n)
            for kind in SYMMETRIC_KINDS:
                a = float(divergence(kind, p, q))
                b = float(divergence(kind, q, p))
                assert a == b, f"{kind} not exactly symmetric: {a} vs {b}"

    def test_asymmetric_kinds_differ(self):
        # kld and chi-squared are directional; the reference pair shows it
        assert float(divergence("kld", P, Q)) != float(divergence("kld", Q, P))
        assert float(divergence("chi-squared", P, Q)) != float(divergence("chi-squared", Q, P))

    def test_jeffrey_is_sum_of_both_directions(self):
        rng = np.random.default_rng(44)
        for _ in range(100):
            n = int(rng.integers(2, 16))
            p = random_distribution(rng, n)
            q = random_distribution(rng, n)
            j = float(divergence("jeffrey", p, q))
            both = float(divergence("kld", p, q)) + float(divergence("reverse-kld", p, q))
            assert abs(j - both) <= 1e-12

    def test_wasserstein_shift_scaling(self):
        # mass moved one bin further costs proportionally more
        p = np.array([1.0, 0.0, 0.0])
        near = np.array([0.0, 1.0, 0.0])
        far = np.array([0.0, 0.0, 1.0])
        d_near = float(divergence("wasserstein", p, near))
        d_far = float(divergence("wasserstein", p, far))
        assert_allclose(d_far, 2.0 * d_near, rtol=1e-12)


class TestValidation:
    def test_unknown_kind(self):
        with pytest.raises(ValueError, match="unknown divergence kind"):
            divergence("bregman", P, Q)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            divergence("kld", P, np.array([0.2, 0.3, 0.5]))

    def test_negative_entries_rejected(self):
        with pytest.raises(ValueError, match="negative"):
            divergence("kld", np.array([1.2, -0.2]), Q)

    def test_bad_mass_rejected(self):
        with pytest.raises(ValueError, match="sums to"):
            divergence("kld", np.array([0.5, 0.6]), Q)

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError, match="non-finite"):
            require_distribution(np.array([np.nan, 1.0]))

    def test_matrix_rejected(self):
        with pytest.raises(ValueError, match="1-D"):
            require_distribution(np.eye(2))


class TestNormalizeFeatures:
    def test_channel_mean_softmax_example(self):
        # channel means [0, ln 3] map to [0.25, 0.75]
        z = np.zeros((4, 4, 2))
        z[:, :, 1] = math.log(3.0)
        out = normalize_features(z)
        assert_allclose(out, [0.25, 0.75], atol=1e-12)

    def test_mean_pooling_is_spatial(self):
        # same means, different spatial layout: identical output
        z1 = np.zeros((2, 2, 2))
        z1[:, :, 1] = 1.0
        z2 = np.zeros((2, 2, 2))
        z2[0, 0, 1] = 4.0
        assert_allclose(normalize_features(z1), normalize_features(z2), atol=1e-12)

    def test_temperature(self):
        z = np.zeros((1, 1, 2))
        z[0, 0, 1] = math.log(3.0)
        out = normalize_features(z, TransformFilterConfig(temperature=2.0))
        r = math.sqrt(3.0)
        assert_allclose(out, [1.0 / (1.0 + r), r / (1.0 + r)], atol=1e-12)

    def test_batched_shape(self):
        rng = np.random.default_rng(7)
        z = rng.normal(size=(3, 4, 4, 5))
        out = normalize_features(z)
        assert out.shape == (3, 5)
        assert_allclose(out.sum(axis=1), np.ones(3), atol=1e-9)

    def test_output_is_distribution(self):
        rng = np.random.default_rng(8)
        for _ in range(20):
            z = rng.normal(scale=3.0, size=(5, 5, 6))
            out = normalize_features(z)
            assert np.all(out > 0)
            assert_allclose(out.sum(), 1.0, atol=1e-9)

    def test_torch_in_torch_out(self):
        z = torch.zeros(2, 2, 3, dtype=torch.float64, requires_grad=True)
        out = normalize_features(z)
        assert isinstance(out, torch.Tensor)
        out.sum().backward()
        assert z.grad is not None


class TestPriorPenalty:
    def test_uniform_prior_composition_example(self):
        # channel means [0, ln 3] against a uniform prior
        z = np.zeros((4, 4, 2))
        z[:, :, 1] = math.log(3.0)
        val = prior_divergence(z, uniform_prior(2))
        assert_allclose(val, 0.1308, atol=1e-3)

    def test_matching_prior_is_near_zero(self):
        z = np.zeros((3, 3, 4))
        val = prior_divergence(z, uniform_prior(4))
        assert abs(float(val)) < 1e-6

    def test_batch_reduces_by_mean(self):
        z = np.zeros((2, 4, 4, 2))
        z[:, :, :, 1] = math.log(3.0)
        single = prior_divergence(z[0], uniform_prior(2))
        batched = prior_divergence(z, uniform_prior(2))
        assert_allclose(batched, single, atol=1e-12)

    def test_prior_length_checked(self):
        z = np.zeros((2, 2, 3))
        with pytest.raises(ValueError, match="prior"):
            prior_divergence(z, uniform_prior(4))

    def test_all_kinds_accepted(self):
        rng = np.random.default_rng(9)
        z = rng.normal(size=(4, 4, 5))
        for kind in divergence_kinds():
            val = float(prior_divergence(z, uniform_prior(5), kind=kind))
            assert val >= -1e-12

    def test_gradient_flows_to_features(self):
        z = torch.randn(4, 4, 3, dtype=torch.float64, requires_grad=True)
        val = prior_divergence(z, uniform_prior(3, like=z))
        val.backward()
        assert z.grad is not None
        assert torch.isfinite(z.grad).all()

    def test_uniform_prior_values(self):
        assert_allclose(uniform_prior(4), np.full(4, 0.25), atol=0)
        with pytest.raises(ValueError):
            uniform_prior(0)
