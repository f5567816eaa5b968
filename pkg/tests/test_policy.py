from decimal import Decimal, getcontext

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import central_diff, random_embedded_policy
from isalab.errors import DimensionError, ValidationError
from isalab.mdp_core import DiscreteAdversary, toy_mdp
from isalab.policy import (Direct2, EmbeddedSoftmax, ObsPerturbation, TabularSoftmax, action_probs,
                           fisher_at_obs, get_params, kl, log_prob_grad_obs, log_prob_grad_theta,
                           policy_matrix, policy_matrix_under_perturbation, with_params)


def decimal_softmax(row):
    getcontext().prec = 40
    exps = [Decimal(x).exp() for x in row]
    total = sum(exps)
    return np.array([float(e / total) for e in exps])


def decimal_kl(p, q):
    getcontext().prec = 40
    return float(sum(Decimal(a) * (Decimal(a) / Decimal(b)).ln() for a, b in zip(p, q) if a > 0))


class TestActionProbs:
    def test_direct2(self):
        np.testing.assert_array_equal(action_probs(Direct2(0.3, 0.9), 0), (0.3, 0.7))
        np.testing.assert_allclose(action_probs(Direct2(0.3, 0.9), 1), (0.9, 0.1))

    def test_zero_embedded_is_uniform(self):
        pol = EmbeddedSoftmax(np.zeros((3, 4)), np.zeros(3))
        np.testing.assert_allclose(action_probs(pol, np.ones(4)), np.full(3, 1 / 3), atol=1e-15)

    def test_tabular_matches_high_precision(self):
        pol = TabularSoftmax([[1.0, 2.0, 3.0]])
        np.testing.assert_allclose(action_probs(pol, 0), decimal_softmax([1, 2, 3]), rtol=1e-14)

    def test_large_logits_are_stable(self):
        p = action_probs(TabularSoftmax([[1000.0, 0.0]]), 0)
        assert np.all(np.isfinite(p)) and p[0] == 1.0

    def test_dimension_errors(self, rng):
        pol = random_embedded_policy(rng, 2, 3)
        with pytest.raises(DimensionError):
            action_probs(pol, np.ones(2))
        with pytest.raises(DimensionError):
            action_probs(Direct2(0.5, 0.5), 2)
        with pytest.raises(DimensionError):
            action_probs(TabularSoftmax(np.zeros((2, 2))), np.zeros(2))

    def test_direct2_range(self):
        with pytest.raises(ValidationError):
            Direct2(1.1, 0.5)
        with pytest.raises(ValidationError):
            TabularSoftmax([[np.nan, 0.0]])

    @given(seed=st.integers(0, 10_000), A=st.integers(1, 5), d=st.integers(1, 4))
    def test_simplex(self, seed, A, d):
        rng = np.random.default_rng(seed)
        pol = random_embedded_policy(rng, A, d, scale=5.0)
        p = action_probs(pol, rng.standard_normal(d))
        assert np.all(p >= 0)
        assert abs(p.sum() - 1) <= 1e-12


class TestParamGradients:
    def test_uniform_tabular_score(self):
        pol = TabularSoftmax(np.zeros((3, 2)))
        g = log_prob_grad_theta(pol, 1, 0).reshape(3, 2)
        np.testing.assert_allclose(g[1], (0.5, -0.5))
        assert np.all(g[[0, 2]] == 0)

    def test_direct2_closed_form(self):
        g = log_prob_grad_theta(Direct2(0.4, 0.7), 0, 0)
        np.testing.assert_allclose(g, (1 / 0.4, 0.0))

    def test_direct2_boundary_is_finite(self):
        g = log_prob_grad_theta(Direct2(0.0, 1.0), 0, 0)
        assert np.all(np.isfinite(g))

    @pytest.mark.parametrize("seed", range(10))
    def test_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        cases = [
            (Direct2(*rng.uniform(0.1, 0.9, 2)), int(rng.integers(2))),
            (TabularSoftmax(rng.standard_normal((3, 4))), int(rng.integers(3))),
            (random_embedded_policy(rng, 3, 4), rng.standard_normal(4)),
        ]
        for pol, x in cases:
            for a in range(len(action_probs(pol, x))):
                f = lambda th: np.log(action_probs(with_params(pol, th), x)[a])  # noqa: E731
                fd = central_diff(f, get_params(pol))
                assert np.max(np.abs(log_prob_grad_theta(pol, x, a) - fd)) <= 1e-5

    def test_bad_action(self):
        with pytest.raises(DimensionError):
            log_prob_grad_theta(TabularSoftmax(np.zeros((1, 2))), 0, 2)

    def test_params_round_trip(self, rng):
        pol = random_embedded_policy(rng, 3, 2)
        back = with_params(pol, get_params(pol))
        np.testing.assert_array_equal(back.weights, pol.weights)
        np.testing.assert_array_equal(back.bias, pol.bias)
        with pytest.raises(DimensionError):
            with_params(pol, np.zeros(4))


class TestObsGradients:
    def test_zero_weights(self):
        pol = EmbeddedSoftmax(np.zeros((2, 3)), np.array([0.3, -0.2]))
        assert np.all(log_prob_grad_obs(pol, np.ones(3), 1) == 0)

    def test_binary_identity(self, rng):
        pol = random_embedded_policy(rng, 2, 3)
        x = rng.standard_normal(3)
        p0 = action_probs(pol, x)[0]
        expected = (1 - p0) * (pol.weights[0] - pol.weights[1])
        np.testing.assert_allclose(log_prob_grad_obs(pol, x, 0), expected, atol=1e-14)

    @given(seed=st.integers(0, 10_000), A=st.integers(2, 4), d=st.integers(1, 4))
    def test_finite_differences(self, seed, A, d):
        rng = np.random.default_rng(seed)
        pol = random_embedded_policy(rng, A, d)
        x = rng.standard_normal(d)
        for a in range(A):
            fd = central_diff(lambda y: np.log(action_probs(pol, y)[a]), x)
            assert np.max(np.abs(log_prob_grad_obs(pol, x, a) - fd)) <= 1e-5

    @given(seed=st.integers(0, 10_000), A=st.integers(1, 5), d=st.integers(1, 4))
    def test_score_has_zero_mean(self, seed, A, d):
        rng = np.random.default_rng(seed)
        pol = random_embedded_policy(rng, A, d, scale=2.0)
        x = rng.standard_normal(d)
        p = action_probs(pol, x)
        mean = sum(p[a] * log_prob_grad_obs(pol, x, a) for a in range(A))
        assert np.max(np.abs(mean)) <= 1e-10

    def test_requires_embedded(self):
        with pytest.raises(TypeError):
            log_prob_grad_obs(Direct2(0.5, 0.5), np.zeros(2), 0)


class TestKl:
    @given(st.lists(st.floats(0.01, 1.0), min_size=1, max_size=6))
    def test_self_divergence_is_zero(self, w):
        p = np.array(w) / sum(w)
        assert kl(p, p) == 0.0

    def test_closed_form(self):
        assert kl([1.0, 0.0], [0.5, 0.5]) == pytest.approx(np.log(2), abs=1e-15)

    def test_high_precision_reference(self):
        assert kl([0.3, 0.7], [0.6, 0.4]) == pytest.approx(decimal_kl([0.3, 0.7], [0.6, 0.4]), rel=1e-14)

    def test_support_violation(self):
        with pytest.raises(ValidationError, match="vanishes"):
            kl([0.5, 0.5], [1.0, 0.0])

    @given(seed=st.integers(0, 10_000), n=st.integers(2, 6))
    def test_nonnegative_and_zero_only_at_equality(self, seed, n):
        rng = np.random.default_rng(seed)
        p, q = rng.dirichlet(np.ones(n), size=2)
        val = kl(p, q)
        assert val >= 0
        if np.max(np.abs(p - q)) > 1e-6:
            assert val > 0


class TestFisher:
    def test_zero_weights(self):
        F = fisher_at_obs(EmbeddedSoftmax(np.zeros((3, 2)), np.ones(3)), np.ones(2))
        assert np.all(F == 0)

    @given(seed=st.integers(0, 10_000), A=st.integers(2, 4), d=st.integers(1, 5))
    def test_symmetric_psd(self, seed, A, d):
        rng = np.random.default_rng(seed)
        F = fisher_at_obs(random_embedded_policy(rng, A, d, 3.0), rng.standard_normal(d))
        assert np.max(np.abs(F - F.T)) <= 1e-10
        assert np.linalg.eigvalsh(F)[0] >= -1e-10

    def test_monte_carlo_oracle(self):
        rng = np.random.default_rng(3)
        pol = random_embedded_policy(rng, 3, 2)
        x = rng.standard_normal(2)
        n = 100_000
        acts = rng.choice(3, size=n, p=action_probs(pol, x))
        scores = np.stack([log_prob_grad_obs(pol, x, a) for a in range(3)])[acts]
        outer = scores[:, :, None] * scores[:, None, :]
        mean = outer.mean(axis=0)
        se = outer.std(axis=0, ddof=1) / np.sqrt(n)
        assert np.all(np.abs(mean - fisher_at_obs(pol, x)) <= 3 * se + 1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_quadratic_form_matches_kl(self, seed):
        rng = np.random.default_rng(seed)
        pol = random_embedded_policy(rng, 3, 3)
        x = rng.standard_normal(3)
        theta = 1e-3 * rng.choice([-1.0, 1.0], size=3)
        quad = 0.5 * theta @ fisher_at_obs(pol, x) @ theta
        ratio = kl(action_probs(pol, x), action_probs(pol, x + theta)) / quad
        assert abs(ratio - 1) <= 0.05


class TestPerturbedMatrix:
    def test_none_and_zero(self, rng):
        mdp = toy_mdp()
        pol = random_embedded_policy(rng)
        base = policy_matrix(pol, mdp)
        np.testing.assert_array_equal(policy_matrix_under_perturbation(pol, mdp), base)
        zero = ObsPerturbation.zeros(2, 2, 0.5)
        np.testing.assert_allclose(policy_matrix_under_perturbation(pol, mdp, zero), base, atol=1e-15)

    def test_swap_perturbation(self, rng):
        mdp = toy_mdp()
        pol = random_embedded_policy(rng)
        # phi(s1) + (-1, 1) = phi(s2)
        pert = ObsPerturbation([[-1.0, 1.0], [0.0, 0.0]], eps=1.0)
        out = policy_matrix_under_perturbation(pol, mdp, pert)
        base = policy_matrix(pol, mdp)
        np.testing.assert_allclose(out[0], base[1], atol=1e-15)
        np.testing.assert_allclose(out[1], base[1], atol=1e-15)

    def test_discrete_adversary_on_tabular(self):
        mdp = toy_mdp()
        out = policy_matrix_under_perturbation(Direct2(0.2, 0.7), mdp, DiscreteAdversary((1, 0)))
        np.testing.assert_allclose(out, [[0.7, 0.3], [0.7, 0.3]])

    def test_obs_perturbation_needs_embedded(self):
        with pytest.raises(TypeError):
            policy_matrix_under_perturbation(Direct2(0.5, 0.5), toy_mdp(), ObsPerturbation.zeros(2, 2))

    def test_missing_embeddings(self, rng):
        mdp = toy_mdp().replace(embeddings=None)
        with pytest.raises(ValidationError):
            policy_matrix(random_embedded_policy(rng), mdp)

    def test_budget_enforced(self):
        with pytest.raises(ValidationError):
            ObsPerturbation([[0.6, 0.0]], eps=0.5)
