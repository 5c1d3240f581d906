import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from builders import random_batch, random_model
from ontram.core import (
    EmbeddingHead,
    ModelParams,
    OutcomeScale,
    class_probabilities,
    cumulative_probabilities,
    cutpoints_from_raw,
    favorable_probability,
    latent_cdf,
    linear_shift,
    loss_and_gradient,
    negative_log_likelihood,
    nll_gradient,
    raw_from_cutpoints,
    transformation,
)
from ontram.errors import DomainError, ShapeError
from ontram.synthetic import finite_difference_gradient, oracle_nll_rows


def model(theta, beta=(0.0,), treatment_index=0, K=None, cut=None, head=None):
    K = K or len(theta) + 1
    cut = min(2, K - 2) if cut is None else cut
    names = [f"x{j}" for j in range(len(beta))]
    return ModelParams(raw_from_cutpoints(theta), beta, names, treatment_index,
                       OutcomeScale(K, cut), head)


class TestLatentCdf:
    def test_known_values(self):
        assert latent_cdf(0.0) == 0.5
        assert latent_cdf(math.log(3)) == pytest.approx(0.75, abs=1e-15)

    @given(st.floats(-700, 700))
    def test_symmetry(self, z):
        assert latent_cdf(z) + latent_cdf(-z) == pytest.approx(1.0, abs=1e-15)

    def test_extreme_arguments_do_not_overflow(self):
        assert latent_cdf(-1000.0) == 0.0
        assert latent_cdf(1000.0) == 1.0

    @pytest.mark.parametrize("bad", [math.nan, math.inf, -math.inf])
    def test_non_finite_rejected(self, bad):
        with pytest.raises(DomainError):
            latent_cdf(bad)

    def test_vectorized(self):
        z = np.array([-2.0, 0.0, 2.0])
        np.testing.assert_allclose(latent_cdf(z), 1 / (1 + np.exp(-z)), rtol=1e-15)


class TestCutpoints:
    @given(st.lists(st.floats(-5, 5), min_size=1, max_size=8))
    def test_monotone_for_any_raw_vector(self, gamma):
        theta = cutpoints_from_raw(np.array(gamma))
        assert np.all(np.diff(theta) > 0)

    def test_round_trip(self):
        theta = np.array([-2.0, -0.5, 0.1, 3.0])
        np.testing.assert_allclose(cutpoints_from_raw(raw_from_cutpoints(theta)), theta,
                                   rtol=0, atol=1e-14)

    def test_non_increasing_cutpoints_rejected(self):
        with pytest.raises(DomainError):
            raw_from_cutpoints([0.0, 0.0])


class TestTransformation:
    def test_zero_shift(self):
        p = model([-1.0, 1.0], beta=(0.0,))
        assert transformation(p, 1, [5.0]) == -1.0

    def test_pure_linear_shift(self):
        p = model([0.0, 1.0], beta=(1.0,))
        assert transformation(p, 1, [1.0]) == -1.0

    def test_matches_independent_recomputation(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            p = random_model(rng, K=5, P=4, d_emb=3)
            x = rng.standard_normal(4)
            e = rng.standard_normal(3)
            h = p.head
            a1 = np.maximum(e @ h.W1 + h.b1, 0)
            a2 = np.maximum(a1 @ h.W2 + h.b2, 0)
            eta = a2 @ h.w3 + h.b3[0]
            theta = [p.gamma[0]]
            for g in p.gamma[1:]:
                theta.append(theta[-1] + math.exp(g))
            for k in range(1, 5):
                expect = theta[k - 1] - x @ p.beta - eta
                assert transformation(p, k, x, e) == pytest.approx(expect, abs=1e-12)

    def test_dimension_mismatch(self):
        p = model([-1.0, 1.0], beta=(0.0, 1.0))
        with pytest.raises(ShapeError):
            transformation(p, 1, [1.0])
        with pytest.raises(ShapeError):
            transformation(p, 3, [1.0, 2.0])

    def test_embeddings_without_head_rejected(self):
        p = model([-1.0, 1.0])
        with pytest.raises(ShapeError):
            linear_shift(p, [[1.0]], E=[[1.0]])


class TestProbabilities:
    def test_three_class_zero_shift(self):
        p = model([-1.0, 1.0], beta=(1.0,))
        np.testing.assert_allclose(class_probabilities(p, [0.0]),
                                   [0.26894, 0.46212, 0.26894], atol=5e-6)

    def test_three_class_unit_shift(self):
        # shift 1 moves both cut-points to (-2, 0)
        p = model([-1.0, 1.0], beta=(1.0,))
        expect = [latent_cdf(-2.0), 0.5 - latent_cdf(-2.0), 0.5]
        np.testing.assert_allclose(class_probabilities(p, [1.0]), expect, atol=1e-15)

    def test_symmetric_wide_cutpoints(self):
        p = model([-2.0, 2.0], beta=(1.0,))
        np.testing.assert_allclose(class_probabilities(p, [0.0]),
                                   [0.11920, 0.76159, 0.11920], atol=5e-6)

    def test_favorable_at_zero_cut(self):
        p = model([-2.0, -1.0, 0.0, 1.0, 2.0, 3.0], beta=(0.3,), cut=2)
        assert favorable_probability(p, [0.0]) == 0.5

    def test_favorable_is_partial_sum(self):
        rng = np.random.default_rng(1)
        p = random_model(rng, K=7, P=3)
        X, _, _ = random_batch(rng, p, 50)
        cp = class_probabilities(p, X)
        np.testing.assert_allclose(favorable_probability(p, X), cp[:, :3].sum(axis=1),
                                   rtol=0, atol=1e-12)

    def test_cumulative_shape(self):
        p = model([-1.0, 0.0, 1.0], beta=(1.0,))
        assert cumulative_probabilities(p, np.zeros((5, 1))).shape == (5, 3)
        assert cumulative_probabilities(p, [0.0]).shape == (3,)


class TestNll:
    def test_single_row_example(self):
        p = model([-1.0, 1.0])
        assert negative_log_likelihood(p, [[0.0]], [1]) == pytest.approx(0.77194, abs=5e-6)

    def test_two_class_is_cross_entropy(self):
        rng = np.random.default_rng(2)
        p = model([0.3], beta=(0.7, -0.2), K=2, cut=0)
        X = rng.standard_normal((30, 2))
        y = rng.integers(0, 2, 30)
        q = 1 / (1 + np.exp(-(0.3 - X @ p.beta)))  # P(Y = 0)
        bce = -np.mean(np.where(y == 0, np.log(q), np.log(1 - q)))
        assert negative_log_likelihood(p, X, y) == pytest.approx(bce, abs=1e-13)

    def test_mean_of_rows(self):
        rng = np.random.default_rng(3)
        p = random_model(rng, K=6, P=4, d_emb=3)
        X, y, E = random_batch(rng, p, 40)
        rows = oracle_nll_rows(p.arrays(), X, y, E, 6)
        assert negative_log_likelihood(p, X, y, E) == pytest.approx(rows.mean(), abs=1e-12)
        assert negative_log_likelihood(p, X, y, E) >= 0

    def test_empty_batch(self):
        p = model([-1.0, 1.0])
        with pytest.raises(DomainError):
            negative_log_likelihood(p, np.zeros((0, 1)), np.zeros(0, dtype=int))

    def test_out_of_range_class(self):
        p = model([-1.0, 1.0])
        with pytest.raises(DomainError):
            negative_log_likelihood(p, [[0.0]], [3])

    def test_floor_keeps_loss_finite(self):
        p = model([-1.0, 1.0], beta=(1.0,))
        nll = negative_log_likelihood(p, [[200.0]], [0])
        assert nll == pytest.approx(-math.log(1e-12))


class TestGradient:
    def test_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        p = random_model(rng, K=4, P=3, d_emb=5)
        X, y, E = random_batch(rng, p, 12)
        g = nll_gradient(p, X, y, E)
        fd = finite_difference_gradient(p, X, y, E)
        for k in g:
            err = np.abs(g[k] - fd[k]).max() / max(np.abs(g[k]).max(), np.abs(fd[k]).max())
            assert err < 1e-6, k

    def test_default_width_head_matches_finite_differences(self):
        # the default 256/128 head, over every one of its ~35k coordinates
        rng = np.random.default_rng(40)
        p = random_model(rng, K=7, P=3, d_emb=8, hidden=(256, 128))
        X, y, E = random_batch(rng, p, 8)
        g = nll_gradient(p, X, y, E)
        fd = finite_difference_gradient(p, X, y, E)
        for k in g:
            err = np.abs(g[k] - fd[k]).max() / max(np.abs(g[k]).max(), np.abs(fd[k]).max())
            assert err < 1e-6, k

    def test_symmetric_treatment_gradient_vanishes(self):
        # each class equally often in both arms, symmetric cut-points, beta = 0
        p = model([-1.0, 1.0], beta=(0.0,))
        X = np.array([[0.0], [0.0], [0.0], [1.0], [1.0], [1.0]])
        y = np.array([0, 1, 2, 0, 1, 2])
        assert nll_gradient(p, X, y)["beta"][0] == pytest.approx(0.0, abs=1e-15)

    def test_two_class_matches_logistic_gradient(self):
        rng = np.random.default_rng(5)
        p = model([0.4], beta=(0.5, -1.0), K=2, cut=0)
        X = rng.standard_normal((25, 2))
        y = rng.integers(0, 2, 25)
        q = 1 / (1 + np.exp(-(0.4 - X @ p.beta)))  # P(Y = 0)
        # d/d theta of -mean log-lik = mean(q - [y == 0]), and d/d beta = -that * x
        r = q - (y == 0)
        g = nll_gradient(p, X, y)
        assert g["gamma"][0] == pytest.approx(r.mean(), abs=1e-14)
        np.testing.assert_allclose(g["beta"], -(r[:, None] * X).mean(axis=0), atol=1e-14)

    def test_floor_clamped_row_contributes_nothing(self):
        p = model([-1.0, 1.0], beta=(1.0,))
        g = nll_gradient(p, [[200.0]], [0])
        assert np.all(g["beta"] == 0) and np.all(g["gamma"] == 0)

    def test_dropout_masks_come_from_rng(self):
        rng = np.random.default_rng(6)
        p = random_model(rng, K=3, P=2, d_emb=4, dropout=0.5)
        X, y, E = random_batch(rng, p, 8)
        a = loss_and_gradient(p, X, y, E, rng=np.random.default_rng(9))
        b = loss_and_gradient(p, X, y, E, rng=np.random.default_rng(9))
        c = loss_and_gradient(p, X, y, E)
        assert a[0] == b[0]
        assert a[0] != c[0]
        # without an rng the loss is the evaluation-mode NLL
        assert c[0] == pytest.approx(negative_log_likelihood(p, X, y, E), abs=1e-15)

    def test_dropout_gradient_matches_fixed_mask_fd(self):
        rng = np.random.default_rng(7)
        p = random_model(rng, K=4, P=2, d_emb=3, hidden=(5, 4), dropout=0.4)
        X, y, E = random_batch(rng, p, 6)
        masks = p.head.draw_masks(6, np.random.default_rng(0))
        g = nll_gradient(p, X, y, E, masks=masks)
        step = 1e-6
        arrays = p.arrays()
        for key in ("W1", "w3", "beta"):
            idx = (0, 0) if arrays[key].ndim == 2 else (0,)
            plus, minus = dict(arrays), dict(arrays)
            plus[key] = arrays[key].copy()
            minus[key] = arrays[key].copy()
            plus[key][idx] += step
            minus[key][idx] -= step
            fp = loss_and_gradient(p.with_arrays(plus), X, y, E, masks=masks)[0]
            fm = loss_and_gradient(p.with_arrays(minus), X, y, E, masks=masks)[0]
            assert g[key][idx] == pytest.approx((fp - fm) / (2 * step), abs=1e-8)


class TestHead:
    def test_initialization(self):
        head = EmbeddingHead.initialize(8, np.random.default_rng(0))
        assert head.hidden == (256, 128)
        assert head.dropout == 0.3
        assert np.all(head.b1 == 0) and np.all(head.b2 == 0) and head.b3[0] == 0
        limit = math.sqrt(6 / (8 + 256))
        assert np.abs(head.W1).max() <= limit

    def test_masks_are_inverted_dropout(self):
        head = EmbeddingHead.initialize(3, np.random.default_rng(0), hidden=(50, 40),
                                        dropout=0.3)
        m1, m2 = head.draw_masks(1000, np.random.default_rng(1))
        assert set(np.unique(m1)) <= {0.0, 1 / 0.7}
        assert abs((m1 == 0).mean() - 0.3) < 0.01

    def test_arrays_are_immutable(self):
        head = EmbeddingHead.initialize(3, np.random.default_rng(0), hidden=(4, 4))
        with pytest.raises(ValueError):
            head.W1[0, 0] = 1.0

    def test_inconsistent_shapes(self):
        with pytest.raises(ShapeError):
            EmbeddingHead(np.zeros((3, 4)), np.zeros(5), np.zeros((4, 2)), np.zeros(2),
                          np.zeros(2), np.zeros(1))


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), K=st.integers(2, 9))
def test_probability_laws(seed, K):
    rng = np.random.default_rng(seed)
    p = random_model(rng, K=K, P=3, favorable_cut=int(rng.integers(0, K - 1)))
    X, _, _ = random_batch(rng, p, 20)
    X *= rng.uniform(0.1, 10)
    probs = class_probabilities(p, X)
    assert np.all(probs >= 0)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, rtol=0, atol=1e-12)
    np.testing.assert_allclose(favorable_probability(p, X),
                               probs[:, :p.scale.favorable_cut + 1].sum(axis=1),
                               rtol=0, atol=1e-12)
