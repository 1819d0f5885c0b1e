import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from erda.losses import finite_diff_grad
from erda.pseudo import (
    PrototypeBank,
    SelectionKind,
    SelectionStrategy,
    apply_selection,
    batch_class_means,
    cosine_scores,
    cosine_scores_backward,
    momentum_update,
    pseudo_labels,
    score,
)


def bank_from(centroids, m=0.0):
    bank = PrototypeBank.empty(len(centroids), len(centroids[0]), momentum=m)
    return momentum_update(bank, [np.asarray(c, float) for c in centroids])


class TestBatchClassMeans:
    def test_single_point(self):
        v = np.array([0.3, -2.0])
        means = batch_class_means([v], [0], K=3)
        np.testing.assert_array_equal(means[0], v)
        assert means[1] is None and means[2] is None

    def test_symmetric_cancel(self):
        v = np.array([1.0, 2.0, 3.0])
        np.testing.assert_array_equal(batch_class_means([v, -v], [0, 0], 2)[0], 0.0)

    def test_arithmetic_mean(self):
        means = batch_class_means([[1, 0], [0, 1]], [2, 2], 3)
        np.testing.assert_allclose(means[2], [0.5, 0.5])

    def test_label_range(self):
        with pytest.raises(ValueError):
            batch_class_means([[1.0]], [3], 3)

    def test_empty_batch(self):
        assert batch_class_means(np.zeros((0, 2)), np.zeros(0, int), 2) == [None, None]


class TestMomentumUpdate:
    def test_momentum_off(self):
        bank = bank_from([[1.0, 0.0], [0.0, 1.0]])
        momentum_update(bank, [np.array([3.0, 3.0]), np.array([-1.0, 2.0])])
        np.testing.assert_array_equal(bank.centroids, [[3, 3], [-1, 2]])

    def test_fixed_point(self):
        bank = bank_from([[1.0, 2.0], [0.5, 0.5]], m=0.9)
        before = bank.centroids.copy()
        momentum_update(bank, list(before))
        np.testing.assert_allclose(bank.centroids, before, atol=1e-15)

    def test_paper_momentum(self):
        bank = bank_from([[1.0, 0.0], [0.0, 1.0]], m=0.999)
        momentum_update(bank, [np.array([0.0, 1.0]), None])
        np.testing.assert_allclose(bank.centroids[0], [0.999, 0.001], atol=1e-15)
        np.testing.assert_array_equal(bank.centroids[1], [0.0, 1.0])

    def test_first_sighting_initializes(self):
        bank = PrototypeBank.empty(3, 2, momentum=0.999)
        momentum_update(bank, [None, np.array([4.0, 5.0]), None])
        np.testing.assert_array_equal(bank.initialized, [False, True, False])
        np.testing.assert_array_equal(bank.centroids[1], [4, 5])
        assert not bank.ready

    def test_dimension_mismatch(self):
        bank = PrototypeBank.empty(2, 2)
        with pytest.raises(ValueError):
            momentum_update(bank, [np.zeros(3), None])

    def test_bad_momentum(self):
        with pytest.raises(ValueError):
            PrototypeBank.empty(2, 2, momentum=1.0)

    @given(
        st.floats(0, 0.9999),
        st.lists(st.floats(-100, 100), min_size=3, max_size=3),
        st.lists(st.floats(-100, 100), min_size=3, max_size=3),
    )
    def test_convex_combination(self, m, old, new):
        bank = bank_from([old], m=m)
        momentum_update(bank, [np.array(new)])
        lo = np.minimum(old, new) - 1e-12
        hi = np.maximum(old, new) + 1e-12
        assert np.all((bank.centroids[0] >= lo) & (bank.centroids[0] <= hi))


class TestScore:
    def test_self_similarity(self):
        bank = bank_from([[2.0, 1.0], [-1.0, 3.0]])
        assert score(bank, [2.0, 1.0])[0] == pytest.approx(1.0)

    def test_orthogonal(self):
        bank = bank_from([[1.0, 0.0], [1.0, 1.0]])
        assert score(bank, [0.0, 5.0])[0] == pytest.approx(0.0, abs=1e-15)

    def test_temperature(self):
        bank = bank_from([[1.0, 0.0], [0.0, 1.0]])
        s = score(bank, np.array([1.0, 1.0]) / np.sqrt(2), temperature=0.1)
        np.testing.assert_allclose(s, [7.0710678118654755, 7.0710678118654755], rtol=1e-14)

    def test_uninitialized(self):
        bank = PrototypeBank.empty(2, 2)
        momentum_update(bank, [np.ones(2), None])
        with pytest.raises(ValueError):
            score(bank, [1.0, 0.0])

    def test_zero_norm(self):
        bank = bank_from([[1.0, 0.0], [0.0, 1.0]])
        with pytest.raises(ValueError):
            score(bank, [0.0, 0.0])
        with pytest.raises(ValueError):
            score(bank_from([[0.0, 0.0], [0.0, 1.0]]), [1.0, 0.0])

    @given(st.floats(1e-3, 1e3), st.integers(0, 1000))
    def test_positive_rescaling(self, c, seed):
        rng = np.random.default_rng(seed)
        bank = bank_from(rng.normal(size=(4, 5)))
        h = rng.normal(size=5)
        np.testing.assert_allclose(score(bank, c * h), score(bank, h), atol=1e-12)
        np.testing.assert_allclose(
            pseudo_labels(bank, [c * h]), pseudo_labels(bank, [h]), atol=1e-12
        )


class TestPseudoLabels:
    def test_equidistant_uniform(self):
        bank = bank_from([[1.0, 0.0], [0.0, 1.0]])
        np.testing.assert_allclose(pseudo_labels(bank, [[1.0, 1.0]]), [[0.5, 0.5]])

    def test_sharp_limit(self):
        bank = bank_from([[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
        p = pseudo_labels(bank, [[1.0, 0.0, 0.0]], temperature=0.01)
        assert p[0, 1:].sum() < 1e-40

    def test_two_class_value(self):
        # cosines (0.9, 0.1): pick centroids making exactly those angles with e1
        c0 = [0.9, np.sqrt(1 - 0.81)]
        c1 = [0.1, -np.sqrt(1 - 0.01)]
        p = pseudo_labels(bank_from([c0, c1]), [[1.0, 0.0]], temperature=1.0)
        np.testing.assert_allclose(p[0], [0.6899744811276125, 0.3100255188723875], atol=1e-14)

    def test_rows_are_distributions(self):
        rng = np.random.default_rng(1)
        p = pseudo_labels(bank_from(rng.normal(size=(5, 8))), rng.normal(size=(50, 8)), 0.1)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(p >= 0)

    def test_nearest_class_mean_oracle(self):
        # m = 0 and one labeled batch: argmax pseudo-label == brute-force nearest
        # centroid under cosine distance.
        rng = np.random.default_rng(7)
        K, D = 4, 6
        labeled = rng.normal(size=(40, D))
        labels = np.arange(40) % K
        bank = momentum_update(PrototypeBank.empty(K, D, momentum=0.0),
                               batch_class_means(labeled, labels, K))
        queries = rng.normal(size=(100, D))
        got = np.argmax(pseudo_labels(bank, queries, 0.5), axis=1)
        for x, g in zip(queries, got):
            dists = []
            for c in range(K):
                centroid = sum(labeled[i] for i in range(40) if labels[i] == c) / 10
                cos = float(np.dot(x, centroid)) / (np.sqrt(np.dot(x, x)) * np.sqrt(np.dot(centroid, centroid)))
                dists.append(1 - cos)
            assert g == int(np.argmin(dists))


class TestCosineBackward:
    def test_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        h = rng.normal(size=(5, 4))
        C = rng.normal(size=(3, 4))
        w = rng.normal(size=(5, 3))
        cos, cache = cosine_scores(h, C)
        g = cosine_scores_backward(w, cache)
        fd = finite_diff_grad(lambda x: np.sum(w * cosine_scores(x, C)[0]), h, eps=1e-6)
        np.testing.assert_allclose(g, fd, rtol=1e-6, atol=1e-8)


class TestSelection:
    rows = np.array([[0.9, 0.1], [0.7, 0.3], [0.2, 0.8]])

    def test_dense_identity(self):
        targets, keep = apply_selection(self.rows, SelectionStrategy())
        np.testing.assert_array_equal(targets, self.rows)
        assert keep.all()

    def test_one_hot(self):
        targets, keep = apply_selection([[0.6, 0.4], [0.5, 0.5]], SelectionStrategy("onehot"))
        np.testing.assert_array_equal(targets, [[1, 0], [1, 0]])
        assert keep.all()

    def test_topk_one(self):
        targets, keep = apply_selection(self.rows, SelectionStrategy(SelectionKind.TOP_K, k=1))
        np.testing.assert_array_equal(keep, [True, False, True])
        np.testing.assert_array_equal(targets, [[1, 0], [0, 0], [0, 1]])

    def test_topk_more_than_rows(self):
        targets, keep = apply_selection(self.rows, SelectionStrategy("topk", k=10))
        assert keep.all()
        np.testing.assert_array_equal(targets.argmax(1), [0, 0, 1])

    def test_threshold(self):
        targets, keep = apply_selection(self.rows, SelectionStrategy("threshold", tau=0.75))
        np.testing.assert_array_equal(keep, [True, False, True])

    def test_topk_bound(self):
        rng = np.random.default_rng(0)
        p = rng.dirichlet(np.ones(5), size=300)
        for k in (1, 7, 64):
            _, keep = apply_selection(p, SelectionStrategy("topk", k=k))
            assert keep.sum() <= k * 5

    def test_parse_roundtrip(self):
        for text in ("dense", "onehot", "topk:64", "threshold:0.9"):
            assert str(SelectionStrategy.parse(text)) == text
        with pytest.raises(ValueError):
            SelectionStrategy.parse("topk:0")
        with pytest.raises(ValueError):
            SelectionStrategy("threshold", tau=1.0)
