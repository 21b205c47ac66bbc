import numpy as np
import pytest

from gbpkit.classify import (
    GroupStatistics,
    LinearClassifier,
    LossKind,
    classification_loss,
    gap_per_sample,
    gap_regularizer,
    group_activity,
    group_statistics,
    pool_groups,
    predict_and_margin,
)
from gbpkit.dictionary import GroupPartition
from gbpkit.errors import FormatError, InvalidInputError

from oracles import numeric_gradient


class TestLinearClassifier:
    def test_binary_prediction(self):
        clf = LinearClassifier(np.array([[1.0, -1.0]]), np.array([0.5]))
        assert predict_and_margin(clf, np.array([1.0, 0.0])) == (1, 1.5)
        assert predict_and_margin(clf, np.array([0.0, 2.0])) == (0, 1.5)

    def test_zero_score_is_class_zero(self):
        clf = LinearClassifier(np.array([[1.0, 1.0]]), np.zeros(1))
        assert predict_and_margin(clf, np.array([1.0, -1.0])) == (0, 0.0)

    def test_multiclass_margin(self):
        W = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
        clf = LinearClassifier(W, np.zeros(3))
        cls, margin = predict_and_margin(clf, np.array([[2.0, 0.5], [1.0, 1.0]]))
        np.testing.assert_array_equal(cls, [2, 2])
        np.testing.assert_allclose(margin, [0.5, 1.0])

    def test_tie_goes_to_lowest_index(self):
        clf = LinearClassifier(np.eye(3), np.zeros(3))
        assert predict_and_margin(clf, np.array([1.0, 1.0, 0.0])) == (0, 0.0)

    def test_immutable(self):
        clf = LinearClassifier(np.ones((1, 3)), np.zeros(1))
        with pytest.raises(ValueError):
            clf.weights[0, 0] = 5.0

    def test_bias_shape_checked(self):
        with pytest.raises(InvalidInputError):
            LinearClassifier(np.ones((2, 3)), np.zeros(3))

    def test_feature_count_checked(self):
        clf = LinearClassifier(np.ones((1, 3)), np.zeros(1))
        with pytest.raises(InvalidInputError):
            clf.scores(np.ones(4))

    def test_save_load(self, tmp_path):
        rng = np.random.default_rng(42)
        clf = LinearClassifier(rng.standard_normal((3, 5)), rng.standard_normal(3))
        clf.save(tmp_path / "c.bin")
        back = LinearClassifier.load(tmp_path / "c.bin")
        np.testing.assert_array_equal(back.weights, clf.weights)
        np.testing.assert_array_equal(back.bias, clf.bias)

    def test_load_wrong_magic(self, tmp_path):
        from gbpkit.container import write_matrix

        write_matrix(tmp_path / "d.bin", np.ones((2, 2)))
        with pytest.raises(FormatError, match="magic"):
            LinearClassifier.load(tmp_path / "d.bin")


class TestLoss:
    def test_hinge_values(self):
        clf = LinearClassifier(np.array([[1.0, 0.0]]), np.zeros(1))
        Z = np.array([[2.0, 0.0], [0.5, 0.0], [0.5, 0.0]])
        loss, g = classification_loss(clf, Z, np.array([1, 1, 0]), "hinge")
        assert loss == pytest.approx((0.0 + 0.5 + 1.5) / 3)
        np.testing.assert_allclose(g, [[0, 0], [-1 / 3, 0], [1 / 3, 0]])

    def test_hinge_needs_binary(self):
        clf = LinearClassifier(np.eye(3), np.zeros(3))
        with pytest.raises(InvalidInputError):
            classification_loss(clf, np.ones(3), [0], "hinge")

    def test_cross_entropy_gradients(self):
        rng = np.random.default_rng(42)
        W, b = rng.standard_normal((4, 6)), rng.standard_normal(4)
        Z = rng.standard_normal((5, 6))
        y = np.array([0, 3, 1, 2, 3])
        loss, gZ, gW, gb = classification_loss(LinearClassifier(W, b), Z, y, LossKind.CROSS_ENTROPY, params_grad=True)
        f = lambda Zv: classification_loss(LinearClassifier(W, b), Zv, y, "cross_entropy")[0]
        np.testing.assert_allclose(gZ, numeric_gradient(f, Z), rtol=1e-6, atol=1e-9)
        fw = lambda Wv: classification_loss(LinearClassifier(Wv, b), Z, y, "cross_entropy")[0]
        np.testing.assert_allclose(gW, numeric_gradient(fw, W), rtol=1e-6, atol=1e-9)
        fb = lambda bv: classification_loss(LinearClassifier(W, bv), Z, y, "cross_entropy")[0]
        np.testing.assert_allclose(gb, numeric_gradient(fb, b), rtol=1e-6, atol=1e-9)

    def test_unknown_loss(self):
        clf = LinearClassifier(np.ones((1, 2)), np.zeros(1))
        with pytest.raises(InvalidInputError):
            classification_loss(clf, np.ones(2), [1], "squared")

    def test_label_range(self):
        clf = LinearClassifier(np.eye(2), np.zeros(2))
        with pytest.raises(InvalidInputError):
            classification_loss(clf, np.ones(2), [2], "cross_entropy")


class TestPoolingAndGap:
    part = GroupPartition.contiguous(6, 2)

    def test_pool(self):
        Z = np.array([[3.0, 4.0, 0.0, 0.0, 1.0, 0.0]])
        np.testing.assert_allclose(pool_groups(Z, self.part), [[5.0, 0.0, 1.0]])

    def test_gap_value(self):
        Z = np.array([[3.0, 4.0, 0.1, 0.0, 1.0, 0.0]])
        gaps, _, valid = gap_per_sample(Z, self.part, 0.5)
        assert valid[0]
        assert gaps[0] == pytest.approx(1.0 - 0.1)

    def test_gap_gradient(self):
        rng = np.random.default_rng(42)
        Z = rng.standard_normal((1, 6))
        Z[0, 2:4] *= 0.1
        thr = 0.5
        _, grads, valid = gap_per_sample(Z, self.part, thr)
        assert valid[0]
        f = lambda v: gap_per_sample(v, self.part, thr)[0][0]
        np.testing.assert_allclose(grads, numeric_gradient(f, Z), atol=1e-8)

    def test_degenerate(self):
        Z = np.ones((2, 6))
        res = gap_regularizer(Z, self.part, 0.0)
        assert res.degenerate and res.value == 0.0 and not np.any(res.grad)

    def test_regularizer_picks_worst_sample(self):
        Z = np.array([[3.0, 0.0, 0.0, 0.0, 0.0, 0.0], [1.0, 0.0, 0.5, 0.0, 0.0, 0.0]])
        res = gap_regularizer(Z, self.part, 0.75)
        assert res.sample == 1
        assert res.value == pytest.approx(-0.5)
        assert not np.any(res.grad[0])

    def test_empty_batch(self):
        with pytest.raises(InvalidInputError):
            gap_regularizer(np.zeros((0, 6)), self.part, 0.0)


class TestGroupStatistics:
    def test_hand_example(self):
        est = np.array([[1, 0, 0, 0], [1, 1, 0, 0]], dtype=bool)
        tru = np.array([[1, 0, 0, 0], [1, 0, 0, 0]], dtype=bool)
        s = group_statistics(est, tru)
        assert s == GroupStatistics(5 / 8, 7 / 8, 0.5, 2)
        assert list(s.as_row()) == ["Inactive Groups", "Mean Grp. Acc.", "Found Grp. Combs."]

    def test_activity_threshold(self):
        part = GroupPartition.contiguous(4, 2)
        Z = np.array([[0.3, 0.4, 0.0, 0.1]])
        np.testing.assert_array_equal(group_activity(Z, part), [[True, True]])
        np.testing.assert_array_equal(group_activity(Z, part, 0.2), [[True, False]])
        np.testing.assert_array_equal(group_activity(np.array([[0.5, 0.1]]), None, 0.2), [[True, False]])

    def test_shape_mismatch(self):
        with pytest.raises(InvalidInputError):
            group_statistics(np.ones((2, 3), bool), np.ones((2, 4), bool))
