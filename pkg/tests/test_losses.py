import math

import mpmath
import numpy as np
import pytest

from kdlab import gradcheck
from kdlab.losses import (
    DistillTarget,
    attention_map,
    cross_entropy,
    gap,
    kl_distill_loss,
    total_loss,
    triplet_loss,
    weighted_distill_loss,
)
from kdlab.tensor import DomainError, ShapeError, Tensor, backward, mean as tmean, sum as tsum, zero_grads

RNG = np.random.default_rng(77)


class TestGap:
    def test_identical_values_give_zero(self):
        t = DistillTarget("embedding", Tensor(np.ones((4, 3))), Tensor(np.ones((4, 3))))
        np.testing.assert_array_equal(gap(t).data, np.zeros(4))

    def test_hand_mean_squared_difference(self):
        t = DistillTarget("embedding", Tensor([[0.0, 0.0]]), Tensor([[2.0, 0.0]]))
        np.testing.assert_allclose(gap(t).data, [2.0])

    def test_homogeneity_in_scale(self):
        s = RNG.normal(size=(5, 4))
        te = RNG.normal(size=(5, 4))
        d1 = gap(DistillTarget("embedding", Tensor(te), Tensor(s))).data
        d3 = gap(DistillTarget("embedding", Tensor(3.0 * te), Tensor(3.0 * s))).data
        np.testing.assert_allclose(d3, 9.0 * d1, rtol=1e-12)

    def test_maps_flattened_first(self):
        s = RNG.normal(size=(2, 3, 4, 4))
        te = RNG.normal(size=(2, 3, 4, 4))
        d = gap(DistillTarget("feature_map", Tensor(te), Tensor(s))).data
        expect = ((s - te) ** 2).reshape(2, -1).mean(axis=1)
        np.testing.assert_allclose(d, expect, rtol=1e-12)

    def test_permutation_equivariance(self):
        s, te = RNG.normal(size=(6, 3)), RNG.normal(size=(6, 3))
        d = gap(DistillTarget("embedding", Tensor(te), Tensor(s))).data
        perm = RNG.permutation(6)
        dp = gap(DistillTarget("embedding", Tensor(te[perm]), Tensor(s[perm]))).data
        np.testing.assert_allclose(dp, d[perm], rtol=1e-12)

    def test_misaligned_shapes_rejected(self):
        with pytest.raises(ShapeError):
            gap(DistillTarget("embedding", Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4)))))

    def test_no_gradient_reaches_teacher(self):
        teacher = Tensor(RNG.normal(size=(3, 2)), requires_grad=True)
        student = Tensor(RNG.normal(size=(3, 2)), requires_grad=True)
        t = DistillTarget("embedding", teacher, student)
        backward(tsum(gap(t)))
        assert teacher.grad is None
        assert student.grad is not None


class TestWeightedLoss:
    def test_uniform_weights_equal_plain_mean(self):
        d = Tensor(RNG.uniform(0, 3, 8), requires_grad=True)
        loss = weighted_distill_loss(d, np.ones(8))
        assert loss.item() == tmean(d).item()

    def test_all_zero_weights_annihilate(self):
        d = Tensor(RNG.uniform(0, 3, 5))
        assert weighted_distill_loss(d, np.zeros(5)).item() == 0.0

    def test_hand_value(self):
        loss = weighted_distill_loss(Tensor([1.0, 3.0]), np.array([2.0, 0.0]))
        assert loss.item() == pytest.approx(1.0, abs=1e-15)

    def test_negative_weight_rejected(self):
        with pytest.raises(DomainError):
            weighted_distill_loss(Tensor([1.0]), np.array([-0.1]))

    def test_gradient_matches_finite_differences(self):
        student = Tensor(RNG.normal(size=(4, 3)), requires_grad=True)
        teacher = Tensor(RNG.normal(size=(4, 3)))
        w = RNG.uniform(0, 2, 4)

        def fn():
            return weighted_distill_loss(gap(DistillTarget("embedding", teacher, student)), w)

        assert gradcheck.check_gradients(fn, [student], tol=1e-4) < 1e-4


class TestTotalLoss:
    def test_lambda_zero_is_task_only(self):
        assert total_loss(Tensor(1.25), Tensor(9.0), 0.0).item() == 1.25

    def test_hand_value(self):
        assert total_loss(Tensor(1.0), Tensor(2.0), 0.5).item() == pytest.approx(2.0)

    def test_zero_distill_identity(self):
        assert total_loss(Tensor(0.7), Tensor(0.0), 1.0).item() == 0.7


class TestKlDistill:
    def test_identical_logits_give_zero(self):
        logits = Tensor(RNG.normal(size=(4, 5)))
        loss = kl_distill_loss(logits, Tensor(logits.data.copy()), temperature=2.0)
        assert abs(loss.item()) < 1e-12

    def test_non_negative(self):
        for _ in range(20):
            s = Tensor(RNG.normal(size=(3, 6)))
            t = Tensor(RNG.normal(size=(3, 6)))
            assert kl_distill_loss(s, t, temperature=1.5).item() >= -1e-15

    def test_arbitrary_precision_value(self):
        # teacher probs (2/3, 1/3) vs student (1/2, 1/2) at T=1
        teacher = Tensor([[math.log(2.0), 0.0]])
        student = Tensor([[0.0, 0.0]])
        got = kl_distill_loss(student, teacher, temperature=1.0).item()
        with mpmath.workdps(50):
            p = [mpmath.mpf(2) / 3, mpmath.mpf(1) / 3]
            q = [mpmath.mpf(1) / 2, mpmath.mpf(1) / 2]
            expect = float(mpmath.fsum(pi * mpmath.log(pi / qi) for pi, qi in zip(p, q)))
        assert got == pytest.approx(expect, abs=1e-12)

    def test_non_positive_temperature_rejected(self):
        with pytest.raises(DomainError):
            kl_distill_loss(Tensor(np.zeros((1, 2))), Tensor(np.zeros((1, 2))), temperature=0.0)


class TestAttentionMap:
    def test_single_channel_is_normalized_square(self):
        x = RNG.normal(size=(2, 1, 3, 3))
        out = attention_map(Tensor(x)).data
        sq = (x[:, 0] ** 2).reshape(2, -1)
        expect = sq / np.linalg.norm(sq, axis=1, keepdims=True)
        np.testing.assert_allclose(out, expect, rtol=1e-9)

    def test_channel_permutation_invariant(self):
        x = RNG.normal(size=(2, 4, 3, 3))
        a = attention_map(Tensor(x)).data
        b = attention_map(Tensor(x[:, RNG.permutation(4)])).data
        np.testing.assert_allclose(a, b, rtol=1e-12)

    def test_scale_invariant(self):
        x = RNG.normal(size=(2, 3, 4, 4))
        a = attention_map(Tensor(x)).data
        b = attention_map(Tensor(2.7 * x)).data
        np.testing.assert_allclose(a, b, rtol=1e-9)

    def test_zero_map_returns_zero_map(self):
        out = attention_map(Tensor(np.zeros((2, 3, 4, 4)))).data
        np.testing.assert_array_equal(out, np.zeros((2, 16)))

    def test_gradient_matches_finite_differences(self):
        fmap = Tensor(RNG.normal(size=(2, 2, 3, 3)), requires_grad=True)
        probe = Tensor(RNG.normal(size=(2, 9)))

        def fn():
            from kdlab.tensor import mul
            return tsum(mul(attention_map(fmap), probe))

        assert gradcheck.check_gradients(fn, [fmap], tol=1e-4) < 1e-4


class TestCrossEntropy:
    def test_uniform_logits(self):
        loss = cross_entropy(Tensor(np.zeros((2, 4))), np.array([0, 3]))
        assert loss.item() == pytest.approx(math.log(4.0), abs=1e-12)

    def test_gradient_is_softmax_minus_onehot(self):
        logits = Tensor(RNG.normal(size=(3, 4)), requires_grad=True)
        labels = np.array([1, 0, 2])
        backward(cross_entropy(logits, labels))
        p = np.exp(logits.data - logits.data.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        onehot = np.eye(4)[labels]
        np.testing.assert_allclose(logits.grad, (p - onehot) / 3.0, atol=1e-12)


class TestTripletLoss:
    def test_well_separated_clusters_give_zero(self):
        emb = np.vstack([np.zeros((3, 2)), 10.0 + np.zeros((3, 2))])
        emb += RNG.normal(scale=0.01, size=emb.shape)
        labels = np.array([0, 0, 0, 1, 1, 1])
        assert triplet_loss(Tensor(emb), labels, margin=0.3).item() == pytest.approx(0.0, abs=1e-6)

    def test_collapsed_embeddings_give_margin(self):
        emb = Tensor(np.zeros((4, 3)))
        labels = np.array([0, 0, 1, 1])
        assert triplet_loss(emb, labels, margin=0.3).item() == pytest.approx(0.3, abs=1e-9)

    def test_gradient_matches_finite_differences(self):
        emb = Tensor(RNG.normal(size=(6, 3)), requires_grad=True)
        labels = np.array([0, 0, 1, 1, 2, 2])

        def fn():
            return triplet_loss(emb, labels, margin=0.5)

        assert gradcheck.check_gradients(fn, [emb], tol=1e-4) < 1e-4

    def test_all_singletons_rejected(self):
        with pytest.raises(DomainError):
            triplet_loss(Tensor(RNG.normal(size=(3, 2))), np.array([0, 1, 2]))
