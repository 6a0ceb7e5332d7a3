import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import triplet_oracle
from tsdlab.losses import (LOSS_TERMS, BNNeckHead, ce_bnneck, cross_entropy, distillation_loss, diversity_loss,
                           focal_visibility_loss, pairwise_distance, part_avg_triplet, part_distance, total_loss,
                           triplet_batch_hard)
from tsdlab.tensor import Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(2)


class TestDistillation:
    def test_identical_is_zero(self, rng):
        f = rng.normal(size=(4, 6))
        assert distillation_loss(Tensor(f), Tensor(f)).item() == pytest.approx(0.0, abs=1e-12)

    def test_orthogonal_is_one(self):
        s = Tensor([[1.0, 0.0], [0.0, 2.0]])
        t = Tensor([[0.0, 3.0], [1.0, 0.0]])
        assert distillation_loss(s, t).item() == pytest.approx(1.0, abs=1e-12)

    def test_antipodal_and_equal(self):
        s = Tensor([[1.0, 2.0], [3.0, -1.0]])
        t = Tensor([[-2.0, -4.0], [3.0, -1.0]])
        assert distillation_loss(s, t).item() == pytest.approx(1.0, abs=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (2, 3, 4), elements=st.floats(-100, 100)))
    def test_range(self, x):
        v = distillation_loss(Tensor(x[0]), Tensor(x[1])).item()
        assert 0.0 <= v <= 2.0

    def test_stop_gradient_contract(self, rng):
        s = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        t = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        loss = distillation_loss(s, t)
        loss.backward()
        assert t.grad is None and s.grad is not None
        t2 = Tensor(t.data + 0.5)
        assert distillation_loss(s, t2).item() != loss.item()

    def test_bidirectional_flag(self, rng):
        s = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        t = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        distillation_loss(s, t, stop_gradient=False).backward()
        assert t.grad is not None and np.abs(t.grad).sum() > 0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            distillation_loss(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 3))))


class TestDiversity:
    def test_identical_parts_one(self, rng):
        v = rng.normal(size=5)
        assert diversity_loss(Tensor(np.tile(v, (4, 1)))).item() == pytest.approx(1.0, abs=1e-12)

    def test_orthogonal_pair_zero(self):
        assert diversity_loss(Tensor([[1.0, 0.0], [0.0, 1.0]])).item() == 0.0

    def test_loop_oracle(self, rng):
        x = rng.normal(size=(3, 5))
        total = 0.0
        for i in range(3):
            for j in range(3):
                if i != j:
                    total += x[i] @ x[j] / (np.linalg.norm(x[i]) * np.linalg.norm(x[j]))
        assert diversity_loss(Tensor(x)).item() == pytest.approx(total / 6, abs=1e-12)

    def test_needs_two_parts(self):
        with pytest.raises(ValueError):
            diversity_loss(Tensor(np.ones((1, 3))))

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (2, 4, 3), elements=st.floats(-100, 100)))
    def test_range(self, x):
        assert -1.0 <= diversity_loss(Tensor(x)).item() <= 1.0 + 1e-12


class TestFocal:
    def test_confident_correct_near_zero(self):
        assert focal_visibility_loss(Tensor([1 - 1e-7]), np.array([1.0])).item() < 1e-12

    def test_hand_positive(self):
        v = focal_visibility_loss(Tensor([0.5]), np.array([1.0])).item()
        assert v == pytest.approx(0.25 * 0.25 * math.log(2), abs=1e-15)
        assert abs(v - 0.04332) < 1e-5

    def test_hand_negative(self):
        v = focal_visibility_loss(Tensor([0.5]), np.array([0.0])).item()
        assert v == pytest.approx(0.75 * 0.25 * math.log(2), abs=1e-15)
        assert abs(v - 0.12997) < 1e-5

    def test_averaged_over_parts(self):
        v = focal_visibility_loss(Tensor([0.5, 0.5]), np.array([1.0, 0.0])).item()
        assert v == pytest.approx((0.04332169878499658 + 0.12996509635498975) / 2, abs=1e-12)

    def test_clamped_extremes_finite(self):
        assert math.isfinite(focal_visibility_loss(Tensor([0.0, 1.0]), np.array([1.0, 0.0])).item())


class TestCrossEntropy:
    def test_uniform_logits(self):
        assert cross_entropy(Tensor(np.zeros((2, 5))), np.array([1, 3])).item() == pytest.approx(math.log(5))

    def test_large_margin_goes_to_zero(self):
        logits = np.array([[50.0, 0.0, 0.0]])
        assert cross_entropy(Tensor(logits), np.array([0])).item() < 1e-20

    def test_smoothed_k3(self):
        logits = np.array([[2.0, -1.0, 0.5]])
        z = math.log(math.exp(2.0) + math.exp(-1.0) + math.exp(0.5))
        t = [0.9 + 0.1 / 3, 0.1 / 3, 0.1 / 3]
        expected = -sum(ti * (li - z) for ti, li in zip(t, logits[0]))
        assert cross_entropy(Tensor(logits), np.array([0]), 0.1).item() == pytest.approx(expected, abs=1e-14)

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            cross_entropy(Tensor(np.zeros((1, 3))), np.array([3]))

    def test_bad_smoothing(self):
        with pytest.raises(ValueError):
            cross_entropy(Tensor(np.zeros((1, 3))), np.array([0]), 1.0)


class TestBNNeck:
    def test_training_normalizes_batch(self, rng):
        head = BNNeckHead(4, 3, rng)
        z = head.normalize(Tensor(rng.normal(3.0, 2.0, size=(16, 4)))).data
        np.testing.assert_allclose(z.mean(axis=0), 0.0, atol=1e-12)
        np.testing.assert_allclose(z.var(axis=0), 1.0, atol=1e-4)

    def test_running_stats_used_in_eval(self, rng):
        head = BNNeckHead(4, 3, rng, momentum=1.0)
        x = rng.normal(3.0, 2.0, size=(16, 4))
        head.normalize(Tensor(x))
        head.eval()
        np.testing.assert_allclose(head.running_mean, x.mean(axis=0))
        z = head.normalize(Tensor(x[:2])).data
        expected = (x[:2] - x.mean(axis=0)) / np.sqrt(x.var(axis=0, ddof=1) + head.eps)
        np.testing.assert_allclose(z, expected, atol=1e-12)

    def test_ce_uses_post_norm_feature(self, rng):
        head = BNNeckHead(4, 3, rng)
        x = Tensor(rng.normal(size=(6, 4)))
        labels = np.array([0, 1, 2, 0, 1, 2])
        head.running_mean[...] = 0.0
        expected = cross_entropy(Tensor(head.normalize(x).data @ head.classifier.data), labels).item()
        assert ce_bnneck(x, labels, head).item() == pytest.approx(expected, abs=1e-12)


class TestTriplet:
    ids = np.array([0, 0, 1, 1])

    def test_separated_clusters_zero(self):
        x = np.array([[0.0, 0.0], [0.1, 0.0], [5.0, 5.0], [5.1, 5.0]])
        assert triplet_batch_hard(Tensor(x), self.ids).item() == 0.0

    def test_collapsed_gives_margin(self):
        assert triplet_batch_hard(Tensor(np.zeros((4, 2))), self.ids, 0.3).item() == pytest.approx(0.3)

    @pytest.mark.parametrize("seed", range(5))
    def test_brute_force_oracle(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(8, 3))
        ids = np.array([0, 0, 1, 1, 2, 2, 3, 3])
        dist = pairwise_distance(Tensor(x)).data
        np.testing.assert_allclose(dist, np.linalg.norm(x[:, None] - x[None], axis=-1), atol=1e-5)
        assert triplet_batch_hard(Tensor(x), ids, 0.3).item() == pytest.approx(triplet_oracle(dist, ids, 0.3),
                                                                                abs=1e-12)

    def test_degenerate_batch(self):
        with pytest.raises(ValueError):
            triplet_batch_hard(Tensor(np.zeros((3, 2))), np.array([0, 0, 1]))


class TestPartDistance:
    def test_constant_part_distance(self):
        a = np.zeros((3, 2))
        b = np.array([[3.0, 4.0], [0.0, 5.0], [-5.0, 0.0]])
        d = part_distance(Tensor(np.stack([a, b]))).data
        assert d[0, 1] == pytest.approx(5.0, abs=1e-9)

    def test_single_mutual_part(self, rng):
        x = rng.normal(size=(2, 3, 4))
        vis = np.array([[1, 1, 0], [1, 0, 1]])
        d = part_distance(Tensor(x), vis).data
        assert d[0, 1] == pytest.approx(np.linalg.norm(x[0, 0] - x[1, 0]), abs=1e-9)

    def test_no_mutual_part_falls_back(self, rng):
        x = rng.normal(size=(2, 3, 4))
        d = part_distance(Tensor(x), np.array([[1, 0, 0], [0, 1, 0]])).data
        assert d[0, 1] == pytest.approx(np.linalg.norm(x[0] - x[1], axis=-1).mean(), abs=1e-9)

    def test_loop_oracle(self, rng):
        x = rng.normal(size=(5, 4, 3))
        vis = (rng.random((5, 4)) < 0.6).astype(float)
        d = part_distance(Tensor(x), vis).data
        for i in range(5):
            for j in range(5):
                terms = [np.linalg.norm(x[i, p] - x[j, p]) for p in range(4) if vis[i, p] and vis[j, p]]
                if not terms:
                    terms = [np.linalg.norm(x[i, p] - x[j, p]) for p in range(4)]
                assert d[i, j] == pytest.approx(np.mean(terms), abs=1e-5)

    def test_part_triplet_oracle(self, rng):
        x = rng.normal(size=(6, 3, 4))
        ids = np.array([0, 0, 1, 1, 2, 2])
        vis = (rng.random((6, 3)) < 0.7).astype(float)
        dist = part_distance(Tensor(x), vis).data
        assert part_avg_triplet(Tensor(x), vis, ids).item() == pytest.approx(triplet_oracle(dist, ids, 0.3),
                                                                              abs=1e-12)


class TestTotal:
    def test_all_zero(self):
        rep = total_loss({k: Tensor(0.0) for k in LOSS_TERMS})
        assert rep.value == 0.0

    def test_sum_of_fields(self, rng):
        vals = rng.random(len(LOSS_TERMS))
        rep = total_loss({k: Tensor(v) for k, v in zip(LOSS_TERMS, vals)})
        assert rep.value == pytest.approx(math.fsum(rep.terms.values()), abs=1e-9)
        assert rep.mask == pytest.approx(rep.terms["ce_part"] + rep.terms["tri_part"] + rep.terms["parsing"])
        rec = rep.as_record()
        assert set(LOSS_TERMS) <= set(rec) and rec["total"] == rep.value

    def test_missing_terms_skipped(self):
        rep = total_loss({"ce_global": Tensor(1.5), "distill": None})
        assert rep.value == 1.5 and "distill" not in rep.terms

    def test_unknown_term(self):
        with pytest.raises(KeyError):
            total_loss({"bogus": Tensor(1.0)})
