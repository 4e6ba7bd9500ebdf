import math

import numpy as np
import pytest

from hmid import lorentz as L
from hmid import losses as Ls
from hmid.losses import EmbeddingBatch, LossContractError, LossWeights

from oracles import brute_ce, brute_contrastive, brute_distance


def pts(rows, c=1.0):
    return L.lift(np.asarray(rows, dtype=np.float64), c)


def coords(p):
    return [list(r) for r in p.coords()]


class TestContrastive:
    def test_single_pair_is_zero(self):
        b = EmbeddingBatch(pts([[0.3, 0.1]]), pts([[0.5, -0.2]]))
        assert float(Ls.hyperbolic_contrastive_loss(b, 0.7, 1.0)) == pytest.approx(0.0, abs=1e-15)

    def test_two_pair_reference(self):
        # pairs coincide, the two pairs sit 10 apart on one geodesic
        s = math.sinh(5.0)
        b = EmbeddingBatch(pts([[s, 0], [-s, 0]]), pts([[s, 0], [-s, 0]]))
        expected = math.log1p(math.exp(-10.0))  # -log(1 / (1 + e^-10))
        got = float(Ls.hyperbolic_contrastive_loss(b, 1.0, 1.0))
        assert got == pytest.approx(expected, rel=1e-5)
        i2t, t2i = Ls.hyperbolic_contrastive_terms(b.image, b.text, 1.0, 1.0)
        assert float(i2t) == float(t2i)

    def test_hand_enumerated_b2(self):
        rng = np.random.default_rng(0)
        c, tau = 1.7, 0.4
        img, txt = pts(rng.normal(size=(2, 3)), c), pts(rng.normal(size=(2, 3)), c)
        expected = brute_contrastive(coords(img), coords(txt), tau, c)
        got = float(Ls.hyperbolic_contrastive_loss(EmbeddingBatch(img, txt), tau, c))
        assert abs(got - expected) <= 1e-10

    def test_permutation_invariant(self):
        rng = np.random.default_rng(1)
        img, txt = pts(rng.normal(size=(6, 3))), pts(rng.normal(size=(6, 3)))
        perm = rng.permutation(6)
        a = Ls.hyperbolic_contrastive_loss(EmbeddingBatch(img, txt), 0.5, 1.0)
        b = Ls.hyperbolic_contrastive_loss(EmbeddingBatch(img[perm], txt[perm]), 0.5, 1.0)
        assert float(a) == pytest.approx(float(b), abs=1e-12)

    def test_tau_below_minimum(self):
        b = EmbeddingBatch(pts([[0.3, 0.1]]), pts([[0.5, -0.2]]))
        with pytest.raises(LossContractError):
            Ls.hyperbolic_contrastive_loss(b, 0.005, 1.0)


class TestDistillation:
    def test_hand_enumerated_b2(self):
        rng = np.random.default_rng(2)
        c, tau = 0.8, 0.3
        si, st, ti, tt = (pts(rng.normal(size=(2, 3)), c) for _ in range(4))
        n = 2
        i2t = [[-brute_distance(coords(si)[i], coords(tt)[j], c) / tau for j in range(n)]
               for i in range(n)]
        t2i = [[-brute_distance(coords(st)[i], coords(ti)[j], c) / tau for j in range(n)]
               for i in range(n)]
        expected = 0.5 * (brute_ce(i2t) + brute_ce(t2i))
        got = float(Ls.interaction_distillation_loss(EmbeddingBatch(si, st),
                                                     EmbeddingBatch(ti, tt, "teacher"), tau, c))
        assert abs(got - expected) <= 1e-10

    def test_teacher_equal_to_student(self):
        rng = np.random.default_rng(3)
        s = EmbeddingBatch(pts(rng.normal(size=(8, 4))), pts(rng.normal(size=(8, 4))))
        dl = float(Ls.interaction_distillation_loss(s, s, 0.6, 1.0))
        hcl = float(Ls.hyperbolic_contrastive_loss(s, 0.6, 1.0))
        assert abs(dl - hcl) <= 1e-12

    def test_single_pair_is_zero(self):
        s = EmbeddingBatch(pts([[0.3, 0.1]]), pts([[0.5, -0.2]]))
        assert float(Ls.interaction_distillation_loss(s, s, 0.7, 1.0)) == pytest.approx(0, abs=1e-15)

    def test_batch_mismatch(self):
        rng = np.random.default_rng(4)
        s = EmbeddingBatch(pts(rng.normal(size=(3, 2))), pts(rng.normal(size=(3, 2))))
        t = EmbeddingBatch(pts(rng.normal(size=(2, 2))), pts(rng.normal(size=(2, 2))))
        with pytest.raises(LossContractError):
            Ls.interaction_distillation_loss(s, t, 0.7, 1.0)


class TestEntailment:
    def test_radial_pairs_are_zero(self):
        rng = np.random.default_rng(5)
        d = rng.normal(size=(20, 3))
        b = EmbeddingBatch(image=pts(2.5 * d), text=pts(d))
        assert float(Ls.entailment_loss(b, 1.0)) == 0.0

    def test_orthogonal_pair(self):
        x, y = pts([[0.4, 0.0]]), pts([[0.0, 0.4]])
        loss = float(Ls.entailment_loss(EmbeddingBatch(image=y, text=x), 1.0, 0.1))
        ext = float(L.exterior_angle(x, y, 1.0)[0])
        assert loss > 0
        assert abs(loss - (ext - math.pi / 6)) <= 1e-9

    def test_never_negative(self):
        rng = np.random.default_rng(6)
        v = Ls.entailment_violations(pts(rng.normal(size=(500, 3))), pts(rng.normal(size=(500, 3))), 1.0)
        assert np.all(np.asarray(v) >= 0)

    def test_rotation_sweep_decreases(self):
        x = pts([[0.8, 0.0]])
        losses = []
        for theta in np.linspace(np.pi / 2, 0.0, 60):
            y = pts([[2.0 * np.cos(theta), 2.0 * np.sin(theta)]])
            losses.append(float(Ls.entailment_loss(EmbeddingBatch(image=y, text=x), 1.0)))
        steps = np.diff(losses)
        assert np.all(steps <= 0)
        assert losses[0] > 0 and losses[-1] == 0.0

    def test_root_parent_is_counted(self):
        before = Ls.root_warnings["count"]
        b = EmbeddingBatch(image=pts([[0.5, 0.5]]), text=pts([[0.0, 0.0]]))
        assert np.isfinite(float(Ls.entailment_loss(b, 1.0)))
        assert Ls.root_warnings["count"] == before + 1


class TestTotal:
    def test_composition_is_exact(self):
        rng = np.random.default_rng(7)
        s = EmbeddingBatch(pts(rng.normal(size=(4, 3))), pts(rng.normal(size=(4, 3))))
        t = EmbeddingBatch(pts(rng.normal(size=(4, 3))), pts(rng.normal(size=(4, 3))), "teacher")
        w = LossWeights(0.7, 0.3)
        r = Ls.total_loss(s, t, 0.5, 1.0, weights=w)
        f = r.as_floats()
        assert f["total"] == f["contrastive"] + 0.7 * f["distillation"] + 0.3 * f["entailment"]

    def test_zero_weights(self):
        rng = np.random.default_rng(8)
        s = EmbeddingBatch(pts(rng.normal(size=(4, 3))), pts(rng.normal(size=(4, 3))))
        r = Ls.total_loss(s, s, 0.5, 1.0, weights=LossWeights(0.0, 0.0))
        assert float(r.total) == float(r.contrastive)

    def test_default_weights(self):
        assert (LossWeights().distillation, LossWeights().entailment) == (1.0, 0.2)

    def test_negative_weights_rejected(self):
        with pytest.raises(LossContractError):
            LossWeights(-1.0, 0.2)


class TestClip:
    def test_reference_value(self):
        img = np.array([[1.0, 0.0], [0.0, 1.0]])
        per_direction = -math.log(math.e / (math.e + 1))
        assert float(Ls.euclidean_clip_loss(img, img.copy(), 1.0)) == pytest.approx(per_direction,
                                                                                    abs=1e-12)
        assert per_direction == pytest.approx(0.3133, abs=1e-4)

    def test_single_pair_is_zero(self):
        assert float(Ls.euclidean_clip_loss(np.ones((1, 3)), np.ones((1, 3)), 0.5)) == pytest.approx(0)

    def test_scale_invariant(self):
        rng = np.random.default_rng(9)
        a, b = rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
        scaled = a.copy()
        scaled[2] *= 7.0
        assert float(Ls.euclidean_clip_loss(a, b, 0.3)) == pytest.approx(
            float(Ls.euclidean_clip_loss(scaled, b, 0.3)), abs=1e-12)

    def test_zero_vector_rejected(self):
        with pytest.raises(LossContractError):
            Ls.euclidean_clip_loss(np.zeros((2, 3)), np.ones((2, 3)), 0.5)


class TestHierarchyTerm:
    def test_weighted_separately(self):
        rng = np.random.default_rng(10)
        s = EmbeddingBatch(pts(rng.normal(size=(4, 3))), pts(rng.normal(size=(4, 3))))
        parent, child = pts(rng.normal(size=(4, 3))), pts(3 * rng.normal(size=(4, 3)))
        r = Ls.total_loss(s, None, 0.5, 1.0, weights=LossWeights(0.0, 0.2, 0.5),
                          hierarchy=[(parent, child)])
        f = r.as_floats()
        assert f["entailment"] == float(Ls.entailment_loss(s, 1.0))
        assert f["hierarchy"] == float(Ls.entailment_loss(EmbeddingBatch(child, parent), 1.0))
        assert f["total"] == f["contrastive"] + 0.2 * f["entailment"] + 0.5 * f["hierarchy"]

    def test_off_by_default(self):
        rng = np.random.default_rng(11)
        s = EmbeddingBatch(pts(rng.normal(size=(4, 3))), pts(rng.normal(size=(4, 3))))
        r = Ls.total_loss(s, None, 0.5, 1.0, hierarchy=[(s.text, s.image)])
        assert r.as_floats()["hierarchy"] == 0.0
