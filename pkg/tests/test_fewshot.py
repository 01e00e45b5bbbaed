"""Episodic sampling and prototype classification math."""

import math

import numpy as np
import pytest

from envid import autodiff as ad
from envid import fewshot
from envid.errors import (DimensionMismatch, EmptySupport, InsufficientClasses,
                          InsufficientSamples)
from envid.fewshot import (Episode, Prototype, RejectionRule, class_likelihood,
                           class_loss, distances, predict, prototypes,
                           reject_unknown, sample_episode)


def dataset(n_classes=12, per_class=20):
    return {f"room{i:02d}": [(i, j) for j in range(per_class)]
            for i in range(n_classes)}


class TestSampleEpisode:
    def test_counts_and_disjointness(self, rng):
        ep = sample_episode(dataset(), 5, 4, rng, query_cap=6)
        assert ep.n_way == 5 and ep.k_shot == 4
        assert len(ep.classes) == 5
        for cid in ep.classes:
            sup = set(ep.support[cid])
            qs = {item for item, c, _ in ep.queries if c == cid}
            assert len(sup) == 4
            assert len(qs) <= 6
            assert not sup & qs

    def test_no_support_query_overlap_many(self, rng):
        for _ in range(300):
            ep = sample_episode(dataset(6, 9), 4, 5, rng, query_cap=8)
            for item, cid, _ in ep.queries:
                assert item not in ep.support[cid]

    def test_deterministic(self):
        a = sample_episode(dataset(), 5, 3, np.random.default_rng(8))
        b = sample_episode(dataset(), 5, 3, np.random.default_rng(8))
        assert a.classes == b.classes
        assert a.support == b.support
        assert a.queries == b.queries

    def test_too_few_classes(self, rng):
        with pytest.raises(InsufficientClasses):
            sample_episode(dataset(3), 5, 3, rng)
        ep = sample_episode(dataset(3), 5, 3, rng, allow_fewer_classes=True)
        assert ep.n_way == 3

    def test_too_few_samples(self, rng):
        with pytest.raises(InsufficientSamples):
            sample_episode(dataset(per_class=4), 5, 4, rng)  # need > k

    def test_label_fn_attached(self, rng):
        ep = sample_episode(dataset(), 4, 3, rng,
                            label_fn=lambda item: item[1] * 0.5)
        assert all(lbl == item[1] * 0.5 for item, _, lbl in ep.queries)


class TestPrototypeMath:
    def test_prototype_is_mean(self):
        sup = {"a": np.array([[0.0, 0.0], [2.0, 4.0]])}
        (p,) = prototypes(sup)
        np.testing.assert_allclose(p.vector, [1.0, 2.0])

    def test_empty_support(self):
        with pytest.raises(EmptySupport):
            prototypes({"a": np.zeros((0, 3))})
        with pytest.raises(EmptySupport):
            prototypes({})

    def test_distance_values(self):
        protos = [Prototype("a", np.zeros(2)), Prototype("b", np.array([3.0, 4.0]))]
        d = distances(np.zeros(2), protos)
        np.testing.assert_allclose(d, [0.0, 5.0])
        with pytest.raises(DimensionMismatch):
            distances(np.zeros(3), protos)

    def test_likelihood_reference_values(self):
        # softmax(-d) at d = (0, 2)
        p = class_likelihood(np.array([0.0, 2.0]))
        assert p[0] == pytest.approx(0.8808, abs=1e-4)
        assert p[1] == pytest.approx(0.1192, abs=1e-4)
        assert p.sum() == pytest.approx(1.0, abs=1e-9)

    def test_uniform_loss_is_log_n(self):
        d = np.zeros(10)  # equidistant: p = 1/10 each
        loss = class_loss(class_likelihood(d), true_class=3)
        assert loss == pytest.approx(math.log(10.0), abs=1e-9)

    def test_translation_invariance(self, rng):
        protos = [Prototype(i, rng.standard_normal(8)) for i in range(4)]
        q = rng.standard_normal(8)
        base = predict(class_likelihood(distances(q, protos)))
        shift = rng.standard_normal(8)
        moved = [Prototype(p.class_id, p.vector + shift) for p in protos]
        shifted = distances(q + shift, moved)
        assert predict(class_likelihood(shifted)) == base
        np.testing.assert_allclose(shifted, distances(q, protos), atol=1e-9)

    def test_predict_tie_breaks_first(self):
        assert predict(np.array([0.25, 0.25, 0.25, 0.25])) == 0
        assert predict(np.array([0.1, 0.45, 0.45])) == 1

    def test_rejection_rule(self):
        rule = RejectionRule(threshold=1.5)
        assert reject_unknown(np.array([3.0, 4.2]), rule) == ("reject", None)
        assert reject_unknown(np.array([0.5, 4.0]), rule) == ("accept", 0)
        with pytest.raises(ValueError):
            RejectionRule(threshold=-0.1)


class TestEpisodeTensors:
    def setup_method(self):
        class Identity:
            dtype = np.float64

            def embed(self, x, training=False, rng=None):
                return ad.Tensor(np.asarray(x, dtype=np.float64))

            def regress(self, emb):
                return ad.sum_(emb, axis=1)

        self.model = Identity()

    def test_distances_match_numpy_path(self, rng):
        n_way, k_shot, q = 3, 4, 5
        sup = rng.standard_normal((n_way * k_shot, 6))
        queries = rng.standard_normal((q, 6))
        d, _ = fewshot.episode_tensors(self.model, sup, queries,
                                       np.zeros(q, dtype=int), n_way, k_shot)
        protos = sup.reshape(n_way, k_shot, 6).mean(axis=1)
        ref = np.linalg.norm(queries[:, None, :] - protos[None], axis=2)
        np.testing.assert_allclose(d.values, ref, atol=1e-9)

    def test_episode_loss_uniform_case(self):
        # all embeddings identical: every class equidistant, loss = ln(n_way)
        sup = np.zeros((4 * 2, 3))
        q = np.zeros((5, 3))
        total, cls, reg = fewshot.episode_loss(
            self.model, sup, q, np.array([0, 1, 2, 3, 0]),
            n_way=4, k_shot=2)
        assert cls.values == pytest.approx(math.log(4.0), abs=1e-9)
        assert reg is None
        assert total.values == pytest.approx(math.log(4.0), abs=1e-9)

    def test_episode_loss_with_regression(self, rng):
        sup = rng.standard_normal((2 * 3, 4))
        q = rng.standard_normal((3, 4))
        labels = q.sum(axis=1) + np.array([0.5, -0.25, 1.0])
        total, cls, reg = fewshot.episode_loss(
            self.model, sup, q, np.array([0, 1, 0]), query_labels=labels,
            n_way=2, k_shot=3)
        # identity model regress = row sum, so L1 error is the offsets' mean
        assert reg.values == pytest.approx(np.mean([0.5, 0.25, 1.0]), abs=1e-9)
        assert total.values == pytest.approx(cls.values + reg.values, abs=1e-12)

    def test_loss_decreases_on_separable_blobs(self, rng):
        from envid.model import Adam, BackboneConfig, EnvIdModel
        model = EnvIdModel(
            BackboneConfig(conv_channels=(2, 3), dense_dim=8, embed_dim=4,
                           reg_hidden=3, dropout=0.0, input_shape=(8, 12)),
            seed=1, dtype=np.float64, enforce_budget=False)
        opt = Adam(model.params, lr=3e-3)
        centers = rng.standard_normal((3, 8, 12)) * 2.0

        def batch(k):
            xs, cls = [], []
            for c in range(3):
                for _ in range(k):
                    xs.append(centers[c] + 0.05 * rng.standard_normal((8, 12)))
                    cls.append(c)
            return np.array(xs), np.array(cls)

        losses = []
        for _ in range(30):
            sup, _ = batch(2)
            qx, qc = batch(2)
            total, _, _ = fewshot.episode_loss(model, sup, qx, qc,
                                               n_way=3, k_shot=2)
            model.zero_grad()
            total.backward()
            opt.step()
            losses.append(float(total.values))
        assert np.mean(losses[-5:]) < 0.5 * np.mean(losses[:5])
