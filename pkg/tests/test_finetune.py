import numpy as np
import pytest

from compdef.backbone import BackboneParams, FeatureMap, extract_features, init_filters
from compdef.data import SyntheticSpec, background_corpus, generate_synthetic_dataset
from compdef.finetune import (
    FinetuneConfig, PartClassifier, cluster_purity, finetune, finetune_loss_and_grad, part_pool, part_scores,
    refit_after_finetune,
)
from compdef.pipeline import CompositionalConfig, fit_compositional
from compdef.vmf import VmfDictionary


def unit_map(rng, H, W, D, invalid=0.0):
    v = rng.normal(size=(H, W, D))
    v /= np.linalg.norm(v, axis=-1, keepdims=True)
    valid = rng.random((H, W)) >= invalid
    return FeatureMap(np.where(valid[..., None], v, 0.0), valid)


def brute_loss(images, labels, params, W):
    # direct evaluation of mean_n -log max_i softmax(W f_i)[y_n]
    total = 0.0
    for im, y in zip(images, labels):
        F = extract_features(im, params)
        best = 0.0
        for r in range(F.vectors.shape[0]):
            for c in range(F.vectors.shape[1]):
                if F.valid[r, c]:
                    z = W @ F.vectors[r, c]
                    p = np.exp(z - z.max())
                    best = max(best, p[y] / p.sum())
        total += -np.log(best)
    return total / len(labels)


def random_config(rng):
    C, k, pool = int(rng.integers(8, 11)), int(rng.choice([3, 5])), int(rng.integers(2, 4))
    params = BackboneParams(rng.normal(size=(C, k, k, 3)), rng.normal(scale=0.3, size=C), pool=pool,
                            pool_stride=pool)
    size = k + 3 * pool + int(rng.integers(0, 4))
    n, Y = int(rng.integers(2, 4)), int(rng.integers(2, 5))
    images = rng.random((n, size, size, 3))
    labels = rng.integers(0, Y, size=n)
    return images, labels, params, rng.normal(scale=2.0, size=(Y, C))


class TestPartScores:
    def test_zero_weights_uniform(self):
        F = unit_map(np.random.default_rng(0), 3, 4, 6)
        np.testing.assert_allclose(part_scores(F, PartClassifier(np.zeros((5, 6)))), 0.2)

    def test_row_shift_invariance(self):
        rng = np.random.default_rng(1)
        F = unit_map(rng, 3, 3, 6)
        W = rng.normal(size=(4, 6))
        shifted = W + rng.normal(size=(1, 6))
        np.testing.assert_allclose(part_scores(F, PartClassifier(W)), part_scores(F, PartClassifier(shifted)),
                                   rtol=1e-12)

    def test_two_class_logistic(self):
        rng = np.random.default_rng(2)
        F = unit_map(rng, 1, 1, 5)
        W = rng.normal(size=(2, 5))
        f = F.vectors[0, 0]
        p0 = 1.0 / (1.0 + np.exp(-(W[0] - W[1]) @ f))
        assert part_scores(F, PartClassifier(W))[0, 0, 0] == pytest.approx(p0, rel=1e-12)

    def test_invalid_positions_excluded(self):
        rng = np.random.default_rng(3)
        F = unit_map(rng, 4, 4, 5, invalid=0.4)
        s = part_scores(F, PartClassifier(rng.normal(size=(3, 5))))
        assert np.all(np.isnan(s[~F.valid])) and np.all(np.isfinite(s[F.valid]))
        np.testing.assert_allclose(s[F.valid].sum(-1), 1.0)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            part_scores(unit_map(np.random.default_rng(4), 2, 2, 5), PartClassifier(np.zeros((3, 6))))

    def test_non_finite_weights(self):
        with pytest.raises(ValueError):
            PartClassifier(np.array([[np.inf, 0.0]]))


class TestPartPool:
    def test_single_position(self):
        s = np.array([[[0.2, 0.5, 0.3]]])
        pooled, where = part_pool(s)
        np.testing.assert_array_equal(pooled, s[0, 0])
        assert where.tolist() == [[0, 0]] * 3

    @pytest.mark.parametrize("seed", range(5))
    def test_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        s = rng.dirichlet(np.ones(4), size=(3, 3))
        pooled, where = part_pool(s)
        for y in range(4):
            best = max(((r, c) for r in range(3) for c in range(3)), key=lambda rc: (s[rc][y], -rc[0], -rc[1]))
            assert pooled[y] == s[best][y]
            assert tuple(where[y]) == best
            assert np.all(pooled[y] >= s[..., y])

    def test_ties_lowest_index(self):
        s = np.full((2, 2, 2), 0.5)
        _, where = part_pool(s)
        assert where.tolist() == [[0, 0], [0, 0]]

    def test_all_invalid(self):
        with pytest.raises(ValueError):
            part_pool(np.full((2, 2, 3), np.nan))

    def test_pooled_need_not_sum_to_one(self):
        s = np.array([[[0.9, 0.1]], [[0.1, 0.9]]])
        pooled, _ = part_pool(s)
        assert pooled.sum() == pytest.approx(1.8)


class TestGradient:
    def test_loss_matches_brute_force(self):
        images, labels, params, W = random_config(np.random.default_rng(0))
        loss = finetune_loss_and_grad(images, labels, params, PartClassifier(W))[0]
        assert loss == pytest.approx(brute_loss(images, labels, params, W), rel=1e-12)

    @pytest.mark.parametrize("seed", range(20))
    def test_end_to_end_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        images, labels, params, W = random_config(rng)
        _, gW, gF, gb = finetune_loss_and_grad(images, labels, params, PartClassifier(W))
        dW, dF, db = rng.normal(size=W.shape), rng.normal(size=params.filters.shape), rng.normal(size=params.bias.shape)
        h = 1e-6

        def at(t):
            return brute_loss(images, labels, params.with_arrays(params.filters + t * dF, params.bias + t * db),
                              W + t * dW)

        fd = (at(h) - at(-h)) / (2 * h)
        an = np.sum(gW * dW) + np.sum(gF * dF) + np.sum(gb * db)
        assert an == pytest.approx(fd, rel=1e-4, abs=1e-8)

    def test_without_backbone(self):
        images, labels, params, W = random_config(np.random.default_rng(3))
        loss, gW, gF, gb = finetune_loss_and_grad(images, labels, params, PartClassifier(W), with_backbone=False)
        full = finetune_loss_and_grad(images, labels, params, PartClassifier(W))
        assert gF is None and gb is None
        assert loss == full[0]
        np.testing.assert_allclose(gW, full[1])


@pytest.fixture(scope="module")
def glyphs():
    spec = SyntheticSpec(n_classes=4, size=64, fine_grained=True, n_per_class=8, seed=4)
    ds = generate_synthetic_dataset(spec).split("train")
    return ds, init_filters(ds, 16, 5, seed=0, n_patches=5000), background_corpus(spec, 10, 0)


class TestFinetune:
    def test_zero_lr_unchanged(self, glyphs):
        ds, bb, _ = glyphs
        res = finetune(ds, bb, FinetuneConfig(lr=0.0, epochs=2, init="random"))
        np.testing.assert_array_equal(res.backbone.filters, bb.filters)
        np.testing.assert_array_equal(res.backbone.bias, bb.bias)
        assert res.trace[0] == res.trace[1]

    def test_loss_decreases(self, glyphs):
        ds, bb, _ = glyphs
        res = finetune(ds, bb, FinetuneConfig(lr=0.5, epochs=20, init="random", init_scale=0.01))
        assert len(res.trace) == 20
        assert res.trace[-1] < res.trace[0]

    def test_deterministic(self, glyphs):
        ds, bb, _ = glyphs
        cfg = FinetuneConfig(lr=0.5, epochs=3, init="random", init_scale=0.01, seed=2)
        a, b = finetune(ds, bb, cfg), finetune(ds, bb, cfg)
        np.testing.assert_array_equal(a.part.weights, b.part.weights)
        np.testing.assert_array_equal(a.backbone.filters, b.backbone.filters)

    def test_frozen_backbone(self, glyphs):
        ds, bb, _ = glyphs
        res = finetune(ds, bb, FinetuneConfig(lr=0.5, epochs=3, update_backbone=False, init="random"))
        assert res.backbone is bb

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            FinetuneConfig(lr=-1)
        with pytest.raises(ValueError):
            FinetuneConfig(init="zeros")

    def test_refit_without_epochs_matches_pipeline(self, glyphs):
        ds, bb, bg = glyphs
        res = finetune(ds, bb, FinetuneConfig(epochs=0, init="random"))
        cfg = CompositionalConfig(K=8, M=1, em_iters=3, object_samples=2000, background_samples=500)
        a = refit_after_finetune(ds, res.backbone, 8, 1, 3, background=bg, config=cfg)
        b = fit_compositional(ds, bg, bb, cfg, 3)
        np.testing.assert_array_equal(a.dictionary.mu, b.dictionary.mu)
        for ma, mb in zip(a.class_models, b.class_models):
            np.testing.assert_array_equal(ma.coeffs, mb.coeffs)
        np.testing.assert_array_equal(a.occluder.beta, b.occluder.beta)


class TestClusterPurity:
    def test_hand_counts(self):
        d = VmfDictionary(np.array([[1.0, 0.0], [0.0, 1.0]]), np.ones(2))
        v = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 1.0]])
        maps = [FeatureMap(np.array([[v[0], v[1]]]), np.ones((1, 2), bool)),
                FeatureMap(np.array([[v[2], v[0]]]), np.array([[True, False]]))]
        # cluster 0 holds class 0 once (purity 1); cluster 1 holds class 0 once and class 1 once (1/2)
        assert cluster_purity(d, maps, [0, 1]) == pytest.approx(0.75)

    def test_single_class_is_pure(self):
        rng = np.random.default_rng(0)
        d = VmfDictionary(np.eye(4), np.ones(4))
        maps = [unit_map(rng, 3, 3, 4) for _ in range(3)]
        assert cluster_purity(d, maps, [0, 0, 0]) == 1.0

    def test_clusters_weigh_equally(self):
        d = VmfDictionary(np.array([[1.0, 0.0], [0.0, 1.0]]), np.ones(2))
        e0, e1 = [1.0, 0.0], [0.0, 1.0]
        # a large mixed cluster (50 of each class) and a small pure one (3 of class 1)
        maps = [FeatureMap(np.array([[e0] * 50]), np.ones((1, 50), bool)),
                FeatureMap(np.array([[e0] * 50 + [e1] * 3]), np.ones((1, 53), bool))]
        assert cluster_purity(d, maps, [0, 1]) == pytest.approx((0.5 + 1.0) / 2)

    def test_empty_clusters_ignored(self):
        d = VmfDictionary(np.eye(3), np.ones(3))
        maps = [FeatureMap(np.array([[[1.0, 0, 0]]]), np.ones((1, 1), bool))]
        assert cluster_purity(d, maps, [2]) == 1.0
