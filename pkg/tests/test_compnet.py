import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from compdef.backbone import FeatureMap
from compdef.compnet import (
    SMOOTHING, ClassModel, CompNet, CompNetError, OccluderModel, background_floor, class_log_likelihood, classify,
    learn_class_model, learn_occluder_model, mixture_log_likelihood, occluded_log_likelihood, occlusion_score_map,
    position_log_likelihood,
)
from compdef.vmf import VmfDictionary, log_normalizer


def unit(rng, *shape):
    x = rng.normal(size=shape)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def simplex(rng, *shape):
    a = rng.gamma(0.5, size=shape) + 1e-6
    return a / a.sum(axis=-1, keepdims=True)


def random_dict(rng, K=6, D=5, lo=0.5, hi=20.0):
    return VmfDictionary(unit(rng, K, D), rng.uniform(lo, hi, size=K))


def random_map(rng, H, W, D, invalid=0.0):
    v = unit(rng, H, W, D)
    valid = rng.random((H, W)) >= invalid
    v[~valid] = 0.0
    return FeatureMap(v, valid)


def brute_position(f, alpha, d):
    # direct sum of densities, no log-sum-exp
    dens = [np.exp(d.sigma[k] * d.mu[k] @ f - log_normalizer(d.sigma[k], d.D)) for k in range(d.K)]
    return np.log(np.dot(alpha, dens))


def brute_map(F, coeffs, d):
    floor = background_floor(d.D)
    H, W, _ = F.vectors.shape
    return sum(brute_position(F.vectors[r, c], coeffs[r, c], d) if F.valid[r, c] else floor
               for r in range(H) for c in range(W))


class TestPositionLikelihood:
    def test_one_hot_collapses(self):
        rng = np.random.default_rng(0)
        d = random_dict(rng)
        alpha = np.zeros(d.K)
        alpha[2] = 1.0
        val = position_log_likelihood(d.mu[2], alpha, d)
        assert val == pytest.approx(d.sigma[2] - log_normalizer(d.sigma[2], d.D), rel=1e-12)

    def test_uniform_components(self):
        d = VmfDictionary(np.array([[1.0, 0, 0], [0, 1.0, 0]]), np.array([0.0, 0.0]))
        for f in unit(np.random.default_rng(1), 5, 3):
            assert position_log_likelihood(f, [0.5, 0.5], d) == pytest.approx(np.log(1 / (4 * np.pi)), rel=1e-12)

    def test_two_term_brute_force(self):
        rng = np.random.default_rng(2)
        d = VmfDictionary(unit(rng, 2, 3), np.array([3.0, 8.0]))
        f = unit(rng, 3)
        ref = np.log(0.3 * np.exp(3 * d.mu[0] @ f) * 3 / (4 * np.pi * np.sinh(3))
                     + 0.7 * np.exp(8 * d.mu[1] @ f) * 8 / (4 * np.pi * np.sinh(8)))
        assert position_log_likelihood(f, [0.3, 0.7], d) == pytest.approx(ref, rel=1e-10)

    def test_invalid_position_gets_floor(self):
        d = random_dict(np.random.default_rng(3))
        assert position_log_likelihood(np.zeros(d.D), np.full(d.K, 1 / d.K), d) == background_floor(d.D)
        assert position_log_likelihood(np.zeros(d.D), np.full(d.K, 1 / d.K), d, floor=-7.0) == -7.0

    def test_simplex_violation(self):
        d = random_dict(np.random.default_rng(4))
        with pytest.raises(CompNetError):
            position_log_likelihood(d.mu[0], np.full(d.K, 0.5), d)

    def test_extreme_concentration_stays_finite(self):
        d = VmfDictionary(np.array([[1.0, 0, 0], [0, 1.0, 0]]), np.array([1e4, 1e4]))
        assert np.isfinite(position_log_likelihood(np.array([0, 0, 1.0]), [0.5, 0.5], d))


class TestMixtureLikelihood:
    def test_one_by_one(self):
        rng = np.random.default_rng(5)
        d = random_dict(rng)
        F = random_map(rng, 1, 1, d.D)
        a = simplex(rng, 1, 1, d.K)
        assert mixture_log_likelihood(F, a, d) == pytest.approx(position_log_likelihood(F.vectors[0, 0], a[0, 0], d))

    def test_additive_two_by_two(self):
        rng = np.random.default_rng(6)
        d = random_dict(rng)
        F = random_map(rng, 2, 2, d.D)
        a = simplex(rng, 2, 2, d.K)
        parts = [position_log_likelihood(F.vectors[r, c], a[r, c], d) for r in range(2) for c in range(2)]
        assert mixture_log_likelihood(F, a, d) == pytest.approx(sum(parts), rel=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_brute_force_3x3(self, seed):
        rng = np.random.default_rng(seed)
        d = random_dict(rng)
        F = random_map(rng, 3, 3, d.D, invalid=0.2)
        a = simplex(rng, 3, 3, d.K)
        assert mixture_log_likelihood(F, a, d) == pytest.approx(brute_map(F, a, d), rel=1e-10)

    def test_dimension_mismatch(self):
        rng = np.random.default_rng(7)
        d = random_dict(rng)
        with pytest.raises(CompNetError):
            mixture_log_likelihood(random_map(rng, 3, 3, d.D), simplex(rng, 2, 3, d.K), d)
        with pytest.raises(CompNetError):
            mixture_log_likelihood(random_map(rng, 3, 3, d.D + 1), simplex(rng, 3, 3, d.K), d)


class TestClassLikelihood:
    def test_single_mixture(self):
        rng = np.random.default_rng(8)
        d = random_dict(rng)
        F = random_map(rng, 3, 4, d.D)
        a = simplex(rng, 1, 3, 4, d.K)
        val, m = class_log_likelihood(F, ClassModel(0, a, d))
        assert m == 0 and val == pytest.approx(mixture_log_likelihood(F, a[0], d))

    def test_identical_components_tie_to_zero(self):
        rng = np.random.default_rng(9)
        d = random_dict(rng)
        a = simplex(rng, 3, 4, d.K)
        _, m = class_log_likelihood(random_map(rng, 3, 4, d.D), ClassModel(0, np.stack([a, a]), d))
        assert m == 0

    @pytest.mark.parametrize("seed", range(5))
    def test_brute_force_m3(self, seed):
        rng = np.random.default_rng(seed)
        d = random_dict(rng)
        F = random_map(rng, 3, 3, d.D)
        a = simplex(rng, 3, 3, 3, d.K)
        vals = [brute_map(F, a[m], d) for m in range(3)]
        val, m = class_log_likelihood(F, ClassModel(0, a, d))
        assert m == int(np.argmax(vals))
        assert val == pytest.approx(max(vals), rel=1e-10)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(10)
        d = random_dict(rng)
        F = random_map(rng, 3, 3, d.D)
        a = simplex(rng, 4, 3, 3, d.K)
        perm = np.array([2, 0, 3, 1])
        v1, m1 = class_log_likelihood(F, ClassModel(0, a, d))
        v2, m2 = class_log_likelihood(F, ClassModel(0, a[perm], d))
        assert v1 == pytest.approx(v2, rel=1e-12)
        assert perm[m2] == m1

    def test_model_invariants(self):
        rng = np.random.default_rng(11)
        d = random_dict(rng)
        with pytest.raises(CompNetError):
            ClassModel(0, np.full((1, 2, 2, d.K), 0.5), d)
        with pytest.raises(CompNetError):
            ClassModel(0, simplex(rng, 1, 2, 2, d.K + 1), d)
        with pytest.raises(CompNetError):
            OccluderModel(np.array([0.5, 0.6]))


class TestOccludedLikelihood:
    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.floats(-20, 20))
    def test_dominates_plain_likelihood(self, seed, rho):
        rng = np.random.default_rng(seed)
        d = random_dict(rng, K=4, D=4)
        F = random_map(rng, 3, 3, d.D, invalid=0.1)
        a = simplex(rng, 3, 3, d.K)
        beta = OccluderModel(simplex(rng, d.K))
        val, _ = occluded_log_likelihood(F, a, beta, d, rho=rho)
        assert val >= mixture_log_likelihood(F, a, d)

    def test_disabled_occluder_reduces_exactly(self):
        rng = np.random.default_rng(12)
        d = random_dict(rng)
        F = random_map(rng, 4, 4, d.D)
        a = simplex(rng, 4, 4, d.K)
        val, occ = occluded_log_likelihood(F, a, OccluderModel(simplex(rng, d.K)), d, rho=-np.inf)
        assert val == mixture_log_likelihood(F, a, d)
        assert not occ.occluded.any()

    @pytest.mark.parametrize("seed", range(5))
    def test_brute_force_per_position(self, seed):
        rng = np.random.default_rng(seed)
        d = random_dict(rng)
        F = random_map(rng, 3, 3, d.D)
        a = simplex(rng, 3, 3, d.K)
        beta = simplex(rng, d.K)
        rho = rng.normal()
        total, flags = 0.0, np.zeros((3, 3), bool)
        for r in range(3):
            for c in range(3):
                obj = brute_position(F.vectors[r, c], a[r, c], d)
                occ = brute_position(F.vectors[r, c], beta, d) + rho
                flags[r, c] = occ > obj
                total += max(obj, occ)
        val, om = occluded_log_likelihood(F, a, OccluderModel(beta), d, rho=rho)
        assert val == pytest.approx(total, rel=1e-10)
        np.testing.assert_array_equal(om.occluded, flags)
        assert np.all(np.isneginf(om.score[~flags]))

    def test_occluder_wins_where_object_is_unlikely(self):
        mu = np.eye(3)
        d = VmfDictionary(mu, np.full(3, 30.0))
        a = np.zeros((1, 2, 3))
        a[..., 0] = 1.0
        a = (1 - SMOOTHING) * a + SMOOTHING / 3
        F = FeatureMap(np.array([[[1.0, 0, 0], [0, 0, 1.0]]]), np.ones((1, 2), bool))
        _, om = occluded_log_likelihood(F, a, OccluderModel(np.array([0.0, 0.0, 1.0])), d)
        np.testing.assert_array_equal(om.occluded, [[False, True]])


class TestOcclusionScoreMap:
    def test_threshold_reproduces_flags(self):
        rng = np.random.default_rng(13)
        d = random_dict(rng)
        F = random_map(rng, 5, 5, d.D)
        model = ClassModel(0, simplex(rng, 2, 5, 5, d.K), d)
        occ = OccluderModel(simplex(rng, d.K))
        om = occlusion_score_map(F, model, occ, rho=0.5)
        np.testing.assert_array_equal(om.occluded, om.score > 0)
        # flags agree with the occluded likelihood of the winning mixture
        vals = [occluded_log_likelihood(F, model.coeffs[m], occ, d, 0.5)[0] for m in range(2)]
        _, ref = occluded_log_likelihood(F, model.coeffs[int(np.argmax(vals))], occ, d, 0.5)
        np.testing.assert_array_equal(om.occluded, ref.occluded)

    def test_no_occluder_win_gives_non_positive_scores(self):
        rng = np.random.default_rng(14)
        d = random_dict(rng)
        F = random_map(rng, 3, 3, d.D)
        model = ClassModel(0, simplex(rng, 1, 3, 3, d.K), d)
        om = occlusion_score_map(F, model, OccluderModel(simplex(rng, d.K)), rho=-1e6)
        assert np.all(om.score <= 0) and not om.occluded.any()


class TestLearning:
    def test_planted_single_map(self):
        K, D = 6, 8
        mu = np.eye(D)[:K]
        d = VmfDictionary(mu, np.full(K, 200.0))
        rng = np.random.default_rng(0)
        k_of = rng.integers(0, K, size=(3, 3))
        F = FeatureMap(mu[k_of], np.ones((3, 3), bool))
        model = learn_class_model([F], 1, d, iters=5)
        picked = np.take_along_axis(model.coeffs[0], k_of[..., None], axis=-1)[..., 0]
        assert picked.min() >= 0.99

    @pytest.mark.parametrize("seed", range(10))
    def test_em_monotone(self, seed):
        rng = np.random.default_rng(seed)
        d = random_dict(rng, K=8, D=6, lo=2, hi=40)
        maps = [random_map(rng, 4, 4, d.D, invalid=0.05) for _ in range(12)]
        model = learn_class_model(maps, 3, d, iters=10, seed=seed)
        t = np.array(model.trace)
        assert len(t) == 11
        assert np.all(np.diff(t) >= -1e-9 * np.abs(t[:-1]))
        np.testing.assert_allclose(model.coeffs.sum(-1), 1.0, atol=1e-8)
        assert model.coeffs.min() >= SMOOTHING / d.K * 0.999

    def test_deterministic(self):
        rng = np.random.default_rng(3)
        d = random_dict(rng)
        maps = [random_map(rng, 3, 3, d.D) for _ in range(6)]
        a = learn_class_model(maps, 2, d, seed=4)
        b = learn_class_model(maps, 2, d, seed=4)
        np.testing.assert_array_equal(a.coeffs, b.coeffs)

    def test_fewer_maps_than_m(self):
        rng = np.random.default_rng(4)
        d = random_dict(rng)
        with pytest.raises(CompNetError):
            learn_class_model([random_map(rng, 3, 3, d.D)], 2, d)

    def test_occluder_planted(self):
        K, D = 5, 8
        d = VmfDictionary(np.eye(D)[:K], np.full(K, 200.0))
        F = FeatureMap(np.tile(np.eye(D)[3], (4, 4, 1)), np.ones((4, 4), bool))
        beta = learn_occluder_model([F, F], d).beta
        assert beta[3] >= 0.99
        assert beta.sum() == pytest.approx(1.0, abs=1e-12)

    def test_occluder_uniform_for_flat_components(self):
        rng = np.random.default_rng(5)
        d = VmfDictionary(unit(rng, 4, 3), np.zeros(4))
        beta = learn_occluder_model([random_map(rng, 5, 5, 3)], d).beta
        np.testing.assert_allclose(beta, 0.25, atol=1e-12)

    def test_occluder_empty_corpus(self):
        with pytest.raises(CompNetError):
            learn_occluder_model([], random_dict(np.random.default_rng(0)))


class TestClassify:
    def test_single_class(self):
        rng = np.random.default_rng(0)
        d = random_dict(rng)
        m = ClassModel(0, simplex(rng, 1, 2, 2, d.K), d)
        label, _ = classify(random_map(rng, 2, 2, d.D), [m], OccluderModel(simplex(rng, d.K)))
        assert label == 0

    def test_identical_models_tie_to_zero(self):
        rng = np.random.default_rng(1)
        d = random_dict(rng)
        a = simplex(rng, 1, 2, 2, d.K)
        label, _ = classify(random_map(rng, 2, 2, d.D), [ClassModel(0, a, d), ClassModel(1, a, d)],
                            OccluderModel(simplex(rng, d.K)))
        assert label == 0

    def test_planted_three_class_toy(self):
        D, K = 6, 3
        mu = np.eye(D)[:K]
        d = VmfDictionary(mu, np.full(K, 50.0))
        models = []
        for y in range(3):
            a = np.full((1, 2, 2, K), 0.01)
            a[..., y] = 0.98
            models.append(ClassModel(y, a, d))
        occ = OccluderModel(np.full(K, 1 / K))
        for y in range(3):
            F = FeatureMap(np.tile(mu[y], (2, 2, 1)), np.ones((2, 2), bool))
            label, values = classify(F, models, occ)
            brute = [occluded_log_likelihood(F, models[c].coeffs[0], occ, d)[0] for c in range(3)]
            assert label == y == int(np.argmax(brute))
            np.testing.assert_allclose(values, brute, rtol=1e-12)

    def test_invalid_positions_never_decide(self):
        rng = np.random.default_rng(2)
        d = random_dict(rng)
        models = [ClassModel(y, simplex(rng, 1, 3, 3, d.K), d) for y in range(3)]
        F = FeatureMap(np.zeros((3, 3, d.D)), np.zeros((3, 3), bool))
        label, values = classify(F, models, OccluderModel(simplex(rng, d.K)))
        assert label == 0 and np.ptp(values) == 0


class TestCompNet:
    def test_probabilities_are_scaled_softmax(self):
        rng = np.random.default_rng(3)
        d = random_dict(rng)
        models = tuple(ClassModel(y, simplex(rng, 2, 3, 3, d.K), d) for y in range(4))
        cn = CompNet(d, models, OccluderModel(simplex(rng, d.K)), score_scale=2.0)
        F = random_map(rng, 3, 3, d.D)
        v = cn.class_values(F)
        z = v * 2.0 / 9
        ref = np.exp(z - z.max()) / np.exp(z - z.max()).sum()
        np.testing.assert_allclose(cn.probabilities(F), ref, rtol=1e-12)
        assert cn.classify(F)[0] == int(np.argmax(v))

    def test_score_map_matches_function(self):
        rng = np.random.default_rng(4)
        d = random_dict(rng)
        models = tuple(ClassModel(y, simplex(rng, 2, 3, 3, d.K), d) for y in range(3))
        occ = OccluderModel(simplex(rng, d.K))
        cn = CompNet(d, models, occ, rho=0.3)
        F = random_map(rng, 3, 3, d.D)
        for y in range(3):
            np.testing.assert_allclose(cn.score_map(F, y).score, occlusion_score_map(F, models[y], occ, 0.3).score)

    def test_rejects_inconsistent_models(self):
        rng = np.random.default_rng(5)
        d = random_dict(rng)
        a = ClassModel(0, simplex(rng, 2, 3, 3, d.K), d)
        b = ClassModel(1, simplex(rng, 2, 4, 3, d.K), d)
        with pytest.raises(CompNetError):
            CompNet(d, (a, b), OccluderModel(simplex(rng, d.K)))
        with pytest.raises(CompNetError):
            CompNet(d, (a,), OccluderModel(simplex(rng, d.K + 1)))
