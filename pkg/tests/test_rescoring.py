"""Selective scoring: contributions, the selection rule, the feature map.

The central check is oracle equivalence: the sign-rule selection must
match exhaustive enumeration of every indicator vector, scoring each via
the independent feature-map path.
"""

import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctxrescore.context_stats import HistConfig, fit_stats
from ctxrescore.rescoring import (
    RescoreModel,
    RescoreSample,
    RescoreWeights,
    build_samples,
    build_scene_samples,
    feature_vector,
    load_model,
    margin_score,
    region_contribution,
    save_model,
    select_and_score,
)
from ctxrescore.scenes import BBox, ClassVocab, Detection, GtObject, Scene

VOCAB = ClassVocab(("bed", "pillow", "lamp"))
M = len(VOCAB)


@pytest.fixture(scope="module")
def stats():
    rng = np.random.default_rng(5)
    scenes = []
    for i in range(30):
        gts = tuple(
            GtObject(
                int(rng.integers(M)),
                BBox(rng.uniform(0, 70), rng.uniform(0, 70), rng.uniform(3, 25), rng.uniform(3, 25)),
            )
            for _ in range(int(rng.integers(2, 5)))
        )
        scenes.append(Scene(f"s{i}", 100, 100, gts, ()))
    return fit_stats(scenes, VOCAB, HistConfig())


def random_weights(rng, scale=1.0):
    return RescoreWeights(
        w0=float(rng.normal(0, scale)),
        w_co=rng.normal(0, scale, M),
        w_sc=rng.normal(0, scale, M),
        w_spx=rng.normal(0, scale, M),
        w_spy=rng.normal(0, scale, M),
        w_ac=np.abs(rng.normal(0, scale, M)),
        b=float(rng.normal(0, scale)),
    )


def random_sample(rng, n_contexts, label=None):
    def det():
        return Detection(
            int(rng.integers(M)),
            float(rng.uniform(0.05, 1.0)),
            BBox(rng.uniform(0, 80), rng.uniform(0, 80), rng.uniform(2, 20), rng.uniform(2, 20)),
        )

    return RescoreSample(det(), tuple(det() for _ in range(n_contexts)), (100.0, 100.0), label)


def brute_force_best(sample, weights, stats):
    """Max over all 2^N indicator vectors, scored through the feature map."""
    vec = weights.to_vector()
    best_score, best_l = -np.inf, None
    for bits in itertools.product((0, 1), repeat=len(sample.contexts)):
        l = np.array(bits, dtype=bool)
        score = float(vec @ feature_vector(sample, l, stats))
        if score > best_score:
            best_score, best_l = score, l
    return best_score, best_l


class TestWeights:
    def test_vector_round_trip(self):
        rng = np.random.default_rng(0)
        w = random_weights(rng)
        again = RescoreWeights.from_vector(w.to_vector(), M)
        np.testing.assert_array_equal(w.to_vector(), again.to_vector())

    def test_negative_ac_rejected(self):
        with pytest.raises(ValueError):
            RescoreWeights.zeros(M).__class__(
                w0=0.0,
                w_co=np.zeros(M),
                w_sc=np.zeros(M),
                w_spx=np.zeros(M),
                w_spy=np.zeros(M),
                w_ac=np.array([0.0, -0.1, 0.0]),
                b=0.0,
            )


class TestRegionContribution:
    def test_zero_weights_zero_contribution(self, stats):
        rng = np.random.default_rng(1)
        s = random_sample(rng, 1)
        assert region_contribution(s.target, s.contexts[0], RescoreWeights.zeros(M), stats, s.scene_dims) == 0.0

    def test_unit_confidence_weight_log_score(self, stats):
        target = Detection(0, 0.9, BBox(10, 10, 10, 10))
        w = RescoreWeights.zeros(M)
        w = RescoreWeights(0.0, w.w_co, w.w_sc, w.w_spx, w.w_spy, np.ones(M), 0.0)
        ctx_unit = Detection(1, 1.0, BBox(30, 30, 10, 10))
        assert region_contribution(target, ctx_unit, w, stats, (100.0, 100.0)) == pytest.approx(0.0)
        ctx_e = Detection(1, math.exp(-1.0), BBox(30, 30, 10, 10))
        assert region_contribution(target, ctx_e, w, stats, (100.0, 100.0)) == pytest.approx(-1.0, abs=1e-12)


class TestSelectAndScore:
    def test_sign_rule_on_crafted_contributions(self, stats):
        rng = np.random.default_rng(2)
        sample = random_sample(rng, 3)
        weights = random_weights(rng)
        score, trace = select_and_score(sample, weights, stats)
        np.testing.assert_array_equal(trace.indicators, trace.contributions > 0)
        expected = weights.w0 * math.log(sample.target.score) + trace.contributions[trace.indicators].sum() + weights.b
        assert score == pytest.approx(expected, abs=1e-12)

    def test_no_contexts(self, stats):
        rng = np.random.default_rng(3)
        sample = random_sample(rng, 0)
        weights = random_weights(rng)
        score, trace = select_and_score(sample, weights, stats)
        assert score == pytest.approx(weights.w0 * math.log(sample.target.score) + weights.b, abs=1e-12)
        assert trace.indicators.size == 0

    def test_matches_brute_force_enumeration(self, stats):
        rng = np.random.default_rng(4)
        for trial in range(25):
            sample = random_sample(rng, int(rng.integers(1, 9)))
            weights = random_weights(rng)
            score, trace = select_and_score(sample, weights, stats)
            best_score, best_l = brute_force_best(sample, weights, stats)
            assert score == pytest.approx(best_score, abs=1e-12)
            if not np.any(np.isclose(trace.contributions, 0.0)):
                np.testing.assert_array_equal(trace.indicators, best_l)

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 10_000), n=st.integers(0, 6))
    def test_brute_force_property(self, stats, seed, n):
        rng = np.random.default_rng(seed)
        sample = random_sample(rng, n)
        weights = random_weights(rng)
        score, _ = select_and_score(sample, weights, stats)
        best_score, _ = brute_force_best(sample, weights, stats)
        assert score == pytest.approx(best_score, abs=1e-12)

    def test_monotone_in_context_confidence(self, stats):
        rng = np.random.default_rng(6)
        for _ in range(20):
            sample = random_sample(rng, 4)
            weights = random_weights(rng)
            base, _ = select_and_score(sample, weights, stats)
            j = int(rng.integers(4))
            ctx = sample.contexts[j]
            boosted = Detection(ctx.class_id, min(1.0, ctx.score * 1.5), ctx.box)
            contexts = sample.contexts[:j] + (boosted,) + sample.contexts[j + 1 :]
            bumped, _ = select_and_score(
                RescoreSample(sample.target, contexts, sample.scene_dims), weights, stats
            )
            assert bumped >= base - 1e-12

    def test_permutation_invariance(self, stats):
        rng = np.random.default_rng(7)
        sample = random_sample(rng, 5)
        weights = random_weights(rng)
        score, _ = select_and_score(sample, weights, stats)
        perm = RescoreSample(sample.target, sample.contexts[::-1], sample.scene_dims)
        score_perm, _ = select_and_score(perm, weights, stats)
        assert score == pytest.approx(score_perm, abs=1e-12)


class TestFeatureVector:
    def test_all_zero_indicators(self, stats):
        rng = np.random.default_rng(8)
        sample = random_sample(rng, 3)
        phi = feature_vector(sample, np.zeros(3, dtype=bool), stats)
        assert phi[0] == pytest.approx(math.log(sample.target.score))
        assert phi[-1] == 1.0
        np.testing.assert_array_equal(phi[1:-1], 0.0)

    def test_dot_product_identity(self, stats):
        rng = np.random.default_rng(9)
        for _ in range(20):
            sample = random_sample(rng, int(rng.integers(0, 6)))
            weights = random_weights(rng)
            l = rng.random(len(sample.contexts)) < 0.5
            phi = feature_vector(sample, l, stats)
            direct = (
                weights.w0 * math.log(sample.target.score)
                + sum(
                    region_contribution(sample.target, ctx, weights, stats, sample.scene_dims)
                    for j, ctx in enumerate(sample.contexts)
                    if l[j]
                )
                + weights.b
            )
            assert float(weights.to_vector() @ phi) == pytest.approx(direct, abs=1e-10)

    def test_same_class_contexts_sum(self, stats):
        target = Detection(0, 0.8, BBox(40, 40, 10, 10))
        c1 = Detection(1, 0.7, BBox(10, 10, 8, 8))
        c2 = Detection(1, 0.6, BBox(60, 60, 12, 12))
        both = RescoreSample(target, (c1, c2), (100.0, 100.0))
        only1 = RescoreSample(target, (c1,), (100.0, 100.0))
        only2 = RescoreSample(target, (c2,), (100.0, 100.0))
        phi_both = feature_vector(both, [True, True], stats)
        phi_1 = feature_vector(only1, [True], stats)
        phi_2 = feature_vector(only2, [True], stats)
        np.testing.assert_allclose(phi_both[1:-1], (phi_1 + phi_2)[1:-1], atol=1e-12)


class TestMarginScore:
    def model_with(self, stats, for_w, against_w):
        return RescoreModel(0, stats, for_w, against_w, (0.0,) * M)

    def test_identical_sides_zero(self, stats):
        rng = np.random.default_rng(10)
        w = random_weights(rng)
        model = self.model_with(stats, w, w)
        for _ in range(5):
            sample = random_sample(rng, 3)
            score, _, _ = margin_score(model, sample)
            assert score == pytest.approx(0.0, abs=1e-12)

    def test_zero_against_side(self, stats):
        rng = np.random.default_rng(11)
        w = random_weights(rng)
        zero = RescoreWeights.zeros(M, b=-0.25)
        model = self.model_with(stats, w, zero)
        sample = random_sample(rng, 3)
        score, for_trace, against_trace = margin_score(model, sample)
        for_score, _ = select_and_score(sample, w, stats)
        assert score == pytest.approx(for_score - (-0.25), abs=1e-12)
        assert for_trace.side == "for" and against_trace.side == "against"

    def test_useless_region_leaves_margin_unchanged(self, stats):
        rng = np.random.default_rng(12)
        exercised = 0
        for _ in range(20):
            sample = random_sample(rng, 3)
            for_w, against_w = random_weights(rng), random_weights(rng)
            model = self.model_with(stats, for_w, against_w)
            base, _, _ = margin_score(model, sample)
            # find an extra region whose contribution is <= 0 under both sides
            extra = None
            for _ in range(200):
                cand = random_sample(rng, 1).contexts[0]
                trial = RescoreSample(sample.target, (cand,), sample.scene_dims)
                c_for = select_and_score(trial, for_w, stats)[1].contributions[0]
                c_against = select_and_score(trial, against_w, stats)[1].contributions[0]
                if c_for <= 0.0 and c_against <= 0.0:
                    extra = cand
                    break
            if extra is None:
                # these weights make nearly every region helpful to one side
                continue
            exercised += 1
            grown = RescoreSample(sample.target, sample.contexts + (extra,), sample.scene_dims)
            score, _, _ = margin_score(model, grown)
            assert score == pytest.approx(base, abs=1e-12)
        assert exercised >= 10


class TestBuildSamples:
    def scene(self):
        gts = (GtObject(0, BBox(10, 10, 20, 20)), GtObject(1, BBox(40, 40, 10, 10)))
        dets = (
            Detection(0, 0.9, BBox(11, 10, 20, 20)),   # TP bed
            Detection(0, 0.8, BBox(70, 70, 10, 10)),   # FP bed
            Detection(1, 0.5, BBox(40, 41, 10, 10)),   # TP pillow
            Detection(2, 0.3, BBox(5, 80, 8, 8)),      # FP lamp
        )
        return Scene("s", 100, 100, gts, dets)

    def test_one_sample_per_target_detection(self):
        samples = build_samples([self.scene()], 0, np.zeros(M))
        assert len(samples) == 2
        assert [s.label for s in samples] == [1, -1]
        assert all(s.target.class_id == 0 for s in samples)

    def test_single_detection_has_no_contexts(self):
        scene = Scene("s", 100, 100, (), (Detection(0, 0.9, BBox(1, 1, 5, 5)),))
        (sample,) = build_samples([scene], 0, np.zeros(M))
        assert sample.contexts == ()
        assert sample.label == -1

    def test_threshold_is_strict(self):
        thr = np.array([0.0, 0.5, 0.0])
        (first, _) = build_samples([self.scene()], 0, thr)
        # pillow det scores exactly 0.5: excluded by the strict rule
        assert all(c.class_id != 1 for c in first.contexts)

    def test_labels_follow_iou_rule(self):
        gts = (GtObject(0, BBox(0, 0, 10, 10)),)
        dets = (
            Detection(0, 0.9, BBox(2, 0, 10, 10)),  # IoU 2/3 with GT
            Detection(0, 0.8, BBox(6, 0, 10, 10)),  # IoU too small
        )
        scene = Scene("s", 100, 100, gts, dets)
        samples = build_samples([scene], 0, np.zeros(M))
        assert [s.label for s in samples] == [1, -1]

    def test_contexts_exclude_target_but_allow_same_class(self):
        samples = build_samples([self.scene()], 0, np.zeros(M))
        first = samples[0]
        assert len(first.contexts) == 3
        assert any(c.class_id == 0 for c in first.contexts)

    def test_oracle_restricts_contexts_to_true_positives(self):
        samples = build_samples([self.scene()], 0, np.zeros(M), oracle=True)
        first = samples[0]
        # FP bed and FP lamp are gone; TP pillow remains
        assert [c.class_id for c in first.contexts] == [1]

    def test_scene_samples_cover_every_detection(self):
        samples = build_scene_samples(self.scene(), np.zeros(M))
        assert [s.target_index for s in samples] == [0, 1, 2, 3]


def test_model_save_load_round_trip(tmp_path, stats):
    rng = np.random.default_rng(13)
    model = RescoreModel(1, stats, random_weights(rng), random_weights(rng), (0.1, float("inf"), 0.0))
    path = tmp_path / "model_pillow.json"
    save_model(path, model)
    loaded = load_model(path)
    assert loaded.target_class == 1
    assert loaded.thresholds == model.thresholds
    np.testing.assert_array_equal(loaded.for_weights.to_vector(), model.for_weights.to_vector())
    np.testing.assert_array_equal(loaded.against_weights.to_vector(), model.against_weights.to_vector())
