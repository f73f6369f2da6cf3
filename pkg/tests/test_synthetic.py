"""Generator and detector-model checks against exact enumeration oracles.

The class-set sampler draws a uniform anchor, proposes the other classes
through the anchor's co-occurrence row, and accepts with the product of
co-occurrence probabilities over non-anchor pairs. That distribution is
small enough to enumerate exactly, which gives the ground truth that the
fitted statistics must recover.
"""

import itertools

import numpy as np
import pytest

from ctxrescore.context_stats import HistConfig, bin_index, fit_stats
from ctxrescore.evaluation import evaluate_scenes
from ctxrescore.scenes import ClassVocab
from ctxrescore.synthetic import (
    DetectorSpec,
    GenerationError,
    WorldSpec,
    default_detector,
    default_world,
    detector_from_dict,
    detector_to_dict,
    generate,
    noisy_detector,
    rules_world,
    simulate_detector,
    world_from_dict,
    world_to_dict,
)


def make_world(vocab, cooccur, offset_mu=None, scale_mu=None, seed=0, objects=(1, 3), offset_sigma=0.02, scale_sigma=0.05):
    m = len(vocab)
    return WorldSpec(
        vocab=vocab,
        cooccur=np.asarray(cooccur, dtype=float),
        scale_mu=np.zeros((m, m)) if scale_mu is None else np.asarray(scale_mu, dtype=float),
        scale_sigma=np.full((m, m), scale_sigma),
        offset_mu=np.zeros((m, m, 2)) if offset_mu is None else np.asarray(offset_mu, dtype=float),
        offset_sigma=np.full((m, m, 2), offset_sigma),
        objects_per_scene=objects,
        seed=seed,
        width=100,
        height=100,
    )


def enumerate_class_sets(world):
    """Exact distribution of the sampled class set, by brute force."""
    m = len(world.vocab)
    q = world.cooccur
    probs = {}
    for bits in itertools.product((0, 1), repeat=m):
        present = [i for i in range(m) if bits[i]]
        if not present:
            continue
        total = 0.0
        for anchor in present:
            proposal = 1.0
            for c in range(m):
                if c == anchor:
                    continue
                proposal *= q[anchor, c] if bits[c] else 1.0 - q[anchor, c]
            others = [c for c in present if c != anchor]
            accept = 1.0
            for i, u in enumerate(others):
                for v in others[i + 1 :]:
                    accept *= q[u, v]
            total += proposal * accept / m
        if total > 0:
            probs[frozenset(present)] = total
    z = sum(probs.values())
    return {k: v / z for k, v in probs.items()}


def implied_cooccurrence(world, t, i):
    """P(class i present | class t present) under the exact distribution."""
    probs = enumerate_class_sets(world)
    with_t = sum(p for s, p in probs.items() if t in s)
    with_both = sum(p for s, p in probs.items() if t in s and i in s)
    return with_both / with_t


class TestClassSetSampling:
    def test_forced_pair_always_together(self):
        vocab = ClassVocab(("bed", "pillow", "lamp"))
        q = np.zeros((3, 3))
        np.fill_diagonal(q, 1.0)
        q[0, 1] = q[1, 0] = 1.0
        world = make_world(vocab, q)
        scenes = generate(world, 300)
        for scene in scenes:
            classes = {g.class_id for g in scene.gts}
            if 0 in classes:
                assert 1 in classes
            if 1 in classes:
                assert 0 in classes

    def test_empirical_matches_enumeration(self):
        vocab = ClassVocab(("a", "b", "c"))
        q = np.array([[1.0, 0.8, 0.4], [0.8, 1.0, 0.6], [0.4, 0.6, 1.0]])
        world = make_world(vocab, q, seed=3)
        scenes = generate(world, 6000)
        seen = [frozenset(g.class_id for g in s.gts) for s in scenes]
        probs = enumerate_class_sets(world)
        for subset, p in probs.items():
            emp = sum(1 for s in seen if s == subset) / len(seen)
            assert emp == pytest.approx(p, abs=0.03)

    def test_infeasible_spec_raises(self):
        # every anchor proposes exactly the other pair, which is forbidden,
        # so every proposal is rejected
        vocab = ClassVocab(("a", "b", "c", "d"))
        q = np.ones((4, 4))
        q[0, 1] = q[1, 0] = 0.0
        q[2, 3] = q[3, 2] = 0.0
        world = make_world(vocab, q)
        with pytest.raises(GenerationError):
            generate(world, 1)

    def test_same_seed_identical_output(self):
        world = default_world(5)
        a = generate(world, 40)
        b = generate(world, 40)
        assert a == b

    def test_worker_count_does_not_change_output(self):
        world = default_world(2)
        assert generate(world, 30, workers=1) == generate(world, 30, workers=3)


class TestStatisticsRecovery:
    def test_cooccurrence_recovery_two_classes(self):
        vocab = ClassVocab(("a", "b"))
        q = np.array([[1.0, 0.7], [0.7, 1.0]])
        world = make_world(vocab, q, seed=11)
        scenes = generate(world, 6000)
        stats = fit_stats(scenes, vocab, HistConfig())
        truth = implied_cooccurrence(world, 0, 1)
        assert stats.co[0, 1, 1] == pytest.approx(truth, abs=0.03)

    def test_geometry_modes_land_in_planted_bins(self):
        vocab = ClassVocab(("anchor", "satellite"))
        q = np.array([[1.0, 1.0], [1.0, 1.0]])
        offset_mu = np.zeros((2, 2, 2))
        offset_mu[1, 0] = (0.3, -0.1)   # satellite sits right of and above its anchor
        offset_mu[0, 1] = (-0.3, 0.1)
        scale_mu = np.zeros((2, 2))
        scale_mu[1, 0] = -0.9           # satellite is smaller
        scale_mu[0, 1] = 0.9
        world = make_world(vocab, q, offset_mu=offset_mu, scale_mu=scale_mu, seed=4, objects=(2, 2))
        scenes = generate(world, 2500)
        stats = fit_stats(scenes, vocab, HistConfig())
        cfg = stats.config
        lo, hi = cfg.scale_log_range
        # target anchor, context satellite: offset is satellite minus anchor
        assert int(np.argmax(stats.spx[0, 1])) == bin_index(0.3, -1, 1, cfg.n_spatial_bins)
        assert int(np.argmax(stats.spy[0, 1])) == bin_index(-0.1, -1, 1, cfg.n_spatial_bins)
        assert int(np.argmax(stats.sc[0, 1])) == bin_index(0.9, lo, hi, cfg.n_scale_bins)
        assert int(np.argmax(stats.sc[1, 0])) == bin_index(-0.9, lo, hi, cfg.n_scale_bins)


class TestDetectorModel:
    def test_perfect_detector_gives_unit_ap(self):
        world = default_world(7)
        scenes = generate(world, 60)
        spec = DetectorSpec(
            tp_rate=(1.0,) * 6,
            fp_per_scene=(0.0,) * 6,
            localization_jitter=0.0,
        )
        detected = simulate_detector(scenes, spec, seed=7)
        report, _ = evaluate_scenes(detected, world.vocab)
        assert report.map == pytest.approx(1.0, abs=1e-12)

    def test_zero_recall_gives_zero_map(self):
        world = default_world(8)
        scenes = generate(world, 40)
        spec = DetectorSpec(tp_rate=(0.0,) * 6, fp_per_scene=(0.5,) * 6)
        detected = simulate_detector(scenes, spec, seed=8)
        report, _ = evaluate_scenes(detected, world.vocab)
        assert report.map == 0.0

    def test_recall_calibration(self):
        world = default_world(9)
        scenes = generate(world, 2500)
        spec = DetectorSpec(tp_rate=(0.8,) * 6, fp_per_scene=(0.0,) * 6, localization_jitter=0.3)
        detected = simulate_detector(scenes, spec, seed=9)
        n_gt = np.zeros(6)
        n_det = np.zeros(6)
        for scene in detected:
            for g in scene.gts:
                n_gt[g.class_id] += 1
            for d in scene.dets:
                n_det[d.class_id] += 1
        recall = n_det / n_gt
        np.testing.assert_allclose(recall, 0.8, atol=0.02)

    def test_confusions_are_wrong_class_on_gt_boxes(self):
        world = default_world(10)
        scenes = generate(world, 100)
        spec = DetectorSpec(
            tp_rate=(0.0,) * 6,
            fp_per_scene=(0.0,) * 6,
            localization_jitter=0.0,
            confusion_rate=1.0,
        )
        detected = simulate_detector(scenes, spec, seed=10)
        from ctxrescore.scenes import iou

        for scene in detected:
            assert len(scene.dets) == len(scene.gts)
            for d, g in zip(scene.dets, scene.gts):
                assert d.class_id != g.class_id
                # canvas clamping may shift edge boxes by a float ulp
                assert iou(d.box, g.box) > 0.999

    def test_simulation_deterministic(self):
        world = default_world(11)
        scenes = generate(world, 30)
        a = simulate_detector(scenes, noisy_detector(), seed=1)
        b = simulate_detector(scenes, noisy_detector(), seed=1)
        assert a == b


class TestSpecs:
    def test_world_round_trip(self):
        world = default_world(3)
        again = world_from_dict(world_to_dict(world))
        assert again.vocab.names == world.vocab.names
        np.testing.assert_array_equal(again.cooccur, world.cooccur)
        np.testing.assert_array_equal(again.offset_mu, world.offset_mu)
        assert again.objects_per_scene == world.objects_per_scene

    def test_detector_round_trip(self):
        spec = noisy_detector()
        again = detector_from_dict(detector_to_dict(spec))
        assert again == spec

    def test_validation(self):
        vocab = ClassVocab(("a", "b"))
        with pytest.raises(ValueError):
            make_world(vocab, [[1.0, 1.2], [1.2, 1.0]])
        with pytest.raises(ValueError):
            DetectorSpec(tp_rate=(1.5, 0.5), fp_per_scene=(0.0, 0.0))
        with pytest.raises(ValueError):
            DetectorSpec(tp_rate=(0.5, 0.5), fp_per_scene=(-1.0, 0.0))

    def test_rules_world_is_fully_cooccurring(self):
        world = rules_world(0)
        scenes = generate(world, 20)
        for scene in scenes:
            assert {g.class_id for g in scene.gts} == set(range(6))
