"""Domain types, IoU, JSONL round-trips, and greedy matching."""

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctxrescore.scenes import (
    BBox,
    ClassVocab,
    DatasetError,
    Detection,
    GtObject,
    Scene,
    iou,
    load_dataset,
    load_vocab,
    save_dataset,
    save_vocab,
    tp_flags,
)

VOCAB = ClassVocab(("bed", "pillow", "lamp"))


def boxes(max_side=100.0):
    coord = st.floats(-20.0, 120.0)
    side = st.floats(0.5, max_side)
    return st.builds(BBox, x=coord, y=coord, w=side, h=side)


class TestBBox:
    def test_rejects_non_positive_dims(self):
        with pytest.raises(ValueError):
            BBox(0, 0, 0, 5)
        with pytest.raises(ValueError):
            BBox(0, 0, 5, -1)

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            BBox(float("nan"), 0, 1, 1)

    def test_clip_inside_canvas(self):
        b = BBox(-5, -5, 20, 20).clipped(100, 100)
        assert (b.x, b.y, b.w, b.h) == (0, 0, 15, 15)

    def test_clip_fully_outside_raises(self):
        with pytest.raises(ValueError):
            BBox(200, 200, 10, 10).clipped(100, 100)


class TestIou:
    def test_identical_boxes(self):
        b = BBox(3, 4, 10, 12)
        assert iou(b, b) == 1.0

    def test_disjoint_boxes(self):
        assert iou(BBox(0, 0, 10, 10), BBox(50, 50, 10, 10)) == 0.0

    def test_half_overlap_hand_case(self):
        # intersection 5x10 = 50, union 100 + 100 - 50 = 150
        v = iou(BBox(0, 0, 10, 10), BBox(5, 0, 10, 10))
        assert v == pytest.approx(50.0 / 150.0, abs=1e-12)

    @settings(max_examples=200, deadline=None)
    @given(a=boxes(), b=boxes())
    def test_symmetric_and_bounded(self, a, b):
        v = iou(a, b)
        assert v == iou(b, a)
        assert 0.0 <= v <= 1.0 + 1e-12


class TestVocab:
    def test_requires_two_unique_names(self):
        with pytest.raises(ValueError):
            ClassVocab(("solo",))
        with pytest.raises(ValueError):
            ClassVocab(("a", "a"))

    def test_stable_indices(self):
        assert VOCAB.index("pillow") == 1
        with pytest.raises(KeyError):
            VOCAB.index("zeppelin")


class TestLoadDataset:
    def test_single_scene_echo(self, tmp_path):
        path = tmp_path / "scenes.jsonl"
        path.write_text(
            '{"image_id":"a","width":100,"height":100,'
            '"gts":[{"class":"bed","bbox":[10,10,50,30]}],"dets":[]}\n'
        )
        scenes = load_dataset(path, VOCAB)
        assert len(scenes) == 1
        scene = scenes[0]
        assert scene.image_id == "a"
        assert len(scene.gts) == 1 and len(scene.dets) == 0
        assert scene.gts[0].class_id == 0
        assert scene.gts[0].box == BBox(10, 10, 50, 30)

    def test_zero_score_clamped(self, tmp_path):
        path = tmp_path / "scenes.jsonl"
        path.write_text(
            '{"image_id":"a","width":100,"height":100,"gts":[],'
            '"dets":[{"class":"bed","score":0.0,"bbox":[1,1,5,5]}]}\n'
        )
        (scene,) = load_dataset(path, VOCAB)
        assert scene.dets[0].score == 1e-6

    def test_unknown_class_names_class_and_line(self, tmp_path):
        path = tmp_path / "scenes.jsonl"
        path.write_text(
            '{"image_id":"a","width":10,"height":10,"gts":[],"dets":[]}\n'
            '{"image_id":"b","width":10,"height":10,'
            '"gts":[{"class":"zeppelin","bbox":[1,1,2,2]}],"dets":[]}\n'
        )
        with pytest.raises(DatasetError) as err:
            load_dataset(path, VOCAB)
        assert "zeppelin" in str(err.value)
        assert "line 2" in str(err.value)

    def test_bad_json_names_line(self, tmp_path):
        path = tmp_path / "scenes.jsonl"
        path.write_text('{"image_id": "a"\n')
        with pytest.raises(DatasetError) as err:
            load_dataset(path, VOCAB)
        assert "line 1" in str(err.value)

    def test_non_positive_box_rejected(self, tmp_path):
        path = tmp_path / "scenes.jsonl"
        path.write_text(
            '{"image_id":"a","width":10,"height":10,'
            '"gts":[{"class":"bed","bbox":[1,1,0,2]}],"dets":[]}\n'
        )
        with pytest.raises(DatasetError):
            load_dataset(path, VOCAB)

    def test_round_trip_is_bit_identical(self, tmp_path):
        raw = tmp_path / "raw.jsonl"
        raw.write_text(
            '{"image_id":"a","width":100,"height":80,'
            '"gts":[{"class":"bed","bbox":[10.25,10.5,50.125,30.0625]}],'
            '"dets":[{"class":"pillow","score":0.73125,"bbox":[-3.5,2.0,18.0,9.0]},'
            '{"class":"lamp","score":1.5,"bbox":[1,1,4,4]}]}\n'
        )
        first = tmp_path / "first.jsonl"
        second = tmp_path / "second.jsonl"
        save_dataset(first, load_dataset(raw, VOCAB), VOCAB)
        save_dataset(second, load_dataset(first, VOCAB), VOCAB)
        assert first.read_bytes() == second.read_bytes()


class TestTpFlags:
    def test_greedy_one_per_gt(self):
        gt = GtObject(0, BBox(0, 0, 10, 10))
        close = Detection(0, 0.9, BBox(1, 0, 10, 10))
        closer_but_lower = Detection(0, 0.5, BBox(0, 0, 10, 10))
        scene = Scene("s", 100, 100, (gt,), (close, closer_but_lower))
        flags = tp_flags(scene, 0)
        assert flags == {0: True, 1: False}

    def test_iou_below_threshold_is_fp(self):
        gt = GtObject(0, BBox(0, 0, 10, 10))
        det = Detection(0, 0.9, BBox(8, 8, 10, 10))
        scene = Scene("s", 100, 100, (gt,), (det,))
        assert tp_flags(scene, 0) == {0: False}

    def test_only_requested_class(self):
        gt = GtObject(0, BBox(0, 0, 10, 10))
        det = Detection(1, 0.9, BBox(0, 0, 10, 10))
        scene = Scene("s", 100, 100, (gt,), (det,))
        assert tp_flags(scene, 0) == {}
        assert tp_flags(scene, 1) == {0: False}


def test_vocab_file_round_trip(tmp_path):
    path = tmp_path / "vocab.json"
    save_vocab(path, VOCAB)
    assert load_vocab(path).names == VOCAB.names
    bare = tmp_path / "bare.json"
    bare.write_text(json.dumps(["a", "b"]))
    assert load_vocab(bare).names == ("a", "b")
