"""Scene, box, and detection domain types plus the JSONL interchange format.

A scene bundles one image's ground-truth objects and detector outputs and is
the unit every other module consumes. All types are immutable after
construction and safe to share across workers.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

SCORE_MIN = 1e-6
SCORE_MAX = 1.0


class DatasetError(ValueError):
    """A scene file failed parsing or validation."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"{message} (line {line})"
        super().__init__(message)
        self.line = line


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box with top-left origin, stored as (x, y, w, h)."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box dimensions must be positive, got w={self.w}, h={self.h}")
        if not all(math.isfinite(v) for v in (self.x, self.y, self.w, self.h)):
            raise ValueError("box coordinates must be finite")

    @property
    def area(self) -> float:
        return self.w * self.h

    @property
    def cx(self) -> float:
        return self.x + self.w / 2.0

    @property
    def cy(self) -> float:
        return self.y + self.h / 2.0

    def clipped(self, width: float, height: float) -> "BBox":
        """Clip to the [0, width] x [0, height] canvas.

        Raises ValueError if the box lies entirely outside.
        """
        x0 = min(max(self.x, 0.0), width)
        y0 = min(max(self.y, 0.0), height)
        x1 = min(max(self.x + self.w, 0.0), width)
        y1 = min(max(self.y + self.h, 0.0), height)
        if x1 - x0 <= 0 or y1 - y0 <= 0:
            raise ValueError("box lies entirely outside the image")
        return BBox(x0, y0, x1 - x0, y1 - y0)

    def as_list(self) -> list[float]:
        return [self.x, self.y, self.w, self.h]


def iou(a: BBox, b: BBox) -> float:
    """Intersection area over union area; 0 for disjoint boxes."""
    ix = min(a.x + a.w, b.x + b.w) - max(a.x, b.x)
    iy = min(a.y + a.h, b.y + b.h) - max(a.y, b.y)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


@dataclass(frozen=True)
class ClassVocab:
    """Ordered object-class names; the index of a name is stable for the
    life of any model built on top of it. Background is not listed."""

    names: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        if len(self.names) < 2:
            raise ValueError("class vocabulary needs at least two classes")
        if len(set(self.names)) != len(self.names):
            raise ValueError("class names must be unique")
        object.__setattr__(self, "_by_name", {n: i for i, n in enumerate(self.names)})

    def __len__(self) -> int:
        return len(self.names)

    def __iter__(self):
        return iter(self.names)

    def index(self, name: str) -> int:
        try:
            return self._by_name[name]
        except KeyError:
            raise KeyError(f"unknown class {name!r}") from None


@dataclass(frozen=True)
class GtObject:
    """An annotated ground-truth object."""

    class_id: int
    box: BBox


@dataclass(frozen=True)
class Detection:
    """A detector output. Scores from detectors are probabilities in (0, 1];
    they are clamped to [1e-6, 1] at ingestion so logs stay finite. Re-scored
    detections may carry arbitrary finite real scores."""

    class_id: int
    score: float
    box: BBox

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise ValueError("detection score must be finite")


@dataclass(frozen=True)
class Scene:
    """One image: its id, canvas size, ground truth, and detections."""

    image_id: str
    width: int
    height: int
    gts: tuple[GtObject, ...]
    dets: tuple[Detection, ...]

    def __post_init__(self):
        object.__setattr__(self, "gts", tuple(self.gts))
        object.__setattr__(self, "dets", tuple(self.dets))
        if self.width <= 0 or self.height <= 0:
            raise ValueError("scene dimensions must be positive")


def clamp_score(score: float) -> float:
    return min(max(score, SCORE_MIN), SCORE_MAX)


def scene_to_dict(scene: Scene, vocab: ClassVocab) -> dict:
    return {
        "image_id": scene.image_id,
        "width": scene.width,
        "height": scene.height,
        "gts": [{"class": vocab.names[g.class_id], "bbox": g.box.as_list()} for g in scene.gts],
        "dets": [
            {"class": vocab.names[d.class_id], "score": d.score, "bbox": d.box.as_list()}
            for d in scene.dets
        ],
    }


def _parse_box(raw, line: int) -> BBox:
    if not isinstance(raw, (list, tuple)) or len(raw) != 4:
        raise DatasetError(f"bbox must be a 4-element [x, y, w, h] list, got {raw!r}", line)
    try:
        return BBox(*(float(v) for v in raw))
    except (TypeError, ValueError) as exc:
        raise DatasetError(f"bad bbox {raw!r}: {exc}", line) from None


def scene_from_dict(obj: dict, vocab: ClassVocab, line: int = 0, clamp_scores: bool = True) -> Scene:
    try:
        image_id = str(obj["image_id"])
        width = int(obj["width"])
        height = int(obj["height"])
        raw_gts = obj.get("gts", [])
        raw_dets = obj.get("dets", [])
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"malformed scene object: {exc}", line) from None
    if width <= 0 or height <= 0:
        raise DatasetError(f"scene dimensions must be positive, got {width}x{height}", line)

    gts = []
    for g in raw_gts:
        name = g.get("class")
        try:
            cid = vocab.index(name)
        except KeyError:
            raise DatasetError(f"unknown class {name!r} in ground truth", line) from None
        try:
            box = _parse_box(g.get("bbox"), line).clipped(width, height)
        except ValueError as exc:
            raise DatasetError(str(exc), line) from None
        gts.append(GtObject(cid, box))

    dets = []
    for d in raw_dets:
        name = d.get("class")
        try:
            cid = vocab.index(name)
        except KeyError:
            raise DatasetError(f"unknown class {name!r} in detections", line) from None
        try:
            score = float(d["score"])
        except (KeyError, TypeError, ValueError):
            raise DatasetError(f"missing or malformed detection score in {d!r}", line) from None
        if not math.isfinite(score):
            raise DatasetError(f"non-finite detection score {score!r}", line)
        if clamp_scores:
            score = clamp_score(score)
        try:
            box = _parse_box(d.get("bbox"), line).clipped(width, height)
        except ValueError as exc:
            raise DatasetError(str(exc), line) from None
        dets.append(Detection(cid, score, box))

    return Scene(image_id, width, height, tuple(gts), tuple(dets))


def load_dataset(path, vocab: ClassVocab, clamp_scores: bool = True) -> list[Scene]:
    """Read a JSONL scene file: one scene object per line.

    Detector scores are clamped into [1e-6, 1] and boxes clipped to the
    canvas. Pass clamp_scores=False for files whose scores are re-scored
    margins rather than detector probabilities.
    """
    scenes = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            raw = raw.strip()
            if not raw:
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"invalid JSON: {exc.msg}", lineno) from None
            scenes.append(scene_from_dict(obj, vocab, lineno, clamp_scores=clamp_scores))
    return scenes


def save_dataset(path, scenes: Iterable[Scene], vocab: ClassVocab) -> None:
    """Write scenes as JSONL with full float round-trip precision."""
    with open(path, "w", encoding="utf-8") as fh:
        for scene in scenes:
            fh.write(json.dumps(scene_to_dict(scene, vocab)))
            fh.write("\n")


def tp_flags(scene: Scene, class_id: int, iou_thresh: float = 0.5) -> dict[int, bool]:
    """Greedy one-to-one detection-to-GT matching for one class.

    Detections are visited in descending score order (ties keep input
    order); each claims the so-far-unmatched ground-truth box of the same
    class with the highest IoU >= iou_thresh. Returns a mapping from the
    detection's index in scene.dets to its matched flag.
    """
    det_indices = [k for k, d in enumerate(scene.dets) if d.class_id == class_id]
    det_indices.sort(key=lambda k: -scene.dets[k].score)
    gt_boxes = [g.box for g in scene.gts if g.class_id == class_id]
    taken = [False] * len(gt_boxes)
    flags: dict[int, bool] = {}
    for k in det_indices:
        best_j = -1
        best_v = 0.0
        for j, gbox in enumerate(gt_boxes):
            if taken[j]:
                continue
            v = iou(scene.dets[k].box, gbox)
            if v >= iou_thresh and v > best_v:
                best_j, best_v = j, v
        if best_j >= 0:
            taken[best_j] = True
            flags[k] = True
        else:
            flags[k] = False
    return flags


def save_vocab(path, vocab: ClassVocab) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"names": list(vocab.names)}, fh, indent=2)
        fh.write("\n")


def load_vocab(path) -> ClassVocab:
    """Read a vocabulary file: either {"names": [...]} or a bare JSON list."""
    with open(path, "r", encoding="utf-8") as fh:
        obj = json.load(fh)
    names = obj["names"] if isinstance(obj, dict) else obj
    if not isinstance(names, list) or not all(isinstance(n, str) for n in names):
        raise DatasetError("vocabulary must be a list of class names")
    return ClassVocab(tuple(names))
