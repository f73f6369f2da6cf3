"""Context re-scoring of detections with per-region selection.

A target detection of class T is scored from its own appearance plus a sum
over selected contextual detections. Each context region j of class i
contributes

    c_j = w_co(i) log d_co + w_sc(i) log d_sc(r) + w_spx(i) log d_spx(x)
        + w_spy(i) log d_spy(y) + w_Ac(i) log A_c

and the score maximized over binary selections decomposes region by
region: a region is selected exactly when its contribution is strictly
positive. Two weight vectors are kept per target class: one trained to
support the class (the For side) and one trained to refute it (the
Against side); the final confidence is the margin between the two
maximized scores.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np

from .context_stats import ContextStats, stats_from_dict, stats_to_dict
from .scenes import ClassVocab, Detection, Scene, tp_flags

MODEL_FORMAT = "ctxrescore.model.v1"

# Feature-type rows of the per-region feature table, in weight-vector order.
FEATURE_TYPES = ("co", "sc", "spx", "spy", "ac")


@dataclass(frozen=True)
class RescoreWeights:
    """Weights for one side of the re-scorer.

    Layout matches the flat feature vector: target appearance weight, one
    weight per context class for each of the five per-region feature
    types, and a bias. Appearance weights of context regions are
    constrained non-negative so that confidently detected regions are
    favored for selection.
    """

    w0: float
    w_co: np.ndarray
    w_sc: np.ndarray
    w_spx: np.ndarray
    w_spy: np.ndarray
    w_ac: np.ndarray
    b: float

    def __post_init__(self):
        for name in ("w_co", "w_sc", "w_spx", "w_spy", "w_ac"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        if np.any(self.w_ac < 0):
            raise ValueError("context appearance weights must be non-negative")
        vec = self.to_vector()
        if not np.all(np.isfinite(vec)):
            raise ValueError("weights must be finite")

    @property
    def n_classes(self) -> int:
        return self.w_co.shape[0]

    def stacked(self) -> np.ndarray:
        """(5, M) table with rows in FEATURE_TYPES order."""
        return np.stack([self.w_co, self.w_sc, self.w_spx, self.w_spy, self.w_ac])

    def to_vector(self) -> np.ndarray:
        """Flat layout [w0, w_co(1..M), w_sc(..), w_spx(..), w_spy(..), w_ac(..), b]."""
        return np.concatenate([[self.w0], self.stacked().ravel(), [self.b]])

    @classmethod
    def from_vector(cls, vec: np.ndarray, n_classes: int) -> "RescoreWeights":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (5 * n_classes + 2,):
            raise ValueError(f"expected vector of length {5 * n_classes + 2}, got {vec.shape}")
        blocks = vec[1:-1].reshape(5, n_classes)
        return cls(float(vec[0]), blocks[0], blocks[1], blocks[2], blocks[3], blocks[4], float(vec[-1]))

    @classmethod
    def zeros(cls, n_classes: int, w0: float = 0.0, b: float = 0.0) -> "RescoreWeights":
        z = np.zeros(n_classes)
        return cls(w0, z, z.copy(), z.copy(), z.copy(), z.copy(), b)


def vector_length(n_classes: int) -> int:
    return 5 * n_classes + 2


def ac_slice(n_classes: int) -> slice:
    """Slice of the flat weight vector holding the constrained w_ac block."""
    return slice(1 + 4 * n_classes, 1 + 5 * n_classes)


@dataclass(frozen=True)
class SelectionTrace:
    """Which context regions one scoring pass selected, and why.

    For selective scoring, indicators[j] is True exactly when
    contributions[j] > 0; select-all scoring forces every indicator on.
    """

    indicators: np.ndarray
    contributions: np.ndarray
    side: str


@dataclass(frozen=True)
class RescoreSample:
    """One target detection with its eligible context detections."""

    target: Detection
    contexts: tuple[Detection, ...]
    scene_dims: tuple[float, float]
    label: int | None = None
    image_id: str = ""
    target_index: int = -1

    def __post_init__(self):
        object.__setattr__(self, "contexts", tuple(self.contexts))


@dataclass(frozen=True)
class RescoreModel:
    """A trained per-class re-scorer: both weight sides, the statistics they
    were trained against, and the context score thresholds used."""

    target_class: int
    stats: ContextStats
    for_weights: RescoreWeights
    against_weights: RescoreWeights | None
    thresholds: tuple[float, ...]
    method: str = "cs"


def context_features(sample: RescoreSample, stats: ContextStats):
    """Per-region log-likelihood features for a sample.

    Returns (log_a, classes, table) where table has one row per context
    region with columns [log d_co, log d_sc, log d_spx, log d_spy, log A_c].
    """
    t = sample.target
    width, height = sample.scene_dims
    k = len(sample.contexts)
    classes = np.fromiter((c.class_id for c in sample.contexts), dtype=np.intp, count=k)
    table = np.empty((k, 5), dtype=np.float64)
    lo, hi = stats.config.scale_log_range
    t_area_log = 0.5 * math.log(t.box.area)
    for j, ctx in enumerate(sample.contexts):
        i = ctx.class_id
        r = min(max(t_area_log - 0.5 * math.log(ctx.box.area), lo), hi)
        x = min(max((ctx.box.cx - t.box.cx) / width, -1.0), 1.0)
        y = min(max((ctx.box.cy - t.box.cy) / height, -1.0), 1.0)
        table[j, 0] = stats.log_co[t.class_id, i, 1]
        table[j, 1] = stats.log_sc[t.class_id, i, stats.scale_bin(r)]
        table[j, 2] = stats.log_spx[t.class_id, i, stats.spatial_bin(x)]
        table[j, 3] = stats.log_spy[t.class_id, i, stats.spatial_bin(y)]
        table[j, 4] = math.log(ctx.score)
    return math.log(t.score), classes, table


def region_contribution(
    target: Detection,
    ctx: Detection,
    weights: RescoreWeights,
    stats: ContextStats,
    dims: tuple[float, float],
) -> float:
    """Score contribution of a single context region for the given target."""
    sample = RescoreSample(target, (ctx,), dims)
    _, classes, table = context_features(sample, stats)
    w5 = weights.stacked()
    return float(table[0] @ w5[:, classes[0]])


def contributions(sample: RescoreSample, weights: RescoreWeights, stats: ContextStats) -> np.ndarray:
    """Vector of per-region contributions c_j for one sample."""
    _, classes, table = context_features(sample, stats)
    if classes.size == 0:
        return np.zeros(0)
    w5 = weights.stacked()
    return np.einsum("kf,fk->k", table, w5[:, classes])


def select_and_score(
    sample: RescoreSample,
    weights: RescoreWeights,
    stats: ContextStats,
    side: str = "for",
    select_all: bool = False,
) -> tuple[float, SelectionTrace]:
    """Maximize the score over region selections and report the selection.

    The score is additive over regions, so the maximum selects exactly the
    regions with strictly positive contribution; a zero contribution is
    left unselected. With select_all=True every region is forced on.
    """
    c = contributions(sample, weights, stats)
    if select_all:
        ind = np.ones(c.shape, dtype=bool)
    else:
        ind = c > 0
    score = weights.w0 * math.log(sample.target.score) + float(c[ind].sum()) + weights.b
    return score, SelectionTrace(ind, c, side)


def feature_vector(sample: RescoreSample, indicators, stats: ContextStats) -> np.ndarray:
    """Flat feature map for a fixed selection; pairs with RescoreWeights.to_vector().

    Layout: [log A(target); per context class: summed log d_co, then
    log d_sc, log d_spx, log d_spy, log A_c over selected regions of that
    class; 1].
    """
    indicators = np.asarray(indicators, dtype=bool)
    if indicators.shape != (len(sample.contexts),):
        raise ValueError("indicator vector length must match the context count")
    m = len(stats.vocab)
    log_a, classes, table = context_features(sample, stats)
    phi = np.zeros(vector_length(m))
    phi[0] = log_a
    phi[-1] = 1.0
    blocks = np.zeros((5, m))
    for j in np.nonzero(indicators)[0]:
        blocks[:, classes[j]] += table[j]
    phi[1:-1] = blocks.ravel()
    return phi


def margin_score(model: RescoreModel, sample: RescoreSample) -> tuple[float, SelectionTrace, SelectionTrace]:
    """For-side maximized score minus Against-side maximized score.

    Returns the margin together with both selection traces.
    """
    if model.against_weights is None:
        raise ValueError("margin scoring needs both weight sides")
    for_score, for_trace = select_and_score(sample, model.for_weights, model.stats, side="for")
    against_score, against_trace = select_and_score(sample, model.against_weights, model.stats, side="against")
    return for_score - against_score, for_trace, against_trace


def build_target_sample(
    scene: Scene,
    det_index: int,
    thresholds: Sequence[float],
    oracle: bool = False,
    flags_by_class: dict[int, dict[int, bool]] | None = None,
    iou_thresh: float = 0.5,
) -> RescoreSample:
    """Build the sample for one detection acting as the target.

    Context candidates are every other detection whose score is strictly
    above its own class threshold; in oracle mode they must additionally
    match a same-class ground-truth box. The label is +1 when the target
    itself matches a ground-truth box of its class under greedy
    one-per-GT assignment, else -1.
    """
    if flags_by_class is None:
        flags_by_class = {}
    target = scene.dets[det_index]

    def flags_for(cid: int) -> dict[int, bool]:
        if cid not in flags_by_class:
            flags_by_class[cid] = tp_flags(scene, cid, iou_thresh)
        return flags_by_class[cid]

    contexts = []
    for k, det in enumerate(scene.dets):
        if k == det_index:
            continue
        if not det.score > thresholds[det.class_id]:
            continue
        if oracle and not flags_for(det.class_id)[k]:
            continue
        contexts.append(det)

    label = 1 if flags_for(target.class_id)[det_index] else -1
    return RescoreSample(
        target=target,
        contexts=tuple(contexts),
        scene_dims=(float(scene.width), float(scene.height)),
        label=label,
        image_id=scene.image_id,
        target_index=det_index,
    )


def build_scene_samples(
    scene: Scene,
    thresholds: Sequence[float],
    oracle: bool = False,
    iou_thresh: float = 0.5,
) -> list[RescoreSample]:
    """One sample per detection in the scene, in detection order."""
    flags: dict[int, dict[int, bool]] = {}
    return [
        build_target_sample(scene, k, thresholds, oracle, flags, iou_thresh)
        for k in range(len(scene.dets))
    ]


def build_samples(
    scenes: Iterable[Scene],
    target_class: int,
    thresholds: Sequence[float],
    oracle: bool = False,
    iou_thresh: float = 0.5,
) -> list[RescoreSample]:
    """All samples whose target detection is of the given class."""
    thresholds = np.asarray(thresholds, dtype=np.float64)
    out = []
    for scene in scenes:
        flags: dict[int, dict[int, bool]] = {}
        for k, det in enumerate(scene.dets):
            if det.class_id != target_class:
                continue
            out.append(build_target_sample(scene, k, thresholds, oracle, flags, iou_thresh))
    return out


def _weights_to_dict(w: RescoreWeights) -> dict:
    return {
        "w0": w.w0,
        "w_co": w.w_co.tolist(),
        "w_sc": w.w_sc.tolist(),
        "w_spx": w.w_spx.tolist(),
        "w_spy": w.w_spy.tolist(),
        "w_ac": w.w_ac.tolist(),
        "b": w.b,
    }


def _weights_from_dict(obj: dict) -> RescoreWeights:
    return RescoreWeights(
        w0=float(obj["w0"]),
        w_co=np.asarray(obj["w_co"]),
        w_sc=np.asarray(obj["w_sc"]),
        w_spx=np.asarray(obj["w_spx"]),
        w_spy=np.asarray(obj["w_spy"]),
        w_ac=np.asarray(obj["w_ac"]),
        b=float(obj["b"]),
    )


def model_to_dict(model: RescoreModel) -> dict:
    return {
        "format": MODEL_FORMAT,
        "method": model.method,
        "target_class": model.stats.vocab.names[model.target_class],
        "thresholds": list(model.thresholds),
        "for_weights": _weights_to_dict(model.for_weights),
        "against_weights": None if model.against_weights is None else _weights_to_dict(model.against_weights),
        "stats": stats_to_dict(model.stats),
    }


def model_from_dict(obj: dict) -> RescoreModel:
    if obj.get("format") != MODEL_FORMAT:
        raise ValueError(f"not a re-scoring model file (format tag {obj.get('format')!r})")
    stats = stats_from_dict(obj["stats"])
    against = obj.get("against_weights")
    return RescoreModel(
        target_class=stats.vocab.index(obj["target_class"]),
        stats=stats,
        for_weights=_weights_from_dict(obj["for_weights"]),
        against_weights=None if against is None else _weights_from_dict(against),
        thresholds=tuple(float(v) for v in obj["thresholds"]),
        method=obj.get("method", "cs"),
    )


def save_model(path, model: RescoreModel) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model_to_dict(model), fh, sort_keys=True)
        fh.write("\n")


def load_model(path) -> RescoreModel:
    with open(path, "r", encoding="utf-8") as fh:
        return model_from_dict(json.load(fh))
