"""Detection evaluation: PR curves, average precision, baseline family.

Methods evaluated against ground truth:

  ST    raw detector scores, no context
  SA    select-all context model (every eligible region contributes)
  FUB   For-side maximized score alone
  AUB   negated Against-side maximized score
  CS    margin between the For and Against maximized scores
  SA-O, CS-O   same as SA / CS but with the context pool restricted to
        true-positive detections by an oracle, in training and testing

Matching is greedy one detection per ground-truth box at IoU >= 0.5, ties
in score broken by input order. AP uses all-point interpolation (area
under the precision envelope) by default; an 11-point variant is
available for comparison.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from .context_stats import ContextStats
from .rescoring import (
    RescoreModel,
    build_target_sample,
    margin_score,
    select_and_score,
)
from .scenes import BBox, ClassVocab, Detection, Scene, iou, tp_flags

METHODS = ("ST", "SA", "FUB", "AUB", "CS", "SA-O", "CS-O")
ORACLE_METHODS = ("SA-O", "CS-O")


class MissingModelError(KeyError):
    """A method needs a per-class model that was not provided."""


@dataclass(frozen=True)
class PrCurve:
    """Score-sorted matches and the derived precision/recall arrays."""

    scores: tuple[float, ...]
    tp: tuple[bool, ...]
    precision: np.ndarray
    recall: np.ndarray
    ap: float
    n_gt: int


@dataclass(frozen=True)
class EvalReport:
    """Per-class average precision and its macro mean for one method."""

    method: str
    per_class_ap: dict[int, float]
    map: float | None

    def to_dict(self, vocab: ClassVocab) -> dict:
        return {
            "method": self.method,
            "map": self.map,
            "per_class_ap": {vocab.names[c]: ap for c, ap in sorted(self.per_class_ap.items())},
        }


@dataclass(frozen=True)
class SelectingRatioRow:
    """How often presented context regions of one class get selected."""

    side: str
    target_class: int
    context_class: int
    selected: int
    total: int

    @property
    def ratio(self) -> float | None:
        return self.selected / self.total if self.total > 0 else None


def _interp_ap(recall: np.ndarray, precision: np.ndarray, eleven_point: bool) -> float:
    if recall.size == 0:
        return 0.0
    if eleven_point:
        ap = 0.0
        for t in np.linspace(0.0, 1.0, 11):
            mask = recall >= t
            ap += precision[mask].max() if mask.any() else 0.0
        return ap / 11.0
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(mpre.size - 1, 0, -1):
        mpre[i - 1] = max(mpre[i - 1], mpre[i])
    idx = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]).sum())


def average_precision(
    dets: Sequence[tuple[str, float, BBox]],
    gts: Mapping[str, Sequence[BBox]],
    iou_thresh: float = 0.5,
    eleven_point: bool = False,
) -> PrCurve:
    """PR curve and AP of scored detections of one class.

    dets holds (image_id, score, box) triples; gts maps image ids to that
    class's ground-truth boxes. Detections are visited in descending score
    order and greedily claim the unmatched ground-truth box with the
    highest IoU above the threshold.
    """
    n_gt = sum(len(v) for v in gts.values())
    order = np.argsort(-np.array([d[1] for d in dets]), kind="stable") if dets else np.zeros(0, dtype=int)
    taken: dict[str, list[bool]] = {img: [False] * len(boxes) for img, boxes in gts.items()}
    flags = []
    scores = []
    for k in order:
        img, score, box = dets[int(k)]
        scores.append(score)
        best_j, best_v = -1, 0.0
        for j, gbox in enumerate(gts.get(img, ())):
            if taken.get(img, [])[j]:
                continue
            v = iou(box, gbox)
            if v >= iou_thresh and v > best_v:
                best_j, best_v = j, v
        if best_j >= 0:
            taken[img][best_j] = True
            flags.append(True)
        else:
            flags.append(False)
    tp = np.cumsum(np.array(flags, dtype=float)) if flags else np.zeros(0)
    fp = np.cumsum(~np.array(flags, dtype=bool)) if flags else np.zeros(0)
    recall = tp / n_gt if n_gt > 0 else np.zeros_like(tp)
    precision = tp / np.maximum(tp + fp, 1e-300)
    ap = _interp_ap(recall, precision, eleven_point) if n_gt > 0 else 0.0
    return PrCurve(tuple(scores), tuple(flags), precision, recall, ap, n_gt)


def class_pr_curve(
    scenes: Iterable[Scene], class_id: int, iou_thresh: float = 0.5, eleven_point: bool = False
) -> PrCurve:
    dets = []
    gts: dict[str, list[BBox]] = {}
    for scene in scenes:
        gts[scene.image_id] = [g.box for g in scene.gts if g.class_id == class_id]
        for d in scene.dets:
            if d.class_id == class_id:
                dets.append((scene.image_id, d.score, d.box))
    return average_precision(dets, gts, iou_thresh, eleven_point)


def evaluate_scenes(
    scenes: Sequence[Scene],
    vocab: ClassVocab,
    method: str = "ST",
    iou_thresh: float = 0.5,
    eleven_point: bool = False,
) -> tuple[EvalReport, dict[int, PrCurve]]:
    """AP for every class with ground truth; classes without any GT in the
    split are left out of the report rather than scored zero."""
    gt_classes = sorted({g.class_id for s in scenes for g in s.gts})
    curves = {c: class_pr_curve(scenes, c, iou_thresh, eleven_point) for c in gt_classes}
    per_class = {c: curve.ap for c, curve in curves.items()}
    mean = float(np.mean(list(per_class.values()))) if per_class else None
    return EvalReport(method, per_class, mean), curves


def precision_thresholds(scenes: Sequence[Scene], precision_target: float, vocab: ClassVocab) -> np.ndarray:
    """Per-class score cutoffs making surviving detections precise enough.

    For each class, returns the lowest cutoff c such that detections with
    score > c reach the target precision (thereby maximizing recall under
    the constraint), or +inf when no cutoff attains it. Labels come from
    the same greedy matching used everywhere else.
    """
    if not 0.0 < precision_target < 1.0:
        raise ValueError("precision target must lie strictly between 0 and 1")
    m = len(vocab)
    cutoffs = np.full(m, np.inf)
    scores_by_class: list[list[float]] = [[] for _ in range(m)]
    flags_by_class: list[list[bool]] = [[] for _ in range(m)]
    for scene in scenes:
        for c in {d.class_id for d in scene.dets}:
            flags = tp_flags(scene, c)
            for k, matched in flags.items():
                scores_by_class[c].append(scene.dets[k].score)
                flags_by_class[c].append(matched)
    for c in range(m):
        if not scores_by_class[c]:
            continue
        scores = np.array(scores_by_class[c])
        flags = np.array(flags_by_class[c])
        order = np.argsort(-scores, kind="stable")
        scores = scores[order]
        flags = flags[order]
        tp_prefix = np.cumsum(flags)
        for cut in sorted({0.0, *scores.tolist()}):
            k = int(np.sum(scores > cut))
            if k > 0 and tp_prefix[k - 1] / k >= precision_target:
                cutoffs[c] = cut
                break
    return cutoffs


def method_score(
    method: str, model: RescoreModel | None, sample, raw_score: float
) -> tuple[float, list]:
    """Score one target sample under a method; returns (score, traces)."""
    if method == "ST":
        return raw_score, []
    if model is None:
        raise MissingModelError(f"method {method} needs a trained model")
    if method in ("SA", "SA-O"):
        if model.method != "sa":
            raise MissingModelError(f"method {method} needs a select-all model, got {model.method!r}")
        score, trace = select_and_score(sample, model.for_weights, model.stats, side="for", select_all=True)
        return score, [trace]
    if model.method != "cs":
        raise MissingModelError(f"method {method} needs a selection model, got {model.method!r}")
    if method == "FUB":
        score, trace = select_and_score(sample, model.for_weights, model.stats, side="for")
        return score, [trace]
    if method == "AUB":
        score, trace = select_and_score(sample, model.against_weights, model.stats, side="against")
        return -score, [trace]
    if method in ("CS", "CS-O"):
        score, for_trace, against_trace = margin_score(model, sample)
        return score, [for_trace, against_trace]
    raise ValueError(f"unknown method {method!r}")


def rescore_scenes(
    scenes: Sequence[Scene],
    models: Mapping[int, RescoreModel],
    method: str,
    thresholds: Sequence[float] | None = None,
) -> tuple[list[Scene], list[dict]]:
    """Replace every detection's score with its method score.

    Context pools use the thresholds stored in each target class's model
    unless an explicit per-class array is given. Oracle methods restrict
    the pool to true-positive detections. Returns the re-scored scenes and
    one trace record per (target, side) for visualization.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    oracle = method in ORACLE_METHODS
    rescored = []
    traces: list[dict] = []
    for scene in scenes:
        flags_cache: dict[int, dict[int, bool]] = {}
        new_dets = []
        for k, det in enumerate(scene.dets):
            if method == "ST":
                new_dets.append(det)
                continue
            model = models.get(det.class_id)
            if model is None:
                raise MissingModelError(
                    f"no model for class id {det.class_id} required by method {method}"
                )
            thr = np.asarray(thresholds if thresholds is not None else model.thresholds)
            sample = build_target_sample(scene, k, thr, oracle, flags_cache)
            score, sample_traces = method_score(method, model, sample, det.score)
            new_dets.append(Detection(det.class_id, float(score), det.box))
            vocab = model.stats.vocab
            for trace in sample_traces:
                traces.append(
                    {
                        "image_id": scene.image_id,
                        "det_index": k,
                        "method": method,
                        "side": trace.side,
                        "target_class": vocab.names[det.class_id],
                        "target_bbox": det.box.as_list(),
                        "target_score": det.score,
                        "score": float(score),
                        "contexts": [
                            {
                                "class": vocab.names[ctx.class_id],
                                "bbox": ctx.box.as_list(),
                                "score": ctx.score,
                                "contribution": float(trace.contributions[j]),
                                "selected": bool(trace.indicators[j]),
                            }
                            for j, ctx in enumerate(sample.contexts)
                        ],
                    }
                )
        rescored.append(replace(scene, dets=tuple(new_dets)))
    return rescored, traces


def run_baseline(
    method: str,
    models: Mapping[int, RescoreModel],
    scenes: Sequence[Scene],
    thresholds: Sequence[float] | None = None,
    vocab: ClassVocab | None = None,
    eleven_point: bool = False,
) -> EvalReport:
    """Re-score the scenes under one method and evaluate AP against GT."""
    if vocab is None:
        if models:
            vocab = next(iter(models.values())).stats.vocab
        else:
            raise ValueError("vocab is required when no models are given")
    rescored, _ = rescore_scenes(scenes, models, method, thresholds)
    report, _ = evaluate_scenes(rescored, vocab, method, eleven_point=eleven_point)
    return report


def oracle_filter(scenes: Sequence[Scene], iou_thresh: float = 0.5) -> list[Scene]:
    """Restrict each scene's detections to true positives.

    A detection survives when it matches a same-class ground-truth box at
    the IoU threshold under greedy one-per-GT assignment. The result is
    the context pool oracle modes present to the model.
    """
    out = []
    for scene in scenes:
        keep = []
        for c in sorted({d.class_id for d in scene.dets}):
            flags = tp_flags(scene, c, iou_thresh)
            keep.extend(k for k, ok in flags.items() if ok)
        dets = tuple(scene.dets[k] for k in sorted(keep))
        out.append(replace(scene, dets=dets))
    return out


def selecting_ratios(
    model: RescoreModel, scenes: Sequence[Scene], target_class: int
) -> list[SelectingRatioRow]:
    """Fraction of presented oracle-pool context regions that get selected.

    Counted over every target detection of the class, separately for the
    For and Against sides; the denominator is the number of context
    regions of each class presented to the model (the oracle-filtered,
    threshold-passing pool).
    """
    from .rescoring import build_samples, contributions

    m = len(model.stats.vocab)
    samples = build_samples(scenes, target_class, model.thresholds, oracle=True)
    sides = [("for", model.for_weights)]
    if model.against_weights is not None:
        sides.append(("against", model.against_weights))
    rows = []
    for side, weights in sides:
        selected = np.zeros(m, dtype=int)
        total = np.zeros(m, dtype=int)
        for sample in samples:
            if not sample.contexts:
                continue
            c = contributions(sample, weights, model.stats)
            for j, ctx in enumerate(sample.contexts):
                total[ctx.class_id] += 1
                if c[j] > 0:
                    selected[ctx.class_id] += 1
        rows.extend(
            SelectingRatioRow(side, target_class, i, int(selected[i]), int(total[i]))
            for i in range(m)
        )
    return rows


def sweep_precision_threshold(
    train_scenes: Sequence[Scene],
    test_scenes: Sequence[Scene],
    vocab: ClassVocab,
    stats: ContextStats,
    p_values: Sequence[float],
    methods: Sequence[str] = ("SA", "CS"),
    config=None,
) -> list[dict]:
    """Retrain and evaluate each method at each precision target.

    Returns one row per (precision target, method) with the test mAP.
    """
    from .latent_svm import TrainConfig

    config = config or TrainConfig()
    rows = []
    for p in p_values:
        thresholds = precision_thresholds(train_scenes, p, vocab)
        models_by_method = train_models(train_scenes, vocab, stats, thresholds, config, methods)
        for method in methods:
            report = run_baseline(method, models_by_method.get(method, {}), test_scenes, vocab=vocab)
            rows.append({"precision_target": p, "method": method, "map": report.map})
    return rows


def train_models(
    train_scenes: Sequence[Scene],
    vocab: ClassVocab,
    stats: ContextStats,
    thresholds: Sequence[float],
    config,
    methods: Sequence[str],
    classes: Sequence[int] | None = None,
) -> dict[str, dict[int, RescoreModel]]:
    """Train every model family the requested methods need.

    The CS family (CS, FUB, AUB) shares one For/Against model per class;
    SA gets its own select-all model; oracle variants are trained on the
    oracle-filtered context pool.
    """
    from .latent_svm import train_for_against, train_select_all

    classes = list(classes) if classes is not None else list(range(len(vocab)))
    out: dict[str, dict[int, RescoreModel]] = {}
    need = {
        "cs": any(m in ("CS", "FUB", "AUB") for m in methods),
        "sa": "SA" in methods,
        "cs_o": "CS-O" in methods,
        "sa_o": "SA-O" in methods,
    }
    families: dict[str, dict[int, RescoreModel]] = {}
    for key, trainer, oracle in (
        ("cs", train_for_against, False),
        ("sa", train_select_all, False),
        ("cs_o", train_for_against, True),
        ("sa_o", train_select_all, True),
    ):
        if not need[key]:
            continue
        models = {}
        for c in classes:
            model, _ = trainer(train_scenes, c, thresholds, stats, config, oracle=oracle)
            models[c] = model
        families[key] = models
    for method in methods:
        if method == "ST":
            out[method] = {}
        elif method in ("CS", "FUB", "AUB"):
            out[method] = families["cs"]
        elif method == "SA":
            out[method] = families["sa"]
        elif method == "CS-O":
            out[method] = families["cs_o"]
        elif method == "SA-O":
            out[method] = families["sa_o"]
        else:
            raise ValueError(f"unknown method {method!r}")
    return out
