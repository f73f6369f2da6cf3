"""Predicting an object's class from context alone.

Every ground-truth object in turn plays the target; the remaining
ground-truth objects, with their true labels revealed, provide the only
evidence. Per candidate label the feature vector sums pairwise
log-likelihoods (co-occurrence, relative scale, spatial offsets) over the
context objects, and a multiclass max-margin classifier picks the label.

The relative accuracy loss of a context class measures how much the
per-class accuracy drops when that class is masked out at inference time.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .context_stats import ContextStats, stats_from_dict, stats_to_dict
from .scenes import ClassVocab, Scene

PURE_MODEL_FORMAT = "ctxrescore.pure.v1"


@dataclass(frozen=True)
class ClassMask:
    """Context classes whose contributions are zeroed at inference."""

    excluded: frozenset[int] = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "excluded", frozenset(self.excluded))


@dataclass(frozen=True)
class PureContextModel:
    """Per-class weight rows over the pure-context feature layout.

    Row T of `weights` holds, for each context class i, the four weights
    (co-occurrence, scale, x offset, y offset) followed by the bias, so
    each row has length 4M + 1.
    """

    vocab: ClassVocab
    stats: ContextStats
    weights: np.ndarray

    def __post_init__(self):
        m = len(self.vocab)
        w = np.asarray(self.weights, dtype=np.float64)
        if w.shape != (m, 4 * m + 1):
            raise ValueError(f"weight table must be ({m}, {4 * m + 1}), got {w.shape}")
        if not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite")
        object.__setattr__(self, "weights", w)

    @property
    def w_co(self) -> np.ndarray:
        return self.weights[:, 0:-1:4]

    @property
    def w_sc(self) -> np.ndarray:
        return self.weights[:, 1:-1:4]

    @property
    def w_spx(self) -> np.ndarray:
        return self.weights[:, 2:-1:4]

    @property
    def w_spy(self) -> np.ndarray:
        return self.weights[:, 3:-1:4]

    @property
    def bias(self) -> np.ndarray:
        return self.weights[:, -1]


def feature_matrix(
    scene: Scene, target_idx: int, stats: ContextStats, mask: ClassMask = ClassMask()
) -> np.ndarray:
    """Pure-context features for every candidate label at once: (M, 4M + 1).

    Row T is the feature vector the target would have under label T. The
    bin of each pairwise measurement does not depend on the candidate
    label, so rows differ only through the likelihood tables.
    """
    m = len(stats.vocab)
    target = scene.gts[target_idx]
    feats = np.zeros((m, 4 * m + 1))
    feats[:, -1] = 1.0
    for j, other in enumerate(scene.gts):
        if j == target_idx or other.class_id in mask.excluded:
            continue
        i = other.class_id
        lo, hi = stats.config.scale_log_range
        r = min(max(0.5 * np.log(target.box.area / other.box.area), lo), hi)
        x = min(max((other.box.cx - target.box.cx) / scene.width, -1.0), 1.0)
        y = min(max((other.box.cy - target.box.cy) / scene.height, -1.0), 1.0)
        feats[:, 4 * i + 0] += stats.log_co[:, i, 1]
        feats[:, 4 * i + 1] += stats.log_sc[:, i, stats.scale_bin(r)]
        feats[:, 4 * i + 2] += stats.log_spx[:, i, stats.spatial_bin(x)]
        feats[:, 4 * i + 3] += stats.log_spy[:, i, stats.spatial_bin(y)]
    return feats


def pure_feature(
    scene: Scene,
    target_idx: int,
    t_class: int,
    stats: ContextStats,
    mask: ClassMask = ClassMask(),
) -> np.ndarray:
    """Feature vector of one target under one candidate label.

    Entries for context classes absent from the scene (or masked) are
    zero; a scene with no other objects yields only the bias entry.
    """
    return feature_matrix(scene, target_idx, stats, mask)[t_class]


def predict_label(
    model: PureContextModel, scene: Scene, target_idx: int, mask: ClassMask = ClassMask()
) -> tuple[int, np.ndarray]:
    """Highest-scoring label and the per-class scores; ties pick the lowest index."""
    feats = feature_matrix(scene, target_idx, model.stats, mask)
    scores = np.einsum("md,md->m", model.weights, feats)
    return int(np.argmax(scores)), scores


def _dataset_features(scenes, stats: ContextStats):
    feats, labels = [], []
    for scene in scenes:
        for t in range(len(scene.gts)):
            feats.append(feature_matrix(scene, t, stats))
            labels.append(scene.gts[t].class_id)
    if not feats:
        raise ValueError("no ground-truth objects to train on")
    return np.stack(feats), np.array(labels, dtype=np.intp)


def _objective(weights: np.ndarray, feats: np.ndarray, labels: np.ndarray, reg_lambda: float) -> float:
    scores = np.einsum("nmd,md->nm", feats, weights)
    true = scores[np.arange(len(labels)), labels]
    rivals = scores.copy()
    rivals[np.arange(len(labels)), labels] = -np.inf
    margins = 1.0 + rivals.max(axis=1) - true
    hinge = np.maximum(0.0, margins).mean()
    return hinge + 0.5 * reg_lambda * float((weights * weights).sum())


def train_pure(
    scenes,
    stats: ContextStats,
    reg_lambda: float = 1e-3,
    epochs: int = 50,
    seed: int = 0,
    batch_size: int = 8,
) -> tuple[PureContextModel, list[float]]:
    """Multiclass max-margin training by stochastic subgradient descent.

    Uses the margin rescaling loss max(0, 1 + max_{T != y} s_T - s_y) with
    step size 1 / (reg_lambda * t). The returned model is the best iterate
    seen at an epoch boundary, and the returned trace records that best
    objective after each epoch, so the trace is non-increasing.
    """
    if not scenes:
        raise ValueError("cannot train on an empty dataset")
    feats, labels = _dataset_features(scenes, stats)
    n = len(labels)
    m = len(stats.vocab)
    rng = np.random.default_rng(seed)
    weights = np.zeros((m, 4 * m + 1))
    best = weights.copy()
    best_obj = _objective(weights, feats, labels, reg_lambda)
    trace = []
    t = 0
    bs = max(1, min(batch_size, n))
    # the minimizer lies inside this ball since the objective at zero is 1
    radius = np.sqrt(2.0 / reg_lambda)
    for _ in range(epochs):
        order = rng.permutation(n)
        for b0 in range(0, n, bs):
            idx = order[b0 : b0 + bs]
            t += 1
            eta = 1.0 / (reg_lambda * t)
            scores = np.einsum("bmd,md->bm", feats[idx], weights)
            rows = np.arange(idx.size)
            true = scores[rows, labels[idx]]
            scores[rows, labels[idx]] = -np.inf
            rival = scores.argmax(axis=1)
            violated = 1.0 + scores[rows, rival] - true > 0.0
            weights *= 1.0 - eta * reg_lambda
            if violated.any():
                act = idx[violated]
                coef = eta / idx.size
                np.add.at(weights, labels[act], coef * feats[act, labels[act]])
                np.subtract.at(weights, rival[violated], coef * feats[act, rival[violated]])
            norm = float(np.linalg.norm(weights))
            if norm > radius:
                weights *= radius / norm
        obj = _objective(weights, feats, labels, reg_lambda)
        if obj < best_obj:
            best_obj = obj
            best = weights.copy()
        trace.append(best_obj)
    return PureContextModel(stats.vocab, stats, best), trace


def accuracy(
    model: PureContextModel, scenes, mask: ClassMask = ClassMask()
) -> tuple[np.ndarray, float]:
    """Per-class and macro-mean accuracy of label prediction from context.

    Every ground-truth object is predicted once with the rest of its scene
    as context. Classes with no targets get NaN and are excluded from the
    mean.
    """
    m = len(model.vocab)
    correct = np.zeros(m)
    total = np.zeros(m)
    for scene in scenes:
        for t, gt in enumerate(scene.gts):
            pred, _ = predict_label(model, scene, t, mask)
            total[gt.class_id] += 1
            if pred == gt.class_id:
                correct[gt.class_id] += 1
    with np.errstate(invalid="ignore"):
        per_class = np.where(total > 0, correct / np.maximum(total, 1), np.nan)
    seen = total > 0
    mean = float(per_class[seen].mean()) if seen.any() else float("nan")
    return per_class, mean


def ral(model: PureContextModel, scenes, t_class: int, ctx_class: int) -> float:
    """Relative accuracy loss of one context class for one target class.

    Computed as (acc_masked - acc_full) / acc_full with the context class
    masked at inference only; negative when masking hurts. Undefined when
    the unmasked accuracy is zero.
    """
    full, _ = accuracy(model, scenes)
    if not full[t_class] > 0:
        raise ValueError(
            f"relative accuracy loss undefined: class {model.vocab.names[t_class]!r} "
            "has zero unmasked accuracy"
        )
    masked, _ = accuracy(model, scenes, ClassMask({ctx_class}))
    return float((masked[t_class] - full[t_class]) / full[t_class])


def ral_table(model: PureContextModel, scenes) -> list[dict]:
    """All (target class, context class) relative accuracy losses.

    One inference pass per masked class. Rows for target classes with zero
    or undefined unmasked accuracy carry None entries.
    """
    m = len(model.vocab)
    full, _ = accuracy(model, scenes)
    rows = []
    for i in range(m):
        masked, _ = accuracy(model, scenes, ClassMask({i}))
        for t in range(m):
            defined = np.isfinite(full[t]) and full[t] > 0 and np.isfinite(masked[t])
            value = float((masked[t] - full[t]) / full[t]) if defined else None
            rows.append(
                {
                    "target_class": model.vocab.names[t],
                    "context_class": model.vocab.names[i],
                    "acc_full": None if not np.isfinite(full[t]) else float(full[t]),
                    "acc_masked": None if not np.isfinite(masked[t]) else float(masked[t]),
                    "ral": value,
                }
            )
    return rows


def pure_model_to_dict(model: PureContextModel) -> dict:
    return {
        "format": PURE_MODEL_FORMAT,
        "weights": model.weights.tolist(),
        "stats": stats_to_dict(model.stats),
    }


def pure_model_from_dict(obj: dict) -> PureContextModel:
    if obj.get("format") != PURE_MODEL_FORMAT:
        raise ValueError(f"not a pure-context model file (format tag {obj.get('format')!r})")
    stats = stats_from_dict(obj["stats"])
    return PureContextModel(stats.vocab, stats, np.asarray(obj["weights"]))


def save_pure_model(path, model: PureContextModel) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(pure_model_to_dict(model), fh, sort_keys=True)
        fh.write("\n")


def load_pure_model(path) -> PureContextModel:
    with open(path, "r", encoding="utf-8") as fh:
        return pure_model_from_dict(json.load(fh))
