"""Smoothed likelihood histograms over object pairs.

For every ordered (target class, context class) pair we keep four
histograms learned from ground-truth statistics:

  co   two bins: the context class co-occurs / does not co-occur with the
       target class in an image
  sc   n bins over the log relative scale ratio of the pair
  spx  n bins over the signed horizontal center offset, normalized by
       image width
  spy  same for the vertical offset, normalized by image height

All histograms are Laplace-smoothed so every bin is strictly positive and
log-likelihood features stay finite.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .scenes import BBox, ClassVocab, Scene

KINDS = ("co", "sc", "spx", "spy")
SPATIAL_RANGE = (-1.0, 1.0)

STATS_FORMAT = "ctxrescore.stats.v1"


@dataclass(frozen=True)
class HistConfig:
    """Histogram layout and smoothing parameters."""

    n_scale_bins: int = 10
    n_spatial_bins: int = 10
    scale_log_range: tuple[float, float] = (-3.0, 3.0)
    laplace_alpha: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "scale_log_range", tuple(float(v) for v in self.scale_log_range))
        if self.n_scale_bins < 2 or self.n_spatial_bins < 2:
            raise ValueError("histograms need at least two bins")
        lo, hi = self.scale_log_range
        if not lo < hi:
            raise ValueError(f"scale_log_range must be increasing, got ({lo}, {hi})")
        if self.laplace_alpha < 0:
            raise ValueError("laplace_alpha must be non-negative")


def bin_index(value: float, lo: float, hi: float, n_bins: int) -> int:
    """Index of the half-open bin [lo + k*step, lo + (k+1)*step) holding value.

    Values are clipped into [lo, hi] first; a value exactly on an interior
    boundary goes to the upper bin and hi itself belongs to the last bin.
    """
    v = min(max(value, lo), hi)
    k = int(math.floor((v - lo) / (hi - lo) * n_bins))
    return min(k, n_bins - 1)


def scale_ratio(target: BBox, context: BBox, config: HistConfig) -> float:
    """Log of the square-root area ratio, clipped into the configured range.

    Symmetric under swapping the pair up to sign: r(a, b) == -r(b, a)
    before clipping.
    """
    lo, hi = config.scale_log_range
    r = 0.5 * math.log(target.area / context.area)
    return min(max(r, lo), hi)


def spatial_offsets(target: BBox, context: BBox, scene: Scene) -> tuple[float, float]:
    """Signed center-to-center offsets normalized by image size, in [-1, 1]."""
    x = (context.cx - target.cx) / scene.width
    y = (context.cy - target.cy) / scene.height
    return (min(max(x, -1.0), 1.0), min(max(y, -1.0), 1.0))


def _normalize(counts: np.ndarray, alpha: float) -> np.ndarray:
    """Laplace-smooth and normalize histogram counts along the last axis."""
    smoothed = counts.astype(np.float64) + alpha
    totals = smoothed.sum(axis=-1, keepdims=True)
    # A histogram with no counts and alpha == 0 has no information; keep it
    # uniform so it still sums to one.
    n_bins = counts.shape[-1]
    uniform = np.full_like(smoothed, 1.0 / n_bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(totals > 0, smoothed / np.where(totals > 0, totals, 1.0), uniform)
    return out


class StatsAccumulator:
    """Mutable count accumulator for fitting; single writer, mergeable.

    Counts are integers, so merging partial accumulators and permuting the
    input scenes both leave the final statistics bit-identical.
    """

    def __init__(self, vocab: ClassVocab, config: HistConfig):
        m = len(vocab)
        self.vocab = vocab
        self.config = config
        self.n_scenes = 0
        self.co = np.zeros((m, m, 2), dtype=np.int64)
        self.sc = np.zeros((m, m, config.n_scale_bins), dtype=np.int64)
        self.spx = np.zeros((m, m, config.n_spatial_bins), dtype=np.int64)
        self.spy = np.zeros((m, m, config.n_spatial_bins), dtype=np.int64)

    def add_scene(self, scene: Scene) -> None:
        m = len(self.vocab)
        self.n_scenes += 1
        classes = np.array([g.class_id for g in scene.gts], dtype=np.intp)
        if classes.size == 0:
            return
        present = np.zeros(m, dtype=bool)
        present[classes] = True
        for t in np.nonzero(present)[0]:
            self.co[t, present, 1] += 1
            self.co[t, ~present, 0] += 1

        if classes.size < 2:
            return
        areas = np.array([g.box.area for g in scene.gts])
        cx = np.array([g.box.cx for g in scene.gts])
        cy = np.array([g.box.cy for g in scene.gts])
        lo, hi = self.config.scale_log_range
        nsc = self.config.n_scale_bins
        nsp = self.config.n_spatial_bins

        log_side = 0.5 * np.log(areas)
        r = log_side[:, None] - log_side[None, :]
        x = np.clip((cx[None, :] - cx[:, None]) / scene.width, -1.0, 1.0)
        y = np.clip((cy[None, :] - cy[:, None]) / scene.height, -1.0, 1.0)

        rb = np.minimum(np.floor((np.clip(r, lo, hi) - lo) / (hi - lo) * nsc).astype(np.intp), nsc - 1)
        xb = np.minimum(np.floor((x + 1.0) / 2.0 * nsp).astype(np.intp), nsp - 1)
        yb = np.minimum(np.floor((y + 1.0) / 2.0 * nsp).astype(np.intp), nsp - 1)

        k = classes.size
        ti, ji = np.nonzero(~np.eye(k, dtype=bool))
        tc, jc = classes[ti], classes[ji]
        np.add.at(self.sc, (tc, jc, rb[ti, ji]), 1)
        np.add.at(self.spx, (tc, jc, xb[ti, ji]), 1)
        np.add.at(self.spy, (tc, jc, yb[ti, ji]), 1)

    def merge(self, other: "StatsAccumulator") -> None:
        if other.vocab.names != self.vocab.names or other.config != self.config:
            raise ValueError("cannot merge accumulators with different vocab or config")
        self.n_scenes += other.n_scenes
        self.co += other.co
        self.sc += other.sc
        self.spx += other.spx
        self.spy += other.spy

    def finalize(self) -> "ContextStats":
        alpha = self.config.laplace_alpha
        return ContextStats(
            vocab=self.vocab,
            config=self.config,
            co=_normalize(self.co, alpha),
            sc=_normalize(self.sc, alpha),
            spx=_normalize(self.spx, alpha),
            spy=_normalize(self.spy, alpha),
        )


@dataclass(frozen=True)
class ContextStats:
    """Fitted, smoothed likelihood tables, indexed (target class, context class).

    Immutable; share freely across workers.
    """

    vocab: ClassVocab
    config: HistConfig
    co: np.ndarray
    sc: np.ndarray
    spx: np.ndarray
    spy: np.ndarray

    @cached_property
    def log_co(self) -> np.ndarray:
        return np.log(self.co)

    @cached_property
    def log_sc(self) -> np.ndarray:
        return np.log(self.sc)

    @cached_property
    def log_spx(self) -> np.ndarray:
        return np.log(self.spx)

    @cached_property
    def log_spy(self) -> np.ndarray:
        return np.log(self.spy)

    def scale_bin(self, value: float) -> int:
        lo, hi = self.config.scale_log_range
        return bin_index(value, lo, hi, self.config.n_scale_bins)

    def spatial_bin(self, value: float) -> int:
        return bin_index(value, *SPATIAL_RANGE, self.config.n_spatial_bins)


def fit_stats(scenes, vocab: ClassVocab, config: HistConfig | None = None) -> ContextStats:
    """Learn all pairwise likelihood histograms from ground-truth scenes.

    Co-occurrence is counted at image level: for a pair (T, i) the
    "co-occur" bin counts images containing at least one object of each
    class, and the other bin counts images containing T but not i. Scale
    and offset histograms get one count per ordered ground-truth object
    pair in the same image.
    """
    scenes = list(scenes)
    if not scenes:
        raise ValueError("cannot fit statistics on an empty dataset")
    acc = StatsAccumulator(vocab, config or HistConfig())
    for scene in scenes:
        acc.add_scene(scene)
    return acc.finalize()


def lookup(stats: ContextStats, kind: str, t_class: int, ctx_class: int, value) -> float:
    """Smoothed probability of the bin containing value.

    For kind "co" the value is the binary event "a context object of that
    class is present".
    """
    if kind == "co":
        return float(stats.co[t_class, ctx_class, 1 if value else 0])
    if kind == "sc":
        return float(stats.sc[t_class, ctx_class, stats.scale_bin(value)])
    if kind == "spx":
        return float(stats.spx[t_class, ctx_class, stats.spatial_bin(value)])
    if kind == "spy":
        return float(stats.spy[t_class, ctx_class, stats.spatial_bin(value)])
    raise ValueError(f"unknown histogram kind {kind!r}")


def stats_to_dict(stats: ContextStats) -> dict:
    return {
        "format": STATS_FORMAT,
        "vocab": list(stats.vocab.names),
        "config": {
            "n_scale_bins": stats.config.n_scale_bins,
            "n_spatial_bins": stats.config.n_spatial_bins,
            "scale_log_range": list(stats.config.scale_log_range),
            "laplace_alpha": stats.config.laplace_alpha,
        },
        "co": stats.co.tolist(),
        "sc": stats.sc.tolist(),
        "spx": stats.spx.tolist(),
        "spy": stats.spy.tolist(),
    }


def stats_from_dict(obj: dict) -> ContextStats:
    if obj.get("format") != STATS_FORMAT:
        raise ValueError(f"not a statistics file (format tag {obj.get('format')!r})")
    cfg = obj["config"]
    return ContextStats(
        vocab=ClassVocab(tuple(obj["vocab"])),
        config=HistConfig(
            n_scale_bins=cfg["n_scale_bins"],
            n_spatial_bins=cfg["n_spatial_bins"],
            scale_log_range=tuple(cfg["scale_log_range"]),
            laplace_alpha=cfg["laplace_alpha"],
        ),
        co=np.asarray(obj["co"], dtype=np.float64),
        sc=np.asarray(obj["sc"], dtype=np.float64),
        spx=np.asarray(obj["spx"], dtype=np.float64),
        spy=np.asarray(obj["spy"], dtype=np.float64),
    )


def save_stats(path, stats: ContextStats) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(stats_to_dict(stats), fh, sort_keys=True)
        fh.write("\n")


def load_stats(path) -> ContextStats:
    with open(path, "r", encoding="utf-8") as fh:
        return stats_from_dict(json.load(fh))
