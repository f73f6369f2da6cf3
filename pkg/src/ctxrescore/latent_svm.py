"""Latent-SVM training of the selective re-scorer.

The classifier score maximizes over binary region selections, which makes
the hinge objective semi-convex: once the selections of positive samples
are fixed, the objective is convex in the weights. Training alternates

  1. relabeling: recompute each positive sample's selection as the exact
     argmax under the current weights, and
  2. a convex step: projected stochastic subgradient descent on the
     fixed-selection objective, where negative samples keep maximizing
     over selections (which preserves convexity).

The convex step never returns weights worse than its starting point on
the fixed-selection objective, so the tracked objective is non-increasing
across outer iterations by construction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .context_stats import ContextStats
from .rescoring import (
    RescoreModel,
    RescoreSample,
    RescoreWeights,
    ac_slice,
    build_samples,
    context_features,
    vector_length,
)


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters of the trainer.

    The step size follows the schedule eta_t = 1 / (reg_lambda * t) with t
    counted across the whole run, and the weights averaged over the final
    quarter of each convex step are considered alongside the last iterate.
    """

    reg_lambda: float = 1e-2
    outer_iters: int = 10
    inner_epochs: int = 20
    seed: int = 0
    tol: float = 1e-4
    batch_size: int = 8

    def __post_init__(self):
        if self.reg_lambda <= 0:
            raise ValueError("reg_lambda must be positive")
        if self.outer_iters < 1:
            raise ValueError("outer_iters must be at least 1")
        if self.tol <= 0:
            raise ValueError("tol must be positive")


@dataclass
class TrainReport:
    """Objective trace and relabeling activity of one training run."""

    objective_per_outer_iter: list[float] = field(default_factory=list)
    relabel_change_counts: list[int] = field(default_factory=list)
    converged: bool = False

    def to_dict(self) -> dict:
        return {
            "objective_per_outer_iter": self.objective_per_outer_iter,
            "relabel_change_counts": self.relabel_change_counts,
            "converged": self.converged,
        }


class DivergenceError(RuntimeError):
    """The convex step produced a non-finite objective."""

    def __init__(self, step: int):
        super().__init__(f"optimization diverged at step {step}")
        self.step = step


class _Packed:
    """Padded per-sample feature arrays for vectorized training.

    blk[i, j] holds region j's five log-likelihood features scattered into
    its class's slots of the flat context block, so contributions and
    feature-map sums reduce to dense products.
    """

    __slots__ = ("log_a", "cls", "blk", "mask", "n", "kmax", "counts")

    def __init__(self, samples: Sequence[RescoreSample], stats: ContextStats):
        m = len(stats.vocab)
        self.n = len(samples)
        per = [context_features(s, stats) for s in samples]
        self.counts = np.array([c.size for _, c, _ in per], dtype=np.intp)
        self.kmax = int(self.counts.max()) if self.n else 0
        self.log_a = np.array([la for la, _, _ in per])
        self.cls = np.zeros((self.n, self.kmax), dtype=np.intp)
        self.blk = np.zeros((self.n, self.kmax, 5 * m))
        self.mask = np.zeros((self.n, self.kmax), dtype=bool)
        for i, (_, classes, table) in enumerate(per):
            for j, (cid, row) in enumerate(zip(classes, table)):
                self.blk[i, j, cid::m] = row
            k = classes.size
            self.cls[i, :k] = classes
            self.mask[i, :k] = True


def _contrib(vec: np.ndarray, packed: _Packed, rows: np.ndarray, m: int) -> np.ndarray:
    """Per-region contributions (rows x kmax); padding lanes stay zero."""
    if packed.kmax == 0 or rows.size == 0:
        return np.zeros((rows.size, packed.kmax))
    return packed.blk[rows] @ vec[1:-1]


def _phi_accumulate(g: np.ndarray, packed: _Packed, rows: np.ndarray, sel: np.ndarray, signs: np.ndarray, m: int) -> None:
    """Add sum_i signs[i] * phi(x_i, sel_i) into the flat gradient buffer."""
    g[0] += float(signs @ packed.log_a[rows])
    g[-1] += float(signs.sum())
    if packed.kmax == 0:
        return
    chosen = (sel & packed.mask[rows]).astype(np.float64)
    g[1:-1] += np.einsum("r,rk,rkd->d", signs, chosen, packed.blk[rows])


def _hinge_terms(vec, packed, rows, sel, m):
    c = _contrib(vec, packed, rows, m)
    contrib_sum = (c * sel).sum(axis=1) if packed.kmax else np.zeros(rows.size)
    f = vec[0] * packed.log_a[rows] + contrib_sum + vec[-1]
    return c, f


def _objective_fixed(
    vec: np.ndarray,
    pos: _Packed,
    latents: np.ndarray,
    neg: _Packed,
    reg_lambda: float,
    m: int,
    neg_select: str,
) -> float:
    """Hinge objective with positive selections held fixed.

    Negative samples maximize over selections (neg_select="max") or keep
    every region on (neg_select="all").
    """
    total = 0.0
    n = pos.n + neg.n
    if pos.n:
        rows = np.arange(pos.n)
        _, f = _hinge_terms(vec, pos, rows, latents, m)
        total += np.maximum(0.0, 1.0 - f).sum()
    if neg.n:
        rows = np.arange(neg.n)
        c = _contrib(vec, neg, rows, m)
        sel = (c > 0) & neg.mask if neg_select == "max" else neg.mask
        f = vec[0] * neg.log_a + (c * sel).sum(axis=1) + vec[-1]
        total += np.maximum(0.0, 1.0 + f).sum()
    return total / n + 0.5 * reg_lambda * float(vec @ vec)


def _objective_latent(vec: np.ndarray, pos: _Packed, neg: _Packed, reg_lambda: float, m: int) -> float:
    """The true training objective: every sample maximizes over selections."""
    rows = np.arange(pos.n)
    c = _contrib(vec, pos, rows, m)
    latents = (c > 0) & pos.mask
    return _objective_fixed(vec, pos, latents, neg, reg_lambda, m, "max")


def _relabel_packed(vec: np.ndarray, packed: _Packed, m: int) -> np.ndarray:
    rows = np.arange(packed.n)
    c = _contrib(vec, packed, rows, m)
    return (c > 0) & packed.mask


def _convex_packed(
    vec0: np.ndarray,
    pos: _Packed,
    latents: np.ndarray,
    neg: _Packed,
    config: TrainConfig,
    m: int,
    rng: np.random.Generator,
    t_offset: int,
    neg_select: str,
    epochs: int,
) -> tuple[np.ndarray, int]:
    """Projected stochastic subgradient descent on the fixed-selection objective.

    Returns the best of {final iterate, tail average, starting point} under
    that objective, plus the number of steps taken.
    """
    n = pos.n + neg.n
    lam = config.reg_lambda
    bs = max(1, min(config.batch_size, n))
    ac = ac_slice(m)
    # any minimizer satisfies (lam/2) ||w||^2 <= objective(0) = 1, so
    # projecting onto this ball never excludes it and tames early steps
    radius = np.sqrt(2.0 / lam)
    vec = vec0.copy()
    n_batches = (n + bs - 1) // bs
    total_steps = epochs * n_batches
    tail_start = int(0.75 * total_steps)
    tail_sum = np.zeros_like(vec)
    tail_count = 0
    step = 0

    for _ in range(epochs):
        order = rng.permutation(n)
        for b0 in range(0, n, bs):
            idx = order[b0 : b0 + bs]
            step += 1
            eta = 1.0 / (lam * (t_offset + step))
            g = np.zeros_like(vec)

            pos_rows = idx[idx < pos.n]
            if pos_rows.size:
                _, f = _hinge_terms(vec, pos, pos_rows, latents[pos_rows], m)
                active = f < 1.0
                if active.any():
                    _phi_accumulate(g, pos, pos_rows[active], latents[pos_rows][active], np.ones(int(active.sum())), m)

            neg_rows = idx[idx >= pos.n] - pos.n
            if neg_rows.size:
                c = _contrib(vec, neg, neg_rows, m)
                sel = (c > 0) & neg.mask[neg_rows] if neg_select == "max" else neg.mask[neg_rows]
                f = vec[0] * neg.log_a[neg_rows] + (c * sel).sum(axis=1) + vec[-1]
                active = f > -1.0
                if active.any():
                    _phi_accumulate(g, neg, neg_rows[active], sel[active], -np.ones(int(active.sum())), m)

            vec *= 1.0 - eta * lam
            vec += (eta / idx.size) * g
            np.maximum(vec[ac], 0.0, out=vec[ac])
            norm = float(np.linalg.norm(vec))
            if norm > radius:
                vec *= radius / norm
            if not np.all(np.isfinite(vec)):
                raise DivergenceError(t_offset + step)
            if step > tail_start:
                tail_sum += vec
                tail_count += 1

    candidates = [vec]
    if tail_count:
        candidates.insert(0, tail_sum / tail_count)
    candidates.append(vec0)
    objs = [_objective_fixed(w, pos, latents, neg, lam, m, neg_select) for w in candidates]
    best = int(np.argmin(objs))
    if not np.isfinite(objs[best]):
        raise DivergenceError(t_offset + step)
    return candidates[best], step


def relabel_positives(
    samples: Sequence[RescoreSample], weights: RescoreWeights, stats: ContextStats
) -> list[np.ndarray]:
    """Exact argmax selections for positive samples under the given weights.

    The additive score decomposes region by region, so the argmax selects
    exactly the regions with strictly positive contribution; ties at zero
    stay unselected. Relabeling is idempotent for fixed weights.
    """
    m = len(stats.vocab)
    packed = _Packed(samples, stats)
    padded = _relabel_packed(weights.to_vector(), packed, m)
    return [padded[i, : packed.counts[i]].copy() for i in range(packed.n)]


def convex_step(
    pos_samples: Sequence[RescoreSample],
    pos_indicators: Sequence[np.ndarray],
    neg_samples: Sequence[RescoreSample],
    weights_init: RescoreWeights,
    stats: ContextStats,
    config: TrainConfig,
    neg_select: str = "max",
) -> RescoreWeights:
    """Solve the convex weight subproblem with positive selections fixed.

    The context-appearance weights are projected onto [0, inf) after every
    update, and the result is never worse than weights_init on the
    fixed-selection objective.
    """
    m = len(stats.vocab)
    pos = _Packed(pos_samples, stats)
    neg = _Packed(neg_samples, stats)
    latents = np.zeros((pos.n, pos.kmax), dtype=bool)
    for i, ind in enumerate(pos_indicators):
        latents[i, : len(ind)] = np.asarray(ind, dtype=bool)
    rng = np.random.default_rng([config.seed, 0])
    vec, _ = _convex_packed(
        weights_init.to_vector(), pos, latents, neg, config, m, rng, 0, neg_select, config.inner_epochs
    )
    return RescoreWeights.from_vector(vec, m)


def initial_weights(n_classes: int) -> RescoreWeights:
    """Starting point that reproduces the raw detector ranking: unit weight
    on the target appearance and nothing else."""
    return RescoreWeights.zeros(n_classes, w0=1.0, b=0.0)


def train_latent(
    samples: Sequence[RescoreSample],
    stats: ContextStats,
    config: TrainConfig | None = None,
    select_all: bool = False,
) -> tuple[RescoreWeights, TrainReport]:
    """Coordinate-descent training; returns the best-objective weights.

    With select_all=True there is nothing latent: every region stays on
    for positives and negatives alike and a single convex run is
    performed (this trains the select-all baseline).
    """
    config = config or TrainConfig()
    m = len(stats.vocab)
    pos_samples = [s for s in samples if s.label == 1]
    neg_samples = [s for s in samples if s.label == -1]
    if not pos_samples or not neg_samples:
        raise ValueError(
            f"training needs at least one positive and one negative sample "
            f"(got {len(pos_samples)} positive, {len(neg_samples)} negative)"
        )
    pos = _Packed(pos_samples, stats)
    neg = _Packed(neg_samples, stats)
    vec = initial_weights(m).to_vector()
    report = TrainReport()

    if select_all:
        latents = pos.mask.copy()
        rng = np.random.default_rng([config.seed, 0])
        epochs = config.inner_epochs * config.outer_iters
        vec, _ = _convex_packed(vec, pos, latents, neg, config, m, rng, 0, "all", epochs)
        report.objective_per_outer_iter.append(_objective_fixed(vec, pos, latents, neg, config.reg_lambda, m, "all"))
        report.relabel_change_counts.append(0)
        report.converged = True
        return RescoreWeights.from_vector(vec, m), report

    # The all-zero context init is a stationary point of the alternation:
    # every contribution is exactly 0, the strict sign rule then selects
    # nothing anywhere, and the context blocks never receive a subgradient.
    # A purely convex select-all pass first gives the coordinate descent a
    # useful starting point, as is usual for latent max-margin models.
    rng = np.random.default_rng([config.seed, 0])
    vec, warm_steps = _convex_packed(
        vec, pos, pos.mask.copy(), neg, config, m, rng, 0, "all", config.inner_epochs
    )

    prev_latents = None
    best_vec = vec.copy()
    best_obj = np.inf
    t_offset = warm_steps
    for outer in range(config.outer_iters):
        latents = _relabel_packed(vec, pos, m)
        if prev_latents is None:
            changes = int(latents.any(axis=1).sum())
        else:
            changes = int(np.any(latents != prev_latents, axis=1).sum())
        report.relabel_change_counts.append(changes)
        prev_latents = latents

        rng = np.random.default_rng([config.seed, outer + 1])
        vec, steps = _convex_packed(
            vec, pos, latents, neg, config, m, rng, t_offset, "max", config.inner_epochs
        )
        t_offset += steps
        obj = _objective_latent(vec, pos, neg, config.reg_lambda, m)
        report.objective_per_outer_iter.append(obj)
        if obj < best_obj:
            best_obj = obj
            best_vec = vec.copy()

        if outer > 0:
            prev = report.objective_per_outer_iter[-2]
            if abs(prev - obj) <= config.tol * max(1.0, abs(prev)):
                report.converged = True
                break
            if changes == 0:
                report.converged = True
                break

    return RescoreWeights.from_vector(best_vec, m), report


def train_for_against(
    scenes,
    target_class: int,
    thresholds: Sequence[float],
    stats: ContextStats,
    config: TrainConfig | None = None,
    oracle: bool = False,
) -> tuple[RescoreModel, dict[str, TrainReport]]:
    """Train both sides of the selective re-scorer for one target class.

    The For side uses detections matching a ground-truth box of the class
    as positives; the Against side simply reverses the labels.
    """
    samples = build_samples(scenes, target_class, thresholds, oracle=oracle)
    for_weights, for_report = train_latent(samples, stats, config)
    flipped = [replace(s, label=-s.label) for s in samples]
    against_weights, against_report = train_latent(flipped, stats, config)
    model = RescoreModel(
        target_class=target_class,
        stats=stats,
        for_weights=for_weights,
        against_weights=against_weights,
        thresholds=tuple(float(v) for v in thresholds),
        method="cs",
    )
    return model, {"for": for_report, "against": against_report}


def train_select_all(
    scenes,
    target_class: int,
    thresholds: Sequence[float],
    stats: ContextStats,
    config: TrainConfig | None = None,
    oracle: bool = False,
) -> tuple[RescoreModel, dict[str, TrainReport]]:
    """Train the select-all baseline model for one target class."""
    samples = build_samples(scenes, target_class, thresholds, oracle=oracle)
    weights, report = train_latent(samples, stats, config, select_all=True)
    model = RescoreModel(
        target_class=target_class,
        stats=stats,
        for_weights=weights,
        against_weights=None,
        thresholds=tuple(float(v) for v in thresholds),
        method="sa",
    )
    return model, {"for": report}


def save_report(path, reports: dict[str, TrainReport]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({side: rep.to_dict() for side, rep in reports.items()}, fh, sort_keys=True, indent=2)
        fh.write("\n")
