"""Synthetic scenes with planted contextual structure, plus a detector model.

Scenes are sampled anchor-first: a uniformly drawn anchor class proposes
the other classes through its pairwise co-occurrence probabilities, and
the proposal is accepted with the product of co-occurrence probabilities
over all non-anchor class pairs (rejection sampling with a retry bound).
Every object is then placed relative to the anchor instance with
per-pair Gaussian offsets (in canvas fractions) and log scale ratios, and
clipped to the canvas.

The detector model fires on each ground-truth object with a per-class
recall, jitters the box, and draws scores from a high Beta; per-class
Poisson false positives get random boxes and low-Beta scores.

Everything is reproducible from (spec, seed): each scene uses its own RNG
stream derived from the seed and the scene index, so chunked parallel
generation yields identical output.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .scenes import BBox, ClassVocab, Detection, GtObject, Scene


class GenerationError(RuntimeError):
    """Rejection sampling exhausted its retry bound; the spec is infeasible."""


@dataclass(frozen=True)
class WorldSpec:
    """Planted scene structure.

    cooccur[a, c] is the probability that class c joins a scene anchored
    at class a (symmetric). offset_mu/_sigma give, per (class, anchor
    class) pair, the Gaussian offset of the object's center from the
    anchor center in canvas-width/height fractions; scale_mu/_sigma give
    the Gaussian log square-root area ratio to the anchor.
    """

    vocab: ClassVocab
    cooccur: np.ndarray
    scale_mu: np.ndarray
    scale_sigma: np.ndarray
    offset_mu: np.ndarray
    offset_sigma: np.ndarray
    objects_per_scene: tuple[int, int]
    seed: int = 0
    width: int = 64
    height: int = 48
    anchor_frac: float = 0.2
    max_tries: int = 1000

    def __post_init__(self):
        m = len(self.vocab)
        for name, shape in (
            ("cooccur", (m, m)),
            ("scale_mu", (m, m)),
            ("scale_sigma", (m, m)),
            ("offset_mu", (m, m, 2)),
            ("offset_sigma", (m, m, 2)),
        ):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != shape:
                raise ValueError(f"{name} must have shape {shape}, got {arr.shape}")
            object.__setattr__(self, name, arr)
        if np.any(self.cooccur < 0) or np.any(self.cooccur > 1):
            raise ValueError("co-occurrence probabilities must lie in [0, 1]")
        if np.any(self.scale_sigma <= 0) or np.any(self.offset_sigma <= 0):
            raise ValueError("sigmas must be positive")
        lo, hi = self.objects_per_scene
        if not (0 < lo <= hi):
            raise ValueError("objects_per_scene must be a positive (lo, hi) range")
        object.__setattr__(self, "objects_per_scene", (int(lo), int(hi)))


@dataclass(frozen=True)
class DetectorSpec:
    """Simulated detector behavior: per-class recall and false-positive
    rates, Beta score shapes for true and false detections, and box
    position jitter in canvas units.

    confusion_rate models class confusions: with this probability each
    ground-truth object additionally fires a detection of a wrong class on
    (a jittered copy of) its own box. Confusions draw scores from their
    own Beta so they can emulate hard, confidently wrong detections.
    """

    tp_rate: tuple[float, ...]
    fp_per_scene: tuple[float, ...]
    tp_score_beta: tuple[float, float] = (6.0, 2.6)
    fp_score_beta: tuple[float, float] = (2.2, 5.0)
    localization_jitter: float = 1.0
    confusion_rate: float = 0.0
    confusion_score_beta: tuple[float, float] = (3.2, 2.8)

    def __post_init__(self):
        object.__setattr__(self, "tp_rate", tuple(float(v) for v in self.tp_rate))
        object.__setattr__(self, "fp_per_scene", tuple(float(v) for v in self.fp_per_scene))
        if any(not 0.0 <= v <= 1.0 for v in self.tp_rate):
            raise ValueError("tp_rate entries must lie in [0, 1]")
        if any(v < 0 for v in self.fp_per_scene):
            raise ValueError("fp_per_scene rates must be non-negative")
        if min(self.tp_score_beta) <= 0 or min(self.fp_score_beta) <= 0:
            raise ValueError("Beta shape parameters must be positive")
        if self.localization_jitter < 0:
            raise ValueError("localization_jitter must be non-negative")
        if not 0.0 <= self.confusion_rate <= 1.0:
            raise ValueError("confusion_rate must lie in [0, 1]")
        if min(self.confusion_score_beta) <= 0:
            raise ValueError("Beta shape parameters must be positive")


def _draw_class_set(world: WorldSpec, rng: np.random.Generator) -> tuple[int, np.ndarray]:
    """Anchor class plus accepted class set, by pairwise rejection sampling."""
    m = len(world.vocab)
    for _ in range(world.max_tries):
        anchor = int(rng.integers(m))
        present = rng.random(m) < world.cooccur[anchor]
        present[anchor] = True
        others = np.nonzero(present)[0]
        others = others[others != anchor]
        accept = 1.0
        for a_idx in range(len(others)):
            for b_idx in range(a_idx + 1, len(others)):
                accept *= world.cooccur[others[a_idx], others[b_idx]]
        if rng.random() < accept:
            return anchor, np.nonzero(present)[0]
    raise GenerationError(
        f"no acceptable class set after {world.max_tries} tries; the co-occurrence table is infeasible"
    )


def _place_box(
    world: WorldSpec,
    rng: np.random.Generator,
    cls: int,
    anchor_cls: int,
    anchor_center: tuple[float, float],
    anchor_area: float,
) -> BBox:
    s = rng.normal(world.scale_mu[cls, anchor_cls], world.scale_sigma[cls, anchor_cls])
    side = float(np.sqrt(anchor_area) * np.exp(s))
    dx = rng.normal(world.offset_mu[cls, anchor_cls, 0], world.offset_sigma[cls, anchor_cls, 0])
    dy = rng.normal(world.offset_mu[cls, anchor_cls, 1], world.offset_sigma[cls, anchor_cls, 1])
    w = min(side, 0.95 * world.width)
    h = min(side, 0.95 * world.height)
    cx = min(max(anchor_center[0] + dx * world.width, w / 2), world.width - w / 2)
    cy = min(max(anchor_center[1] + dy * world.height, h / 2), world.height - h / 2)
    return BBox(cx - w / 2, cy - h / 2, w, h)


def _generate_one(world: WorldSpec, index: int) -> Scene:
    rng = np.random.default_rng([world.seed, index])
    anchor_cls, class_set = _draw_class_set(world, rng)

    lo, hi = world.objects_per_scene
    n_obj = int(rng.integers(lo, hi + 1))
    classes = list(class_set)
    if n_obj > len(classes):
        extra = rng.choice(np.sort(class_set), size=n_obj - len(classes), replace=True)
        classes.extend(int(c) for c in extra)

    side = world.anchor_frac * min(world.width, world.height)
    acx = float(rng.uniform(0.3 * world.width, 0.7 * world.width))
    acy = float(rng.uniform(0.3 * world.height, 0.7 * world.height))
    anchor_box = BBox(acx - side / 2, acy - side / 2, side, side)
    anchor_area = anchor_box.area

    gts = [GtObject(anchor_cls, anchor_box)]
    anchor_slot_used = False
    for cls in classes:
        if cls == anchor_cls and not anchor_slot_used:
            # the anchor instance itself occupies the first slot
            anchor_slot_used = True
            continue
        gts.append(GtObject(int(cls), _place_box(world, rng, int(cls), anchor_cls, (acx, acy), anchor_area)))
    return Scene(f"scene-{index:05d}", world.width, world.height, tuple(gts), ())


def _generate_chunk(args) -> list[Scene]:
    world, start, stop = args
    return [_generate_one(world, i) for i in range(start, stop)]


def generate(world: WorldSpec, n_scenes: int, workers: int = 1) -> list[Scene]:
    """Sample ground-truth-only scenes; identical output for any worker count."""
    if workers <= 1 or n_scenes < 4:
        return [_generate_one(world, i) for i in range(n_scenes)]
    bounds = np.linspace(0, n_scenes, workers + 1, dtype=int)
    chunks = [(world, int(bounds[k]), int(bounds[k + 1])) for k in range(workers)]
    out: list[Scene] = []
    with ProcessPoolExecutor(max_workers=workers) as pool:
        for part in pool.map(_generate_chunk, chunks):
            out.extend(part)
    return out


def simulate_detector(scenes, spec: DetectorSpec, seed: int = 0) -> list[Scene]:
    """Populate detections: jittered true positives plus random false positives."""
    out = []
    m = len(spec.tp_rate)
    for index, scene in enumerate(scenes):
        rng = np.random.default_rng([seed, index, 1])
        dets = []

        def jittered(box):
            jit = rng.normal(0.0, spec.localization_jitter, size=4) if spec.localization_jitter > 0 else np.zeros(4)
            w = min(max(box.w + jit[2], 1.0), scene.width)
            h = min(max(box.h + jit[3], 1.0), scene.height)
            x = min(max(box.x + jit[0], 0.0), scene.width - w)
            y = min(max(box.y + jit[1], 0.0), scene.height - h)
            return BBox(x, y, w, h)

        for gt in scene.gts:
            if rng.random() < spec.tp_rate[gt.class_id]:
                score = float(np.clip(rng.beta(*spec.tp_score_beta), 1e-6, 1.0))
                dets.append(Detection(gt.class_id, score, jittered(gt.box)))
            if spec.confusion_rate > 0 and rng.random() < spec.confusion_rate:
                wrong = int((gt.class_id + 1 + rng.integers(m - 1)) % m)
                score = float(np.clip(rng.beta(*spec.confusion_score_beta), 1e-6, 1.0))
                dets.append(Detection(wrong, score, jittered(gt.box)))
        for cls, rate in enumerate(spec.fp_per_scene):
            for _ in range(int(rng.poisson(rate))):
                w = float(rng.uniform(0.05, 0.35) * scene.width)
                h = float(rng.uniform(0.05, 0.35) * scene.height)
                x = float(rng.uniform(0.0, scene.width - w))
                y = float(rng.uniform(0.0, scene.height - h))
                score = float(np.clip(rng.beta(*spec.fp_score_beta), 1e-6, 1.0))
                dets.append(Detection(cls, score, BBox(x, y, w, h)))
        out.append(replace(scene, dets=tuple(dets)))
    return out


DESK_CLASSES = ("bed", "pillow", "lamp", "table", "chair", "box")


def _pairwise_tables(base_xy: np.ndarray, log_sizes: np.ndarray, offset_sigma: float, scale_sigma: float):
    m = len(log_sizes)
    offset_mu = base_xy[:, None, :] - base_xy[None, :, :]
    scale_mu = log_sizes[:, None] - log_sizes[None, :]
    return (
        scale_mu,
        np.full((m, m), scale_sigma),
        offset_mu,
        np.full((m, m, 2), offset_sigma),
    )


def default_world(seed: int = 0) -> WorldSpec:
    """Desk-scale world: two loose object groups with informative pairwise
    geometry plus one uninformative clutter class ("box"), on a 64 x 48
    canvas. Boxes co-occur with everything at even odds and sit anywhere
    at any size, so they plant no usable context."""
    vocab = ClassVocab(DESK_CLASSES)
    m = len(vocab)
    box = vocab.index("box")
    q = np.full((m, m), 0.05)
    np.fill_diagonal(q, 1.0)

    def put(a, b, v):
        q[a, b] = q[b, a] = v

    put(0, 1, 0.95)  # bed and pillow
    put(0, 2, 0.70)  # bed and lamp
    put(1, 2, 0.60)
    put(3, 4, 0.90)  # table and chair
    for other in range(m - 1):
        put(box, other, 0.5)

    base_xy = np.array(
        [
            [0.00, 0.10],
            [0.04, -0.02],
            [-0.22, -0.12],
            [0.00, 0.05],
            [0.14, 0.10],
            [0.00, 0.00],
        ]
    )
    log_sizes = np.array([0.0, -0.9, -0.7, -0.15, -0.45, -0.6])
    scale_mu, scale_sigma, offset_mu, offset_sigma = _pairwise_tables(base_xy, log_sizes, 0.04, 0.12)
    offset_sigma[box, :, :] = 0.35
    offset_sigma[:, box, :] = 0.35
    scale_sigma[box, :] = 0.5
    scale_sigma[:, box] = 0.5
    return WorldSpec(
        vocab=vocab,
        cooccur=q,
        scale_mu=scale_mu,
        scale_sigma=scale_sigma,
        offset_mu=offset_mu,
        offset_sigma=offset_sigma,
        objects_per_scene=(3, 7),
        seed=seed,
        anchor_frac=0.22,
    )


def rules_world(seed: int = 0) -> WorldSpec:
    """Fully deterministic structure: all classes always co-occur, each in
    its own narrow spatial band with its own size, so an object's class is
    determined by its geometry relative to the others."""
    vocab = ClassVocab(DESK_CLASSES)
    m = len(vocab)
    q = np.ones((m, m))
    base_xy = np.array(
        [
            [-0.30, 0.24],
            [-0.18, 0.12],
            [-0.06, 0.00],
            [0.06, -0.12],
            [0.18, -0.24],
            [0.30, 0.18],
        ]
    )
    log_sizes = np.array([0.0, -0.2, -0.4, -0.6, -0.8, -1.0])
    scale_mu, scale_sigma, offset_mu, offset_sigma = _pairwise_tables(base_xy, log_sizes, 0.012, 0.04)
    return WorldSpec(
        vocab=vocab,
        cooccur=q,
        scale_mu=scale_mu,
        scale_sigma=scale_sigma,
        offset_mu=offset_mu,
        offset_sigma=offset_sigma,
        objects_per_scene=(6, 6),
        seed=seed,
        anchor_frac=0.18,
    )


def default_detector(n_classes: int = len(DESK_CLASSES)) -> DetectorSpec:
    """Mildly noisy detector: recall 0.85, about one false positive per scene."""
    return DetectorSpec(
        tp_rate=(0.85,) * n_classes,
        fp_per_scene=(1.0 / n_classes,) * n_classes,
        localization_jitter=0.8,
    )


def noisy_detector(n_classes: int = len(DESK_CLASSES)) -> DetectorSpec:
    """Noisy detector: recall 0.7 and about three false positives per scene
    overall, part uniform clutter and part class confusions on real objects."""
    return DetectorSpec(
        tp_rate=(0.7,) * n_classes,
        fp_per_scene=(1.8 / n_classes,) * n_classes,
        localization_jitter=1.0,
        confusion_rate=0.24,
    )


def world_to_dict(world: WorldSpec) -> dict:
    return {
        "vocab": list(world.vocab.names),
        "cooccur": world.cooccur.tolist(),
        "scale_mu": world.scale_mu.tolist(),
        "scale_sigma": world.scale_sigma.tolist(),
        "offset_mu": world.offset_mu.tolist(),
        "offset_sigma": world.offset_sigma.tolist(),
        "objects_per_scene": list(world.objects_per_scene),
        "seed": world.seed,
        "width": world.width,
        "height": world.height,
        "anchor_frac": world.anchor_frac,
        "max_tries": world.max_tries,
    }


def world_from_dict(obj: dict) -> WorldSpec:
    return WorldSpec(
        vocab=ClassVocab(tuple(obj["vocab"])),
        cooccur=np.asarray(obj["cooccur"]),
        scale_mu=np.asarray(obj["scale_mu"]),
        scale_sigma=np.asarray(obj["scale_sigma"]),
        offset_mu=np.asarray(obj["offset_mu"]),
        offset_sigma=np.asarray(obj["offset_sigma"]),
        objects_per_scene=tuple(obj["objects_per_scene"]),
        seed=int(obj.get("seed", 0)),
        width=int(obj.get("width", 64)),
        height=int(obj.get("height", 48)),
        anchor_frac=float(obj.get("anchor_frac", 0.2)),
        max_tries=int(obj.get("max_tries", 1000)),
    )


def detector_to_dict(spec: DetectorSpec) -> dict:
    return {
        "tp_rate": list(spec.tp_rate),
        "fp_per_scene": list(spec.fp_per_scene),
        "tp_score_beta": list(spec.tp_score_beta),
        "fp_score_beta": list(spec.fp_score_beta),
        "localization_jitter": spec.localization_jitter,
        "confusion_rate": spec.confusion_rate,
        "confusion_score_beta": list(spec.confusion_score_beta),
    }


def detector_from_dict(obj: dict) -> DetectorSpec:
    return DetectorSpec(
        tp_rate=tuple(obj["tp_rate"]),
        fp_per_scene=tuple(obj["fp_per_scene"]),
        tp_score_beta=tuple(obj.get("tp_score_beta", (6.0, 2.6))),
        fp_score_beta=tuple(obj.get("fp_score_beta", (2.2, 5.0))),
        localization_jitter=float(obj.get("localization_jitter", 1.0)),
        confusion_rate=float(obj.get("confusion_rate", 0.0)),
        confusion_score_beta=tuple(obj.get("confusion_score_beta", (3.2, 2.8))),
    )


def save_world(path, world: WorldSpec) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(world_to_dict(world), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_world(path) -> WorldSpec:
    with open(path, "r", encoding="utf-8") as fh:
        return world_from_dict(json.load(fh))


def save_detector(path, spec: DetectorSpec) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(detector_to_dict(spec), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_detector(path) -> DetectorSpec:
    with open(path, "r", encoding="utf-8") as fh:
        return detector_from_dict(json.load(fh))
