"""Evaluation metrics over generated/reference image pairs.

All metrics here are label-based: an interaction detection matches
ground truth when its class is present in the image (each image carries
at most one ground-truth instance per class), identity matching is
greedy on cosine similarity, and a gaze prediction counts as correct
when the predicted point lands in any generated-image box that shares
the ground-truth target's class label. Everything aggregates in plain
numpy; results are invariant to the ordering of detections and images.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from .geometry import box_area, point_in_box


class RankedDetection(NamedTuple):
    image_id: int
    class_id: int
    score: float


def _average_precision(tp: np.ndarray, fp: np.ndarray, num_gt: int) -> float:
    """All-point interpolated AP from per-detection TP/FP flags (ranked)."""
    if num_gt <= 0:
        raise ValueError("AP undefined without ground truth")
    if tp.size == 0:
        return 0.0
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(fp)
    recall = tp_cum / num_gt
    precision = tp_cum / np.maximum(tp_cum + fp_cum, 1e-12)
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(mpre.size - 1, 0, -1):
        mpre[i - 1] = max(mpre[i - 1], mpre[i])
    idx = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


@dataclass
class MapReport:
    full: float
    rare: float | None
    nonrare: float | None
    per_class: dict = field(default_factory=dict)
    skipped_classes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "full": self.full,
            "rare": self.rare,
            "nonrare": self.nonrare,
            "per_class": {int(k): v for k, v in self.per_class.items()},
            "skipped_classes": [int(c) for c in self.skipped_classes],
        }


def rare_classes_from_counts(counts: Mapping[int, int], threshold: int = 10) -> frozenset:
    """Classes observed at least once but fewer than ``threshold`` times."""
    return frozenset(c for c, n in counts.items() if 0 < n < threshold)


def interaction_map(
    detections: Sequence[RankedDetection],
    ground_truth: Mapping[int, Iterable[int]],
    num_classes: int,
    rare: frozenset = frozenset(),
) -> MapReport:
    """Mean AP over interaction classes, matched by label only.

    ``ground_truth`` maps image id -> class ids present (one instance
    each). For a class, detections are ranked by (-score, image_id);
    the first detection in an image holding that class is the true
    positive, every further one a false positive. Classes with no
    ground truth anywhere are excluded from the mean and reported.
    """
    gt_sets = {img: frozenset(int(c) for c in classes) for img, classes in ground_truth.items()}
    num_gt = np.zeros(num_classes, dtype=np.int64)
    for classes in gt_sets.values():
        for c in classes:
            if not 0 <= c < num_classes:
                raise ValueError(f"ground-truth class {c} outside [0, {num_classes})")
            num_gt[c] += 1
    by_class: dict[int, list[RankedDetection]] = {c: [] for c in range(num_classes)}
    for det in detections:
        if not 0 <= det.class_id < num_classes:
            raise ValueError(f"detection class {det.class_id} outside [0, {num_classes})")
        by_class[det.class_id].append(det)

    per_class: dict[int, float] = {}
    skipped: list[int] = []
    for c in range(num_classes):
        if num_gt[c] == 0:
            skipped.append(c)
            continue
        dets = sorted(by_class[c], key=lambda d: (-d.score, d.image_id))
        tp = np.zeros(len(dets))
        fp = np.zeros(len(dets))
        claimed: set[int] = set()
        for i, det in enumerate(dets):
            if c in gt_sets.get(det.image_id, frozenset()) and det.image_id not in claimed:
                tp[i] = 1.0
                claimed.add(det.image_id)
            else:
                fp[i] = 1.0
        per_class[c] = _average_precision(tp, fp, int(num_gt[c]))

    if not per_class:
        raise ValueError("no class has ground truth; mAP undefined")
    full = float(np.mean(list(per_class.values())))
    rare_aps = [ap for c, ap in per_class.items() if c in rare]
    nonrare_aps = [ap for c, ap in per_class.items() if c not in rare]
    return MapReport(
        full=full,
        rare=float(np.mean(rare_aps)) if rare_aps else None,
        nonrare=float(np.mean(nonrare_aps)) if nonrare_aps else None,
        per_class=per_class,
        skipped_classes=skipped,
    )


# ---------------------------------------------------------------------------
# identity


def _unit_rows(vectors: Sequence) -> np.ndarray:
    arr = np.stack([np.asarray(v, dtype=np.float64).reshape(-1) for v in vectors])
    return arr / np.maximum(np.linalg.norm(arr, axis=1, keepdims=True), 1e-12)


def greedy_identity_matches(similarity: np.ndarray) -> list[tuple[int, int]]:
    """Greedy one-to-one matching on a (ref x gen) similarity matrix.

    Repeatedly takes the globally best remaining pair; ties resolve to
    the lowest reference index, then the lowest generated index.
    """
    sim = np.array(similarity, dtype=np.float64, copy=True)
    if sim.ndim != 2:
        raise ValueError("similarity must be a 2-d matrix")
    n_ref, n_gen = sim.shape
    pairs: list[tuple[int, int]] = []
    for _ in range(min(n_ref, n_gen)):
        flat = np.argmax(sim)  # argmax scans row-major: lowest ref, then gen, wins ties
        i, j = divmod(int(flat), n_gen)
        pairs.append((i, j))
        sim[i, :] = -np.inf
        sim[:, j] = -np.inf
    return pairs


def greedy_identity_similarity(
    ref_embeddings: Sequence[Sequence], gen_embeddings: Sequence[Sequence]
) -> float | None:
    """Mean cosine similarity of greedily matched identity embeddings.

    Takes one list of embeddings per image on each side; matching runs
    within each image, the mean pools every matched pair across all
    images. Images with no faces on either side contribute no pairs;
    surplus faces on the larger side of an image are ignored. None when
    nothing matched anywhere.
    """
    if len(ref_embeddings) != len(gen_embeddings):
        raise ValueError("need the same number of images on both sides")
    matched: list[float] = []
    for refs, gens in zip(ref_embeddings, gen_embeddings):
        if not len(refs) or not len(gens):
            continue
        ref = _unit_rows(refs)
        gen = _unit_rows(gens)
        sim = ref @ gen.T
        for i, j in greedy_identity_matches(sim):
            matched.append(float(sim[i, j]))
    if not matched:
        return None
    return float(np.mean(matched))


# ---------------------------------------------------------------------------
# gaze


@dataclass
class GazeCase:
    gt_target: tuple
    pred_target: tuple | None
    ref_boxes: list  # [(label, box)] in the reference image
    gen_boxes: list  # [(label, box)] in the generated image


def resolve_gaze_case(case: GazeCase) -> str:
    """Classify one gaze instance as correct / incorrect / excluded.

    The ground-truth target takes the label of the smallest reference
    box containing it (no containing box excludes the case). The
    prediction is correct when it falls inside any generated box with
    that label; box edges count as inside.
    """
    containing = [
        (box_area(box), idx, label)
        for idx, (label, box) in enumerate(case.ref_boxes)
        if point_in_box(case.gt_target, box)
    ]
    if not containing:
        return "excluded"
    _, _, target_label = min(containing)
    if case.pred_target is None:
        return "incorrect"
    for label, box in case.gen_boxes:
        if label == target_label and point_in_box(case.pred_target, box):
            return "correct"
    return "incorrect"


@dataclass
class GazeReport:
    accuracy: float | None
    correct: int
    incorrect: int
    excluded: int

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "correct": self.correct,
            "incorrect": self.incorrect,
            "excluded": self.excluded,
        }


def gaze_accuracy(cases: Iterable[GazeCase]) -> GazeReport:
    """Percentage of scored gaze cases whose prediction hits the target's box."""
    correct = incorrect = excluded = 0
    for case in cases:
        outcome = resolve_gaze_case(case)
        if outcome == "correct":
            correct += 1
        elif outcome == "incorrect":
            incorrect += 1
        else:
            excluded += 1
    scored = correct + incorrect
    pct = 100.0 * correct / scored if scored else None
    return GazeReport(accuracy=pct, correct=correct, incorrect=incorrect, excluded=excluded)


# ---------------------------------------------------------------------------
# alignment


@dataclass
class AlignmentScores:
    text_image: float
    image_image: float
    feature: float

    def to_dict(self) -> dict:
        return {
            "text_image": self.text_image,
            "image_image": self.image_image,
            "feature": self.feature,
        }


def _mean_cosine(a: Sequence, b: Sequence) -> float:
    ar = _unit_rows(a)
    br = _unit_rows(b)
    # 1 - half squared distance: exactly 1.0 for bitwise-equal unit rows
    sims = 1.0 - 0.5 * np.sum((ar - br) ** 2, axis=1)
    return float(np.mean(sims))


def alignment_scores(
    gen_images: Sequence,
    ref_images: Sequence,
    prompts: Sequence[str],
    text_embedder,
    image_embedder,
    feature_embedder,
) -> AlignmentScores:
    """Prompt/appearance/feature alignment as mean pairwise cosines.

    text_image pairs each prompt's text embedding with its generated
    image's embedding (the text and image embedders must share a
    space); image_image and feature compare generated to reference
    images under the two image embedders.
    """
    if not (len(gen_images) == len(ref_images) == len(prompts)):
        raise ValueError(
            f"mismatched lengths: {len(gen_images)} generated, "
            f"{len(ref_images)} reference, {len(prompts)} prompts"
        )
    if not gen_images:
        raise ValueError("nothing to score")
    text_emb = [text_embedder.embed_text(p).numpy() for p in prompts]
    gen_img_emb = [image_embedder.embed_image(g).numpy() for g in gen_images]
    ref_img_emb = [image_embedder.embed_image(r).numpy() for r in ref_images]
    gen_feat = [feature_embedder.embed_image(g).numpy() for g in gen_images]
    ref_feat = [feature_embedder.embed_image(r).numpy() for r in ref_images]
    return AlignmentScores(
        text_image=_mean_cosine(text_emb, gen_img_emb),
        image_image=_mean_cosine(ref_img_emb, gen_img_emb),
        feature=_mean_cosine(ref_feat, gen_feat),
    )


# ---------------------------------------------------------------------------
# report + harness


@dataclass
class EvalReport:
    interaction: MapReport | None
    identity: float | None
    gaze: GazeReport
    images: int

    def to_dict(self) -> dict:
        return {
            "images": self.images,
            "interaction": self.interaction.to_dict() if self.interaction else None,
            "identity": self.identity,
            "gaze": self.gaze.to_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def render_text(self) -> str:
        lines = [f"images evaluated      {self.images}"]
        if self.interaction is not None:
            lines.append(f"interaction mAP       {self.interaction.full:.4f}")
            if self.interaction.rare is not None:
                lines.append(f"  rare classes        {self.interaction.rare:.4f}")
            if self.interaction.nonrare is not None:
                lines.append(f"  non-rare classes    {self.interaction.nonrare:.4f}")
            if self.interaction.skipped_classes:
                lines.append(
                    f"  classes w/o truth   {len(self.interaction.skipped_classes)} skipped"
                )
        ident = "n/a" if self.identity is None else f"{self.identity:.4f}"
        lines.append(f"identity similarity   {ident}")
        acc = "n/a" if self.gaze.accuracy is None else f"{self.gaze.accuracy:.1f}%"
        lines.append(f"gaze accuracy         {acc}")
        lines.append(
            f"  gaze cases          {self.gaze.correct} correct, "
            f"{self.gaze.incorrect} incorrect, {self.gaze.excluded} excluded"
        )
        return "\n".join(lines)


def evaluate_generations(
    pairs: Sequence[tuple],
    face_embedder,
    gaze_detector,
    hoi_detector,
    num_classes: int,
    box_detector=None,
    rare_threshold: int = 10,
) -> EvalReport:
    """Score (reference sample, generated image) pairs with the toy stack.

    Identity embeddings are taken at the reference face boxes in both
    images. Gaze predictions come from the gaze detector run on the
    generated image with ground-truth head boxes; target labels resolve
    against reference annotation boxes. Generated-image boxes default
    to the reference annotation boxes (the toy protocol); pass
    ``box_detector(image, names) -> [(label, box)]`` to detect them
    instead. Interaction detections come from the detector's ranked
    output per generated image.
    """
    import torch

    from .geometry import crop_bounds

    detections: list[RankedDetection] = []
    ground_truth: dict[int, list[int]] = {}
    gt_counts: dict[int, int] = {}
    ref_face_sets: list[list] = []
    gen_face_sets: list[list] = []
    gaze_cases: list[GazeCase] = []

    for image_id, (sample, gen) in enumerate(pairs):
        gen = torch.as_tensor(gen)
        h, w = gen.shape[-2:]
        ground_truth[image_id] = list(dict.fromkeys(sample.interactions))
        for c in ground_truth[image_id]:
            gt_counts[c] = gt_counts.get(c, 0) + 1

        pred = hoi_detector.predict(gen)
        for det in pred.detections:
            detections.append(RankedDetection(image_id, int(det.class_id), float(det.score)))

        face_boxes = sample.face_boxes()
        ref_emb = []
        gen_emb = []
        for box in face_boxes:
            y0, y1, x0, x1 = crop_bounds(box, *sample.image.shape[-2:])
            ref_emb.append(face_embedder.embed(sample.image[:, y0:y1, x0:x1]).numpy())
            y0, y1, x0, x1 = crop_bounds(box, h, w)
            gen_emb.append(face_embedder.embed(gen[:, y0:y1, x0:x1]).numpy())
        ref_face_sets.append(ref_emb)
        gen_face_sets.append(gen_emb)

        if sample.gaze:
            ref_boxes = [(s.name, s.box) for s in sample.subjects]
            if box_detector is None:
                gen_boxes = list(ref_boxes)
            else:
                gen_boxes = box_detector(gen, [s.name for s in sample.subjects])
            preds = gaze_detector.predict(gen, [g.head_box for g in sample.gaze])
            for inst, p in zip(sample.gaze, preds):
                gaze_cases.append(
                    GazeCase(
                        gt_target=inst.target,
                        pred_target=None if p is None else tuple(float(v) for v in p.target),
                        ref_boxes=ref_boxes,
                        gen_boxes=gen_boxes,
                    )
                )

    interaction = None
    if any(ground_truth.values()):
        rare = rare_classes_from_counts(gt_counts, threshold=rare_threshold)
        interaction = interaction_map(detections, ground_truth, num_classes, rare=rare)
    identity = greedy_identity_similarity(ref_face_sets, gen_face_sets)
    return EvalReport(
        interaction=interaction,
        identity=identity,
        gaze=gaze_accuracy(gaze_cases),
        images=len(pairs),
    )
