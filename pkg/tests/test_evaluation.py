"""Metrics: label-matched mAP, greedy identity similarity, gaze accuracy."""

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cuefeed.detectors import (
    ToyFaceEmbedder,
    ToyGazeDetector,
    ToyHoiDetector,
    ToyImageEmbedder,
    ToyTextEmbedder,
)
from cuefeed.evaluation import (
    GazeCase,
    RankedDetection,
    _average_precision,
    _mean_cosine,
    alignment_scores,
    evaluate_generations,
    gaze_accuracy,
    greedy_identity_matches,
    greedy_identity_similarity,
    interaction_map,
    rare_classes_from_counts,
    resolve_gaze_case,
)

from oracles import (
    oracle_gaze_accuracy,
    oracle_greedy_pairs,
    oracle_greedy_similarity,
    oracle_interaction_map,
)


# -- mAP -----------------------------------------------------------------------


def test_ap_perfect_ranking_is_one():
    assert _average_precision(np.array([1.0, 1.0]), np.array([0.0, 0.0]), 2) == 1.0


def test_ap_hand_case():
    # hits at ranks 1 and 3 with two instances:
    # AP = 0.5 * 1.0 + 0.5 * (2/3)
    tp = np.array([1.0, 0.0, 1.0])
    fp = np.array([0.0, 1.0, 0.0])
    assert _average_precision(tp, fp, 2) == pytest.approx(0.5 + 0.5 * 2 / 3, rel=1e-12)


def test_ap_validation():
    with pytest.raises(ValueError):
        _average_precision(np.array([1.0]), np.array([0.0]), 0)
    assert _average_precision(np.zeros(0), np.zeros(0), 3) == 0.0


def test_interaction_map_single_class_duplicates():
    # second detection in the same image is a false positive
    dets = [
        RankedDetection(0, 0, 0.9),
        RankedDetection(0, 0, 0.8),
        RankedDetection(1, 0, 0.7),
    ]
    report = interaction_map(dets, {0: [0], 1: [0]}, num_classes=1)
    # flags T,F,T with 2 gt: same as the hand case above
    assert report.full == pytest.approx(0.5 + 0.5 * 2 / 3, rel=1e-12)
    assert report.skipped_classes == []


def test_interaction_map_score_tie_breaks_by_image_id():
    # equal scores rank the lower image id first; ground truth lives in
    # image 1, so the miss in image 0 lands ahead of the hit
    dets = [RankedDetection(1, 0, 0.5), RankedDetection(0, 0, 0.5)]
    report = interaction_map(dets, {0: [], 1: [0]}, num_classes=1)
    assert report.full == 0.5


def test_interaction_map_skips_and_reports_empty_classes():
    dets = [RankedDetection(0, 0, 0.9)]
    report = interaction_map(dets, {0: [0]}, num_classes=3)
    assert report.full == 1.0
    assert report.skipped_classes == [1, 2]
    assert set(report.per_class) == {0}


def test_interaction_map_rare_split():
    dets = [RankedDetection(0, 0, 0.9), RankedDetection(0, 1, 0.1)]
    report = interaction_map(
        dets, {0: [0], 1: [1]}, num_classes=2, rare=frozenset({1})
    )
    assert report.rare == report.per_class[1]
    assert report.nonrare == report.per_class[0]
    no_rare = interaction_map(dets, {0: [0], 1: [1]}, num_classes=2)
    assert no_rare.rare is None
    assert no_rare.nonrare == no_rare.full


def test_interaction_map_requires_some_ground_truth():
    with pytest.raises(ValueError):
        interaction_map([], {0: []}, num_classes=2)


def test_interaction_map_class_range_validation():
    with pytest.raises(ValueError):
        interaction_map([], {0: [5]}, num_classes=2)
    with pytest.raises(ValueError):
        interaction_map([RankedDetection(0, 2, 0.5)], {0: [0]}, num_classes=2)


def test_interaction_map_order_invariant(rng):
    dets = [
        RankedDetection(int(rng.integers(0, 4)), int(rng.integers(0, 3)), float(s))
        for s in rng.choice([0.1, 0.3, 0.5, 0.7, 0.9], size=30)
    ]
    gt = {i: list(rng.choice(3, size=rng.integers(0, 3), replace=False)) for i in range(4)}
    gt[0] = [0]  # keep at least one class scored
    base = interaction_map(dets, gt, num_classes=3)
    perm = [dets[i] for i in rng.permutation(len(dets))]
    again = interaction_map(perm, gt, num_classes=3)
    assert again.full == base.full
    assert again.per_class == base.per_class


def test_interaction_map_matches_oracle(rng):
    for _ in range(100):
        num_classes = int(rng.integers(1, 4))
        num_images = int(rng.integers(1, 5))
        gt = {
            img: set(rng.choice(num_classes, size=rng.integers(0, num_classes + 1), replace=False))
            for img in range(num_images)
        }
        if not any(gt.values()):
            gt[0] = {0}
        dets = [
            RankedDetection(
                int(rng.integers(0, num_images)),
                int(rng.integers(0, num_classes)),
                float(rng.choice([0.2, 0.4, 0.6, 0.8])),
            )
            for _ in range(rng.integers(0, 12))
        ]
        report = interaction_map(dets, gt, num_classes)
        want = oracle_interaction_map(
            [(d.image_id, d.class_id, d.score) for d in dets], gt, num_classes
        )
        assert report.full == want["full"]
        assert report.per_class == want["per_class"]
        assert report.skipped_classes == want["skipped"]


def test_rare_classes_from_counts():
    counts = {0: 5, 1: 12, 2: 0, 3: 9, 4: 10}
    assert rare_classes_from_counts(counts) == frozenset({0, 3})
    assert rare_classes_from_counts(counts, threshold=6) == frozenset({0})


# -- identity ---------------------------------------------------------------------


def test_greedy_matches_worked_example():
    sim = np.array([[0.9, 0.2], [0.8, 0.7]])
    pairs = greedy_identity_matches(sim)
    assert pairs == [(0, 0), (1, 1)]
    assert np.mean([sim[i, j] for i, j in pairs]) == pytest.approx(0.8, abs=1e-12)


def test_greedy_matches_off_diagonal_first():
    pairs = greedy_identity_matches(np.array([[0.2, 0.9], [0.7, 0.8]]))
    assert pairs == [(0, 1), (1, 0)]


def test_greedy_matches_tie_breaks_row_major():
    pairs = greedy_identity_matches(np.full((2, 2), 0.5))
    assert pairs == [(0, 0), (1, 1)]


def test_greedy_matches_rectangular():
    assert len(greedy_identity_matches(np.zeros((3, 1)))) == 1
    assert len(greedy_identity_matches(np.zeros((1, 4)))) == 1


def test_greedy_matches_requires_matrix():
    with pytest.raises(ValueError):
        greedy_identity_matches(np.zeros(4))


def test_greedy_similarity_pools_pairs_globally():
    # one perfect pair in image 0, two orthogonal pairs in image 1:
    # the mean runs over the three pairs, not over per-image averages
    ref = [[[1.0, 0.0]], [[1.0, 0.0], [1.0, 0.0]]]
    gen = [[[1.0, 0.0]], [[0.0, 1.0], [0.0, 1.0]]]
    assert greedy_identity_similarity(ref, gen) == pytest.approx(1 / 3, rel=1e-12)


def test_greedy_similarity_normalizes_scale():
    ref = [[[2.0, 0.0]]]
    gen = [[[0.5, 0.0]]]
    assert greedy_identity_similarity(ref, gen) == pytest.approx(1.0, rel=1e-12)


def test_greedy_similarity_skips_empty_images():
    ref = [[], [[1.0, 0.0]]]
    gen = [[[1.0, 0.0]], []]
    assert greedy_identity_similarity(ref, gen) is None
    ref = [[], [[1.0, 0.0]]]
    gen = [[], [[1.0, 0.0]]]
    assert greedy_identity_similarity(ref, gen) == pytest.approx(1.0, rel=1e-12)


def test_greedy_similarity_length_mismatch():
    with pytest.raises(ValueError):
        greedy_identity_similarity([[]], [[], []])


def test_greedy_similarity_matches_oracle(rng):
    for _ in range(100):
        per_image_sims = []
        ref_sets = []
        gen_sets = []
        for _ in range(int(rng.integers(1, 5))):
            n_ref = int(rng.integers(0, 4))
            n_gen = int(rng.integers(0, 4))
            dim = 6
            refs = rng.normal(size=(n_ref, dim))
            gens = rng.normal(size=(n_gen, dim))
            ref_sets.append(list(refs))
            gen_sets.append(list(gens))
            if n_ref and n_gen:
                ru = refs / np.maximum(
                    np.linalg.norm(refs, axis=1, keepdims=True), 1e-12
                )
                gu = gens / np.maximum(
                    np.linalg.norm(gens, axis=1, keepdims=True), 1e-12
                )
                per_image_sims.append(ru @ gu.T)
        got = greedy_identity_similarity(ref_sets, gen_sets)
        want = oracle_greedy_similarity(per_image_sims)
        assert got == want


@given(
    st.integers(2, 4),
    st.integers(2, 4),
    st.integers(0, 2**32 - 1),
)
def test_greedy_matches_agree_with_scan_oracle(n_ref, n_gen, seed):
    sim = np.random.default_rng(seed).choice([0.0, 0.25, 0.5, 0.75], size=(n_ref, n_gen))
    assert greedy_identity_matches(sim) == oracle_greedy_pairs(sim)


# -- gaze -------------------------------------------------------------------------


def box_case(**kw):
    base = dict(
        gt_target=(0.5, 0.5),
        pred_target=(0.5, 0.5),
        ref_boxes=[("ball", (0.4, 0.4, 0.6, 0.6))],
        gen_boxes=[("ball", (0.4, 0.4, 0.6, 0.6))],
    )
    base.update(kw)
    return GazeCase(**base)


def test_gaze_case_outcomes():
    assert resolve_gaze_case(box_case()) == "correct"
    assert resolve_gaze_case(box_case(pred_target=(0.9, 0.9))) == "incorrect"
    assert resolve_gaze_case(box_case(pred_target=None)) == "incorrect"
    assert resolve_gaze_case(box_case(gt_target=(0.95, 0.95))) == "excluded"


def test_gaze_smallest_containing_box_wins():
    case = box_case(
        ref_boxes=[
            ("person", (0.0, 0.0, 1.0, 1.0)),
            ("ball", (0.4, 0.4, 0.6, 0.6)),
        ],
        gen_boxes=[("person", (0.0, 0.0, 1.0, 1.0)), ("ball", (0.8, 0.8, 0.9, 0.9))],
        pred_target=(0.85, 0.85),
    )
    # the target sits in both boxes; the smaller ball box sets the label,
    # so only the generated ball box scores the prediction
    assert resolve_gaze_case(case) == "correct"
    case.pred_target = (0.5, 0.5)  # inside person, outside ball
    assert resolve_gaze_case(case) == "incorrect"


def test_gaze_area_tie_prefers_lower_index():
    case = box_case(
        ref_boxes=[
            ("cart", (0.4, 0.4, 0.6, 0.6)),
            ("ball", (0.4, 0.4, 0.6, 0.6)),
        ],
        gen_boxes=[("cart", (0.0, 0.0, 0.2, 0.2)), ("ball", (0.4, 0.4, 0.6, 0.6))],
        pred_target=(0.1, 0.1),
    )
    assert resolve_gaze_case(case) == "correct"


def test_gaze_box_edges_count_as_inside():
    assert resolve_gaze_case(box_case(pred_target=(0.4, 0.6))) == "correct"
    assert resolve_gaze_case(box_case(gt_target=(0.6, 0.6))) == "correct"


def test_gaze_accuracy_worked_tally():
    cases = (
        [box_case() for _ in range(6)]
        + [box_case(pred_target=(0.0, 0.0)) for _ in range(2)]
        + [box_case(gt_target=(0.0, 0.0)) for _ in range(2)]
    )
    report = gaze_accuracy(cases)
    assert report.accuracy == 75.0
    assert (report.correct, report.incorrect, report.excluded) == (6, 2, 2)


def test_gaze_accuracy_all_excluded_is_none():
    report = gaze_accuracy([box_case(gt_target=(0.0, 0.0))])
    assert report.accuracy is None
    assert report.excluded == 1


def test_gaze_accuracy_matches_oracle(rng):
    labels = ["person", "ball", "box"]
    for _ in range(100):
        cases = []
        raw = []
        for _ in range(int(rng.integers(1, 6))):
            def boxes():
                out = []
                for _ in range(int(rng.integers(0, 4))):
                    x0, y0 = rng.uniform(0, 0.6, size=2)
                    out.append(
                        (
                            labels[int(rng.integers(0, 3))],
                            (x0, y0, x0 + rng.uniform(0.1, 0.4), y0 + rng.uniform(0.1, 0.4)),
                        )
                    )
                return out

            case = dict(
                gt_target=tuple(rng.uniform(0, 1, size=2)),
                pred_target=None
                if rng.uniform() < 0.2
                else tuple(rng.uniform(0, 1, size=2)),
                ref_boxes=boxes(),
                gen_boxes=boxes(),
            )
            raw.append(case)
            cases.append(GazeCase(**case))
        report = gaze_accuracy(cases)
        acc, correct, incorrect, excluded = oracle_gaze_accuracy(raw)
        assert (report.correct, report.incorrect, report.excluded) == (
            correct,
            incorrect,
            excluded,
        )
        assert report.accuracy == acc


# -- alignment -----------------------------------------------------------------


def test_mean_cosine_identical_rows_is_exactly_one():
    rows = [np.array([0.3, 0.4, 1.2]), np.array([-1.0, 2.0, 0.5])]
    assert _mean_cosine(rows, [r.copy() for r in rows]) == 1.0


def test_mean_cosine_orthogonal_rows():
    assert _mean_cosine([[1.0, 0.0]], [[0.0, 1.0]]) == pytest.approx(0.0, abs=1e-15)


def test_alignment_scores_self_comparison(bank):
    images = [img for img, _ in bank[:3]]
    prompts = [ann.caption for _, ann in bank[:3]]
    scores = alignment_scores(
        images,
        images,
        prompts,
        text_embedder=ToyTextEmbedder(dim=32),
        image_embedder=ToyImageEmbedder(dim=32, seed=1),
        feature_embedder=ToyImageEmbedder(dim=32, seed=2),
    )
    assert scores.image_image == 1.0
    assert scores.feature == 1.0
    assert -1.0 <= scores.text_image <= 1.0
    d = scores.to_dict()
    assert set(d) == {"text_image", "image_image", "feature"}


def test_alignment_scores_validation(bank):
    emb = ToyImageEmbedder()
    with pytest.raises(ValueError):
        alignment_scores([bank[0][0]], [], [], ToyTextEmbedder(), emb, emb)
    with pytest.raises(ValueError):
        alignment_scores([], [], [], ToyTextEmbedder(), emb, emb)


# -- end to end -------------------------------------------------------------------


def test_evaluate_generations_on_perfect_copies(samples, vocab):
    pairs = [(s, s.image.clone()) for s in samples]
    report = evaluate_generations(
        pairs,
        face_embedder=ToyFaceEmbedder(),
        gaze_detector=ToyGazeDetector(),
        hoi_detector=ToyHoiDetector(vocab),
        num_classes=len(vocab),
    )
    assert report.images == len(samples)
    # identical crops embed identically, so every matched pair is exact
    assert report.identity == pytest.approx(1.0, abs=1e-9)
    assert report.interaction is not None
    assert 0.0 <= report.interaction.full <= 1.0
    total_gaze = sum(len(s.gaze) for s in samples)
    g = report.gaze
    assert g.correct + g.incorrect + g.excluded == total_gaze
    assert g.correct > 0

    d = report.to_dict()
    assert d["images"] == len(samples)
    assert isinstance(d["interaction"]["per_class"], dict)
    text = report.render_text()
    assert "interaction mAP" in text and "gaze accuracy" in text
    assert report.to_json().startswith("{")


def test_evaluate_generations_box_detector_hook(samples, vocab):
    pairs = [(s, s.image.clone()) for s in samples]
    report = evaluate_generations(
        pairs,
        face_embedder=ToyFaceEmbedder(),
        gaze_detector=ToyGazeDetector(),
        hoi_detector=ToyHoiDetector(vocab),
        num_classes=len(vocab),
        box_detector=lambda image, names: [],
    )
    # with no generated boxes every scored gaze case misses
    assert report.gaze.correct == 0
    assert report.gaze.incorrect > 0
