"""Toy detector adapters: determinism, oracles, and contract checks."""

import numpy as np
import pytest
import torch

from cuefeed.detectors import (
    Detection,
    HoiVocabulary,
    ToyFaceEmbedder,
    ToyGazeDetector,
    ToyHoiDetector,
    ToyImageEmbedder,
    ToyPoseDetector,
    ToySegmenter,
    ToyTextEmbedder,
    soft_argmax_2d,
)
from cuefeed.geometry import crop_bounds

from oracles import np_mean_pool_embed, np_soft_argmax


def rand_image(seed, size=16):
    gen = torch.Generator().manual_seed(seed)
    return torch.rand((3, size, size), generator=gen)


# -- soft argmax ------------------------------------------------------------


@pytest.mark.parametrize("seed", range(5))
def test_soft_argmax_matches_float64_oracle(seed):
    rng = np.random.default_rng(seed)
    values = rng.normal(0, 1, size=(9, 13))
    got = soft_argmax_2d(torch.tensor(values), temperature=0.3)
    want = np_soft_argmax(values, 0.3)
    assert got[0].item() == pytest.approx(want[0], abs=1e-12)
    assert got[1].item() == pytest.approx(want[1], abs=1e-12)


def test_soft_argmax_masked_matches_oracle():
    rng = np.random.default_rng(11)
    values = rng.normal(0, 1, size=(8, 8))
    mask = rng.random((8, 8)) > 0.4
    mask[0, 0] = True  # keep at least one pixel
    got = soft_argmax_2d(torch.tensor(values), 0.2, mask=torch.tensor(mask))
    want = np_soft_argmax(values, 0.2, mask=mask)
    assert got[0].item() == pytest.approx(want[0], abs=1e-12)
    assert got[1].item() == pytest.approx(want[1], abs=1e-12)


def test_soft_argmax_window_offsets_report_parent_frame():
    rng = np.random.default_rng(3)
    values = rng.normal(0, 1, size=(10, 10))
    sub = values[4:9, 2:7]
    got = soft_argmax_2d(
        torch.tensor(sub), 0.1, row_offset=4, col_offset=2, grid_height=10, grid_width=10
    )
    want = np_soft_argmax(sub, 0.1, row_offset=4, col_offset=2, grid_height=10, grid_width=10)
    assert got[0].item() == pytest.approx(want[0], abs=1e-12)
    assert got[1].item() == pytest.approx(want[1], abs=1e-12)


def test_soft_argmax_sharp_peak_hits_pixel_center():
    # one hot pixel and a near-zero temperature: the expectation
    # collapses onto that pixel's center
    size = 10
    values = torch.zeros(size, size)
    r, c = 2, 8  # center (0.85, 0.25)
    values[r, c] = 1.0
    point = soft_argmax_2d(values, temperature=1e-3)
    assert point[0].item() == pytest.approx((c + 0.5) / size, abs=1e-6)
    assert point[1].item() == pytest.approx((r + 0.5) / size, abs=1e-6)


def test_soft_argmax_validation():
    with pytest.raises(ValueError):
        soft_argmax_2d(torch.zeros(3, 3), temperature=0.0)
    with pytest.raises(ValueError):
        soft_argmax_2d(torch.zeros(2, 3, 3))
    with pytest.raises(ValueError):
        soft_argmax_2d(torch.zeros(3, 3), mask=torch.zeros(3, 3, dtype=torch.bool))
    with pytest.raises(ValueError):
        soft_argmax_2d(torch.zeros(3, 3), mask=torch.ones(2, 2, dtype=torch.bool))


# -- face embedder -----------------------------------------------------------


@pytest.mark.parametrize("hw", [(16, 16), (7, 11), (4, 4)])
def test_face_embedder_matches_pooling_oracle(hw):
    gen = torch.Generator().manual_seed(5)
    crop = torch.rand((3, *hw), generator=gen)
    got = ToyFaceEmbedder().embed(crop).numpy()
    want = np_mean_pool_embed(crop.numpy().astype(np.float64))
    assert got.shape == (48,)
    assert np.allclose(got, want, atol=1e-6)


def test_face_embedder_unit_norm_and_determinism():
    crop = rand_image(8)
    a = ToyFaceEmbedder().embed(crop)
    b = ToyFaceEmbedder().embed(crop.clone())
    assert torch.equal(a, b)
    assert torch.linalg.vector_norm(a).item() == pytest.approx(1.0, abs=1e-6)


def test_face_embedder_black_crop_fixed_direction():
    e = ToyFaceEmbedder().embed(torch.zeros(3, 8, 8))
    assert e[0].item() == 1.0 and e[1:].abs().sum().item() == 0.0


# -- gaze detector ------------------------------------------------------------


def test_gaze_detector_finds_red_beacon():
    size = 20
    img = torch.zeros(3, size, size)
    img[0, 15, 15] = 1.0  # red beacon at center (0.775, 0.775)
    head = (0.1, 0.1, 0.3, 0.3)
    (pred,) = ToyGazeDetector(temperature=1e-3).predict(img, [head])
    assert pred.target[0].item() == pytest.approx(15.5 / 20, abs=1e-6)
    assert pred.target[1].item() == pytest.approx(15.5 / 20, abs=1e-6)
    assert torch.linalg.vector_norm(pred.vector).item() == pytest.approx(1.0, abs=1e-6)
    # direction from head center (0.2, 0.2) toward the beacon: both
    # components positive and equal
    assert pred.vector[0].item() == pytest.approx(pred.vector[1].item(), abs=1e-6)
    assert pred.vector[0].item() > 0.5


def test_gaze_detector_ignores_red_inside_head_box():
    size = 20
    img = torch.zeros(3, size, size)
    img[0, 3, 3] = 5.0  # inside the head box; must be masked out
    img[0, 15, 15] = 1.0
    head = (0.1, 0.1, 0.3, 0.3)
    (pred,) = ToyGazeDetector(temperature=1e-3).predict(img, [head])
    assert pred.target[0].item() == pytest.approx(15.5 / 20, abs=1e-6)


def test_gaze_detector_none_when_head_covers_image():
    img = rand_image(3, 8)
    preds = ToyGazeDetector().predict(img, [(0.0, 0.0, 1.0, 1.0)])
    assert preds == [None]


def test_gaze_detector_one_slot_per_head():
    img = rand_image(4, 12)
    boxes = [(0.1, 0.1, 0.4, 0.4), (0.5, 0.5, 0.9, 0.9)]
    preds = ToyGazeDetector().predict(img, boxes)
    assert len(preds) == 2


# -- pose detector -------------------------------------------------------------


def test_pose_detector_recovers_quadrant_beacons():
    size = 16
    crop = torch.zeros(3, size, size)
    # one green beacon per quadrant, quadrant order TL, TR, BL, BR
    spots = [(2, 3), (3, 12), (13, 2), (12, 13)]
    for r, c in spots:
        crop[1, r, c] = 1.0
    kp = ToyPoseDetector(temperature=1e-3).predict(crop)
    assert kp.visible.all()
    for i, (r, c) in enumerate(spots):
        assert kp.coords[i, 0].item() == pytest.approx((c + 0.5) / size, abs=1e-6)
        assert kp.coords[i, 1].item() == pytest.approx((r + 0.5) / size, abs=1e-6)


def test_pose_detector_matches_windowed_oracle():
    crop = rand_image(9, 10)
    kp = ToyPoseDetector(temperature=0.1).predict(crop)
    green = crop[1].numpy().astype(np.float64)
    windows = [(0, 5, 0, 5), (0, 5, 5, 10), (5, 10, 0, 5), (5, 10, 5, 10)]
    for i, (r0, r1, c0, c1) in enumerate(windows):
        want = np_soft_argmax(
            green[r0:r1, c0:c1], 0.1, row_offset=r0, col_offset=c0,
            grid_height=10, grid_width=10,
        )
        assert kp.coords[i, 0].item() == pytest.approx(want[0], abs=1e-6)
        assert kp.coords[i, 1].item() == pytest.approx(want[1], abs=1e-6)


def test_pose_detector_rejects_tiny_crops():
    with pytest.raises(ValueError):
        ToyPoseDetector().predict(torch.zeros(3, 1, 5))


# -- interaction detector --------------------------------------------------------


@pytest.fixture
def small_vocab():
    return HoiVocabulary.from_products(["holding", "riding"], ["cup", "bike"])


def test_hoi_logits_match_linear_oracle(small_vocab):
    det = ToyHoiDetector(small_vocab, seed=3, variance_gate=10.0)
    img = rand_image(21, 12)
    pred = det.predict(img)
    rng = np.random.default_rng(3)
    w = rng.normal(0.0, 2.0, size=(4, 3)).astype(np.float32)
    b = rng.normal(0.0, 0.5, size=4).astype(np.float32)
    mean_rgb = img.mean(dim=(1, 2)).numpy()
    want = w @ mean_rgb + b
    assert np.allclose(pred.logits.numpy(), want, atol=1e-6)


def test_hoi_validity_gate_flips_on_texture(small_vocab):
    det = ToyHoiDetector(small_vocab, variance_gate=0.05)
    flat = torch.full((3, 12, 12), 0.4)
    assert det.predict(flat).valid_mask.all()
    noisy = torch.zeros(3, 12, 12)
    noisy[:, ::2, ::2] = 1.0  # checkerboard: variance well above 0.05
    assert not det.predict(noisy).valid_mask.any()


def test_hoi_detections_ranked_and_capped(small_vocab):
    det = ToyHoiDetector(small_vocab, top_k=3, variance_gate=10.0)
    pred = det.predict(rand_image(30, 10))
    assert len(pred.detections) == 3
    scores = [d.score for d in pred.detections]
    assert scores == sorted(scores, reverse=True)
    for d in pred.detections:
        assert isinstance(d, Detection)
        assert d.box == (0.0, 0.0, 1.0, 1.0)
        logit = pred.logits[d.class_id].item()
        assert d.score == pytest.approx(1.0 / (1.0 + np.exp(-logit)), abs=1e-6)


def test_hoi_detector_seed_controls_weights(small_vocab):
    img = rand_image(7, 10)
    a = ToyHoiDetector(small_vocab, seed=0).predict(img).logits
    b = ToyHoiDetector(small_vocab, seed=0).predict(img).logits
    c = ToyHoiDetector(small_vocab, seed=1).predict(img).logits
    assert torch.equal(a, b)
    assert not torch.equal(a, c)


def test_hoi_detector_validation(small_vocab):
    with pytest.raises(ValueError):
        ToyHoiDetector(small_vocab, variance_gate=0.0)


# -- vocabulary -----------------------------------------------------------------


def test_vocabulary_product_order():
    vocab = HoiVocabulary.from_products(["hold", "ride"], ["cup", "bike"])
    assert vocab.pairs == (
        ("hold", "cup"),
        ("hold", "bike"),
        ("ride", "cup"),
        ("ride", "bike"),
    )
    assert len(vocab) == 4
    assert vocab.id_of("ride", "cup") == 2
    assert vocab.pair_of(1) == ("hold", "bike")
    assert ("ride", "bike") in vocab and ("eat", "cup") not in vocab


def test_vocabulary_validation():
    with pytest.raises(ValueError):
        HoiVocabulary(pairs=(("a", "b"), ("a", "b")))
    with pytest.raises(ValueError):
        HoiVocabulary(pairs=())
    with pytest.raises(KeyError):
        HoiVocabulary(pairs=(("a", "b"),)).id_of("x", "y")


# -- segmenter --------------------------------------------------------------------


def test_segmenter_fills_box_windows():
    img = rand_image(2, 20)
    boxes = [(0.1, 0.2, 0.5, 0.6), (0.6, 0.6, 0.9, 0.9)]
    masks = ToySegmenter().masks(img, boxes)
    assert len(masks) == 2
    for box, mask in zip(boxes, masks):
        y0, y1, x0, x1 = crop_bounds(box, 20, 20)
        inside = mask[y0:y1, x0:x1]
        assert inside.min().item() == 1.0
        assert mask.sum().item() == inside.numel()


# -- text / image embedders --------------------------------------------------------


def test_text_embedder_bag_of_tokens_semantics():
    emb = ToyTextEmbedder()
    a = emb.embed_text("a person holding a cup")
    b = emb.embed_text("cup a holding person a")  # order must not matter
    assert torch.allclose(a, b, atol=1e-6)
    c = emb.embed_text("Hello, World!")
    d = emb.embed_text("hello world")
    assert torch.allclose(c, d, atol=1e-6)
    assert torch.linalg.vector_norm(a).item() == pytest.approx(1.0, abs=1e-6)


def test_text_embedder_empty_and_seed():
    emb = ToyTextEmbedder()
    e = emb.embed_text("   ")
    assert e[0].item() == 1.0 and e[1:].abs().sum().item() == 0.0
    other = ToyTextEmbedder(seed=9).embed_text("a person")
    assert not torch.allclose(emb.embed_text("a person"), other)


def test_image_embedder_contract():
    img = rand_image(14, 12)
    emb = ToyImageEmbedder(dim=24, seed=2)
    a = emb.embed_image(img)
    b = emb.embed_image(img.clone())
    assert a.shape == (24,)
    assert torch.equal(a, b)
    assert torch.linalg.vector_norm(a).item() == pytest.approx(1.0, abs=1e-6)
    other_space = ToyImageEmbedder(dim=24, seed=3).embed_image(img)
    assert not torch.allclose(a, other_space)
    black = emb.embed_image(torch.zeros(3, 12, 12))
    assert black[0].item() == 1.0
