"""Detector adapter contracts and deterministic, differentiable toys.

Production detectors (a face embedder, a gaze predictor, a keypoint
detector, an interaction classifier, a segmenter) are abstracted behind
small adapter classes; the toys below implement the same contracts with
closed-form differentiable operations, so gradient flow through every
feedback loss can be checked against finite differences and desk-scale
training runs end to end without any pretrained weights.

All toys are pure: same input, same output, no RNG consumed at predict
time (seeds only fix constants at construction).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .geometry import Box, box_center, crop_bounds, validate_box
from .losses import KeypointSet

# Cosine threshold a production face verifier would use; the toy
# embedder is far more concentrated, hence its own higher threshold.
REAL_FACE_MATCH_THRESHOLD = 0.32
TOY_FACE_MATCH_THRESHOLD = 0.9

DEFAULT_SOFT_ARGMAX_TEMPERATURE = 0.05


@dataclass
class GazePrediction:
    """Predicted gaze for one head: target point and unit direction."""

    target: torch.Tensor  # (2,) x, y in [0, 1]
    vector: torch.Tensor  # (2,) unit


@dataclass
class Detection:
    class_id: int
    score: float
    box: Box


@dataclass
class HoiPrediction:
    """Interaction classifier output for one image."""

    logits: torch.Tensor  # (num_classes,)
    valid_mask: torch.Tensor  # (num_classes,) bool: classes the prior trusts
    detections: list[Detection] = field(default_factory=list)


@dataclass(frozen=True)
class HoiVocabulary:
    """Ordered (verb, object) pairs; index in the tuple is the class id."""

    pairs: tuple[tuple[str, str], ...]

    def __post_init__(self):
        if len(set(self.pairs)) != len(self.pairs):
            raise ValueError("duplicate (verb, object) pairs in vocabulary")
        if not self.pairs:
            raise ValueError("vocabulary must not be empty")

    def __len__(self) -> int:
        return len(self.pairs)

    def __contains__(self, pair) -> bool:
        return tuple(pair) in self.pairs

    def id_of(self, verb: str, obj: str) -> int:
        try:
            return self.pairs.index((verb, obj))
        except ValueError:
            raise KeyError(f"unknown interaction ({verb!r}, {obj!r})") from None

    def pair_of(self, class_id: int) -> tuple[str, str]:
        return self.pairs[class_id]

    @classmethod
    def from_products(cls, verbs: Sequence[str], objects: Sequence[str]) -> "HoiVocabulary":
        return cls(tuple((v, o) for v in verbs for o in objects))


class FaceEmbedderAdapter:
    """Maps a face crop to a unit-norm identity vector.

    Implementations must be deterministic and declare whether gradients
    flow through ``embed`` (the training loop requires it; offline
    annotation does not). ``input_side`` documents the resize convention
    a production model expects; None means any crop size is accepted.
    """

    differentiable: bool = False
    match_threshold: float = REAL_FACE_MATCH_THRESHOLD
    input_side: int | None = 112

    def embed(self, crop: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError


class GazeAdapter:
    """Predicts (target point, unit direction) per annotated head box.

    Must return exactly one entry per head, None where it has no
    prediction. Head boxes come from ground truth, never re-detected.
    """

    differentiable: bool = False

    def predict(self, image: torch.Tensor, head_boxes: Sequence[Box]) -> list[GazePrediction | None]:
        raise NotImplementedError


class PoseAdapter:
    """Predicts a KeypointSet for one subject crop, coords in crop space."""

    differentiable: bool = False

    def predict(self, crop: torch.Tensor) -> KeypointSet:
        raise NotImplementedError


class HoiAdapter:
    """Scores every interaction class on a whole image.

    ``valid_mask`` is the object-prior gate: the interaction loss only
    sees classes marked valid there.
    """

    differentiable: bool = False
    num_classes: int = 0

    def predict(self, image: torch.Tensor) -> HoiPrediction:
        raise NotImplementedError


class SegmenterAdapter:
    """Produces one binary (H, W) mask per subject box."""

    def masks(self, image: torch.Tensor, boxes: Sequence[Box]) -> list[torch.Tensor]:
        raise NotImplementedError


def _check_image(image: torch.Tensor) -> None:
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected a (3, H, W) image, got {tuple(image.shape)}")


def soft_argmax_2d(
    values: torch.Tensor,
    temperature: float = DEFAULT_SOFT_ARGMAX_TEMPERATURE,
    mask: torch.Tensor | None = None,
    row_offset: int = 0,
    col_offset: int = 0,
    grid_height: int | None = None,
    grid_width: int | None = None,
) -> torch.Tensor:
    """Expected (x, y) under softmax(values / temperature).

    Coordinates follow the pixel-center convention: pixel (row r, col c)
    of a ``grid_height`` x ``grid_width`` image sits at
    ((col_offset + c + 0.5)/W, (row_offset + r + 0.5)/H). Offsets let a
    sub-window report coordinates in its parent image's frame. ``mask``
    (True = keep) excludes pixels entirely; everything masked is an
    error since the expectation would be undefined.
    """
    if values.ndim != 2:
        raise ValueError(f"values must be (H, W), got {tuple(values.shape)}")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    h, w = values.shape
    gh = grid_height if grid_height is not None else h
    gw = grid_width if grid_width is not None else w
    logits = values / temperature
    if mask is not None:
        if mask.shape != values.shape:
            raise ValueError("mask shape must match values")
        if not bool(mask.any()):
            raise ValueError("soft-argmax mask excludes every pixel")
        logits = logits.masked_fill(~mask, float("-inf"))
    weights = torch.softmax(logits.reshape(-1), dim=0).reshape(h, w)
    dtype = values.dtype if values.dtype.is_floating_point else torch.float32
    xs = (torch.arange(w, device=values.device, dtype=dtype) + col_offset + 0.5) / gw
    ys = (torch.arange(h, device=values.device, dtype=dtype) + row_offset + 0.5) / gh
    x = (weights.sum(dim=0) * xs).sum()
    y = (weights.sum(dim=1) * ys).sum()
    return torch.stack([x, y])


class ToyFaceEmbedder(FaceEmbedderAdapter):
    """Mean-pool the crop on a fixed 4x4 grid and L2-normalize (D=48)."""

    differentiable = True
    match_threshold = TOY_FACE_MATCH_THRESHOLD
    input_side = None
    dim = 48

    def embed(self, crop: torch.Tensor) -> torch.Tensor:
        _check_image(crop)
        if crop.shape[1] < 1 or crop.shape[2] < 1:
            raise ValueError("degenerate zero-area crop")
        pooled = torch.nn.functional.adaptive_avg_pool2d(crop.unsqueeze(0), (4, 4))
        v = pooled.reshape(-1)
        norm = torch.linalg.vector_norm(v)
        if float(norm.detach()) < 1e-8:
            # all-black crop has no direction; return a fixed basis vector
            e = torch.zeros(self.dim, dtype=crop.dtype, device=crop.device)
            e[0] = 1.0
            return e
        return v / norm


class ToyGazeDetector(GazeAdapter):
    """Gaze target = soft-argmax of the red channel outside the head box.

    The direction is the unit vector from the head-box center to that
    target. Fully differentiable in the image. A head box swallowing
    the whole image leaves nothing to attend to; that head gets None.
    """

    differentiable = True

    def __init__(self, temperature: float = DEFAULT_SOFT_ARGMAX_TEMPERATURE):
        if temperature <= 0:
            raise ValueError("temperature must be positive")
        self.temperature = temperature

    def predict(self, image: torch.Tensor, head_boxes: Sequence[Box]) -> list[GazePrediction | None]:
        _check_image(image)
        red = image[0]
        h, w = red.shape
        out: list[GazePrediction | None] = []
        for box in head_boxes:
            y0, y1, x0, x1 = crop_bounds(validate_box(box), h, w)
            mask = torch.ones(h, w, dtype=torch.bool, device=image.device)
            mask[y0:y1, x0:x1] = False
            if not bool(mask.any()):
                out.append(None)
                continue
            target = soft_argmax_2d(red, self.temperature, mask=mask)
            cx, cy = box_center(box)
            center = torch.tensor([cx, cy], dtype=target.dtype, device=target.device)
            diff = target - center
            norm = torch.linalg.vector_norm(diff)
            if float(norm.detach()) < 1e-9:
                out.append(None)
                continue
            out.append(GazePrediction(target=target, vector=diff / norm))
        return out


class ToyPoseDetector(PoseAdapter):
    """K=4 keypoints: soft-argmax of the green channel per crop quadrant.

    Quadrant order is top-left, top-right, bottom-left, bottom-right;
    coordinates are normalized to the crop and every keypoint is marked
    visible (the toy never loses track).
    """

    differentiable = True
    num_keypoints = 4

    def __init__(self, temperature: float = DEFAULT_SOFT_ARGMAX_TEMPERATURE):
        if temperature <= 0:
            raise ValueError("temperature must be positive")
        self.temperature = temperature

    def predict(self, crop: torch.Tensor) -> KeypointSet:
        _check_image(crop)
        green = crop[1]
        h, w = green.shape
        if h < 2 or w < 2:
            raise ValueError("pose crop must be at least 2x2")
        hm, wm = h // 2, w // 2
        windows = [
            (0, hm, 0, wm),
            (0, hm, wm, w),
            (hm, h, 0, wm),
            (hm, h, wm, w),
        ]
        points = []
        for r0, r1, c0, c1 in windows:
            point = soft_argmax_2d(
                green[r0:r1, c0:c1],
                self.temperature,
                row_offset=r0,
                col_offset=c0,
                grid_height=h,
                grid_width=w,
            )
            points.append(point)
        coords = torch.stack(points)
        visible = torch.ones(self.num_keypoints, dtype=torch.bool, device=crop.device)
        return KeypointSet(coords=coords, visible=visible)


class ToyHoiDetector(HoiAdapter):
    """Fixed seeded linear read-out of the mean pixel color.

    logits = W @ mean_rgb + b with W, b frozen at construction. The
    validity mask mimics how a real interaction detector's object prior
    collapses on noise: below the pixel-variance gate every class is
    valid, above it none are.
    """

    differentiable = True

    def __init__(
        self,
        vocab: HoiVocabulary,
        seed: int = 0,
        variance_gate: float = 0.05,
        top_k: int = 5,
    ):
        if variance_gate <= 0:
            raise ValueError("variance_gate must be positive")
        self.vocab = vocab
        self.num_classes = len(vocab)
        self.variance_gate = float(variance_gate)
        self.top_k = int(top_k)
        rng = np.random.default_rng(seed)
        self.weight = torch.tensor(
            rng.normal(0.0, 2.0, size=(self.num_classes, 3)), dtype=torch.float32
        )
        self.bias = torch.tensor(
            rng.normal(0.0, 0.5, size=(self.num_classes,)), dtype=torch.float32
        )

    def predict(self, image: torch.Tensor) -> HoiPrediction:
        _check_image(image)
        mean_rgb = image.mean(dim=(1, 2))
        logits = self.weight.to(image.dtype) @ mean_rgb + self.bias.to(image.dtype)
        variance = image.to(torch.float32).var(unbiased=False)
        all_valid = bool(variance <= self.variance_gate)
        valid = torch.full((self.num_classes,), all_valid, dtype=torch.bool)
        k = min(self.top_k, self.num_classes)
        order = torch.argsort(logits.detach(), descending=True)[:k]
        detections = [
            Detection(
                class_id=int(i),
                score=float(torch.sigmoid(logits.detach()[i])),
                box=(0.0, 0.0, 1.0, 1.0),
            )
            for i in order
        ]
        return HoiPrediction(logits=logits, valid_mask=valid, detections=detections)


class ToySegmenter(SegmenterAdapter):
    """Masks are the filled pixel windows of the subject boxes.

    Toy subjects are axis-aligned rectangles that exactly fill their
    boxes, so the box window is the correct mask.
    """

    def masks(self, image: torch.Tensor, boxes: Sequence[Box]) -> list[torch.Tensor]:
        _check_image(image)
        _, h, w = image.shape
        out = []
        for box in boxes:
            y0, y1, x0, x1 = crop_bounds(validate_box(box), h, w)
            m = torch.zeros(h, w, dtype=torch.float32)
            m[y0:y1, x0:x1] = 1.0
            out.append(m)
        return out


def _token_vector(token: str, dim: int, seed: int) -> np.ndarray:
    digest = hashlib.sha256(f"{seed}:{token}".encode("utf-8")).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    return rng.normal(0.0, 1.0, size=dim)


class ToyTextEmbedder:
    """Deterministic bag-of-hashed-tokens text embedding, unit norm."""

    def __init__(self, dim: int = 32, seed: int = 0):
        self.dim = int(dim)
        self.seed = int(seed)

    def embed_text(self, text: str) -> torch.Tensor:
        tokens = [t for t in "".join(c if c.isalnum() else " " for c in text.lower()).split() if t]
        acc = np.zeros(self.dim)
        for tok in tokens:
            acc += _token_vector(tok, self.dim, self.seed)
        if not tokens or np.linalg.norm(acc) < 1e-12:
            acc = np.zeros(self.dim)
            acc[0] = 1.0
        acc = acc / np.linalg.norm(acc)
        return torch.tensor(acc, dtype=torch.float32)


class ToyImageEmbedder:
    """Pooled-grid features through a fixed seeded projection, unit norm.

    Different seeds give different "feature spaces", standing in for
    unrelated pretrained encoders.
    """

    def __init__(self, dim: int = 32, seed: int = 0, grid: int = 4):
        self.dim = int(dim)
        self.grid = int(grid)
        rng = np.random.default_rng(seed)
        self.projection = torch.tensor(
            rng.normal(0.0, 1.0, size=(dim, 3 * grid * grid)) / np.sqrt(3 * grid * grid),
            dtype=torch.float32,
        )

    def embed_image(self, image: torch.Tensor) -> torch.Tensor:
        _check_image(image)
        pooled = torch.nn.functional.adaptive_avg_pool2d(
            image.unsqueeze(0).float(), (self.grid, self.grid)
        ).reshape(-1)
        v = self.projection @ pooled
        norm = torch.linalg.vector_norm(v)
        if float(norm.detach()) < 1e-8:
            e = torch.zeros(self.dim)
            e[0] = 1.0
            return e
        return v / norm
