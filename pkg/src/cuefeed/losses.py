"""Feedback losses on the reconstructed image and the combined objective.

Six auxiliary terms steer fine-tuning: a subject/background boundary
loss, a facial identity loss, a gaze loss, a pose loss, a multi-label
interaction loss, and a query/feature alignment regularizer. Each is a
pure function of the clean image, the reconstruction, ground-truth
annotations and a (frozen) detector adapter. ``combined_loss`` applies
per-loss weights and timestep gates on top of the plain denoising MSE.

Reduction conventions, fixed here once:

* boundary: mean over channels and boundary-band pixels
* id: mean over faces of the squared L2 embedding distance
* gaze: per head, squared target error summed over the 2 coordinates
  plus cosine distance of the unit gaze vectors; mean over heads
* pose: mean over the coordinates of commonly visible keypoints
* interaction: mean focal loss over detector-validated classes
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, NamedTuple, Sequence

import torch
import torch.nn.functional as F

from .errors import NumericError
from .geometry import Box, box_center, crop_box, validate_box
from .policy import FEEDBACK_LOSSES, FeedbackPolicy

FOCAL_GAMMA = 2.0
FOCAL_ALPHA = 0.25


class LossOutput(NamedTuple):
    """Scalar loss plus instance bookkeeping.

    ``used`` counts instances that contributed; ``skipped`` counts
    instances dropped for want of a valid detection. A loss with
    nothing to do returns value 0 (a detached constant, so it adds no
    gradient) and used == 0.
    """

    value: torch.Tensor
    used: int
    skipped: int


def _zero(like: torch.Tensor) -> torch.Tensor:
    return torch.zeros((), dtype=like.dtype, device=like.device)


def unit_normalize(v: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    """L2-normalize a vector; rejects (near-)zero input."""
    norm = torch.linalg.vector_norm(v)
    if float(norm.detach()) < eps:
        raise NumericError("cannot normalize a zero vector")
    return v / norm


def cosine_distance(u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """1 - cos(u, v) for unit vectors, computed as 0.5 * ||u - v||^2.

    The half-squared-distance form is algebraically identical for unit
    inputs but is exactly 0 when u == v bitwise and never goes negative,
    which the direct dot-product form does not guarantee in floats.
    """
    return 0.5 * torch.sum((u - v) ** 2)


@dataclass(frozen=True)
class GazeInstance:
    """One annotated head: where it is and what it looks at."""

    head_box: Box
    target: tuple[float, float]

    def __post_init__(self):
        object.__setattr__(self, "head_box", validate_box(self.head_box))
        tx, ty = float(self.target[0]), float(self.target[1])
        if not (0.0 <= tx <= 1.0 and 0.0 <= ty <= 1.0):
            raise ValueError(f"gaze target {self.target!r} outside [0,1]^2")
        object.__setattr__(self, "target", (tx, ty))
        cx, cy = box_center(self.head_box)
        if abs(tx - cx) < 1e-9 and abs(ty - cy) < 1e-9:
            raise ValueError("gaze target coincides with head center; direction undefined")

    @property
    def head_center(self) -> tuple[float, float]:
        return box_center(self.head_box)

    def gaze_vector(self, dtype=torch.float32) -> torch.Tensor:
        cx, cy = self.head_center
        v = torch.tensor([self.target[0] - cx, self.target[1] - cy], dtype=dtype)
        return unit_normalize(v)


@dataclass
class KeypointSet:
    """K keypoints with visibility flags; coordinates normalized to the crop."""

    coords: torch.Tensor  # (K, 2)
    visible: torch.Tensor  # (K,) bool

    def __post_init__(self):
        if self.coords.ndim != 2 or self.coords.shape[1] != 2:
            raise ValueError(f"coords must be (K, 2), got {tuple(self.coords.shape)}")
        if self.visible.shape != (self.coords.shape[0],):
            raise ValueError("visible must be a (K,) vector matching coords")
        self.visible = self.visible.bool()
        vis = self.coords[self.visible]
        if vis.numel() and ((vis < 0) | (vis > 1)).any():
            raise ValueError("visible keypoint coordinates must lie in [0,1]^2")


def morphological_gradient(mask: torch.Tensor, kernel_size: int = 3) -> torch.Tensor:
    """Boundary band of a binary mask: dilation minus erosion.

    Square structuring element, zero padding (so an all-ones mask still
    shows a border ring: the pad erodes it).
    """
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ValueError(f"kernel_size must be odd and positive, got {kernel_size}")
    if mask.ndim != 2:
        raise ValueError(f"mask must be H x W, got shape {tuple(mask.shape)}")
    m = mask.float()
    if not torch.logical_or(m == 0, m == 1).all():
        raise ValueError("mask must be binary")
    pad = kernel_size // 2
    m4 = m.unsqueeze(0).unsqueeze(0)
    padded = F.pad(m4, [pad] * 4, value=0.0)
    dilated = F.max_pool2d(padded, kernel_size, stride=1)
    eroded = -F.max_pool2d(-padded, kernel_size, stride=1)
    return (dilated - eroded).squeeze(0).squeeze(0)


_LAPLACIAN_KERNEL = torch.tensor(
    [[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]]
)


def laplacian(image: torch.Tensor) -> torch.Tensor:
    """Per-channel 4-neighbor Laplacian with zero padding."""
    if image.ndim != 3:
        raise ValueError(f"expected (C, H, W), got {tuple(image.shape)}")
    c = image.shape[0]
    kernel = _LAPLACIAN_KERNEL.to(dtype=image.dtype, device=image.device)
    weight = kernel.expand(c, 1, 3, 3)
    return F.conv2d(image.unsqueeze(0), weight, padding=1, groups=c).squeeze(0)


def boundary_loss(
    x0: torch.Tensor, x0_hat: torch.Tensor, boundary: torch.Tensor
) -> torch.Tensor:
    """Squared Laplacian-response difference, averaged over the boundary band."""
    if x0.shape != x0_hat.shape:
        raise ValueError("x0 and x0_hat shapes differ")
    if boundary.shape != x0.shape[-2:]:
        raise ValueError(
            f"boundary {tuple(boundary.shape)} does not match image {tuple(x0.shape)}"
        )
    band = (boundary > 0.5).to(x0_hat.dtype)
    n_band = band.sum()
    if float(n_band) == 0.0:
        return _zero(x0_hat)
    diff = laplacian(x0) - laplacian(x0_hat)
    per_pixel = (diff**2) * band
    return per_pixel.sum() / (n_band * x0.shape[0])


def id_loss(
    x0: torch.Tensor,
    x0_hat: torch.Tensor,
    face_boxes: Sequence[Box],
    embedder,
) -> LossOutput:
    """Mean squared embedding distance between face crops.

    Crops are taken at the ground-truth box locations in *both* images;
    faces are never re-detected in the reconstruction.
    """
    if not face_boxes:
        return LossOutput(_zero(x0_hat), 0, 0)
    total = None
    for box in face_boxes:
        e_ref = embedder.embed(crop_box(x0, box))
        e_gen = embedder.embed(crop_box(x0_hat, box))
        d = torch.sum((e_ref - e_gen) ** 2)
        total = d if total is None else total + d
    return LossOutput(total / len(face_boxes), len(face_boxes), 0)


def gaze_loss(
    gaze_gt: Sequence[GazeInstance],
    x0_hat: torch.Tensor,
    gaze_detector,
) -> LossOutput:
    """Target-coordinate error plus gaze-direction cosine distance.

    Per head: sum of squared errors over the 2 target coordinates, plus
    1 - cos between unit gaze vectors; mean over heads the detector
    produced a prediction for. Heads without a prediction are skipped
    and counted.
    """
    if not gaze_gt:
        return LossOutput(_zero(x0_hat), 0, 0)
    preds = gaze_detector.predict(x0_hat, [g.head_box for g in gaze_gt])
    if len(preds) != len(gaze_gt):
        raise ValueError("gaze detector must return one prediction slot per head")
    total = None
    used = 0
    skipped = 0
    for inst, pred in zip(gaze_gt, preds):
        if pred is None:
            skipped += 1
            continue
        target_gt = torch.tensor(inst.target, dtype=x0_hat.dtype, device=x0_hat.device)
        vec_gt = inst.gaze_vector(dtype=x0_hat.dtype).to(x0_hat.device)
        term = torch.sum((target_gt - pred.target) ** 2) + cosine_distance(
            vec_gt, pred.vector
        )
        total = term if total is None else total + term
        used += 1
    if used == 0:
        return LossOutput(_zero(x0_hat), 0, skipped)
    return LossOutput(total / used, used, skipped)


def pose_loss(
    x0: torch.Tensor,
    x0_hat: torch.Tensor,
    subject_boxes: Sequence[Box],
    pose_detector,
) -> LossOutput:
    """MSE between keypoints detected in matching crops of both images.

    Coordinates are normalized to the subject box. Only keypoints
    visible in both detections count; a subject with no commonly
    visible keypoint is skipped.
    """
    if not subject_boxes:
        return LossOutput(_zero(x0_hat), 0, 0)
    total = None
    used = 0
    skipped = 0
    for box in subject_boxes:
        kp_ref = pose_detector.predict(crop_box(x0, box))
        kp_gen = pose_detector.predict(crop_box(x0_hat, box))
        common = kp_ref.visible & kp_gen.visible
        if not bool(common.any()):
            skipped += 1
            continue
        diff = kp_ref.coords[common] - kp_gen.coords[common]
        total_box = torch.mean(diff**2)
        total = total_box if total is None else total + total_box
        used += 1
    if used == 0:
        return LossOutput(_zero(x0_hat), 0, skipped)
    return LossOutput(total / used, used, skipped)


def focal_loss(
    target_labels: Iterable[int],
    logits: torch.Tensor,
    gamma: float = FOCAL_GAMMA,
    alpha: float = FOCAL_ALPHA,
    valid_mask: torch.Tensor | None = None,
) -> torch.Tensor:
    """Multi-label binary focal loss, mean over (valid) classes.

    Per class with p = sigmoid(logit): positive classes contribute
    -alpha * (1-p)^gamma * log p, negatives -(1-alpha) * p^gamma *
    log(1-p). Uses logsigmoid for the log terms so saturated logits
    behave (log p -> 0 exactly instead of overflowing).
    """
    if logits.ndim != 1:
        raise ValueError(f"logits must be a flat class vector, got {tuple(logits.shape)}")
    if not torch.isfinite(logits).all():
        raise NumericError("non-finite logits in focal loss")
    n = logits.numel()
    labels = set(int(i) for i in target_labels)
    if labels and (min(labels) < 0 or max(labels) >= n):
        raise ValueError(f"target label outside class range [0, {n})")
    target = torch.zeros(n, dtype=logits.dtype, device=logits.device)
    if labels:
        target[sorted(labels)] = 1.0
    p = torch.sigmoid(logits)
    log_p = F.logsigmoid(logits)
    log_not_p = F.logsigmoid(-logits)
    pos = -alpha * (1.0 - p) ** gamma * log_p
    neg = -(1.0 - alpha) * p**gamma * log_not_p
    per_class = target * pos + (1.0 - target) * neg
    if valid_mask is None:
        return per_class.mean()
    if valid_mask.shape != (n,):
        raise ValueError("valid_mask must align with logits")
    mask = valid_mask.to(per_class.dtype)
    n_valid = mask.sum()
    if float(n_valid) == 0.0:
        return _zero(per_class)
    return (per_class * mask).sum() / n_valid


def interaction_loss(
    hoi_gt: Iterable[int],
    x0_hat: torch.Tensor,
    hoi_detector,
    gamma: float = FOCAL_GAMMA,
    alpha: float = FOCAL_ALPHA,
) -> LossOutput:
    """Focal loss over the interaction classes the detector trusts.

    The detector's validity mask (its object prior) decides which
    classes participate. With no valid class the loss is exactly 0,
    reproducing the collapse this term shows at high noise levels.
    """
    pred = hoi_detector.predict(x0_hat)
    valid = pred.valid_mask.bool()
    n_valid = int(valid.sum())
    n = int(pred.logits.numel())
    if n_valid == 0:
        return LossOutput(_zero(x0_hat), 0, n)
    value = focal_loss(hoi_gt, pred.logits, gamma=gamma, alpha=alpha, valid_mask=valid)
    return LossOutput(value, n_valid, n - n_valid)


def reg_loss(query_embedding: torch.Tensor, mean_aligned_features: torch.Tensor) -> torch.Tensor:
    """Cosine distance between the query embedding and the mean aligned feature."""
    q = unit_normalize(query_embedding)
    s = unit_normalize(mean_aligned_features)
    return cosine_distance(q, s)


@dataclass
class LossBreakdown:
    """Post-gate value of every term plus the weighted total.

    ``terms`` holds the raw (unweighted) loss values after gating, so a
    gated-off loss shows exactly 0.0. ``total`` keeps the autograd
    graph: total = denoise + sum_k weight_k(t) * gate_k(t) * loss_k.
    """

    total: torch.Tensor
    terms: dict[str, float]
    t: int
    skip_counts: dict[str, int] = field(default_factory=dict)

    def term(self, name: str) -> float:
        return self.terms[name]


def combined_loss(
    parts: Mapping[str, torch.Tensor],
    t: int,
    policy: FeedbackPolicy,
) -> LossBreakdown:
    """Weighted, gated sum of the denoising loss and the feedback terms.

    ``parts`` maps loss names to raw scalar tensors; the denoise entry
    is mandatory, feedback entries are optional (a missing entry means
    the caller never computed it, e.g. because its gate was closed).
    A term enters the total only when its gate is open at ``t`` AND its
    weight is nonzero; otherwise the sum is left untouched, so ablation
    by zero weight and ablation by empty gate are bitwise identical.
    """
    if "denoise" not in parts:
        raise ValueError("parts must include the denoise term")
    unknown = set(parts) - {"denoise", *FEEDBACK_LOSSES}
    if unknown:
        raise ValueError(f"unknown loss terms: {sorted(unknown)}")
    denoise = parts["denoise"]
    if not torch.isfinite(denoise.detach()).all():
        raise NumericError("non-finite denoise loss")
    total = denoise
    terms = {"denoise": float(denoise.detach())}
    for name in FEEDBACK_LOSSES:
        if not policy.active(name, t):
            terms[name] = 0.0
            continue
        weight = policy.effective_weight(name, t)
        raw = parts.get(name)
        if raw is None:
            terms[name] = 0.0
            continue
        if not torch.isfinite(raw.detach()).all():
            raise NumericError(f"non-finite value in loss term {name!r}")
        terms[name] = float(raw.detach())
        if weight == 0.0:
            continue
        total = total + weight * raw
    return LossBreakdown(total=total, terms=terms, t=int(t))
