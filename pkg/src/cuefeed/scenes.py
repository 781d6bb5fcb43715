"""Synthetic scenes whose annotations the toy detectors can recover.

A scene is a neutral background with axis-aligned colored rectangles as
subjects. Persons carry a textured "face" patch with a per-identity
pattern; every subject carries four green keypoint beacons (one per
quadrant); a gaze is rendered as a small bright-red beacon at the
target point. Because the toy gaze/pose detectors are soft-argmaxes
over the red/green channels and the toy embedder pools the face patch,
running the detectors on the clean render recovers the emitted
annotations almost exactly.

Annotation coordinates are snapped to the pixel grid (pixel-center
convention) so that detector outputs and annotations agree to well
under a hundredth.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .geometry import Box, box_iou, crop_bounds, validate_box

BACKGROUND = (0.15, 0.15, 0.42)

# Class colors live mostly in the blue channel (red stays free for the
# gaze beacon, green for keypoint beacons). Any two entries, and each
# entry vs the background, differ by > 0.12 in max-norm, the matching
# tolerance the toy annotation extractor uses.
DEFAULT_PALETTE = {
    "person": (0.10, 0.12, 0.92),
    "ball": (0.02, 0.16, 0.64),
    "box": (0.18, 0.02, 0.56),
    "cart": (0.06, 0.19, 0.80),
    "block": (0.14, 0.05, 0.26),
}

PERSON_CLASSES = frozenset({"person"})

DEFAULT_VERBS = ("holding", "pushing", "watching", "feeding")
DEFAULT_OBJECTS = ("ball", "box", "cart", "block")

# Red/green kept flat at 0.30 so face pixels match no palette entry.
FACE_RED = 0.30
FACE_GREEN = 0.30

GAZE_BEACON = (1.0, 0.0, 0.0)
KEYPOINT_BEACON = (0.0, 1.0, 0.0)

# Quadrant order matches the toy pose detector: TL, TR, BL, BR.
KEYPOINT_OFFSETS = ((0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75))


def face_box_of(subject_box: Box) -> Box:
    """Face patch: central 40% of the width, upper 10%-40% of the height."""
    x0, y0, x1, y1 = subject_box
    w, h = x1 - x0, y1 - y0
    return (x0 + 0.30 * w, y0 + 0.10 * h, x0 + 0.70 * w, y0 + 0.40 * h)


@dataclass
class SubjectSpec:
    name: str
    box: Box
    identity: int = 0
    keypoints: bool = True


@dataclass
class GazeSpec:
    subject_index: int  # which subject (must be a person) is looking
    target: tuple[float, float]


@dataclass
class SceneSpec:
    size: int
    subjects: list[SubjectSpec]
    gaze: list[GazeSpec] = field(default_factory=list)
    interactions: list[tuple[str, str]] = field(default_factory=list)
    max_overlap_iou: float = 0.0
    palette: dict = field(default_factory=lambda: dict(DEFAULT_PALETTE))


@dataclass
class SubjectAnnotation:
    """Ground truth for one rendered subject, image-normalized coords."""

    name: str
    box: Box
    mask: torch.Tensor  # (H, W) float 0/1
    face_box: Box | None
    keypoints: torch.Tensor | None  # (K, 2) image-normalized
    keypoints_visible: torch.Tensor | None  # (K,) bool
    identity: int | None


@dataclass
class GazeAnnotation:
    head_box: Box
    target: tuple[float, float]


@dataclass
class SceneAnnotations:
    size: int
    subjects: list[SubjectAnnotation]
    gaze: list[GazeAnnotation]
    interactions: list[tuple[str, str]]
    caption: str
    query: str


def _snap_box(box: Box, size: int) -> tuple[Box, tuple[int, int, int, int]]:
    y0, y1, x0, x1 = crop_bounds(box, size, size)
    snapped = (x0 / size, y0 / size, x1 / size, y1 / size)
    return snapped, (y0, y1, x0, x1)


def _pixel_of(coord: float, size: int, lo: int, hi: int) -> int:
    """Nearest pixel index to a continuous coordinate, clamped to [lo, hi)."""
    idx = int(coord * size)
    return max(lo, min(hi - 1, idx))


def build_caption(names: list[str], interactions: list[tuple[str, str]]) -> str:
    listing = " and ".join(names) if names else "nothing"
    parts = [f"a scene with {listing}."]
    for verb, obj in interactions:
        parts.append(f"person {verb} {obj}.")
    return " ".join(parts)


def build_query(names: list[str]) -> str:
    seen: list[str] = []
    for n in names:
        if n not in seen:
            seen.append(n)
    return ", ".join(seen)


def render_scene(spec: SceneSpec) -> tuple[torch.Tensor, SceneAnnotations]:
    """Rasterize a scene spec; returns the image and exact annotations."""
    size = spec.size
    if size < 8:
        raise ValueError("scene size must be at least 8 pixels")
    snapped = []
    for sub in spec.subjects:
        if sub.name not in spec.palette:
            raise ValueError(f"subject class {sub.name!r} not in palette")
        box, window = _snap_box(validate_box(sub.box), size)
        snapped.append((sub, box, window))
    for i in range(len(snapped)):
        for j in range(i + 1, len(snapped)):
            iou = box_iou(snapped[i][1], snapped[j][1])
            if iou > spec.max_overlap_iou:
                raise ValueError(
                    f"subjects {i} and {j} overlap with IoU {iou:.3f} > "
                    f"allowed {spec.max_overlap_iou}"
                )

    img = torch.empty(3, size, size, dtype=torch.float32)
    for c, v in enumerate(BACKGROUND):
        img[c].fill_(v)

    subjects: list[SubjectAnnotation] = []
    for sub, box, (y0, y1, x0, x1) in snapped:
        color = spec.palette[sub.name]
        for c, v in enumerate(color):
            img[c, y0:y1, x0:x1] = v
        mask = torch.zeros(size, size, dtype=torch.float32)
        mask[y0:y1, x0:x1] = 1.0

        face_box = None
        if sub.name in PERSON_CLASSES:
            face_box, (fy0, fy1, fx0, fx1) = _snap_box(face_box_of(box), size)
            rng = np.random.default_rng(1000 + int(sub.identity))
            pattern = rng.uniform(0.35, 0.95, size=(4, 4))
            for r in range(fy0, fy1):
                pr = min(3, (r - fy0) * 4 // max(1, fy1 - fy0))
                for col in range(fx0, fx1):
                    pc = min(3, (col - fx0) * 4 // max(1, fx1 - fx0))
                    img[0, r, col] = FACE_RED
                    img[1, r, col] = FACE_GREEN
                    img[2, r, col] = float(pattern[pr, pc])

        keypoints = None
        visible = None
        if sub.keypoints:
            pts = []
            for fx, fy in KEYPOINT_OFFSETS:
                px = _pixel_of(box[0] + fx * (box[2] - box[0]), size, x0, x1)
                py = _pixel_of(box[1] + fy * (box[3] - box[1]), size, y0, y1)
                img[:, py, px] = torch.tensor(KEYPOINT_BEACON)
                pts.append(((px + 0.5) / size, (py + 0.5) / size))
            keypoints = torch.tensor(pts, dtype=torch.float32)
            visible = torch.ones(len(pts), dtype=torch.bool)

        subjects.append(
            SubjectAnnotation(
                name=sub.name,
                box=box,
                mask=mask,
                face_box=face_box,
                keypoints=keypoints,
                keypoints_visible=visible,
                identity=int(sub.identity) if sub.name in PERSON_CLASSES else None,
            )
        )

    gaze_annotations: list[GazeAnnotation] = []
    for g in spec.gaze:
        if not 0 <= g.subject_index < len(subjects):
            raise ValueError(f"gaze subject index {g.subject_index} out of range")
        head = subjects[g.subject_index]
        if head.face_box is None:
            raise ValueError("gaze subject must be a person (needs a face box)")
        tx = _pixel_of(g.target[0], size, 1, size - 1)
        ty = _pixel_of(g.target[1], size, 1, size - 1)
        hy0, hy1, hx0, hx1 = crop_bounds(head.face_box, size, size)
        if hx0 - 1 <= tx < hx1 + 1 and hy0 - 1 <= ty < hy1 + 1:
            raise ValueError("gaze beacon would touch the gazing head's box")
        for c, v in enumerate(GAZE_BEACON):
            img[c, ty - 1 : ty + 2, tx - 1 : tx + 2] = v
        target = ((tx + 0.5) / size, (ty + 0.5) / size)
        gaze_annotations.append(GazeAnnotation(head_box=head.face_box, target=target))

    names = [s.name for s in subjects]
    caption = build_caption(names, spec.interactions)
    ann = SceneAnnotations(
        size=size,
        subjects=subjects,
        gaze=gaze_annotations,
        interactions=list(spec.interactions),
        caption=caption,
        query=build_query(names),
    )
    return img, ann


def random_scene(
    rng: np.random.Generator,
    size: int = 48,
    objects: tuple[str, ...] = DEFAULT_OBJECTS,
    verbs: tuple[str, ...] = DEFAULT_VERBS,
    num_identities: int = 8,
    max_objects: int = 2,
) -> SceneSpec:
    """One person plus 1-2 objects on a 2x2 cell grid, person gazing at
    the first object; deterministic given the generator state."""
    if size < 40:
        raise ValueError("random scenes need size >= 40")
    margin = 2
    cell = (size - 2 * margin) // 2
    cells = [(margin, margin), (margin + cell, margin), (margin, margin + cell), (margin + cell, margin + cell)]
    order = rng.permutation(4)

    n_obj = int(rng.integers(1, max_objects + 1))
    chosen = [str(objects[i]) for i in rng.choice(len(objects), size=n_obj, replace=False)]

    specs: list[SubjectSpec] = []
    placements = [("person", None)] + [(name, None) for name in chosen]
    for k, (name, _) in enumerate(placements):
        cx, cy = cells[order[k]]
        side = int(rng.integers(13, min(18, cell - 1)))
        jx = int(rng.integers(0, cell - side))
        jy = int(rng.integers(0, cell - side))
        x0, y0 = cx + jx, cy + jy
        box = (x0 / size, y0 / size, (x0 + side) / size, (y0 + side) / size)
        identity = int(rng.integers(0, num_identities)) if name == "person" else 0
        specs.append(SubjectSpec(name=name, box=box, identity=identity))

    gazed = specs[1]
    bx0, by0, bx1, by1 = gazed.box
    cx_t = (bx0 + bx1) / 2 + float(rng.integers(-1, 2)) / size
    cy_t = (by0 + by1) / 2 + float(rng.integers(-1, 2)) / size
    verb = str(verbs[int(rng.integers(0, len(verbs)))])

    return SceneSpec(
        size=size,
        subjects=specs,
        gaze=[GazeSpec(subject_index=0, target=(cx_t, cy_t))],
        interactions=[(verb, gazed.name)],
    )


def scene_bank(
    count: int, seed: int, size: int = 48, **kwargs
) -> list[tuple[torch.Tensor, SceneAnnotations]]:
    """Render ``count`` random scenes from one seed, independent per index."""
    root = np.random.SeedSequence(seed)
    out = []
    for child in root.spawn(count):
        rng = np.random.default_rng(child)
        img, ann = render_scene(random_scene(rng, size=size, **kwargs))
        out.append((img, ann))
    return out
