"""Dataset manifests, preprocessing, and annotation building.

Manifests are JSON Lines, one sample per line, with all coordinates
normalized to [0, 1] relative to the image they describe. Masks are
1-channel PNG files (0/255), identity embeddings are little-endian
float32 vectors behind a 16-byte header. Preprocessing resizes the
shortest image side to a target and crops a square window, mapping
every annotation through the same exact affine transform.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy import ndimage

from .detectors import (
    FaceEmbedderAdapter,
    GazeAdapter,
    HoiVocabulary,
    PoseAdapter,
    SegmenterAdapter,
    ToyFaceEmbedder,
    ToyGazeDetector,
    ToyPoseDetector,
    ToySegmenter,
)
from .errors import DataError
from .geometry import Box, crop_bounds, from_box_coords, snap_box, validate_box
from .losses import GazeInstance, morphological_gradient
from .scenes import (
    DEFAULT_PALETTE,
    DEFAULT_VERBS,
    PERSON_CLASSES,
    SceneAnnotations,
    build_query,
    face_box_of,
)

EMBEDDING_MAGIC = b"CFEMBED1"


# ---------------------------------------------------------------------------
# file formats


def load_image(path: str | Path) -> torch.Tensor:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def save_image(image: torch.Tensor, path: str | Path) -> None:
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected (3, H, W), got {tuple(image.shape)}")
    arr = (image.detach().clamp(0, 1).permute(1, 2, 0).numpy() * 255.0).round()
    Image.fromarray(arr.astype(np.uint8), mode="RGB").save(path)


def load_mask(path: str | Path) -> torch.Tensor:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"), dtype=np.float32)
    except OSError as exc:
        raise DataError(f"cannot read mask {path}: {exc}") from exc
    return torch.from_numpy((arr > 127.5).astype(np.float32))


def save_mask(mask: torch.Tensor, path: str | Path) -> None:
    if mask.ndim != 2:
        raise ValueError(f"mask must be (H, W), got {tuple(mask.shape)}")
    arr = (mask.detach().numpy() > 0.5).astype(np.uint8) * 255
    Image.fromarray(arr, mode="L").save(path)


def write_embedding(vector: torch.Tensor, path: str | Path) -> None:
    v = vector.detach().to(torch.float32).reshape(-1).numpy()
    header = EMBEDDING_MAGIC + np.uint32(v.size).tobytes() + b"\x00" * 4
    Path(path).write_bytes(header + v.astype("<f4").tobytes())


def read_embedding(path: str | Path) -> torch.Tensor:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read embedding {path}: {exc}") from exc
    if len(blob) < 16 or blob[:8] != EMBEDDING_MAGIC:
        raise DataError(f"{path}: not an embedding file (bad header)")
    dim = int(np.frombuffer(blob[8:12], dtype="<u4")[0])
    payload = np.frombuffer(blob[16:], dtype="<f4")
    if payload.size != dim:
        raise DataError(f"{path}: header says dim={dim}, payload has {payload.size}")
    return torch.from_numpy(payload.copy())


# ---------------------------------------------------------------------------
# manifest records


@dataclass
class SubjectRecord:
    name: str
    box: Box
    mask: str
    face_box: Box | None = None
    keypoints: list | None = None  # [[x, y], ...] image-normalized
    keypoints_visible: list | None = None
    embedding: str | None = None


@dataclass
class SampleRecord:
    image: str
    caption: str
    query: str
    subjects: list = field(default_factory=list)
    gaze: list = field(default_factory=list)  # [{"head_box": [...], "target": [x, y]}]
    interactions: list = field(default_factory=list)  # [[verb, object], ...]


def record_to_json(record: SampleRecord) -> str:
    return json.dumps(dataclasses.asdict(record), sort_keys=True)


def _require(cond: bool, where: str, message: str) -> None:
    if not cond:
        raise DataError(f"{where}: {message}")


def _parse_box(value, where: str) -> Box:
    _require(isinstance(value, (list, tuple)) and len(value) == 4, where, "box must have 4 numbers")
    try:
        return validate_box(value)
    except ValueError as exc:
        raise DataError(f"{where}: {exc}") from exc


def _parse_point(value, where: str) -> tuple[float, float]:
    _require(isinstance(value, (list, tuple)) and len(value) == 2, where, "point must have 2 numbers")
    x, y = float(value[0]), float(value[1])
    _require(0.0 <= x <= 1.0 and 0.0 <= y <= 1.0, where, f"point {value} outside [0,1]^2")
    return (x, y)


def parse_record(data: dict, where: str, vocab: HoiVocabulary | None = None) -> SampleRecord:
    _require(isinstance(data, dict), where, "record must be an object")
    known = {"image", "caption", "query", "subjects", "gaze", "interactions"}
    extra = set(data) - known
    _require(not extra, where, f"unknown fields {sorted(extra)}")
    for req in ("image", "caption", "query"):
        _require(req in data, where, f"missing field '{req}'")
    subjects = []
    for i, sub in enumerate(data.get("subjects", [])):
        w = f"{where}, subjects[{i}]"
        _require(isinstance(sub, dict), w, "subject must be an object")
        extra = set(sub) - {
            "name",
            "box",
            "mask",
            "face_box",
            "keypoints",
            "keypoints_visible",
            "embedding",
        }
        _require(not extra, w, f"unknown fields {sorted(extra)}")
        _require("name" in sub and "box" in sub and "mask" in sub, w, "needs name, box, mask")
        box = _parse_box(sub["box"], f"{w}.box")
        face_box = None
        if sub.get("face_box") is not None:
            face_box = _parse_box(sub["face_box"], f"{w}.face_box")
        kps = sub.get("keypoints")
        vis = sub.get("keypoints_visible")
        if kps is not None:
            _require(isinstance(kps, list), f"{w}.keypoints", "must be a list of points")
            if vis is None:
                vis = [True] * len(kps)
            _require(len(vis) == len(kps), f"{w}.keypoints_visible", "length mismatch")
            for j, (pt, v) in enumerate(zip(kps, vis)):
                if v:
                    _parse_point(pt, f"{w}.keypoints[{j}]")
        subjects.append(
            SubjectRecord(
                name=str(sub["name"]),
                box=box,
                mask=str(sub["mask"]),
                face_box=face_box,
                keypoints=[[float(p[0]), float(p[1])] for p in kps] if kps is not None else None,
                keypoints_visible=[bool(v) for v in vis] if kps is not None else None,
                embedding=str(sub["embedding"]) if sub.get("embedding") else None,
            )
        )
    gaze = []
    for i, g in enumerate(data.get("gaze", [])):
        w = f"{where}, gaze[{i}]"
        _require(isinstance(g, dict), w, "gaze entry must be an object")
        extra = set(g) - {"head_box", "target"}
        _require(not extra, w, f"unknown fields {sorted(extra)}")
        _require("head_box" in g and "target" in g, w, "needs head_box and target")
        gaze.append(
            {
                "head_box": list(_parse_box(g["head_box"], f"{w}.head_box")),
                "target": list(_parse_point(g["target"], f"{w}.target")),
            }
        )
    interactions = []
    for i, pair in enumerate(data.get("interactions", [])):
        w = f"{where}, interactions[{i}]"
        _require(isinstance(pair, (list, tuple)) and len(pair) == 2, w, "must be [verb, object]")
        verb, obj = str(pair[0]), str(pair[1])
        if vocab is not None and (verb, obj) not in vocab:
            raise DataError(f"{w}: ({verb!r}, {obj!r}) not in the interaction vocabulary")
        interactions.append([verb, obj])
    return SampleRecord(
        image=str(data["image"]),
        caption=str(data["caption"]),
        query=str(data["query"]),
        subjects=subjects,
        gaze=gaze,
        interactions=interactions,
    )


def load_manifest(
    path: str | Path,
    vocab: HoiVocabulary | None = None,
    check_files: bool = True,
) -> list[SampleRecord]:
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    root = path.parent
    records = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        where = f"{path.name}, line {lineno}"
        try:
            data = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"{where}: invalid JSON ({exc})") from exc
        record = parse_record(data, where, vocab=vocab)
        if check_files:
            referenced = [record.image] + [s.mask for s in record.subjects]
            referenced += [s.embedding for s in record.subjects if s.embedding]
            for rel in referenced:
                if not (root / rel).exists():
                    raise DataError(f"{where}: referenced file {rel!r} does not exist")
        records.append(record)
    return records


def write_manifest(records: Sequence[SampleRecord], path: str | Path) -> None:
    text = "".join(record_to_json(r) + "\n" for r in records)
    Path(path).write_text(text)


# ---------------------------------------------------------------------------
# in-memory training samples


@dataclass
class SubjectSample:
    name: str
    box: Box
    mask: torch.Tensor  # (S, S) float 0/1
    face_box: Box | None = None
    keypoints: torch.Tensor | None = None  # (K, 2) image-normalized
    keypoints_visible: torch.Tensor | None = None
    embedding: torch.Tensor | None = None


@dataclass
class TrainingSample:
    image: torch.Tensor  # (3, S, S) in [0, 1]
    caption: str
    query: str
    subjects: list = field(default_factory=list)
    gaze: list = field(default_factory=list)  # list[GazeInstance]
    interactions: list = field(default_factory=list)  # class ids
    _boundary_cache: dict = field(default_factory=dict, repr=False)

    @property
    def size(self) -> int:
        return int(self.image.shape[-1])

    def subject_boxes(self) -> list[Box]:
        return [s.box for s in self.subjects]

    def face_boxes(self) -> list[Box]:
        return [s.face_box for s in self.subjects if s.face_box is not None]

    def boundary_map(self, kernel_size: int = 3) -> torch.Tensor:
        if kernel_size not in self._boundary_cache:
            h, w = self.image.shape[-2:]
            union = torch.zeros(h, w, dtype=torch.float32)
            for s in self.subjects:
                union = torch.maximum(union, (s.mask > 0.5).float())
            self._boundary_cache[kernel_size] = morphological_gradient(union, kernel_size)
        return self._boundary_cache[kernel_size]


def training_sample_from_record(
    record: SampleRecord, root: str | Path, vocab: HoiVocabulary | None = None
) -> TrainingSample:
    """Load a manifest record's assets at native size, no transforms."""
    root = Path(root)
    image = load_image(root / record.image)
    h, w = image.shape[-2:]
    subjects = []
    for sub in record.subjects:
        mask = load_mask(root / sub.mask)
        if mask.shape != (h, w):
            raise DataError(f"mask {sub.mask} shape {tuple(mask.shape)} != image {h}x{w}")
        subjects.append(
            SubjectSample(
                name=sub.name,
                box=sub.box,
                mask=mask,
                face_box=sub.face_box,
                keypoints=torch.tensor(sub.keypoints, dtype=torch.float32)
                if sub.keypoints is not None
                else None,
                keypoints_visible=torch.tensor(sub.keypoints_visible, dtype=torch.bool)
                if sub.keypoints_visible is not None
                else None,
                embedding=read_embedding(root / sub.embedding) if sub.embedding else None,
            )
        )
    gaze = []
    for g in record.gaze:
        try:
            gaze.append(GazeInstance(head_box=tuple(g["head_box"]), target=tuple(g["target"])))
        except ValueError as exc:
            raise DataError(f"bad gaze annotation in {record.image}: {exc}") from exc
    interactions = []
    if vocab is not None:
        interactions = [vocab.id_of(v, o) for v, o in record.interactions]
    return TrainingSample(
        image=image,
        caption=record.caption,
        query=record.query,
        subjects=subjects,
        gaze=gaze,
        interactions=interactions,
    )


def training_sample_from_scene(
    image: torch.Tensor, ann: SceneAnnotations, vocab: HoiVocabulary
) -> TrainingSample:
    """Adopt a rendered scene's exact annotations as a TrainingSample."""
    subjects = [
        SubjectSample(
            name=s.name,
            box=s.box,
            mask=s.mask,
            face_box=s.face_box,
            keypoints=s.keypoints,
            keypoints_visible=s.keypoints_visible,
            embedding=None,
        )
        for s in ann.subjects
    ]
    gaze = [GazeInstance(head_box=g.head_box, target=g.target) for g in ann.gaze]
    interactions = [vocab.id_of(v, o) for v, o in ann.interactions]
    return TrainingSample(
        image=image,
        caption=ann.caption,
        query=ann.query,
        subjects=subjects,
        gaze=gaze,
        interactions=interactions,
    )


# ---------------------------------------------------------------------------
# preprocessing


@dataclass
class PreprocessSpec:
    target_side: int = 512
    crop: str = "random"  # "random" | "center"

    def __post_init__(self):
        if self.target_side < 8:
            raise ValueError("target_side must be >= 8")
        if self.crop not in ("random", "center"):
            raise ValueError("crop must be 'random' or 'center'")


@dataclass(frozen=True)
class CropTransform:
    """Exact affine map from original to crop coordinates.

    Forward: x' = (x * new_w - crop_x) / out_size (y analogous). The
    resize factor is folded into (new_w, new_h), which are the rounded
    pixel sizes of the resized image.
    """

    new_w: int
    new_h: int
    crop_x: int
    crop_y: int
    out_size: int

    def apply_point(self, x: float, y: float) -> tuple[float, float]:
        return (
            (x * self.new_w - self.crop_x) / self.out_size,
            (y * self.new_h - self.crop_y) / self.out_size,
        )

    def invert_point(self, x: float, y: float) -> tuple[float, float]:
        return (
            (x * self.out_size + self.crop_x) / self.new_w,
            (y * self.out_size + self.crop_y) / self.new_h,
        )

    def apply_box(self, box: Box) -> Box | None:
        x0, y0 = self.apply_point(box[0], box[1])
        x1, y1 = self.apply_point(box[2], box[3])
        x0, y0 = max(0.0, x0), max(0.0, y0)
        x1, y1 = min(1.0, x1), min(1.0, y1)
        if x1 - x0 <= 1e-9 or y1 - y0 <= 1e-9:
            return None
        return (x0, y0, x1, y1)

    def contains(self, x: float, y: float) -> bool:
        xt, yt = self.apply_point(x, y)
        return 0.0 <= xt <= 1.0 and 0.0 <= yt <= 1.0


@dataclass
class PreprocessStats:
    samples: int = 0
    subjects: int = 0
    dropped_subjects: int = 0
    dropped_gaze: int = 0
    dropped_keypoints: int = 0

    def merge(self, other: "PreprocessStats") -> "PreprocessStats":
        return PreprocessStats(
            samples=self.samples + other.samples,
            subjects=self.subjects + other.subjects,
            dropped_subjects=self.dropped_subjects + other.dropped_subjects,
            dropped_gaze=self.dropped_gaze + other.dropped_gaze,
            dropped_keypoints=self.dropped_keypoints + other.dropped_keypoints,
        )


def build_transform(
    width: int, height: int, spec: PreprocessSpec, rng: np.random.Generator
) -> CropTransform:
    side = spec.target_side
    scale = side / min(width, height)
    new_w = max(side, round(width * scale))
    new_h = max(side, round(height * scale))
    if spec.crop == "random":
        crop_x = int(rng.integers(0, new_w - side + 1))
        crop_y = int(rng.integers(0, new_h - side + 1))
    else:
        crop_x = (new_w - side) // 2
        crop_y = (new_h - side) // 2
    return CropTransform(new_w=new_w, new_h=new_h, crop_x=crop_x, crop_y=crop_y, out_size=side)


def _resize_image(image: torch.Tensor, new_h: int, new_w: int) -> torch.Tensor:
    if image.shape[-2:] == (new_h, new_w):
        return image
    return F.interpolate(
        image.unsqueeze(0), size=(new_h, new_w), mode="bilinear", align_corners=False, antialias=True
    ).squeeze(0)


def _resize_mask(mask: torch.Tensor, new_h: int, new_w: int) -> torch.Tensor:
    if mask.shape == (new_h, new_w):
        return mask
    return (
        F.interpolate(mask.unsqueeze(0).unsqueeze(0), size=(new_h, new_w), mode="nearest")
        .squeeze(0)
        .squeeze(0)
    )


def preprocess(
    record: SampleRecord,
    spec: PreprocessSpec,
    rng: np.random.Generator,
    root: str | Path = ".",
    vocab: HoiVocabulary | None = None,
) -> tuple[TrainingSample, PreprocessStats, CropTransform]:
    """Resize + crop one sample and carry every annotation along.

    Subjects whose boxes leave the crop are dropped (clipped if partly
    visible); keypoints outside the crop lose visibility; a gaze
    instance survives only if both the head-box center and the target
    stay inside the crop.
    """
    root = Path(root)
    image = load_image(root / record.image)
    _, h, w = image.shape
    tf = build_transform(w, h, spec, rng)
    side = spec.target_side
    resized = _resize_image(image, tf.new_h, tf.new_w)
    window = resized[:, tf.crop_y : tf.crop_y + side, tf.crop_x : tf.crop_x + side]

    stats = PreprocessStats(samples=1)
    subjects = []
    for sub in record.subjects:
        box = tf.apply_box(sub.box)
        if box is None:
            stats.dropped_subjects += 1
            continue
        stats.subjects += 1
        mask = load_mask(root / sub.mask)
        if mask.shape != (h, w):
            raise DataError(f"mask {sub.mask} shape {tuple(mask.shape)} != image {h}x{w}")
        mask = _resize_mask(mask, tf.new_h, tf.new_w)[
            tf.crop_y : tf.crop_y + side, tf.crop_x : tf.crop_x + side
        ]
        face_box = tf.apply_box(sub.face_box) if sub.face_box is not None else None
        kps = None
        vis = None
        if sub.keypoints is not None:
            pts = []
            flags = []
            for (x, y), v in zip(sub.keypoints, sub.keypoints_visible):
                xt, yt = tf.apply_point(x, y)
                inside = 0.0 <= xt <= 1.0 and 0.0 <= yt <= 1.0
                if v and not inside:
                    stats.dropped_keypoints += 1
                pts.append([min(max(xt, 0.0), 1.0), min(max(yt, 0.0), 1.0)])
                flags.append(bool(v) and inside)
            kps = torch.tensor(pts, dtype=torch.float32)
            vis = torch.tensor(flags, dtype=torch.bool)
        embedding = read_embedding(root / sub.embedding) if sub.embedding else None
        subjects.append(
            SubjectSample(
                name=sub.name,
                box=box,
                mask=mask,
                face_box=face_box,
                keypoints=kps,
                keypoints_visible=vis,
                embedding=embedding,
            )
        )

    gaze = []
    for g in record.gaze:
        head = g["head_box"]
        target = g["target"]
        center = ((head[0] + head[2]) / 2.0, (head[1] + head[3]) / 2.0)
        head_t = tf.apply_box(tuple(head))
        if head_t is None or not tf.contains(*center) or not tf.contains(*target):
            stats.dropped_gaze += 1
            continue
        try:
            gaze.append(GazeInstance(head_box=head_t, target=tf.apply_point(*target)))
        except ValueError:
            stats.dropped_gaze += 1

    interactions = []
    for verb, obj in record.interactions:
        if vocab is not None:
            interactions.append(vocab.id_of(verb, obj))

    sample = TrainingSample(
        image=window.contiguous(),
        caption=record.caption,
        query=record.query,
        subjects=subjects,
        gaze=gaze,
        interactions=interactions,
    )
    return sample, stats, tf


# ---------------------------------------------------------------------------
# annotation building (toy extractor pipeline)


@dataclass
class ExtractorBundle:
    """Callables assembling annotations from a raw (image, caption) pair."""

    tagger: Callable[[str], tuple[list[str], list[tuple[str, str]]]]
    detector: Callable[[torch.Tensor, list[str]], list[tuple[str, Box]]]
    segmenter: SegmenterAdapter
    face_locator: Callable[[torch.Tensor, str, Box], Box | None]
    face_embedder: FaceEmbedderAdapter
    pose: PoseAdapter | None = None
    gaze: GazeAdapter | None = None
    person_classes: frozenset = PERSON_CLASSES


def toy_tagger(
    caption: str,
    class_names: Sequence[str],
    verbs: Sequence[str] = DEFAULT_VERBS,
    person_classes: frozenset = PERSON_CLASSES,
) -> tuple[list[str], list[tuple[str, str]]]:
    """Entity names = known class words; interactions = person-verb-object trigrams."""
    tokens = [t for t in "".join(c if c.isalnum() else " " for c in caption.lower()).split() if t]
    names = []
    for t in tokens:
        if t in class_names and t not in names:
            names.append(t)
    interactions = []
    for i in range(1, len(tokens) - 1):
        if tokens[i] in verbs and tokens[i - 1] in person_classes and tokens[i + 1] in class_names:
            pair = (tokens[i], tokens[i + 1])
            if pair not in interactions:
                interactions.append(pair)
    return names, interactions


def toy_color_detector(
    palette: dict | None = None, tolerance: float = 0.12, min_area: int = 4
) -> Callable[[torch.Tensor, list[str]], list[tuple[str, Box]]]:
    """Instance detector matching flat-colored regions to palette entries.

    Pixels within max-norm ``tolerance`` of a class color are that
    class; connected components become instances (interior holes from
    face patches or beacons do not split a component).
    """
    palette = dict(DEFAULT_PALETTE) if palette is None else palette

    def detect(image: torch.Tensor, names: list[str]) -> list[tuple[str, Box]]:
        _, h, w = image.shape
        arr = image.detach().numpy()
        out: list[tuple[str, Box]] = []
        for name in names:
            if name not in palette:
                continue
            color = np.asarray(palette[name], dtype=np.float32).reshape(3, 1, 1)
            match = (np.abs(arr - color) <= tolerance).all(axis=0)
            labeled, count = ndimage.label(match)
            for idx in range(1, count + 1):
                ys, xs = np.nonzero(labeled == idx)
                if ys.size < min_area:
                    continue
                box = (
                    float(xs.min()) / w,
                    float(ys.min()) / h,
                    float(xs.max() + 1) / w,
                    float(ys.max() + 1) / h,
                )
                out.append((name, box))
        out.sort(key=lambda item: (names.index(item[0]), item[1][1], item[1][0]))
        return out

    return detect


def toy_face_locator(image: torch.Tensor, name: str, box: Box) -> Box | None:
    if name not in PERSON_CLASSES:
        return None
    _, h, w = image.shape
    return snap_box(face_box_of(box), h, w)


def toy_extractor_bundle(
    palette: dict | None = None,
    verbs: Sequence[str] = DEFAULT_VERBS,
    gaze_temperature: float = 0.05,
    pose_temperature: float = 0.05,
) -> ExtractorBundle:
    palette = dict(DEFAULT_PALETTE) if palette is None else palette
    names = list(palette)

    return ExtractorBundle(
        tagger=lambda caption: toy_tagger(caption, names, verbs),
        detector=toy_color_detector(palette),
        segmenter=ToySegmenter(),
        face_locator=toy_face_locator,
        face_embedder=ToyFaceEmbedder(),
        pose=ToyPoseDetector(temperature=pose_temperature),
        gaze=ToyGazeDetector(temperature=gaze_temperature),
    )


@dataclass
class BuiltSubject:
    name: str
    box: Box
    mask: torch.Tensor
    face_box: Box | None
    keypoints: torch.Tensor | None
    keypoints_visible: torch.Tensor | None
    embedding: torch.Tensor | None


@dataclass
class BuiltSample:
    caption: str
    query: str
    subjects: list
    gaze: list  # list[(head_box, target tuple)]
    interactions: list  # list[(verb, object)]


def annotation_builder(
    image: torch.Tensor,
    caption: str,
    bundle: ExtractorBundle,
    sample_id: str = "?",
) -> BuiltSample:
    """Assemble one sample's annotations from the extractor stack.

    Deterministic given the extractor outputs; each stage failure is
    reported with the stage name and sample id.
    """

    def stage(name, fn, *args):
        try:
            return fn(*args)
        except Exception as exc:
            raise DataError(f"annotation stage '{name}' failed for sample {sample_id}: {exc}") from exc

    names, interactions = stage("tag", bundle.tagger, caption)
    instances = stage("detect", bundle.detector, image, names)
    boxes = [box for _, box in instances]
    masks = stage("segment", bundle.segmenter.masks, image, boxes)

    _, h, w = image.shape
    subjects = []
    for (name, box), mask in zip(instances, masks):
        face_box = stage("face", bundle.face_locator, image, name, box)
        embedding = None
        if face_box is not None:
            y0, y1, x0, x1 = crop_bounds(face_box, h, w)
            embedding = stage("embed", bundle.face_embedder.embed, image[:, y0:y1, x0:x1])
        keypoints = None
        visible = None
        if bundle.pose is not None:
            y0, y1, x0, x1 = crop_bounds(box, h, w)
            kset = stage("pose", bundle.pose.predict, image[:, y0:y1, x0:x1])
            pts = [from_box_coords((float(p[0]), float(p[1])), snap_box(box, h, w)) for p in kset.coords]
            keypoints = torch.tensor(pts, dtype=torch.float32)
            visible = kset.visible.clone()
        subjects.append(
            BuiltSubject(
                name=name,
                box=box,
                mask=mask,
                face_box=face_box,
                keypoints=keypoints,
                keypoints_visible=visible,
                embedding=embedding,
            )
        )

    gaze = []
    head_subjects = [s for s in subjects if s.face_box is not None]
    if bundle.gaze is not None and head_subjects and float(image[0].max()) > 0.5:
        preds = stage("gaze", bundle.gaze.predict, image, [s.face_box for s in head_subjects])
        for sub, pred in zip(head_subjects, preds):
            if pred is None:
                continue
            gaze.append((sub.face_box, (float(pred.target[0]), float(pred.target[1]))))

    return BuiltSample(
        caption=caption,
        query=build_query([s.name for s in subjects]),
        subjects=subjects,
        gaze=gaze,
        interactions=list(interactions),
    )


def materialize_training_sample(
    sample: TrainingSample,
    out_dir: str | Path,
    stem: str,
    vocab: HoiVocabulary | None = None,
) -> SampleRecord:
    """Write a sample's image/masks/embeddings and return its record."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(exist_ok=True)
    (out / "embeddings").mkdir(exist_ok=True)
    image_rel = f"images/{stem}.png"
    save_image(sample.image, out / image_rel)
    subjects = []
    for i, sub in enumerate(sample.subjects):
        mask_rel = f"masks/{stem}_{i}.png"
        save_mask(sub.mask, out / mask_rel)
        emb_rel = None
        if sub.embedding is not None:
            emb_rel = f"embeddings/{stem}_{i}.bin"
            write_embedding(sub.embedding, out / emb_rel)
        subjects.append(
            SubjectRecord(
                name=sub.name,
                box=tuple(float(v) for v in sub.box),
                mask=mask_rel,
                face_box=tuple(float(v) for v in sub.face_box) if sub.face_box else None,
                keypoints=[[float(x), float(y)] for x, y in sub.keypoints]
                if sub.keypoints is not None
                else None,
                keypoints_visible=[bool(v) for v in sub.keypoints_visible]
                if sub.keypoints_visible is not None
                else None,
                embedding=emb_rel,
            )
        )
    gaze = [
        {
            "head_box": [float(v) for v in g.head_box],
            "target": [float(v) for v in g.target],
        }
        for g in sample.gaze
    ]
    interactions = []
    if vocab is not None:
        interactions = [list(vocab.pair_of(c)) for c in sample.interactions]
    return SampleRecord(
        image=image_rel,
        caption=sample.caption,
        query=sample.query,
        subjects=subjects,
        gaze=gaze,
        interactions=interactions,
    )


def write_scene_dataset(
    count: int,
    seed: int,
    out_dir: str | Path,
    size: int = 48,
    bundle: ExtractorBundle | None = None,
) -> Path:
    """Render ``count`` synthetic scenes, annotate them with the toy
    extractor stack, and write a manifest.jsonl plus all assets under
    ``out_dir``. Returns the manifest path."""
    from .scenes import scene_bank

    bundle = bundle or toy_extractor_bundle()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for i, (image, ann) in enumerate(scene_bank(count, seed=seed, size=size)):
        built = annotation_builder(image, ann.caption, bundle, sample_id=str(i))
        records.append(materialize_sample(image, built, out, stem=f"scene_{i:05d}"))
    manifest = out / "manifest.jsonl"
    write_manifest(records, manifest)
    return manifest


def materialize_sample(
    image: torch.Tensor,
    built: BuiltSample,
    out_dir: str | Path,
    stem: str,
) -> SampleRecord:
    """Write one built sample's assets and return its manifest record."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(exist_ok=True)
    (out / "embeddings").mkdir(exist_ok=True)
    image_rel = f"images/{stem}.png"
    save_image(image, out / image_rel)
    subjects = []
    for i, sub in enumerate(built.subjects):
        mask_rel = f"masks/{stem}_{i}.png"
        save_mask(sub.mask, out / mask_rel)
        emb_rel = None
        if sub.embedding is not None:
            emb_rel = f"embeddings/{stem}_{i}.bin"
            write_embedding(sub.embedding, out / emb_rel)
        subjects.append(
            SubjectRecord(
                name=sub.name,
                box=tuple(float(v) for v in sub.box),
                mask=mask_rel,
                face_box=tuple(float(v) for v in sub.face_box) if sub.face_box else None,
                keypoints=[[float(x), float(y)] for x, y in sub.keypoints]
                if sub.keypoints is not None
                else None,
                keypoints_visible=[bool(v) for v in sub.keypoints_visible]
                if sub.keypoints_visible is not None
                else None,
                embedding=emb_rel,
            )
        )
    gaze = [
        {"head_box": [float(v) for v in head], "target": [float(t) for t in target]}
        for head, target in built.gaze
    ]
    return SampleRecord(
        image=image_rel,
        caption=built.caption,
        query=built.query,
        subjects=subjects,
        gaze=gaze,
        interactions=[[v, o] for v, o in built.interactions],
    )
