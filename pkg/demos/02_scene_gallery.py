"""Render a bank of synthetic scenes and run every toy detector on them.

Each scene is a flat background with colored rectangle subjects. People
carry a red/green face patch and green keypoint beacons; a gaze is a
small bright-red beacon at the target point. The toy detectors are
built to read exactly these cues, which is what makes the feedback
losses differentiable end to end.

Writes a contact sheet to demos/out/scene_gallery.png.
"""

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from cuefeed.config import default_config
from cuefeed.detectors import HoiVocabulary
from cuefeed.scenes import DEFAULT_OBJECTS, DEFAULT_VERBS, scene_bank
from cuefeed.train import default_detector_bundle

out_dir = Path(__file__).parent / "out"
out_dir.mkdir(exist_ok=True)

vocab = HoiVocabulary.from_products(DEFAULT_VERBS, DEFAULT_OBJECTS)
detectors = default_detector_bundle(default_config(), vocab)
bank = scene_bank(9, seed=303, size=48)

fig, axes = plt.subplots(3, 3, figsize=(9, 9))
for ax, (image, ann) in zip(axes.flat, bank):
    ax.imshow(image.permute(1, 2, 0).numpy())
    ax.set_title(ann.caption, fontsize=7)
    ax.axis("off")
fig.tight_layout()
fig.savefig(out_dir / "scene_gallery.png", dpi=110)
print(f"wrote {out_dir / 'scene_gallery.png'}")

image, ann = bank[0]
print(f"\nfirst scene: {ann.caption!r}")
print(f"  query: {ann.query!r}")
print(f"  subjects: {[s.name for s in ann.subjects]}")
print(f"  interactions: {ann.interactions}")

# The gaze detector reads the red channel outside each head box.
if ann.gaze:
    preds = detectors.gaze.predict(image, [g.head_box for g in ann.gaze])
    for g, p in zip(ann.gaze, preds):
        print(f"  gaze gt target {tuple(round(v, 3) for v in g.target)}"
              f" -> predicted {tuple(round(float(v), 3) for v in p.target)}")

# The HOI head pools a deterministic random projection of the image and
# reports its top classes.
hoi = detectors.hoi.predict(image)
names = [vocab.pair_of(int(d.class_id)) for d in hoi.detections[:3]]
print(f"  top-3 interaction guesses: {names}")

# Face embeddings are unit vectors; identical crops match exactly.
faces = ann.subjects[0].face_box if ann.subjects else None
if faces is not None:
    from cuefeed.geometry import crop_bounds

    y0, y1, x0, x1 = crop_bounds(faces, 48, 48)
    emb = detectors.face_embedder.embed(image[:, y0:y1, x0:x1])
    print(f"  face embedding dim {emb.shape[0]}, norm {float(emb.norm()):.4f}")
