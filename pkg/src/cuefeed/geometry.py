"""Boxes, crops and the pixel-center coordinate convention.

All continuous coordinates are normalized to [0, 1] relative to image
width/height. The continuous coordinate of pixel index i along an axis
of n pixels is (i + 0.5) / n, i.e. coordinates address pixel centers.
Boxes are (x_min, y_min, x_max, y_max) tuples with min < max.
"""

from __future__ import annotations

import torch

Box = tuple[float, float, float, float]


def validate_box(box) -> Box:
    """Check ordering and range; returns the box as a plain float tuple."""
    if len(box) != 4:
        raise ValueError(f"box must have 4 entries, got {box!r}")
    x0, y0, x1, y1 = (float(v) for v in box)
    if not (0.0 <= x0 < x1 <= 1.0 and 0.0 <= y0 < y1 <= 1.0):
        raise ValueError(
            f"box {box!r} must satisfy 0 <= min < max <= 1 on both axes"
        )
    return (x0, y0, x1, y1)


def box_center(box: Box) -> tuple[float, float]:
    x0, y0, x1, y1 = box
    return ((x0 + x1) / 2.0, (y0 + y1) / 2.0)


def box_area(box: Box) -> float:
    x0, y0, x1, y1 = box
    return max(0.0, x1 - x0) * max(0.0, y1 - y0)


def box_iou(a: Box, b: Box) -> float:
    ix0 = max(a[0], b[0])
    iy0 = max(a[1], b[1])
    ix1 = min(a[2], b[2])
    iy1 = min(a[3], b[3])
    inter = max(0.0, ix1 - ix0) * max(0.0, iy1 - iy0)
    if inter == 0.0:
        return 0.0
    return inter / (box_area(a) + box_area(b) - inter)


def point_in_box(point, box: Box) -> bool:
    """Inclusive on all four edges."""
    x, y = float(point[0]), float(point[1])
    return box[0] <= x <= box[2] and box[1] <= y <= box[3]


def crop_bounds(box: Box, height: int, width: int) -> tuple[int, int, int, int]:
    """Pixel-index window (y0, y1, x0, x1) covered by a normalized box.

    Rounds outward just enough to keep at least one pixel per axis.
    Raises on boxes that round to zero area (degenerate crop).
    """
    x0f, y0f, x1f, y1f = validate_box(box)
    x0 = int(x0f * width)
    x1 = int(-((-x1f * width) // 1))  # ceil
    y0 = int(y0f * height)
    y1 = int(-((-y1f * height) // 1))
    x0, y0 = max(0, x0), max(0, y0)
    x1, y1 = min(width, x1), min(height, y1)
    if x1 <= x0 or y1 <= y0:
        raise ValueError(f"box {box!r} covers no pixels on a {height}x{width} grid")
    return y0, y1, x0, x1


def crop_box(image: torch.Tensor, box: Box) -> torch.Tensor:
    """Slice the pixel window of a normalized box out of a (C, H, W) image."""
    if image.ndim != 3:
        raise ValueError(f"expected (C, H, W), got shape {tuple(image.shape)}")
    _, h, w = image.shape
    y0, y1, x0, x1 = crop_bounds(box, h, w)
    return image[:, y0:y1, x0:x1]


def snap_box(box: Box, height: int, width: int) -> Box:
    """Align a box to the pixel grid it covers (same rounding as crop_bounds)."""
    y0, y1, x0, x1 = crop_bounds(box, height, width)
    return (x0 / width, y0 / height, x1 / width, y1 / height)


def pixel_centers(n: int, device=None, dtype=torch.float32) -> torch.Tensor:
    """Continuous coordinates of the n pixel centers along one axis."""
    if n < 1:
        raise ValueError("need at least one pixel")
    return (torch.arange(n, device=device, dtype=dtype) + 0.5) / n


def to_box_coords(point, box: Box) -> tuple[float, float]:
    """Map an image-normalized point into box-normalized coordinates."""
    x0, y0, x1, y1 = box
    return ((float(point[0]) - x0) / (x1 - x0), (float(point[1]) - y0) / (y1 - y0))


def from_box_coords(point, box: Box) -> tuple[float, float]:
    """Map a box-normalized point back to image coordinates."""
    x0, y0, x1, y1 = box
    return (x0 + float(point[0]) * (x1 - x0), y0 + float(point[1]) * (y1 - y0))
