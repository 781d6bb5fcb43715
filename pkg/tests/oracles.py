"""Independent reference implementations used to pin expected values.

Everything here is written the slow, obvious way (explicit loops,
float64 numpy, no torch) so a disagreement with the package points at
the package, not at a shared bug. Tests import these; the package never
does.
"""

from __future__ import annotations

import math

import numpy as np


# -- image ops ------------------------------------------------------------


def np_dilate(mask: np.ndarray, k: int) -> np.ndarray:
    """Max over a k x k window, zero padding, by explicit loops."""
    h, w = mask.shape
    pad = k // 2
    out = np.zeros_like(mask, dtype=np.float64)
    for r in range(h):
        for c in range(w):
            best = 0.0
            for dr in range(-pad, pad + 1):
                for dc in range(-pad, pad + 1):
                    rr, cc = r + dr, c + dc
                    if 0 <= rr < h and 0 <= cc < w:
                        best = max(best, float(mask[rr, cc]))
            out[r, c] = best
    return out


def np_erode(mask: np.ndarray, k: int) -> np.ndarray:
    """Min over a k x k window, zero padding (outside counts as 0)."""
    h, w = mask.shape
    pad = k // 2
    out = np.zeros_like(mask, dtype=np.float64)
    for r in range(h):
        for c in range(w):
            worst = 1.0
            for dr in range(-pad, pad + 1):
                for dc in range(-pad, pad + 1):
                    rr, cc = r + dr, c + dc
                    if 0 <= rr < h and 0 <= cc < w:
                        worst = min(worst, float(mask[rr, cc]))
                    else:
                        worst = 0.0
            out[r, c] = worst
    return out


def np_morph_gradient(mask: np.ndarray, k: int = 3) -> np.ndarray:
    return np_dilate(mask, k) - np_erode(mask, k)


def np_laplacian(image: np.ndarray) -> np.ndarray:
    """4-neighbor Laplacian per channel, zero padding, explicit loops."""
    c, h, w = image.shape
    out = np.zeros_like(image, dtype=np.float64)
    for ch in range(c):
        for r in range(h):
            for col in range(w):
                up = image[ch, r - 1, col] if r > 0 else 0.0
                down = image[ch, r + 1, col] if r < h - 1 else 0.0
                left = image[ch, r, col - 1] if col > 0 else 0.0
                right = image[ch, r, col + 1] if col < w - 1 else 0.0
                out[ch, r, col] = up + down + left + right - 4.0 * image[ch, r, col]
    return out


def np_boundary_loss(x0: np.ndarray, x0_hat: np.ndarray, band: np.ndarray) -> float:
    """Masked mean of the squared Laplacian-response difference."""
    band = (band > 0.5).astype(np.float64)
    n = band.sum()
    if n == 0:
        return 0.0
    diff = np_laplacian(x0) - np_laplacian(x0_hat)
    total = 0.0
    for ch in range(x0.shape[0]):
        total += float(((diff[ch] ** 2) * band).sum())
    return total / (n * x0.shape[0])


def np_soft_argmax(
    values: np.ndarray,
    temperature: float,
    mask: np.ndarray | None = None,
    row_offset: int = 0,
    col_offset: int = 0,
    grid_height: int | None = None,
    grid_width: int | None = None,
) -> tuple[float, float]:
    """Expected pixel-center (x, y) under softmax(values / temperature)."""
    h, w = values.shape
    gh = grid_height if grid_height is not None else h
    gw = grid_width if grid_width is not None else w
    logits = np.asarray(values, dtype=np.float64) / temperature
    if mask is not None:
        logits = np.where(mask, logits, -np.inf)
    flat = logits.reshape(-1)
    flat = flat - flat.max()
    weights = np.exp(flat)
    weights /= weights.sum()
    weights = weights.reshape(h, w)
    x = 0.0
    y = 0.0
    for r in range(h):
        for c in range(w):
            x += weights[r, c] * (col_offset + c + 0.5) / gw
            y += weights[r, c] * (row_offset + r + 0.5) / gh
    return x, y


def np_mean_pool_embed(crop: np.ndarray, grid: int = 4) -> np.ndarray:
    """Adaptive average pooling to grid x grid, flattened and normalized.

    Bin b along an axis of size n covers [floor(b*n/g), ceil((b+1)*n/g)),
    the same partition torch's adaptive_avg_pool2d uses.
    """
    c, h, w = crop.shape
    pooled = np.zeros((c, grid, grid), dtype=np.float64)
    for ch in range(c):
        for br in range(grid):
            r0 = (br * h) // grid
            r1 = -((-(br + 1) * h) // grid)
            for bc in range(grid):
                c0 = (bc * w) // grid
                c1 = -((-(bc + 1) * w) // grid)
                pooled[ch, br, bc] = crop[ch, r0:r1, c0:c1].mean()
    v = pooled.reshape(-1)
    return v / np.linalg.norm(v)


# -- scalar loss formulas --------------------------------------------------


def scalar_focal(
    positives: set[int],
    logits: np.ndarray,
    gamma: float,
    alpha: float,
    valid: np.ndarray | None = None,
) -> float:
    """Per-class focal terms straight from the definition, in float64."""
    vals = []
    for i, logit in enumerate(np.asarray(logits, dtype=np.float64)):
        if valid is not None and not valid[i]:
            continue
        p = 1.0 / (1.0 + math.exp(-logit))
        if i in positives:
            vals.append(-alpha * (1.0 - p) ** gamma * math.log(p))
        else:
            vals.append(-(1.0 - alpha) * p**gamma * math.log(1.0 - p))
    if not vals:
        return 0.0
    return float(np.mean(vals))


def np_cosine(u: np.ndarray, w: np.ndarray) -> float:
    u = np.asarray(u, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    return float(np.dot(u, w) / (np.linalg.norm(u) * np.linalg.norm(w)))


def central_diff(f, x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central finite-difference gradient of scalar f at x, in float64."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


# -- evaluation metrics ----------------------------------------------------


def oracle_average_precision(flags: list[bool], num_gt: int) -> float:
    """All-point interpolated AP from a ranked hit/miss list.

    At each true positive, interpolated precision = the best precision
    achieved at that recall level or deeper down the ranking. Computed
    by a direct scan per recall step, no envelope trick.
    """
    if num_gt == 0:
        raise ValueError("AP undefined with no ground truth")
    precisions = []
    recalls = []
    tp = 0
    for rank, hit in enumerate(flags, start=1):
        if hit:
            tp += 1
        precisions.append(tp / rank)
        recalls.append(tp / num_gt)
    ap = 0.0
    prev_recall = 0.0
    for i, hit in enumerate(flags):
        if not hit:
            continue
        p_interp = max(precisions[j] for j in range(i, len(flags)))
        ap += (recalls[i] - prev_recall) * p_interp
        prev_recall = recalls[i]
    return ap


def oracle_interaction_map(
    detections: list[tuple[str, int, float]],
    ground_truth: dict[str, set[int]],
    num_classes: int,
    rare: set[int] | None = None,
) -> dict:
    """Label-only mAP by per-class brute force.

    detections: (image_id, class_id, score) triples. A detection is a
    hit if its image's ground truth has the class and no earlier-ranked
    detection already claimed that (image, class) instance.
    """
    per_class: dict[int, float] = {}
    skipped = []
    for cls in range(num_classes):
        gt_images = {img for img, classes in ground_truth.items() if cls in classes}
        if not gt_images:
            skipped.append(cls)
            continue
        ranked = sorted(
            [d for d in detections if d[1] == cls], key=lambda d: (-d[2], d[0])
        )
        claimed: set[str] = set()
        flags = []
        for img, _, _ in ranked:
            if img in gt_images and img not in claimed:
                claimed.add(img)
                flags.append(True)
            else:
                flags.append(False)
        per_class[cls] = oracle_average_precision(flags, len(gt_images))
    if not per_class:
        raise ValueError("no class has ground truth")
    result = {
        "full": float(np.mean(list(per_class.values()))),
        "per_class": per_class,
        "skipped": skipped,
    }
    if rare is not None:
        rare_vals = [v for c, v in per_class.items() if c in rare]
        common_vals = [v for c, v in per_class.items() if c not in rare]
        result["rare"] = float(np.mean(rare_vals)) if rare_vals else None
        result["nonrare"] = float(np.mean(common_vals)) if common_vals else None
    return result


def oracle_greedy_pairs(sim: np.ndarray) -> list[tuple[int, int]]:
    """Greedy matching by repeated full-matrix scan.

    Ties broken by lowest reference index, then lowest generated index,
    matching a row-major argmax.
    """
    sim = np.asarray(sim, dtype=np.float64).copy()
    n_ref, n_gen = sim.shape
    used_ref: set[int] = set()
    used_gen: set[int] = set()
    pairs = []
    for _ in range(min(n_ref, n_gen)):
        best = None
        best_val = -np.inf
        for i in range(n_ref):
            if i in used_ref:
                continue
            for j in range(n_gen):
                if j in used_gen:
                    continue
                if sim[i, j] > best_val:
                    best_val = sim[i, j]
                    best = (i, j)
        if best is None:
            break
        pairs.append(best)
        used_ref.add(best[0])
        used_gen.add(best[1])
    return pairs


def oracle_greedy_similarity(per_image: list[np.ndarray]) -> float | None:
    """Mean cosine over greedy pairs pooled across all images."""
    values = []
    for sim in per_image:
        sim = np.asarray(sim, dtype=np.float64)
        if sim.size == 0:
            continue
        for i, j in oracle_greedy_pairs(sim):
            values.append(sim[i, j])
    if not values:
        return None
    return float(np.mean(values))


def oracle_gaze_accuracy(
    cases: list[dict],
) -> tuple[float | None, int, int, int]:
    """Count correct/incorrect/excluded directly from raw case dicts.

    Each case: gt_target (x, y), pred_target (x, y) or None,
    ref_boxes [(label, box)], gen_boxes [(label, box)]. The ground-truth
    gazed label comes from the smallest-area ref box containing the
    target (lowest index on ties); no containing box means excluded.
    """
    correct = incorrect = excluded = 0
    for case in cases:
        tx, ty = case["gt_target"]
        containing = []
        for idx, (label, box) in enumerate(case["ref_boxes"]):
            x0, y0, x1, y1 = box
            if x0 <= tx <= x1 and y0 <= ty <= y1:
                containing.append(((x1 - x0) * (y1 - y0), idx, label))
        if not containing:
            excluded += 1
            continue
        containing.sort()
        gt_label = containing[0][2]
        pred = case["pred_target"]
        hit = False
        if pred is not None:
            px, py = pred
            for label, (x0, y0, x1, y1) in case["gen_boxes"]:
                if label == gt_label and x0 <= px <= x1 and y0 <= py <= y1:
                    hit = True
                    break
        if hit:
            correct += 1
        else:
            incorrect += 1
    total = correct + incorrect
    acc = 100.0 * correct / total if total else None
    return acc, correct, incorrect, excluded


def oracle_affine_point(
    point: tuple[float, float],
    new_w: int,
    new_h: int,
    crop_x: int,
    crop_y: int,
    out: int,
) -> tuple[float, float]:
    """Resize-then-crop coordinate map done symbolically."""
    x_px = point[0] * new_w
    y_px = point[1] * new_h
    return (x_px - crop_x) / out, (y_px - crop_y) / out
