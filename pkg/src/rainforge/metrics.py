"""Attack success rate, single-class AP@IoU, PSNR and SSIM."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .errors import InvalidArgumentError, UndefinedMetricError


@dataclass
class EvalSummary:
    success_rate: float | None = None
    ap50: float | None = None
    psnr_db: float | None = None
    ssim: float | None = None
    n_images: int = 0
    n_eligible: int = 0

    def as_dict(self):
        return asdict(self)


def success_rate(model, clean_images, adv_images, labels):
    """Fraction of originally-correct images whose adversarial prediction is wrong."""
    labels = np.asarray(labels)
    clean_pred = model.predict(np.asarray(clean_images))
    keep = clean_pred == labels
    if not keep.any():
        raise UndefinedMetricError("no image is classified correctly when clean")
    adv_pred = model.predict(np.asarray(adv_images)[keep])
    return float((adv_pred != labels[keep]).mean())


def iou(a, b):
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def average_precision(detections, ground_truth, iou_threshold=0.5):
    """All-points interpolated AP for one class.

    Parameters
    ----------
    detections : iterable of (image_id, (x0, y0, x1, y1), score)
    ground_truth : mapping image_id -> list of (x0, y0, x1, y1)
    """
    n_gt = sum(len(v) for v in ground_truth.values())
    if n_gt == 0:
        raise UndefinedMetricError("average precision needs at least one ground-truth box")
    dets = sorted(detections, key=lambda d: -d[2])  # stable: ties keep input order
    used = {k: np.zeros(len(v), bool) for k, v in ground_truth.items()}
    tp = np.zeros(len(dets))
    for i, (img, box, _) in enumerate(dets):
        gts = ground_truth.get(img, [])
        best, best_j = 0.0, -1
        for j, g in enumerate(gts):
            o = iou(box, g)
            if o > best:
                best, best_j = o, j
        if best_j >= 0 and best >= iou_threshold and not used[img][best_j]:
            used[img][best_j] = True
            tp[i] = 1
    if not len(dets):
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(dets) + 1)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def detector_ap(model, dataset, images=None, iou_threshold=0.5, score_threshold=0.01):
    """AP@IoU of ``model`` over a detection split (optionally on substitute images)."""
    images = dataset.images if images is None else images
    dets, gt = [], {}
    for i, (img, boxes) in enumerate(zip(images, dataset.annotations)):
        gt[i] = list(boxes)
        for x0, y0, x1, y1, s in model.detect(img, score_threshold):
            dets.append((i, (x0, y0, x1, y1), s))
    return average_precision(dets, gt, iou_threshold)


def _same_shape(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidArgumentError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b):
    """Peak signal-to-noise ratio in dB for images on [0, 1]; ``inf`` when identical."""
    a, b = _same_shape(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return math.inf
    return -10.0 * math.log10(mse)


def _gaussian_window(size=11, sigma=1.5):
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x * x) / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img, win):
    half = len(win) // 2
    out = correlate1d(img, win, axis=0, mode="constant")
    out = correlate1d(out, win, axis=1, mode="constant")
    return out[half:img.shape[0] - half, half:img.shape[1] - half]


def ssim(a, b, win_size=11, sigma=1.5, k1=0.01, k2=0.03):
    """Mean single-scale SSIM over fully-covered window positions, averaged across channels."""
    a, b = _same_shape(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if min(a.shape[:2]) < win_size:
        raise InvalidArgumentError(f"image {a.shape[:2]} smaller than the {win_size}x{win_size} window")
    c1, c2 = k1 ** 2, k2 ** 2
    win = _gaussian_window(win_size, sigma)
    scores = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mx, my = _filter_valid(x, win), _filter_valid(y, win)
        vx = _filter_valid(x * x, win) - mx * mx
        vy = _filter_valid(y * y, win) - my * my
        cxy = _filter_valid(x * y, win) - mx * my
        num = (2 * mx * my + c1) * (2 * cxy + c2)
        den = (mx * mx + my * my + c1) * (vx + vy + c2)
        scores.append(float(np.mean(num / den)))
    return float(np.mean(scores))
