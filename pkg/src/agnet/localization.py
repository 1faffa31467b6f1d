"""Weakly supervised object localization from a trained classifier.

No box supervision and no gradients are involved: the pipeline reads the
forward-pass evidence (attention maps and class activation maps), fuses
them, and fits a box.

1. Collect candidate maps: each attention map, and the class activation
   map of the predicted class (head weights applied to the final
   feature block, clamped at zero).
2. Upsample every map to input resolution, scale each to peak 1, and
   average them.
3. Blur with a Gaussian (sigma 2) and threshold at half the peak.
4. Split the mask into 8-connected components.
5. Keep the set of components whose bounding boxes mutually overlap with
   the largest combined activation; the box is the tight bound of their
   union.

Boxes are half-open pixel rectangles (x0, y0, x1, y1).
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from . import tensor as T
from .data import whiten
from .errors import ShapeError
from .models import Model
from .tensor import Tensor

Box = Tuple[int, int, int, int]

MAP_MODES = ("ag1", "ag2", "cam", "ag-all")

_EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


def cam(features: np.ndarray, weights: np.ndarray, class_idx: np.ndarray) -> np.ndarray:
    """Class activation maps: per-image head row applied across space.

    features [N,C,h,w], weights [K,C], class_idx [N] -> [N,h,w], clamped
    at zero since only positive evidence localizes the class.
    """
    features = np.asarray(features)
    weights = np.asarray(weights)
    if features.ndim != 4 or weights.ndim != 2 or weights.shape[1] != features.shape[1]:
        raise ShapeError(
            f"cam expects features [N,C,h,w] and weights [K,C], got {features.shape} and {weights.shape}"
        )
    picked = weights[np.asarray(class_idx)]              # [N,C]
    maps = np.einsum("nc,nchw->nhw", picked, features)
    return np.maximum(maps, 0.0)


def _peak_normalize(m: np.ndarray) -> np.ndarray:
    peak = m.max()
    return m / peak if peak > 0 else m


def _upsample_to(m: np.ndarray, h: int, w: int) -> np.ndarray:
    """Bilinear upsample a [H,W] map using the shared resize op."""
    with T.no_grad():
        t = Tensor(m[None, None].astype(np.float64), dtype=np.float64)
        return T.bilinear_upsample2d(t, h, w).data[0, 0]


def combine_maps(maps: Sequence[np.ndarray], out_h: int, out_w: int) -> np.ndarray:
    """Upsample each map to (out_h, out_w), peak-normalize, and average."""
    if not maps:
        raise ValueError("combine_maps needs at least one map")
    acc = np.zeros((out_h, out_w), dtype=np.float64)
    for m in maps:
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (out_h, out_w):
            m = _upsample_to(m, out_h, out_w)
        acc += _peak_normalize(m)
    return acc / len(maps)


def extract_bbox(
    activation: np.ndarray, blur_sigma: float = 2.0, threshold_frac: float = 0.5
) -> Optional[Box]:
    """Fit one box to an activation map; None if the map carries no signal."""
    m = ndimage.gaussian_filter(np.asarray(activation, dtype=np.float64), blur_sigma)
    peak = m.max()
    if peak <= 0:
        return None
    mask = m > threshold_frac * peak
    labeled, n = ndimage.label(mask, structure=_EIGHT_CONNECTED)
    if n == 0:
        return None
    comps = []
    for sl in ndimage.find_objects(labeled):
        box = (sl[1].start, sl[0].start, sl[1].stop, sl[0].stop)
        region = labeled[sl] == len(comps) + 1
        comps.append((box, float(m[sl][region].sum())))
    chosen = _best_mutual_group(comps)
    xs0, ys0, xs1, ys1 = zip(*(comps[i][0] for i in chosen))
    return (min(xs0), min(ys0), max(xs1), max(ys1))


def _boxes_overlap(a: Box, b: Box) -> bool:
    return a[0] < b[2] and b[0] < a[2] and a[1] < b[3] and b[1] < a[3]


def _best_mutual_group(comps: List[Tuple[Box, float]]) -> Tuple[int, ...]:
    """Indices of the mutually overlapping component set with the largest
    total activation.  Component counts are tiny after thresholding, so
    exact subset search is affordable; past 12 components we fall back to
    growing greedily around the strongest one."""
    n = len(comps)
    if n == 1:
        return (0,)
    if n <= 12:
        best, best_score = (int(np.argmax([s for _, s in comps])),), -1.0
        order = range(n)
        for r in range(1, n + 1):
            for group in combinations(order, r):
                if all(
                    _boxes_overlap(comps[i][0], comps[j][0])
                    for i, j in combinations(group, 2)
                ):
                    score = sum(comps[i][1] for i in group)
                    if score > best_score:
                        best, best_score = group, score
        return best
    seed = int(np.argmax([s for _, s in comps]))
    group = [seed]
    for i in sorted(range(n), key=lambda i: -comps[i][1]):
        if i != seed and all(_boxes_overlap(comps[i][0], comps[j][0]) for j in group):
            group.append(i)
    return tuple(group)


def iou(a: Optional[Box], b: Optional[Box]) -> float:
    """Intersection over union of half-open boxes; a missing box scores 0."""
    if a is None or b is None:
        return 0.0
    ix = max(0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    if inter == 0:
        return 0.0
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return inter / (area_a + area_b - inter)


# ---------------------------------------------------------------------------
# model-level pipeline
# ---------------------------------------------------------------------------

@dataclass
class LocalizationOutput:
    boxes: List[Optional[Box]]
    maps: List[np.ndarray]          # fused input-resolution maps
    preds: np.ndarray               # predicted class per image


def localize(
    model: Model,
    images: np.ndarray,
    mode: str = "ag-all",
    blur_sigma: float = 2.0,
    threshold_frac: float = 0.5,
    batch_size: int = 64,
) -> LocalizationOutput:
    """Predict a box per image from forward-pass evidence only.

    mode selects the map source: "ag1"/"ag2" one attention gate, "cam"
    the class activation map, "ag-all" the average of all of them.  The
    baseline variant has no gates, so only "cam" applies.
    """
    if mode not in MAP_MODES:
        raise ValueError(f"unknown localization mode {mode!r}; expected one of {MAP_MODES}")
    if model.spec.variant == "sononet" and mode != "cam":
        raise ValueError(f"variant {model.spec.variant!r} only supports mode='cam'")
    images = np.asarray(images)
    h, w = images.shape[2], images.shape[3]
    model.train(False)
    boxes: List[Optional[Box]] = []
    fused: List[np.ndarray] = []
    preds = []
    with T.no_grad():
        for i in range(0, images.shape[0], batch_size):
            x = Tensor(whiten(images[i:i + batch_size]))
            out = model.forward(x)
            pred = out.logits.data.argmax(axis=1)
            preds.append(pred)
            cams = cam(out.cam_features.data, out.cam_weights, pred)
            for j in range(pred.shape[0]):
                sources = []
                if mode in ("ag1", "ag-all") and out.attention:
                    sources.append(out.attention[0].data[j, 0])
                if mode in ("ag2", "ag-all") and out.attention:
                    sources.append(out.attention[1].data[j, 0])
                if mode in ("cam", "ag-all"):
                    sources.append(cams[j])
                m = combine_maps(sources, h, w)
                fused.append(m)
                boxes.append(extract_bbox(m, blur_sigma, threshold_frac))
    return LocalizationOutput(boxes, fused, np.concatenate(preds))


def localization_metrics(
    labels: np.ndarray,
    true_boxes: Sequence[Optional[Box]],
    pred_boxes: Sequence[Optional[Box]],
    num_plane_classes: int,
) -> Dict[int, Dict[str, float]]:
    """Per-plane-class localization quality.

    mean_iou      average IoU against ground truth
    correctness   fraction with IoU above the absolute bar 0.5
    rel_correctness  fraction above half the best IoU the method reached
                  on that class, which rewards consistency even when the
                  absolute overlap is limited by map resolution
    """
    labels = np.asarray(labels)
    per_class: Dict[int, Dict[str, float]] = {}
    for c in range(num_plane_classes):
        idx = [i for i in range(labels.shape[0]) if labels[i] == c and true_boxes[i] is not None]
        if not idx:
            continue
        ious = np.array([iou(pred_boxes[i], true_boxes[i]) for i in idx])
        best = ious.max()
        per_class[c] = {
            "mean_iou": float(ious.mean()),
            "correctness": float((ious > 0.5).mean()),
            "rel_correctness": float((ious > 0.5 * best).mean()) if best > 0 else 0.0,
            "count": float(len(idx)),
        }
    return per_class
