"""Synthetic oriented-glyph dataset, augmentation, and batch sampling.

Every image is a shared low-frequency texture plus pixel noise plus (for
plane classes) a small elongated Gaussian ridge.  The ridge orientation
is the only class-discriminative signal: plane class k uses orientation
k * 36 degrees (mod 180) with small jitter, while background images
either have no ridge or one placed halfway between class orientations.
Backgrounds outnumber each plane class by a fixed factor, mirroring the
frame statistics the weighted sampler is designed to correct.

Generation is deterministic: sample i of a dataset with seed s is drawn
from ``default_rng([s, i])``, so any single image can be regenerated
without touching the rest.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from .errors import DataError
from .formats import read_agt, read_index, write_agt, write_index


@dataclass
class SyntheticSpec:
    num_plane_classes: int = 5
    n_per_class: int = 40
    bg_factor: int = 10          # backgrounds per plane-class-count
    height: int = 64
    width: int = 80
    texture_amp: float = 0.6
    noise_sigma: float = 0.25
    glyph_amp: float = 1.4
    glyph_len: float = 6.0       # ridge sigma along its axis (px)
    glyph_width: float = 2.0     # ridge sigma across its axis (px)
    angle_jitter: float = 8.0    # degrees, uniform
    seed: int = 0

    @property
    def num_classes(self) -> int:
        return self.num_plane_classes + 1

    @property
    def background_label(self) -> int:
        return self.num_plane_classes

    @property
    def n_background(self) -> int:
        return self.bg_factor * self.n_per_class

    @property
    def n_total(self) -> int:
        return self.num_plane_classes * self.n_per_class + self.n_background


@dataclass
class Dataset:
    images: np.ndarray                      # [N,1,H,W] float32, unwhitened
    labels: np.ndarray                      # [N] int64
    boxes: List[Optional[Tuple[int, int, int, int]]]
    spec: SyntheticSpec

    def subset(self, idx: np.ndarray) -> "Dataset":
        return Dataset(
            images=self.images[idx],
            labels=self.labels[idx],
            boxes=[self.boxes[i] for i in idx],
            spec=self.spec,
        )

    def __len__(self) -> int:
        return self.images.shape[0]


def _texture(rng: np.random.Generator, h: int, w: int, amp: float) -> np.ndarray:
    """Sum of three random low-frequency plane waves."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    out = np.zeros((h, w))
    for _ in range(3):
        theta = rng.uniform(0, math.pi)
        freq = rng.uniform(0.5, 2.5) * 2 * math.pi / max(h, w)
        phase = rng.uniform(0, 2 * math.pi)
        out += np.sin(freq * (xx * math.cos(theta) + yy * math.sin(theta)) + phase)
    return (amp / 3.0) * out


def _glyph(h: int, w: int, cx: float, cy: float, theta: float, spec: SyntheticSpec):
    """Oriented Gaussian ridge and its analytic 2-sigma bounding box."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dx, dy = xx - cx, yy - cy
    ct, st = math.cos(theta), math.sin(theta)
    u = dx * ct + dy * st        # along the ridge
    v = -dx * st + dy * ct       # across the ridge
    g = spec.glyph_amp * np.exp(
        -0.5 * (u / spec.glyph_len) ** 2 - 0.5 * (v / spec.glyph_width) ** 2
    )
    hx = 2.0 * math.sqrt((spec.glyph_len * ct) ** 2 + (spec.glyph_width * st) ** 2)
    hy = 2.0 * math.sqrt((spec.glyph_len * st) ** 2 + (spec.glyph_width * ct) ** 2)
    box = (
        max(0, int(math.floor(cx - hx))),
        max(0, int(math.floor(cy - hy))),
        min(w, int(math.ceil(cx + hx)) + 1),
        min(h, int(math.ceil(cy + hy)) + 1),
    )
    return g, box


def label_of_index(spec: SyntheticSpec, index: int) -> int:
    if not 0 <= index < spec.n_total:
        raise DataError(f"sample index {index} outside [0,{spec.n_total})")
    plane_total = spec.num_plane_classes * spec.n_per_class
    return index // spec.n_per_class if index < plane_total else spec.background_label


def make_sample(spec: SyntheticSpec, index: int):
    """Deterministically generate sample ``index``: (image [H,W], label, box)."""
    rng = np.random.default_rng([spec.seed, index])
    h, w = spec.height, spec.width
    label = label_of_index(spec, index)
    img = _texture(rng, h, w, spec.texture_amp)
    img += rng.standard_normal((h, w)) * spec.noise_sigma

    bin_step = math.pi / spec.num_plane_classes
    jitter = math.radians(spec.angle_jitter)
    box = None
    if label != spec.background_label:
        theta = label * bin_step + rng.uniform(-jitter, jitter)
        place = True
    else:
        place = rng.random() < 0.5
        k = rng.integers(spec.num_plane_classes)
        theta = (k + 0.5) * bin_step + rng.uniform(-jitter, jitter)
    if place:
        margin = 2.5 * spec.glyph_len
        cx = rng.uniform(margin, w - margin)
        cy = rng.uniform(margin, h - margin)
        g, gbox = _glyph(h, w, cx, cy, theta, spec)
        img += g
        if label != spec.background_label:
            box = gbox
    return img.astype(np.float32), label, box


def generate(spec: SyntheticSpec) -> Dataset:
    if spec.height % 16 or spec.width % 16:
        raise DataError(
            f"image extents must be divisible by 16, got {spec.height}x{spec.width}"
        )
    n = spec.n_total
    images = np.empty((n, 1, spec.height, spec.width), dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    boxes: List[Optional[Tuple[int, int, int, int]]] = []
    for i in range(n):
        img, lab, box = make_sample(spec, i)
        images[i, 0] = img
        labels[i] = lab
        boxes.append(box)
    return Dataset(images, labels, boxes, spec)


def split_indices(spec: SyntheticSpec, fractions=(0.6, 0.2, 0.2)):
    """Per-class contiguous 60/20/20 split in generation order."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise DataError(f"split fractions must sum to 1, got {fractions}")
    train, val, test = [], [], []
    counts = [spec.n_per_class] * spec.num_plane_classes + [spec.n_background]
    start = 0
    for count in counts:
        idx = np.arange(start, start + count)
        n_tr = int(round(fractions[0] * count))
        n_va = int(round(fractions[1] * count))
        train.append(idx[:n_tr])
        val.append(idx[n_tr:n_tr + n_va])
        test.append(idx[n_tr + n_va:])
        start += count
    return (
        np.concatenate(train),
        np.concatenate(val),
        np.concatenate(test),
    )


def whiten(images: np.ndarray) -> np.ndarray:
    """Per-image standardization: zero mean, unit variance (epsilon-guarded)."""
    x = np.asarray(images, dtype=np.float32)
    axes = tuple(range(1, x.ndim))
    mean = x.mean(axis=axes, keepdims=True)
    var = x.var(axis=axes, keepdims=True)
    return (x - mean) / np.sqrt(var + 1e-8)


# ---------------------------------------------------------------------------
# augmentation: one composed affine warp per image
# ---------------------------------------------------------------------------

def _warp_affine(img: np.ndarray, inv: np.ndarray, shift: np.ndarray) -> np.ndarray:
    """Bilinear resample img at inv @ (p - center - shift) + center, edge-clamped."""
    h, w = img.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy - shift[0], xx - cx - shift[1]
    sy = inv[0, 0] * dy + inv[0, 1] * dx + cy
    sx = inv[1, 0] * dy + inv[1, 1] * dx + cx
    sy = np.clip(sy, 0.0, h - 1.0)
    sx = np.clip(sx, 0.0, w - 1.0)
    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy, fx = sy - y0, sx - x0
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return (top * (1 - fy) + bot * fy).astype(img.dtype)


def _warp_box(box, fwd: np.ndarray, shift: np.ndarray, h: int, w: int):
    """Map a half-open box through the forward warp; AABB of the corners, clipped."""
    if box is None:
        return None
    x0, y0, x1, y1 = box
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    corners = np.array(
        [[y - cy, x - cx] for y in (y0, y1 - 1) for x in (x0, x1 - 1)]
    )
    warped = corners @ fwd.T + np.array([cy + shift[0], cx + shift[1]])
    wy0 = max(0, int(math.floor(warped[:, 0].min())))
    wx0 = max(0, int(math.floor(warped[:, 1].min())))
    wy1 = min(h, int(math.ceil(warped[:, 0].max())) + 1)
    wx1 = min(w, int(math.ceil(warped[:, 1].max())) + 1)
    return (wx0, wy0, max(wx1, wx0 + 1), max(wy1, wy0 + 1))


def augment_batch(
    images: np.ndarray,
    rng: np.random.Generator,
    max_shift: float = 4.0,
    max_rot_deg: float = 25.0,
    zoom_range: Tuple[float, float] = (0.7, 1.3),
    boxes: Optional[list] = None,
):
    """Random shift, horizontal flip, rotation, and zoom as a single warp.

    Composing the flip/rotation/zoom into one matrix keeps a single
    resampling step, so the image is interpolated once, not four times.
    With ``boxes``, each box is pushed through its image's warp and
    re-clipped; returns (images, boxes) in that case.
    """
    x = np.asarray(images)
    squeeze = x.ndim == 4
    imgs = x[:, 0] if squeeze else x
    out = np.empty_like(imgs)
    out_boxes = []
    for i in range(imgs.shape[0]):
        shift = rng.uniform(-max_shift, max_shift, size=2)   # (dy, dx)
        flip = rng.random() < 0.5
        theta = math.radians(rng.uniform(-max_rot_deg, max_rot_deg))
        zoom = rng.uniform(*zoom_range)
        ct, st = math.cos(theta), math.sin(theta)
        fwd = np.array([[ct, -st], [st, ct]]) * zoom         # rows act on (dy,dx)
        if flip:
            fwd = fwd @ np.array([[1.0, 0.0], [0.0, -1.0]])
        out[i] = _warp_affine(imgs[i], np.linalg.inv(fwd), shift)
        if boxes is not None:
            out_boxes.append(_warp_box(boxes[i], fwd, shift, *imgs[i].shape))
    result = out[:, None] if squeeze else out
    return (result, out_boxes) if boxes is not None else result


# ---------------------------------------------------------------------------
# weighted batch sampling
# ---------------------------------------------------------------------------

def sampler_probs(labels: np.ndarray, num_plane_classes: int) -> np.ndarray:
    """Sampling weights that rebalance training batches.

    Each plane-class sample gets weight 1/n_c, each background sample
    P/n_bg (P = number of plane classes), so in expectation half a batch
    is background and the other half is uniform over the plane classes.
    """
    labels = np.asarray(labels)
    bg = num_plane_classes
    weights = np.empty(labels.shape[0], dtype=np.float64)
    for c in range(num_plane_classes + 1):
        mask = labels == c
        n_c = int(mask.sum())
        if n_c == 0:
            continue
        weights[mask] = (num_plane_classes / n_c) if c == bg else (1.0 / n_c)
    total = weights.sum()
    if total <= 0:
        raise DataError("sampler got an empty label set")
    return weights / total


def sample_batch(
    rng: np.random.Generator,
    images: np.ndarray,
    labels: np.ndarray,
    probs: np.ndarray,
    batch_size: int,
):
    idx = rng.choice(labels.shape[0], size=batch_size, replace=True, p=probs)
    return images[idx], labels[idx]


# ---------------------------------------------------------------------------
# on-disk layout: images/NNNNN.agt1 + index.tsv + per-split .idx files
# ---------------------------------------------------------------------------

def save_dataset(root, ds: Dataset, splits: Optional[dict] = None) -> None:
    """Write images and the full index; ``splits`` maps a split name to
    sample indices and adds one <name>.idx file per split."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(len(ds)):
        rel = f"images/{i:05d}.agt1"
        write_agt(root / rel, ds.images[i, 0])
        entries.append((rel, int(ds.labels[i]), ds.boxes[i]))
    write_index(root / "index.tsv", entries)
    for name, idx in (splits or {}).items():
        write_index(root / f"{name}.idx", [entries[i] for i in idx])


def load_dataset(root, index_name: str = "index.tsv", spec: Optional[SyntheticSpec] = None) -> Dataset:
    root = Path(root)
    entries = read_index(root / index_name)
    if not entries:
        raise DataError(f"{root}: empty dataset index {index_name}")
    images, labels, boxes = [], [], []
    for rel, label, box in entries:
        try:
            img = read_agt(root / rel)
        except OSError as e:
            raise DataError(f"index references unreadable file {rel}: {e}") from e
        if img.ndim != 2:
            raise DataError(f"{rel}: expected a 2-D image, got shape {img.shape}")
        images.append(img[None])
        labels.append(label)
        boxes.append(box)
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise DataError(f"{root}: inconsistent image shapes {sorted(shapes)}")
    arr = np.stack(images).astype(np.float32)
    labs = np.asarray(labels, dtype=np.int64)
    if spec is None:
        h, w = arr.shape[2], arr.shape[3]
        spec = SyntheticSpec(
            num_plane_classes=int(labs.max()), height=h, width=w, n_per_class=0
        )
    return Dataset(arr, labs, boxes, spec)
