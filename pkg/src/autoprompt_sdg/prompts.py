"""Box prompts from predicted masks.

A raw prediction is reduced to its largest connected component (BFS
labeling) and the tight bounding box of that component becomes the prompt.
Also holds prompt degradation (jitter) and box-vs-GT quality scoring used by
the sensitivity studies, plus the CSV prompt table.
"""

import csv
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np

_OFFSETS = {
    4: ((-1, 0), (1, 0), (0, -1), (0, 1)),
    8: ((-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)),
}


class UndefinedQualityError(ValueError):
    pass


@dataclass(frozen=True)
class BoundingBoxPrompt:
    """Inclusive pixel box."""

    row_min: int
    col_min: int
    row_max: int
    col_max: int

    def __post_init__(self):
        if self.row_min > self.row_max or self.col_min > self.col_max:
            raise ValueError(f"inverted box {self.as_tuple()}")
        if self.row_min < 0 or self.col_min < 0:
            raise ValueError(f"negative box coordinate {self.as_tuple()}")

    def as_tuple(self):
        return (self.row_min, self.col_min, self.row_max, self.col_max)

    @property
    def height(self):
        return self.row_max - self.row_min + 1

    @property
    def width(self):
        return self.col_max - self.col_min + 1

    @property
    def area(self):
        return self.height * self.width

    def within(self, shape):
        return self.row_max < shape[0] and self.col_max < shape[1]

    @classmethod
    def full(cls, shape):
        return cls(0, 0, int(shape[0]) - 1, int(shape[1]) - 1)

    def rescale(self, src_shape, dst_shape):
        """Map the box between image resolutions (pixel-edge aligned)."""
        sr = dst_shape[0] / src_shape[0]
        sc = dst_shape[1] / src_shape[1]
        r0 = int(np.floor(self.row_min * sr))
        c0 = int(np.floor(self.col_min * sc))
        r1 = int(np.ceil((self.row_max + 1) * sr)) - 1
        c1 = int(np.ceil((self.col_max + 1) * sc)) - 1
        r1 = min(max(r1, r0), dst_shape[0] - 1)
        c1 = min(max(c1, c0), dst_shape[1] - 1)
        return BoundingBoxPrompt(r0, c0, r1, c1)


@dataclass
class ComponentLabeling:
    labels: np.ndarray  # (H, W) int32, 0 = background, 1..n in discovery order
    sizes: list  # sizes[i] is the pixel count of label i + 1

    @property
    def count(self):
        return len(self.sizes)


def connected_components(mask, connectivity=4):
    """BFS labeling. Seeds are taken in row-major scan order, so label 1 is the
    component containing the first foreground pixel."""
    if connectivity not in _OFFSETS:
        raise ValueError(f"connectivity must be 4 or 8, got {connectivity}")
    fg = np.asarray(mask).astype(bool)
    if fg.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {fg.shape}")
    h, w = fg.shape
    offsets = _OFFSETS[connectivity]
    labels = np.zeros((h, w), dtype=np.int32)
    sizes = []
    for r0, c0 in zip(*np.nonzero(fg)):
        if labels[r0, c0]:
            continue
        current = len(sizes) + 1
        labels[r0, c0] = current
        queue = deque([(r0, c0)])
        size = 0
        while queue:
            r, c = queue.popleft()
            size += 1
            for dr, dc in offsets:
                rr, cc = r + dr, c + dc
                if 0 <= rr < h and 0 <= cc < w and fg[rr, cc] and not labels[rr, cc]:
                    labels[rr, cc] = current
                    queue.append((rr, cc))
        sizes.append(size)
    return ComponentLabeling(labels, sizes)


def largest_component(mask, connectivity=4):
    """Keep only the largest component; ties go to the lowest label."""
    lab = connected_components(mask, connectivity)
    if lab.count == 0:
        return np.zeros(lab.labels.shape, dtype=np.uint8)
    keep = int(np.argmax(lab.sizes)) + 1  # argmax returns the first maximum
    return (lab.labels == keep).astype(np.uint8)


def bbox_from_mask(mask, padding=0):
    fg = np.asarray(mask).astype(bool)
    if padding < 0:
        raise ValueError("padding must be >= 0")
    if not fg.any():
        return None
    rows = np.flatnonzero(fg.any(axis=1))
    cols = np.flatnonzero(fg.any(axis=0))
    h, w = fg.shape
    return BoundingBoxPrompt(
        max(int(rows[0]) - padding, 0),
        max(int(cols[0]) - padding, 0),
        min(int(rows[-1]) + padding, h - 1),
        min(int(cols[-1]) + padding, w - 1),
    )


def generate_prompt(raw_mask, connectivity=4, padding=0):
    return bbox_from_mask(largest_component(raw_mask, connectivity), padding)


def prompt_or_fallback(raw_mask, connectivity=4, padding=0):
    """Returns ``(box, used_fallback)``; empty predictions get the full-image box."""
    box = generate_prompt(raw_mask, connectivity, padding)
    if box is None:
        return BoundingBoxPrompt.full(np.asarray(raw_mask).shape), True
    return box, False


def _clip_span(lo, hi, limit):
    """Clip [lo, hi] into [0, limit - 1] keeping at least one pixel."""
    lo = int(np.clip(lo, 0, limit - 1))
    hi = int(np.clip(hi, 0, limit - 1))
    if hi < lo:
        lo, hi = hi, lo
    return lo, hi


def jitter_prompt(box, scale_factor, shift_px, rng, bounds):
    """Scale a box about its center, shift it, clip it to ``bounds`` (H, W).

    Extents never drop below one pixel. ``rng`` is a ``numpy.random.Generator``;
    two integer shifts (rows, then cols) are drawn even when ``shift_px`` is 0.
    """
    if scale_factor <= 0:
        raise ValueError("scale_factor must be > 0")
    h, w = bounds
    cr = (box.row_min + box.row_max) / 2.0
    cc = (box.col_min + box.col_max) / 2.0
    half_h = max(box.height * scale_factor, 1.0) / 2.0
    half_w = max(box.width * scale_factor, 1.0) / 2.0
    dr, dc = rng.integers(-shift_px, shift_px + 1, size=2)
    cr += dr
    cc += dc
    r0 = int(np.floor(cr - half_h + 0.5))
    c0 = int(np.floor(cc - half_w + 0.5))
    r1 = max(r0 + int(round(2 * half_h)) - 1, r0)
    c1 = max(c0 + int(round(2 * half_w)) - 1, c0)
    r0, r1 = _clip_span(r0, r1, h)
    c0, c1 = _clip_span(c0, c1, w)
    return BoundingBoxPrompt(r0, c0, r1, c1)


def box_iou(a, b):
    ir = min(a.row_max, b.row_max) - max(a.row_min, b.row_min) + 1
    ic = min(a.col_max, b.col_max) - max(a.col_min, b.col_min) + 1
    inter = max(ir, 0) * max(ic, 0)
    return inter / (a.area + b.area - inter)


def prompt_quality(box, gt_mask):
    gt_box = bbox_from_mask(gt_mask, 0)
    if gt_box is None:
        raise UndefinedQualityError("prompt quality is undefined for an empty ground-truth mask")
    return box_iou(box, gt_box)


PROMPT_FIELDS = ["image_id", "row_min", "col_min", "row_max", "col_max", "fallback", "quality"]


def write_prompt_table(path, records):
    """Write prompt records (dicts) to CSV. The quality column is only emitted
    when every record carries one."""
    records = list(records)
    with_quality = bool(records) and all(r.get("quality") is not None for r in records)
    fields = PROMPT_FIELDS if with_quality else PROMPT_FIELDS[:-1]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        for rec in records:
            row = dict(rec)
            row["fallback"] = int(bool(row.get("fallback", False)))
            if with_quality:
                row["quality"] = f"{row['quality']:.6f}"
            writer.writerow(row)
    return path


def read_prompt_table(path):
    """Returns ``{image_id: (BoundingBoxPrompt, record_dict)}``."""
    out = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            box = BoundingBoxPrompt(
                int(row["row_min"]), int(row["col_min"]), int(row["row_max"]), int(row["col_max"])
            )
            rec = {"fallback": bool(int(row.get("fallback", 0)))}
            if row.get("quality") not in (None, ""):
                rec["quality"] = float(row["quality"])
            out[row["image_id"]] = (box, rec)
    return out
