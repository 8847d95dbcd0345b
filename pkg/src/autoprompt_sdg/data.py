"""Synthetic multi-domain data and directory-backed paired image/mask datasets.

On-disk layout::

    <root>/manifest.yaml
    <root>/<domain>/images/<id>.png     8-bit grayscale
    <root>/<domain>/masks/<id>.png      8-bit, nonzero = foreground
"""

import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
import yaml
from PIL import Image
from scipy import ndimage

log = logging.getLogger(__name__)

SHAPE_FAMILIES = ("disk", "ellipse", "blob")
MANIFEST_NAME = "manifest.yaml"


class IngestionError(RuntimeError):
    pass


class DataConfigError(ValueError):
    pass


@dataclass
class DomainStyle:
    intensity_offset: float = 0.0
    gamma: float = 1.0
    noise_std: float = 0.0
    blur_sigma: float = 0.0
    texture_amp: float = 0.0
    texture_scale: float = 8.0  # smoothing sigma (px) of the texture field

    def __post_init__(self):
        if self.gamma <= 0:
            raise DataConfigError("gamma must be > 0")
        for name in ("noise_std", "blur_sigma", "texture_amp"):
            if getattr(self, name) < 0:
                raise DataConfigError(f"{name} must be >= 0")


@dataclass
class DomainSample:
    image: np.ndarray  # (H, W) float32
    mask: np.ndarray  # (H, W) uint8 in {0, 1}
    domain: str
    sample_id: str


def _shape_mask(family, size, rng):
    h, w = size
    rr, cc = np.mgrid[0:h, 0:w].astype(np.float64)
    base = rng.uniform(0.12, 0.24) * min(h, w)
    margin = 1.6 * base
    cy = rng.uniform(margin, h - margin)
    cx = rng.uniform(margin, w - margin)
    dy, dx = rr - cy, cc - cx
    if family == "disk":
        return (dy**2 + dx**2) <= base**2
    if family == "ellipse":
        a = base * rng.uniform(1.0, 1.45)
        b = base * rng.uniform(0.55, 0.9)
        theta = rng.uniform(0, np.pi)
        u = dx * np.cos(theta) + dy * np.sin(theta)
        v = -dx * np.sin(theta) + dy * np.cos(theta)
        return (u / a) ** 2 + (v / b) ** 2 <= 1.0
    if family == "blob":
        # star-shaped about its center, hence a single connected region
        ang = np.arctan2(dy, dx)
        radius = np.full_like(ang, base)
        for k in (2, 3, 5):
            radius += base * rng.uniform(0.0, 0.18) * np.cos(k * ang + rng.uniform(0, 2 * np.pi))
        return np.hypot(dy, dx) <= radius
    raise DataConfigError(f"shape_family must be one of {SHAPE_FAMILIES}, got {family!r}")


def _distractor_masks(target, count, rng):
    """Up to ``count`` unlabeled disks clear of the target.

    They share the target's appearance and are somewhat smaller (55-85% of its
    equivalent radius), so the target is always the largest object but only a
    box prompt pins it down locally.
    """
    h, w = target.shape
    rr, cc = np.mgrid[0:h, 0:w].astype(np.float64)
    margin = max(2, min(h, w) // 32)
    gap = ndimage.binary_dilation(target, iterations=margin)
    target_r = np.sqrt(target.sum() / np.pi)
    out = []
    for _ in range(count):
        r = rng.uniform(0.55, 0.85) * target_r
        cy, cx = rng.uniform(r + 1, h - r - 1), rng.uniform(r + 1, w - r - 1)
        disk = (rr - cy) ** 2 + (cc - cx) ** 2 <= r**2
        if not (disk & gap).any():
            out.append(disk)
            gap |= ndimage.binary_dilation(disk, iterations=margin)
    return out


def render_clean(mask, rng, extras=()):
    """Two-level rendering with mild internal shading; returns values in [0, 1].

    ``extras`` are additional unlabeled regions drawn with the foreground level.
    """
    fg = rng.uniform(0.6, 0.85)
    bg = rng.uniform(0.15, 0.3)
    drawn = mask.astype(bool)
    for e in extras:
        drawn = drawn | e
    soft = ndimage.gaussian_filter(drawn.astype(np.float64), 0.8)
    return bg + (fg - bg) * soft


def apply_style(clean, style, rng):
    """Apply a domain style. A neutral style returns ``clean`` unchanged."""
    img = clean.astype(np.float64).copy()
    if style.texture_amp > 0:
        field_ = ndimage.gaussian_filter(rng.standard_normal(img.shape), style.texture_scale)
        field_ /= field_.std() + 1e-12
        img = img + style.texture_amp * field_
    if style.gamma != 1.0:
        img = np.clip(img, 0.0, 1.0) ** style.gamma
    if style.blur_sigma > 0:
        img = ndimage.gaussian_filter(img, style.blur_sigma)
    if style.noise_std > 0:
        img = img + style.noise_std * rng.standard_normal(img.shape)
    if style.intensity_offset != 0.0:
        img = img + style.intensity_offset
    return img


def generate_synthetic_domain(
    n, style, shape_family="disk", size=(128, 128), seed=0, domain="synthetic", distractors=0
):
    """Render ``n`` samples of one domain. Sample ``i`` depends only on (seed, i).

    ``distractors`` caps the number of small look-alike disks per image (the
    count is drawn from 0..distractors); they never appear in the mask.
    """
    if n < 1:
        raise DataConfigError("n must be >= 1")
    if distractors < 0:
        raise DataConfigError("distractors must be >= 0")
    families = SHAPE_FAMILIES if shape_family == "mixed" else (shape_family,)
    samples = []
    for i in range(n):
        shape_rng, style_rng = (
            np.random.default_rng(s) for s in np.random.SeedSequence([seed, i]).spawn(2)
        )
        family = families[int(shape_rng.integers(len(families)))]
        mask = _shape_mask(family, size, shape_rng)
        extras = []
        if distractors:
            extras = _distractor_masks(mask, int(shape_rng.integers(distractors + 1)), shape_rng)
        clean = render_clean(mask, shape_rng, extras)
        image = apply_style(clean, style, style_rng)
        samples.append(DomainSample(image.astype(np.float32), mask.astype(np.uint8), domain, f"{domain}_{i:04d}"))
    return samples


def preprocess(image, target_size, normalize=True):
    """Bilinear resize to ``target_size`` and optional per-image min-max scaling.

    RGB input is converted to luminance. A constant image normalizes to zeros.
    """
    img = np.asarray(image, dtype=np.float32)
    if img.ndim == 3:
        img = img[..., :3] @ np.array([0.299, 0.587, 0.114], dtype=np.float32)
    if tuple(img.shape) != tuple(target_size):
        t = torch.from_numpy(np.ascontiguousarray(img))[None, None]
        img = F.interpolate(t, size=tuple(target_size), mode="bilinear", align_corners=False)[0, 0].numpy()
    if normalize:
        lo, hi = float(img.min()), float(img.max())
        if hi - lo <= 0:
            return np.zeros_like(img, dtype=np.float32)
        img = (img - lo) / (hi - lo)
    return img.astype(np.float32)


def preprocess_mask(mask, target_size):
    m = (np.asarray(mask) > 0).astype(np.uint8)
    if tuple(m.shape) == tuple(target_size):
        return m
    t = torch.from_numpy(m.astype(np.float32))[None, None]
    return (F.interpolate(t, size=tuple(target_size), mode="nearest")[0, 0].numpy() > 0.5).astype(np.uint8)


# ---------------------------------------------------------------- manifests


@dataclass
class SampleRecord:
    image_path: Path
    mask_path: Path
    domain: str
    sample_id: str


@dataclass
class DatasetManifest:
    root: Path
    roles: dict  # domain -> "source" | "target"
    train_fraction: float = 0.9
    split_seed: int = 0
    records: list = field(default_factory=list)

    @property
    def source_domain(self):
        return next(d for d, r in self.roles.items() if r == "source")

    @property
    def target_domains(self):
        return [d for d, r in self.roles.items() if r == "target"]


def write_manifest(root, roles, train_fraction=0.9, split_seed=0):
    root = Path(root)
    doc = {
        "domains": {d: {"role": r} for d, r in roles.items()},
        "split": {"train_fraction": float(train_fraction), "seed": int(split_seed)},
    }
    path = root / MANIFEST_NAME
    path.write_text(yaml.safe_dump(doc, sort_keys=False))
    return path


def read_manifest(root):
    """Parse ``manifest.yaml`` and index ``<domain>/images`` against ``<domain>/masks``."""
    root = Path(root)
    path = root / MANIFEST_NAME
    if not path.is_file():
        raise IngestionError(f"no {MANIFEST_NAME} under {root}")
    doc = yaml.safe_load(path.read_text()) or {}
    domains = doc.get("domains") or {}
    roles = {}
    for name, spec in domains.items():
        role = (spec or {}).get("role", "target")
        if role not in ("source", "target"):
            raise IngestionError(f"domain {name!r}: role must be source or target, got {role!r}")
        roles[str(name)] = role
    n_source = sum(r == "source" for r in roles.values())
    if n_source != 1:
        raise IngestionError(f"exactly one source domain is required, found {n_source}")
    split = doc.get("split") or {}
    manifest = DatasetManifest(
        root, roles, float(split.get("train_fraction", 0.9)), int(split.get("seed", 0))
    )
    problems = []
    for dom in roles:
        img_dir, mask_dir = root / dom / "images", root / dom / "masks"
        if not img_dir.is_dir():
            problems.append(f"{dom}: missing directory {img_dir}")
            continue
        for img_path in sorted(img_dir.glob("*.png")):
            mask_path = mask_dir / img_path.name
            if not mask_path.is_file():
                problems.append(f"{dom}/{img_path.stem}: missing mask {mask_path}")
                continue
            manifest.records.append(SampleRecord(img_path, mask_path, dom, img_path.stem))
    if problems:
        raise IngestionError("dataset ingestion failed:\n  " + "\n  ".join(problems))
    return manifest


def _read_gray(path):
    with Image.open(path) as im:
        if im.mode not in ("L", "I", "I;16", "F"):
            im = im.convert("L")
        return np.asarray(im)


def load_dataset(manifest, domains=None):
    """Load records into memory as ``{domain: [DomainSample, ...]}``.

    Images are scaled to [0, 1] from their storage range; masks to {0, 1}.
    """
    out = {d: [] for d in manifest.roles if domains is None or d in domains}
    problems = []
    for rec in manifest.records:
        if rec.domain not in out:
            continue
        try:
            img = _read_gray(rec.image_path)
            mask = _read_gray(rec.mask_path)
        except (OSError, ValueError) as exc:
            problems.append(f"{rec.domain}/{rec.sample_id}: {exc}")
            continue
        if img.shape[:2] != mask.shape[:2]:
            problems.append(f"{rec.domain}/{rec.sample_id}: image {img.shape} vs mask {mask.shape}")
            continue
        scale = float(np.iinfo(img.dtype).max) if img.dtype.kind in "ui" else 1.0
        out[rec.domain].append(
            DomainSample(img.astype(np.float32) / scale, (mask > 0).astype(np.uint8), rec.domain, rec.sample_id)
        )
    if problems:
        raise IngestionError("dataset ingestion failed:\n  " + "\n  ".join(problems))
    return out


def split_source(samples, train_fraction=0.9, seed=0):
    """Shuffle with ``seed`` and cut at ``floor(n * train_fraction)``."""
    if not 0.0 <= train_fraction <= 1.0:
        raise DataConfigError("train_fraction must lie in [0, 1]")
    n = len(samples)
    n_train = int(math.floor(n * train_fraction + 1e-9))
    order = np.random.default_rng(seed).permutation(n)
    train = [samples[i] for i in order[:n_train]]
    test = [samples[i] for i in order[n_train:]]
    if not test:
        warnings.warn(f"split of {n} samples at fraction {train_fraction} leaves an empty test set")
    return train, test


def save_domain(root, samples):
    """Write samples as 8-bit PNGs (images clipped to [0, 1])."""
    root = Path(root)
    for s in samples:
        img_dir, mask_dir = root / s.domain / "images", root / s.domain / "masks"
        img_dir.mkdir(parents=True, exist_ok=True)
        mask_dir.mkdir(parents=True, exist_ok=True)
        img8 = np.round(np.clip(s.image, 0.0, 1.0) * 255.0).astype(np.uint8)
        Image.fromarray(img8, mode="L").save(img_dir / f"{s.sample_id}.png")
        Image.fromarray((s.mask > 0).astype(np.uint8) * 255, mode="L").save(mask_dir / f"{s.sample_id}.png")


def style_to_dict(style):
    return asdict(style)
