"""Two-stage pipeline: AGM training -> box prompts -> decoder fine-tuning -> evaluation.

Functions here are the building blocks of the CLI subcommands and of the
ablation benchmark. Everything is seeded from the config; with the same
config and seed every artifact is bit-identical.
"""

import copy
import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .agm import AgmConfig, agm_from_checkpoint, predict_full_masks, train_agm
from .checkpoint import ModelCheckpoint
from .data import (
    IngestionError,
    generate_synthetic_domain,
    load_dataset,
    read_manifest,
    save_domain,
    split_source,
    write_manifest,
)
from .losses import dice_score
from .prompts import (
    BoundingBoxPrompt,
    bbox_from_mask,
    jitter_prompt,
    prompt_or_fallback,
    prompt_quality,
)
from .segmenter import Segmenter, SegmenterConfig, finetune_decoder, segment, segmenter_from_checkpoint

log = logging.getLogger(__name__)


class PipelineError(RuntimeError):
    """A prerequisite artifact is missing or inputs are unusable (user error)."""


def set_determinism():
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(1)


# ------------------------------------------------------------------- data


def synth_data(cfg):
    """Render the configured synthetic domains under ``cfg.data.root``."""
    spec = cfg.data.synthetic
    root = Path(cfg.data.root)
    root.mkdir(parents=True, exist_ok=True)
    styles = {spec.source_name: spec.source, **spec.targets}
    for k, (name, style) in enumerate(styles.items()):
        samples = generate_synthetic_domain(
            spec.n_per_domain, style, spec.shape_family, spec.size, seed=cfg.seed * 1000 + k, domain=name,
            distractors=spec.distractors,
        )
        save_domain(root, samples)
    roles = {name: ("source" if name == spec.source_name else "target") for name in styles}
    write_manifest(root, roles, spec.train_fraction, cfg.seed)
    return root


@dataclass
class Benchmark:
    source: str
    source_train: list
    source_test: list
    targets: dict = field(default_factory=dict)  # domain -> samples

    def domain_samples(self, domain, split="test"):
        if domain == self.source:
            return self.source_test if split == "test" else self.source_train
        if domain not in self.targets:
            raise PipelineError(f"unknown domain {domain!r}; known: {[self.source, *self.targets]}")
        return self.targets[domain]


def load_benchmark(root):
    try:
        manifest = read_manifest(root)
    except IngestionError as exc:
        raise PipelineError(str(exc)) from exc
    data = load_dataset(manifest)
    src = manifest.source_domain
    train, test = split_source(data[src], manifest.train_fraction, manifest.split_seed)
    return Benchmark(src, train, test, {d: data[d] for d in manifest.target_domains})


# ---------------------------------------------------------------- stage 1


def agm_config_for(cfg, sufm=True, positions=None, noise_mode=None):
    model = copy.deepcopy(cfg.agm.model)
    if not (sufm and cfg.agm.sufm_enabled):
        positions = ()
    changes = {}
    if positions is not None:
        changes["sufm_positions"] = tuple(positions)
    if noise_mode is not None:
        model.sufm.noise_mode = noise_mode
    d = model.to_dict()
    d.update(changes)
    return AgmConfig(**d)


def train_agm_stage(cfg, bench, seed=None, log_path=None, **variant):
    seed = cfg.seed if seed is None else seed
    return train_agm(bench.source_train, agm_config_for(cfg, **variant), cfg.agm.optim, seed, log_path)


def auto_prompts(agm_model, samples, cfg, gt=False):
    """One box per sample, either from the AGM prediction or from the GT mask.

    Returns (boxes, records, preliminary_masks). Preliminary masks are None in GT mode.
    """
    images = [s.image for s in samples]
    prelim = None if gt else predict_full_masks(agm_model, images, cfg.eval.threshold)
    boxes, records = [], []
    for i, s in enumerate(samples):
        if gt:
            box = bbox_from_mask(s.mask, cfg.eval.box_padding)
            fallback = box is None
            if fallback:
                box = BoundingBoxPrompt.full(s.mask.shape)
        else:
            box, fallback = prompt_or_fallback(prelim[i], cfg.eval.connectivity, cfg.eval.box_padding)
        rec = {"image_id": s.sample_id, **dict(zip(("row_min", "col_min", "row_max", "col_max"), box.as_tuple()))}
        rec["fallback"] = fallback
        rec["quality"] = prompt_quality(box, s.mask) if s.mask.any() else None
        boxes.append(box)
        records.append(rec)
    return boxes, records, prelim


def jittered(boxes, samples, cfg, seed):
    rng = np.random.default_rng([seed, 7])
    out = []
    for b, s in zip(boxes, samples):
        h, w = np.asarray(s.image).shape[:2]
        shift = int(round(cfg.eval.jitter_shift_fraction * min(h, w)))
        out.append(jitter_prompt(b, cfg.eval.jitter_scale, shift, rng, (h, w)))
    return out


# ---------------------------------------------------------------- stage 2


def segmenter_config_for(cfg, ipef=True):
    d = cfg.segmenter.model.to_dict()
    d["ipef"]["enabled"] = bool(ipef) and cfg.segmenter.model.ipef.enabled
    return SegmenterConfig(**d)


def finetune_stage(cfg, bench, ipef=True, seed=None, boxes=None, log_path=None):
    """Fine-tune a fresh decoder on the source training split.

    Defaults to GT-tight boxes as training prompts.
    """
    seed = cfg.seed if seed is None else seed
    samples = bench.source_train
    if boxes is None:
        boxes = [bbox_from_mask(s.mask) or BoundingBoxPrompt.full(s.mask.shape) for s in samples]
    model = Segmenter(segmenter_config_for(cfg, ipef), seed)
    return finetune_decoder(
        samples, boxes, model, cfg.segmenter.optim, seed, log_path, cfg.segmenter.train_prompt_jitter
    )


def dice_per_image(pred_masks, samples):
    return [dice_score(p, s.mask) for p, s in zip(pred_masks, samples)]


def evaluate(seg_model, samples, boxes, cfg):
    preds = segment(seg_model, [s.image for s in samples], boxes, cfg.eval.threshold)
    return preds, dice_per_image(preds, samples)


# ------------------------------------------------------------- benchmark


def run_seed(cfg, bench, seed, ipef_modes=(True, False), agm_variants=None, with_jitter=True):
    """Everything the module/IPEF/prompt-jitter ablations need for one seed.

    Returns a dict of mean Dice values keyed by descriptive names, plus the
    per-domain breakdown under ``"per_domain"``.
    """
    if agm_variants is None:
        agm_variants = {"sufm": {"sufm": True}, "agm_star": {"sufm": False}}
    domains = [bench.source, *bench.targets]
    samples = {d: bench.domain_samples(d) for d in domains}
    result = {"seed": seed, "per_domain": {}}

    prompts = {}
    for name, variant in agm_variants.items():
        model = agm_from_checkpoint(train_agm_stage(cfg, bench, seed=seed, **variant))
        for d in domains:
            boxes, records, prelim = auto_prompts(model, samples[d], cfg)
            prompts[(name, d)] = boxes
            result["per_domain"][(f"prelim_{name}", d)] = float(np.mean(dice_per_image(prelim, samples[d])))
            result["per_domain"][(f"fallbacks_{name}", d)] = sum(r["fallback"] for r in records)
    for d in domains:
        gt_boxes, _, _ = auto_prompts(None, samples[d], cfg, gt=True)
        prompts[("gt", d)] = gt_boxes
        if with_jitter:
            prompts[("jitter", d)] = jittered(gt_boxes, samples[d], cfg, seed)

    for ipef in ipef_modes:
        seg = segmenter_from_checkpoint(finetune_stage(cfg, bench, ipef=ipef, seed=seed))
        tag = "ipef" if ipef else "plain"
        for (pname, d), boxes in prompts.items():
            _, dices = evaluate(seg, samples[d], boxes, cfg)
            result["per_domain"][(f"{tag}+{pname}", d)] = float(np.mean(dices))

    targets = list(bench.targets)
    keys = {k for k, _ in result["per_domain"]}
    for k in sorted(keys):
        if k.startswith("fallbacks_"):
            continue
        result[f"{k}/source"] = result["per_domain"][(k, bench.source)]
        result[f"{k}/target"] = float(np.mean([result["per_domain"][(k, d)] for d in targets]))
    return result


# -------------------------------------------------------------- reporting


def write_metrics_csv(path, rows, fields):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})
    return path


def save_overlay(path, image, pred, gt=None, box=None):
    """RGB overlay: prediction in red, GT contour in green, box in yellow."""
    from PIL import Image
    from scipy import ndimage

    img = np.clip(np.asarray(image, dtype=np.float32), 0, 1)
    rgb = np.repeat((img * 255).astype(np.uint8)[..., None], 3, axis=2)
    p = np.asarray(pred).astype(bool)
    rgb[p] = (0.5 * rgb[p] + [127, 0, 0]).astype(np.uint8)
    if gt is not None:
        g = np.asarray(gt).astype(bool)
        edge = g & ~ndimage.binary_erosion(g)
        rgb[edge] = [0, 255, 0]
    if box is not None:
        r0, c0, r1, c1 = box.as_tuple()
        rgb[r0, c0 : c1 + 1] = rgb[r1, c0 : c1 + 1] = [255, 255, 0]
        rgb[r0 : r1 + 1, c0] = rgb[r0 : r1 + 1, c1] = [255, 255, 0]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(rgb).save(path)
    return path


def save_mask_png(path, mask):
    from PIL import Image

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255, mode="L").save(path)
    return path


def load_checkpoint(path, kind):
    path = Path(path)
    if not path.is_file():
        raise PipelineError(f"missing {kind} checkpoint: {path}")
    ckpt = ModelCheckpoint.load(path)
    if ckpt.kind != kind:
        raise PipelineError(f"{path} holds a {ckpt.kind!r} checkpoint, expected {kind!r}")
    return ckpt
