"""Ablation grids. Each returns a small table (header, rows) averaged over seeds.

All variants of one grid share the dataset and the training seeds, so rows
differ only in the ablated factor. Values are mean target-domain Dice.
"""

import numpy as np

from .agm import POSITION_GROUPS, agm_from_checkpoint
from .pipeline import (
    auto_prompts,
    dice_per_image,
    evaluate,
    finetune_stage,
    run_seed,
    train_agm_stage,
)
from .segmenter import segmenter_from_checkpoint

AXES = ("module", "position", "distribution", "prompt_jitter")
NOISE_MODES = ("gaussian", "poisson", "united")


def _mean_over_seeds(per_seed):
    keys = per_seed[0].keys()
    return {k: float(np.mean([r[k] for r in per_seed])) for k in keys}


def module_table(results, targets):
    """Rows: which of SUFM / IPEF are on. Columns: each target domain and the average."""
    variants = [
        ("neither", "off", "off", "plain+agm_star"),
        ("SUFM", "on", "off", "plain+sufm"),
        ("IPEF", "off", "on", "ipef+agm_star"),
        ("SUFM+IPEF", "on", "on", "ipef+sufm"),
    ]
    header = ["variant", "sufm", "ipef", *targets, "average"]
    rows = []
    for name, s, i, key in variants:
        per_domain = [float(np.mean([r["per_domain"][(key, d)] for r in results])) for d in targets]
        rows.append([name, s, i, *per_domain, float(np.mean(per_domain))])
    return header, rows


def prompt_jitter_table(results):
    header = ["decoder", "gt_boxes", "jittered_boxes", "gap"]
    rows = []
    for tag, name in (("ipef", "IPEF"), ("plain", "no IPEF")):
        gt = float(np.mean([r[f"{tag}+gt/target"] for r in results]))
        jit = float(np.mean([r[f"{tag}+jitter/target"] for r in results]))
        rows.append([name, gt, jit, gt - jit])
    return header, rows


def _agm_variant_grid(cfg, bench, seeds, variants):
    """Preliminary (AGM) and final (IPEF segmenter) target Dice for each AGM variant."""
    targets = list(bench.targets)
    per_seed = []
    for seed in seeds:
        seg = segmenter_from_checkpoint(finetune_stage(cfg, bench, ipef=True, seed=seed))
        row = {}
        for label, variant in variants.items():
            agm = agm_from_checkpoint(train_agm_stage(cfg, bench, seed=seed, **variant))
            prelim, final = [], []
            for d in targets:
                samples = bench.targets[d]
                boxes, _, masks = auto_prompts(agm, samples, cfg)
                prelim.append(np.mean(dice_per_image(masks, samples)))
                final.append(np.mean(evaluate(seg, samples, boxes, cfg)[1]))
            row[("preliminary", label)] = float(np.mean(prelim))
            row[("final", label)] = float(np.mean(final))
        per_seed.append(row)
    mean = _mean_over_seeds(per_seed)
    labels = list(variants)
    header = ["prediction", *labels]
    rows = [[stage, *[mean[(stage, lab)] for lab in labels]] for stage in ("preliminary", "final")]
    return header, rows


def position_table(cfg, bench, seeds, groups=("0-1", "2", "3")):
    variants = {g: {"sufm": True, "positions": POSITION_GROUPS[g]} for g in groups}
    return _agm_variant_grid(cfg, bench, seeds, variants)


def distribution_table(cfg, bench, seeds, modes=NOISE_MODES):
    variants = {m: {"sufm": True, "noise_mode": m} for m in modes}
    return _agm_variant_grid(cfg, bench, seeds, variants)


def run_ablation(axis, cfg, bench, seeds, groups=None):
    if axis == "module":
        results = [run_seed(cfg, bench, s, with_jitter=False) for s in seeds]
        return module_table(results, list(bench.targets))
    if axis == "prompt_jitter":
        results = [run_seed(cfg, bench, s, agm_variants={}) for s in seeds]
        return prompt_jitter_table(results)
    if axis == "position":
        return position_table(cfg, bench, seeds, groups or ("0-1", "2", "3"))
    if axis == "distribution":
        return distribution_table(cfg, bench, seeds)
    raise ValueError(f"unknown ablation axis {axis!r}; choose from {AXES}")


def format_table(header, rows):
    cells = [[f"{v:.4f}" if isinstance(v, float) else str(v) for v in r] for r in rows]
    widths = [max(len(h), *(len(r[i]) for r in cells)) for i, h in enumerate(header)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    lines += ["  ".join(c.ljust(w) for c, w in zip(r, widths)) for r in cells]
    return "\n".join(lines)
