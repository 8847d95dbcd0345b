"""Command line entry point.

    python -m autoprompt_sdg <command> --config configs/desk.yaml [overrides]

Commands run the two-stage pipeline one artifact at a time::

    synth-data -> train-agm -> gen-prompts -> finetune -> eval

plus ``ablate`` for the ablation grids. Artifacts live under
``eval.output_dir``. Exit codes: 0 success, 1 internal failure, 2 user or
config error.
"""

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .ablation import AXES, format_table, run_ablation
from .agm import POSITION_GROUPS, AgmConfigError, agm_from_checkpoint, predict_full_masks
from .agm import InvalidInputError as AgmInputError
from .checkpoint import CheckpointError
from .config import ConfigError, dump_config, load_config
from .data import DataConfigError, IngestionError
from .losses import InvalidInputError as LossInputError
from .pipeline import (
    PipelineError,
    auto_prompts,
    dice_per_image,
    evaluate,
    finetune_stage,
    jittered,
    load_benchmark,
    load_checkpoint,
    save_overlay,
    set_determinism,
    synth_data,
    train_agm_stage,
    write_metrics_csv,
)
from .prompts import UndefinedQualityError, prompt_quality, read_prompt_table, write_prompt_table
from .segmenter import InvalidInputError as SegInputError
from .segmenter import SegmenterConfigError, segmenter_from_checkpoint
from .sufm import SufmConfigError

log = logging.getLogger("autoprompt_sdg")

USER_ERRORS = (
    ConfigError,
    PipelineError,
    IngestionError,
    DataConfigError,
    AgmConfigError,
    AgmInputError,
    SegmenterConfigError,
    SegInputError,
    LossInputError,
    SufmConfigError,
    CheckpointError,
    UndefinedQualityError,
)


def on_off(value):
    if value not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return value == "on"


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config (defaults apply to missing keys)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--sufm", type=on_off, metavar="on|off", help="SUFM in the AGM (off = AGM* variant)")
    common.add_argument("--ipef", type=on_off, metavar="on|off", help="IPEF decoder (off = plain decoder)")
    common.add_argument("--use-gt-boxes", action="store_true", help="prompt with tight ground-truth boxes")
    common.add_argument(
        "--jitter", nargs=2, type=float, metavar=("SCALE", "SHIFT"),
        help="degrade prompts: box scale factor and max shift as a fraction of the image side",
    )
    common.add_argument("--data-root", help="override data.root")
    common.add_argument("--out", help="override eval.output_dir")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="autoprompt_sdg", description=__doc__.split("\n")[0])
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("synth-data", parents=[common], help="render the synthetic source/target domains")
    sub.add_parser("train-agm", parents=[common], help="train the auto-prompt generation model")
    p = sub.add_parser("gen-prompts", parents=[common], help="write box prompt tables")
    p.add_argument("--checkpoint", help="AGM checkpoint (default: <out>/agm.pt or agm_star.pt)")
    p.add_argument("--domain", action="append", help="domain(s) to prompt (default: all)")
    p = sub.add_parser("finetune", parents=[common], help="fine-tune the segmenter decoder on the source split")
    p.add_argument("--prompts", help="prompt table for the source training images (default: GT boxes)")
    p = sub.add_parser("eval", parents=[common], help="segment and score domains")
    p.add_argument("--checkpoint", help="segmenter checkpoint (default: <out>/segmenter_{ipef|plain}.pt)")
    p.add_argument("--domain", action="append", help="domain(s) to evaluate (default: all)")
    p.add_argument("--prompts-dir", help="directory of prompt tables (default: <out>/prompts)")
    p = sub.add_parser("ablate", parents=[common], help="run an ablation grid")
    p.add_argument("axis", choices=AXES)
    p.add_argument("--seeds", type=int, nargs="+", help="training seeds (default: the config seed)")
    p.add_argument("--positions", nargs="+", choices=sorted(POSITION_GROUPS), help="position groups to compare")
    return ap


def resolve_config(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.sufm is not None:
        cfg.agm.sufm_enabled = args.sufm
    if args.ipef is not None:
        cfg.segmenter.model.ipef.enabled = args.ipef
    if args.jitter is not None:
        scale, shift = args.jitter
        if scale <= 0 or not 0 <= shift <= 1:
            raise ConfigError("--jitter needs SCALE > 0 and 0 <= SHIFT <= 1")
        cfg.eval.jitter_scale, cfg.eval.jitter_shift_fraction = scale, shift
    if args.data_root:
        cfg.data.root = args.data_root
    if args.out:
        cfg.eval.output_dir = args.out
    return cfg


def agm_path(cfg):
    return cfg.out / ("agm.pt" if cfg.agm.sufm_enabled else "agm_star.pt")


def segmenter_path(cfg):
    return cfg.out / ("segmenter_ipef.pt" if cfg.segmenter.model.ipef.enabled else "segmenter_plain.pt")


def _domains(bench, requested):
    known = [bench.source, *bench.targets]
    if not requested:
        return known
    for d in requested:
        if d not in known:
            raise PipelineError(f"unknown domain {d!r}; known: {known}")
    return requested


def _samples(bench, domain):
    samples = bench.domain_samples(domain)
    if not samples:
        raise PipelineError(f"domain {domain!r} has no images to evaluate")
    return samples


def cmd_synth_data(cfg, args):
    root = synth_data(cfg)
    spec = cfg.data.synthetic
    print(f"wrote {1 + len(spec.targets)} domains x {spec.n_per_domain} images to {root}")


def cmd_train_agm(cfg, args):
    bench = load_benchmark(cfg.data.root)
    path = agm_path(cfg)
    log_path = path.with_name(path.stem + "_log.csv")
    ckpt = train_agm_stage(cfg, bench, log_path=log_path)
    ckpt.save(path)
    model = agm_from_checkpoint(ckpt)
    test = bench.source_test or bench.source_train
    preds = predict_full_masks(model, [s.image for s in test], cfg.eval.threshold)
    dice = float(np.mean(dice_per_image(preds, test)))
    print(f"saved {path} ({ckpt.iteration} iterations); source-test Dice {dice:.4f}")


def cmd_gen_prompts(cfg, args):
    bench = load_benchmark(cfg.data.root)
    model = None
    if not args.use_gt_boxes:
        model = agm_from_checkpoint(load_checkpoint(Path(args.checkpoint or agm_path(cfg)), "agm"))
    out_dir = cfg.out / "prompts"
    for d in _domains(bench, args.domain):
        # source prompts cover both splits so the table can also drive `finetune`
        samples = bench.source_train + bench.source_test if d == bench.source else bench.domain_samples(d)
        if not samples:
            raise PipelineError(f"domain {d!r} has no images")
        boxes, records, _ = auto_prompts(model, samples, cfg, gt=args.use_gt_boxes)
        if args.jitter is not None:
            boxes = jittered(boxes, samples, cfg, cfg.seed)
            for rec, b, s in zip(records, boxes, samples):
                rec.update(zip(("row_min", "col_min", "row_max", "col_max"), b.as_tuple()))
                rec["quality"] = prompt_quality(b, s.mask) if s.mask.any() else None
        path = write_prompt_table(out_dir / f"{d}.csv", records)
        fallbacks = sum(r["fallback"] for r in records)
        print(f"{d}: {len(records)} prompts -> {path} (fallback full-image boxes: {fallbacks})")


def _boxes_for(table, samples, path):
    missing = [s.sample_id for s in samples if s.sample_id not in table]
    if missing:
        raise PipelineError(f"{path} has no prompt for {len(missing)} image(s): {missing[:5]}")
    return [table[s.sample_id][0] for s in samples]


def cmd_finetune(cfg, args):
    bench = load_benchmark(cfg.data.root)
    boxes = None
    if args.prompts and not args.use_gt_boxes:
        boxes = _boxes_for(read_prompt_table(args.prompts), bench.source_train, args.prompts)
    path = segmenter_path(cfg)
    log_path = path.with_name(path.stem + "_log.csv")
    ckpt = finetune_stage(cfg, bench, ipef=cfg.segmenter.model.ipef.enabled, boxes=boxes, log_path=log_path)
    ckpt.save(path)
    print(f"saved {path} ({ckpt.iteration} iterations); final L_seg {ckpt.extra['history'][-1][1]:.4f}")


def cmd_eval(cfg, args):
    bench = load_benchmark(cfg.data.root)
    ckpt_path = Path(args.checkpoint) if args.checkpoint else segmenter_path(cfg)
    model = segmenter_from_checkpoint(load_checkpoint(ckpt_path, "segmenter"))
    prompts_dir = Path(args.prompts_dir) if args.prompts_dir else cfg.out / "prompts"
    rows = []
    for d in _domains(bench, args.domain):
        samples = _samples(bench, d)
        if args.use_gt_boxes:
            boxes, _, _ = auto_prompts(None, samples, cfg, gt=True)
            if args.jitter is not None:
                boxes = jittered(boxes, samples, cfg, cfg.seed)
        else:
            table_path = prompts_dir / f"{d}.csv"
            if not table_path.is_file():
                raise PipelineError(f"missing prompt table {table_path}; run gen-prompts first")
            boxes = _boxes_for(read_prompt_table(table_path), samples, table_path)
        preds, dices = evaluate(model, samples, boxes, cfg)
        rows.append({"domain": d, "n_images": len(samples), "dice": float(np.mean(dices))})
        for s, p, b in list(zip(samples, preds, boxes))[: cfg.eval.overlays]:
            save_overlay(cfg.out / "overlays" / d / f"{s.sample_id}.png", s.image, p, s.mask, b)
    targets = [r["dice"] for r in rows if r["domain"] != bench.source]
    if targets:
        rows.append({"domain": "target_average", "n_images": "", "dice": float(np.mean(targets))})
    path = write_metrics_csv(cfg.out / "metrics.csv", rows, ["domain", "n_images", "dice"])
    for r in rows:
        print(f"{r['domain']:16s} {r['dice']:.4f}")
    print(f"wrote {path}")


def cmd_ablate(cfg, args):
    bench = load_benchmark(cfg.data.root)
    seeds = args.seeds or [cfg.seed]
    header, rows = run_ablation(args.axis, cfg, bench, seeds, groups=args.positions)
    path = write_metrics_csv(
        cfg.out / f"ablate_{args.axis}.csv", [dict(zip(header, r)) for r in rows], header
    )
    print(f"{args.axis} ablation, mean target Dice over seeds {seeds}")
    print(format_table(header, rows))
    print(f"wrote {path}")


COMMANDS = {
    "synth-data": cmd_synth_data,
    "train-agm": cmd_train_agm,
    "gen-prompts": cmd_gen_prompts,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(name)s %(message)s"
    )
    try:
        cfg = resolve_config(args)
        set_determinism()
        if args.command != "synth-data":
            cfg.out.mkdir(parents=True, exist_ok=True)
            dump_config(cfg, cfg.out / "config_used.yaml")
        COMMANDS[args.command](cfg, args)
    except USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception:
        log.exception("internal failure")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
