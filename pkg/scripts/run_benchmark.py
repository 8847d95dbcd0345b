"""Run the module / IPEF / prompt-jitter benchmark over several seeds and print
the mean-Dice table. Used to calibrate the synthetic domains.

    python scripts/run_benchmark.py --config configs/desk.yaml --seeds 0 1 2
"""

import argparse
import json
import logging
import tempfile
import time
from pathlib import Path

from autoprompt_sdg.config import load_config
from autoprompt_sdg.pipeline import load_benchmark, run_seed, set_determinism, synth_data


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default=None)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--data-root", default=None, help="reuse an existing synthetic dataset")
    ap.add_argument("--json", default=None, help="write raw results here")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    set_determinism()
    cfg = load_config(args.config)

    with tempfile.TemporaryDirectory() as tmp:
        if args.data_root:
            cfg.data.root = args.data_root
        else:
            cfg.data.root = str(Path(tmp) / "data")
            synth_data(cfg)
        bench = load_benchmark(cfg.data.root)
        results = []
        for seed in args.seeds:
            t0 = time.time()
            res = run_seed(cfg, bench, seed)
            res.pop("per_domain")
            results.append(res)
            print(f"seed {seed} ({time.time() - t0:.0f}s)")
            for k, v in sorted(res.items()):
                if k != "seed":
                    print(f"  {k:32s} {v:.4f}")
    if args.json:
        Path(args.json).write_text(json.dumps(results, indent=1))


if __name__ == "__main__":
    main()
