"""Train the desk-scale pipeline on several phantom seeds and report easy/hard/pooled AUROC.

    python3 scripts/run_stratification.py --seeds 0 1 2 3 4 --out runs/strat
"""
import argparse
import json
import logging
from pathlib import Path

import torch

from wristfx.core import load_config
from wristfx.experiment import gradcam_hits, run_seed


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--config", help="config file; defaults to the desk profile")
    ap.add_argument("--out", default="runs/stratification")
    ap.add_argument("--gradcam", action="store_true", help="also score GradCAM localisation on each seed")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    cfg = load_config(args.config, profile="desk") if args.config is None else load_config(args.config)
    out = Path(args.out)
    rows = []
    for seed in args.seeds:
        res, pipeline, preds, _, _ = run_seed(cfg, seed, out / f"seed{seed}", keep_views=args.gradcam)
        row = res.to_json()
        if args.gradcam:
            row["gradcam"] = gradcam_hits(pipeline, preds, "PA")
        rows.append(row)
        a = res.auroc
        print(f"seed {seed}: easy {a['easy']:.3f}  hard {a['hard']:.3f}  pooled {a['pooled']:.3f}  "
              f"drop {res.drop:.3f}  recall@5px {res.landmark_recall[5.0]:.3f}  {res.seconds:.0f}s", flush=True)
    (out / "summary.json").write_text(json.dumps(rows, indent=2) + "\n")


if __name__ == "__main__":
    main()
