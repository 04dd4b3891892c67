"""Train the reference model over several seeds and compare with the projection baseline.

    python scripts/run_benchmark.py --seeds 0 1 2 --out results/benchmark.json

Prints per-class IoU for every seed plus the base-only control (same stage-2
budget, point branch on base 3D labels only).
"""

import argparse
import json
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from crossmodal.config import LossWeights, RunConfig, load_config
from crossmodal.evaluation import evaluate_model, run_projection_baseline
from crossmodal.scenegen import make_dataset
from crossmodal.trainer import run_two_stage


def fmt(rep):
    ious = " ".join(f"{x:.3f}" for x in rep.per_class_iou)
    return f"[{ious}] base {rep.miou_base:.4f} novel {rep.miou_novel:.4f} hIoU {rep.hiou:.4f}"


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=None, help="run config JSON (defaults to the reference config)")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--skip-base-only", action="store_true")
    ap.add_argument("--out", default=None)
    args = ap.parse_args()

    cfg = load_config(args.config) if args.config else RunConfig()
    vocab = cfg.vocab.build()
    t0 = time.time()
    train = make_dataset(cfg.scene, vocab, cfg.data.train_seeds(), cfg.data.mode)
    evaluation = make_dataset(cfg.scene, vocab, cfg.data.eval_seeds())
    print(f"generated {len(train)}+{len(evaluation)} scenes in {time.time() - t0:.0f}s", flush=True)

    baseline = run_projection_baseline(evaluation, vocab)
    print(f"projection baseline   {fmt(baseline)}", flush=True)
    out = {"class_names": list(vocab.names), "baseline": baseline.to_dict(), "model": [], "base_only": []}
    for seed in args.seeds:
        stage = replace(cfg.trainer, seed=seed)
        t0 = time.time()
        model, _ = run_two_stage(train, stage, stage.weights, cfg.effective_transfer(), vocab=vocab)
        rep = evaluate_model(model, evaluation, {"seed": seed})
        out["model"].append(rep.to_dict())
        print(f"model seed {seed} ({time.time() - t0:.0f}s)  {fmt(rep)}", flush=True)
        if not args.skip_base_only:
            alone = replace(stage, stage1_steps=0, weights=LossWeights(beta=0.0, delta=1.0, gamma=0.0))
            model, _ = run_two_stage(train, alone, alone.weights, cfg.effective_transfer(), vocab=vocab)
            rep = evaluate_model(model, evaluation, {"seed": seed})
            out["base_only"].append(rep.to_dict())
            print(f"base-only seed {seed}     {fmt(rep)}", flush=True)

    novel = [r["miou_novel"] for r in out["model"]]
    print(f"mean novel mIoU {np.mean(novel):.4f} vs baseline {baseline.miou_novel:.4f}")
    if out["base_only"]:
        print(f"mean base mIoU {np.mean([r['miou_base'] for r in out['model']]):.4f} "
              f"vs base-only {np.mean([r['miou_base'] for r in out['base_only']]):.4f}")
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(json.dumps(out, indent=2) + "\n")


if __name__ == "__main__":
    main()
