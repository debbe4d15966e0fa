#!/usr/bin/env python3
"""End-to-end desk experiment: dataset, training, evaluation, cost report.

Writes everything under --out (default runs/desk). With --ablate AXIS it
additionally runs the requested ablation (scan, deformable, or upsample)
over three seeds.
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from deformscan.cost_model import decoder_cost_report, efficiency_report
from deformscan.dmf_decoder import DecoderConfig
from deformscan.synth_data import CameraModel, SceneConfig, gen_dataset
from deformscan.train_eval import (
    DESK_TRAIN,
    ModelConfig,
    SegDataset,
    ablate,
    evaluate,
    render_ablation,
    train,
)


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="runs/desk")
    parser.add_argument("--n", type=int, default=500)
    parser.add_argument("--camera", default="equidistant_fisheye",
                        choices=("pinhole", "equidistant_fisheye", "equirectangular"))
    parser.add_argument("--iters", type=int, default=DESK_TRAIN.total_iters)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--ablate", choices=("scan", "deformable", "upsample"))
    args = parser.parse_args()

    out = Path(args.out)
    data_dir = out / "data"
    manifest = data_dir / "manifest.json"
    if not manifest.exists():
        print(f"generating {args.n} samples ({args.camera}) ...")
        gen_dataset(args.n, data_dir, SceneConfig(), CameraModel(args.camera, fov_deg=120.0),
                    master_seed=args.seed)
    dataset = SegDataset(manifest)

    model_cfg = ModelConfig()
    train_cfg = DESK_TRAIN
    train_cfg.total_iters = args.iters
    train_cfg.seed = args.seed

    print("cost report (paper-scale schedule):")
    print(efficiency_report(DecoderConfig(channels=(96, 192, 384, 768), num_classes=13)))
    micro_report = decoder_cost_report(
        DecoderConfig(channels=model_cfg.channels, num_classes=model_cfg.num_classes,
                      d_state=model_cfg.d_state), resolution=64)
    print(f"\nmicro decoder: {micro_report.total_params:,} params")

    if args.ablate:
        print(f"\nrunning {args.ablate} ablation over seeds (0, 1, 2) ...")
        rows = ablate(args.ablate, model_cfg, train_cfg, dataset)
        text = render_ablation(args.ablate, rows)
        print(text)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"ablation_{args.ablate}.txt").write_text(text + "\n")
        return 0

    print(f"\ntraining micro model for {train_cfg.total_iters} iterations ...")
    run_dir = out / "train"
    model, lines = train(model_cfg, dataset, train_cfg, out_dir=run_dir)
    print(lines[-1])
    metrics = evaluate(model, dataset, "val")
    print(metrics.render())
    (run_dir / "metrics.txt").write_text(metrics.render() + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
