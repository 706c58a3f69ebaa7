#!/usr/bin/env python3
"""Score a predictive checkpoint on the validation split.

Reports the share of samples whose gripper template peak lies within 3 px of
the commanded pose and the mean background MSE away from the gripper.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from graspsight import dataio, models
from graspsight import trainbench as tb
from graspsight.worldsim import WorldParams


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--ckpt", required=True)
    ap.add_argument("--data", required=True)
    ap.add_argument("--limit", type=int, default=0, help="score only the first N validation samples")
    args = ap.parse_args()

    params, cfg = WorldParams(), tb.ComparisonConfig()
    ds, manifest = dataio.load_dataset_dir(args.data)
    _, val_idx = dataio.split(manifest, cfg.train_fraction, cfg.split_seed)
    if args.limit:
        val_idx = val_idx[:args.limit]
    net = models.load_model(args.ckpt, params)
    data = tb.PredictiveData.from_dataset(ds.subset(val_idx))
    pred = models.predictive_forward(net, data.before, data.commands).during
    gen = dataio.GenParams(n=manifest.count, seed=manifest.seed)
    errors, mses = [], []
    for k, i in enumerate(val_idx):
        scene, c = dataio.regenerate_scene(manifest.seed, int(i), params, gen)
        errors.append(models.gripper_placement_error(pred[k, 0], data.before[k, 0], c, scene.camera_jitter, params))
        mses.append(models.background_mse(pred[k, 0], data.during[k, 0], c, scene.camera_jitter, params))
    errors = np.array(errors)
    print(f"samples {len(errors)}")
    print(f"placement within 3 px {np.mean(errors <= 3):.3f} (median error {np.median(errors):.2f} px)")
    print(f"background mse {np.mean(mses):.5f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
