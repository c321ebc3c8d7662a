"""Per-event densification diagnostics on the occlusion scene.

For each densification event prints the live count, how many Gaussians sit in
the interior mask, how many of those pass the average-error threshold, and how
many of the top-peak picks land in the interior.

    python scripts/densify_diagnostics.py --seed 0 --tau 1e-3
"""

import argparse
import json

import numpy as np

from splatbind.density_control import peak_set_size
from splatbind.harness.scenes import generate_occlusion_scene
from splatbind.harness.training import ExperimentConfig, fit
from splatbind.uv_atlas import uv_to_texel


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--tau", type=float, default=1e-3)
    ap.add_argument("--cap", type=int, default=1000)
    ap.add_argument("--interval", type=int, default=10)
    ap.add_argument("--warmup", type=int, default=0)
    ap.add_argument("--scene", default="{}", help="JSON overrides for generate_occlusion_scene")
    ap.add_argument("--schedules", nargs="+", default=["ftc", "shuffled"])
    args = ap.parse_args()

    scene = generate_occlusion_scene(args.seed, **json.loads(args.scene))
    mask = scene.atlas.region_masks["mouth"]

    for sched in args.schedules:
        cfg = ExperimentConfig(schedule=sched, seed=args.seed, warmup_epochs=args.warmup, snapshots=False,
                               adc={"tau_avg": args.tau, "densify_interval": args.interval,
                                    "max_gaussians": args.cap})

        def on_event(state, rep):
            g = state.gaussians
            r, c = uv_to_texel(g.uv, mask.shape[0])
            inside = mask[r, c]
            mean, peak = state.tracker.mean, state.tracker.peak
            k = peak_set_size(len(g), cfg.adc.peak_fraction)
            top = np.zeros(len(g), dtype=bool)
            top[np.lexsort((np.arange(len(g)), -peak))[:k]] = True
            print(f"  iter {rep.iteration:5d}  n={len(g):5d}  interior={inside.sum():4d}  "
                  f"avg>tau interior={np.sum((mean > cfg.adc.tau_avg) & inside):4d} "
                  f"other={np.sum((mean > cfg.adc.tau_avg) & ~inside):4d}  "
                  f"peak picks interior={np.sum(top & inside):3d}/{k:3d}  "
                  f"clone={len(rep.cloned)} split={len(rep.split)} prune={len(rep.pruned)}", flush=True)

        print(sched)
        rep = fit(cfg, scene=scene, on_event=on_event)
        print(f"  final interior={rep.final_region_counts['mouth']} total={rep.final_total} "
              f"psnr={rep.final_psnr:.2f}", flush=True)


if __name__ == "__main__":
    main()
