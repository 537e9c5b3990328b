"""IoU of the synthetic suite as a function of the CPD sampling density.

Differences are reported against the densest setting.

    python3 scripts/sweep_sampling_points.py --points 100 250 500 1000
"""
import argparse
import time

import numpy as np

from prostate_recon.registration import CpdConfig, register_slide
from prostate_recon.slicing import build_reference_model
from prostate_recon.synthetic import generic_model, routine_protocol, synthetic_suite


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--points", type=int, nargs="+", default=[100, 250, 500, 1000])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--jitter", type=float, default=0.5)
    args = ap.parse_args(argv)

    model = build_reference_model(generic_model(), routine_protocol())
    slides = synthetic_suite(model.polygons, seed=args.seed, jitter=args.jitter)
    points = sorted(args.points)
    ious = {}
    for n in points:
        t0 = time.perf_counter()
        cfg = CpdConfig(target_points=n)
        ious[n] = np.array([register_slide(s.annotations, s.reference, cfg).iou for s in slides])
        print(f"{n:5d} points  mean IoU {ious[n].mean():.4f}  min {ious[n].min():.4f}  "
              f"{time.perf_counter() - t0:.1f} s")
    ref = ious[points[-1]]
    for n in points[:-1]:
        print(f"max |IoU({n}) - IoU({points[-1]})| = {np.abs(ious[n] - ref).max():.4f}")


if __name__ == "__main__":
    main()
