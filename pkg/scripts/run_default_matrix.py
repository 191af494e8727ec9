#!/usr/bin/env python3
"""Run the full comparison matrix on the default synthetic task.

Covers the supervised-only reference, both single-teacher baselines (soft
labels and feature projection) for each teacher, mean-ensemble distillation,
the committee method with a diverse two-teacher committee, its single-teacher
variant, a homogeneous committee for the diversity comparison, and the
three-teacher threshold-selection ablation. Artifacts land under --out; a
report table is printed at the end.

Budget note: teachers are pretrained once per configuration and cached under
<out>/teachers/, so the expensive runs are the committee ones (two teacher
forward/backward passes per step). The stock settings below keep the whole
matrix around ten minutes on one core.
"""

import argparse
import sys
import time

from committee_kd.cli import main


def base_flags(args, seeds):
    return [
        "--n-users", "1000", "--n-items", "500", "--latent-dim", "8",
        "--noise-sd", "0.3", "--n-ratings", "50000",
        "--lr", str(args.lr),
        "--epochs", str(args.epochs),
        "--steps-per-epoch", str(args.steps_per_epoch),
        "--teacher-epochs", str(args.teacher_epochs),
        "--seeds", seeds,
        "--out", args.out,
    ]


CONFIGS = [
    ("none", []),
    ("ld", ["--teachers", "mlp-l"]),
    ("ld", ["--teachers", "text"]),
    ("fd", ["--teachers", "mlp-l"]),
    ("fd", ["--teachers", "text"]),
    ("mt", ["--teachers", "mlp-l,text"]),
    ("qa", ["--teachers", "mlp-l,text"]),
    ("qa", ["--teachers", "mlp-l"]),
    ("qa", ["--teachers", "mlp-m,mlp-l"]),
    ("qa", ["--teachers", "mlp-s,mlp-m,text"]),
    ("qa", ["--teachers", "mlp-s,mlp-m,text", "--threshold", "0.6"]),
]


def run(argv):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default="out/default-matrix")
    parser.add_argument("--seeds", default="0,1,2,3,4")
    parser.add_argument("--lr", type=float, default=0.01)
    parser.add_argument("--epochs", type=int, default=3)
    parser.add_argument("--steps-per-epoch", type=int, default=200)
    parser.add_argument("--teacher-epochs", type=int, default=18)
    args = parser.parse_args(argv)

    started = time.perf_counter()
    for method, extra in CONFIGS:
        t0 = time.perf_counter()
        code = main(["run", "--method", method] + extra + base_flags(args, args.seeds))
        label = " ".join([method] + extra)
        print(f"[{time.perf_counter() - t0:6.1f}s] {label}", flush=True)
        if code != 0:
            return code
    print(f"matrix done in {time.perf_counter() - started:.0f}s")
    return main(["report", "--out", args.out])


if __name__ == "__main__":
    sys.exit(run(sys.argv[1:]))
