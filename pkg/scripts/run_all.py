"""Run every pipeline into one directory and print a short summary."""

import argparse
import time

from steerlab import pipelines as P
from steerlab.config import ExperimentConfig, load_config


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config")
    parser.add_argument("--out", default="runs/all")
    parser.add_argument("--skip-optimality", action="store_true")
    args = parser.parse_args()
    config = load_config(args.config) if args.config else ExperimentConfig(seed=0)
    steps = [
        ("table2", lambda: P.run_table2_analog(config)),
        ("fig3", lambda: P.run_fig3_analog(config)),
        ("reverse", lambda: P.run_reverse_analog(config)),
        ("alpha", lambda: P.run_alpha_analog(config)),
        ("confusion", lambda: P.run_confusion_analog(config.replace(concepts__localized=False))),
        ("faithfulness", lambda: P.run_faithfulness_suite(config.replace(concepts__localized=False))),
    ]
    if not args.skip_optimality:
        steps.append(("optimality", lambda: P.run_optimality(config)))
    bundle = P.ReportBundle()
    for name, fn in steps:
        t0 = time.perf_counter()
        bundle.merge(fn())
        print(f"{name:<13} {time.perf_counter() - t0:6.2f}s")
    bundle.write(args.out, config, command="scripts/run_all.py")
    print(f"confusion diagonal ratio {bundle.confusion['diagonal_ratio']:.3f}")
    print(f"degeneration threshold {bundle.alpha['degeneration_threshold']:.4f}")
    if bundle.optimality:
        print(f"optimality passes: {P.optimality_passes(bundle.optimality)}")
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
