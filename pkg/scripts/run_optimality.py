"""Certify the mean-difference direction on random two-class problems."""

import argparse
import sys

from steerlab import pipelines as P
from steerlab.config import ExperimentConfig, load_config


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config")
    parser.add_argument("--out", default="runs/optimality")
    parser.add_argument("--problems", type=int)
    args = parser.parse_args()
    config = load_config(args.config) if args.config else ExperimentConfig(seed=0)
    if args.problems:
        config = config.replace(optimality__problems=args.problems)
    bundle = P.run_optimality(config)
    bundle.write(args.out, config, command="scripts/run_optimality.py")
    o = bundle.optimality
    print(f"alignment {o['alignment_pass_fraction']:.4f}")
    print(f"maximin vs random {o['maximin_win_fraction']:.4f}")
    print(f"maximin vs adversarial {o['adversarial_win_fraction']:.4f}")
    sys.exit(0 if P.optimality_passes(o) else 4)


if __name__ == "__main__":
    main()
