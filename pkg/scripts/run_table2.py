"""Layer sweep over every concept with Peak and Gini per metric."""

import argparse

from steerlab import pipelines as P
from steerlab.config import ExperimentConfig, load_config


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", help="experiment TOML (default: seed 0 defaults)")
    parser.add_argument("--out", default="runs/table2")
    args = parser.parse_args()
    config = load_config(args.config) if args.config else ExperimentConfig(seed=0)
    bundle = P.run_table2_analog(config)
    bundle.write(args.out, config, command="scripts/run_table2.py")
    print(f"{'concept':<8} {'category':<14} {'metric':<14} {'peak':>9} {'layer':>5} {'gini':>6}")
    for row in bundle.gini:
        print(f"{row.concept:<8} {row.category:<14} {row.metric:<14} {row.peak:>9.4g} {row.peak_layer:>5} {row.gini:>6.3f}")


if __name__ == "__main__":
    main()
