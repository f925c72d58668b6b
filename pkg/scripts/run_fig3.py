"""Peak-layer histograms for a single-peak and a two-peak concept."""

import argparse

from steerlab import pipelines as P
from steerlab.config import ExperimentConfig, load_config


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config")
    parser.add_argument("--out", default="runs/fig3")
    parser.add_argument("--sigma", type=float, help="override the per-sample noise")
    args = parser.parse_args()
    config = load_config(args.config) if args.config else ExperimentConfig(seed=0)
    if args.sigma is not None:
        config = config.replace(fig3__sigma=args.sigma)
    bundle = P.run_fig3_analog(config)
    bundle.write(args.out, config, command="scripts/run_fig3.py")
    for name, hist in bundle.histograms.items():
        n = hist["n"]
        bars = "  ".join(f"{l + 1}:{c / n:.2f}" for l, c in enumerate(hist["counts"]))
        print(f"{name:<8} planted {hist['planted_layers']}  {bars}")


if __name__ == "__main__":
    main()
