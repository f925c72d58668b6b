"""Reverse steering under single and persistent prefix re-injection."""

import argparse

from steerlab import pipelines as P
from steerlab.config import ExperimentConfig, load_config


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config")
    parser.add_argument("--out", default="runs/reverse")
    parser.add_argument("--alpha", type=float, default=1.0)
    args = parser.parse_args()
    config = load_config(args.config) if args.config else ExperimentConfig(seed=0)
    bundle = P.run_reverse_analog(config, alpha=args.alpha)
    bundle.write(args.out, config, command="scripts/run_reverse.py")
    kept = {(r.concept, r.layer): r.value for r in bundle.reverse_rows if r.metric == "retained"}
    mention = {(r.concept, r.layer): r.value for r in bundle.reverse_rows if r.metric == "mention_rate"}
    for concept, layer in sorted(kept):
        share = kept[concept, layer]
        shown = "n/a" if share is None else f"{share:.3f}"
        print(f"{concept:<16} layer {layer}  mention {mention[concept, layer]:.2f}  retained {shown}")


if __name__ == "__main__":
    main()
