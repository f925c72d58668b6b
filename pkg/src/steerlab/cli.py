"""Command-line entry point: ``steerlab <command> [options]``.

Exit codes: 0 success, 2 config error, 3 data or shape error, 4 failed
optimality check (``verify-optimality``).
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import warnings
from pathlib import Path

from steerlab import pipelines as P
from steerlab.config import ExperimentConfig, load_config
from steerlab.errors import ConfigError, DataError
from steerlab.extraction import FingerprintWarning, load_vectors
from steerlab.synthetic import load_pairs, save_pairs

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_CHECK = 0, 2, 3, 4


def parse_layers(text: str) -> list[int]:
    """``"3"`` or ``"2..5"`` (inclusive)."""
    try:
        if ".." in text:
            lo, hi = (int(x) for x in text.split("..", 1))
        else:
            lo = hi = int(text)
    except ValueError as exc:
        raise ConfigError(f"--layers expects a or a..b, got {text!r}") from exc
    if lo > hi:
        raise ConfigError(f"--layers range {text!r} is empty")
    return list(range(lo, hi + 1))


def parse_alphas(text: str) -> list[float]:
    try:
        values = [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"--alpha expects a comma-separated list, got {text!r}") from exc
    if not values:
        raise ConfigError("--alpha list is empty")
    return values


def resolve_config(args) -> ExperimentConfig:
    if args.config:
        config = load_config(args.config)
    elif args.seed is not None:
        config = ExperimentConfig(seed=args.seed)
    else:
        raise ConfigError("pass --config or at least --seed")
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out:
        changes["output_dir"] = args.out
    if args.layers:
        changes["sweep__layers"] = parse_layers(args.layers)
    if args.alpha:
        changes["sweep__alphas"] = parse_alphas(args.alpha)
    return config.replace(**changes) if changes else config


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise DataError(f"missing {what}: {path} (run the producing command first)")
    return path


def load_pairs_dir(out: Path, bank) -> dict:
    pdir = out / "pairs"
    return {c.concept_id: load_pairs(_require(pdir / f"{c.concept_id}.pairs", "pair file")) for c in bank}


def load_vectors_dir(out: Path, config: ExperimentConfig) -> P.Lab:
    """Lab over vectors saved by ``extract``; fingerprint mismatches abort."""
    bank = P.build_bank(config)
    vdir = out / "vectors"
    with P.stage("load-vectors"):
        with warnings.catch_warnings():
            warnings.simplefilter("error", FingerprintWarning)
            model = P.build_model(config.model_config(), bank)
            try:
                vectors = {
                    c.concept_id: load_vectors(_require(vdir / f"{c.concept_id}.cvec", "vector file"), model)
                    for c in bank
                }
            except FingerprintWarning as exc:
                raise DataError(str(exc)) from exc
    return P.make_lab(config, vectors=vectors, pairs={c.concept_id: [] for c in bank})


def cmd_gen_data(config, out: Path) -> P.ReportBundle:
    with P.stage("gen-data"):
        bank = P.build_bank(config)
        pdir = out / "pairs"
        pdir.mkdir(parents=True, exist_ok=True)
        for c in bank:
            save_pairs(P.make_pairs(config, bank, c), pdir / f"{c.concept_id}.pairs")
    return P.ReportBundle(stages=["gen-data"])


def cmd_extract(config, out: Path) -> P.ReportBundle:
    bank = P.build_bank(config)
    with P.stage("load-pairs"):
        pairs = load_pairs_dir(out, bank)
    lab = P.make_lab(config, pairs=pairs)
    return P.ReportBundle(vectors=lab.vectors, stages=["extract"])


def cmd_steer(config, out: Path) -> P.ReportBundle:
    bundle = P.run_table2_analog(config, lab=load_vectors_dir(out, config))
    bundle.vectors = {}
    bundle.gini = []
    return bundle


def cmd_sweep(config, out: Path) -> P.ReportBundle:
    lab = load_vectors_dir(out, config)
    bundle = P.run_table2_analog(config, lab=lab)
    bundle.vectors = {}
    bundle.merge(P.run_alpha_analog(config, lab=lab))
    return bundle.merge(P.run_fig3_analog(config))


def cmd_faithfulness(config, out: Path) -> P.ReportBundle:
    return P.run_faithfulness_suite(config, lab=load_vectors_dir(out, config))


def cmd_confusion(config, out: Path) -> P.ReportBundle:
    return P.run_confusion_analog(config, lab=load_vectors_dir(out, config))


def cmd_reverse(config, out: Path) -> P.ReportBundle:
    return P.run_reverse_analog(config)


def cmd_verify_optimality(config, out: Path) -> P.ReportBundle:
    return P.run_optimality(config)


def summarize(out: Path) -> dict:
    """Peak and Gini per concept and metric from a run directory."""
    path = _require(out / "gini.csv", "gini report")
    summary: dict = {}
    with path.open(newline="") as fh:
        for row in csv.DictReader(fh):
            entry = summary.setdefault(row["concept"], {"category": row["category"], "metrics": {}})
            entry["metrics"][f"{row['metric']}@{row['alpha']}"] = {
                "peak": float(row["peak"]),
                "peak_layer": int(row["peak_layer"]),
                "gini": float(row["gini"]),
            }
    others = ("confusion.csv", "faithfulness.csv", "histograms.json", "alpha.json", "reverse.json", "optimality.json")
    summary["_available"] = [name for name in others if (out / name).exists()]
    return summary


def cmd_report(config, out: Path) -> dict:
    summary = summarize(out)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"{'concept':<10} {'category':<14} {'metric':<24} {'peak':>10} {'layer':>5} {'gini':>6}")
    for cid, entry in summary.items():
        if cid.startswith("_"):
            continue
        for metric, v in entry["metrics"].items():
            print(f"{cid:<10} {entry['category']:<14} {metric:<24} {v['peak']:>10.4g} {v['peak_layer']:>5} {v['gini']:>6.3f}")
    return summary


COMMANDS = {
    "gen-data": (cmd_gen_data, "generate paired prefixes for every concept"),
    "extract": (cmd_extract, "extract per-layer concept vectors from saved pairs"),
    "steer": (cmd_steer, "steer with saved vectors over the chosen layers and alphas"),
    "sweep": (cmd_sweep, "layer sweep with Peak/Gini, alpha sweep and peak-layer histograms"),
    "reverse": (cmd_reverse, "reverse steering under single and persistent re-injection"),
    "faithfulness": (cmd_faithfulness, "TE, NIE and faithfulness ratio per layer"),
    "confusion": (cmd_confusion, "cross-concept boost matrix"),
    "verify-optimality": (cmd_verify_optimality, "certify mean-difference optimality on random problems"),
    "report": (cmd_report, "summarize Peak and Gini from a run directory"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="steerlab", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment TOML file")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help="output directory (default: config output_dir)")
    common.add_argument("--layers", help="layer range a..b (1-based, inclusive)")
    common.add_argument("--alpha", help="comma-separated steering coefficients")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=help_text)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = resolve_config(args)
        out = Path(config.output_dir)
        fn = COMMANDS[args.command][0]
        if args.command == "report":
            fn(config, out)
            return EXIT_OK
        out.mkdir(parents=True, exist_ok=True)
        bundle = fn(config, out)
        bundle.write(out, config, command=" ".join(["steerlab", *(argv if argv is not None else sys.argv[1:])]))
        if args.command == "verify-optimality":
            o = bundle.optimality
            print(
                f"alignment {o['alignment_pass_fraction']:.4f}  maximin-vs-random {o['maximin_win_fraction']:.4f}  "
                f"maximin-vs-adversarial {o['adversarial_win_fraction']:.4f}"
            )
            if not P.optimality_passes(o):
                print("optimality check FAILED", file=sys.stderr)
                return EXIT_CHECK
        return EXIT_OK
    except Exception as exc:
        cause = exc.cause if isinstance(exc, P.StageError) else exc
        if isinstance(cause, ConfigError):
            code = EXIT_CONFIG
        elif isinstance(cause, (DataError, FileNotFoundError)):
            code = EXIT_DATA
        else:
            raise
        print(f"steerlab: error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
