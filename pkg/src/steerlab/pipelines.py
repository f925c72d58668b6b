"""Experiment pipelines and the report bundle.

Each ``run_*`` function builds what it needs from an ``ExperimentConfig``
and returns a ``ReportBundle`` holding its section. Pipelines that steer
accept precomputed ``vectors`` (and ``pairs``) so the output of one run can
feed the others without recomputation. Failures are re-raised as
``StageError`` naming the stage.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import platform
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

import steerlab
from steerlab import metrics
from steerlab.config import ExperimentConfig
from steerlab.errors import DataError, SteerlabError
from steerlab.extraction import ConceptVectorSet, extract, pair_differences, save_vectors
from steerlab.model import Model, SteeringHook, build_model, default_prompt, trace_batch
from steerlab.optimality import run_optimality_suite
from steerlab.steering import (
    EvalInputs,
    alpha_sweep,
    degeneration_threshold,
    layer_sweep,
    reverse_steer_experiment,
    run_baseline,
)
from steerlab.synthetic import (
    ConceptBank,
    ConceptSpec,
    PairedSample,
    category_profile,
    generate_pairs,
    make_concept_bank,
    make_layered_concept,
    make_substrate,
    multi_peak_profile,
    scene_sampler,
    stack_prefixes,
    with_profile,
)

METRICS_HEADER = ("concept", "layer", "alpha", "sign", "metric", "value", "n")
GINI_HEADER = ("concept", "category", "alpha", "metric", "peak", "peak_layer", "gini")
CONFUSION_HEADER = ("injected", "read", "boost")
FAITHFULNESS_HEADER = ("concept", "layer", "alpha", "te", "nie", "rho")

# effect kind used to turn each metric's layer profile into Gini input
_GINI_KIND = {
    "success_rate": "rate",
    "mention_rate": "rate",
    "similarity": "rate",
    "baseline_similarity": "rate",
    "logit_boost": "boost",
    "delta_logit": "signed",
}

# seed blocks; pair i of a block uses seed + i
_PAIR_BLOCK = 1_000_000
_EVAL_BLOCK = 50_000_000


class StageError(SteerlabError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


@contextmanager
def stage(name: str) -> Iterator[None]:
    try:
        yield
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


def fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


@dataclass(frozen=True)
class MetricRow:
    concept: str
    layer: int
    alpha: float
    sign: int
    metric: str
    value: float | None
    n: int


@dataclass(frozen=True)
class GiniRow:
    concept: str
    category: str
    alpha: float
    metric: str
    peak: float
    peak_layer: int
    gini: float


@dataclass(frozen=True)
class FaithRow:
    concept: str
    layer: int
    alpha: float
    te: float
    nie: float
    rho: float | None


@dataclass
class ReportBundle:
    metrics: list[MetricRow] = field(default_factory=list)
    gini: list[GiniRow] = field(default_factory=list)
    histograms: dict = field(default_factory=dict)
    confusion: dict = field(default_factory=dict)
    faithfulness: list[FaithRow] = field(default_factory=list)
    alpha: dict = field(default_factory=dict)
    reverse: dict = field(default_factory=dict)
    reverse_rows: list[MetricRow] = field(default_factory=list)
    optimality: dict = field(default_factory=dict)
    vectors: dict[str, ConceptVectorSet] = field(default_factory=dict)
    stages: list[str] = field(default_factory=list)

    def merge(self, other: "ReportBundle") -> "ReportBundle":
        self.metrics += other.metrics
        self.gini += other.gini
        self.histograms.update(other.histograms)
        self.confusion.update(other.confusion)
        self.faithfulness += other.faithfulness
        self.alpha.update(other.alpha)
        self.reverse.update(other.reverse)
        self.reverse_rows += other.reverse_rows
        self.optimality.update(other.optimality)
        self.vectors.update(other.vectors)
        self.stages += other.stages
        return self

    def metric(self, concept: str, metric: str, alpha: float | None = None, sign: int = 1) -> dict[int, float]:
        """Per-layer values of one metric for one concept."""
        return {
            r.layer: r.value
            for r in self.metrics
            if r.concept == concept and r.metric == metric and r.sign == sign and (alpha is None or r.alpha == alpha)
        }

    # --- serialization -------------------------------------------------

    def metrics_csv(self) -> str:
        return _metric_csv(self.metrics)

    def reverse_csv(self) -> str:
        return _metric_csv(self.reverse_rows)

    def gini_csv(self) -> str:
        return _csv(
            GINI_HEADER,
            [(r.concept, r.category, r.alpha, r.metric, r.peak, r.peak_layer, r.gini) for r in self.gini],
        )

    def confusion_csv(self) -> str:
        ids, mat = self.confusion["concepts"], self.confusion["matrix"]
        rows = [(ids[i], ids[j], mat[i][j]) for i in range(len(ids)) for j in range(len(ids))]
        return _csv(CONFUSION_HEADER, rows)

    def faithfulness_csv(self) -> str:
        return _csv(
            FAITHFULNESS_HEADER, [(r.concept, r.layer, r.alpha, r.te, r.nie, r.rho) for r in self.faithfulness]
        )

    def files(self) -> dict[str, str]:
        """Deterministic report bodies keyed by file name (no manifest)."""
        out = {}
        if self.metrics:
            out["metrics.csv"] = self.metrics_csv()
        if self.gini:
            out["gini.csv"] = self.gini_csv()
        if self.histograms:
            out["histograms.json"] = _json(self.histograms)
        if self.confusion:
            out["confusion.csv"] = self.confusion_csv()
        if self.faithfulness:
            out["faithfulness.csv"] = self.faithfulness_csv()
        if self.alpha:
            out["alpha.json"] = _json(self.alpha)
        if self.reverse_rows:
            out["reverse.csv"] = self.reverse_csv()
        if self.reverse:
            out["reverse.json"] = _json(self.reverse)
        if self.optimality:
            out["optimality.json"] = _json(self.optimality)
        return out

    def write(self, out_dir: str | Path, config: ExperimentConfig, command: str = "") -> dict[str, str]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        files = self.files()
        for name, body in files.items():
            (out_dir / name).write_text(body)
        if self.vectors:
            vdir = out_dir / "vectors"
            vdir.mkdir(exist_ok=True)
            for cid, vset in sorted(self.vectors.items()):
                save_vectors(vset, vdir / f"{cid}.cvec")
        write_manifest(out_dir, config, command, sorted(files), self.stages)
        return files


def _csv(header: Sequence[str], rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(v) if not isinstance(v, str) else v for v in row])
    return buf.getvalue()


def _metric_csv(rows: Sequence[MetricRow]) -> str:
    return _csv(METRICS_HEADER, [(r.concept, r.layer, r.alpha, r.sign, r.metric, r.value, r.n) for r in rows])


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n"


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"not serializable: {type(obj).__name__}")


def write_manifest(out_dir: Path, config: ExperimentConfig, command: str, files, stages) -> None:
    manifest = {
        "command": command,
        "config": config.to_dict(),
        "config_sha256": config.digest(),
        "seed": config.seed,
        "files": list(files),
        "stages": list(stages),
        "versions": {
            "steerlab": steerlab.__version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
        },
        "created": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    (Path(out_dir) / "manifest.json").write_text(_json(manifest))


# --- shared construction -------------------------------------------------------


def build_bank(config: ExperimentConfig, localized: bool | None = None) -> ConceptBank:
    c, L = config.concepts, config.model.n_layers
    bank = make_concept_bank(
        c.count, config.model.d_model, c.orthogonal, seed=config.seed, norm=c.norm, categories=c.categories
    )
    localized = c.localized if localized is None else localized
    if not localized:
        return bank
    peaks = c.peaks or [None] * c.count
    specs = [with_profile(s, category_profile(s.category, L, k)) for s, k in zip(bank, peaks)]
    return ConceptBank(tuple(specs), orthogonal=bank.orthogonal)


def prompt_of(config: ExperimentConfig, model: Model) -> tuple[int, ...]:
    return tuple(config.model.prompt) if config.model.prompt else default_prompt(model.config)


def _base_sampler(config: ExperimentConfig, bank: ConceptBank):
    return scene_sampler(config.model.d_model, config.model.prefix_len, projector=bank.complement_projector())


def make_pairs(
    config: ExperimentConfig, bank: ConceptBank, spec: ConceptSpec, n: int | None = None, held_out: bool = False
) -> list[PairedSample]:
    i = [c.concept_id for c in bank].index(spec.concept_id)
    block = _EVAL_BLOCK if held_out else 0
    seed = config.seed + block + _PAIR_BLOCK * (i + 1)
    return generate_pairs(
        spec,
        n or (config.data.eval_samples if held_out else config.data.pairs),
        _base_sampler(config, bank),
        config.data.sigma,
        seed,
        config.data.negative,
    )


def make_eval_inputs(config: ExperimentConfig, bank: ConceptBank, prompt) -> EvalInputs:
    """Concept-free query prefixes of the configured substrate kind."""
    m, n = config.model, config.data.eval_samples
    seed = config.seed + _EVAL_BLOCK
    kind = config.data.substrate
    if kind == "scene":
        sampler = _base_sampler(config, bank)
        prefixes = np.stack([sampler(np.random.default_rng(seed + i)) for i in range(n)])
    else:
        prefixes = np.stack([make_substrate(kind, m.d_model, m.prefix_len, seed=seed + i).embeddings for i in range(n)])
    return EvalInputs(prefixes.astype(np.float32), prompt)


@dataclass
class Lab:
    """Model, bank and vectors shared by the steering pipelines."""

    config: ExperimentConfig
    bank: ConceptBank
    model: Model
    prompt: tuple[int, ...]
    vectors: dict[str, ConceptVectorSet]
    pairs: dict[str, list[PairedSample]]


def make_lab(
    config: ExperimentConfig,
    vectors: Mapping[str, ConceptVectorSet] | None = None,
    pairs: Mapping[str, list[PairedSample]] | None = None,
    localized: bool | None = None,
    reinjection=None,
    out_dir: str | Path | None = None,
) -> Lab:
    with stage("build"):
        bank = build_bank(config, localized)
        model = build_model(config.model_config(reinjection), bank)
        prompt = prompt_of(config, model)
    with stage("pairs"):
        if pairs is None:
            pairs = {c.concept_id: make_pairs(config, bank, c) for c in bank}
        missing = [c.concept_id for c in bank if c.concept_id not in pairs]
        if missing:
            raise DataError(f"no pairs for concept(s) {', '.join(missing)}")
    with stage("extract"):
        if vectors is None:
            vectors = {c.concept_id: extract(model, pairs[c.concept_id], prompt) for c in bank}
            if out_dir is not None:
                vdir = Path(out_dir) / "vectors"
                vdir.mkdir(parents=True, exist_ok=True)
                for cid, vset in vectors.items():
                    save_vectors(vset, vdir / f"{cid}.cvec")
        missing = [c.concept_id for c in bank if c.concept_id not in vectors]
        if missing:
            raise DataError(f"no vectors for concept(s) {', '.join(missing)}")
        for cid, vset in vectors.items():
            if vset.vectors.shape != (model.n_layers, model.d):
                raise DataError(f"vectors for {cid!r} have shape {vset.vectors.shape}")
            if vset.fingerprint != model.fingerprint:
                raise DataError(f"vectors for {cid!r} were extracted from a different model")
    return Lab(config, bank, model, prompt, dict(vectors), dict(pairs))


def peak_layer(vset: ConceptVectorSet) -> int:
    return int(np.argmax(vset.norms)) + 1


# --- pipelines -----------------------------------------------------------------


def _effect_rows(concept_id: str, rows, names: Sequence[str], sign: int) -> list[MetricRow]:
    out = []
    for r in rows:
        for name in names:
            out.append(MetricRow(concept_id, r.layer, r.alpha, sign, name, getattr(r, name), r.n))
    return out


def run_table2_analog(config: ExperimentConfig, lab: Lab | None = None, out_dir=None) -> ReportBundle:
    """Layer sweep per concept and alpha, with Peak and Gini per metric."""
    lab = lab or make_lab(config, out_dir=out_dir)
    bundle = ReportBundle(vectors=dict(lab.vectors))
    select = list(config.metrics.select)
    s = config.sweep
    with stage("sweep"):
        inputs = make_eval_inputs(config, lab.bank, lab.prompt)
        baseline = run_baseline(lab.model, inputs, s.max_len)
        for concept in lab.bank:
            for alpha in s.alphas:
                table = layer_sweep(
                    lab.model,
                    inputs,
                    lab.vectors[concept.concept_id],
                    concept,
                    alpha=float(alpha),
                    sign=s.sign,
                    layers=config.layers,
                    max_len=s.max_len,
                    baseline=baseline,
                    steer_every_step=s.steer_every_step,
                )
                bundle.metrics += _effect_rows(concept.concept_id, table.rows, select, s.sign)
                layers = np.array([r.layer for r in table.rows])
                for name in select:
                    col = table.column(name)
                    top = int(np.argmax(col))
                    bundle.gini.append(
                        GiniRow(
                            concept.concept_id,
                            concept.category,
                            float(alpha),
                            name,
                            float(col[top]),
                            int(layers[top]),
                            metrics.gini(metrics.effect_profile(col, _GINI_KIND[name])),
                        )
                    )
    bundle.stages.append("table2")
    return bundle


def fig3_bank(config: ExperimentConfig) -> ConceptBank:
    """One single-peak concept and one concept planted at two layers."""
    L, d, c = config.model.n_layers, config.model.d_model, config.concepts
    base = make_concept_bank(1, d, seed=config.seed, norm=c.norm, categories=["entity-like"])
    single = dataclasses.replace(
        base.concepts[0], concept_id="single", localization_profile=multi_peak_profile(L, [config.fig3.single_peak])
    )
    layered = make_layered_concept(
        base, config.fig3.peaks, L, "layered", single.target_token + 1, seed=config.seed + 1, norm=c.norm
    )
    return ConceptBank((single, layered), orthogonal=True)


def per_sample_scores(model: Model, pairs: Sequence[PairedSample], prompt, concept: ConceptSpec) -> np.ndarray:
    """(samples, layers) target-logit gain from steering each negative with
    its own pair's activation difference at each layer."""
    diffs = pair_differences(model, pairs, prompt)
    neg = stack_prefixes([p.negative for p in pairs])
    _, base = trace_batch(model, neg, prompt)
    t = concept.target_token
    scores = np.empty((len(pairs), model.n_layers))
    for l in range(1, model.n_layers + 1):
        _, steered = trace_batch(model, neg, prompt, [SteeringHook(l, diffs[:, l - 1], 1.0)])
        scores[:, l - 1] = steered[:, t].astype(np.float64) - base[:, t]
    return scores


def run_fig3_analog(config: ExperimentConfig) -> ReportBundle:
    f3 = config.fig3
    with stage("fig3-build"):
        bank = fig3_bank(config)
        model = build_model(config.model_config(), bank)
        prompt = prompt_of(config, model)
    bundle = ReportBundle()
    with stage("fig3-histogram"):
        for i, concept in enumerate(bank):
            pairs = generate_pairs(
                concept,
                f3.samples,
                _base_sampler(config, bank),
                f3.sigma,
                config.seed + _PAIR_BLOCK * (i + 1),
                config.data.negative,
            )
            counts = metrics.peak_layer_histogram(per_sample_scores(model, pairs, prompt, concept))
            peaks = [int(k) for k in np.flatnonzero(concept.localization_profile) + 1]
            bundle.histograms[concept.concept_id] = {
                "category": concept.category,
                "planted_layers": peaks,
                "counts": [int(x) for x in counts],
                "n": int(f3.samples),
                "sigma": float(f3.sigma),
            }
    bundle.stages.append("fig3")
    return bundle


def run_reverse_analog(config: ExperimentConfig, alpha: float = 1.0) -> ReportBundle:
    """Ablate each concept layer by layer under single and persistent re-injection."""
    bundle = ReportBundle()
    for preset in ("single", "persistent"):
        lab = make_lab(config, localized=False, reinjection=preset)
        with stage(f"reverse-{preset}"):
            summary = {}
            for concept in lab.bank:
                held = make_pairs(config, lab.bank, concept, held_out=True)
                pos = EvalInputs(stack_prefixes([p.positive for p in held]), lab.prompt)
                neg = EvalInputs(stack_prefixes([p.negative for p in held]), lab.prompt)
                report = reverse_steer_experiment(
                    lab.model,
                    pos,
                    lab.vectors[concept.concept_id],
                    concept,
                    alpha=alpha,
                    layers=config.layers,
                    max_len=config.sweep.max_len,
                    negative_inputs=neg,
                )
                name = f"{concept.concept_id}@{preset}"
                for r in report.rows:
                    for metric in ("mention_rate", "target_logit", "logit_boost", "retained"):
                        bundle.reverse_rows.append(
                            MetricRow(name, r.layer, alpha, -1, metric, getattr(r, metric), len(pos))
                        )
                summary[concept.concept_id] = {
                    "unablated_mention_rate": report.unablated_mention_rate,
                    "unablated_target_logit": report.rows[0].unablated_target_logit,
                    "baseline_target_logit": report.rows[0].baseline_target_logit,
                }
            bundle.reverse[preset] = summary
    bundle.stages.append("reverse")
    return bundle


def run_alpha_analog(
    config: ExperimentConfig, lab: Lab | None = None, concept_id: str | None = None, layer: int | None = None
) -> ReportBundle:
    """Coefficient sweep at one layer plus the derived degeneration threshold.

    The threshold is where the target first ties every competitor; it is
    evaluated just above that point (``1 + 1e-3`` times) so greedy argmax
    picks the target.
    """
    lab = lab or make_lab(config)
    concept = lab.bank[concept_id] if concept_id else lab.bank.concepts[0]
    vset = lab.vectors[concept.concept_id]
    layer = layer or peak_layer(vset)
    bundle = ReportBundle()
    with stage("alpha"):
        inputs = make_eval_inputs(config, lab.bank, lab.prompt)
        threshold = degeneration_threshold(lab.model, inputs, vset.at(layer), layer, concept)
        alphas = sorted(set(float(a) for a in config.sweep.alpha_grid))
        at_threshold = threshold * (1 + 1e-3) if np.isfinite(threshold) else None
        if at_threshold is not None:
            alphas.append(at_threshold)
        table = alpha_sweep(
            lab.model,
            inputs,
            vset.at(layer),
            layer,
            alphas,
            concept,
            max_len=config.sweep.max_len,
            steer_every_step=config.sweep.steer_every_step,
        )
        names = ("success_rate", "similarity", "baseline_similarity", "logit_boost", "delta_logit")
        bundle.metrics += _effect_rows(f"{concept.concept_id}@alpha", table.rows, names, 1)
        slopes = [r.delta_logit / r.alpha for r in table.rows if r.alpha > 0]
        bundle.alpha = {
            "concept": concept.concept_id,
            "layer": layer,
            "degeneration_threshold": threshold if np.isfinite(threshold) else None,
            "evaluated_at": at_threshold,
            "success_drops": [list(p) for p in table.success_drops],
            "non_monotonic": table.non_monotonic,
            "log_boost_per_alpha": slopes,
        }
    bundle.stages.append("alpha")
    return bundle


def run_confusion_analog(config: ExperimentConfig, lab: Lab | None = None, alpha: float = 1.0) -> ReportBundle:
    """Inject each concept at its peak layer and read every concept's boost."""
    lab = lab or make_lab(config)
    bundle = ReportBundle()
    with stage("confusion"):
        layers = {cid: peak_layer(v) for cid, v in lab.vectors.items()}
        mat = metrics.confusion_matrix(lab.model, lab.bank, lab.vectors, layers, alpha, prompt_tokens=lab.prompt)
        ids = [c.concept_id for c in lab.bank]
        off = mat[~np.eye(len(ids), dtype=bool)]
        bundle.confusion = {
            "concepts": ids,
            "layers": [layers[c] for c in ids],
            "alpha": alpha,
            "matrix": mat.tolist(),
            "diagonal_ratio": float(np.diag(mat).min() / off.max()),
        }
    bundle.stages.append("confusion")
    return bundle


def run_faithfulness_suite(
    config: ExperimentConfig, lab: Lab | None = None, alphas: Sequence[float] | None = None
) -> ReportBundle:
    """TE, NIE and rho per concept, layer and alpha on held-out pairs."""
    lab = lab or make_lab(config)
    alphas = list(config.sweep.alphas) if alphas is None else list(alphas)
    bundle = ReportBundle()
    with stage("faithfulness"):
        for concept in lab.bank:
            held = make_pairs(config, lab.bank, concept, held_out=True)
            for layer in config.layers:
                for alpha in alphas:
                    rec = metrics.faithfulness(
                        lab.model, held, lab.vectors[concept.concept_id], layer, float(alpha), concept.target_token, lab.prompt
                    )
                    bundle.faithfulness.append(FaithRow(concept.concept_id, layer, rec.alpha, rec.te, rec.nie, rec.rho))
    bundle.stages.append("faithfulness")
    return bundle


def run_optimality(config: ExperimentConfig) -> ReportBundle:
    o = config.optimality
    with stage("optimality"):
        report = run_optimality_suite(
            n_problems=o.problems,
            d=o.d,
            sigmas=o.sigmas,
            seed=config.seed,
            ensemble_size=o.ensemble,
            n_random_dirs=o.random_directions,
            n_per_class=o.samples_per_class,
            steps=o.steps,
        )
    bundle = ReportBundle(optimality=report.to_dict())
    bundle.stages.append("optimality")
    return bundle


def optimality_passes(summary: dict) -> bool:
    return (
        summary["alignment_pass_fraction"] == 1.0
        and summary["maximin_win_fraction"] >= 0.95
        and summary["adversarial_win_fraction"] == 1.0
    )
