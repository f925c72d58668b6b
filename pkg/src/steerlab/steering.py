"""Forward and reverse steering, layer sweeps and coefficient sweeps.

Sweeps evaluate one hook at a time. Every cell reports generation metrics
(success/mention rate, similarity to the concept, similarity to the
unsteered output) and first-step logit metrics (boost, mean logit delta,
target logit).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from steerlab import metrics
from steerlab.errors import DataError
from steerlab.model import (
    GenerationResult,
    Model,
    SteeringHook,
    generate_batch,
)
from steerlab.synthetic import ConceptSpec, VisualPrefix

DEFAULT_ALPHAS = (0.1, 0.5, 1.0, 2.0, 5.0)

__all__ = [
    "DEFAULT_ALPHAS",
    "EvalInputs",
    "SteeringHook",
    "SweepGrid",
    "steer_generate",
    "layer_sweep",
    "alpha_sweep",
    "degeneration_threshold",
    "reverse_steer_experiment",
]


@dataclass(frozen=True)
class SweepGrid:
    layers: tuple[int, ...]
    alphas: tuple[float, ...] = DEFAULT_ALPHAS
    sign: int = 1

    def __post_init__(self):
        if not self.layers or not self.alphas:
            raise DataError("sweep grid axes must be non-empty")
        if self.sign not in (1, -1):
            raise DataError("sign must be +1 or -1")
        if any(a < 0 for a in self.alphas):
            raise DataError("alphas must be >= 0")


@dataclass(frozen=True, eq=False)
class EvalInputs:
    """A batch of query prefixes sharing one prompt."""

    prefixes: np.ndarray
    prompt: tuple[int, ...]

    def __post_init__(self):
        prefixes = np.asarray(self.prefixes, dtype=np.float32)
        if prefixes.ndim != 3 or prefixes.shape[0] == 0:
            raise DataError("eval prefixes must be a non-empty (B, P, d) array")
        object.__setattr__(self, "prefixes", prefixes)
        object.__setattr__(self, "prompt", tuple(int(t) for t in self.prompt))

    def __len__(self) -> int:
        return self.prefixes.shape[0]

    @classmethod
    def from_prefixes(cls, prefixes: Sequence[VisualPrefix], prompt) -> "EvalInputs":
        return cls(np.stack([p.embeddings for p in prefixes]), tuple(prompt))


@dataclass(frozen=True, eq=False)
class Baseline:
    outputs: list[tuple[int, ...]]
    logits: np.ndarray  # (B, V) first-step logits


def run_baseline(model: Model, inputs: EvalInputs, max_len: int) -> Baseline:
    gens = generate_batch(model, inputs.prefixes, inputs.prompt, max_len)
    return Baseline([g.token_ids for g in gens], np.stack([g.trace.final_logits for g in gens]))


@dataclass(frozen=True)
class EffectRow:
    layer: int
    alpha: float
    sign: int
    success_rate: float
    similarity: float
    baseline_similarity: float
    logit_boost: float
    delta_logit: float
    target_logit: float
    n: int

    @property
    def mention_rate(self) -> float:
        return self.success_rate


METRIC_NAMES = (
    "success_rate",
    "similarity",
    "baseline_similarity",
    "logit_boost",
    "delta_logit",
    "target_logit",
)


def evaluate_hook(
    model: Model,
    inputs: EvalInputs,
    hook: SteeringHook,
    concept: ConceptSpec,
    baseline: Baseline,
    max_len: int,
    lexicon: Iterable[int] | None = None,
    steer_every_step: bool = True,
) -> EffectRow:
    lexicon = {concept.target_token} if lexicon is None else set(lexicon)
    gens = generate_batch(model, inputs.prefixes, inputs.prompt, max_len, [hook], steer_every_step)
    outputs = [g.token_ids for g in gens]
    steered = np.stack([g.trace.final_logits for g in gens])
    sims = [metrics.semantic_similarity(o, concept, model).value for o in outputs]
    base_sims = [metrics.output_similarity(o, b, model).value for o, b in zip(outputs, baseline.outputs)]
    delta = metrics.mean_logit_delta(baseline.logits, steered, [concept.target_token])
    return EffectRow(
        layer=hook.layer,
        alpha=float(hook.alpha),
        sign=hook.sign,
        success_rate=metrics.success_rate(outputs, lexicon),
        similarity=float(np.mean(sims)),
        baseline_similarity=float(np.mean(base_sims)),
        logit_boost=float(np.exp(delta)),
        delta_logit=delta,
        target_logit=float(steered[:, concept.target_token].astype(np.float64).mean()),
        n=len(inputs),
    )


@dataclass(frozen=True)
class EffectTable:
    concept_id: str
    rows: tuple[EffectRow, ...]

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows], dtype=np.float64)

    def peak_layers(self) -> dict[str, int]:
        """Argmax layer per metric, ties to the lowest layer."""
        layers = [r.layer for r in self.rows]
        order = np.argsort(layers, kind="stable")
        out = {}
        for name in METRIC_NAMES:
            col = self.column(name)[order]
            out[name] = int(np.asarray(layers)[order][int(np.argmax(col))])
        return out


@dataclass(frozen=True, eq=False)
class SteerResult:
    generation: GenerationResult
    base_generation: GenerationResult
    base_logits: np.ndarray
    steered_logits: np.ndarray


def steer_generate(
    model: Model,
    prefix,
    prompt,
    hook: SteeringHook,
    max_len: int,
    steer_every_step: bool = True,
) -> SteerResult:
    emb = prefix.embeddings if isinstance(prefix, VisualPrefix) else np.asarray(prefix, np.float32)
    base = generate_batch(model, emb[None], prompt, max_len)[0]
    steered = generate_batch(model, emb[None], prompt, max_len, [hook], steer_every_step)[0]
    return SteerResult(steered, base, base.trace.final_logits, steered.trace.final_logits)


def _check_vectors(model: Model, vector_set) -> None:
    if vector_set.vectors.shape != (model.n_layers, model.d):
        raise DataError(
            f"vector set is {vector_set.vectors.shape}, model needs ({model.n_layers}, {model.d})"
        )


def layer_sweep(
    model: Model,
    inputs: EvalInputs,
    vector_set,
    concept: ConceptSpec,
    alpha: float = 1.0,
    sign: int = 1,
    layers: Sequence[int] | None = None,
    max_len: int = 4,
    lexicon: Iterable[int] | None = None,
    baseline: Baseline | None = None,
    steer_every_step: bool = True,
) -> EffectTable:
    _check_vectors(model, vector_set)
    layers = range(1, model.n_layers + 1) if layers is None else layers
    baseline = run_baseline(model, inputs, max_len) if baseline is None else baseline
    rows = tuple(
        evaluate_hook(
            model,
            inputs,
            SteeringHook(l, vector_set.at(l), alpha, sign),
            concept,
            baseline,
            max_len,
            lexicon,
            steer_every_step,
        )
        for l in layers
    )
    return EffectTable(concept.concept_id, rows)


@dataclass(frozen=True)
class AlphaTable:
    concept_id: str
    layer: int
    rows: tuple[EffectRow, ...]

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows], dtype=np.float64)

    @property
    def success_drops(self) -> list[tuple[float, float]]:
        """Consecutive (alpha, next alpha) where success rate falls."""
        rows = sorted(self.rows, key=lambda r: r.alpha)
        return [
            (a.alpha, b.alpha) for a, b in zip(rows, rows[1:]) if b.success_rate < a.success_rate
        ]

    @property
    def non_monotonic(self) -> bool:
        return bool(self.success_drops)


def alpha_sweep(
    model: Model,
    inputs: EvalInputs,
    vector: np.ndarray,
    layer: int,
    alphas: Sequence[float],
    concept: ConceptSpec,
    sign: int = 1,
    max_len: int = 4,
    lexicon: Iterable[int] | None = None,
    baseline: Baseline | None = None,
    steer_every_step: bool = True,
) -> AlphaTable:
    if len(alphas) == 0:
        raise DataError("alphas must be non-empty")
    baseline = run_baseline(model, inputs, max_len) if baseline is None else baseline
    rows = tuple(
        evaluate_hook(
            model, inputs, SteeringHook(layer, vector, a, sign), concept, baseline, max_len, lexicon, steer_every_step
        )
        for a in alphas
    )
    return AlphaTable(concept.concept_id, layer, rows)


def _crossing(base: np.ndarray, slope: np.ndarray, target: int) -> np.ndarray:
    """Per-row smallest alpha >= 0 at which ``target`` beats every other token
    for logits ``base + alpha * slope`` (inf if it never does)."""
    gap = base - base[:, [target]]  # how far each token is ahead of the target
    rate = slope[:, [target]] - slope  # how fast the target catches up
    others = np.ones(base.shape[1], dtype=bool)
    others[target] = False
    gap, rate = gap[:, others], rate[:, others]
    with np.errstate(divide="ignore", invalid="ignore"):
        need = np.where(rate > 0, gap / rate, np.where((rate == 0) & (gap < 0), 0.0, np.inf))
    need = np.maximum(need, 0.0)
    return need.max(axis=1)


def degeneration_threshold(
    model: Model,
    inputs: EvalInputs,
    vector: np.ndarray,
    layer: int,
    concept: ConceptSpec,
) -> float:
    """Smallest alpha at which greedy decoding emits only the target token.

    Uses the linear-regime closed form: steered logits are base logits plus
    alpha times the unit-alpha logit shift. Both the first step and every
    later step (whose last token is the target itself) must be won.
    """
    t = concept.target_token
    B = len(inputs)
    prompt = np.asarray(inputs.prompt)
    T = prompt.size
    worst = 0.0
    for tokens in (np.tile(prompt, (B, 1)), np.tile(np.append(prompt, t), (B, 1))):
        base_h, base = model.run(inputs.prefixes, tokens, final_from=T - 1)
        _, unit = model.run(inputs.prefixes, tokens, [SteeringHook(layer, vector, 1.0)], final_from=T - 1)
        slope = unit.astype(np.float64) - base
        worst = max(worst, float(_crossing(base.astype(np.float64), slope, t).max()))
    return worst


@dataclass(frozen=True)
class ReverseRow:
    layer: int
    mention_rate: float
    target_logit: float
    unablated_target_logit: float
    baseline_target_logit: float
    logit_boost: float

    @property
    def retained(self) -> float | None:
        """Share of the concept's logit lift (over the negative baseline) left after ablation."""
        lift = self.unablated_target_logit - self.baseline_target_logit
        if abs(lift) < 1e-12:
            return None
        return (self.target_logit - self.baseline_target_logit) / lift


@dataclass(frozen=True)
class ReverseReport:
    concept_id: str
    alpha: float
    unablated_mention_rate: float
    rows: tuple[ReverseRow, ...]


def reverse_steer_experiment(
    model: Model,
    positive_inputs: EvalInputs,
    vector_set,
    concept: ConceptSpec,
    alpha: float = 1.0,
    layers: Sequence[int] | None = None,
    max_len: int = 4,
    negative_inputs: EvalInputs | None = None,
    lexicon: Iterable[int] | None = None,
) -> ReverseReport:
    """Subtract ``alpha * v^l`` at each layer in turn on concept-bearing inputs.

    ``baseline_target_logit`` is the mean target logit on ``negative_inputs``
    (0 when not given), used to express what share of the lift survives.
    """
    _check_vectors(model, vector_set)
    lexicon = {concept.target_token} if lexicon is None else set(lexicon)
    t = concept.target_token
    layers = range(1, model.n_layers + 1) if layers is None else layers
    unablated = run_baseline(model, positive_inputs, max_len)
    unablated_logit = float(unablated.logits[:, t].astype(np.float64).mean())
    if negative_inputs is not None:
        neg = run_baseline(model, negative_inputs, 1)
        baseline_logit = float(neg.logits[:, t].astype(np.float64).mean())
    else:
        baseline_logit = 0.0
    rows = []
    for l in layers:
        hook = SteeringHook(l, vector_set.at(l), alpha, sign=-1)
        gens = generate_batch(model, positive_inputs.prefixes, positive_inputs.prompt, max_len, [hook])
        logits = np.stack([g.trace.final_logits for g in gens])
        rows.append(
            ReverseRow(
                layer=l,
                mention_rate=metrics.mention_rate([g.token_ids for g in gens], lexicon),
                target_logit=float(logits[:, t].astype(np.float64).mean()),
                unablated_target_logit=unablated_logit,
                baseline_target_logit=baseline_logit,
                logit_boost=metrics.logit_boost(unablated.logits, logits, [t]),
            )
        )
    return ReverseReport(
        concept.concept_id,
        float(alpha),
        metrics.mention_rate(unablated.outputs, lexicon),
        tuple(rows),
    )
