"""Steering metrics.

Generation-level scores (success/mention rate, similarity) work on token
sequences; logit-level scores work on first-step logits. Lexicon matching
stands in for an LLM judge and unembedding-row cosine for a sentence
embedder; ``success_rate`` accepts any ``classifier`` to swap the judge.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from steerlab.errors import DataError
from steerlab.model import Model, SteeringHook, default_prompt, trace_batch
from steerlab.synthetic import ConceptBank, ConceptSpec, PairedSample, stack_prefixes

Classifier = Callable[[Sequence[int]], bool]


@dataclass(frozen=True)
class MetricsRecord:
    concept_id: str
    layer: int
    alpha: float
    success_rate: float
    similarity: float
    logit_boost: float
    mention_rate: float
    n: int
    sign: int = 1

    def __post_init__(self):
        if not 0.0 <= self.success_rate <= 1.0 or not 0.0 <= self.mention_rate <= 1.0:
            raise DataError("rates must lie in [0, 1]")
        if not -1.0 - 1e-6 <= self.similarity <= 1.0 + 1e-6:
            raise DataError("similarity must lie in [-1, 1]")
        if not self.logit_boost > 0:
            raise DataError("logit boost must be positive")
        if self.n < 1:
            raise DataError("sample count must be >= 1")


def success_rate(
    outputs: Sequence[Sequence[int]],
    target_lexicon: Iterable[int] | None = None,
    classifier: Classifier | None = None,
) -> float:
    if not outputs:
        raise DataError("no outputs to score")
    if classifier is None:
        lexicon = set(target_lexicon or ())
        if not lexicon:
            raise DataError("empty target lexicon")

        def classifier(tokens):
            return any(t in lexicon for t in tokens)

    return sum(bool(classifier(out)) for out in outputs) / len(outputs)


def mention_rate(
    outputs: Sequence[Sequence[int]],
    target_lexicon: Iterable[int] | None = None,
    classifier: Classifier | None = None,
) -> float:
    """Same estimator as ``success_rate``, read as residual presence under ablation."""
    return success_rate(outputs, target_lexicon, classifier)


class SimilarityScore(NamedTuple):
    value: float
    degenerate: bool = False


def _cosine(a: np.ndarray, b: np.ndarray) -> SimilarityScore:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return SimilarityScore(0.0, True)
    return SimilarityScore(float(np.clip(a @ b / (na * nb), -1.0, 1.0)))


def _mean_row(tokens: Sequence[int], model: Model) -> np.ndarray:
    if len(tokens) == 0:
        return np.zeros(model.d)
    return model.unembed[np.asarray(tokens)].astype(np.float64).mean(axis=0)


def semantic_similarity(output: Sequence[int], concept: ConceptSpec | int, model: Model) -> SimilarityScore:
    """Cosine between the mean unembedding row of ``output`` and the target row.

    An empty output or a zero mean row scores 0 with ``degenerate`` set.
    """
    token = concept.target_token if isinstance(concept, ConceptSpec) else int(concept)
    return _cosine(_mean_row(output, model), model.unembed[token].astype(np.float64))


def output_similarity(output: Sequence[int], reference: Sequence[int], model: Model) -> SimilarityScore:
    """Cosine between mean unembedding rows of two outputs (e.g. steered vs baseline)."""
    return _cosine(_mean_row(output, model), _mean_row(reference, model))


def mean_logit_delta(base_logits, steered_logits, target_tokens: Sequence[int]) -> float:
    base = np.atleast_2d(np.asarray(base_logits, dtype=np.float64))
    steered = np.atleast_2d(np.asarray(steered_logits, dtype=np.float64))
    if base.shape != steered.shape:
        raise DataError(f"logit shapes differ: {base.shape} vs {steered.shape}")
    idx = np.asarray(list(target_tokens))
    if idx.size == 0:
        raise DataError("no target tokens")
    return float((steered[:, idx] - base[:, idx]).mean())


def logit_boost(base_logits, steered_logits, target_tokens: Sequence[int]) -> float:
    """exp of the mean first-step logit increase over targets and samples."""
    return math.exp(mean_logit_delta(base_logits, steered_logits, target_tokens))


def token_group_boost(base_logits, steered_logits, groups: Mapping[str, Iterable[int]]) -> dict[str, float]:
    if not groups:
        raise DataError("no token groups")
    seen: set[int] = set()
    sets = {}
    for name, tokens in groups.items():
        tokens = set(tokens)
        if not tokens:
            raise DataError(f"token group {name!r} is empty")
        if seen & tokens:
            raise DataError(f"token group {name!r} overlaps another group")
        seen |= tokens
        sets[name] = sorted(tokens)
    return {name: logit_boost(base_logits, steered_logits, tokens) for name, tokens in sets.items()}


def gini(profile) -> float:
    e = np.asarray(profile, dtype=np.float64).ravel()
    if e.size == 0:
        raise DataError("empty profile")
    if np.any(e < 0):
        raise DataError("Gini needs nonnegative effects")
    total = e.sum()
    if total == 0:
        return 0.0
    n = e.size
    ranks = np.arange(1, n + 1)
    g = 2.0 * np.sum(ranks * np.sort(e)) / (n * total) - (n + 1) / n
    return float(min(max(g, 0.0), (n - 1) / n))


def effect_profile(values: Sequence[float], kind: str) -> np.ndarray:
    """Nonnegative per-layer effects for Gini: ``boost`` -> max(log b, 0);
    ``rate`` -> raw values in [0, 1]; ``signed`` -> absolute values."""
    v = np.asarray(values, dtype=np.float64)
    if kind == "boost":
        return np.maximum(np.log(v), 0.0)
    if kind == "rate":
        return np.clip(v, 0.0, 1.0)
    if kind == "signed":
        return np.abs(v)
    raise DataError(f"unknown effect kind {kind!r}")


def peak_layer_histogram(per_sample_scores) -> np.ndarray:
    """Counts of argmax layer per sample; entry ``i`` is layer ``i + 1``.

    Ties go to the lowest layer.
    """
    scores = np.asarray(per_sample_scores, dtype=np.float64)
    if scores.ndim != 2 or scores.size == 0:
        raise DataError("scores must be a non-empty (samples, layers) matrix")
    return np.bincount(scores.argmax(axis=1), minlength=scores.shape[1])


@dataclass(frozen=True)
class FaithfulnessRecord:
    te: float
    nie: float
    rho: float | None
    layer: int
    alpha: float


def faithfulness(
    model: Model,
    pairs: Sequence[PairedSample],
    vector_set,
    layer: int,
    alpha: float,
    target_token: int,
    prompt_tokens=None,
    te_tol: float = 1e-5,
) -> FaithfulnessRecord:
    """TE sums the target-logit gap between positives and negatives; NIE
    sums the gap produced by steering the negatives; rho = NIE / TE, or
    ``None`` when the per-pair mean |TE| is at most ``te_tol`` (float32
    logits leave residue of order 1e-6 where the concept is absent)."""
    if not pairs:
        raise DataError("no pairs given")
    prompt = default_prompt(model.config) if prompt_tokens is None else prompt_tokens
    pos = stack_prefixes([p.positive for p in pairs])
    neg = stack_prefixes([p.negative for p in pairs])
    _, logit_pos = trace_batch(model, pos, prompt)
    _, logit_neg = trace_batch(model, neg, prompt)
    te = float(np.sum(logit_pos[:, target_token].astype(np.float64) - logit_neg[:, target_token]))
    hook = SteeringHook(layer, vector_set.at(layer), alpha=alpha)
    _, logit_steer = trace_batch(model, neg, prompt, [hook])
    nie = float(np.sum(logit_steer[:, target_token].astype(np.float64) - logit_neg[:, target_token]))
    rho = nie / te if abs(te) > te_tol * len(pairs) else None
    return FaithfulnessRecord(te, nie, rho, layer, float(alpha))


def confusion_matrix(
    model: Model,
    bank: ConceptBank,
    vector_sets: Mapping[str, object],
    layer: int | Mapping[str, int],
    alpha: float = 1.0,
    prefixes: np.ndarray | None = None,
    prompt_tokens=None,
) -> np.ndarray:
    """Entry (i, j): boost of concept j's target when injecting concept i.

    Rows and columns follow bank order. ``layer`` may map concept ids to
    their own injection layer. Default query is one blank prefix.
    """
    concepts = list(bank)
    if len(concepts) < 2:
        raise DataError("confusion matrix needs at least two concepts")
    if prefixes is None:
        prefixes = np.zeros((1, model.config.prefix_len, model.d), dtype=np.float32)
    prompt = default_prompt(model.config) if prompt_tokens is None else prompt_tokens
    _, base = trace_batch(model, prefixes, prompt)
    out = np.empty((len(concepts), len(concepts)))
    for i, ci in enumerate(concepts):
        li = layer[ci.concept_id] if isinstance(layer, Mapping) else layer
        hook = SteeringHook(li, vector_sets[ci.concept_id].at(li), alpha=alpha)
        _, steered = trace_batch(model, prefixes, prompt, [hook])
        for j, cj in enumerate(concepts):
            out[i, j] = logit_boost(base, steered, [cj.target_token])
    return out
