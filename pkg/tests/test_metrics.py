import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import make_linear, sampler_for
from steerlab import metrics
from steerlab.errors import DataError
from steerlab.extraction import ConceptVectorSet, extract
from steerlab.model import BOS, SteeringHook, trace_batch
from steerlab.synthetic import ConceptBank, ConceptSpec, generate_pairs

PROMPT = (BOS, 29, 30, 31)


def gini_oracle(e):
    """Mean absolute difference form, independent of the sorted-rank form."""
    e = np.asarray(e, dtype=np.float64)
    if e.sum() == 0:
        return 0.0
    n = e.size
    return np.abs(e[:, None] - e[None, :]).sum() / (2 * n * n * e.mean())


# --- rates ---------------------------------------------------------------------


def test_success_rate_counts():
    cat, sits, dog = 5, 6, 7
    assert metrics.success_rate([[cat, sits], [dog]], {cat}) == 0.5
    assert metrics.success_rate([[dog], [sits]], {cat}) == 0.0
    assert metrics.success_rate([[cat, dog], [cat]], {cat}) == 1.0
    assert metrics.success_rate([[]], {cat}) == 0.0
    with pytest.raises(DataError):
        metrics.success_rate([[cat]], set())
    with pytest.raises(DataError):
        metrics.success_rate([], {cat})


def test_custom_classifier_and_mention_rate():
    outs = [[1, 2], [3], [2, 2]]
    assert metrics.success_rate(outs, classifier=lambda t: len(t) == 2) == pytest.approx(2 / 3)
    assert metrics.mention_rate(outs, {2}) == metrics.success_rate(outs, {2})


# --- similarity ------------------------------------------------------------------


def test_semantic_similarity(linear_model):
    c = linear_model.bank.concepts[0]
    t = c.target_token
    assert metrics.semantic_similarity([t], c, linear_model).value == pytest.approx(1.0)
    for k in (2, 5):
        assert metrics.semantic_similarity([t] * k, c, linear_model).value == pytest.approx(1.0)
    # rows of the other concepts are orthogonal to the target row
    others = [x.target_token for x in linear_model.bank.concepts[1:]]
    assert metrics.semantic_similarity(others, c, linear_model).value == pytest.approx(0.0, abs=1e-7)
    empty = metrics.semantic_similarity([], c, linear_model)
    assert empty.value == 0.0 and empty.degenerate


def test_output_similarity(linear_model):
    assert metrics.output_similarity([30, 31], [31, 30], linear_model).value == pytest.approx(1.0)
    assert metrics.output_similarity([], [5], linear_model).degenerate


# --- logit boost -----------------------------------------------------------------


def test_logit_boost_definition():
    base = np.zeros((2, 5))
    assert metrics.logit_boost(base, base, [1]) == 1.0
    steered = base.copy()
    steered[:, 3] = math.log(10)
    assert metrics.logit_boost(base, steered, [3]) == pytest.approx(10.0)
    with pytest.raises(DataError):
        metrics.logit_boost(base, np.zeros((2, 4)), [1])


def test_linear_boost_closed_form(linear_model):
    c = linear_model.bank.concepts[0]
    v = np.random.default_rng(0).standard_normal(16).astype(np.float32)
    prefixes = np.zeros((3, 3, 16), np.float32)
    _, base = trace_batch(linear_model, prefixes, PROMPT)
    for layer in (1, 4, 6):
        _, steered = trace_batch(linear_model, prefixes, PROMPT, [SteeringHook(layer, v, 0.7)])
        expected = math.exp(0.7 * float(c.direction @ v.astype(np.float64)))
        assert metrics.logit_boost(base, steered, [c.target_token]) == pytest.approx(expected, rel=1e-5)


def test_token_group_boost(linear_model):
    c0, c1 = linear_model.bank.concepts[:2]
    prefixes = np.zeros((2, 3, 16), np.float32)
    _, base = trace_batch(linear_model, prefixes, PROMPT)
    _, steered = trace_batch(linear_model, prefixes, PROMPT, [SteeringHook(2, 2.0 * c0.direction)])
    groups = metrics.token_group_boost(base, steered, {"aligned": [c0.target_token], "orthogonal": [c1.target_token]})
    assert groups["aligned"] == pytest.approx(metrics.logit_boost(base, steered, [c0.target_token]))
    assert groups["aligned"] > 1.0
    assert groups["orthogonal"] == pytest.approx(1.0, abs=1e-6)
    with pytest.raises(DataError):
        metrics.token_group_boost(base, steered, {"a": [1, 2], "b": [2]})
    with pytest.raises(DataError):
        metrics.token_group_boost(base, steered, {})


def test_logit_boost_composes_multiplicatively(linear_model):
    c = linear_model.bank.concepts[0]
    prefixes = np.zeros((1, 3, 16), np.float32)
    v, w = 0.4 * c.direction, 0.9 * c.direction
    _, base = trace_batch(linear_model, prefixes, PROMPT)
    _, a = trace_batch(linear_model, prefixes, PROMPT, [SteeringHook(3, v)])
    _, b = trace_batch(linear_model, prefixes, PROMPT, [SteeringHook(3, w)])
    _, ab = trace_batch(linear_model, prefixes, PROMPT, [SteeringHook(3, v), SteeringHook(3, w)])
    t = [c.target_token]
    assert metrics.logit_boost(base, ab, t) == pytest.approx(
        metrics.logit_boost(base, a, t) * metrics.logit_boost(base, b, t), rel=1e-5
    )


# --- gini --------------------------------------------------------------------------


def test_gini_examples():
    assert metrics.gini([1, 1, 1, 1]) == 0.0
    assert metrics.gini([0, 0, 0, 1]) == 0.75
    assert metrics.gini([0, 0, 0, 0]) == 0.0
    assert metrics.gini(np.eye(8)[3]) == pytest.approx(0.875)
    with pytest.raises(DataError):
        metrics.gini([1, -1])
    with pytest.raises(DataError):
        metrics.gini([])


profiles = arrays(np.float64, st.integers(1, 12), elements=st.just(0.0) | st.floats(1e-6, 1e6))


@settings(max_examples=300, deadline=None)
@given(profiles)
def test_gini_matches_oracle(e):
    assert metrics.gini(e) == pytest.approx(gini_oracle(e), abs=1e-9)


@settings(max_examples=300, deadline=None)
@given(profiles, st.floats(1e-3, 1e3), st.randoms(use_true_random=False))
def test_gini_invariances(e, c, rnd):
    g = metrics.gini(e)
    perm = list(e)
    rnd.shuffle(perm)
    assert metrics.gini(perm) == pytest.approx(g, abs=1e-9)
    assert metrics.gini(c * e) == pytest.approx(g, abs=1e-9)
    assert 0.0 <= g <= (e.size - 1) / e.size


def test_gini_bound_over_many_random_profiles():
    rng = np.random.default_rng(0)
    for _ in range(10_000):
        n = int(rng.integers(1, 17))
        e = rng.exponential(size=n) * (rng.random(n) < 0.7)
        g = metrics.gini(e)
        assert 0.0 <= g <= (n - 1) / n + 1e-12


def test_effect_profile_kinds():
    np.testing.assert_allclose(metrics.effect_profile([1.0, math.e, 0.5], "boost"), [0.0, 1.0, 0.0])
    np.testing.assert_allclose(metrics.effect_profile([-0.2, 0.5, 1.4], "rate"), [0.0, 0.5, 1.0])
    np.testing.assert_allclose(metrics.effect_profile([-2.0, 3.0], "signed"), [2.0, 3.0])
    with pytest.raises(DataError):
        metrics.effect_profile([1.0], "other")


# --- peak histogram -----------------------------------------------------------------


def test_peak_histogram_examples():
    counts = metrics.peak_layer_histogram([[0.1, 0.9, 0.2], [0.5, 0.4, 0.3]])
    assert list(counts) == [1, 1, 0]
    assert list(metrics.peak_layer_histogram(np.ones((4, 3)))) == [4, 0, 0]
    with pytest.raises(DataError):
        metrics.peak_layer_histogram(np.zeros((0, 3)))


@settings(max_examples=100, deadline=None)
@given(arrays(np.int64, st.tuples(st.integers(1, 20), st.integers(1, 8)), elements=st.integers(-50, 50)))
def test_peak_histogram_partition_and_monotone_invariance(scores):
    # integer scores keep the monotone transform exact, so ties survive it
    counts = metrics.peak_layer_histogram(scores)
    assert counts.sum() == scores.shape[0]
    np.testing.assert_array_equal(counts, metrics.peak_layer_histogram(np.exp(scores / 4.0) * 3 + 1))


# --- faithfulness ---------------------------------------------------------------------


def _vset(model, vectors):
    return ConceptVectorSet("c0", 1, np.asarray(vectors, np.float32), model.fingerprint)


def test_faithfulness_ratio_arithmetic(linear_model):
    """Steering with 0.8 of the planted difference gives rho = 0.8."""
    c = linear_model.bank.concepts[0]
    pairs = generate_pairs(c, 5, sampler_for(linear_model), 0.0, seed=1)
    vectors = np.tile(0.8 * c.norm * c.direction, (6, 1))
    rec = metrics.faithfulness(linear_model, pairs, _vset(linear_model, vectors), 1, 1.0, c.target_token, PROMPT)
    assert rec.te == pytest.approx(5 * c.norm, rel=1e-5)
    assert rec.nie == pytest.approx(0.8 * rec.te, rel=1e-5)
    assert rec.rho == pytest.approx(0.8, rel=1e-5)


def test_faithfulness_linear_and_orthogonal(linear_model):
    c = linear_model.bank.concepts[0]
    pairs = generate_pairs(c, 8, sampler_for(linear_model), 0.0, seed=2)
    vset = extract(linear_model, pairs, PROMPT)
    for alpha in (0.5, 1.0, 2.0):
        rec = metrics.faithfulness(linear_model, pairs, vset, 1, alpha, c.target_token, PROMPT)
        assert rec.rho == pytest.approx(alpha, rel=1e-4)
    ortho = _vset(linear_model, np.tile(4 * linear_model.bank.concepts[1].direction, (6, 1)))
    rec = metrics.faithfulness(linear_model, pairs, ortho, 1, 1.0, c.target_token, PROMPT)
    assert rec.rho == pytest.approx(0.0, abs=1e-6)


def test_faithfulness_absent_when_no_total_effect(linear_model):
    c = linear_model.bank.concepts[0]
    pairs = [p.swapped().swapped() for p in generate_pairs(c, 3, sampler_for(linear_model), 0.0, seed=0)]
    same = [type(p)(p.negative, p.negative, p.concept_id) for p in pairs]
    vset = extract(linear_model, pairs, PROMPT)
    rec = metrics.faithfulness(linear_model, same, vset, 1, 1.0, c.target_token, PROMPT)
    assert rec.te == 0.0 and rec.rho is None
    with pytest.raises(DataError):
        metrics.faithfulness(linear_model, [], vset, 1, 1.0, c.target_token, PROMPT)


# --- confusion ---------------------------------------------------------------------


def _unit_vsets(model):
    return {c.concept_id: ConceptVectorSet(c.concept_id, 1, np.tile(c.direction, (6, 1)), model.fingerprint) for c in model.bank}


def test_confusion_orthonormal(linear_model):
    mat = metrics.confusion_matrix(linear_model, linear_model.bank, _unit_vsets(linear_model), 2, 1.0, prompt_tokens=PROMPT)
    assert mat.shape == (3, 3) and np.all(mat > 0)
    off = mat[~np.eye(3, dtype=bool)]
    np.testing.assert_allclose(off, 1.0, atol=1e-4)
    np.testing.assert_allclose(np.diag(mat), math.e, rtol=1e-5)


def test_confusion_overlapping_directions():
    d1 = np.array([1.0, 0.0, 0.0, 0.0])
    d2 = np.array([0.5, np.sqrt(0.75), 0.0, 0.0])
    bank = ConceptBank((ConceptSpec("a", 2, d1, norm=1.0), ConceptSpec("b", 3, d2, norm=1.0)), orthogonal=False)
    model = make_linear(d=4, vocab=8, bank=bank)
    vsets = {c.concept_id: ConceptVectorSet(c.concept_id, 1, np.tile(c.direction, (6, 1)), model.fingerprint) for c in bank}
    mat = metrics.confusion_matrix(model, bank, vsets, 1, 1.0, prompt_tokens=(BOS, 7))
    assert mat[0, 1] == pytest.approx(math.exp(0.5), rel=1e-5)
    assert mat[1, 0] == pytest.approx(math.exp(0.5), rel=1e-5)


def test_confusion_needs_two_concepts(linear_model):
    one = ConceptBank(linear_model.bank.concepts[:1])
    with pytest.raises(DataError):
        metrics.confusion_matrix(linear_model, one, _unit_vsets(linear_model), 1)


def test_metrics_record_ranges():
    metrics.MetricsRecord("c", 1, 1.0, 0.5, 0.2, 1.3, 0.5, 10)
    with pytest.raises(DataError):
        metrics.MetricsRecord("c", 1, 1.0, 1.5, 0.2, 1.3, 0.5, 10)
    with pytest.raises(DataError):
        metrics.MetricsRecord("c", 1, 1.0, 0.5, 0.2, 0.0, 0.5, 10)
    with pytest.raises(DataError):
        metrics.MetricsRecord("c", 1, 1.0, 0.5, 0.2, 1.0, 0.5, 0)
