import warnings

import numpy as np
import pytest

from conftest import make_linear, sampler_for
from steerlab.errors import DataError, FormatError
from steerlab.extraction import (
    ConceptVectorSet,
    FingerprintWarning,
    extract,
    faithfulness_direction_check,
    load_vectors,
    pair_differences,
    pairwise_sum,
    save_vectors,
)
from steerlab.model import BOS, single_injection_gains
from steerlab.synthetic import PairedSample, VisualPrefix, generate_pairs, make_concept_bank

PROMPT = (BOS, 29, 30, 31)


def _pairs(model, concept=0, n=10, sigma=0.0, seed=0):
    spec = model.bank.concepts[concept]
    return generate_pairs(spec, n, sampler_for(model), sigma, seed)


def test_identical_prefixes_give_zero(linear_model):
    pairs = [PairedSample(p.negative, p.negative, p.concept_id) for p in _pairs(linear_model)]
    vset = extract(linear_model, pairs, PROMPT)
    assert not vset.vectors.any()


def test_planted_difference_arithmetic():
    # two noiseless pairs with differences 2 e1 and 2 e2 in a d=2 model
    bank = make_concept_bank(1, 2, seed=0, norm=1.0)
    model = make_linear(d=2, vocab=8, bank=bank)
    zero = VisualPrefix(np.zeros((3, 2), np.float32))
    pairs = [
        PairedSample(VisualPrefix(np.tile([2.0, 0.0], (3, 1))), zero, "c0"),
        PairedSample(VisualPrefix(np.tile([0.0, 2.0], (3, 1))), zero, "c0"),
    ]
    vset = extract(model, pairs, (BOS, 7))
    np.testing.assert_allclose(vset.at(1), [1.0, 1.0], atol=1e-6)


def test_noiseless_extraction_recovers_signal():
    model = make_linear(gains=single_injection_gains(6, 3))
    spec = model.bank.concepts[1]
    vset = extract(model, _pairs(model, 1), PROMPT)
    assert np.linalg.norm(vset.vectors[:2], axis=1).max() <= 1e-6
    for l in range(3, 7):
        np.testing.assert_allclose(vset.at(l), spec.norm * spec.direction, rtol=1e-5, atol=1e-5)
    cos = faithfulness_direction_check(vset, model.bank)
    assert cos[0] is None and cos[1] is None
    assert all(abs(c - 1) <= 1e-5 for c in cos[2:])


def test_swapped_pairs_negate(linear_model):
    pairs = _pairs(linear_model, sigma=0.3)
    v = extract(linear_model, pairs, PROMPT).vectors
    w = extract(linear_model, [p.swapped() for p in pairs], PROMPT).vectors
    np.testing.assert_array_equal(v, -w)


def test_union_is_weighted_average(linear_model):
    a, b = _pairs(linear_model, n=6, sigma=0.5, seed=0), _pairs(linear_model, n=10, sigma=0.5, seed=100)
    va = extract(linear_model, a, PROMPT).vectors.astype(np.float64)
    vb = extract(linear_model, b, PROMPT).vectors.astype(np.float64)
    vu = extract(linear_model, a + b, PROMPT).vectors
    np.testing.assert_allclose(vu, (6 * va + 10 * vb) / 16, atol=1e-6)


def test_scale_equivariance(linear_model):
    pairs = _pairs(linear_model, sigma=0.2)
    scaled = [
        PairedSample(VisualPrefix(3 * p.positive.embeddings), VisualPrefix(3 * p.negative.embeddings), p.concept_id)
        for p in pairs
    ]
    np.testing.assert_allclose(
        extract(linear_model, scaled, PROMPT).vectors, 3 * extract(linear_model, pairs, PROMPT).vectors, atol=1e-5
    )


def test_noise_convergence_rate():
    model = make_linear(d=16)
    spec = model.bank.concepts[0]
    errs = []
    for n in (10, 100, 1000):
        vset = extract(model, _pairs(model, n=n, sigma=0.5, seed=7), PROMPT)
        errs.append(np.linalg.norm(vset.at(1) - spec.norm * spec.direction))
    # expected error sigma * sqrt(2 d / n): 0.89, 0.28, 0.089
    expected = [0.5 * np.sqrt(32 / n) for n in (10, 100, 1000)]
    assert errs[0] > errs[1] > errs[2]
    for e, x in zip(errs, expected):
        assert e < 2.5 * x


def test_noisy_cosine_at_desk_scale():
    model = make_linear(d=64, vocab=64, norm=1.0)
    vset = extract(model, _pairs(model, n=100, sigma=0.1, seed=3), PROMPT)
    assert faithfulness_direction_check(vset, model.bank)[0] >= 0.95


def test_extract_errors(linear_model):
    pairs = _pairs(linear_model, 0, n=2) + _pairs(linear_model, 1, n=2)
    with pytest.raises(DataError):
        extract(linear_model, pairs, PROMPT)
    with pytest.raises(DataError):
        extract(linear_model, [], PROMPT)
    wrong = [PairedSample(VisualPrefix(np.zeros((3, 8))), VisualPrefix(np.zeros((3, 8))), "c0")]
    with pytest.raises(DataError):
        extract(linear_model, wrong, PROMPT)
    with pytest.raises(DataError):
        extract(linear_model, _pairs(linear_model), ())


def test_pairwise_sum_is_order_stable():
    a = np.random.default_rng(0).standard_normal((37, 4, 3)).astype(np.float32)
    np.testing.assert_allclose(pairwise_sum(a), a.astype(np.float64).sum(axis=0), rtol=1e-5)
    np.testing.assert_array_equal(pairwise_sum(a), pairwise_sum(a.copy()))


def test_pair_differences_shape(linear_model):
    diffs = pair_differences(linear_model, _pairs(linear_model, n=5), PROMPT)
    assert diffs.shape == (5, 6, 16)


def test_round_trip_bitwise(tmp_path, linear_model):
    vset = extract(linear_model, _pairs(linear_model, sigma=0.3), PROMPT)
    path = tmp_path / "v.cvec"
    save_vectors(vset, path)
    back = load_vectors(path, linear_model)
    assert back.concept_id == vset.concept_id and back.n_pairs == vset.n_pairs
    assert back.fingerprint == vset.fingerprint
    assert back.vectors.tobytes() == vset.vectors.tobytes()
    np.testing.assert_allclose(back.norms, np.linalg.norm(back.vectors, axis=1), rtol=1e-6)


def test_load_errors(tmp_path, linear_model):
    vset = extract(linear_model, _pairs(linear_model), PROMPT)
    path = tmp_path / "v.cvec"
    save_vectors(vset, path)
    data = path.read_bytes()
    path.write_bytes(data[:-4])
    with pytest.raises(DataError, match="shape mismatch"):
        load_vectors(path)
    path.write_bytes(b"XXXX" + data[4:])
    with pytest.raises(FormatError):
        load_vectors(path)
    path.write_bytes(data)
    other = make_linear(seed=3)
    with pytest.warns(FingerprintWarning):
        load_vectors(path, other)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        load_vectors(path, linear_model)
    with pytest.raises(DataError):
        load_vectors(path, make_linear(n_layers=4))


def test_vector_set_validation():
    with pytest.raises(DataError):
        ConceptVectorSet("c", 0, np.zeros((2, 3)), b"\0" * 8)
    with pytest.raises(DataError):
        ConceptVectorSet("c", 1, np.zeros(3), b"\0" * 8)
    v = ConceptVectorSet("c", 1, np.ones((2, 3)), b"\0" * 8)
    np.testing.assert_array_equal(v.negated().vectors, -v.vectors)
    with pytest.raises(DataError):
        v.at(3)
