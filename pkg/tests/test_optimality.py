import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from steerlab.errors import DataError
from steerlab.optimality import (
    ClassDataset,
    InadmissibleProbe,
    LinearProbe,
    adversarial_probe,
    build_ensemble,
    check_alignment,
    expected_loss,
    is_monotonic_loss,
    logistic_loss,
    make_problem,
    rescore,
    run_optimality_suite,
    run_problem,
    train_probe,
    trivially_attainable_loss,
    worst_case_directional_derivative,
)


def gaussian_classes(mu1, mu0, cov, n, seed):
    rng = np.random.default_rng(seed)
    chol = np.linalg.cholesky(cov)
    x1 = mu1 + rng.standard_normal((n, len(mu1))) @ chol.T
    x0 = mu0 + rng.standard_normal((n, len(mu0))) @ chol.T
    return ClassDataset(np.concatenate([x1, x0]), np.r_[np.ones(n), np.zeros(n)])


def brute_force_constant_loss(labels):
    grid = np.linspace(-30, 30, 600_001)
    z = np.asarray(labels, float)
    p = z.mean()
    return float(np.min(p * np.logaddexp(0, -grid) + (1 - p) * np.logaddexp(0, grid)))


def test_trivial_loss_values():
    assert trivially_attainable_loss([0, 1]) == pytest.approx(math.log(2), abs=1e-12)
    assert trivially_attainable_loss([1, 1, 1]) <= 1e-4
    quarter = [1, 0, 0, 0]
    assert trivially_attainable_loss(quarter) == pytest.approx(0.5623351446, abs=1e-9)
    for labels in ([0, 1], quarter, [1, 1, 0, 0, 0, 0, 0, 0, 0, 0]):
        assert trivially_attainable_loss(labels) == pytest.approx(brute_force_constant_loss(labels), abs=1e-7)
    with pytest.raises(DataError):
        trivially_attainable_loss([])


def test_logistic_loss_is_monotonic():
    etas = np.linspace(-30, 30, 1001)
    assert is_monotonic_loss(etas)
    assert np.all(np.diff(logistic_loss(etas, 1)) <= 0)
    assert np.all(np.diff(logistic_loss(etas, 0)) >= 0)


def test_dataset_validation():
    with pytest.raises(DataError):
        ClassDataset(np.zeros((3, 2)), [1, 1, 1])
    with pytest.raises(DataError):
        ClassDataset(np.zeros((3, 2)), [0, 1, 2])
    ds = ClassDataset(np.array([[1.0, 0], [3.0, 0], [0, 0]]), [1, 1, 0])
    np.testing.assert_allclose(ds.delta, [2.0, 0.0])


def test_separable_classes_give_admissible_probe():
    ds = gaussian_classes(np.array([1.0, 0]), np.array([-1.0, 0]), 0.01 * np.eye(2), 100, 0)
    probe = train_probe(ds, steps=2000)
    assert probe.admissible and not probe.stalled
    check = check_alignment(probe, ds)
    assert check.passed and check.inner > 0


def test_unrelated_labels_not_admissible():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((400, 3))
    z = rng.integers(0, 2, 400)
    train = ClassDataset(x[:200], z[:200])
    hold = ClassDataset(x[200:], z[200:])
    probe = train_probe(train, eval_dataset=hold)
    assert not probe.admissible
    with pytest.raises(InadmissibleProbe):
        check_alignment(probe, hold)


def test_training_is_deterministic():
    ds = gaussian_classes(np.array([1.0, 0]), np.array([-1.0, 0]), np.eye(2), 50, 3)
    a, b = train_probe(ds, seed=4), train_probe(ds, seed=4)
    np.testing.assert_array_equal(a.w, b.w)
    assert a.b == b.b


def test_self_alignment():
    ds = gaussian_classes(np.array([1.0, 0]), np.array([-1.0, 0]), np.eye(2), 50, 3)
    probe = rescore(ds.delta, 0.0, ds)
    assert check_alignment(probe, ds).inner == pytest.approx(ds.delta @ ds.delta)


def test_logistic_direction_matches_bayes_direction():
    # equal covariances: the log-odds are linear with weight inv(cov) @ delta
    cov = np.array([[1.0, 0.6, 0.0], [0.6, 1.0, 0.3], [0.0, 0.3, 0.5]])
    mu1, mu0 = np.array([0.5, 0.0, 0.5]), np.array([-0.5, 0.0, 0.0])
    ds = gaussian_classes(mu1, mu0, cov, 5000, 0)
    probe = train_probe(ds, steps=4000, step_size=1.0)
    bayes = np.linalg.solve(cov, mu1 - mu0)
    cos = probe.w @ bayes / (np.linalg.norm(probe.w) * np.linalg.norm(bayes))
    assert cos > 0.99
    assert bayes @ (mu1 - mu0) > 0


def test_worst_case_examples():
    ens = [np.array([1.0, 0.5]), np.array([1.0, -0.5])]
    assert worst_case_directional_derivative(np.array([1.0, 0.0]), ens) == pytest.approx(1.0)
    assert worst_case_directional_derivative(np.array([0.0, 1.0]), ens) == pytest.approx(-0.5)
    with pytest.raises(DataError):
        worst_case_directional_derivative(np.array([2.0, 0.0]), ens)
    with pytest.raises(DataError):
        worst_case_directional_derivative(np.array([1.0, 0.0]), [])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=3, max_size=3), st.integers(0, 1000))
def test_single_probe_maximin_at_its_direction(w, seed):
    w = np.asarray(w)
    if np.linalg.norm(w) < 1e-3:
        return
    best = worst_case_directional_derivative(w / np.linalg.norm(w), [w])
    u = np.random.default_rng(seed).standard_normal((20, 3))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    assert all(worst_case_directional_derivative(x, [w]) <= best + 1e-12 for x in u)


def test_ensemble_members_are_admissible_and_aligned():
    train, hold = make_problem(8, 0.5, 60, seed=3)
    ensemble, tried = build_ensemble(train, hold, size=80, n_trained=10, steps=300, seed=3)
    assert len(ensemble) == 80
    for p in ensemble:
        # re-checkable from stored fields
        assert p.loss == pytest.approx(expected_loss(p.w, p.b, hold))
        assert p.loss < p.trivial_loss - p.margin
        assert p.w @ hold.delta > 0
    assert {p.source for p in ensemble} >= {"trained", "orthogonal", "random"}
    assert len(tried) >= len(ensemble)


def test_maximin_beats_random_directions():
    train, hold = make_problem(8, 0.5, 60, seed=5)
    ensemble, _ = build_ensemble(train, hold, size=200, steps=300, seed=5)
    delta_hat = hold.delta / np.linalg.norm(hold.delta)
    m = worst_case_directional_derivative(delta_hat, ensemble)
    assert m > 0
    u = np.random.default_rng(0).standard_normal((100, 8))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    assert all(worst_case_directional_derivative(x, ensemble) < m for x in u)


def test_adversarial_probe_drives_direction_below_delta():
    train, hold = make_problem(8, 0.5, 60, seed=6)
    ensemble, _ = build_ensemble(train, hold, size=60, n_trained=10, steps=300, seed=6)
    delta_hat = hold.delta / np.linalg.norm(hold.delta)
    u = np.random.default_rng(1).standard_normal(8)
    u /= np.linalg.norm(u)
    adv = adversarial_probe(u, ensemble, hold)
    assert adv is not None and adv.admissible
    aug = ensemble + [adv]
    assert worst_case_directional_derivative(u, aug) < worst_case_directional_derivative(delta_hat, aug)
    assert adversarial_probe(delta_hat, ensemble, hold) is None


def test_run_problem_and_point_classes():
    rec = run_problem(0, 8, 0.0, seed=2, ensemble_size=50, n_random_dirs=10, steps=200)
    assert rec.n_admissible > 0 and rec.n_aligned == rec.n_admissible
    report = run_optimality_suite(3, d=6, sigmas=(0.0, 0.5), seed=1, ensemble_size=40, n_random_dirs=5, steps=200)
    assert report.alignment_pass_fraction == 1.0
    assert report.notes
    out = report.to_dict()
    assert out["n_problems"] == 3 and len(out["problems"]) == 3
    with pytest.raises(DataError):
        run_optimality_suite(0)


def test_probe_admissibility_flag():
    p = LinearProbe(np.zeros(2), 0.0, loss=0.5, trivial_loss=0.5)
    assert not p.admissible
    assert LinearProbe(np.zeros(2), 0.0, loss=0.4, trivial_loss=0.5).admissible


def test_adversary_against_probe_dominated_by_u():
    train, hold = make_problem(6, 1.0, 80, seed=2)
    delta_hat = hold.delta / np.linalg.norm(hold.delta)
    u = np.random.default_rng(3).standard_normal(6)
    u -= (u @ delta_hat) * delta_hat
    u /= np.linalg.norm(u)
    adv = adversarial_probe(u, [rescore(0.05 * delta_hat + 5 * u, 0.0, hold)], hold)
    assert adv is not None and adv.admissible
    assert adv.w @ u < 0 < adv.w @ hold.delta
