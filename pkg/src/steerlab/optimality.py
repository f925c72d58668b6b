"""Numerical certification that admissible linear probes align with the
class-mean difference, and that the mean-difference direction is the
maximin steering direction over an admissible probe ensemble.

Admissibility and the class-mean difference are both measured on the same
(held-out) sample, so the alignment claim holds exactly for that empirical
distribution and any violation indicates a bug.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from steerlab.errors import DataError

LOGIT_CAP = 20.0


class InadmissibleProbe(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ClassDataset:
    samples: np.ndarray  # (n, d)
    labels: np.ndarray  # (n,) in {0, 1}

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=np.float64)
        z = np.asarray(self.labels).astype(np.int64)
        if x.ndim != 2 or z.shape != (x.shape[0],):
            raise DataError("samples must be (n, d) with one label per sample")
        if not np.isin(z, (0, 1)).all():
            raise DataError("labels must be 0 or 1")
        if z.sum() == 0 or z.sum() == z.size:
            raise DataError("both classes must be present")
        object.__setattr__(self, "samples", x)
        object.__setattr__(self, "labels", z)

    @property
    def d(self) -> int:
        return self.samples.shape[1]

    @property
    def mu1(self) -> np.ndarray:
        return self.samples[self.labels == 1].mean(axis=0)

    @property
    def mu0(self) -> np.ndarray:
        return self.samples[self.labels == 0].mean(axis=0)

    @property
    def delta(self) -> np.ndarray:
        return self.mu1 - self.mu0


@dataclass(frozen=True, eq=False)
class LinearProbe:
    w: np.ndarray
    b: float
    loss: float
    trivial_loss: float
    margin: float = 1e-3
    stalled: bool = False
    source: str = "trained"

    @property
    def admissible(self) -> bool:
        return self.loss < self.trivial_loss - self.margin


def logistic_loss(eta, z):
    """Elementwise log(1 + exp(-eta)) for z = 1 and log(1 + exp(eta)) for z = 0."""
    s = 2.0 * np.asarray(z, dtype=np.float64) - 1.0
    return np.logaddexp(0.0, -s * np.asarray(eta, dtype=np.float64))


def logistic_loss_derivative(eta, z):
    s = 2.0 * np.asarray(z, dtype=np.float64) - 1.0
    eta = np.asarray(eta, dtype=np.float64)
    return -s / (1.0 + np.exp(s * eta))


def is_monotonic_loss(etas) -> bool:
    """Derivative is <= 0 for z = 1 and >= 0 for z = 0 at every point."""
    return bool(
        np.all(logistic_loss_derivative(etas, 1) <= 0) and np.all(logistic_loss_derivative(etas, 0) >= 0)
    )


def trivially_attainable_loss(labels, loss_kind: str = "logistic") -> float:
    """Best mean loss of a constant predictor: the binary entropy of the base
    rate; a one-class sample uses a constant logit capped at ``LOGIT_CAP``."""
    if loss_kind != "logistic":
        raise DataError(f"unsupported loss {loss_kind!r}")
    z = np.asarray(labels, dtype=np.float64)
    if z.size == 0:
        raise DataError("no labels")
    p = z.mean()
    if p in (0.0, 1.0):
        const = LOGIT_CAP if p == 1.0 else -LOGIT_CAP
        return float(logistic_loss(np.full(z.shape, const), z).mean())
    return float(-(p * np.log(p) + (1 - p) * np.log(1 - p)))


def expected_loss(w, b, dataset: ClassDataset) -> float:
    eta = dataset.samples @ np.asarray(w, dtype=np.float64) + b
    return float(logistic_loss(eta, dataset.labels).mean())


def _gd_batch(x, z, weights, steps, step_size, w0, b0):
    """Full-batch gradient descent for K probes at once.

    x: (n, d); z, weights: (K, n) with weight rows summing to 1.
    """
    w, b = w0.copy(), b0.copy()
    s = 2.0 * z - 1.0
    history = np.empty((steps + 1, w.shape[0]))
    for i in range(steps + 1):
        eta = w @ x.T + b[:, None]
        history[i] = np.sum(weights * np.logaddexp(0.0, -s * eta), axis=1)
        if i == steps:
            break
        g = weights * (-s / (1.0 + np.exp(s * eta)))
        w -= step_size * (g @ x)
        b -= step_size * g.sum(axis=1)
    return w, b, history


def train_probes(
    dataset: ClassDataset,
    sample_weights: np.ndarray | None = None,
    labels: np.ndarray | None = None,
    steps: int = 2000,
    step_size: float = 0.5,
    seed: int = 0,
    margin: float = 1e-3,
    eval_dataset: ClassDataset | None = None,
    source: str = "trained",
) -> list[LinearProbe]:
    """Train one probe per row of ``sample_weights`` / ``labels``.

    Admissibility is judged on ``eval_dataset`` (default: the training set).
    A probe is ``stalled`` when it is not admissible and its training loss
    improved by less than 1e-6 over the last tenth of the run.
    """
    x = dataset.samples
    n, d = x.shape
    if sample_weights is None and labels is None:
        sample_weights = np.ones((1, n))
    if sample_weights is None:
        sample_weights = np.ones_like(np.atleast_2d(labels), dtype=np.float64)
    weights = np.atleast_2d(np.asarray(sample_weights, dtype=np.float64))
    if np.any(weights < 0) or np.any(weights.sum(axis=1) <= 0):
        raise DataError("sample weights must be nonnegative with a positive total")
    weights = weights / weights.sum(axis=1, keepdims=True)
    K = weights.shape[0]
    z = dataset.labels if labels is None else labels
    z = np.broadcast_to(np.atleast_2d(z).astype(np.float64), (K, n))
    rng = np.random.default_rng(seed)
    w0 = 0.01 * rng.standard_normal((K, d))
    b0 = np.zeros(K)
    w, b, history = _gd_batch(x, z, weights, steps, step_size, w0, b0)

    evaluation = dataset if eval_dataset is None else eval_dataset
    trivial = trivially_attainable_loss(evaluation.labels)
    tail = max(1, steps // 10)
    probes = []
    for k in range(K):
        loss = expected_loss(w[k], b[k], evaluation)
        admissible = loss < trivial - margin
        stalled = (not admissible) and (history[-tail - 1, k] - history[-1, k] < 1e-6)
        probes.append(LinearProbe(w[k].copy(), float(b[k]), loss, trivial, margin, stalled, source))
    return probes


def train_probe(
    dataset: ClassDataset,
    loss_kind: str = "logistic",
    steps: int = 2000,
    step_size: float = 0.5,
    seed: int = 0,
    margin: float = 1e-3,
    eval_dataset: ClassDataset | None = None,
) -> LinearProbe:
    if loss_kind != "logistic":
        raise DataError(f"unsupported loss {loss_kind!r}")
    return train_probes(
        dataset, steps=steps, step_size=step_size, seed=seed, margin=margin, eval_dataset=eval_dataset
    )[0]


def rescore(w, b, dataset: ClassDataset, margin: float = 1e-3, source: str = "perturbed") -> LinearProbe:
    return LinearProbe(
        np.asarray(w, dtype=np.float64),
        float(b),
        expected_loss(w, b, dataset),
        trivially_attainable_loss(dataset.labels),
        margin,
        source=source,
    )


@dataclass(frozen=True)
class AlignmentCheck:
    inner: float
    passed: bool


def check_alignment(probe: LinearProbe, dataset: ClassDataset) -> AlignmentCheck:
    if not probe.admissible:
        raise InadmissibleProbe("alignment is only asserted for admissible probes")
    inner = float(probe.w @ dataset.delta)
    return AlignmentCheck(inner, inner > 0)


def _weight_matrix(ensemble) -> np.ndarray:
    if isinstance(ensemble, np.ndarray):
        return np.atleast_2d(ensemble).astype(np.float64)
    return np.stack([p.w if isinstance(p, LinearProbe) else np.asarray(p, float) for p in ensemble])


def worst_case_directional_derivative(u, probe_ensemble) -> float:
    """min over the ensemble of <w, u> for a unit direction ``u``."""
    u = np.asarray(u, dtype=np.float64)
    if abs(np.linalg.norm(u) - 1.0) > 1e-6:
        raise DataError("direction must be unit-norm")
    if len(probe_ensemble) == 0:
        raise DataError("empty probe ensemble")
    return float(np.min(_weight_matrix(probe_ensemble) @ u))


# --- problem generation and ensembles ----------------------------------------


def make_problem(
    d: int, sigma: float, n_per_class: int = 100, seed: int = 0
) -> tuple[ClassDataset, ClassDataset]:
    """Two Gaussian classes sharing a random anisotropic covariance scaled by
    ``sigma``; returns (train, holdout) splits of equal size."""
    rng = np.random.default_rng(seed)
    mu0 = rng.standard_normal(d)
    shift = rng.standard_normal(d)
    mu1 = mu0 + shift / np.linalg.norm(shift)
    rot, _ = np.linalg.qr(rng.standard_normal((d, d)))
    scales = np.sqrt(rng.uniform(0.25, 2.0, d))

    def draw(m):
        zs = rng.standard_normal((m, d)) * scales
        return zs @ rot.T * sigma

    splits = []
    for _ in range(2):
        x = np.concatenate([mu0 + draw(n_per_class), mu1 + draw(n_per_class)])
        z = np.concatenate([np.zeros(n_per_class), np.ones(n_per_class)])
        splits.append(ClassDataset(x, z))
    return splits[0], splits[1]


def build_ensemble(
    train: ClassDataset,
    holdout: ClassDataset,
    size: int = 200,
    n_trained: int = 40,
    steps: int = 400,
    step_size: float = 0.5,
    seed: int = 0,
    margin: float = 1e-3,
) -> tuple[list[LinearProbe], list[LinearProbe]]:
    """Diversified probe ensemble judged on ``holdout``.

    Sources, in order: a plain fit; bootstrap reweightings; fits on labels
    with a random fraction flipped (weak probes near the admissibility edge);
    then perturbations of admissible fits along random directions orthogonal
    to the held-out class-mean difference, and along unrestricted random
    directions, each at the largest admissible scale on a halving ladder.

    Returns (ensemble of up to ``size`` admissible probes, every probe tried).
    """
    rng = np.random.default_rng(seed)
    n, d = train.samples.shape
    weights = [np.ones(n)]
    labels = [train.labels.astype(np.float64)]
    for k in range(1, n_trained):
        if k % 2:
            weights.append(rng.multinomial(n, np.full(n, 1.0 / n)).astype(np.float64) + 1e-9)
            labels.append(train.labels.astype(np.float64))
        else:
            flipped = train.labels.astype(np.float64).copy()
            idx = rng.random(n) < rng.uniform(0.1, 0.45)
            flipped[idx] = 1.0 - flipped[idx]
            weights.append(np.ones(n))
            labels.append(flipped)
    trained = train_probes(
        train,
        np.stack(weights),
        np.stack(labels),
        steps=steps,
        step_size=step_size,
        seed=seed,
        margin=margin,
        eval_dataset=holdout,
    )
    tried = list(trained)
    ensemble = [p for p in trained if p.admissible]
    parents = list(ensemble)
    if not parents:
        return ensemble, tried

    delta_hat = holdout.delta / np.linalg.norm(holdout.delta)
    ladder = 2.0 ** -np.arange(0, 12)
    i = 0
    while len(ensemble) < size and i < 20 * size:
        parent = parents[i % len(parents)]
        r = rng.standard_normal(d)
        orthogonal = i % 2 == 0
        if orthogonal:
            r -= (r @ delta_hat) * delta_hat
            source = "orthogonal"
        else:
            source = "random"
        r /= np.linalg.norm(r)
        scale = 4.0 * max(np.linalg.norm(parent.w), 1e-3)
        for t in ladder * scale:
            cand = rescore(parent.w + t * r, parent.b, holdout, margin, source)
            tried.append(cand)
            if cand.admissible:
                ensemble.append(cand)
                break
        i += 1
    return ensemble[:size], tried


def adversarial_probe(
    u: np.ndarray,
    ensemble: Sequence[LinearProbe],
    holdout: ClassDataset,
    margin: float = 1e-3,
) -> LinearProbe | None:
    """An admissible probe that pushes ``<w, u>`` below ``cos(u, delta) * m``,
    where m is the ensemble's worst case along the mean difference.

    Starts from the ensemble's weakest probe along the mean difference and
    subtracts a component along the part of ``u`` orthogonal to it, which
    leaves ``<w, delta>`` unchanged. If no such step stays admissible, falls
    back to a probe along ``delta_hat - k * u_perp`` with ``k`` just large
    enough that ``<w, u> < 0``, fitting only its scale and bias. ``None`` if
    ``u`` is parallel to the mean difference or neither route is admissible.
    """
    delta_hat = holdout.delta / np.linalg.norm(holdout.delta)
    u_perp = u - (u @ delta_hat) * delta_hat
    norm_perp = np.linalg.norm(u_perp)
    if norm_perp < 1e-12:
        return None
    u_perp /= norm_perp
    order = np.argsort([p.w @ delta_hat for p in ensemble], kind="stable")
    for idx in order[:5]:
        base = ensemble[idx]
        along = max(0.0, float(base.w @ u_perp))
        scale = max(np.linalg.norm(base.w), 1e-3)
        for tau in scale * 2.0 ** -np.arange(0, 30):
            cand = rescore(base.w - (along + tau) * u_perp, base.b, holdout, margin, "adversarial")
            if cand.admissible:
                return cand
    c = float(u @ delta_hat)
    for kappa in (0.05, 0.2, 0.5, 1.0):
        v = delta_hat - (max(c, 0.0) / norm_perp + kappa) * u_perp
        line = ClassDataset((holdout.samples @ v)[:, None], holdout.labels)
        fit = train_probe(line, steps=500, margin=margin)
        if fit.w[0] <= 0:
            continue
        cand = rescore(fit.w[0] * v, fit.b, holdout, margin, "adversarial")
        if cand.admissible:
            return cand
    return None


def random_unit_directions(n: int, d: int, rng: np.random.Generator) -> np.ndarray:
    u = rng.standard_normal((n, d))
    return u / np.linalg.norm(u, axis=1, keepdims=True)


@dataclass
class ProblemRecord:
    index: int
    sigma: float
    n_tried: int
    n_admissible: int
    n_aligned: int
    ensemble_size: int
    maximin_delta: float
    best_random_maximin: float
    random_win: bool
    adversarial_directions: int
    adversarial_wins: int
    min_alignment: float


@dataclass
class OptimalityReport:
    n_problems: int
    d: int
    sigmas: tuple[float, ...]
    seed: int
    problems: list[ProblemRecord] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    @property
    def alignment_pass_fraction(self) -> float:
        total = sum(p.n_admissible for p in self.problems)
        aligned = sum(p.n_aligned for p in self.problems)
        return aligned / total if total else float("nan")

    @property
    def maximin_win_fraction(self) -> float:
        return float(np.mean([p.random_win for p in self.problems]))

    @property
    def adversarial_win_fraction(self) -> float:
        total = sum(p.adversarial_directions for p in self.problems)
        wins = sum(p.adversarial_wins for p in self.problems)
        return wins / total if total else float("nan")

    @property
    def maximin_positive_fraction(self) -> float:
        return float(np.mean([p.maximin_delta > 0 for p in self.problems]))

    def to_dict(self) -> dict:
        return {
            "n_problems": self.n_problems,
            "d": self.d,
            "sigmas": list(self.sigmas),
            "seed": self.seed,
            "alignment_pass_fraction": self.alignment_pass_fraction,
            "maximin_win_fraction": self.maximin_win_fraction,
            "adversarial_win_fraction": self.adversarial_win_fraction,
            "maximin_positive_fraction": self.maximin_positive_fraction,
            "admissible_probes": sum(p.n_admissible for p in self.problems),
            "notes": list(self.notes),
            "problems": [asdict(p) for p in self.problems],
        }


def run_problem(
    index: int,
    d: int,
    sigma: float,
    seed: int,
    ensemble_size: int = 200,
    n_random_dirs: int = 50,
    n_per_class: int = 100,
    steps: int = 400,
) -> ProblemRecord:
    train, holdout = make_problem(d, sigma, n_per_class, seed)
    ensemble, tried = build_ensemble(train, holdout, ensemble_size, steps=steps, seed=seed)
    delta = holdout.delta
    admissible = [p for p in tried if p.admissible]
    inners = np.array([p.w @ delta for p in admissible]) if admissible else np.zeros(0)
    n_aligned = int(np.sum(inners > 0))
    rng = np.random.default_rng(seed + 1)
    dirs = random_unit_directions(n_random_dirs, d, rng)
    if not ensemble:
        return ProblemRecord(
            index, sigma, len(tried), 0, 0, 0, float("nan"), float("nan"), False, 0, 0, float("nan")
        )
    delta_hat = delta / np.linalg.norm(delta)
    m_delta = worst_case_directional_derivative(delta_hat, ensemble)
    w = _weight_matrix(ensemble)
    random_mins = (w @ dirs.T).min(axis=0)
    adv_total = adv_wins = 0
    for u in dirs:
        adv = adversarial_probe(u, ensemble, holdout)
        if adv is None:
            continue
        adv_total += 1
        augmented = ensemble + [adv]
        if worst_case_directional_derivative(u, augmented) < worst_case_directional_derivative(
            delta_hat, augmented
        ):
            adv_wins += 1
    # a direction for which no admissible adversary was found counts as a loss
    adv_total = max(adv_total, n_random_dirs)
    return ProblemRecord(
        index=index,
        sigma=sigma,
        n_tried=len(tried),
        n_admissible=len(admissible),
        n_aligned=n_aligned,
        ensemble_size=len(ensemble),
        maximin_delta=m_delta,
        best_random_maximin=float(random_mins.max()),
        random_win=bool(m_delta > random_mins.max()),
        adversarial_directions=adv_total,
        adversarial_wins=adv_wins,
        min_alignment=float(inners.min()) if inners.size else float("nan"),
    )


def run_optimality_suite(
    n_problems: int = 100,
    d: int = 16,
    sigmas: Sequence[float] = (0.1, 0.5, 1.0),
    seed: int = 0,
    ensemble_size: int = 200,
    n_random_dirs: int = 50,
    n_per_class: int = 100,
    steps: int = 400,
) -> OptimalityReport:
    """Problem ``i`` uses ``sigmas[i % len(sigmas)]`` and seed ``seed + 1000 * i``."""
    if n_problems < 1 or d < 2 or not sigmas:
        raise DataError("need n_problems >= 1, d >= 2 and at least one sigma")
    if any(s < 0 for s in sigmas):
        raise DataError("sigmas must be >= 0")
    report = OptimalityReport(n_problems, d, tuple(float(s) for s in sigmas), seed)
    for i in range(n_problems):
        sigma = float(sigmas[i % len(sigmas)])
        report.problems.append(
            run_problem(i, d, sigma, seed + 1000 * i, ensemble_size, n_random_dirs, n_per_class, steps)
        )
    if any(s == 0 for s in sigmas):
        report.notes.append(
            "sigma = 0 gives point classes: every class sample equals its mean, so admissibility "
            "and alignment are decided by two points"
        )
    return report
