"""Planted concepts, paired samples and visual substrates.

Concepts are unit directions in the residual space. A paired sample shares
a scene base between its positive and negative prefix; only the positive
carries ``norm * direction``. Noise is added at the summary level, i.e. the
same isotropic draw is added to every prefix row, so the mean over rows
(the prefix summary the model reads) carries exactly one noise vector of
scale ``sigma``.
"""

from __future__ import annotations

import dataclasses
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from steerlab.errors import DataError, FormatError

CATEGORIES = ("entity-like", "style-like", "emotion-like", "abstract-like")
SUBSTRATE_KINDS = ("scene", "blank", "noise")

# token ids below this are reserved (0 = BOS, 1 = EOS)
RESERVED_TOKENS = 2

_UNIT_TOL = 1e-6


@dataclass(frozen=True, eq=False)
class VisualPrefix:
    embeddings: np.ndarray
    substrate_kind: str = "scene"

    def __post_init__(self):
        emb = np.asarray(self.embeddings, dtype=np.float32)
        if emb.ndim != 2:
            raise DataError(f"prefix embeddings must be (P, d), got shape {emb.shape}")
        if not np.all(np.isfinite(emb)):
            raise DataError("prefix embeddings must be finite")
        if self.substrate_kind not in SUBSTRATE_KINDS:
            raise DataError(f"unknown substrate kind {self.substrate_kind!r}")
        object.__setattr__(self, "embeddings", emb)

    @property
    def summary(self) -> np.ndarray:
        return self.embeddings.mean(axis=0)


@dataclass(frozen=True, eq=False)
class ConceptSpec:
    """A planted concept.

    ``localization_profile`` is the per-layer presence of the concept in the
    residual stream (nonnegative, sums to 1). ``None`` means the concept rides
    the model's global visual channel instead. ``layer_directions`` lets the
    concept occupy a different direction at each depth; ``direction`` is
    always the one planted in prefixes and used as the unembedding row.
    """

    concept_id: str
    target_token: int
    direction: np.ndarray
    category: str = "entity-like"
    norm: float = 4.0
    localization_profile: np.ndarray | None = None
    layer_directions: np.ndarray | None = None

    def __post_init__(self):
        direction = np.asarray(self.direction, dtype=np.float64)
        if direction.ndim != 1:
            raise DataError("concept direction must be a vector")
        if abs(np.linalg.norm(direction) - 1.0) > _UNIT_TOL:
            raise DataError(f"concept {self.concept_id!r}: direction is not unit-norm")
        if self.category not in CATEGORIES:
            raise DataError(f"unknown category {self.category!r}")
        if self.norm < 0:
            raise DataError("concept norm must be nonnegative")
        object.__setattr__(self, "direction", direction)
        if self.localization_profile is not None:
            profile = np.asarray(self.localization_profile, dtype=np.float64)
            if profile.ndim != 1 or np.any(profile < 0) or abs(profile.sum() - 1.0) > 1e-6:
                raise DataError(
                    f"concept {self.concept_id!r}: profile must be nonnegative and sum to 1"
                )
            object.__setattr__(self, "localization_profile", profile)
        if self.layer_directions is not None:
            rows = np.asarray(self.layer_directions, dtype=np.float64)
            if rows.ndim != 2 or rows.shape[1] != direction.shape[0]:
                raise DataError("layer_directions must be (L, d)")
            if np.any(np.abs(np.linalg.norm(rows, axis=1) - 1.0) > _UNIT_TOL):
                raise DataError("layer_directions rows must be unit-norm")
            object.__setattr__(self, "layer_directions", rows)

    @property
    def d(self) -> int:
        return self.direction.shape[0]

    @property
    def localized(self) -> bool:
        return self.localization_profile is not None

    def direction_at(self, layer: int) -> np.ndarray:
        """Residual direction at a 1-based layer."""
        if self.layer_directions is None:
            return self.direction
        return self.layer_directions[layer - 1]


@dataclass(frozen=True, eq=False)
class ConceptBank:
    concepts: tuple[ConceptSpec, ...]
    orthogonal: bool = False

    def __post_init__(self):
        concepts = tuple(self.concepts)
        object.__setattr__(self, "concepts", concepts)
        ids = [c.concept_id for c in concepts]
        if len(set(ids)) != len(ids):
            raise DataError("duplicate concept ids in bank")
        tokens = [c.target_token for c in concepts]
        if len(set(tokens)) != len(tokens):
            raise DataError("concepts must have distinct target tokens")
        if concepts and len({c.d for c in concepts}) != 1:
            raise DataError("all concept directions must share one dimension")
        if self.orthogonal and len(concepts) > 1:
            gram = self.directions() @ self.directions().T
            off = gram - np.diag(np.diag(gram))
            if np.max(np.abs(off)) > 1e-6:
                raise DataError("bank flagged orthogonal but directions overlap")

    def __len__(self) -> int:
        return len(self.concepts)

    def __iter__(self) -> Iterator[ConceptSpec]:
        return iter(self.concepts)

    def __getitem__(self, concept_id: str) -> ConceptSpec:
        for c in self.concepts:
            if c.concept_id == concept_id:
                return c
        raise KeyError(concept_id)

    def __contains__(self, concept_id: str) -> bool:
        return any(c.concept_id == concept_id for c in self.concepts)

    @property
    def d(self) -> int | None:
        return self.concepts[0].d if self.concepts else None

    def directions(self) -> np.ndarray:
        return np.stack([c.direction for c in self.concepts])

    def span_basis(self) -> np.ndarray:
        """Orthonormal basis (k, d) of every direction any concept uses."""
        if not self.concepts:
            return np.zeros((0, 0))
        rows = [c.direction for c in self.concepts]
        for c in self.concepts:
            if c.layer_directions is not None:
                rows.extend(c.layer_directions)
        return _orthonormal_rows(np.stack(rows))

    def complement_projector(self) -> np.ndarray:
        """Projector onto the orthogonal complement of ``span_basis``."""
        basis = self.span_basis()
        return np.eye(self.d) - basis.T @ basis

    def replace(self, concept: ConceptSpec) -> "ConceptBank":
        concepts = [concept if c.concept_id == concept.concept_id else c for c in self.concepts]
        return ConceptBank(tuple(concepts), orthogonal=self.orthogonal)


def _orthonormal_rows(rows: np.ndarray, tol: float = 1e-8) -> np.ndarray:
    u, s, vt = np.linalg.svd(rows, full_matrices=False)
    rank = int(np.sum(s > tol * max(1.0, s.max(initial=0.0))))
    return vt[:rank]


def make_concept_bank(
    n_concepts: int,
    d: int,
    orthogonal: bool = True,
    seed: int = 0,
    norm: float = 4.0,
    categories: Sequence[str] | None = None,
    first_token: int = RESERVED_TOKENS,
) -> ConceptBank:
    if n_concepts < 1:
        raise DataError("need at least one concept")
    if orthogonal and n_concepts > d:
        raise DataError(f"cannot fit {n_concepts} orthogonal concepts in d={d}")
    rng = np.random.default_rng(seed)
    raw = rng.standard_normal((d, n_concepts))
    if orthogonal:
        q, r = np.linalg.qr(raw)
        # fix QR's sign ambiguity so the bank depends only on the seed
        dirs = (q * np.sign(np.diag(r))).T
    else:
        dirs = (raw / np.linalg.norm(raw, axis=0)).T
    if categories is None:
        categories = [CATEGORIES[i % len(CATEGORIES)] for i in range(n_concepts)]
    if len(categories) != n_concepts:
        raise DataError("categories must have one entry per concept")
    concepts = tuple(
        ConceptSpec(
            concept_id=f"c{i}",
            target_token=first_token + i,
            direction=dirs[i] / np.linalg.norm(dirs[i]),
            category=categories[i],
            norm=norm,
        )
        for i in range(n_concepts)
    )
    return ConceptBank(concepts, orthogonal=orthogonal)


def category_profile(category: str, n_layers: int, peak: int | None = None) -> np.ndarray:
    """Preset presence profile for a category; ``peak`` is a 1-based layer.

    entity-like is one-hot, abstract-like uniform, the other two are
    triangular bumps of half-width 1 and 2.
    """
    if category not in CATEGORIES:
        raise DataError(f"unknown category {category!r}")
    if peak is None:
        peak = (n_layers + 1) // 2
    if not 1 <= peak <= n_layers:
        raise DataError(f"peak layer {peak} outside 1..{n_layers}")
    if category == "abstract-like":
        return np.full(n_layers, 1.0 / n_layers)
    width = {"entity-like": 0, "style-like": 1, "emotion-like": 2}[category]
    layers = np.arange(1, n_layers + 1)
    weights = np.maximum(0.0, width + 1 - np.abs(layers - peak)).astype(np.float64)
    return weights / weights.sum()


def multi_peak_profile(n_layers: int, peaks: Sequence[int]) -> np.ndarray:
    profile = np.zeros(n_layers)
    for k in peaks:
        if not 1 <= k <= n_layers:
            raise DataError(f"peak layer {k} outside 1..{n_layers}")
        profile[k - 1] = 1.0
    return profile / profile.sum()


def with_profile(spec: ConceptSpec, profile: np.ndarray | None) -> ConceptSpec:
    return dataclasses.replace(spec, localization_profile=profile)


def make_layered_concept(
    bank: ConceptBank,
    peaks: Sequence[int],
    n_layers: int,
    concept_id: str,
    target_token: int,
    seed: int = 0,
    norm: float = 4.0,
    category: str = "entity-like",
) -> ConceptSpec:
    """A concept held in a fresh orthogonal direction at each of ``peaks``.

    The planted (prefix and readout) direction is the normalized sum of the
    per-peak directions, so every peak reads an independent noise component.
    """
    d = bank.d
    taken = bank.span_basis() if len(bank) else np.zeros((0, d))
    if taken.shape[0] + len(peaks) > d:
        raise DataError("not enough free dimensions for a layered concept")
    rng = np.random.default_rng(seed)
    raw = rng.standard_normal((len(peaks), d))
    raw -= raw @ taken.T @ taken
    q, r = np.linalg.qr(raw.T)
    fresh = (q * np.sign(np.diag(r))).T
    direction = fresh.sum(axis=0)
    direction /= np.linalg.norm(direction)
    layer_dirs = np.tile(direction, (n_layers, 1))
    for k, row in zip(peaks, fresh):
        layer_dirs[k - 1] = row
    return ConceptSpec(
        concept_id=concept_id,
        target_token=target_token,
        direction=direction,
        category=category,
        norm=norm,
        localization_profile=multi_peak_profile(n_layers, peaks),
        layer_directions=layer_dirs,
    )


def apply_localization(spec: ConceptSpec, model_config) -> np.ndarray:
    """Per-layer gains whose running sum is the concept's presence profile.

    A concept without a profile follows the model's global re-injection gains.
    """
    n_layers = model_config.n_layers
    if spec.localization_profile is None:
        return np.asarray(model_config.reinjection_gains, dtype=np.float64)
    profile = spec.localization_profile
    if profile.shape[0] != n_layers:
        raise DataError(
            f"concept {spec.concept_id!r}: profile has {profile.shape[0]} layers, model has {n_layers}"
        )
    return np.diff(profile, prepend=0.0)


def make_substrate(
    kind: str, d: int, P: int, sigma: float = 1.0, seed: int = 0, rank: int = 3
) -> VisualPrefix:
    """scene: seeded low-rank mixture with rows of typical norm ``sigma``;
    blank: zeros; noise: iid N(0, sigma^2) entries."""
    rng = np.random.default_rng(seed)
    if kind == "blank":
        emb = np.zeros((P, d))
    elif kind == "noise":
        emb = sigma * rng.standard_normal((P, d))
    elif kind == "scene":
        basis = rng.standard_normal((rank, d))
        basis /= np.linalg.norm(basis, axis=1, keepdims=True)
        coeffs = rng.standard_normal((P, rank)) / np.sqrt(rank)
        emb = sigma * coeffs @ basis
    else:
        raise DataError(f"unknown substrate kind {kind!r}")
    return VisualPrefix(emb.astype(np.float32), substrate_kind=kind)


BaseSampler = Callable[[np.random.Generator], np.ndarray]


def scene_sampler(
    d: int, P: int, sigma: float = 1.0, rank: int = 3, projector: np.ndarray | None = None
) -> BaseSampler:
    """Sampler of scene bases; ``projector`` (d, d) removes unwanted content,
    typically ``bank.complement_projector()`` so negatives hold no concept."""

    def sample(rng: np.random.Generator) -> np.ndarray:
        basis = rng.standard_normal((rank, d))
        basis /= np.linalg.norm(basis, axis=1, keepdims=True)
        emb = sigma * (rng.standard_normal((P, rank)) / np.sqrt(rank)) @ basis
        if projector is not None:
            emb = emb @ projector
        return emb

    return sample


def blank_sampler(d: int, P: int) -> BaseSampler:
    return lambda rng: np.zeros((P, d))


@dataclass(frozen=True, eq=False)
class PairedSample:
    positive: VisualPrefix
    negative: VisualPrefix
    concept_id: str
    sigma: float = 0.0

    def swapped(self) -> "PairedSample":
        return PairedSample(self.negative, self.positive, self.concept_id, self.sigma)


def generate_pairs(
    spec: ConceptSpec,
    n: int,
    base: BaseSampler,
    sigma: float = 0.0,
    seed: int = 0,
    negative: str = "absence",
) -> list[PairedSample]:
    """``n`` pairs; pair ``i`` draws from ``default_rng(seed + i)``.

    ``negative="opposite"`` plants ``-norm * direction`` in the negative
    instead of leaving the concept out.
    """
    if n < 1:
        raise DataError("n must be >= 1")
    if sigma < 0:
        raise DataError("sigma must be >= 0")
    if negative not in ("absence", "opposite"):
        raise DataError(f"unknown negative mode {negative!r}")
    signal = spec.norm * spec.direction
    pairs = []
    for i in range(n):
        rng = np.random.default_rng(seed + i)
        base_i = np.asarray(base(rng), dtype=np.float64)
        if base_i.ndim != 2 or base_i.shape[1] != spec.d:
            raise DataError(f"base sampler returned shape {base_i.shape}, need (P, {spec.d})")
        eta_pos = sigma * rng.standard_normal(spec.d)
        eta_neg = sigma * rng.standard_normal(spec.d)
        pos = base_i + signal + eta_pos
        neg = base_i + eta_neg
        if negative == "opposite":
            neg = neg - signal
        pairs.append(
            PairedSample(
                VisualPrefix(pos.astype(np.float32)),
                VisualPrefix(neg.astype(np.float32)),
                spec.concept_id,
                float(sigma),
            )
        )
    return pairs


def stack_prefixes(prefixes: Sequence[VisualPrefix]) -> np.ndarray:
    return np.stack([p.embeddings for p in prefixes])


# --- dataset files ---------------------------------------------------------
#
# little-endian; header: b"PAIR", version u16, P u16, d u32, count u32
# record:  id length u16, id UTF-8, sigma f32, positive P*d f32, negative P*d f32
# arrays are row-major (P rows of d floats)

_PAIR_MAGIC = b"PAIR"
_PAIR_VERSION = 1
_PAIR_HEADER = struct.Struct("<4sHHII")


def save_pairs(pairs: Sequence[PairedSample], path: str | Path) -> None:
    if not pairs:
        raise DataError("refusing to write an empty pair set")
    P, d = pairs[0].positive.embeddings.shape
    chunks = [_PAIR_HEADER.pack(_PAIR_MAGIC, _PAIR_VERSION, P, d, len(pairs))]
    for pair in pairs:
        for prefix in (pair.positive, pair.negative):
            if prefix.embeddings.shape != (P, d):
                raise DataError("all prefixes in a dataset file must share (P, d)")
        cid = pair.concept_id.encode("utf-8")
        chunks.append(struct.pack("<H", len(cid)) + cid + struct.pack("<f", pair.sigma))
        chunks.append(pair.positive.embeddings.astype("<f4").tobytes())
        chunks.append(pair.negative.embeddings.astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_pairs(path: str | Path) -> list[PairedSample]:
    data = Path(path).read_bytes()
    if len(data) < _PAIR_HEADER.size:
        raise FormatError(f"{path}: too short for a dataset header")
    magic, version, P, d, count = _PAIR_HEADER.unpack_from(data, 0)
    if magic != _PAIR_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != _PAIR_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    offset = _PAIR_HEADER.size
    block = P * d * 4
    pairs = []
    for _ in range(count):
        if offset + 2 > len(data):
            raise DataError(f"{path}: truncated record")
        (n_id,) = struct.unpack_from("<H", data, offset)
        offset += 2
        end = offset + n_id + 4 + 2 * block
        if end > len(data):
            raise DataError(f"{path}: truncated record")
        cid = data[offset : offset + n_id].decode("utf-8")
        offset += n_id
        (sigma,) = struct.unpack_from("<f", data, offset)
        offset += 4
        pos = np.frombuffer(data, "<f4", P * d, offset).reshape(P, d)
        neg = np.frombuffer(data, "<f4", P * d, offset + block).reshape(P, d)
        offset = end
        pairs.append(PairedSample(VisualPrefix(pos.copy()), VisualPrefix(neg.copy()), cid, float(sigma)))
    if offset != len(data):
        raise DataError(f"{path}: {len(data) - offset} trailing bytes")
    return pairs
