"""Difference-in-means concept vectors and their binary file format."""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from steerlab.errors import DataError, FormatError
from steerlab.model import Model, trace_batch
from steerlab.synthetic import ConceptBank, PairedSample, stack_prefixes

_MAGIC = b"CVEC"
_VERSION = 1


class FingerprintWarning(UserWarning):
    pass


@dataclass(frozen=True, eq=False)
class ConceptVectorSet:
    concept_id: str
    n_pairs: int
    vectors: np.ndarray  # (L, d), unnormalized
    fingerprint: bytes = bytes(8)

    def __post_init__(self):
        vectors = np.asarray(self.vectors, dtype=np.float32)
        if vectors.ndim != 2:
            raise DataError(f"vectors must be (L, d), got {vectors.shape}")
        if self.n_pairs < 1:
            raise DataError("n_pairs must be >= 1")
        if len(self.fingerprint) != 8:
            raise DataError("fingerprint must be 8 bytes")
        object.__setattr__(self, "vectors", vectors)

    @property
    def n_layers(self) -> int:
        return self.vectors.shape[0]

    @property
    def d(self) -> int:
        return self.vectors.shape[1]

    @property
    def norms(self) -> np.ndarray:
        return np.linalg.norm(self.vectors.astype(np.float64), axis=1)

    def at(self, layer: int) -> np.ndarray:
        """Vector for a 1-based layer."""
        if not 1 <= layer <= self.n_layers:
            raise DataError(f"layer {layer} outside 1..{self.n_layers}")
        return self.vectors[layer - 1]

    def negated(self) -> "ConceptVectorSet":
        return ConceptVectorSet(self.concept_id, self.n_pairs, -self.vectors, self.fingerprint)


def pairwise_sum(a: np.ndarray) -> np.ndarray:
    """Sum along axis 0 by fixed recursive halving (order independent of hardware)."""
    n = a.shape[0]
    if n <= 8:
        total = a[0].copy()
        for i in range(1, n):
            total += a[i]
        return total
    mid = n // 2
    return pairwise_sum(a[:mid]) + pairwise_sum(a[mid:])


def pair_differences(model: Model, pairs: Sequence[PairedSample], prompt_tokens) -> np.ndarray:
    """Per-pair final-token differences h^l(x+) - h^l(x-), shape (N, L, d)."""
    if not pairs:
        raise DataError("no pairs given")
    ids = {p.concept_id for p in pairs}
    if len(ids) != 1:
        raise DataError(f"pairs mix concepts: {sorted(ids)}")
    pos = stack_prefixes([p.positive for p in pairs])
    neg = stack_prefixes([p.negative for p in pairs])
    if pos.shape[1:] != (model.config.prefix_len, model.d):
        raise DataError(
            f"prefix shape {pos.shape[1:]} does not match model ({model.config.prefix_len}, {model.d})"
        )
    h_pos, _ = trace_batch(model, pos, prompt_tokens)
    h_neg, _ = trace_batch(model, neg, prompt_tokens)
    return h_pos - h_neg


def extract(model: Model, pairs: Sequence[PairedSample], prompt_tokens) -> ConceptVectorSet:
    diffs = pair_differences(model, pairs, prompt_tokens)
    n = diffs.shape[0]
    mean = pairwise_sum(diffs) / np.float32(n)
    return ConceptVectorSet(pairs[0].concept_id, n, mean, model.fingerprint)


def save_vectors(vset: ConceptVectorSet, path: str | Path) -> None:
    """Little-endian: b"CVEC", u16 version, u16 L, u32 d, u32 N,
    u16-length-prefixed UTF-8 concept id, 8-byte fingerprint, then L*d f32
    in layer-major order."""
    cid = vset.concept_id.encode("utf-8")
    header = struct.pack("<4sHHII", _MAGIC, _VERSION, vset.n_layers, vset.d, vset.n_pairs)
    body = vset.vectors.astype("<f4").tobytes()
    Path(path).write_bytes(header + struct.pack("<H", len(cid)) + cid + vset.fingerprint + body)


def load_vectors(path: str | Path, model: Model | None = None) -> ConceptVectorSet:
    data = Path(path).read_bytes()
    fixed = struct.calcsize("<4sHHII")
    if len(data) < 4 or data[:4] != _MAGIC:
        raise FormatError(f"{path}: not a concept-vector file")
    if len(data) < fixed + 2:
        raise DataError(f"{path}: truncated header")
    _, version, L, d, n = struct.unpack_from("<4sHHII", data, 0)
    if version != _VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    (n_id,) = struct.unpack_from("<H", data, fixed)
    offset = fixed + 2
    if len(data) < offset + n_id + 8:
        raise DataError(f"{path}: truncated header")
    cid = data[offset : offset + n_id].decode("utf-8")
    offset += n_id
    fingerprint = data[offset : offset + 8]
    offset += 8
    expected = L * d * 4
    if len(data) - offset != expected:
        raise DataError(
            f"{path}: shape mismatch, header says {L}x{d} ({expected} bytes), body has {len(data) - offset}"
        )
    vectors = np.frombuffer(data, "<f4", L * d, offset).reshape(L, d).astype(np.float32)
    vset = ConceptVectorSet(cid, n, vectors, fingerprint)
    if model is not None:
        if (L, d) != (model.n_layers, model.d):
            raise DataError(f"{path}: vectors are {L}x{d}, model is {model.n_layers}x{model.d}")
        if fingerprint != model.fingerprint:
            warnings.warn(
                f"{path}: extracted from a different model ({fingerprint.hex()} != {model.fingerprint.hex()})",
                FingerprintWarning,
                stacklevel=2,
            )
    return vset


def faithfulness_direction_check(
    vset: ConceptVectorSet, bank: ConceptBank, zero_tol: float = 1e-6
) -> list[float | None]:
    """Cosine of each layer's vector with the planted direction; ``None``
    where the vector norm is at most ``zero_tol``."""
    if vset.concept_id not in bank:
        raise DataError(f"concept {vset.concept_id!r} not in bank")
    spec = bank[vset.concept_id]
    out: list[float | None] = []
    for li in range(vset.n_layers):
        v = vset.vectors[li].astype(np.float64)
        n = np.linalg.norm(v)
        if n <= zero_tol:
            out.append(None)
            continue
        out.append(float(v @ spec.direction_at(li + 1) / n))
    return out
