"""A small, analytically wired decoder with a visual-prefix channel.

Sequence layout is ``[prefix rows (P), text tokens (T)]``. At layer ``l``
every text position receives the visual channel ``M_l @ s`` where ``s`` is
the mean of the prefix rows, then (when ``layer_gain > 0``) a causal
attention block and an MLP block, then any steering hooks for that layer.
The state after hooks is ``h^l``. Logits read the final position through the
unembedding matrix, whose row for each concept's target token is the
concept direction.

For concepts riding the global channel ``M_l = g_l * I``. A localized
concept gets its own channel so that its residual presence at layer ``l``
is exactly its profile value ``p_l`` along ``direction_at(l)``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from steerlab.errors import DataError
from steerlab.synthetic import RESERVED_TOKENS, ConceptBank, VisualPrefix, apply_localization

BOS, EOS = 0, 1
POSITION_POLICIES = ("final", "all")


def single_injection_gains(n_layers: int, layer: int = 1) -> tuple[float, ...]:
    gains = [0.0] * n_layers
    gains[layer - 1] = 1.0
    return tuple(gains)


def persistent_gains(n_layers: int) -> tuple[float, ...]:
    return tuple([1.0 / n_layers] * n_layers)


def default_prompt(config: "ModelConfig") -> tuple[int, ...]:
    """BOS followed by the three highest token ids (never concept targets
    unless the bank fills the vocabulary)."""
    V = config.vocab_size
    return (BOS, V - 3, V - 2, V - 1)


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 8
    d_model: int = 64
    n_heads: int = 4
    vocab_size: int = 256
    prefix_len: int = 4
    layer_gain: float = 0.0
    reinjection_gains: tuple[float, ...] | None = None
    nonlinearity_strength: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.n_layers < 1:
            raise DataError("n_layers must be >= 1")
        if self.d_model < 2:
            raise DataError("d_model must be >= 2")
        if self.vocab_size < 4:
            raise DataError("vocab_size must be >= 4")
        if self.prefix_len < 1:
            raise DataError("prefix_len must be >= 1")
        if self.n_heads < 1 or self.d_model % self.n_heads:
            raise DataError(f"n_heads={self.n_heads} must divide d_model={self.d_model}")
        if self.layer_gain < 0 or self.nonlinearity_strength < 0:
            raise DataError("layer_gain and nonlinearity_strength must be >= 0")
        gains = self.reinjection_gains
        if gains is None:
            gains = single_injection_gains(self.n_layers)
        gains = tuple(float(g) for g in gains)
        if len(gains) != self.n_layers:
            raise DataError(f"need {self.n_layers} reinjection gains, got {len(gains)}")
        if not all(np.isfinite(gains)):
            raise DataError("reinjection gains must be finite")
        object.__setattr__(self, "reinjection_gains", gains)

    @property
    def is_linear(self) -> bool:
        return self.layer_gain == 0 and self.nonlinearity_strength == 0

    def to_dict(self) -> dict:
        out = asdict(self)
        out["reinjection_gains"] = list(self.reinjection_gains)
        return out


@dataclass(frozen=True, eq=False)
class SteeringHook:
    """Adds ``sign * alpha * vector`` to the residual stream after ``layer``.

    ``vector`` may be (d,) or (B, d) for per-sample vectors in batched runs.
    """

    layer: int
    vector: np.ndarray
    alpha: float = 1.0
    sign: int = 1
    position: str = "final"

    def __post_init__(self):
        vec = np.asarray(self.vector, dtype=np.float32)
        if vec.ndim not in (1, 2):
            raise DataError("hook vector must be (d,) or (B, d)")
        if not np.all(np.isfinite(vec)):
            raise DataError("hook vector must be finite")
        if self.alpha < 0:
            raise DataError("alpha must be >= 0; use sign=-1 to subtract")
        if self.sign not in (1, -1):
            raise DataError("sign must be +1 or -1")
        if self.position not in POSITION_POLICIES:
            raise DataError(f"unknown position policy {self.position!r}")
        object.__setattr__(self, "vector", vec)

    @property
    def delta(self) -> np.ndarray:
        return np.float32(self.sign * self.alpha) * self.vector


@dataclass(frozen=True, eq=False)
class ActivationTrace:
    hidden: np.ndarray  # (L, d) final-position states after each layer
    final_logits: np.ndarray  # (V,)

    @property
    def n_layers(self) -> int:
        return self.hidden.shape[0]


@dataclass(frozen=True, eq=False)
class GenerationResult:
    token_ids: tuple[int, ...]
    per_step_logits: np.ndarray | None = None
    trace: ActivationTrace | None = None


@dataclass(frozen=True, eq=False)
class _Block:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w_in: np.ndarray
    w_out: np.ndarray


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float32)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Model:
    config: ModelConfig
    bank: ConceptBank
    embed: np.ndarray
    unembed: np.ndarray
    channel: np.ndarray | None  # (L, d, d) or None for the scalar global channel
    blocks: tuple[_Block, ...] = field(repr=False)
    fingerprint: bytes = b""

    @property
    def n_layers(self) -> int:
        return self.config.n_layers

    @property
    def d(self) -> int:
        return self.config.d_model

    def unembed_row(self, token: int) -> np.ndarray:
        return self.unembed[token]

    # -- core batched pass -------------------------------------------------

    def run(
        self,
        prefixes: np.ndarray,
        tokens: np.ndarray,
        hooks: Sequence[SteeringHook] = (),
        final_from: int | None = None,
        final_to: int | None = None,
    ) -> tuple[np.ndarray, np.ndarray]:
        """Batched forward pass.

        prefixes: (B, P, d); tokens: (B, T). Returns final-position hidden
        states (B, L, d) and logits (B, V). Hooks with the ``final`` policy
        touch text positions ``final_from:final_to`` (default: the last one).
        """
        cfg = self.config
        prefixes = np.asarray(prefixes, dtype=np.float32)
        tokens = np.asarray(tokens)
        if prefixes.ndim != 3 or prefixes.shape[2] != cfg.d_model:
            raise DataError(f"prefixes must be (B, P, {cfg.d_model}), got {prefixes.shape}")
        if tokens.ndim != 2 or tokens.shape[0] != prefixes.shape[0]:
            raise DataError("tokens must be (B, T) matching the prefix batch")
        if tokens.shape[1] == 0:
            raise DataError("prompt must be non-empty")
        if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
            raise DataError(f"token ids must lie in [0, {cfg.vocab_size})")
        self._check_hooks(hooks, prefixes.shape[0])

        B, P, _ = prefixes.shape
        T = tokens.shape[1]
        x = np.concatenate([prefixes, self.embed[tokens]], axis=1)
        summary = prefixes.mean(axis=1)
        if final_from is None:
            final_from = T - 1
        final_slice = slice(P + final_from, None if final_to is None else P + final_to)
        by_layer: dict[int, list[SteeringHook]] = {}
        for hook in hooks:
            by_layer.setdefault(hook.layer, []).append(hook)

        hidden = np.empty((B, cfg.n_layers, cfg.d_model), dtype=np.float32)
        for li in range(cfg.n_layers):
            if self.channel is None:
                inject = np.float32(cfg.reinjection_gains[li]) * summary
            else:
                inject = summary @ self.channel[li].T
            x[:, P:, :] += inject[:, None, :]
            if cfg.layer_gain > 0:
                x = x + self._attention(self.blocks[li], x)
                x = x + self._mlp(self.blocks[li], x)
            for hook in by_layer.get(li + 1, ()):
                delta = hook.delta
                if delta.ndim == 2:
                    delta = delta[:, None, :]
                if hook.position == "all":
                    x[:, P:, :] += delta
                else:
                    x[:, final_slice, :] += delta
            hidden[:, li] = x[:, -1]
        logits = (x[:, -1].astype(np.float64) @ self.unembed.T.astype(np.float64)).astype(np.float32)
        return hidden, logits

    def _check_hooks(self, hooks: Sequence[SteeringHook], batch: int) -> None:
        for hook in hooks:
            if not 1 <= hook.layer <= self.config.n_layers:
                raise DataError(f"hook layer {hook.layer} outside 1..{self.config.n_layers}")
            if hook.vector.shape[-1] != self.config.d_model:
                raise DataError(
                    f"hook vector has dimension {hook.vector.shape[-1]}, model has {self.config.d_model}"
                )
            if hook.vector.ndim == 2 and hook.vector.shape[0] != batch:
                raise DataError("per-sample hook vectors must match the batch size")

    def _attention(self, blk: _Block, x: np.ndarray) -> np.ndarray:
        B, S, d = x.shape
        h = self.config.n_heads
        dh = d // h

        def split(a):
            return a.reshape(B, S, h, dh).transpose(0, 2, 1, 3)

        q, k, v = split(x @ blk.wq), split(x @ blk.wk), split(x @ blk.wv)
        scores = q @ k.transpose(0, 1, 3, 2) / np.float32(np.sqrt(dh))
        mask = np.triu(np.ones((S, S), dtype=bool), k=1)
        scores = np.where(mask, np.float32(-1e30), scores)
        scores -= scores.max(axis=-1, keepdims=True)
        weights = np.exp(scores)
        weights /= weights.sum(axis=-1, keepdims=True)
        out = (weights @ v).transpose(0, 2, 1, 3).reshape(B, S, d)
        return out @ blk.wo

    def _mlp(self, blk: _Block, x: np.ndarray) -> np.ndarray:
        lam = np.float32(self.config.nonlinearity_strength)
        pre = x @ blk.w_in
        return ((1 - lam) * pre + lam * np.tanh(pre)) @ blk.w_out


def _fingerprint(config: ModelConfig, bank: ConceptBank) -> bytes:
    h = hashlib.blake2b(digest_size=8)
    h.update(json.dumps(config.to_dict(), sort_keys=True).encode())
    for c in bank:
        h.update(c.concept_id.encode() + c.target_token.to_bytes(4, "little"))
        h.update(c.direction.astype("<f8").tobytes())
        if c.localization_profile is not None:
            h.update(c.localization_profile.astype("<f8").tobytes())
        if c.layer_directions is not None:
            h.update(c.layer_directions.astype("<f8").tobytes())
    return h.digest()


def _channel_maps(config: ModelConfig, bank: ConceptBank) -> np.ndarray | None:
    localized = [c for c in bank if c.localized]
    if not localized:
        return None
    L, d = config.n_layers, config.d_model
    rows = []
    for c in localized:
        rows.append(c.direction)
        if c.layer_directions is not None:
            rows.extend(c.layer_directions)
    u, s, vt = np.linalg.svd(np.stack(rows), full_matrices=False)
    basis = vt[s > 1e-8 * s.max()]
    outside = np.eye(d) - basis.T @ basis
    cumulative_global = np.cumsum(config.reinjection_gains)
    presence = {c.concept_id: np.cumsum(apply_localization(c, config)) for c in localized}
    cumulative = np.empty((L, d, d))
    for li in range(L):
        m = cumulative_global[li] * outside
        for c in localized:
            direction = c.direction_at(li + 1)
            m = m + presence[c.concept_id][li] * np.outer(direction, direction)
        cumulative[li] = m
    return np.diff(cumulative, axis=0, prepend=np.zeros((1, d, d)))


def build_model(config: ModelConfig, concept_bank: ConceptBank) -> Model:
    """Embedding rows and non-concept unembedding rows are drawn N(0, 1/d)
    and projected off the concept subspace, so concept logits only respond
    to concept content in the residual stream. Block weights are N(0, (eps/sqrt(d))^2).
    """
    L, d, V = config.n_layers, config.d_model, config.vocab_size
    if len(concept_bank) and concept_bank.d != d:
        raise DataError(f"bank dimension {concept_bank.d} != d_model {d}")
    if len(concept_bank) > V - RESERVED_TOKENS:
        raise DataError(f"{len(concept_bank)} concepts do not fit a vocabulary of {V}")
    for c in concept_bank:
        if not RESERVED_TOKENS <= c.target_token < V:
            raise DataError(f"concept {c.concept_id!r}: target token {c.target_token} not usable")
        if c.localization_profile is not None and c.localization_profile.shape[0] != L:
            raise DataError(f"concept {c.concept_id!r}: profile length != n_layers")
        if c.layer_directions is not None and c.layer_directions.shape[0] != L:
            raise DataError(f"concept {c.concept_id!r}: layer_directions length != n_layers")

    rng = np.random.default_rng(config.seed)
    embed = rng.standard_normal((V, d)) / np.sqrt(d)
    unembed = rng.standard_normal((V, d)) / np.sqrt(d)
    if len(concept_bank):
        keep = concept_bank.complement_projector()
        embed = embed @ keep
        unembed = unembed @ keep
        for c in concept_bank:
            unembed[c.target_token] = c.direction

    std = config.layer_gain / np.sqrt(d)
    blocks = []
    for _ in range(L):
        mats = [std * rng.standard_normal((d, d)) for _ in range(4)]
        w_in = std * rng.standard_normal((d, 4 * d))
        w_out = std * rng.standard_normal((4 * d, d))
        blocks.append(_Block(*(_frozen(m) for m in (*mats, w_in, w_out))))

    channel = _channel_maps(config, concept_bank)
    return Model(
        config=config,
        bank=concept_bank,
        embed=_frozen(embed),
        unembed=_frozen(unembed),
        channel=None if channel is None else _frozen(channel),
        blocks=tuple(blocks),
        fingerprint=_fingerprint(config, concept_bank),
    )


# -- single-sample convenience wrappers ---------------------------------------


def _prefix_array(prefix) -> np.ndarray:
    if isinstance(prefix, VisualPrefix):
        return prefix.embeddings
    return np.asarray(prefix, dtype=np.float32)


def _prompt_array(prompt_tokens) -> np.ndarray:
    tokens = np.asarray(prompt_tokens, dtype=np.int64).reshape(-1)
    if tokens.size == 0:
        raise DataError("prompt must be non-empty")
    return tokens


def forward_trace(model: Model, prefix, prompt_tokens) -> ActivationTrace:
    return forward_hooked(model, prefix, prompt_tokens, ())


def forward_hooked(model: Model, prefix, prompt_tokens, hooks: Sequence[SteeringHook]) -> ActivationTrace:
    emb = _prefix_array(prefix)[None]
    tokens = _prompt_array(prompt_tokens)[None]
    hidden, logits = model.run(emb, tokens, hooks)
    return ActivationTrace(hidden[0], logits[0])


def trace_batch(model: Model, prefixes: np.ndarray, prompt_tokens, hooks: Sequence[SteeringHook] = ()):
    """Forward a batch of prefixes sharing one prompt; returns (hidden, logits)."""
    prefixes = np.asarray(prefixes, dtype=np.float32)
    tokens = np.tile(_prompt_array(prompt_tokens), (prefixes.shape[0], 1))
    return model.run(prefixes, tokens, hooks)


def generate_batch(
    model: Model,
    prefixes: np.ndarray,
    prompt_tokens,
    max_len: int,
    hooks: Sequence[SteeringHook] = (),
    steer_every_step: bool = True,
    keep_logits: bool = False,
) -> list[GenerationResult]:
    """Greedy decoding for a batch sharing one prompt.

    The full sequence is recomputed each step. To match cached decoding the
    ``final`` hook policy covers the last prompt position and every generated
    position (or only the last prompt position when ``steer_every_step`` is
    off). EOS ends a sequence and is not included in ``token_ids``.
    """
    if max_len < 1:
        raise DataError("max_len must be >= 1")
    prefixes = np.asarray(prefixes, dtype=np.float32)
    prompt = _prompt_array(prompt_tokens)
    B, T = prefixes.shape[0], prompt.size
    tokens = np.tile(prompt, (B, 1))
    done = np.zeros(B, dtype=bool)
    outputs: list[list[int]] = [[] for _ in range(B)]
    step_logits = []
    first_hidden = first_logits = None
    for step in range(max_len):
        final_to = None if steer_every_step else T
        hidden, logits = model.run(prefixes, tokens, hooks, final_from=T - 1, final_to=final_to)
        if step == 0:
            first_hidden, first_logits = hidden, logits
        if keep_logits:
            step_logits.append(logits)
        nxt = logits.argmax(axis=1)
        for b in range(B):
            if done[b]:
                continue
            if nxt[b] == EOS:
                done[b] = True
            else:
                outputs[b].append(int(nxt[b]))
        if done.all():
            break
        tokens = np.concatenate([tokens, nxt[:, None]], axis=1)
    per_step = np.stack(step_logits, axis=1) if keep_logits else None
    return [
        GenerationResult(
            token_ids=tuple(outputs[b]),
            per_step_logits=None if per_step is None else per_step[b],
            trace=ActivationTrace(first_hidden[b], first_logits[b]),
        )
        for b in range(B)
    ]


def generate(
    model: Model,
    prefix,
    prompt_tokens,
    max_len: int,
    hooks: Sequence[SteeringHook] = (),
    steer_every_step: bool = True,
    keep_logits: bool = False,
) -> GenerationResult:
    return generate_batch(
        model, _prefix_array(prefix)[None], prompt_tokens, max_len, hooks, steer_every_step, keep_logits
    )[0]
