"""Iterative inference-time refinement and the inference modes built on it.

Starting from a state where only user-side fields are observed, each step
encodes the current state, scores every masked position by the cosine
between its generated vector and the embedding of the sample's own token,
keeps the least confident positions masked and retains the rest with their
confidence as an input weight. After ``T`` steps nothing is masked but the
label slot, and the label head gives the click probability.

States are batched: every array has a leading sample axis. All samples of a
batch share the schema, so they share the masked-count sequence.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ConfigError, ContractError
from .model import (DTYPE, ModelParams, TokenInput, _normalize, embed_inputs, encode,
                    encode_cached, generate_vectors, score_label)
from .schedules import ScheduleKind, masked_after_step
from .schema import Role

CONDITION, MASKED, RETAINED = 0, 1, 2
MIN_WEIGHT = 0.05
GENFEA_FULL_VOCAB_MAX = 4096


@dataclass
class StepRecord:
    step: int
    n_masked: int
    masked: np.ndarray
    confidence: np.ndarray


@dataclass
class RefinementState:
    original: np.ndarray     # (B, N) tokens, never modified
    tokens: np.ndarray       # (B, N) tokens fed to the model (differs from original only in GenFea)
    status: np.ndarray       # (B, N) CONDITION / MASKED / RETAINED
    weights: np.ndarray      # (B, N)
    confidence: np.ndarray   # (B, N), last computed confidence
    m0: int
    step: int = 0
    trace: list = field(default_factory=list)
    cache: object = None

    @property
    def n_masked(self):
        counts = (self.status == MASKED).sum(axis=1)
        return int(counts[0]) if len(counts) else 0


def init_state(tokens, schema) -> RefinementState:
    """User fields become fixed conditions; item and cross fields start masked."""
    if schema.n_maskable == 0:
        raise ConfigError("schema has no item or cross fields to refine")
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    if tokens.shape[1] != schema.n_features:
        raise ConfigError(f"expected {schema.n_features} tokens per sample, got {tokens.shape[1]}")
    original = tokens.copy()
    original.setflags(write=False)
    status = np.full(tokens.shape, MASKED, dtype=np.int8)
    status[:, schema.positions(Role.USER)] = CONDITION
    return RefinementState(original=original, tokens=tokens.copy(), status=status,
                           weights=np.ones(tokens.shape), confidence=np.ones(tokens.shape),
                           m0=schema.n_maskable)


def _model_input(state, params):
    B, N = state.tokens.shape
    tokens = np.concatenate([state.tokens, np.zeros((B, 1), dtype=np.int64)], axis=1)
    weights = np.concatenate([state.weights, np.ones((B, 1))], axis=1)
    masked = np.concatenate([state.status == MASKED, np.ones((B, 1), dtype=bool)], axis=1)
    return embed_inputs(TokenInput.from_numpy(tokens, weights, masked), params)


def _encode_state(state, params, use_cache):
    x = _model_input(state, params)
    if not use_cache:
        return encode(x, params).H
    if state.cache is None:
        out = encode(x, params, keep_cache=True)
    else:
        frozen = (x == state.cache.x).all(dim=-1).all(dim=0).numpy()
        out = encode_cached(x, params, frozen, state.cache)
    state.cache = out.cache
    return out.H


def _own_token_confidence(G, state, params, positions):
    conf = np.ones(state.tokens.shape)
    for k in positions:
        rows = params.table(k)[torch.tensor(state.original[:, k])]
        conf[:, k] = (G[:, k] * _normalize(rows, "embedding row")).sum(-1).numpy()
    return conf


def _generated_tokens(G_k, params, k, pool=None):
    vocab = int(params.vocab[k])
    if pool is None:
        if vocab > GENFEA_FULL_VOCAB_MAX:
            raise ConfigError(f"field {k}: vocabulary {vocab} too large, pass a token pool")
        cand = np.arange(1, vocab)
    else:
        cand = np.unique(np.asarray(pool, dtype=np.int64))
    emb = _normalize(params.table(k)[torch.tensor(cand)], "embedding row")
    return cand[(G_k @ emb.T).argmax(dim=1).numpy()]


def refine_step(state: RefinementState, params: ModelParams, t, T, kind: ScheduleKind,
                genfea=False, token_pools=None, use_cache=False) -> RefinementState:
    """Advance ``state`` by one step in place and return it."""
    if not 1 <= t <= T or state.step != t - 1:
        raise ContractError(f"step {t} of {T} requested, state is at step {state.step}")
    current = state.n_masked
    n_keep = masked_after_step(kind, t, T, state.m0, current)
    masked_now = state.status == MASKED
    if current == 0:
        # nothing left to decide: record the step without a forward pass
        state.trace.append(StepRecord(t, 0, masked_now.copy(), np.ones(state.tokens.shape)))
        state.step = t
        return state

    with torch.no_grad():
        H = _encode_state(state, params, use_cache)
        N = state.tokens.shape[1]
        G = generate_vectors(H[:, :N], params)
        positions = np.flatnonzero(masked_now.any(axis=0))
        conf = _own_token_confidence(G, state, params, positions)
        conf[~masked_now] = 1.0

        # lowest confidence first, lower index first on ties; unmasked rows sort last
        key = np.where(masked_now, conf, np.inf)
        idx = np.broadcast_to(np.arange(N), key.shape)
        order = np.lexsort((idx, key), axis=1)
        stay = np.zeros_like(masked_now)
        np.put_along_axis(stay, order[:, :n_keep], True, axis=1)
        stay &= masked_now
        newly = masked_now & ~stay

        state.status[newly] = RETAINED
        state.weights[newly] = np.clip(conf[newly], MIN_WEIGHT, 1.0)
        if genfea:
            for k in np.flatnonzero(newly.any(axis=0)):
                rows = np.flatnonzero(newly[:, k])
                pool = None if token_pools is None else token_pools.get(int(k))
                state.tokens[rows, k] = _generated_tokens(G[rows, k], params, k, pool)
                state.weights[rows, k] = 1.0
    state.confidence = conf
    state.trace.append(StepRecord(t, n_keep, stay.copy(), conf))
    state.step = t
    return state


def refine(tokens, params: ModelParams, T=5, kind=ScheduleKind.COSINE, genfea=False,
           token_pools=None, use_cache=False) -> RefinementState:
    if T < 1:
        raise ConfigError("T must be >= 1")
    state = init_state(tokens, params.schema)
    for t in range(1, T + 1):
        refine_step(state, params, t, T, kind, genfea, token_pools, use_cache)
    return state


def click_probability(s0, s1):
    """``sigmoid(s1 - s0)`` from the two label scores."""
    return torch.sigmoid(torch.as_tensor(s1, dtype=DTYPE) - torch.as_tensor(s0, dtype=DTYPE)).numpy()


def predict(state: RefinementState, params: ModelParams, use_cache=False):
    """Click probabilities from the label head on a fully refined state."""
    if state.n_masked:
        raise ContractError("predict needs a state with no masked feature positions")
    with torch.no_grad():
        H = _encode_state(state, params, use_cache)
        return click_probability(*score_label(H, params))


@dataclass(frozen=True)
class InferenceMode:
    """``name`` is one of ``sgctr``, ``onestep``, ``genfea``, ``disc``."""

    name: str = "sgctr"
    steps: int = 5
    schedule: ScheduleKind = ScheduleKind.COSINE

    NAMES = ("sgctr", "onestep", "genfea", "disc")

    def __post_init__(self):
        if self.name not in self.NAMES:
            raise ConfigError(f"unknown inference mode {self.name!r}; choose one of {self.NAMES}")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")

    def label(self):
        if self.name in ("sgctr", "genfea"):
            return f"{self.name}(T={self.steps},{self.schedule.value})"
        return self.name


def predict_discriminative(tokens, params: ModelParams):
    """Single pass with every feature observed at weight 1 and the label masked."""
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    B, N = tokens.shape
    full = np.concatenate([tokens, np.zeros((B, 1), dtype=np.int64)], axis=1)
    masked = np.zeros((B, N + 1), dtype=bool)
    masked[:, N] = True
    with torch.no_grad():
        x = embed_inputs(TokenInput.from_numpy(full, np.ones((B, N + 1)), masked), params)
        return click_probability(*score_label(encode(x, params).H, params))


def infer(tokens, params: ModelParams, mode: InferenceMode = InferenceMode(), token_pools=None,
          use_cache=False, return_state=False):
    """Click probabilities for a batch of samples under ``mode``."""
    if mode.name == "disc":
        p = predict_discriminative(tokens, params)
        return (p, None) if return_state else p
    T = 1 if mode.name == "onestep" else mode.steps
    state = refine(tokens, params, T, mode.schedule, genfea=mode.name == "genfea",
                   token_pools=token_pools, use_cache=use_cache)
    p = predict(state, params, use_cache)
    return (p, state) if return_state else p


def write_trace_csv(path_or_fh, state: RefinementState, sample_offset=0):
    """One row per (sample, step): masked positions and confidences, ``;``-joined."""
    if not hasattr(path_or_fh, "write"):
        with open(path_or_fh, "w", newline="") as fh:
            return write_trace_csv(fh, state, sample_offset)
    w = csv.writer(path_or_fh, lineterminator="\n")
    w.writerow(["sample", "step", "l_t", "masked_positions", "confidences"])
    for b in range(state.original.shape[0]):
        for rec in state.trace:
            w.writerow([sample_offset + b, rec.step, rec.n_masked,
                        ";".join(str(int(i)) for i in np.flatnonzero(rec.masked[b])),
                        ";".join(f"{c:.6g}" for c in rec.confidence[b])])
