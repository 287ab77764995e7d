"""Masked discrete-diffusion training with an in-batch sampled softmax."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ConfigError, NumericError
from .model import (DTYPE, ModelConfig, ModelParams, TokenInput, _normalize, check_gradients,
                    embed_inputs, encode, generate_vectors, init_params, score_label)

log = logging.getLogger(__name__)


def linear_noise(t, n_maskable):
    """Default noise schedule: mask ratio ``max(t, 1/n_maskable)``."""
    return max(t, 1.0 / n_maskable)


def masked_count(ratio, n):
    """``max(1, round(ratio * n))`` with halves rounded up."""
    return max(1, min(n, int(math.floor(ratio * n + 0.5))))


@dataclass(frozen=True)
class MaskPlan:
    """Masked feature positions for one sample; the label is masked on top of these."""

    t: float | None
    ratio: float
    masked_positions: tuple
    loss_weight: float


def _draw_positions(rng, n, count):
    return tuple(sorted(int(i) for i in rng.permutation(n)[:count]))


def sample_mask_plan(rng, schema, schedule=linear_noise) -> MaskPlan:
    n = schema.n_features
    t = 1.0 - rng.random()  # (0, 1]
    lam = schedule(t, n)
    if not 0 < lam <= 1:
        raise ConfigError(f"noise schedule returned {lam} outside (0, 1]")
    return MaskPlan(t, lam, _draw_positions(rng, n, masked_count(lam, n)), 1.0 / lam)


def bert_mask_plan(rng, schema, ratio) -> MaskPlan:
    if not 0 < ratio <= 1:
        raise ConfigError(f"BERT mask ratio must be in (0, 1], got {ratio}")
    n = schema.n_features
    return MaskPlan(None, ratio, _draw_positions(rng, n, masked_count(ratio, n)), 1.0)


@dataclass
class TrainConfig:
    batch_size: int = 256
    epochs: int = 5
    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    mask_mode: str = "diffusion"  # or "bert:<ratio>"
    alpha: float = 1.0
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 for in-batch negatives")
        if self.epochs < 0 or self.lr < 0 or self.alpha < 0:
            raise ConfigError("epochs, lr and alpha must be non-negative")
        self.bert_ratio  # validates mask_mode

    @property
    def bert_ratio(self):
        if self.mask_mode == "diffusion":
            return None
        kind, _, ratio = self.mask_mode.partition(":")
        try:
            value = float(ratio)
        except ValueError:
            value = None
        if kind != "bert" or value is None or not 0 < value <= 1:
            raise ConfigError(f"mask mode must be 'diffusion' or 'bert:<ratio in (0,1]>', got {self.mask_mode!r}")
        return value

    def plan(self, rng, schema):
        ratio = self.bert_ratio
        return sample_mask_plan(rng, schema) if ratio is None else bert_mask_plan(rng, schema, ratio)


@dataclass
class FieldLosses:
    """``terms[b, k]`` is the sampled-softmax loss of field ``k`` in sample ``b`` (0 if unmasked)."""

    terms: torch.Tensor
    label: torch.Tensor
    degenerate: int


def _batch_inputs(tokens, labels, plans, schema):
    B, N = tokens.shape
    masked = np.zeros((B, N + 1), dtype=bool)
    for b, plan in enumerate(plans):
        masked[b, list(plan.masked_positions)] = True
    masked[:, N] = True
    full = np.concatenate([tokens, (labels + 1)[:, None]], axis=1)
    return TokenInput.from_numpy(full, np.ones((B, N + 1)), masked), masked


def field_loss(tokens, labels, plans, params: ModelParams) -> FieldLosses:
    """Forward pass plus per-position losses for one minibatch.

    The candidate set for field ``k`` is the distinct ground-truth tokens of
    field ``k`` across the batch, target included. The label slot uses the
    full two-class softmax.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(tokens) < 2:
        raise ConfigError("field_loss needs at least two samples for in-batch negatives")
    schema = params.schema
    inp, masked = _batch_inputs(tokens, labels, plans, schema)
    H = encode(embed_inputs(inp, params), params).H
    G = generate_vectors(H, params)
    tau = params.tau
    degenerate = 0
    cols = []
    for k in range(schema.n_features):
        rows = np.flatnonzero(masked[:, k])
        if len(rows) == 0:
            cols.append(torch.zeros(len(tokens), dtype=DTYPE))
            continue
        uniq, inv = np.unique(tokens[:, k], return_inverse=True)
        if len(uniq) == 1:
            degenerate += len(rows)
        cand = _normalize(params.table(k)[torch.tensor(uniq)], f"embedding table {k}")
        logits = G[:, k] @ cand.T / tau
        ce = torch.nn.functional.cross_entropy(logits, torch.tensor(inv), reduction="none")
        cols.append(ce * torch.tensor(masked[:, k]).to(DTYPE))
    terms = torch.stack(cols, dim=1)
    s0, s1 = score_label(H, params)
    label = torch.nn.functional.cross_entropy(torch.stack([s0, s1], dim=1), torch.tensor(labels),
                                              reduction="none")
    return FieldLosses(terms, label, degenerate)


def training_loss(tokens, labels, params, cfg: TrainConfig, rng=None, plans=None):
    """Monte-Carlo estimate of the weighted masked-reconstruction loss.

    Mean over samples of ``loss_weight * sum(masked field losses) + alpha * label loss``,
    where ``loss_weight`` is ``1/lambda(t)`` for diffusion plans. Returns
    ``(loss tensor, plans, FieldLosses)``.
    """
    if plans is None:
        plans = [cfg.plan(rng, params.schema) for _ in range(len(tokens))]
    fl = field_loss(tokens, labels, plans, params)
    w = torch.tensor([p.loss_weight for p in plans], dtype=DTYPE)
    loss = (w * fl.terms.sum(1) + cfg.alpha * fl.label).mean()
    if not torch.isfinite(loss):
        raise NumericError("non-finite training loss")
    return loss, plans, fl


@dataclass
class FitResult:
    params: ModelParams
    losses: list
    mask_ratios: list
    degenerate: int = 0

    def trace_rows(self):
        return [(i, l, r) for i, (l, r) in enumerate(zip(self.losses, self.mask_ratios))]


def fit(train, cfg: TrainConfig, schema, params: ModelParams | None = None) -> FitResult:
    """Shuffled minibatch Adam over ``cfg.epochs`` epochs; deterministic in ``cfg.seed``."""
    if len(train) == 0:
        raise ConfigError("empty training set")
    train.check(schema)
    if params is None:
        params = init_params(schema, cfg.model, seed=cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    opt = torch.optim.Adam(params.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps)
    losses, ratios, degenerate = [], [], 0
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train))
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start: start + cfg.batch_size]
            if len(idx) < 2:
                continue
            opt.zero_grad(set_to_none=True)
            try:
                loss, plans, fl = training_loss(train.tokens[idx], train.labels[idx], params, cfg, rng)
            except NumericError as exc:
                raise NumericError(f"step {step}: {exc}") from None
            loss.backward()
            try:
                check_gradients(params)
            except NumericError as exc:
                raise NumericError(f"step {step}: {exc}") from None
            opt.step()
            losses.append(loss.item())
            ratios.append(float(np.mean([p.ratio for p in plans])))
            degenerate += fl.degenerate
            step += 1
        if losses:
            log.info("epoch %d/%d  step %d  loss %.4f", epoch + 1, cfg.epochs, step, losses[-1])
    params.zero_grad()
    return FitResult(params, losses, ratios, degenerate)


def heldout_loss(params, dataset, cfg: TrainConfig, seed=12345, batch_size=None):
    """Average training loss on fixed-seed masks, batch by batch, without gradients."""
    rng = np.random.default_rng(seed)
    batch_size = batch_size or cfg.batch_size
    total, count = 0.0, 0
    with torch.no_grad():
        for start in range(0, len(dataset), batch_size):
            sl = slice(start, start + batch_size)
            n = len(dataset.labels[sl])
            if n < 2:
                continue
            loss, _, _ = training_loss(dataset.tokens[sl], dataset.labels[sl], params, cfg, rng)
            total += float(loss) * n
            count += n
    return total / count
