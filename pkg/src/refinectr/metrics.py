"""AUC / logloss, the evaluation harness and the schedule / step sweeps."""

from __future__ import annotations

import csv
from dataclasses import dataclass, asdict

import numpy as np
import torch
from scipy.stats import rankdata

from .errors import DataError
from .model import TokenInput, _normalize, embed_inputs, encode, generate_vectors
from .refine import GENFEA_FULL_VOCAB_MAX, InferenceMode, infer
from .schedules import ScheduleKind

LOGLOSS_CLIP = 1e-7
REPORT_COLUMNS = ("mode", "dataset", "n", "auc", "logloss", "auc_corrupted", "seed")
SWEEP_COLUMNS = ("config", "auc", "logloss")


def auc(scores, labels):
    """Mann-Whitney AUC with average ranks for ties; O(n log n)."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DataError("AUC is undefined with a single class")
    ranks = rankdata(scores, method="average")
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def logloss(scores, labels):
    p = np.clip(np.asarray(scores, dtype=float), LOGLOSS_CLIP, 1.0 - LOGLOSS_CLIP)
    y = np.asarray(labels, dtype=float)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log1p(-p)))


@dataclass
class EvalReport:
    mode: str
    dataset: str
    n: int
    auc: float
    logloss: float
    auc_corrupted: float | None
    seed: int

    def row(self):
        d = asdict(self)
        return [d[c] if d[c] is not None else "" for c in REPORT_COLUMNS]


def token_pools(dataset, schema):
    """In-dataset token pools for fields too large for a full-vocabulary argmax."""
    return {k: np.unique(dataset.tokens[:, k]) for k, f in enumerate(schema.features)
            if f.vocab_size > GENFEA_FULL_VOCAB_MAX}


def predict_dataset(params, dataset, mode: InferenceMode, batch_size=1024, use_cache=False):
    pools = token_pools(dataset, params.schema) if mode.name == "genfea" else None
    out = [infer(dataset.tokens[s: s + batch_size], params, mode, pools, use_cache)
           for s in range(0, len(dataset), batch_size)]
    return np.concatenate(out) if out else np.zeros(0)


def evaluate(params, dataset, mode: InferenceMode, seed=0, batch_size=1024, use_cache=False) -> EvalReport:
    """Run ``mode`` over ``dataset``. ``seed`` is recorded, inference itself is deterministic."""
    if len(dataset) == 0:
        raise DataError("cannot evaluate on an empty dataset")
    scores = predict_dataset(params, dataset, mode, batch_size, use_cache)
    auc_c = None
    if dataset.corrupted is not None:
        hit = dataset.corrupted.any(axis=1)
        if hit.any() and 0 < dataset.labels[hit].sum() < hit.sum():
            auc_c = auc(scores[hit], dataset.labels[hit])
    return EvalReport(mode.label(), dataset.name, len(dataset), auc(scores, dataset.labels),
                      logloss(scores, dataset.labels), auc_c, seed)


def write_reports(path_or_fh, reports):
    if not hasattr(path_or_fh, "write"):
        with open(path_or_fh, "w", newline="") as fh:
            return write_reports(fh, reports)
    w = csv.writer(path_or_fh, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in reports:
        w.writerow(r.row())


@dataclass
class SweepResult:
    rows: list  # (config, auc, logloss)

    def write_csv(self, path_or_fh):
        if not hasattr(path_or_fh, "write"):
            with open(path_or_fh, "w", newline="") as fh:
                return self.write_csv(fh)
        w = csv.writer(path_or_fh, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        w.writerows(self.rows)


def sweep_schedules(params, dataset, T=5, batch_size=1024):
    rows = []
    for kind in ScheduleKind:
        rep = evaluate(params, dataset, InferenceMode("sgctr", T, kind), batch_size=batch_size)
        rows.append((kind.value, rep.auc, rep.logloss))
    return SweepResult(rows)


def sweep_steps(params, dataset, kind=ScheduleKind.COSINE, steps=(1, 3, 5, 8, 12), batch_size=1024):
    rows = []
    for T in steps:
        rep = evaluate(params, dataset, InferenceMode("sgctr", T, kind), batch_size=batch_size)
        rows.append((f"T={T}", rep.auc, rep.logloss))
    return SweepResult(rows)


def masked_recovery(params, dataset, position, candidates=None, batch_size=1024):
    """Top-1 rate of recovering ``position``'s token with only that field (and the label) masked.

    Candidates are ranked by cosine with the generated vector. They default to
    every non-missing id of the field; pass the ids seen in training to leave
    out rows that never received a gradient.
    """
    N = params.schema.n_features
    vocab = params.schema.features[position].vocab_size
    cand = np.arange(1, vocab) if candidates is None else np.unique(np.asarray(candidates, dtype=np.int64))
    cand = cand[cand > 0]
    if len(cand) == 0 or cand.max() >= vocab:
        raise DataError(f"candidate ids must lie in [1, {vocab})")
    table = _normalize(params.table(position)[torch.as_tensor(cand)], "embedding table")
    hits = 0
    with torch.no_grad():
        for s in range(0, len(dataset), batch_size):
            tok = dataset.tokens[s: s + batch_size]
            B = len(tok)
            full = np.concatenate([tok, np.zeros((B, 1), dtype=np.int64)], axis=1)
            masked = np.zeros((B, N + 1), dtype=bool)
            masked[:, [position, N]] = True
            x = embed_inputs(TokenInput.from_numpy(full, np.ones((B, N + 1)), masked), params)
            g = generate_vectors(encode(x, params).H[:, position], params)
            pred = cand[(g @ table.T).argmax(dim=1).numpy()]
            hits += int((pred == tok[:, position]).sum())
    return hits / len(dataset)
