"""Datasets: Criteo / generic CSV ingestion, synthetic data and corruption."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, ParseError
from .schema import FeatureSchema, FieldSpec, Role, hash_encode

CRITEO_N_INT = 13
CRITEO_N_CAT = 26


@dataclass(frozen=True)
class EncodedSample:
    tokens: tuple
    label: int


@dataclass
class Dataset:
    """Token matrix ``(n, N)`` in schema order plus labels.

    ``corrupted`` is an optional boolean matrix of the same shape marking
    positions replaced by :func:`corrupt`.
    """

    tokens: np.ndarray
    labels: np.ndarray
    corrupted: np.ndarray | None = None
    name: str = "data"

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        if self.tokens.ndim != 2 or len(self.tokens) != len(self.labels):
            raise DataError(f"tokens shape {self.tokens.shape} does not match {len(self.labels)} labels")
        if self.corrupted is not None:
            self.corrupted = np.asarray(self.corrupted, dtype=bool)
            if self.corrupted.shape != self.tokens.shape:
                raise DataError("corruption mask shape does not match tokens")
        for arr in (self.tokens, self.labels, self.corrupted):
            if arr is not None:
                arr.setflags(write=False)

    def __len__(self):
        return len(self.labels)

    @classmethod
    def from_samples(cls, samples, n_features, name="data"):
        samples = list(samples)
        tokens = np.array([s.tokens for s in samples], dtype=np.int64).reshape(len(samples), n_features)
        labels = np.array([s.label for s in samples], dtype=np.int64)
        return cls(tokens, labels, name=name)

    def sample(self, i):
        return EncodedSample(tuple(int(t) for t in self.tokens[i]), int(self.labels[i]))

    def subset(self, idx):
        idx = np.asarray(idx)
        corrupted = None if self.corrupted is None else self.corrupted[idx]
        return Dataset(self.tokens[idx], self.labels[idx], corrupted, self.name)

    def check(self, schema):
        if self.tokens.shape[1] != schema.n_features:
            raise ConfigError(f"dataset has {self.tokens.shape[1]} feature columns, "
                              f"schema has {schema.n_features}")
        for k, f in enumerate(schema.features):
            col = self.tokens[:, k]
            if len(col) and (col.min() < 0 or col.max() >= f.vocab_size):
                raise ConfigError(f"field {f.name}: token ids outside [0, {f.vocab_size})")


# ---------------------------------------------------------------- Criteo

def bucketize_int(raw, vocab_size):
    """Log-squared bucketing for a Criteo integer column.

    Missing -> 0, negative -> ``vocab_size - 1`` (dedicated bucket), otherwise
    ``floor(ln(v + 1) ** 2) + 1`` clamped to ``vocab_size - 2``.
    """
    if raw == "":
        return 0
    v = int(raw)
    if v < 0:
        return vocab_size - 1
    return min(int(math.floor(math.log(v + 1) ** 2)) + 1, vocab_size - 2)


def parse_criteo_line(line, schema, lineno=None):
    """Parse ``label \\t I1..I13 \\t C1..C26``. Fields must follow schema order."""
    cols = line.rstrip("\r\n").split("\t")
    if len(cols) != 1 + CRITEO_N_INT + CRITEO_N_CAT:
        raise ParseError(f"expected 40 tab-separated columns, got {len(cols)}", lineno)
    if schema.n_features != CRITEO_N_INT + CRITEO_N_CAT:
        raise ConfigError("Criteo parsing needs a schema with 39 feature fields")
    if cols[0] not in ("0", "1"):
        raise ParseError(f"label must be 0 or 1, got {cols[0]!r}", lineno)
    tokens = []
    for k, (f, raw) in enumerate(zip(schema.features, cols[1:])):
        if k < CRITEO_N_INT:
            if f.vocab_size < 3:
                raise ConfigError(f"integer field {f.name} needs buckets >= 2")
            try:
                tokens.append(bucketize_int(raw, f.vocab_size))
            except ValueError:
                raise ParseError(f"column {f.name}: not an integer: {raw!r}", lineno) from None
        else:
            tokens.append(hash_encode(f.name, raw, f.vocab_size))
    return EncodedSample(tuple(tokens), int(cols[0]))


def format_criteo_line(label, ints, cats):
    """Inverse of the raw layout: label, 13 ints, 26 strings; None means missing."""
    ints = ["" if v is None else str(v) for v in ints]
    cats = ["" if v is None else v for v in cats]
    return "\t".join([str(label), *ints, *cats])


def read_criteo(lines, schema, name="criteo"):
    """Parse many lines; returns ``(dataset, rejected_line_numbers)``."""
    samples, rejected = [], []
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            samples.append(parse_criteo_line(line, schema, lineno))
        except ParseError:
            rejected.append(lineno)
    return Dataset.from_samples(samples, schema.n_features, name), rejected


# ---------------------------------------------------------------- generic CSV

def parse_csv(source, schema, role_map=None, name="csv"):
    """Read a header + rows CSV into a :class:`Dataset`.

    ``source`` is a path, a file object, or an iterable of lines. ``role_map``
    maps column name -> role name and defaults to the schema's own roles;
    every header column must appear in it and agree with the schema.
    """
    if role_map is None:
        role_map = {f.name: f.role.value for f in schema.fields}
    role_map = {k: Role(v) if not isinstance(v, Role) else v for k, v in role_map.items()}
    by_name = {f.name: f for f in schema.fields}

    if isinstance(source, (str, Path)):
        with open(source, newline="") as fh:
            return parse_csv(fh, schema, role_map, name)
    reader = csv.reader(source)
    try:
        header = next(reader)
    except StopIteration:
        raise DataError("CSV source is empty (no header)") from None

    for col in header:
        if col not in role_map:
            raise ConfigError(f"unknown column {col!r} (not in role map)")
        if col not in by_name:
            raise ConfigError(f"column {col!r} is not a schema field")
        if by_name[col].role is not role_map[col]:
            raise ConfigError(f"column {col!r}: role map says {role_map[col].value}, "
                              f"schema says {by_name[col].role.value}")
    if schema.label.name not in header:
        raise ConfigError(f"missing label column {schema.label.name!r}")
    missing = [f.name for f in schema.features if f.name not in header]
    if missing:
        raise ConfigError(f"schema fields missing from header: {missing}")

    col_of = {c: j for j, c in enumerate(header)}
    feat_cols = [(f, col_of[f.name]) for f in schema.features]
    label_col = col_of[schema.label.name]
    tokens, labels = [], []
    for lineno, row in enumerate(reader, 2):
        if not row:
            continue
        if len(row) != len(header):
            raise ParseError(f"expected {len(header)} columns, got {len(row)}", lineno)
        if row[label_col] not in ("0", "1"):
            raise ParseError(f"label must be 0 or 1, got {row[label_col]!r}", lineno)
        labels.append(int(row[label_col]))
        tokens.append([_encode_cell(f, row[j], lineno) for f, j in feat_cols])
    arr = np.array(tokens, dtype=np.int64).reshape(len(labels), schema.n_features)
    return Dataset(arr, np.array(labels, dtype=np.int64), name=name)


def _encode_cell(f: FieldSpec, raw, lineno):
    if f.encoding == "hash":
        return hash_encode(f.name, raw, f.vocab_size)
    if raw == "":
        return 0
    try:
        tok = int(raw)
    except ValueError:
        raise ParseError(f"column {f.name}: expected token id, got {raw!r}", lineno) from None
    if not 0 <= tok < f.vocab_size:
        raise ParseError(f"column {f.name}: token {tok} outside [0, {f.vocab_size})", lineno)
    return tok


def write_csv(path_or_fh, dataset, schema):
    """Write token ids in the generic format (header in schema field order)."""
    if isinstance(path_or_fh, (str, Path)):
        with open(path_or_fh, "w", newline="") as fh:
            return write_csv(fh, dataset, schema)
    w = csv.writer(path_or_fh, lineterminator="\n")
    w.writerow([f.name for f in schema.fields])
    feat_idx = {f.name: k for k, f in enumerate(schema.features)}
    for i in range(len(dataset)):
        row = []
        for f in schema.fields:
            if f.role is Role.LABEL:
                row.append(int(dataset.labels[i]))
            else:
                row.append(int(dataset.tokens[i, feat_idx[f.name]]))
        w.writerow(row)


def write_mask_csv(path, dataset, schema):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f.name for f in schema.features])
        w.writerows(dataset.corrupted.astype(int).tolist())


def read_mask_csv(path, schema):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if rows[0] != [f.name for f in schema.features]:
        raise ConfigError("corruption mask header does not match schema")
    return np.array([[int(v) for v in r] for r in rows[1:]], dtype=bool).reshape(-1, schema.n_features)


# ---------------------------------------------------------------- synthetic

@dataclass
class SynthConfig:
    n_user: int = 3
    n_item: int = 3
    n_cross: int = 2
    n_clusters: int = 4
    vocab: int = 20
    dependency_strength: float = 1.0
    label_noise: float = 0.0
    corruption_rate: float = 0.3
    cluster_purity: float = 0.97
    block_size: int = 1
    cluster_affinity: float = 0.0
    n_train: int = 20_000
    n_test: int = 5_000
    seed: int = 0

    def validate(self):
        for name in ("dependency_strength", "label_noise", "corruption_rate", "cluster_purity", "cluster_affinity"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {v}")
        if self.n_clusters < 2:
            raise ConfigError("n_clusters must be >= 2")
        if self.n_user < 1 or self.n_item < 1 or self.n_cross < 0:
            raise ConfigError("need n_user >= 1, n_item >= 1, n_cross >= 0")
        blocks = self.n_clusters ** 2 if self.n_cross else self.n_clusters
        if self.block_size < 1:
            raise ConfigError("block_size must be >= 1")
        if self.vocab < blocks * self.block_size:
            raise ConfigError(f"vocab must be >= {blocks * self.block_size} so every cluster owns a disjoint token block")
        if self.n_train < 0 or self.n_test < 0:
            raise ConfigError("sample counts must be non-negative")

    def schema(self):
        fields = [FieldSpec(f"u{j}", Role.USER, self.vocab + 1, "id") for j in range(self.n_user)]
        fields += [FieldSpec(f"i{j}", Role.ITEM, self.vocab + 1, "id") for j in range(self.n_item)]
        fields += [FieldSpec(f"x{j}", Role.CROSS, self.vocab + 1, "id") for j in range(self.n_cross)]
        fields.append(FieldSpec("y", Role.LABEL, 3))
        return FeatureSchema(fields)


@dataclass
class SynthOracle:
    """Every parameter of the generative process.

    ``user_probs[j, z]`` / ``item_probs[j, z]`` are distributions over token
    ids ``0..vocab`` (id 0 has zero mass); ``cross_probs[j, zu * Z + zi]``
    likewise. ``dep_map[v]`` is the item-field-0 token forced by user-field-0
    token ``v``.
    """

    config: SynthConfig
    user_probs: np.ndarray
    item_probs: np.ndarray
    cross_probs: np.ndarray
    dep_map: np.ndarray
    match_prob: float = 0.9
    base_prob: float = 0.1
    train_clusters: np.ndarray = field(default=None, repr=False)
    test_clusters: np.ndarray = field(default=None, repr=False)

    def describe(self):
        c = self.config
        Z = c.n_clusters
        out = io.StringIO()
        out.write(
            "Synthetic CTR generative process\n"
            f"config: {c}\n"
            "1. user cluster zu ~ Uniform{0..Z-1}; item cluster zi = zu with probability\n"
            f"   cluster_affinity={c.cluster_affinity}, otherwise an independent Uniform{{0..Z-1}} draw.\n"
            "2. user field j token ~ user_probs[j, zu]; item field j token ~ item_probs[j, zi];\n"
            "   cross field j token ~ cross_probs[j, zu*Z + zi].\n"
            "   Each cluster distribution puts mass cluster_purity uniformly on the cluster's own\n"
            "   token block and (1 - cluster_purity) uniformly on all ids 1..vocab.\n"
            f"3. with probability dependency_strength={c.dependency_strength}, item field 0 is\n"
            "   overwritten by dep_map[user field 0 token]; otherwise it is redrawn uniformly\n"
            "   from 1..vocab.\n"
            f"4. y ~ Bernoulli({self.match_prob - self.base_prob:.1f} * [zu == zi] + {self.base_prob:.1f}),"
            f" then flipped with probability label_noise={c.label_noise}.\n"
            f"5. samples 0..{c.n_train - 1} form the train set, the next {c.n_test} the test set.\n"
            "Token id 0 (missing) never occurs.\n\n"
        )
        out.write("dep_map (user field 0 token -> item field 0 token):\n")
        out.write(" ".join(f"{v}->{int(self.dep_map[v])}" for v in range(1, c.vocab + 1)) + "\n")
        for name, arr in (("user", self.user_probs), ("item", self.item_probs), ("cross", self.cross_probs)):
            for j in range(arr.shape[0]):
                for z in range(arr.shape[1]):
                    support = np.flatnonzero(arr[j, z] > (1.0 - c.cluster_purity) / c.vocab + 1e-12)
                    out.write(f"{name}[{j}] cluster {z}: block {support.tolist()}\n")
        out.write(f"Z={Z}\n")
        return out.getvalue()


def _cluster_probs(rng, n_fields, n_blocks, vocab, purity, block_size):
    probs = np.zeros((n_fields, n_blocks, vocab + 1))
    for j in range(n_fields):
        perm = rng.permutation(vocab) + 1
        for b in range(n_blocks):
            block = perm[b * block_size: (b + 1) * block_size]
            probs[j, b, 1:] = (1.0 - purity) / vocab
            probs[j, b, block] += purity / len(block)
    return probs


def _draw(rng, probs_rows):
    """One categorical draw per row of ``probs_rows`` via inverse CDF."""
    cdf = np.cumsum(probs_rows, axis=1)
    cdf[:, -1] = 1.0
    u = rng.random(len(probs_rows))
    return (u[:, None] >= cdf).sum(axis=1)


def synth_generate(cfg: SynthConfig):
    """Returns ``(train, test, oracle)``; deterministic in ``cfg.seed``."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    Z, V = cfg.n_clusters, cfg.vocab
    user_probs = _cluster_probs(rng, cfg.n_user, Z, V, cfg.cluster_purity, cfg.block_size)
    item_probs = _cluster_probs(rng, cfg.n_item, Z, V, cfg.cluster_purity, cfg.block_size)
    cross_probs = _cluster_probs(rng, cfg.n_cross, Z * Z, V, cfg.cluster_purity, cfg.block_size)
    dep_map = np.zeros(V + 1, dtype=np.int64)
    dep_map[1:] = rng.integers(1, V + 1, size=V)

    n = cfg.n_train + cfg.n_test
    zu = rng.integers(0, Z, size=n)
    zi = rng.integers(0, Z, size=n)
    if cfg.cluster_affinity > 0:
        zi = np.where(rng.random(n) < cfg.cluster_affinity, zu, zi)
    cols = []
    for j in range(cfg.n_user):
        cols.append(_draw(rng, user_probs[j, zu]))
    for j in range(cfg.n_item):
        cols.append(_draw(rng, item_probs[j, zi]))
    for j in range(cfg.n_cross):
        cols.append(_draw(rng, cross_probs[j, zu * Z + zi]))
    tokens = np.stack(cols, axis=1) if n else np.zeros((0, len(cols)), dtype=np.int64)

    keep_dep = rng.random(n) < cfg.dependency_strength
    uniform_item0 = rng.integers(1, V + 1, size=n)
    tokens[:, cfg.n_user] = np.where(keep_dep, dep_map[tokens[:, 0]], uniform_item0)

    oracle = SynthOracle(cfg, user_probs, item_probs, cross_probs, dep_map)
    p = np.where(zu == zi, oracle.match_prob, oracle.base_prob)
    y = (rng.random(n) < p).astype(np.int64)
    flip = rng.random(n) < cfg.label_noise
    y = np.where(flip, 1 - y, y)

    clusters = np.stack([zu, zi], axis=1)
    oracle.train_clusters = clusters[: cfg.n_train]
    oracle.test_clusters = clusters[cfg.n_train:]
    train = Dataset(tokens[: cfg.n_train], y[: cfg.n_train], name="synth-train")
    test = Dataset(tokens[cfg.n_train:], y[cfg.n_train:], name="synth-test")
    return train, test, oracle


# ---------------------------------------------------------------- corruption

def corrupt(sample_tokens, schema, rate, rng, roles=(Role.ITEM, Role.CROSS)):
    """Resample eligible positions uniformly from the non-zero ids.

    Works on one sample (1-D) or a batch (2-D). Returns ``(tokens, mask)``.
    User fields are never touched; a resampled token may coincide with the
    original and still counts as corrupted.
    """
    roles = tuple(roles)
    if any(r not in (Role.ITEM, Role.CROSS) for r in roles):
        raise ConfigError("only item and cross fields may be corrupted")
    if not 0.0 <= rate <= 1.0:
        raise ConfigError(f"corruption rate must be in [0, 1], got {rate}")
    tokens = np.array(sample_tokens, dtype=np.int64)
    single = tokens.ndim == 1
    tokens = np.atleast_2d(tokens)
    mask = np.zeros(tokens.shape, dtype=bool)
    eligible = schema.positions(*roles)
    if eligible and rate > 0:
        hit = rng.random((tokens.shape[0], len(eligible))) < rate
        for c, k in enumerate(eligible):
            vocab = schema.features[k].vocab_size
            new = rng.integers(1, vocab, size=tokens.shape[0])
            tokens[:, k] = np.where(hit[:, c], new, tokens[:, k])
            mask[:, k] = hit[:, c]
    if single:
        return tokens[0], mask[0]
    return tokens, mask


def corrupt_dataset(dataset, schema, rate, seed):
    rng = np.random.default_rng(seed)
    tokens, mask = corrupt(dataset.tokens, schema, rate, rng)
    return Dataset(tokens, dataset.labels, mask, name=dataset.name + "-corrupted")
