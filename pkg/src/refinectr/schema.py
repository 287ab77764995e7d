"""Feature schemas, the schema config grammar and the hashing trick.

A schema is an ordered list of fields. The non-label fields, in order, are
the model positions ``0..N-1``; the label is always realized as position
``N``. Config files use one line per field::

    # comment
    field user_id   role=user  buckets=1000
    field item_cat  role=item  buckets=50 encoding=id
    field click     role=label buckets=2

``buckets=n`` gives ``vocab_size = n + 1`` because token id 0 is reserved for
missing values. ``encoding=id`` marks a column whose raw values are already
token ids (used by the synthetic CSV files); the default ``hash`` runs the
raw string through :func:`hash_encode`.
"""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError

FNV64_OFFSET = 0xCBF29CE484222325
FNV64_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


class Role(enum.Enum):
    USER = "user"
    ITEM = "item"
    CROSS = "cross"
    LABEL = "label"


@dataclass(frozen=True)
class FieldSpec:
    name: str
    role: Role
    vocab_size: int
    encoding: str = "hash"

    def __post_init__(self):
        if not self.name or any(c.isspace() for c in self.name):
            raise ConfigError(f"invalid field name {self.name!r}")
        if self.vocab_size < 2:
            raise ConfigError(f"field {self.name}: vocab_size must be >= 2")
        if self.encoding not in ("hash", "id"):
            raise ConfigError(f"field {self.name}: unknown encoding {self.encoding!r}")
        if self.role is Role.LABEL and self.vocab_size != 3:
            raise ConfigError(f"label field {self.name} must have vocab_size 3 (buckets=2)")


class FeatureSchema:
    """Ordered field specs. ``features`` excludes the label; ``label`` is the label spec."""

    def __init__(self, fields):
        fields = list(fields)
        labels = [f for f in fields if f.role is Role.LABEL]
        if len(labels) != 1:
            raise ConfigError(f"schema needs exactly one label field, got {len(labels)}")
        names = [f.name for f in fields]
        if len(set(names)) != len(names):
            raise ConfigError("duplicate field names in schema")
        self.fields = tuple(fields)
        self.label = labels[0]
        self.features = tuple(f for f in fields if f.role is not Role.LABEL)
        if not self.features:
            raise ConfigError("schema has no feature fields")

    @property
    def n_features(self):
        return len(self.features)

    @property
    def n_positions(self):
        """Feature positions plus the label slot."""
        return len(self.features) + 1

    @property
    def label_position(self):
        return len(self.features)

    def count(self, role):
        return sum(1 for f in self.features if f.role is role)

    @property
    def n_maskable(self):
        """Fields that start masked at inference (item + cross)."""
        return self.count(Role.ITEM) + self.count(Role.CROSS)

    def positions(self, *roles):
        return [i for i, f in enumerate(self.features) if f.role in roles]

    def vocab_sizes(self):
        """Vocabulary size per model position, label slot last."""
        return [f.vocab_size for f in self.features] + [self.label.vocab_size]

    def index(self, name):
        for i, f in enumerate(self.features):
            if f.name == name:
                return i
        raise KeyError(name)

    def to_text(self):
        lines = []
        for f in self.fields:
            line = f"field {f.name} role={f.role.value} buckets={f.vocab_size - 1}"
            if f.encoding != "hash":
                line += f" encoding={f.encoding}"
            lines.append(line)
        return "\n".join(lines) + "\n"

    def hash(self):
        """Short stable digest of the canonical text form."""
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()[:16]

    def __eq__(self, other):
        return isinstance(other, FeatureSchema) and self.fields == other.fields

    def __repr__(self):
        return (f"FeatureSchema(N={self.n_features}, user={self.count(Role.USER)}, "
                f"item={self.count(Role.ITEM)}, cross={self.count(Role.CROSS)})")


def parse_schema(text):
    fields = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if parts[0] != "field" or len(parts) < 2:
            raise ConfigError(f"schema line {lineno}: expected 'field <name> key=value ...'")
        opts = {}
        for kv in parts[2:]:
            key, sep, value = kv.partition("=")
            if not sep:
                raise ConfigError(f"schema line {lineno}: bad option {kv!r}")
            opts[key] = value
        unknown = set(opts) - {"role", "buckets", "encoding"}
        if unknown:
            raise ConfigError(f"schema line {lineno}: unknown option(s) {sorted(unknown)}")
        try:
            role = Role(opts["role"])
            buckets = int(opts["buckets"])
        except KeyError as exc:
            raise ConfigError(f"schema line {lineno}: missing {exc.args[0]}") from None
        except ValueError as exc:
            raise ConfigError(f"schema line {lineno}: {exc}") from None
        fields.append(FieldSpec(parts[1], role, buckets + 1, opts.get("encoding", "hash")))
    return FeatureSchema(fields)


def load_schema(path):
    return parse_schema(Path(path).read_text())


def fnv1a_64(data: bytes) -> int:
    h = FNV64_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV64_PRIME) & _MASK64
    return h


def hash_encode(field_name: str, raw_value: str, vocab_size: int) -> int:
    """Token id for a raw string value; 0 for missing, else in ``[1, vocab_size)``."""
    if raw_value == "":
        return 0
    key = f"{field_name}:{raw_value}".encode("utf-8")
    return 1 + fnv1a_64(key) % (vocab_size - 1)


def criteo_schema(int_buckets=64, cat_buckets=100_000):
    """The 13 integer + 26 categorical Criteo fields.

    Criteo carries no user/item split; integer fields are treated as user-side
    conditions and categorical fields as item-side so that inference has
    something to refine.
    """
    fields = [FieldSpec("label", Role.LABEL, 3)]
    fields += [FieldSpec(f"I{i}", Role.USER, int_buckets + 1) for i in range(1, 14)]
    fields += [FieldSpec(f"C{i}", Role.ITEM, cat_buckets + 1) for i in range(1, 27)]
    return FeatureSchema(fields)
