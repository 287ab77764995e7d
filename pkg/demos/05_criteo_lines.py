"""
Criteo-format parsing
=====================

Tab-separated lines with a label, 13 integer counts and 26 hashed
categoricals. Bad lines are rejected with their line number.
"""

from refinectr.data import format_criteo_line, read_criteo
from refinectr.schema import criteo_schema

schema = criteo_schema(int_buckets=64, cat_buckets=1000)
print(schema.n_features, "features, label at position", schema.label_position)

lines = [
    format_criteo_line(1, [5, 0, None, 120, -1] + [3] * 8, ["68fd1e64", "80e26c9b"] + [None] * 24),
    format_criteo_line(0, [None] * 13, ["05db9164"] * 26),
    "2\t" + "\t" * 38,          # label out of range
    "1\t2\t3",                  # too few columns
]
data, rejected = read_criteo(lines, schema)
print("parsed", len(data), "rejected lines", rejected)
print("integer buckets:", data.tokens[0, :13])
print("first categoricals:", data.tokens[0, 13:16])
