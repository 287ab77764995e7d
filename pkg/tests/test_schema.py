import pytest

from refinectr.errors import ConfigError
from refinectr.schema import (FeatureSchema, FieldSpec, Role, criteo_schema, fnv1a_64, hash_encode,
                              parse_schema)

SCHEMA_TEXT = """
# demo
field user_id  role=user  buckets=100
field item_cat role=item  buckets=50 encoding=id
field pair     role=cross buckets=10
field click    role=label buckets=2
"""


class TestHashing:
    @pytest.mark.parametrize("data,expected", [
        (b"", 0xCBF29CE484222325),
        (b"a", 0xAF63DC4C8601EC8C),
        (b"foobar", 0x85944171F73967E8),
    ])
    def test_published_fnv1a_vectors(self, data, expected):
        assert fnv1a_64(data) == expected

    def test_missing_is_zero(self):
        assert hash_encode("f0", "", 1000) == 0

    def test_golden_values(self):
        # pinned with an independent functools.reduce implementation
        assert hash_encode("f0", "abc", 1000) == 1 + 5325982380402624797 % 999 == 519
        assert hash_encode("u0", "hello", 101) == 87
        assert hash_encode("i0", "hello", 101) == 63
        assert hash_encode("C1", "hello", 101) == 96

    def test_deterministic_and_in_range(self):
        for v in ["x", "yy", "1234", "ünï"]:
            t = hash_encode("f", v, 17)
            assert t == hash_encode("f", v, 17)
            assert 1 <= t < 17

    def test_field_prefix_matters(self):
        values = [str(i) for i in range(50)]
        a = [hash_encode("a", v, 10**6) for v in values]
        b = [hash_encode("b", v, 10**6) for v in values]
        assert a != b


class TestSchema:
    def test_parse_counts(self):
        s = parse_schema(SCHEMA_TEXT)
        assert s.n_features == 3
        assert s.n_positions == 4
        assert s.label.name == "click"
        assert s.features[1].encoding == "id"
        assert s.vocab_sizes() == [101, 51, 11, 3]
        assert s.n_maskable == 2
        assert s.positions(Role.USER) == [0]

    def test_text_roundtrip_and_hash(self):
        s = parse_schema(SCHEMA_TEXT)
        again = parse_schema(s.to_text())
        assert again == s
        assert again.hash() == s.hash()
        other = parse_schema(SCHEMA_TEXT.replace("buckets=10", "buckets=11"))
        assert other.hash() != s.hash()

    @pytest.mark.parametrize("text", [
        "field a role=user buckets=3\n",                                      # no label
        "field a role=user buckets=3\nfield y role=label buckets=5\n",         # label vocab
        "field a role=user buckets=0\nfield y role=label buckets=2\n",         # vocab < 2
        "field a role=boss buckets=3\nfield y role=label buckets=2\n",         # bad role
        "field a role=user\nfield y role=label buckets=2\n",                   # missing buckets
        "feld a role=user buckets=3\nfield y role=label buckets=2\n",          # bad keyword
        "field a role=user buckets=3 colour=red\nfield y role=label buckets=2\n",
        "field a role=user buckets=3\nfield a role=item buckets=3\nfield y role=label buckets=2\n",
    ])
    def test_invalid(self, text):
        with pytest.raises(ConfigError):
            parse_schema(text)

    def test_two_labels_rejected(self):
        with pytest.raises(ConfigError):
            FeatureSchema([FieldSpec("a", Role.LABEL, 3), FieldSpec("b", Role.LABEL, 3),
                           FieldSpec("c", Role.USER, 4)])

    def test_criteo_layout(self):
        s = criteo_schema()
        assert s.n_features == 39
        assert s.count(Role.USER) == 13 and s.count(Role.ITEM) == 26
