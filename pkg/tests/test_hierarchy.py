import itertools
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hiertag.errors import DuplicateFineTag, DuplicateName, EmptyGroup, LengthMismatch, MalformedDocument
from hiertag.hierarchy import (
    Hierarchy,
    LabelState,
    induce_coarse_labels,
    induce_coarse_matrix,
    parse_hierarchy,
)

P, N, U = LabelState.POSITIVE, LabelState.NEGATIVE, LabelState.UNOBSERVED


class TestParse:
    def test_woodwind(self):
        h = parse_hierarchy('{"woodwind": ["flute", "clarinet", "saxophone"]}')
        assert h.coarse_tags == ("woodwind",)
        assert h.fine_tags == ("flute", "clarinet", "saxophone")
        assert h.parent == (0, 0, 0)
        assert h.groups == ((0, 1, 2),)

    def test_minimal(self):
        h = parse_hierarchy('{"a": ["x"]}')
        assert (h.n_coarse, h.n_fine) == (1, 1)

    def test_document_order(self):
        h = parse_hierarchy('{"z": ["q", "b"], "a": ["c"]}')
        assert h.coarse_tags == ("z", "a")
        assert h.fine_tags == ("q", "b", "c")
        assert h.parent == (0, 0, 1)

    def test_fine_in_two_groups(self):
        with pytest.raises(DuplicateFineTag):
            parse_hierarchy('{"a": ["x"], "b": ["x"]}')

    def test_empty_group(self):
        with pytest.raises(EmptyGroup):
            parse_hierarchy('{"a": ["x"], "b": []}')

    @pytest.mark.parametrize("doc", [
        '{"a": ["a"]}',            # fine name equals coarse name
        '{"a": ["x"], "a": ["y"]}',  # repeated coarse key
        '{"a": ["x", "x"]}',
    ])
    def test_duplicate_names(self, doc):
        with pytest.raises(DuplicateName):
            parse_hierarchy(doc)

    @pytest.mark.parametrize("doc", [
        "not json", "[]", "{}", '{"a": "x"}', '{"a": [1]}', '{"a": {"b": ["x"]}}', '{"a": [["x"]]}',
    ])
    def test_malformed(self, doc):
        with pytest.raises(MalformedDocument):
            parse_hierarchy(doc)

    def test_round_trip_and_fingerprint(self):
        doc = {"woodwind": ["flute", "clarinet"], "keys": ["piano"]}
        h = parse_hierarchy(json.dumps(doc))
        assert parse_hierarchy(h.to_json()) == h
        assert h.fingerprint() == parse_hierarchy(h.to_json()).fingerprint()
        swapped = parse_hierarchy(json.dumps({"keys": ["piano"], "woodwind": ["flute", "clarinet"]}))
        assert swapped.fingerprint() != h.fingerprint()

    def test_shipped_configs_parse(self):
        from pathlib import Path

        for path in (Path(__file__).parent.parent / "configs").glob("*.json"):
            parse_hierarchy(path.read_text())


class TestInduce:
    def test_examples(self):
        h = parse_hierarchy('{"g": ["a", "b", "c"]}')
        assert induce_coarse_labels([P, N, U], h) == [P]
        assert induce_coarse_labels([N, N, N], h) == [N]
        h2 = parse_hierarchy('{"g": ["a", "b"]}')
        assert induce_coarse_labels([N, U], h2) == [U]

    def test_length_mismatch(self, small_h):
        with pytest.raises(LengthMismatch):
            induce_coarse_labels([P, N], small_h)

    @pytest.mark.parametrize("k", range(1, 7))
    def test_exhaustive_against_rule(self, k):
        h = Hierarchy.from_groups({"g": [f"f{i}" for i in range(k)]})
        states = np.array(list(itertools.product([P, N, U], repeat=k)), dtype=np.int8)
        got = induce_coarse_matrix(states, h)[:, 0]
        for row, c in zip(states, got):
            if (row == P).any():
                assert c == P
            elif (row == N).all():
                assert c == N
            else:
                assert c == U
            if (row != U).all():
                # fully observed: coarse positive is exactly the OR
                assert (c == P) == bool((row == P).any())

    @given(st.lists(st.sampled_from([P, N, U]), min_size=1, max_size=6), st.data())
    def test_monotone_and_permutation_invariant(self, states, data):
        h = Hierarchy.from_groups({"g": [f"f{i}" for i in range(len(states))]})
        rank = {N: 0, U: 0, P: 1}
        base = induce_coarse_labels(states, h)[0]
        i = data.draw(st.integers(0, len(states) - 1))
        upgraded = list(states)
        upgraded[i] = P
        assert induce_coarse_labels(upgraded, h)[0] == P
        assert rank[induce_coarse_labels(upgraded, h)[0]] >= rank[base]
        perm = data.draw(st.permutations(states))
        assert induce_coarse_labels(perm, h)[0] == base
