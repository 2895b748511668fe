import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from clmpt.kg import (
    Direction,
    EmptyGraphError,
    KnowledgeGraph,
    SplitConfigError,
    TripleParseError,
    Vocabulary,
    load_triples,
    neighbors,
    split_edges,
    write_triples,
)

triple_lists = st.lists(
    st.tuples(st.integers(0, 7), st.integers(0, 2), st.integers(0, 7)), min_size=0, max_size=40
)


class TestLoadTriples:
    def test_counts(self, tmp_path):
        p = tmp_path / "t.tsv"
        p.write_text("a\tr\tb\na\tr\tc\n")
        kg, ents, rels = load_triples(p)
        assert (kg.entity_count, kg.relation_count, len(kg)) == (3, 1, 2)
        assert ents.id_to_name == ["a", "b", "c"]

    def test_duplicates_collapse(self, tmp_path):
        p = tmp_path / "t.tsv"
        p.write_text("a\tr\tb\na\tr\tb\n")
        kg, _, _ = load_triples(p)
        assert len(kg) == 1

    def test_bad_arity_reports_line(self, tmp_path):
        p = tmp_path / "t.tsv"
        p.write_text("a\tr\n")
        with pytest.raises(TripleParseError) as exc:
            load_triples(p)
        assert exc.value.lineno == 1

    def test_comments_and_blanks(self, tmp_path):
        p = tmp_path / "t.tsv"
        p.write_text("# header\n\na\tr\tb\n")
        kg, _, _ = load_triples(p)
        assert len(kg) == 1

    def test_empty_file(self, tmp_path):
        p = tmp_path / "t.tsv"
        p.write_text("# nothing\n")
        with pytest.raises(EmptyGraphError):
            load_triples(p)

    def test_round_trip(self, tmp_path, ring):
        ents = Vocabulary.from_names(f"n{i}" for i in range(ring.entity_count))
        rels = Vocabulary.from_names(["s1", "s2", "s3"])
        write_triples(tmp_path / "out.tsv", ring, ents, rels)
        kg, e2, r2 = load_triples(tmp_path / "out.tsv")
        back = {(ents[e2.name(h)], rels[r2.name(r)], ents[e2.name(t)]) for h, r, t in kg.triples}
        assert back == set(ring.triples)


def test_vocabulary_digest_tracks_order():
    a = Vocabulary.from_names(["x", "y"])
    b = Vocabulary.from_names(["y", "x"])
    assert a.digest() != b.digest()
    assert a.digest() == Vocabulary.from_names(["x", "y"]).digest()


def test_out_of_range_triple():
    with pytest.raises(IndexError):
        KnowledgeGraph(2, 1, [(0, 0, 2)])


class TestNeighbors:
    def test_examples(self):
        kg = KnowledgeGraph(2, 1, [(0, 0, 1)])
        assert neighbors(kg, 0, 0, Direction.HEAD_TO_TAIL) == {1}
        assert neighbors(kg, 1, 0, "tail-to-head") == {0}
        assert neighbors(kg, 1, 0, "head-to-tail") == frozenset()

    def test_range(self):
        kg = KnowledgeGraph(2, 1, [(0, 0, 1)])
        with pytest.raises(IndexError):
            neighbors(kg, 2, 0)
        with pytest.raises(IndexError):
            neighbors(kg, 0, 1)

    @given(triple_lists)
    def test_both_directions(self, triples):
        kg = KnowledgeGraph(8, 3, triples)
        for h, r, t in kg.triples:
            assert t in neighbors(kg, h, r, "head-to-tail")
            assert h in neighbors(kg, t, r, "tail-to-head")

    @given(triple_lists)
    def test_indices_reconstruct_triples(self, triples):
        kg = KnowledgeGraph(8, 3, triples)
        fwd = {(h, r, t) for (h, r), ts in kg.fwd_index.items() for t in ts}
        rev = {(h, r, t) for (t, r), hs in kg.rev_index.items() for h in hs}
        assert fwd == rev == set(kg.triples)
        assert all(list(v) == sorted(v) for v in kg.fwd_index.values())


class TestSplit:
    def test_sizes(self):
        kg = KnowledgeGraph(11, 1, [(i, 0, i + 1) for i in range(10)])
        parts = split_edges(kg, (0.8, 0.1, 0.1), seed=3)
        assert [len(p) for p in parts] == [8, 1, 1]

    def test_deterministic(self, ring):
        assert split_edges(ring, (0.8, 0.1, 0.1), 5) == split_edges(ring, (0.8, 0.1, 0.1), 5)

    @pytest.mark.parametrize("ratios", [(0.5, 0.5, 0.5), (1.0, 0.0, 0.0), (0.9, -0.05, 0.15), (0.5, 0.5)])
    def test_bad_ratios(self, ring, ratios):
        with pytest.raises(SplitConfigError):
            split_edges(ring, ratios, 0)

    @given(triple_lists.filter(lambda x: len(set(x)) >= 3), st.integers(0, 1000))
    def test_partition_and_coverage(self, triples, seed):
        kg = KnowledgeGraph(8, 3, triples)
        train, valid, test = split_edges(kg, (0.6, 0.2, 0.2), seed)
        assert len(train) + len(valid) + len(test) == len(kg)
        assert not (train.triples & valid.triples or train.triples & test.triples or valid.triples & test.triples)
        assert train.union(valid, test) == kg
        seen = train.relations_used()
        assert valid.relations_used() <= seen and test.relations_used() <= seen

    def test_coverage_swap_keeps_sizes(self):
        # relation 1 occurs once; whichever part draws it must hand it to train
        triples = [(i, 0, i + 1) for i in range(9)] + [(0, 1, 5)]
        kg = KnowledgeGraph(10, 2, triples)
        for seed in range(20):
            train, valid, test = split_edges(kg, (0.8, 0.1, 0.1), seed)
            assert (0, 1, 5) in train.triples
            assert (len(train), len(valid), len(test)) == (8, 1, 1)


def test_csr_matches_index(ring):
    fwd, rev = ring.csr
    for r in range(ring.relation_count):
        indptr, indices = fwd[r]
        for h in range(ring.entity_count):
            assert tuple(indices[indptr[h]:indptr[h + 1]]) == ring.fwd_index.get((h, r), ())
        indptr, indices = rev[r]
        for t in range(ring.entity_count):
            assert tuple(indices[indptr[t]:indptr[t + 1]]) == ring.rev_index.get((t, r), ())
    assert np.array_equal(ring.sorted_triples(), np.array(sorted(ring.triples)))
