import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from clmpt.checks import enumerate_answers, random_kg, random_query_graph
from clmpt.kg import KnowledgeGraph
from clmpt.kg import Vocabulary
from clmpt.query import EPFO_SHAPES, SHAPES, TRAIN_SHAPES, instantiate_shape, parse_query, shape_arity
from clmpt.symbolic import (
    SamplingError,
    answer_conjunctive,
    answer_query,
    instance_stats,
    propagate,
    sample_instances,
)
from clmpt.synthetic import latent_rotation_kg


def vocab(*names):
    return Vocabulary.from_names(names)


class TestAnswer:
    def test_single_edge(self):
        kg = KnowledgeGraph(2, 1, [(0, 0, 1)])
        q = parse_query("r(a, y)", vocab("a", "b"), vocab("r"))
        assert answer_query(kg, q) == {1}

    def test_negation_is_complement(self):
        kg = KnowledgeGraph(3, 1, [(0, 0, 1)])
        q = parse_query("!r(a, y)", vocab("a", "b", "c"), vocab("r"))
        assert answer_query(kg, q) == {0, 2}

    def test_negated_intersection(self):
        kg = KnowledgeGraph(3, 1, [(0, 0, 1), (0, 0, 2), (1, 0, 2)])
        cq = instantiate_shape("2in", [0, 1], [0, 0]).disjuncts[0]
        # r(a, y) gives {b, c}; !r(b, y) removes c
        assert answer_conjunctive(kg, cq) == {1}
        assert enumerate_answers(kg, cq) == {1}

    def test_chain_intersection(self, chain):
        ents = vocab("a", "m", "b", "z", "spare")
        q = parse_query("r1(a, x1) & r2(b, x1) & r3(x1, y)", ents, vocab("r1", "r2", "r3"))
        assert answer_query(chain, q) == {3}

    def test_union_and_duplicates(self, chain):
        ents = vocab("a", "m", "b", "z", "spare")
        rels = vocab("r1", "r2", "r3")
        q = parse_query("r1(a, y) | r3(m, y)", ents, rels)
        assert answer_query(chain, q) == {1, 3}
        q = parse_query("r1(a, y) | r1(b, y)", ents, rels)
        assert answer_query(chain, q) == {1}
        q = parse_query("r1(a, y) | r1(a, y)", ents, rels)
        assert answer_query(chain, q) == {1}

    def test_propagation_is_sound(self, ring):
        cq = instantiate_shape("pi", [0, 5], [0, 1, 2]).disjuncts[0]
        answers = answer_conjunctive(ring, cq)
        domains = propagate(ring, cq)
        assert answers <= set(np.flatnonzero(domains[cq.free_node]).tolist())


@given(st.integers(0, 2**32 - 1))
def test_matches_enumeration(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, 20))
    kg = random_kg(rng, n, 2, float(rng.uniform(0.05, 0.3)))
    cq = random_query_graph(rng, n, 2)
    assert answer_conjunctive(kg, cq) == enumerate_answers(kg, cq)


@given(st.integers(0, 2**32 - 1), st.sampled_from(EPFO_SHAPES))
def test_epfo_monotone(seed, shape):
    rng = np.random.default_rng(seed)
    full = random_kg(rng, 12, 3, 0.15)
    observed = full.with_triples(t for t in full.triples if rng.random() < 0.7)
    n_c, n_r = shape_arity(shape)
    q = instantiate_shape(shape, list(rng.choice(12, n_c, replace=False)), list(rng.integers(0, 3, n_r)))
    assert answer_query(observed, q) <= answer_query(full, q)


@pytest.fixture(scope="module")
def graphs():
    full = latent_rotation_kg(60, 4, seed=3)
    keep = [t for i, t in enumerate(sorted(full.triples)) if i % 10]
    return full, full.with_triples(keep)


class TestSampling:
    @pytest.mark.parametrize("shape", SHAPES)
    def test_instances_are_consistent(self, graphs, shape):
        full, observed = graphs
        insts = sample_instances(full, observed, shape, 4, rng_seed=11)
        assert len(insts) == 4
        for inst in insts:
            assert inst.shape == shape
            assert inst.hard_answers and not (inst.easy_answers & inst.hard_answers)
            assert inst.easy_answers == answer_query(observed, inst.query)
            assert inst.hard_answers == answer_query(full, inst.query) - inst.easy_answers

    def test_deterministic(self, graphs):
        full, observed = graphs
        a = sample_instances(full, observed, "ip", 5, rng_seed=2)
        b = sample_instances(full, observed, "ip", 5, rng_seed=2)
        assert a == b

    def test_observed_equals_full_exhausts(self, graphs):
        full, _ = graphs
        with pytest.raises(SamplingError, match="2p"):
            sample_instances(full, full, "2p", 1, rng_seed=0)

    def test_single_missing_edge(self):
        full = KnowledgeGraph(2, 1, [(0, 0, 1)])
        observed = full.with_triples([])
        (inst,) = sample_instances(full, observed, "1p", 1, rng_seed=0)
        assert inst.easy_answers == frozenset() and inst.hard_answers == {1}

    def test_training_mode(self, graphs):
        _, observed = graphs
        for shape in TRAIN_SHAPES:
            for inst in sample_instances(observed, observed, shape, 3, rng_seed=5, require_hard=False):
                assert inst.easy_answers and not inst.hard_answers

    def test_requires_subgraph(self, graphs):
        full, observed = graphs
        with pytest.raises(SamplingError):
            sample_instances(observed, full, "1p", 1, rng_seed=0)

    def test_stats(self, graphs):
        full, observed = graphs
        insts = sample_instances(full, observed, "1p", 3, 0) + sample_instances(full, observed, "2i", 2, 0)
        stats = instance_stats(insts)
        assert stats["total"] == 5
        assert stats["shapes"]["1p"]["count"] == 3 and stats["shapes"]["2i"]["count"] == 2
