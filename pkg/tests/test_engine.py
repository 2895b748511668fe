import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from clmpt import autodiff as ad
from clmpt.checks import (check_closed_form, check_conditional_contract, check_end_to_end_gradient,
                          check_negation_and_permutation, tiny_model)
from clmpt.engine import (CLMPT, HEAD_TO_TAIL, TAIL_TO_HEAD, ForwardTrace, ModelConfig, TrainConfig, TrainingError,
                          TransformerEncoder, encode_message, expected_message_count, nce_loss, node_update, train)
from clmpt.predictor import ComplexEmbeddingTable, rank_answers
from clmpt.query import (SHAPES, TRAIN_SHAPES, AtomEdge, ConjunctiveQueryGraph, EFO1Query, QueryInstance,
                         instantiate_shape)


def c(*zs):
    return np.array([p for z in zs for p in (complex(z).real, complex(z).imag)])


class TestEncodeMessage:
    def test_examples(self):
        assert encode_message(c(1j), c(1j), TAIL_TO_HEAD, 0).tolist() == [1.0, 0.0]
        assert encode_message(c(1j), c(1j), TAIL_TO_HEAD, 1).tolist() == [-1.0, -0.0]
        h = c(0.3 - 2j, 1.5 + 0.25j)
        assert np.array_equal(encode_message(h, c(1, 1), HEAD_TO_TAIL, 0), h)

    def test_errors(self):
        with pytest.raises(ad.ShapeError):
            encode_message(c(1, 2), c(1), HEAD_TO_TAIL, 0)
        with pytest.raises(ValueError):
            encode_message(c(1), c(1), "sideways", 0)

    @given(st.integers(0, 10_000))
    def test_directions_are_adjoint(self, seed):
        # the h->t message of the t->h message rotates back to the start for unit-modulus relations
        rng = np.random.default_rng(seed)
        t = rng.normal(size=6)
        angles = rng.uniform(0, 2 * np.pi, 3)
        r = np.stack([np.cos(angles), np.sin(angles)], axis=1).reshape(-1)
        back = encode_message(encode_message(t, r, TAIL_TO_HEAD, 0), r, HEAD_TO_TAIL, 0)
        assert np.allclose(back, t, atol=1e-12)

    def test_suites(self):
        for passed, detail in (check_closed_form(), check_negation_and_permutation(cases=200)):
            assert passed, detail


def zeroed_encoder(width=4, heads=2):
    enc = TransformerEncoder(width, layers=2, heads=heads, ffn_hidden=8, seed=3)
    for name, p in enc.params.items():
        if name.endswith(("attn.w_out", "attn.b_out", "ffn.w2", "ffn.b2")):
            p.data[...] = 0.0
    return enc


class TestNodeUpdate:
    def test_residual_path_only(self):
        msg, node = np.array([[1.0, -2.0, 0.5, 3.0]]), np.array([0.0, 4.0, -1.0, 1.0])
        out = node_update(msg, node, zeroed_encoder())
        assert np.allclose(out.data, (msg[0] + node) / 2, atol=1e-15)

    def test_empty_messages(self):
        enc = TransformerEncoder(4, heads=2, ffn_hidden=8)
        with pytest.raises(ad.ContractError):
            node_update(np.zeros((0, 4)), np.zeros(4), enc)

    def test_sum_differs_from_mean(self):
        enc = TransformerEncoder(4, heads=2, ffn_hidden=8, seed=1)
        rng = np.random.default_rng(0)
        msgs, node = rng.normal(size=(2, 4)), rng.normal(size=4)
        doubled = np.concatenate([msgs, msgs])
        mean_a = node_update(msgs, node, enc, "mean").data
        sum_a, sum_b = node_update(msgs, node, enc, "sum").data, node_update(doubled, node, enc, "sum").data
        assert not np.allclose(sum_a, mean_a)
        assert not np.allclose(sum_a, sum_b)
        assert np.allclose(sum_a, 3 * mean_a, atol=1e-12)

    @pytest.mark.parametrize("pooling", ["mean", "sum", "max"])
    def test_permutation_bitwise(self, pooling):
        enc = TransformerEncoder(8, heads=2, ffn_hidden=16, seed=2)
        rng = np.random.default_rng(5)
        msgs, node = rng.normal(size=(4, 8)), rng.normal(size=8)
        ref = node_update(msgs, node, enc, pooling).data
        for _ in range(10):
            assert np.array_equal(node_update(msgs[rng.permutation(4)], node, enc, pooling).data, ref)

    def test_batch_matches_single(self):
        enc = TransformerEncoder(8, heads=2, ffn_hidden=16, seed=2)
        rng = np.random.default_rng(6)
        msgs, nodes = rng.normal(size=(3, 2, 8)), rng.normal(size=(3, 8))
        batch = node_update(msgs, nodes, enc).data
        for i in range(3):
            assert np.allclose(batch[i], node_update(msgs[i], nodes[i], enc).data, atol=1e-12)

    def test_unknown_pooling(self):
        with pytest.raises(ValueError):
            node_update(np.ones((1, 4)), np.ones(4), TransformerEncoder(4, heads=2), "median")


class TestForward:
    def test_1p_is_one_node_update(self):
        model = tiny_model()
        cq = instantiate_shape("1p", [3], [1]).disjuncts[0]
        msg = encode_message(model.entity_emb.data[3], model.relation_emb.data[1], HEAD_TO_TAIL, 0)
        expected = node_update(msg[None], model.var_y.data, model.encoder, "mean").data
        trace = ForwardTrace()
        out = model.forward([cq], trace=trace).data[0]
        assert trace.depth == 1 and trace.message_count == 1
        assert np.allclose(out, expected, atol=1e-12)

    def test_constants_unchanged(self):
        model = tiny_model()
        for shape in TRAIN_SHAPES:
            cq = instantiate_shape(shape, *_slots(shape)).disjuncts[0]
            trace = ForwardTrace()
            model.forward([cq], trace=trace)
            for n in cq.constant_nodes():
                assert np.array_equal(trace.initial_states[n], trace.final_states[n])
                assert trace.received[n] == 0

    def test_edge_order_irrelevant(self):
        model = tiny_model()
        cq = instantiate_shape("2i", [1, 4], [0, 2]).disjuncts[0]
        swapped = ConjunctiveQueryGraph(cq.nodes, tuple(reversed(cq.edges)))
        a, b = model.forward([cq]).data, model.forward([swapped]).data
        assert np.allclose(a, b, atol=1e-9)

    @pytest.mark.parametrize("conditional", [True, False])
    def test_message_counts(self, conditional):
        model = tiny_model(conditional_passing=conditional)
        for shape in SHAPES:
            for cq in instantiate_shape(shape, *_slots(shape)).disjuncts:
                trace = ForwardTrace()
                model.forward([cq], trace=trace)
                assert trace.message_count == expected_message_count(cq, conditional)

    def test_conditional_suite(self):
        passed, detail = check_conditional_contract()
        assert passed, detail

    def test_layer_sharing(self):
        model = tiny_model()
        trace = ForwardTrace()
        model.forward([instantiate_shape("3p", [0], [0, 1, 2]).disjuncts[0]], trace=trace)
        assert len(trace.encoder_ids) == 3 and len(set(trace.encoder_ids)) == 1

    def test_batch_matches_single(self):
        model = tiny_model()
        cqs = [instantiate_shape("pi", [a, b], [0, 1, 2]).disjuncts[0] for a, b in [(0, 1), (5, 2), (7, 9)]]
        batch = model.forward(cqs).data
        for i, cq in enumerate(cqs):
            assert np.allclose(batch[i], model.forward([cq]).data[0], atol=1e-12)

    def test_mixed_topologies_rejected(self):
        model = tiny_model()
        with pytest.raises(Exception, match="topology"):
            model.forward([instantiate_shape("1p", [0], [0]).disjuncts[0],
                           instantiate_shape("2p", [0], [0, 1]).disjuncts[0]])

    def test_end_to_end_gradient(self):
        passed, detail = check_end_to_end_gradient()
        assert passed, detail


def _slots(shape):
    from clmpt.query import shape_arity

    n_const, n_rel = shape_arity(shape)
    return list(range(1, n_const + 1)), [i % 3 for i in range(n_rel)]


class TestNCE:
    def test_symmetric_is_log2(self):
        v = np.array([1.0, 0.0])
        assert nce_loss(v, v, v[None], 0.05).item() == pytest.approx(math.log(2), abs=1e-15)

    def test_separated(self):
        loss = nce_loss(np.array([1.0, 0.0]), np.array([2.0, 0.0]), np.array([[-1.0, 0.0]]), 0.05).item()
        assert loss == pytest.approx(math.log1p(math.exp(-40)), rel=1e-12)
        assert loss == pytest.approx(4.248354255291589e-18, rel=1e-12)

    def test_monotone_in_positive(self):
        pred, neg = np.array([1.0, 0.0]), np.array([[0.0, 1.0], [-0.5, 0.5]])
        angles = np.linspace(np.pi, 0, 25)
        losses = [nce_loss(pred, np.array([np.cos(a), np.sin(a)]), neg, 0.1).item() for a in angles]
        assert all(a > b for a, b in zip(losses, losses[1:]))

    def test_errors(self):
        v = np.array([1.0, 0.0])
        with pytest.raises(ad.ZeroNormError):
            nce_loss(np.zeros(2), v, v[None], 0.05)
        with pytest.raises(ValueError):
            nce_loss(v, v, v[None], 0.0)
        with pytest.raises(ValueError):
            nce_loss(v, v, np.zeros((0, 2)), 0.05)


def toy_instances(shapes=("1p", "2i"), n=6):
    out = []
    for i in range(n):
        for shape in shapes:
            q = instantiate_shape(shape, [(x + i) % 12 for x in _slots(shape)[0]], _slots(shape)[1])
            out.append(QueryInstance(q, frozenset({(i * 5 + 3) % 12}), frozenset()))
    return out


class TestTraining:
    def test_loss_decreases_on_fixed_batch(self):
        model = tiny_model()
        insts = toy_instances()
        res = train(insts, model, TrainConfig(steps=50, batch=len(insts), seed=0))
        assert res.losses[-1] < res.losses[0]

    def test_frozen_tables(self):
        model = tiny_model(predictor_trainable=False)
        ent, rel = model.entity_emb.data.copy(), model.relation_emb.data.copy()
        enc = model.encoder.params["enc.0.ffn.w1"].data.copy()
        train(toy_instances(), model, TrainConfig(steps=5, batch=4))
        assert np.array_equal(model.entity_emb.data, ent) and np.array_equal(model.relation_emb.data, rel)
        assert not np.array_equal(model.encoder.params["enc.0.ffn.w1"].data, enc)

    def test_trainable_tables_move(self):
        model = tiny_model(predictor_trainable=True)
        ent = model.entity_emb.data.copy()
        train(toy_instances(), model, TrainConfig(steps=5, batch=4))
        assert not np.array_equal(model.entity_emb.data, ent)

    def test_deterministic(self):
        runs = []
        for _ in range(2):
            model = tiny_model()
            train(toy_instances(), model, TrainConfig(steps=5, batch=4, seed=11))
            runs.append(model.arrays())
        assert all(np.array_equal(runs[0][k], runs[1][k]) for k in runs[0])

    def test_dropout_knob(self):
        insts = toy_instances()
        plain, dropped = tiny_model(), tiny_model(dropout=0.3)
        a = train(insts, plain, TrainConfig(steps=3, batch=4)).losses
        b = train(insts, dropped, TrainConfig(steps=3, batch=4)).losses
        assert a[0] != b[0]
        # dropout only acts during training; inference stays deterministic
        cq = instantiate_shape("1p", [0], [0]).disjuncts[0]
        assert np.array_equal(dropped.forward([cq]).data, dropped.forward([cq]).data)

    def test_rejects_unions_and_answerless(self):
        model = tiny_model()
        union = QueryInstance(instantiate_shape("2u", [1, 2], [0, 1]), frozenset({0}), frozenset())
        with pytest.raises(TrainingError):
            train([union], model, TrainConfig(steps=1))
        empty = QueryInstance(instantiate_shape("1p", [1], [0]), frozenset(), frozenset())
        with pytest.raises(TrainingError):
            train([empty], model, TrainConfig(steps=1))

    def test_non_finite_loss_names_shape(self):
        model = tiny_model()
        model.entity_emb.data[:] = np.nan
        with pytest.raises(TrainingError, match="1p"):
            train(toy_instances(("1p",)), model, TrainConfig(steps=1, batch=2))


class TestAnswer:
    def test_single_disjunct_matches_rank_answers(self):
        model = tiny_model()
        q = instantiate_shape("2p", [4], [0, 1])
        order, _ = model.answer(q)
        z = model.forward([q.disjuncts[0]]).data[0]
        assert np.array_equal(order, rank_answers(z, model.table))

    def test_scale_invariance(self):
        model = tiny_model()
        z = model.forward([instantiate_shape("2p", [4], [0, 1]).disjuncts[0]]).data[0]
        for alpha in (1e-3, 0.5, 7.0, 1e4):
            assert np.array_equal(rank_answers(z, model.table), rank_answers(alpha * z, model.table))

    def test_duplicate_disjunct_idempotent(self):
        model = tiny_model()
        q = instantiate_shape("3p", [2], [0, 1, 2])
        doubled = EFO1Query(q.disjuncts * 2)
        # batched matmuls may round differently from single rows, hence the tolerance
        assert np.allclose(model.answer(q)[1], model.answer(doubled)[1], rtol=0, atol=1e-12)

    def test_union_is_max_of_disjuncts(self):
        model = tiny_model()
        q = instantiate_shape("2u", [1, 6], [0, 2])
        per = [model.answer(EFO1Query((cq,)))[1] for cq in q.disjuncts]
        assert np.allclose(model.answer(q)[1], np.maximum(*per), rtol=0, atol=1e-12)


class TestPersistence:
    def test_round_trip(self, tmp_path):
        model = tiny_model(pooling="max", seed=4)
        train(toy_instances(), model, TrainConfig(steps=2, batch=4))
        model.save(tmp_path / "m.ckpt", {"note": "x"})
        back, meta = CLMPT.load(tmp_path / "m.ckpt")
        assert meta["note"] == "x" and back.config == model.config
        q = instantiate_shape("pin", [1, 2], [0, 1, 2])
        assert np.array_equal(back.answer(q)[1], model.answer(q)[1])
        assert (tmp_path / "m.ckpt.json").exists()

    def test_config_validation(self):
        table = ComplexEmbeddingTable.initialize(5, 1, 4)
        for bad in ({"heads": 3}, {"temperature": 0.0}, {"negatives": 0}, {"pooling": "median"}):
            with pytest.raises(Exception):
                CLMPT(table, ModelConfig(**bad))
