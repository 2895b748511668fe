"""Brute-force reference implementations and the invariant suites behind ``clmpt selftest``."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .engine import (
    CLMPT,
    HEAD_TO_TAIL,
    TAIL_TO_HEAD,
    ForwardTrace,
    ModelConfig,
    TransformerEncoder,
    encode_message,
    expected_message_count,
    nce_loss,
    node_update,
)
from .evaluation import filtered_rank
from .kg import KnowledgeGraph
from .predictor import ComplexEmbeddingTable
from .query import (
    CONSTANT,
    EXISTENTIAL,
    FREE,
    SHAPES,
    AtomEdge,
    ConjunctiveQueryGraph,
    TermNode,
    instantiate_shape,
    shape_arity,
)
from .symbolic import answer_conjunctive

# ----------------------------------------------------------------------------
# Oracles


def naive_filtered_rank(scores, target: int, other_answers=()) -> int:
    """Direct recount: one pass over all entities with the id tie rule."""
    others = set(int(a) for a in other_answers)
    st = scores[target]
    rank = 1
    for e, s in enumerate(scores):
        if e == target or e in others:
            continue
        if s > st or (s == st and e < target):
            rank += 1
    return rank


def enumerate_answers(kg: KnowledgeGraph, cq: ConjunctiveQueryGraph) -> frozenset[int]:
    """Answers by evaluating every atom over the full grid of variable assignments."""
    n = kg.entity_count
    variables = cq.variable_nodes()
    axis = {v: i for i, v in enumerate(variables)}
    adj = np.zeros((kg.relation_count, n, n), dtype=bool)
    for h, r, t in kg.triples:
        adj[r, h, t] = True
    grid = np.ones((n,) * len(variables), dtype=bool)
    for e in cq.edges:
        rel = ~adj[e.relation] if e.negated else adj[e.relation]
        head, tail = cq.nodes[e.head], cq.nodes[e.tail]
        if head.kind == CONSTANT:
            vec, var = rel[head.entity, :], e.tail
        elif tail.kind == CONSTANT:
            vec, var = rel[:, tail.entity], e.head
        else:
            shape = [1] * len(variables)
            a, b = axis[e.head], axis[e.tail]
            mat = rel if a < b else rel.T
            shape[min(a, b)] = shape[max(a, b)] = n
            grid &= mat.reshape(shape)
            continue
        shape = [1] * len(variables)
        shape[axis[var]] = n
        grid &= vec.reshape(shape)
    free_axis = axis[cq.free_node]
    others = tuple(i for i in range(len(variables)) if i != free_axis)
    holds = grid.any(axis=others) if others else grid
    return frozenset(int(i) for i in np.flatnonzero(holds))


def random_kg(rng, entities: int, relations: int, density: float) -> KnowledgeGraph:
    mask = rng.random((entities, relations, entities)) < density
    h, r, t = np.nonzero(mask)
    return KnowledgeGraph(entities, relations, zip(h.tolist(), r.tolist(), t.tolist()))


def random_query_graph(rng, entities: int, relations: int, max_variables: int = 3,
                       max_constants: int = 2, negation_rate: float = 0.25) -> ConjunctiveQueryGraph:
    """A random connected conjunctive query graph (free node first, then existentials, then constants)."""
    n_var = int(rng.integers(1, max_variables + 1))
    n_const = int(rng.integers(1, max_constants + 1))
    consts = rng.choice(entities, size=n_const, replace=False)
    nodes = [TermNode(0, FREE)]
    nodes += [TermNode(i, EXISTENTIAL) for i in range(1, n_var)]
    nodes += [TermNode(n_var + j, CONSTANT, int(c)) for j, c in enumerate(consts)]

    def edge(a, b):
        head, tail = (a, b) if rng.random() < 0.5 else (b, a)
        return AtomEdge(int(rng.integers(relations)), bool(rng.random() < negation_rate), head, tail)

    edges = []
    for i in range(1, len(nodes)):
        # Constants attach to a variable; variables to anything earlier (all variables).
        edges.append(edge(i, int(rng.integers(min(i, n_var)))))
    for _ in range(int(rng.integers(0, 3))):
        a = int(rng.integers(n_var))
        b = int(rng.integers(len(nodes)))
        if a != b:
            edges.append(edge(a, b))
    return ConjunctiveQueryGraph(tuple(nodes), tuple(edges))


def random_unit(rng, width: int) -> np.ndarray:
    v = rng.normal(size=width)
    return v / np.linalg.norm(v)


# ----------------------------------------------------------------------------
# Invariant suites


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float


def _timed(name, fn) -> CheckResult:
    start = time.perf_counter()
    try:
        passed, detail = fn()
    except Exception as exc:  # a crashing check is a failing check
        passed, detail = False, f"{type(exc).__name__}: {exc}"
    return CheckResult(name, bool(passed), detail, time.perf_counter() - start)


def check_primitive_gradients(seed: int = 0, tol: float = 1e-4):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(3, 4))
    w = rng.normal(size=(4, 2))
    pos = rng.uniform(0.5, 2.0, size=(3, 4))
    cases = {
        "add": (lambda x, y: ad.sum(ad.add(x, y) * y), [a, b]),
        "sub": (lambda x, y: ad.sum(ad.sub(x, y) * x), [a, b]),
        "mul": (lambda x, y: ad.sum(ad.mul(x, y)), [a, b]),
        "scale": (lambda x: ad.sum(ad.scale(x, 2.5) * x), [a]),
        "matmul": (lambda x, y: ad.sum(ad.matmul(x, y) * ad.matmul(x, y)), [a, w]),
        "complex_hadamard": (lambda x, y, z: ad.sum(ad.complex_hadamard(x, y) * z), [a, b, pos]),
        "conjugate": (lambda x, y: ad.sum(ad.conjugate(x) * y), [a, b]),
        "exp": (lambda x: ad.sum(ad.exp(x)), [a]),
        "log": (lambda x: ad.sum(ad.log(x)), [pos]),
        "sigmoid": (lambda x: ad.sum(ad.sigmoid(x) * x), [a]),
        "softmax": (lambda x, y: ad.sum(ad.softmax(x) * y), [a, b]),
        "logsumexp": (lambda x: ad.sum(ad.logsumexp(x, axis=-1)), [a]),
        "layer_norm": (lambda x, g, c, y: ad.sum(ad.layer_norm(x, g, c) * y), [a, b[0], b[1], b]),
        "mean": (lambda x, y: ad.sum(ad.mean(x * y, axis=0)), [a, b]),
        "sum": (lambda x: ad.sum(ad.sum(x * x, axis=1)), [a]),
        "max": (lambda x: ad.sum(ad.max(x * x, axis=1)), [a]),
        "l2_norm": (lambda x: ad.sum(ad.l2_norm(x)), [a]),
        "cube_norm_penalty": (lambda x: ad.sum(ad.cube_norm_penalty(x)), [a]),
        "cosine_similarity": (lambda x, y: ad.sum(ad.cosine_similarity(x, y)), [a, b]),
        "concat": (lambda x, y: ad.sum(ad.concat([x, y], axis=1) * ad.concat([y, x], axis=1)), [a, b]),
        "stack": (lambda x, y: ad.sum(ad.stack([x, y]) * ad.stack([y, y])), [a, b]),
        "slice": (lambda x: ad.sum(x[1:, ::2] * x[:2, 1::2]), [a]),
        "gather": (lambda x: ad.sum(ad.take_rows(x, [0, 2, 2]) * ad.take_rows(x, [1, 1, 0])), [a]),
        "transpose": (lambda x, y: ad.sum(ad.transpose(x, (1, 0)) * ad.transpose(y, (1, 0))), [a, b]),
    }
    worst = {name: ad.grad_check(fn, inputs) for name, (fn, inputs) in cases.items()}
    bad = {k: v for k, v in worst.items() if not v < tol}
    return not bad, f"max rel err {max(worst.values()):.2e}" + (f"; failing {bad}" if bad else "")


def tiny_model(width: int = 8, entities: int = 12, relations: int = 3, seed: int = 0, **overrides) -> CLMPT:
    table = ComplexEmbeddingTable.initialize(entities, relations, width // 2, seed)
    cfg = ModelConfig(layers=2, heads=2, ffn_hidden=16, negatives=4, seed=seed, **overrides)
    return CLMPT(table, cfg)


def check_end_to_end_gradient(seed: int = 0, tol: float = 1e-3, temperature: float = 0.5):
    # A moderate temperature keeps every negative's gradient well above rounding noise.
    model = tiny_model(seed=seed, temperature=temperature)
    cq = instantiate_shape("2i", [1, 4], [0, 2]).disjuncts[0]
    params = model.parameters()
    names = list(params)
    rng = np.random.default_rng(seed)
    pos, neg = 5, rng.integers(0, model.entity_count, size=4)

    def fn(*leaves):
        saved = {n: params[n] for n in names}
        try:
            for n, leaf in zip(names, leaves):
                _assign(model, n, leaf)
            z = model.forward([cq])
            return nce_loss(z, ad.take_rows(model.entity_emb, [pos]), ad.take_rows(model.entity_emb, [neg]),
                            model.config.temperature)
        finally:
            for n in names:
                _assign(model, n, saved[n])

    err = ad.grad_check(fn, [params[n].data for n in names])
    return err < tol, f"rel err {err:.2e}"


def _assign(model: CLMPT, name: str, tensor) -> None:
    if name in model.encoder.params:
        model.encoder.params[name] = tensor
    else:
        setattr(model, name, tensor)


def closed_form_violations(pairs: int = 200, candidates: int = 1000, rank: int = 8, seed: int = 0) -> int:
    """Random unit candidates that beat the normalised message on ``score(x, r, t)``."""
    rng = np.random.default_rng(seed)
    width = 2 * rank
    violations = 0
    for _ in range(pairs):
        r, t = random_unit(rng, width), random_unit(rng, width)
        m = encode_message(t, r, TAIL_TO_HEAD, 0)
        m_hat = m / np.linalg.norm(m)
        xs = rng.normal(size=(candidates, width))
        xs /= np.linalg.norm(xs, axis=1, keepdims=True)
        objective = lambda x: np.sum(ad.cmul(ad.cmul(x, r), ad.conj(t))[..., 0::2], axis=-1)  # noqa: E731
        best = objective(m_hat)
        violations += int((objective(xs) > best + 1e-12).sum())
    return violations


def check_closed_form(seed: int = 0):
    v = closed_form_violations(seed=seed)
    return v == 0, f"{v} violations"


def check_negation_and_permutation(cases: int = 1000, seed: int = 0):
    rng = np.random.default_rng(seed)
    width = 8
    bad_neg = 0
    for _ in range(cases):
        a, r = rng.normal(size=width), rng.normal(size=width)
        for d in (HEAD_TO_TAIL, TAIL_TO_HEAD):
            if not np.array_equal(encode_message(a, r, d, 1), -encode_message(a, r, d, 0)):
                bad_neg += 1
    enc = TransformerEncoder(width, layers=2, heads=2, ffn_hidden=16, seed=seed)
    bad_perm = 0
    for i in range(cases):
        k = int(rng.integers(1, 6))
        msgs = rng.normal(size=(k, width))
        node = rng.normal(size=width)
        pooling = ("mean", "sum", "max")[i % 3]
        ref = node_update(msgs, node, enc, pooling).data
        if not np.array_equal(ref, node_update(msgs[rng.permutation(k)], node, enc, pooling).data):
            bad_perm += 1
    return bad_neg == 0 and bad_perm == 0, f"antisymmetry failures {bad_neg}, permutation failures {bad_perm}"


def check_conditional_contract(seed: int = 0):
    model = tiny_model(seed=seed)
    problems = []
    for shape in SHAPES:
        n_const, n_rel = shape_arity(shape)
        q = instantiate_shape(shape, list(range(1, n_const + 1)), [i % 3 for i in range(n_rel)])
        for cq in q.disjuncts:
            trace = ForwardTrace()
            model.forward([cq], trace=trace)
            for c in cq.constant_nodes():
                if trace.received[c] or not np.array_equal(trace.initial_states[c], trace.final_states[c]):
                    problems.append(f"{shape}: constant node {c} changed")
            if trace.message_count != expected_message_count(cq, True):
                problems.append(f"{shape}: {trace.message_count} messages, expected {expected_message_count(cq, True)}")
            if len(set(trace.encoder_ids)) != 1:
                problems.append(f"{shape}: encoder not shared across layers")
    return not problems, "; ".join(problems) or "all shapes conform"


def check_oracle_equivalence(queries: int = 500, seed: int = 0):
    rng = np.random.default_rng(seed)
    mismatches = 0
    for i in range(queries):
        n = int(rng.integers(5, 51))
        kg = random_kg(rng, n, 3, float(rng.uniform(0.02, 0.15)))
        cq = random_query_graph(rng, n, 3)
        if answer_conjunctive(kg, cq) != enumerate_answers(kg, cq):
            mismatches += 1
    return mismatches == 0, f"{mismatches} mismatches over {queries} queries"


def check_filtered_rank(vectors: int = 1000, seed: int = 0):
    rng = np.random.default_rng(seed)
    bad = 0
    for _ in range(vectors):
        n = int(rng.integers(1, 60))
        # Coarse values force plenty of ties.
        scores = rng.integers(0, 6, size=n).astype(float)
        target = int(rng.integers(n))
        others = {int(e) for e in rng.choice(n, size=int(rng.integers(0, n)), replace=False)} - {target}
        if filtered_rank(scores, target, others) != naive_filtered_rank(scores, target, others):
            bad += 1
    return bad == 0, f"{bad} disagreements"


def check_nce_symmetric():
    worst = 0.0
    for k in (1, 4, 127):
        v = np.ones(6)
        loss = nce_loss(v, v, np.tile(v, (k, 1)), 0.05).item()
        worst = max(worst, abs(loss - math.log(k + 1)))
    return worst < 1e-9, f"max deviation {worst:.1e}"


SUITES = {
    "primitive-gradients": check_primitive_gradients,
    "end-to-end-gradient": check_end_to_end_gradient,
    "closed-form-maximizer": check_closed_form,
    "negation-permutation": check_negation_and_permutation,
    "conditional-passing": check_conditional_contract,
    "oracle-equivalence": check_oracle_equivalence,
    "filtered-rank": check_filtered_rank,
    "nce-symmetric": check_nce_symmetric,
}


def run_selftest(names=None) -> list[CheckResult]:
    names = list(SUITES) if names is None else list(names)
    unknown = set(names) - set(SUITES)
    if unknown:
        raise KeyError(f"unknown self-test suite(s): {sorted(unknown)}")
    return [_timed(name, SUITES[name]) for name in names]
