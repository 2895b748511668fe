"""Exact query answering by graph traversal and generation of easy/hard query instances."""
from __future__ import annotations

import json
import logging

import numpy as np

from . import kernels
from .kg import KnowledgeGraph
from .query import (
    CONSTANT,
    ConjunctiveQueryGraph,
    EFO1Query,
    QueryInstance,
    instantiate_shape,
    shape_arity,
    shape_template,
)

log = logging.getLogger(__name__)

RETRIES_PER_INSTANCE = 100


class SamplingError(RuntimeError):
    pass


def _image_counts(kg: KnowledgeGraph, relation: int, src_mask: np.ndarray, forward: bool) -> np.ndarray:
    fwd, rev = kg.csr
    indptr, indices = (fwd if forward else rev)[relation]
    return kernels.relation_counts(indptr, indices, src_mask, kg.entity_count)


def _row_mask(kg: KnowledgeGraph, entity: int, relation: int, forward: bool) -> np.ndarray:
    fwd, rev = kg.csr
    indptr, indices = (fwd if forward else rev)[relation]
    mask = np.zeros(kg.entity_count, dtype=bool)
    mask[indices[indptr[entity]:indptr[entity + 1]]] = True
    return mask


def _revise(kg, edge, domains, target_is_tail: bool) -> np.ndarray:
    """Values of one endpoint that still have a support in the other's domain."""
    src_node, dst_node = (edge.head, edge.tail) if target_is_tail else (edge.tail, edge.head)
    src = domains[src_node]
    n_src = int(src.sum())
    if n_src == 0:
        return np.zeros_like(src)
    counts = _image_counts(kg, edge.relation, src, forward=target_is_tail)
    if edge.negated:
        # Supported iff some source value is *not* linked to it.
        return counts < n_src
    return counts > 0


def propagate(kg: KnowledgeGraph, cq: ConjunctiveQueryGraph) -> list[np.ndarray]:
    """Arc-consistent candidate masks for every node of the query graph."""
    n = kg.entity_count
    domains = []
    for node in cq.nodes:
        if node.kind == CONSTANT:
            d = np.zeros(n, dtype=bool)
            d[node.entity] = True
        else:
            d = np.ones(n, dtype=bool)
        domains.append(d)
    changed = True
    while changed:
        changed = False
        for edge in cq.edges:
            for target_is_tail in (True, False):
                dst = edge.tail if target_is_tail else edge.head
                new = domains[dst] & _revise(kg, edge, domains, target_is_tail)
                if new.sum() != domains[dst].sum():
                    domains[dst] = new
                    changed = True
        if any(not d.any() for d in domains):
            return [np.zeros(n, dtype=bool) for _ in domains]
    return domains


def _search_order(cq: ConjunctiveQueryGraph) -> list[int]:
    """Variables in BFS order from the free node, so each one meets an assigned neighbour early."""
    adj = cq.adjacency()
    order, seen = [cq.free_node], {cq.free_node}
    i = 0
    while i < len(order):
        for v in adj[order[i]]:
            if v not in seen and cq.nodes[v].kind != CONSTANT:
                seen.add(v)
                order.append(v)
        i += 1
    # Variables only reachable through constants.
    for v in cq.variable_nodes():
        if v not in seen:
            order.append(v)
    return order


def answer_conjunctive(kg: KnowledgeGraph, cq: ConjunctiveQueryGraph) -> frozenset[int]:
    """Exact answer set of the free variable.

    Candidate sets are pruned to arc consistency, then each surviving free-variable
    value is confirmed by backtracking over the existential variables. Negated
    atoms hold iff the pair is absent from the graph (complement over all entities).
    """
    cq.validate(kg.entity_count, kg.relation_count)
    domains = propagate(kg, cq)
    order = _search_order(cq)
    assignment = {n.node_id: n.entity for n in cq.nodes if n.kind == CONSTANT}
    edges_at = {v: [] for v in range(len(cq.nodes))}
    for e in cq.edges:
        edges_at[e.head].append(e)
        edges_at[e.tail].append(e)

    def allowed(var):
        mask = domains[var].copy()
        for e in edges_at[var]:
            other = e.tail if e.head == var else e.head
            if other not in assignment:
                continue
            # var is the tail when the assigned end is the head.
            row = _row_mask(kg, assignment[other], e.relation, forward=(e.head == other))
            mask &= ~row if e.negated else row
        return mask

    def extend(depth):
        if depth == len(order):
            return True
        var = order[depth]
        for value in np.flatnonzero(allowed(var)):
            assignment[var] = int(value)
            if extend(depth + 1):
                del assignment[var]
                return True
            del assignment[var]
        return False

    free = cq.free_node
    answers = []
    for value in np.flatnonzero(domains[free]):
        assignment[free] = int(value)
        if extend(1):
            answers.append(int(value))
        del assignment[free]
    return frozenset(answers)


def answer_query(kg: KnowledgeGraph, query: EFO1Query) -> frozenset[int]:
    """Union of the disjunct answer sets."""
    out: set[int] = set()
    for cq in query.disjuncts:
        out |= answer_conjunctive(kg, cq)
    return frozenset(out)


def _ground(kg: KnowledgeGraph, shape: str, rng: np.random.Generator):
    """One random grounding of ``shape``: constants and relations in slot order, or None."""
    template = shape_template(shape)
    n_const, n_rel = shape_arity({"2u": "2i", "up": "ip"}.get(shape, shape))
    # Template constants carry their slot index as the entity id; edges their slot as relation.
    values: dict[int, int] = {}
    rel_of_slot: dict[int, int] = {}
    anchor = template.constant_nodes()[0]
    first = next(e for e in template.edges if anchor in (e.head, e.tail))
    anchor_forward = first.head == anchor
    pool = [e for e in range(kg.entity_count) if (kg.out_relations(e) if anchor_forward else kg.in_relations(e))]
    if not pool:
        return None
    values[anchor] = int(pool[rng.integers(len(pool))])
    pending = list(template.edges)
    while pending:
        progressed = False
        for e in list(pending):
            if e.head in values and e.tail in values:
                return None  # cycles do not occur in canonical shapes
            if e.head not in values and e.tail not in values:
                continue
            forward = e.head in values
            known = values[e.head] if forward else values[e.tail]
            rels = kg.out_relations(known) if forward else kg.in_relations(known)
            if not rels:
                return None
            r = int(rels[rng.integers(len(rels))])
            index = kg.fwd_index if forward else kg.rev_index
            if e.negated:
                # Pick an endpoint that takes part in r but is not linked to the known value,
                # so the walked values still satisfy the query.
                linked = set(index[(known, r)])
                cands = [x for x in range(kg.entity_count)
                         if x != known and x not in linked
                         and r in (kg.in_relations(x) if forward else kg.out_relations(x))]
                if not cands:
                    return None
            else:
                cands = index[(known, r)]
            other = int(cands[rng.integers(len(cands))])
            values[e.tail if forward else e.head] = other
            rel_of_slot[e.relation] = r
            pending.remove(e)
            progressed = True
        if not progressed:
            return None
    constants = [0] * n_const
    for node in template.nodes:
        if node.kind == CONSTANT:
            constants[node.entity] = values[node.node_id]
    relations = [rel_of_slot[i] for i in range(n_rel)]
    if len(set(constants)) != len(constants):
        return None
    return constants, relations


def sample_instances(full_kg: KnowledgeGraph, observed_kg: KnowledgeGraph, shape: str, count: int,
                     rng_seed: int, require_hard: bool = True,
                     retries: int = RETRIES_PER_INSTANCE) -> list[QueryInstance]:
    """Sample grounded queries of one shape with easy/hard answer splits.

    Groundings are random walks on ``full_kg`` starting from a uniformly drawn
    anchor constant. A negated atom is grounded with an endpoint that is not
    linked to the known one, so every walk ends on an answer of ``full_kg``.
    ``easy`` answers come from ``observed_kg`` and ``hard`` ones are the rest of
    the ``full_kg`` answers. With ``require_hard`` a candidate without hard
    answers is redrawn; otherwise (training data) a candidate needs at least one
    easy answer. Each instance draws from its own child seed.
    """
    if not observed_kg.triples <= full_kg.triples:
        raise SamplingError("observed graph must be a subgraph of the full graph")
    if observed_kg.entity_count != full_kg.entity_count:
        raise SamplingError("graphs must share the entity id space")
    seeds = np.random.SeedSequence(rng_seed).spawn(count)
    out = []
    for i in range(count):
        rng = np.random.default_rng(seeds[i])
        for _ in range(retries):
            grounding = _ground(full_kg, shape, rng)
            if grounding is None:
                continue
            query = instantiate_shape(shape, *grounding)
            easy = answer_query(observed_kg, query)
            if require_hard:
                hard = answer_query(full_kg, query) - easy
                if not hard:
                    continue
            else:
                hard = frozenset()
                if not easy:
                    continue
            out.append(QueryInstance(query, easy, hard))
            break
        else:
            raise SamplingError(f"shape {shape}: no valid instance after {retries} attempts (instance {i})")
    return out


def instance_stats(instances) -> dict:
    """Per-shape counts and mean answer-set sizes."""
    by_shape: dict[str, list[QueryInstance]] = {}
    for inst in instances:
        by_shape.setdefault(inst.shape or "?", []).append(inst)
    stats = {}
    for shape, group in by_shape.items():
        stats[shape] = {
            "count": len(group),
            "mean_easy": float(np.mean([len(g.easy_answers) for g in group])),
            "mean_hard": float(np.mean([len(g.hard_answers) for g in group])),
        }
    return {"total": len(instances), "shapes": stats}


def write_stats(path, instances) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(instance_stats(instances), f, indent=2, sort_keys=True)
        f.write("\n")
