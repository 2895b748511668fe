"""Deterministic synthetic graphs for tests and desk-scale experiments."""
from __future__ import annotations

import numpy as np

from .kg import KnowledgeGraph, Vocabulary


def latent_rotation_kg(entities: int = 200, relations: int = 10, phases: int = 3,
                       fanout: int = 3, seed: int = 0) -> KnowledgeGraph:
    """Graph whose edges follow a hidden rotation model.

    Every entity gets ``phases`` angles and every relation a rotation of them;
    ``(h, r, t)`` is an edge when ``t`` is among the ``fanout`` entities best
    aligned with ``h`` rotated by ``r`` (summed cosines of the angle gaps).
    Such graphs are learnable by complex embeddings, so held-out edges can be
    recovered from observed ones.
    """
    if fanout >= entities:
        raise ValueError("fanout must be smaller than the entity count")
    rng = np.random.default_rng(seed)
    theta = rng.uniform(0.0, 2 * np.pi, size=(entities, phases))
    phi = rng.uniform(0.0, 2 * np.pi, size=(relations, phases))
    triples = []
    for r in range(relations):
        target = theta + phi[r]  # (entities, phases)
        align = np.cos(target[:, None, :] - theta[None, :, :]).sum(axis=-1)
        np.fill_diagonal(align, -np.inf)
        top = np.argsort(-align, axis=1, kind="stable")[:, :fanout]
        for h in range(entities):
            triples.extend((h, r, int(t)) for t in top[h])
    return KnowledgeGraph(entities, relations, triples)


def ring_kg(entities: int = 20, steps=(1, 2, 3)) -> KnowledgeGraph:
    """Entities on a cycle; relation ``i`` links each node to the one ``steps[i]`` ahead."""
    triples = [(e, r, (e + s) % entities) for r, s in enumerate(steps) for e in range(entities)]
    return KnowledgeGraph(entities, len(steps), triples)


def default_vocabularies(kg: KnowledgeGraph) -> tuple[Vocabulary, Vocabulary]:
    """Names ``e0, e1, ...`` and ``r0, r1, ...`` for a synthetic graph."""
    return (Vocabulary.from_names(f"e{i}" for i in range(kg.entity_count)),
            Vocabulary.from_names(f"r{i}" for i in range(kg.relation_count)))
