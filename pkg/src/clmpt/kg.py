"""Knowledge-graph storage: vocabularies, triple ingestion, edge splits and adjacency."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from pathlib import Path
from typing import Iterable

import numpy as np


class KGError(Exception):
    """Base class for knowledge-graph errors."""


class TripleParseError(KGError, ValueError):
    def __init__(self, path, lineno: int, message: str):
        super().__init__(f"{path}:{lineno}: {message}")
        self.lineno = lineno


class EmptyGraphError(KGError, ValueError):
    pass


class SplitConfigError(KGError, ValueError):
    pass


class Direction(str, Enum):
    HEAD_TO_TAIL = "head-to-tail"
    TAIL_TO_HEAD = "tail-to-head"


@dataclass
class Vocabulary:
    """Bijection between names and dense ids ``0..n-1``."""

    id_to_name: list[str] = field(default_factory=list)
    name_to_id: dict[str, int] = field(default_factory=dict)

    @classmethod
    def from_names(cls, names: Iterable[str]) -> "Vocabulary":
        vocab = cls()
        for name in names:
            if name in vocab.name_to_id:
                raise ValueError(f"duplicate vocabulary entry {name!r}")
            vocab.add(name)
        return vocab

    def add(self, name: str) -> int:
        idx = self.name_to_id.get(name)
        if idx is None:
            idx = len(self.id_to_name)
            self.name_to_id[name] = idx
            self.id_to_name.append(name)
        return idx

    def __len__(self) -> int:
        return len(self.id_to_name)

    def __contains__(self, name: str) -> bool:
        return name in self.name_to_id

    def __getitem__(self, name: str) -> int:
        return self.name_to_id[name]

    def name(self, idx: int) -> str:
        return self.id_to_name[idx]

    def digest(self) -> str:
        """Content hash used to tie checkpoints to the vocabulary they were trained on."""
        h = hashlib.sha256()
        for name in self.id_to_name:
            h.update(name.encode("utf-8"))
            h.update(b"\x00")
        return h.hexdigest()

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for name in self.id_to_name:
                f.write(name + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as f:
            return cls.from_names(line.rstrip("\n") for line in f if line.rstrip("\n"))


class KnowledgeGraph:
    """An immutable set of ``(head, relation, tail)`` id triples with both adjacency indices.

    ``fwd_index[(h, r)]`` lists tails and ``rev_index[(t, r)]`` lists heads, both sorted.
    """

    def __init__(self, entity_count: int, relation_count: int, triples: Iterable[tuple[int, int, int]]):
        if entity_count < 0 or relation_count < 0:
            raise ValueError("counts must be non-negative")
        self.entity_count = int(entity_count)
        self.relation_count = int(relation_count)
        triples = frozenset((int(h), int(r), int(t)) for h, r, t in triples)
        for h, r, t in triples:
            if not (0 <= h < entity_count and 0 <= t < entity_count):
                raise IndexError(f"entity id out of range in triple {(h, r, t)}")
            if not 0 <= r < relation_count:
                raise IndexError(f"relation id out of range in triple {(h, r, t)}")
        self.triples = triples

        fwd: dict[tuple[int, int], list[int]] = {}
        rev: dict[tuple[int, int], list[int]] = {}
        for h, r, t in triples:
            fwd.setdefault((h, r), []).append(t)
            rev.setdefault((t, r), []).append(h)
        self.fwd_index = {k: tuple(sorted(v)) for k, v in fwd.items()}
        self.rev_index = {k: tuple(sorted(v)) for k, v in rev.items()}

    def __len__(self) -> int:
        return len(self.triples)

    def __eq__(self, other) -> bool:
        if not isinstance(other, KnowledgeGraph):
            return NotImplemented
        return (
            self.entity_count == other.entity_count
            and self.relation_count == other.relation_count
            and self.triples == other.triples
        )

    def __hash__(self):
        return hash((self.entity_count, self.relation_count, self.triples))

    def __repr__(self) -> str:
        return (
            f"KnowledgeGraph(entities={self.entity_count}, relations={self.relation_count}, "
            f"triples={len(self.triples)})"
        )

    def sorted_triples(self) -> np.ndarray:
        """Triples as an ``(n, 3)`` int64 array in lexicographic order."""
        if not self.triples:
            return np.zeros((0, 3), dtype=np.int64)
        return np.array(sorted(self.triples), dtype=np.int64)

    def with_triples(self, triples: Iterable[tuple[int, int, int]]) -> "KnowledgeGraph":
        """A graph over the same id spaces holding ``triples``."""
        return KnowledgeGraph(self.entity_count, self.relation_count, triples)

    def union(self, *others: "KnowledgeGraph") -> "KnowledgeGraph":
        triples = set(self.triples)
        for other in others:
            triples |= other.triples
        return self.with_triples(triples)

    @cached_property
    def csr(self) -> tuple[list[tuple[np.ndarray, np.ndarray]], list[tuple[np.ndarray, np.ndarray]]]:
        """Per-relation CSR adjacency ``(indptr, indices)`` for both directions."""
        arr = self.sorted_triples()
        n = self.entity_count
        fwd, rev = [], []
        for r in range(self.relation_count):
            sub = arr[arr[:, 1] == r] if len(arr) else arr
            for src_col, dst_col, out in ((0, 2, fwd), (2, 0, rev)):
                order = np.lexsort((sub[:, dst_col], sub[:, src_col]))
                src = sub[order, src_col]
                indptr = np.zeros(n + 1, dtype=np.int64)
                np.add.at(indptr, src + 1, 1)
                out.append((np.cumsum(indptr), np.ascontiguousarray(sub[order, dst_col])))
        return fwd, rev

    def out_relations(self, entity: int) -> tuple[int, ...]:
        return self._incident[0][entity]

    def in_relations(self, entity: int) -> tuple[int, ...]:
        return self._incident[1][entity]

    @cached_property
    def _incident(self):
        out: list[set[int]] = [set() for _ in range(self.entity_count)]
        inc: list[set[int]] = [set() for _ in range(self.entity_count)]
        for h, r, t in self.triples:
            out[h].add(r)
            inc[t].add(r)
        return [tuple(sorted(s)) for s in out], [tuple(sorted(s)) for s in inc]

    def relations_used(self) -> set[int]:
        return {r for _, r, _ in self.triples}


def neighbors(kg: KnowledgeGraph, node: int, relation: int, direction=Direction.HEAD_TO_TAIL) -> frozenset[int]:
    """Entities linked to ``node`` through ``relation``.

    ``head-to-tail`` returns every ``t`` with ``(node, relation, t)`` in the graph;
    ``tail-to-head`` every ``h`` with ``(h, relation, node)``.
    """
    if not 0 <= node < kg.entity_count:
        raise IndexError(f"entity id {node} out of range [0, {kg.entity_count})")
    if not 0 <= relation < kg.relation_count:
        raise IndexError(f"relation id {relation} out of range [0, {kg.relation_count})")
    direction = Direction(direction)
    index = kg.fwd_index if direction is Direction.HEAD_TO_TAIL else kg.rev_index
    return frozenset(index.get((node, relation), ()))


def load_triples(path, entity_vocab: Vocabulary | None = None, relation_vocab: Vocabulary | None = None):
    """Read a TAB-separated triple file into a graph plus its vocabularies.

    Ids are assigned in first-appearance order. When vocabularies are passed in,
    they are extended in place, so several split files can share one id space.
    Blank lines and lines starting with ``#`` are skipped.
    """
    path = Path(path)
    entity_vocab = Vocabulary() if entity_vocab is None else entity_vocab
    relation_vocab = Vocabulary() if relation_vocab is None else relation_vocab
    triples = []
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.rstrip("\r\n")
            if not line.strip() or line.startswith("#"):
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                raise TripleParseError(path, lineno, f"expected 3 TAB-separated fields, got {len(fields)}")
            if any(not x for x in fields):
                raise TripleParseError(path, lineno, "empty field")
            h, r, t = fields
            triples.append((entity_vocab.add(h), relation_vocab.add(r), entity_vocab.add(t)))
    if not triples:
        raise EmptyGraphError(f"{path}: no triples")
    return KnowledgeGraph(len(entity_vocab), len(relation_vocab), triples), entity_vocab, relation_vocab


def write_triples(path, kg: KnowledgeGraph, entity_vocab: Vocabulary, relation_vocab: Vocabulary) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for h, r, t in kg.sorted_triples():
            f.write(f"{entity_vocab.name(h)}\t{relation_vocab.name(r)}\t{entity_vocab.name(t)}\n")


def split_edges(kg: KnowledgeGraph, ratios=(0.8, 0.1, 0.1), seed: int = 0):
    """Partition the triples into disjoint train / valid / test graphs.

    Valid and test sizes are ``round(n * ratio)``; train takes the rest. An edge
    whose relation would be absent from train is swapped with a train edge whose
    relation has spare occurrences, so every relation in valid/test is seen in
    training. If no such swap exists the edge simply moves to train.
    """
    if len(ratios) != 3:
        raise SplitConfigError("ratios must be (train, valid, test)")
    if any(not np.isfinite(x) or x <= 0 for x in ratios):
        raise SplitConfigError(f"every ratio must be positive, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise SplitConfigError(f"ratios must sum to 1, got {sum(ratios)}")

    arr = [tuple(x) for x in kg.sorted_triples().tolist()]
    n = len(arr)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    n_valid = int(round(n * ratios[1]))
    n_test = int(round(n * ratios[2]))
    n_valid = min(n_valid, n)
    n_test = min(n_test, n - n_valid)
    held = [arr[i] for i in perm[: n_valid + n_test]]
    train = [arr[i] for i in perm[n_valid + n_test:]]
    valid, test = held[:n_valid], held[n_valid:]

    rel_count: dict[int, int] = {}
    for _, r, _ in train:
        rel_count[r] = rel_count.get(r, 0) + 1

    def fix(part):
        out = []
        for edge in part:
            r = edge[1]
            if rel_count.get(r, 0) > 0:
                out.append(edge)
                continue
            train.append(edge)
            rel_count[r] = 1
            # Swap a donor back out so the part keeps its size.
            for j in range(len(train) - 2, -1, -1):
                donor = train[j]
                if rel_count[donor[1]] > 1:
                    train.pop(j)
                    rel_count[donor[1]] -= 1
                    out.append(donor)
                    break
        return out

    valid = fix(valid)
    test = fix(test)
    return kg.with_triples(train), kg.with_triples(valid), kg.with_triples(test)
