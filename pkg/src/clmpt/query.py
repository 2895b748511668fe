"""EFO-1 queries: graph types, a small textual DSL, DNF expansion and the canonical shapes.

DSL grammar (``&`` binds tighter than ``|``)::

    expr  := conj ('|' conj)*
    conj  := unary ('&' unary)*
    unary := '!' unary | '(' expr ')' | atom
    atom  := NAME '(' term ',' term ')'
    term  := 'y' | 'x' DIGITS | entity NAME

Variable names are scoped per disjunct after DNF expansion.
"""
from __future__ import annotations

import json
import re
from collections import deque
from dataclasses import dataclass
from itertools import product
from typing import Iterable, Sequence

CONSTANT = "constant"
EXISTENTIAL = "existential"
FREE = "free"


class QueryError(ValueError):
    """Base class for query construction errors."""


class QuerySyntaxError(QueryError):
    pass


class UnknownSymbolError(QueryError):
    pass


class QueryValidationError(QueryError):
    pass


class UnsupportedFormulaError(QueryError):
    pass


@dataclass(frozen=True)
class TermNode:
    node_id: int
    kind: str
    entity: int | None = None

    def __post_init__(self):
        if self.kind not in (CONSTANT, EXISTENTIAL, FREE):
            raise QueryValidationError(f"unknown node kind {self.kind!r}")
        if (self.kind == CONSTANT) != (self.entity is not None):
            raise QueryValidationError("only constant nodes carry an entity id")


@dataclass(frozen=True)
class AtomEdge:
    relation: int
    negated: bool
    head: int
    tail: int


@dataclass(frozen=True)
class ConjunctiveQueryGraph:
    nodes: tuple[TermNode, ...]
    edges: tuple[AtomEdge, ...]

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "edges", tuple(self.edges))

    @property
    def free_node(self) -> int:
        return next(n.node_id for n in self.nodes if n.kind == FREE)

    def constant_nodes(self) -> list[int]:
        return [n.node_id for n in self.nodes if n.kind == CONSTANT]

    def variable_nodes(self) -> list[int]:
        return [n.node_id for n in self.nodes if n.kind != CONSTANT]

    def adjacency(self) -> list[list[int]]:
        adj: list[list[int]] = [[] for _ in self.nodes]
        for e in self.edges:
            adj[e.head].append(e.tail)
            adj[e.tail].append(e.head)
        return adj

    def validate(self, entity_count: int | None = None, relation_count: int | None = None) -> None:
        if [n.node_id for n in self.nodes] != list(range(len(self.nodes))):
            raise QueryValidationError("node ids must be 0..n-1 in order")
        kinds = [n.kind for n in self.nodes]
        if kinds.count(FREE) != 1:
            raise QueryValidationError(f"expected exactly one free variable, found {kinds.count(FREE)}")
        if CONSTANT not in kinds:
            raise QueryValidationError("query graph has no constant node")
        n = len(self.nodes)
        for e in self.edges:
            if not (0 <= e.head < n and 0 <= e.tail < n):
                raise QueryValidationError(f"edge {e} references a missing node")
            if e.head == e.tail:
                raise QueryValidationError(f"self-loop atom on node {e.head}")
            if self.nodes[e.head].kind == CONSTANT and self.nodes[e.tail].kind == CONSTANT:
                raise QueryValidationError("atom between two constants")
            if relation_count is not None and not 0 <= e.relation < relation_count:
                raise QueryValidationError(f"relation id {e.relation} out of range")
        if entity_count is not None:
            for node in self.nodes:
                if node.kind == CONSTANT and not 0 <= node.entity < entity_count:
                    raise QueryValidationError(f"entity id {node.entity} out of range")
        dist = _bfs(self.adjacency(), 0)
        if any(d is None for d in dist):
            raise QueryValidationError("query graph is disconnected")

    def structure_key(self) -> tuple:
        """Topology signature: equal keys mean the graphs differ only in ids."""
        return (
            tuple(n.kind for n in self.nodes),
            tuple((e.head, e.tail, e.negated) for e in self.edges),
        )

    def to_json(self) -> dict:
        return {
            "nodes": [
                {"id": n.node_id, "kind": n.kind, **({"entity": n.entity} if n.kind == CONSTANT else {})}
                for n in self.nodes
            ],
            "edges": [
                {"relation": e.relation, "negated": e.negated, "head": e.head, "tail": e.tail}
                for e in self.edges
            ],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ConjunctiveQueryGraph":
        nodes = tuple(TermNode(int(n["id"]), n["kind"], n.get("entity")) for n in obj["nodes"])
        edges = tuple(
            AtomEdge(int(e["relation"]), bool(e["negated"]), int(e["head"]), int(e["tail"])) for e in obj["edges"]
        )
        cq = cls(nodes, edges)
        cq.validate()
        return cq


@dataclass(frozen=True)
class EFO1Query:
    disjuncts: tuple[ConjunctiveQueryGraph, ...]
    shape: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "disjuncts", tuple(self.disjuncts))
        if not self.disjuncts:
            raise QueryValidationError("a query needs at least one disjunct")

    def validate(self, entity_count=None, relation_count=None) -> None:
        for cq in self.disjuncts:
            cq.validate(entity_count, relation_count)


# ----------------------------------------------------------------------------
# Formula AST


@dataclass(frozen=True)
class Atom:
    relation: int
    head: tuple  # ("const", entity_id) or ("var", name)
    tail: tuple
    negated: bool = False

    def negate(self) -> "Atom":
        return Atom(self.relation, self.head, self.tail, not self.negated)


@dataclass(frozen=True)
class And:
    children: tuple


@dataclass(frozen=True)
class Or:
    children: tuple


@dataclass(frozen=True)
class Not:
    child: object


_TOKEN = re.compile(r"\s*(?:(?P<punct>[()&|!,])|(?P<name>[^\s()&|!,]+))")
_VAR = re.compile(r"^(y|x\d+)$")


def _tokenize(text: str) -> list[str]:
    tokens = []
    pos = 0
    text = text.rstrip()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m:
            raise QuerySyntaxError(f"unexpected character at offset {pos}: {text[pos:pos + 10]!r}")
        tokens.append(m.group("punct") or m.group("name"))
        pos = m.end()
    return tokens


class _Parser:
    def __init__(self, text, entity_vocab, relation_vocab):
        self.tokens = _tokenize(text)
        self.pos = 0
        self.entities = entity_vocab
        self.relations = relation_vocab

    def peek(self):
        return self.tokens[self.pos] if self.pos < len(self.tokens) else None

    def take(self, expected=None, what=None):
        tok = self.peek()
        if tok is None:
            raise QuerySyntaxError(f"unexpected end of query, expected {what or expected or 'a token'}")
        if expected is not None and tok != expected:
            raise QuerySyntaxError(f"expected {expected!r} at token {self.pos}, got {tok!r}")
        self.pos += 1
        return tok

    def parse(self):
        if not self.tokens:
            raise QuerySyntaxError("empty query")
        node = self.expr()
        if self.peek() is not None:
            raise QuerySyntaxError(f"trailing input at token {self.pos}: {self.peek()!r}")
        return node

    def expr(self):
        parts = [self.conj()]
        while self.peek() == "|":
            self.take()
            parts.append(self.conj())
        return parts[0] if len(parts) == 1 else Or(tuple(parts))

    def conj(self):
        parts = [self.unary()]
        while self.peek() == "&":
            self.take()
            parts.append(self.unary())
        return parts[0] if len(parts) == 1 else And(tuple(parts))

    def unary(self):
        tok = self.peek()
        if tok == "!":
            self.take()
            child = self.unary()
            return child.negate() if isinstance(child, Atom) else Not(child)
        if tok == "(":
            self.take()
            node = self.expr()
            self.take(")")
            return node
        return self.atom()

    def atom(self):
        name = self.take(what="a relation name")
        if name in "()&|!,":
            raise QuerySyntaxError(f"expected a relation name, got {name!r}")
        if name not in self.relations:
            raise UnknownSymbolError(f"unknown relation {name!r}")
        self.take("(")
        head = self.term()
        self.take(",")
        tail = self.term()
        self.take(")")
        if head == tail and head[0] == "var":
            raise QueryValidationError(f"variable {head[1]} is both head and tail of {name}")
        return Atom(self.relations[name], head, tail)

    def term(self):
        tok = self.take(what="a term")
        if tok in "()&|!,":
            raise QuerySyntaxError(f"expected a term, got {tok!r}")
        if _VAR.match(tok):
            return ("var", tok)
        if tok not in self.entities:
            raise UnknownSymbolError(f"unknown entity {tok!r}")
        return ("const", self.entities[tok])


def parse_formula(text: str, entity_vocab, relation_vocab):
    """Parse DSL text into a formula tree of ``Atom`` / ``And`` / ``Or`` / ``Not``."""
    return _Parser(text, entity_vocab, relation_vocab).parse()


def dnf_clauses(formula) -> list[tuple[Atom, ...]]:
    """Distribute conjunction over disjunction until the formula is a list of clauses.

    Negation must already sit on atoms. Duplicate literals inside a clause are
    dropped; clause order follows the left-to-right order of the formula.
    """
    if isinstance(formula, Atom):
        return [(formula,)]
    if isinstance(formula, Not):
        raise UnsupportedFormulaError("negation is only supported directly on atoms")
    if isinstance(formula, Or):
        out = []
        for child in formula.children:
            out.extend(dnf_clauses(child))
        return out
    if isinstance(formula, And):
        child_clauses = [dnf_clauses(child) for child in formula.children]
        out = []
        for combo in product(*child_clauses):
            merged: list[Atom] = []
            for clause in combo:
                for lit in clause:
                    if lit not in merged:
                        merged.append(lit)
            out.append(tuple(merged))
        return out
    raise UnsupportedFormulaError(f"unsupported formula node {type(formula).__name__}")


def clause_to_graph(clause: Sequence[Atom]) -> ConjunctiveQueryGraph:
    """Build one query graph; each distinct term becomes one node, in first-use order."""
    index: dict[tuple, int] = {}
    nodes: list[TermNode] = []
    edges: list[AtomEdge] = []

    def node_for(term):
        if term not in index:
            idx = len(nodes)
            index[term] = idx
            if term[0] == "const":
                nodes.append(TermNode(idx, CONSTANT, int(term[1])))
            elif term[1] == "y":
                nodes.append(TermNode(idx, FREE))
            else:
                nodes.append(TermNode(idx, EXISTENTIAL))
        return index[term]

    for atom in clause:
        if atom.head == atom.tail:
            raise QueryValidationError("self-loop atoms are not allowed")
        edges.append(AtomEdge(atom.relation, atom.negated, node_for(atom.head), node_for(atom.tail)))
    if ("var", "y") not in index:
        raise QueryValidationError("disjunct has no free variable y")
    cq = ConjunctiveQueryGraph(tuple(nodes), tuple(edges))
    cq.validate()
    return cq


def dnf_decompose(formula) -> list[ConjunctiveQueryGraph]:
    return [clause_to_graph(c) for c in dnf_clauses(formula)]


def parse_query(text: str, entity_vocab, relation_vocab) -> EFO1Query:
    """Parse DSL text into a DNF query, one graph per disjunct."""
    return EFO1Query(tuple(dnf_decompose(parse_formula(text, entity_vocab, relation_vocab))))


def render_query(query: EFO1Query, entity_vocab, relation_vocab) -> str:
    """Pretty-print a query back into the DSL."""
    parts = []
    for cq in query.disjuncts:
        names = {}
        k = 0
        for node in cq.nodes:
            if node.kind == CONSTANT:
                names[node.node_id] = entity_vocab.name(node.entity)
            elif node.kind == FREE:
                names[node.node_id] = "y"
            else:
                k += 1
                names[node.node_id] = f"x{k}"
        atoms = [
            f"{'!' if e.negated else ''}{relation_vocab.name(e.relation)}({names[e.head]}, {names[e.tail]})"
            for e in cq.edges
        ]
        parts.append(" & ".join(atoms))
    if len(parts) == 1:
        return parts[0]
    return " | ".join(f"({p})" for p in parts)


def _bfs(adj, start):
    dist = [None] * len(adj)
    dist[start] = 0
    queue = deque([start])
    while queue:
        u = queue.popleft()
        for v in adj[u]:
            if dist[v] is None:
                dist[v] = dist[u] + 1
                queue.append(v)
    return dist


def free_variable_depth(cq: ConjunctiveQueryGraph) -> int:
    """Largest undirected distance from a constant node to the free node (the layer count)."""
    dist = _bfs(cq.adjacency(), cq.free_node)
    consts = cq.constant_nodes()
    if not consts:
        raise QueryValidationError("query graph has no constant node")
    if any(dist[c] is None for c in consts):
        raise QueryValidationError("free variable unreachable from a constant")
    return max(dist[c] for c in consts)


# ----------------------------------------------------------------------------
# Canonical shapes
#
# Templates use constant slots a, b, c and relation slots 0..2. A term "y" is the
# free variable, "x"/"x2" existentials.

_SHAPES: dict[str, tuple[int, int, str]] = {
    # name: (constants, relations, template)
    "1p": (1, 1, "R0(a,y)"),
    "2p": (1, 2, "R0(a,x1) & R1(x1,y)"),
    "3p": (1, 3, "R0(a,x1) & R1(x1,x2) & R2(x2,y)"),
    "2i": (2, 2, "R0(a,y) & R1(b,y)"),
    "3i": (3, 3, "R0(a,y) & R1(b,y) & R2(c,y)"),
    "pi": (2, 3, "R0(a,x1) & R1(x1,y) & R2(b,y)"),
    "ip": (2, 3, "R0(a,x1) & R1(b,x1) & R2(x1,y)"),
    "2u": (2, 2, "R0(a,y) | R1(b,y)"),
    "up": (2, 3, "(R0(a,x1) | R1(b,x1)) & R2(x1,y)"),
    "2in": (2, 2, "R0(a,y) & !R1(b,y)"),
    "3in": (3, 3, "R0(a,y) & R1(b,y) & !R2(c,y)"),
    "inp": (2, 3, "R0(a,x1) & !R1(b,x1) & R2(x1,y)"),
    "pin": (2, 3, "R0(a,x1) & R1(x1,y) & !R2(b,y)"),
    "pni": (2, 3, "R0(a,x1) & !R1(x1,y) & R2(b,y)"),
}

SHAPES = tuple(_SHAPES)
EPFO_SHAPES = ("1p", "2p", "3p", "2i", "3i", "pi", "ip", "2u", "up")
NEGATION_SHAPES = ("2in", "3in", "inp", "pin", "pni")
TRAIN_SHAPES = ("1p", "2p", "3p", "2i", "3i", "2in", "3in", "inp", "pin", "pni")
UNION_SHAPES = ("2u", "up")


def shape_arity(shape: str) -> tuple[int, int]:
    """``(constants, relations)`` a shape needs."""
    if shape not in _SHAPES:
        raise QueryValidationError(f"unknown query shape {shape!r}")
    n_const, n_rel, _ = _SHAPES[shape]
    return n_const, n_rel


class _SlotVocab:
    """Maps template slot names straight to the bound ids."""

    def __init__(self, mapping):
        self.mapping = mapping

    def __contains__(self, name):
        return name in self.mapping

    def __getitem__(self, name):
        return self.mapping[name]


def instantiate_shape(shape: str, constants: Sequence[int], relations: Sequence[int]) -> EFO1Query:
    """Ground a canonical shape with constant entity ids and relation ids (in slot order)."""
    n_const, n_rel = shape_arity(shape)
    if len(constants) != n_const or len(relations) != n_rel:
        raise QueryValidationError(
            f"shape {shape} needs {n_const} constants and {n_rel} relations, "
            f"got {len(constants)} and {len(relations)}"
        )
    if len(set(constants)) != len(constants):
        raise QueryValidationError(f"shape {shape} needs distinct constants, got {list(constants)}")
    ents = _SlotVocab({slot: int(c) for slot, c in zip("abc", constants)})
    rels = _SlotVocab({f"R{i}": int(r) for i, r in enumerate(relations)})
    formula = parse_formula(_SHAPES[shape][2], ents, rels)
    return EFO1Query(tuple(dnf_decompose(formula)), shape=shape)


def shape_template(shape: str) -> ConjunctiveQueryGraph:
    """Conjunctive skeleton used to ground a shape.

    Unions are grounded on their intersection counterpart (2u on 2i, up on ip), so
    every disjunct shares the grounded answer.
    """
    skeleton = {"2u": "2i", "up": "ip"}.get(shape, shape)
    n_const, n_rel = shape_arity(skeleton)
    q = instantiate_shape(skeleton, list(range(n_const)), list(range(n_rel)))
    return q.disjuncts[0]


# ----------------------------------------------------------------------------
# Serialization


@dataclass(frozen=True)
class QueryInstance:
    query: EFO1Query
    easy_answers: frozenset[int]
    hard_answers: frozenset[int]

    def __post_init__(self):
        object.__setattr__(self, "easy_answers", frozenset(int(x) for x in self.easy_answers))
        object.__setattr__(self, "hard_answers", frozenset(int(x) for x in self.hard_answers))
        if self.easy_answers & self.hard_answers:
            raise QueryValidationError("easy and hard answers overlap")

    @property
    def shape(self) -> str | None:
        return self.query.shape

    @property
    def answers(self) -> frozenset[int]:
        return self.easy_answers | self.hard_answers


def query_to_json(query: EFO1Query, easy=None, hard=None) -> dict:
    obj: dict = {}
    if query.shape is not None:
        obj["shape"] = query.shape
    obj["disjuncts"] = [cq.to_json() for cq in query.disjuncts]
    if easy is not None:
        obj["easy_answers"] = sorted(int(x) for x in easy)
    if hard is not None:
        obj["hard_answers"] = sorted(int(x) for x in hard)
    return obj


def query_from_json(obj: dict) -> EFO1Query:
    return EFO1Query(tuple(ConjunctiveQueryGraph.from_json(d) for d in obj["disjuncts"]), shape=obj.get("shape"))


def write_instances(path, instances: Iterable[QueryInstance]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as f:
        for inst in instances:
            f.write(json.dumps(query_to_json(inst.query, inst.easy_answers, inst.hard_answers)) + "\n")
            n += 1
    return n


def read_instances(path) -> list[QueryInstance]:
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                out.append(
                    QueryInstance(
                        query_from_json(obj),
                        frozenset(obj.get("easy_answers", ())),
                        frozenset(obj.get("hard_answers", ())),
                    )
                )
            except (KeyError, TypeError, json.JSONDecodeError) as exc:
                raise QueryValidationError(f"{path}:{lineno}: malformed query record ({exc})") from exc
    return out
