"""Query-graph message passing where only variables are updated, each by a transformer over its inbox.

Each layer sends a logical message along every query-graph edge into its
variable endpoints (constants receive nothing and keep their entity rows),
then re-encodes every variable from the set of its incoming messages plus its
own previous state. The free variable's state after ``L`` layers, where ``L``
is the largest constant-to-free distance, is the query embedding.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .predictor import ComplexEmbeddingTable, order_by_score
from .query import (
    CONSTANT,
    FREE,
    ConjunctiveQueryGraph,
    EFO1Query,
    QueryInstance,
    free_variable_depth,
)

log = logging.getLogger(__name__)

HEAD_TO_TAIL = "h->t"
TAIL_TO_HEAD = "t->h"
POOLINGS = ("mean", "sum", "max")


class ModelError(RuntimeError):
    pass


class TrainingError(ModelError):
    pass


@dataclass
class ModelConfig:
    layers: int = 2
    heads: int = 4
    ffn_hidden: int = 256
    pooling: str = "mean"
    conditional_passing: bool = True
    predictor_trainable: bool = True
    temperature: float = 0.05
    negatives: int = 128
    dropout: float = 0.0
    init_std: float = 0.02
    seed: int = 0

    def validate(self, width: int | None = None) -> None:
        if self.pooling not in POOLINGS:
            raise ValueError(f"pooling must be one of {POOLINGS}, got {self.pooling!r}")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.negatives < 1:
            raise ValueError("need at least one negative sample")
        if self.layers < 1 or self.heads < 1 or self.ffn_hidden < 1:
            raise ValueError("layers, heads and ffn_hidden must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if width is not None and width % self.heads:
            raise ValueError(f"model width {width} is not divisible by {self.heads} heads")

    @classmethod
    def from_dict(cls, obj: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in obj.items() if k in names})


# ----------------------------------------------------------------------------
# Logical messages


def encode_message(neighbor, relation, direction: str, negated) -> Tensor | np.ndarray:
    """One-hop inference along an atom, with all closed-form denominators set to 1.

    ``t->h`` (the neighbour is the tail) gives ``conj(r) * t``; ``h->t`` gives
    ``r * h``. A negated atom flips the sign.
    """
    taped = isinstance(neighbor, Tensor) or isinstance(relation, Tensor)
    nb, rel = ad.as_tensor(neighbor), ad.as_tensor(relation)
    if nb.shape[-1] != rel.shape[-1]:
        raise ad.ShapeError(f"encode_message: width {nb.shape[-1]} vs relation width {rel.shape[-1]}")
    if direction == TAIL_TO_HEAD:
        out = ad.complex_hadamard(ad.conjugate(rel), nb)
    elif direction == HEAD_TO_TAIL:
        out = ad.complex_hadamard(rel, nb)
    else:
        raise ValueError(f"direction must be {HEAD_TO_TAIL!r} or {TAIL_TO_HEAD!r}, got {direction!r}")
    if negated:
        out = -out
    return out if taped else out.data


# ----------------------------------------------------------------------------
# Transformer encoder


def gelu(x: Tensor) -> Tensor:
    return x * ad.sigmoid(x * 1.702)


class TransformerEncoder:
    """Pre-norm encoder blocks (self-attention, then feed-forward, each residual).

    There is no positional encoding and no final norm.
    """

    def __init__(self, width: int, layers: int = 2, heads: int = 4, ffn_hidden: int = 256,
                 init_std: float = 0.02, seed: int = 0, dropout: float = 0.0):
        if width % heads:
            raise ValueError(f"width {width} not divisible by {heads} heads")
        self.width, self.layers, self.heads, self.ffn_hidden = width, layers, heads, ffn_hidden
        self.dropout = dropout
        rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}

        def normal(*shape):
            return rng.normal(0.0, init_std, size=shape)

        for i in range(layers):
            p = f"enc.{i}."
            self.params[p + "ln1.g"] = np.ones(width)
            self.params[p + "ln1.b"] = np.zeros(width)
            self.params[p + "attn.w_qkv"] = normal(width, 3 * width)
            self.params[p + "attn.b_qkv"] = np.zeros(3 * width)
            self.params[p + "attn.w_out"] = normal(width, width)
            self.params[p + "attn.b_out"] = np.zeros(width)
            self.params[p + "ln2.g"] = np.ones(width)
            self.params[p + "ln2.b"] = np.zeros(width)
            self.params[p + "ffn.w1"] = normal(width, ffn_hidden)
            self.params[p + "ffn.b1"] = np.zeros(ffn_hidden)
            self.params[p + "ffn.w2"] = normal(ffn_hidden, width)
            self.params[p + "ffn.b2"] = np.zeros(width)
        self.params = {k: Tensor(v, requires_grad=True, name=k) for k, v in self.params.items()}

    def _drop(self, x: Tensor, rng) -> Tensor:
        if rng is None or not self.dropout:
            return x
        keep = (rng.random(x.shape) >= self.dropout) / (1.0 - self.dropout)
        return x * Tensor(keep)

    def attention(self, x: Tensor, i: int) -> Tensor:
        p = self.params
        b, n, w = x.shape
        h, dh = self.heads, w // self.heads
        qkv = ad.matmul(x, p[f"enc.{i}.attn.w_qkv"]) + p[f"enc.{i}.attn.b_qkv"]
        qkv = ad.transpose(ad.reshape(qkv, (b, n, 3, h, dh)), (2, 0, 3, 1, 4))  # (3, b, h, n, dh)
        q, k, v = qkv[0], qkv[1], qkv[2]
        att = ad.softmax(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh)), axis=-1)
        out = ad.reshape(ad.transpose(ad.matmul(att, v), (0, 2, 1, 3)), (b, n, w))
        return ad.matmul(out, p[f"enc.{i}.attn.w_out"]) + p[f"enc.{i}.attn.b_out"]

    def __call__(self, x: Tensor, rng=None) -> Tensor:
        """Encode a batch of sets shaped ``(batch, set_size, width)``."""
        p = self.params
        for i in range(self.layers):
            h = ad.layer_norm(x, p[f"enc.{i}.ln1.g"], p[f"enc.{i}.ln1.b"])
            x = x + self._drop(self.attention(h, i), rng)
            h = ad.layer_norm(x, p[f"enc.{i}.ln2.g"], p[f"enc.{i}.ln2.b"])
            f = ad.matmul(gelu(ad.matmul(h, p[f"enc.{i}.ffn.w1"]) + p[f"enc.{i}.ffn.b1"]), p[f"enc.{i}.ffn.w2"])
            x = x + self._drop(f + p[f"enc.{i}.ffn.b2"], rng)
        return x


def _canonical_order(x: np.ndarray) -> np.ndarray:
    """Per-set lexicographic row order, so the result cannot depend on input order."""
    keys = np.moveaxis(x[..., ::-1], -1, 0)  # last key is primary for lexsort
    return np.lexsort(keys, axis=-1)


def node_update(messages, node_emb, encoder: TransformerEncoder, pooling: str = "mean", rng=None) -> Tensor:
    """Encode ``{messages..., node_emb}`` as a set and pool it into the new node state.

    Accepts one node (``messages`` ``(k, w)``, ``node_emb`` ``(w,)``) or a batch
    (``(b, k, w)`` and ``(b, w)``). The set is sorted into a canonical row order
    before encoding, which makes the output bitwise independent of message order.
    """
    messages, node_emb = ad.as_tensor(messages), ad.as_tensor(node_emb)
    single = node_emb.ndim == 1
    if single:
        messages = ad.reshape(messages, (1,) + messages.shape)
        node_emb = ad.reshape(node_emb, (1,) + node_emb.shape)
    if messages.ndim != 3 or messages.shape[1] < 1:
        raise ad.ContractError("node_update needs at least one message per node")
    b, k, w = messages.shape
    if node_emb.shape != (b, w):
        raise ad.ShapeError(f"node_update: node embedding {node_emb.shape} does not match messages {messages.shape}")
    x = ad.concat([messages, ad.reshape(node_emb, (b, 1, w))], axis=1)
    perm = _canonical_order(x.data)
    x = x[np.arange(b)[:, None], perm]
    y = encoder(x, rng)
    if pooling == "mean":
        out = ad.mean(y, axis=1)
    elif pooling == "sum":
        out = ad.sum(y, axis=1)
    elif pooling == "max":
        out = ad.max(y, axis=1)
    else:
        raise ValueError(f"unknown pooling {pooling!r}")
    return ad.reshape(out, (w,)) if single else out


# ----------------------------------------------------------------------------
# Message passing


@dataclass
class ForwardTrace:
    """What one forward pass did, for structural checks."""

    depth: int = 0
    message_count: int = 0
    received: dict[int, int] = field(default_factory=dict)
    updated: set = field(default_factory=set)
    encoder_ids: list[int] = field(default_factory=list)
    initial_states: list = field(default_factory=list)
    final_states: list = field(default_factory=list)


def incidence_plan(cq: ConjunctiveQueryGraph, conditional: bool) -> dict[int, list[tuple[int, int, str]]]:
    """For every receiving node, its incoming ``(edge index, sender, direction)`` list.

    With ``conditional`` only variables receive; otherwise every node does.
    """
    plan: dict[int, list[tuple[int, int, str]]] = {}
    for node in cq.nodes:
        if conditional and node.kind == CONSTANT:
            continue
        plan[node.node_id] = []
    for j, e in enumerate(cq.edges):
        if e.tail in plan:
            plan[e.tail].append((j, e.head, HEAD_TO_TAIL))
        if e.head in plan:
            plan[e.head].append((j, e.tail, TAIL_TO_HEAD))
    return {v: inc for v, inc in plan.items() if inc}


def expected_message_count(cq: ConjunctiveQueryGraph, conditional: bool) -> int:
    """Closed form: layers times the number of (edge, receiving endpoint) incidences."""
    receivers = [n.node_id for n in cq.nodes if not (conditional and n.kind == CONSTANT)]
    per_layer = sum((e.head in receivers) + (e.tail in receivers) for e in cq.edges)
    return free_variable_depth(cq) * per_layer


class CLMPT:
    """Model state: embedding tables, the two variable embeddings and the shared encoder."""

    def __init__(self, table: ComplexEmbeddingTable, config: ModelConfig | None = None):
        self.config = config or ModelConfig()
        width = table.width
        self.config.validate(width)
        trainable = self.config.predictor_trainable
        self.entity_emb = Tensor(table.entity_emb.copy(), requires_grad=trainable, name="entity_emb")
        self.relation_emb = Tensor(table.relation_emb.copy(), requires_grad=trainable, name="relation_emb")
        rng = np.random.default_rng(self.config.seed)
        bound = 0.5 / math.sqrt(table.rank)
        self.var_x = Tensor(rng.uniform(-bound, bound, width), requires_grad=True, name="var_x")
        self.var_y = Tensor(rng.uniform(-bound, bound, width), requires_grad=True, name="var_y")
        self.encoder = TransformerEncoder(
            width, self.config.layers, self.config.heads, self.config.ffn_hidden,
            self.config.init_std, seed=self.config.seed + 1, dropout=self.config.dropout,
        )

    @property
    def width(self) -> int:
        return self.entity_emb.shape[1]

    @property
    def entity_count(self) -> int:
        return self.entity_emb.shape[0]

    @property
    def table(self) -> ComplexEmbeddingTable:
        return ComplexEmbeddingTable(self.entity_emb.data, self.relation_emb.data)

    def parameters(self) -> dict[str, Tensor]:
        """Trainable parameters by name."""
        params = {"var_x": self.var_x, "var_y": self.var_y, **self.encoder.params}
        if self.config.predictor_trainable:
            params["entity_emb"] = self.entity_emb
            params["relation_emb"] = self.relation_emb
        return params

    def arrays(self) -> dict[str, np.ndarray]:
        out = {k: t.data for k, t in self.encoder.params.items()}
        out.update(var_x=self.var_x.data, var_y=self.var_y.data,
                   entity_emb=self.entity_emb.data, relation_emb=self.relation_emb.data)
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        targets = {"var_x": self.var_x, "var_y": self.var_y, "entity_emb": self.entity_emb,
                   "relation_emb": self.relation_emb, **self.encoder.params}
        missing = set(targets) - set(arrays)
        if missing:
            raise ModelError(f"checkpoint lacks parameters: {sorted(missing)}")
        for name, t in targets.items():
            if arrays[name].shape != t.shape:
                raise ModelError(f"parameter {name}: checkpoint shape {arrays[name].shape} != model {t.shape}")
            t.data = np.array(arrays[name], dtype=np.float64)

    # -- forward -----------------------------------------------------------

    def forward(self, cqs: Sequence[ConjunctiveQueryGraph], trace: ForwardTrace | None = None,
                rng=None) -> Tensor:
        """Free-variable embeddings ``(batch, width)`` for graphs sharing one topology."""
        if not cqs:
            raise ValueError("empty batch")
        template = cqs[0]
        key = template.structure_key()
        for cq in cqs[1:]:
            if cq.structure_key() != key:
                raise ModelError("forward batches must share one query topology")
        template.validate()
        depth = free_variable_depth(template)
        b = len(cqs)
        conditional = self.config.conditional_passing
        zeros = np.zeros(b, dtype=np.int64)
        states: list[Tensor] = []
        for node in template.nodes:
            if node.kind == CONSTANT:
                states.append(ad.take_rows(self.entity_emb, [cq.nodes[node.node_id].entity for cq in cqs]))
            elif node.kind == FREE:
                states.append(ad.take_rows(ad.reshape(self.var_y, (1, -1)), zeros))
            else:
                states.append(ad.take_rows(ad.reshape(self.var_x, (1, -1)), zeros))
        relations = [ad.take_rows(self.relation_emb, [cq.edges[j].relation for cq in cqs])
                     for j in range(len(template.edges))]
        plan = incidence_plan(template, conditional)
        if trace is not None:
            trace.depth = depth
            trace.received = {n.node_id: 0 for n in template.nodes}
            trace.initial_states = [st.data.copy() for st in states]
        for _ in range(depth):
            new_states = list(states)
            for v, incoming in plan.items():
                msgs = [
                    encode_message(states[u], relations[j], direction, template.edges[j].negated)
                    for j, u, direction in incoming
                ]
                new_states[v] = node_update(ad.stack(msgs, axis=1), states[v], self.encoder,
                                            self.config.pooling, rng)
                if trace is not None:
                    trace.message_count += len(msgs)
                    trace.received[v] += len(msgs)
                    trace.updated.add(v)
            if trace is not None:
                trace.encoder_ids.append(id(self.encoder))
            states = new_states
        if trace is not None:
            trace.final_states = [st.data.copy() for st in states]
        return states[template.free_node]

    def embed_graphs(self, cqs: Sequence[ConjunctiveQueryGraph], chunk: int = 512) -> np.ndarray:
        """Free-variable embeddings for arbitrary graphs, batched by topology (no tape)."""
        out = np.empty((len(cqs), self.width))
        groups: dict[tuple, list[int]] = {}
        for i, cq in enumerate(cqs):
            groups.setdefault(cq.structure_key(), []).append(i)
        for idx in groups.values():
            for s in range(0, len(idx), chunk):
                part = idx[s:s + chunk]
                out[part] = self.forward([cqs[i] for i in part]).data
        return out

    def score_queries(self, queries: Sequence[EFO1Query]) -> np.ndarray:
        """Per-entity scores ``(queries, entities)``: max over disjuncts of cosine similarity."""
        flat, owner = [], []
        for qi, q in enumerate(queries):
            for cq in q.disjuncts:
                flat.append(cq)
                owner.append(qi)
        emb = self.embed_graphs(flat)
        ent = self.entity_emb.data
        norms = np.linalg.norm(emb, axis=1)
        if (norms == 0).any():
            raise ModelError("zero-norm query embedding")
        en = np.linalg.norm(ent, axis=1)
        cos = (emb @ ent.T) / (norms[:, None] * np.where(en > 0, en, 1.0)[None, :])
        scores = np.full((len(queries), ent.shape[0]), -np.inf)
        for row, qi in enumerate(owner):
            np.maximum(scores[qi], cos[row], out=scores[qi])
        return scores

    def answer(self, query: EFO1Query) -> tuple[np.ndarray, np.ndarray]:
        """Entity ids ranked by score (ties by id) and the per-entity scores."""
        scores = self.score_queries([query])[0]
        return order_by_score(scores), scores

    # -- persistence -------------------------------------------------------

    def save(self, path, metadata: dict | None = None) -> None:
        meta = {"config": asdict(self.config), **(metadata or {})}
        ad.save_checkpoint(path, self.arrays(), meta)
        with open(str(path) + ".json", "w", encoding="utf-8") as f:
            json.dump(meta, f, indent=2, sort_keys=True)
            f.write("\n")

    @classmethod
    def load(cls, path) -> tuple["CLMPT", dict]:
        arrays, meta = ad.load_checkpoint(path)
        config = ModelConfig.from_dict(meta.get("config", {}))
        model = cls(ComplexEmbeddingTable(arrays["entity_emb"], arrays["relation_emb"]), config)
        model.load_arrays(arrays)
        return model, meta


# ----------------------------------------------------------------------------
# Training


def nce_terms(pred, positive, negatives, temperature: float) -> Tensor:
    """Per-query contrastive losses ``-log(F(pos) / (F(pos) + sum F(neg)))``, ``F = exp(cos / T)``."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    pred, positive, negatives = ad.as_tensor(pred), ad.as_tensor(positive), ad.as_tensor(negatives)
    if negatives.ndim != 3 or negatives.shape[1] < 1:
        raise ValueError("negatives must be shaped (batch, K, width) with K >= 1")
    b, _, w = negatives.shape
    pos = ad.cosine_similarity(pred, positive)  # (b,)
    neg = ad.cosine_similarity(ad.reshape(pred, (b, 1, w)), negatives)  # (b, K)
    # Logits relative to the positive: the positive's own entry is exactly zero.
    rel = (neg - ad.reshape(pos, (b, 1))) * (1.0 / temperature)
    return ad.logsumexp(ad.concat([Tensor(np.zeros((b, 1))), rel], axis=1), axis=1)


def nce_loss(pred, positive, negatives, temperature: float) -> Tensor:
    """Batch mean of :func:`nce_terms`; single vectors are treated as a batch of one."""
    pred, positive, negatives = ad.as_tensor(pred), ad.as_tensor(positive), ad.as_tensor(negatives)
    if pred.ndim == 1:
        pred = ad.reshape(pred, (1, -1))
        positive = ad.reshape(positive, (1, -1))
        negatives = ad.reshape(negatives, (1,) + negatives.shape)
    return ad.mean(nce_terms(pred, positive, negatives, temperature))


@dataclass
class TrainConfig:
    steps: int = 2000
    batch: int = 64
    lr: float = 1e-3
    weight_decay: float = 1e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0


@dataclass
class TrainResult:
    losses: list[float]
    steps: int


def _group_by_topology(cqs):
    groups: dict[tuple, list[int]] = {}
    for i, cq in enumerate(cqs):
        groups.setdefault(cq.structure_key(), []).append(i)
    return list(groups.values())


def train(instances: Sequence[QueryInstance], model: CLMPT, config: TrainConfig | None = None) -> TrainResult:
    """Optimise the model with the contrastive objective and AdamW.

    Each step draws a batch of queries, one answer per query as the positive and
    ``K`` uniformly drawn entities as noise, where ``K`` is capped at
    ``entities - 1``. Embedding tables are updated only when the model's
    predictor is trainable.
    """
    config = config or TrainConfig()
    if not instances:
        raise TrainingError("no training instances")
    for inst in instances:
        if len(inst.query.disjuncts) != 1:
            raise TrainingError(f"training queries must be conjunctive, got shape {inst.shape}")
        if not inst.answers:
            raise TrainingError(f"training query of shape {inst.shape} has no answers")
    rng = np.random.default_rng(config.seed)
    drop_rng = np.random.default_rng(config.seed + 7919) if model.config.dropout else None
    store = ad.ParamStore(model.parameters())
    k = min(model.config.negatives, model.entity_count - 1)
    answer_lists = [np.array(sorted(inst.answers), dtype=np.int64) for inst in instances]
    losses = []
    n = len(instances)
    for step in range(config.steps):
        batch = rng.choice(n, size=min(config.batch, n), replace=False)
        cqs = [instances[i].query.disjuncts[0] for i in batch]
        positives = np.array([answer_lists[i][rng.integers(len(answer_lists[i]))] for i in batch])
        negatives = rng.integers(0, model.entity_count, size=(len(batch), k))
        groups = _group_by_topology(cqs)
        order = np.concatenate(groups)
        with Tape() as tape:
            preds = ad.concat([model.forward([cqs[i] for i in g], rng=drop_rng) for g in groups], axis=0)
            pos = ad.take_rows(model.entity_emb, positives[order])
            neg = ad.take_rows(model.entity_emb, negatives[order])
            terms = nce_terms(preds, pos, neg, model.config.temperature)
            loss = ad.mean(terms)
        value = loss.item()
        if not np.isfinite(value):
            bad = sorted({instances[batch[order[i]]].shape or "?" for i in np.flatnonzero(~np.isfinite(terms.data))})
            raise TrainingError(f"non-finite loss at step {step}; offending shapes: {bad}")
        grads = tape.backward(loss)
        ad.adamw_step(store, {name: grads[t] for name, t in store.params.items() if t in grads},
                      lr=config.lr, betas=config.betas, eps=config.eps, weight_decay=config.weight_decay)
        losses.append(value)
        if step % 100 == 0:
            log.debug("step %d loss %.4f", step, value)
    return TrainResult(losses, config.steps)
