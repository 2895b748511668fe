"""ComplEx link predictor with N3 regularisation: scoring, truth values, pretraining, ranking."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import kernels
from .autodiff import Tape, Tensor
from .kg import KnowledgeGraph

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class RankingError(ValueError):
    pass


@dataclass
class ComplexEmbeddingTable:
    """Entity and relation rows of ``rank`` complex numbers stored as ``2 * rank`` interleaved reals."""

    entity_emb: np.ndarray
    relation_emb: np.ndarray

    def __post_init__(self):
        self.entity_emb = np.asarray(self.entity_emb, dtype=np.float64)
        self.relation_emb = np.asarray(self.relation_emb, dtype=np.float64)
        if self.entity_emb.ndim != 2 or self.relation_emb.ndim != 2:
            raise ValueError("embedding tables must be 2-D")
        if self.entity_emb.shape[1] != self.relation_emb.shape[1] or self.entity_emb.shape[1] % 2:
            raise ValueError("entity and relation rows must share an even width")

    @property
    def rank(self) -> int:
        return self.entity_emb.shape[1] // 2

    @property
    def width(self) -> int:
        return self.entity_emb.shape[1]

    @classmethod
    def initialize(cls, entity_count: int, relation_count: int, rank: int, seed: int = 0) -> "ComplexEmbeddingTable":
        """Uniform ``[-0.5/sqrt(rank), 0.5/sqrt(rank)]`` initial rows."""
        rng = np.random.default_rng(seed)
        bound = 0.5 / np.sqrt(rank)
        return cls(
            rng.uniform(-bound, bound, size=(entity_count, 2 * rank)),
            rng.uniform(-bound, bound, size=(relation_count, 2 * rank)),
        )

    def copy(self) -> "ComplexEmbeddingTable":
        return ComplexEmbeddingTable(self.entity_emb.copy(), self.relation_emb.copy())


def score(h, r, t):
    """ComplEx plausibility ``Re(<h * r, conj(t)>)``.

    Returns a float for array inputs and a Tensor when any input is a Tensor.
    """
    taped = any(isinstance(x, Tensor) for x in (h, r, t))
    h, r, t = ad.as_tensor(h), ad.as_tensor(r), ad.as_tensor(t)
    if not (h.shape[-1] == r.shape[-1] == t.shape[-1]):
        raise ad.ShapeError(f"score: complex dimensions differ {h.shape[-1]}, {r.shape[-1]}, {t.shape[-1]}")
    prod = ad.complex_hadamard(ad.complex_hadamard(h, r), ad.conjugate(t))
    out = ad.sum(prod[..., 0::2], axis=-1)
    if taped:
        return out
    return float(out.data) if out.data.ndim == 0 else out.data


def truth_value(h, r, t, negated: bool = False):
    """Sigmoid of the score; the negated atom takes ``1 - value``."""
    s = score(h, r, t)
    if isinstance(s, Tensor):
        v = ad.sigmoid(s)
        return 1.0 - v if negated else v
    v = ad._sigmoid(np.atleast_1d(np.asarray(s, dtype=np.float64)))
    v = 1.0 - v if negated else v
    return float(v[0]) if np.ndim(s) == 0 else v


def n3_penalty(rows):
    """Mean over rows of the summed cubed complex moduli."""
    taped = isinstance(rows, Tensor)
    rows = ad.as_tensor(rows)
    if rows.ndim == 1:
        rows = ad.reshape(rows, (1, -1))
    out = ad.mean(ad.cube_norm_penalty(rows))
    return out if taped else float(out.data)


@dataclass
class PretrainConfig:
    rank: int = 32
    epochs: int = 100
    lr: float = 0.01
    batch: int = 256
    reg_weight: float = 1e-3
    seed: int = 0
    sampled_softmax_threshold: int = 50_000
    sampled_negatives: int = 1024


@dataclass
class PretrainResult:
    table: ComplexEmbeddingTable
    losses: list[float] = field(default_factory=list)
    heldout_mrr: float | None = None
    config: dict = field(default_factory=dict)


def _cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    picked = logits[np.arange(len(targets)), targets]
    return ad.mean(ad.logsumexp(logits, axis=-1) - picked)


def _direction_loss(query: Tensor, candidates: Tensor, targets: np.ndarray) -> Tensor:
    return _cross_entropy(ad.matmul(query, ad.transpose(candidates, (1, 0))), targets)


def pretrain(train_kg: KnowledgeGraph, config: PretrainConfig | None = None,
             heldout: KnowledgeGraph | None = None, filter_kg: KnowledgeGraph | None = None) -> PretrainResult:
    """Fit ComplEx embeddings on one-hop triples.

    Each batch scores every entity as the tail of ``(h, r, ?)`` and as the head of
    ``(?, r, t)`` with a softmax cross-entropy, plus ``reg_weight`` times the N3
    penalty of the rows the batch touches. Above ``sampled_softmax_threshold``
    entities the candidates shrink to the batch targets plus uniform samples.
    When ``heldout`` is given, its filtered tail-prediction MRR is reported.
    """
    config = config or PretrainConfig()
    if not train_kg.triples:
        raise TrainingError("cannot pretrain on an empty graph")
    table = ComplexEmbeddingTable.initialize(train_kg.entity_count, train_kg.relation_count, config.rank, config.seed)
    rng = np.random.default_rng(config.seed + 1)
    ent = Tensor(table.entity_emb, requires_grad=True, name="entity_emb")
    rel = Tensor(table.relation_emb, requires_grad=True, name="relation_emb")
    store = ad.ParamStore({"entity_emb": ent, "relation_emb": rel})
    triples = train_kg.sorted_triples()
    n = train_kg.entity_count
    sampled = n > config.sampled_softmax_threshold
    losses = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(triples))
        total, batches = 0.0, 0
        for start in range(0, len(order), config.batch):
            batch = triples[order[start:start + config.batch]]
            h, r, t = batch[:, 0], batch[:, 1], batch[:, 2]
            if sampled:
                cand = np.unique(np.concatenate([h, t, rng.integers(0, n, config.sampled_negatives)]))
                tail_targets = np.searchsorted(cand, t)
                head_targets = np.searchsorted(cand, h)
            else:
                cand = None
                tail_targets, head_targets = t, h
            with Tape() as tape:
                eh, er, et = ad.take_rows(ent, h), ad.take_rows(rel, r), ad.take_rows(ent, t)
                candidates = ent if cand is None else ad.take_rows(ent, cand)
                loss = _direction_loss(ad.complex_hadamard(eh, er), candidates, tail_targets)
                loss = loss + _direction_loss(ad.complex_hadamard(et, ad.conjugate(er)), candidates, head_targets)
                if config.reg_weight:
                    reg = n3_penalty(eh) + n3_penalty(er) + n3_penalty(et)
                    loss = loss + reg * config.reg_weight
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingError(
                    f"non-finite pretraining loss at epoch {epoch}, batch {batches}: "
                    f"max |entity| {np.abs(ent.data).max():.3g}, max |relation| {np.abs(rel.data).max():.3g}"
                )
            grads = tape.backward(loss)
            ad.adamw_step(store, {"entity_emb": grads[ent], "relation_emb": grads[rel]}, lr=config.lr)
            total += value
            batches += 1
        losses.append(total / max(batches, 1))
        log.debug("pretrain epoch %d loss %.4f", epoch, losses[-1])
    result = PretrainResult(ComplexEmbeddingTable(ent.data, rel.data), losses, config=asdict(config))
    if heldout is not None and heldout.triples:
        known = filter_kg if filter_kg is not None else train_kg.union(heldout)
        result.heldout_mrr = link_prediction_mrr(result.table, heldout, known)
    return result


def tail_scores(table: ComplexEmbeddingTable, heads: np.ndarray, relations: np.ndarray) -> np.ndarray:
    """ComplEx scores of every entity as the tail of each ``(h, r)``."""
    q = ad.cmul(table.entity_emb[heads], table.relation_emb[relations])
    return q @ table.entity_emb.T


def link_prediction_mrr(table: ComplexEmbeddingTable, heldout: KnowledgeGraph, known: KnowledgeGraph) -> float:
    """Filtered tail-prediction MRR of ``heldout`` triples; every known true tail is filtered."""
    triples = heldout.sorted_triples()
    if not len(triples):
        raise ValueError("no held-out triples")
    scores = tail_scores(table, triples[:, 0], triples[:, 1])
    rr = np.empty(len(triples))
    for i, (h, r, t) in enumerate(triples):
        mask = np.zeros(table.entity_emb.shape[0], dtype=np.uint8)
        mask[list(known.fwd_index.get((int(h), int(r)), ()))] = 1
        mask[t] = 0
        rr[i] = 1.0 / kernels.filtered_ranks(scores[i], np.array([t]), mask)[0]
    return float(rr.mean())


def cosine_scores(query_emb: np.ndarray, entity_emb: np.ndarray) -> np.ndarray:
    """Cosine similarity of one or more query vectors against every entity row."""
    q = np.atleast_2d(np.asarray(query_emb, dtype=np.float64))
    qn = np.linalg.norm(q, axis=-1)
    if (qn == 0).any() or not np.isfinite(q).all():
        raise RankingError("query embedding must be finite with non-zero norm")
    en = np.linalg.norm(entity_emb, axis=-1)
    en = np.where(en > 0, en, 1.0)
    out = (q @ entity_emb.T) / (qn[:, None] * en[None, :])
    return out[0] if np.ndim(query_emb) == 1 else out


def order_by_score(scores: np.ndarray) -> np.ndarray:
    """Entity ids by descending score; equal scores keep ascending id order."""
    return np.argsort(-np.asarray(scores), kind="stable")


def rank_answers(query_emb, table: ComplexEmbeddingTable, metric: str = "cosine") -> np.ndarray:
    """All entity ids ordered by cosine similarity to ``query_emb`` (ties by id)."""
    if metric != "cosine":
        raise ValueError(f"unsupported ranking metric {metric!r}")
    q = np.asarray(query_emb.data if isinstance(query_emb, Tensor) else query_emb, dtype=np.float64)
    if q.ndim != 1:
        raise RankingError("rank_answers takes a single query vector")
    return order_by_score(cosine_scores(q, table.entity_emb))
