"""Filtered ranking metrics, per-shape reports and the conditional-passing cost comparison."""
from __future__ import annotations

import json
import logging
import time
import tracemalloc
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import kernels
from .engine import CLMPT, ForwardTrace, ModelConfig, TrainConfig, train
from .kg import KnowledgeGraph
from .predictor import ComplexEmbeddingTable
from .query import EPFO_SHAPES, NEGATION_SHAPES, SHAPES, EFO1Query, QueryInstance
from .symbolic import answer_query

log = logging.getLogger(__name__)

HITS_AT = (1, 3, 10)

Scorer = Callable[[Sequence[EFO1Query]], np.ndarray]


def filtered_rank(scores, target: int, other_answers=()) -> int:
    """Rank of ``target`` among the entities that are not other answers.

    Entities scoring strictly higher count against the target, as do entities
    with an equal score and a smaller id.
    """
    scores = np.asarray(scores, dtype=np.float64)
    n = scores.shape[0]
    if not 0 <= target < n:
        raise IndexError(f"target {target} out of range for {n} entities")
    mask = np.zeros(n, dtype=np.uint8)
    others = np.fromiter(other_answers, dtype=np.int64)
    if others.size:
        if (others < 0).any() or (others >= n).any():
            raise IndexError("other answer id out of range")
        if target in set(others.tolist()):
            raise ValueError(f"target {target} is listed among the other answers")
        mask[others] = 1
    return int(kernels.filtered_ranks(scores, np.array([target]), mask)[0])


def query_ranks(scores: np.ndarray, instance: QueryInstance) -> np.ndarray:
    """Filtered rank of every hard answer; all other answers (easy and hard) are filtered."""
    hard = np.array(sorted(instance.hard_answers), dtype=np.int64)
    mask = np.zeros(scores.shape[0], dtype=np.uint8)
    mask[list(instance.answers)] = 1
    # Each target is skipped by the kernel itself, so one shared mask serves all targets.
    return kernels.filtered_ranks(scores, hard, mask)


@dataclass
class RankingResult:
    shape: str
    ranks: np.ndarray

    def __post_init__(self):
        self.ranks = np.asarray(self.ranks, dtype=np.int64)
        if (self.ranks < 1).any():
            raise ValueError("ranks must be positive")

    @property
    def reciprocal(self) -> np.ndarray:
        return 1.0 / self.ranks


@dataclass
class MetricsReport:
    shapes: dict[str, dict[str, float]] = field(default_factory=dict)
    avg_p: dict[str, float] | None = None
    avg_n: dict[str, float] | None = None
    skipped: int = 0

    @staticmethod
    def metric_names() -> list[str]:
        return ["mrr"] + [f"hits@{k}" for k in HITS_AT]

    @classmethod
    def from_results(cls, results: dict[str, RankingResult], skipped: int = 0) -> "MetricsReport":
        shapes = {}
        for shape in sorted(results, key=_shape_order):
            ranks = results[shape].ranks
            row = {"mrr": float(np.mean(1.0 / ranks))}
            for k in HITS_AT:
                row[f"hits@{k}"] = float(np.mean(ranks <= k))
            row["pairs"] = int(ranks.size)
            shapes[shape] = row
        report = cls(shapes, skipped=skipped)
        report.avg_p = report._average(EPFO_SHAPES)
        report.avg_n = report._average(NEGATION_SHAPES)
        return report

    def _average(self, members) -> dict[str, float] | None:
        present = [s for s in members if s in self.shapes]
        if not present:
            return None
        return {m: float(np.mean([self.shapes[s][m] for s in present])) for m in self.metric_names()}

    def to_json(self) -> dict:
        return {"shapes": self.shapes, "avg_p": self.avg_p, "avg_n": self.avg_n, "skipped": self.skipped}

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n"

    def to_table(self) -> str:
        """Aligned text table in percent: one column per shape, then Avg_p and Avg_n."""
        cols = list(self.shapes) + [c for c, v in (("Avg_p", self.avg_p), ("Avg_n", self.avg_n)) if v]
        width = max(8, *(len(c) + 2 for c in cols))
        lines = ["metric".ljust(8) + "".join(c.rjust(width) for c in cols)]
        for m in self.metric_names():
            cells = []
            for c in cols:
                src = self.shapes.get(c) or (self.avg_p if c == "Avg_p" else self.avg_n)
                cells.append(f"{100 * src[m]:.2f}".rjust(width))
            lines.append(m.ljust(8) + "".join(cells))
        if self.skipped:
            lines.append(f"skipped {self.skipped} instance(s) without hard answers")
        return "\n".join(lines) + "\n"


def _shape_order(shape: str):
    return (SHAPES.index(shape), shape) if shape in SHAPES else (len(SHAPES), shape)


def evaluate(instances: Sequence[QueryInstance], scorer: Scorer, batch: int = 256) -> MetricsReport:
    """MRR and Hits@K over every (query, hard answer) pair, grouped by shape.

    Instances without hard answers are skipped and counted in ``report.skipped``.
    """
    usable = [inst for inst in instances if inst.hard_answers]
    skipped = len(instances) - len(usable)
    if skipped:
        log.warning("skipping %d instance(s) with no hard answers", skipped)
    ranks: dict[str, list[np.ndarray]] = {}
    for start in range(0, len(usable), batch):
        part = usable[start:start + batch]
        scores = np.asarray(scorer([inst.query for inst in part]), dtype=np.float64)
        if scores.shape[0] != len(part):
            raise ValueError(f"scorer returned {scores.shape[0]} rows for {len(part)} queries")
        for inst, row in zip(part, scores):
            ranks.setdefault(inst.shape or "?", []).append(query_ranks(row, inst))
    results = {s: RankingResult(s, np.concatenate(r)) for s, r in ranks.items()}
    return MetricsReport.from_results(results, skipped)


# ----------------------------------------------------------------------------
# Scorers


def model_scorer(model: CLMPT) -> Scorer:
    return model.score_queries


class SymbolicScorer:
    """Scores 1 for exact answers on ``kg`` and 0 elsewhere."""

    def __init__(self, kg: KnowledgeGraph):
        self.kg = kg

    def __call__(self, queries):
        out = np.zeros((len(queries), self.kg.entity_count))
        for i, q in enumerate(queries):
            out[i, list(answer_query(self.kg, q))] = 1.0
        return out


class RandomScorer:
    """Independent uniform scores from a seeded generator."""

    def __init__(self, entity_count: int, seed: int = 0):
        self.entity_count = entity_count
        self.rng = np.random.default_rng(seed)

    def __call__(self, queries):
        return self.rng.random((len(queries), self.entity_count))


def random_expected_mrr(instances: Sequence[QueryInstance], entity_count: int) -> dict[str, float]:
    """Exact per-shape MRR of a uniformly random ranking.

    A hard answer competes with ``m - 1`` unfiltered entities, so its rank is
    uniform on ``1..m`` and its expected reciprocal rank is ``H_m / m``.
    """
    out: dict[str, list[float]] = {}
    for inst in instances:
        m = entity_count - len(inst.answers) + 1
        value = float(np.sum(1.0 / np.arange(1, m + 1)) / m)
        out.setdefault(inst.shape or "?", []).extend([value] * len(inst.hard_answers))
    return {s: float(np.mean(v)) for s, v in out.items()}


# ----------------------------------------------------------------------------
# Cost of conditional passing


@dataclass
class CostReport:
    memory_reduction: float
    time_reduction: float
    message_counts: dict[str, tuple[int, int]]
    seconds: dict[str, list[float]]
    peak_bytes: dict[str, list[int]]

    def to_json(self) -> dict:
        d = asdict(self)
        d["message_counts"] = {s: {"conditional": c, "unconditional": u} for s, (c, u) in self.message_counts.items()}
        return d


def message_counts(instances: Sequence[QueryInstance], table: ComplexEmbeddingTable,
                   config: ModelConfig) -> dict[str, tuple[int, int]]:
    """Messages per forward pass of one query per shape, with and without conditional passing."""
    out = {}
    for inst in instances:
        shape = inst.shape or "?"
        if shape in out:
            continue
        counts = []
        for conditional in (True, False):
            model = CLMPT(table, replace(config, conditional_passing=conditional))
            total = 0
            for cq in inst.query.disjuncts:
                trace = ForwardTrace()
                model.forward([cq], trace=trace)
                total += trace.message_count
            counts.append(total)
        out[shape] = (counts[0], counts[1])
    return dict(sorted(out.items(), key=lambda kv: _shape_order(kv[0])))


def _run_workload(instances, table, config, train_config, conditional, measure_memory):
    model = CLMPT(table, replace(config, conditional_passing=conditional))
    if measure_memory:
        tracemalloc.start()
        try:
            train(instances, model, train_config)
            _, peak = tracemalloc.get_traced_memory()
        finally:
            tracemalloc.stop()
        return peak
    start = time.perf_counter()
    train(instances, model, train_config)
    return time.perf_counter() - start


def cost_comparison(instances: Sequence[QueryInstance], table: ComplexEmbeddingTable,
                    config: ModelConfig | None = None, train_config: TrainConfig | None = None,
                    repetitions: int = 3) -> CostReport:
    """Relative memory and time saved by conditional passing on one fixed training workload.

    Both fractions are ``(without - with) / without``, averaged over
    ``repetitions``. Time and traced peak memory come from separate runs so the
    allocation tracer does not distort the timings. A workload of zero steps
    reports exactly zero for both.
    """
    config = config or ModelConfig()
    train_config = train_config or TrainConfig()
    counts = message_counts(instances, table, config)
    seconds = {"conditional": [], "unconditional": []}
    peaks = {"conditional": [], "unconditional": []}
    if train_config.steps == 0:
        return CostReport(0.0, 0.0, counts, seconds, peaks)
    for _ in range(repetitions):
        for key, cond in (("conditional", True), ("unconditional", False)):
            seconds[key].append(_run_workload(instances, table, config, train_config, cond, False))
            peaks[key].append(_run_workload(instances, table, config, train_config, cond, True))
    t_c, t_u = np.mean(seconds["conditional"]), np.mean(seconds["unconditional"])
    m_c, m_u = np.mean(peaks["conditional"]), np.mean(peaks["unconditional"])
    return CostReport(float((m_u - m_c) / m_u), float((t_u - t_c) / t_u), counts, seconds, peaks)
