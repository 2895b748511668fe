"""Command-line pipelines: ingest, gen-queries, pretrain, train, eval, answer, bench-conditional, selftest."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .checks import SUITES, run_selftest
from .engine import CLMPT, ModelConfig, TrainConfig, train
from .evaluation import RandomScorer, SymbolicScorer, cost_comparison, evaluate, model_scorer
from .kg import KGError, KnowledgeGraph, Vocabulary, load_triples, split_edges, write_triples
from .predictor import ComplexEmbeddingTable, PretrainConfig, link_prediction_mrr, pretrain
from .query import (
    SHAPES,
    TRAIN_SHAPES,
    QueryError,
    parse_query,
    read_instances,
    write_instances,
)
from .symbolic import SamplingError, sample_instances, write_stats
from .synthetic import default_vocabularies, latent_rotation_kg

log = logging.getLogger("clmpt")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_MISSING_INPUT = 3
EXIT_MISMATCH = 4
EXIT_DATA = 5


class CLIError(Exception):
    code = EXIT_FAILURE


class ConfigError(CLIError):
    code = EXIT_CONFIG


class MissingInputError(CLIError):
    code = EXIT_MISSING_INPUT


class MismatchError(CLIError):
    code = EXIT_MISMATCH


_MODEL_KEYS = {f.name for f in fields(ModelConfig)} - {"seed"}
_TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"seed", "betas"}

_MODEL_DEFAULTS = {k: v for k, v in asdict(ModelConfig()).items() if k in _MODEL_KEYS}
_TRAIN_DEFAULTS = {k: v for k, v in asdict(TrainConfig()).items() if k in _TRAIN_KEYS}

DEFAULTS: dict[str, dict] = {
    "synth": {"entities": 200, "relations": 10, "phases": 3, "fanout": 3},
    "ingest": {"triples": None, "ratios": [0.9, 0.05, 0.05]},
    "gen-queries": {"data": None, "split": "test", "shapes": None, "count": 100},
    "pretrain": {"data": None, "rank": 32, "epochs": 30, "lr": 0.01, "batch": 256, "reg_weight": 1e-3},
    "train": {"data": None, "predictor": None, "queries": None, **_MODEL_DEFAULTS, **_TRAIN_DEFAULTS},
    "eval": {"data": None, "queries": None, "model": None, "oracle": False, "random": False},
    "answer": {"data": None, "model": None, "query": None, "top_k": 10},
    "bench-conditional": {"data": None, "predictor": None, "queries": None, "repetitions": 3,
                          **_MODEL_DEFAULTS, **_TRAIN_DEFAULTS, "steps": 20},
    "selftest": {"suite": None},
}
COMMON = {"seed": 0, "out": None}


# ----------------------------------------------------------------------------
# Configuration


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    """Defaults, then the config file (flat keys or a section named after the command), then flags."""
    cfg = {**COMMON, **DEFAULTS[command]}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise MissingInputError(f"config file not found: {path}")
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be an object")
        section = raw.get(command, {})
        if not isinstance(section, dict):
            raise ConfigError(f"{path}: section {command!r} must be an object")
        known = set(COMMON).union(*DEFAULTS.values())
        flat = {k: v for k, v in raw.items() if k not in DEFAULTS}
        unknown = (set(flat) - known) | (set(section) - set(cfg))
        if unknown:
            raise ConfigError(f"{path}: unknown key(s) for {command}: {sorted(unknown)}")
        # Flat keys may be shared by several commands; only this command's apply.
        cfg.update({k: v for k, v in flat.items() if k in cfg})
        cfg.update(section)
    for key in cfg:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    if cfg["out"] is None:
        cfg["out"] = str(Path("runs") / command)
    return cfg


def _model_config(cfg: dict) -> ModelConfig:
    mc = ModelConfig(**{k: cfg[k] for k in _MODEL_KEYS}, seed=cfg["seed"])
    try:
        mc.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return mc


def _check_width(mc: ModelConfig, table: ComplexEmbeddingTable) -> None:
    try:
        mc.validate(table.width)
    except ValueError as exc:
        raise ConfigError(f"model settings do not fit the predictor: {exc}") from exc


def _train_config(cfg: dict) -> TrainConfig:
    tc = TrainConfig(**{k: cfg[k] for k in _TRAIN_KEYS}, seed=cfg["seed"])
    if tc.steps < 0 or tc.batch < 1 or tc.lr <= 0 or tc.weight_decay < 0:
        raise ConfigError("steps must be >= 0, batch >= 1, lr > 0 and weight_decay >= 0")
    return tc


def _require(cfg: dict, *keys) -> None:
    missing = [k for k in keys if cfg.get(k) in (None, "")]
    if missing:
        raise ConfigError("missing required setting(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def _existing(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise MissingInputError(f"{what} not found: {p}")
    return p


def _prepare_out(cfg: dict) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", cfg)
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ----------------------------------------------------------------------------
# Data directory


class Dataset:
    """Vocabularies plus train / valid / test graphs of one ingested data directory."""

    def __init__(self, root):
        self.root = _existing(root, "data directory")
        self.entities = Vocabulary.load(_existing(self.root / "entities.txt", "entity vocabulary"))
        self.relations = Vocabulary.load(_existing(self.root / "relations.txt", "relation vocabulary"))
        self.splits: dict[str, KnowledgeGraph] = {}
        for split in ("train", "valid", "test"):
            n_e, n_r = len(self.entities), len(self.relations)
            kg, _, _ = load_triples(_existing(self.root / f"{split}.tsv", f"{split} triples"),
                                    self.entities, self.relations)
            if len(self.entities) != n_e or len(self.relations) != n_r:
                raise MismatchError(f"{split}.tsv uses names missing from the vocabularies")
            self.splits[split] = kg

    def graph(self, *splits) -> KnowledgeGraph:
        kg = self.splits[splits[0]]
        for s in splits[1:]:
            kg = kg.union(self.splits[s])
        return kg

    def digests(self) -> dict:
        return {"entity_vocab": self.entities.digest(), "relation_vocab": self.relations.digest()}

    def check(self, meta: dict, what: str) -> None:
        for key, digest in self.digests().items():
            if meta.get(key) != digest:
                raise MismatchError(f"{what} was built for a different {key.replace('_', ' ')}")


def _load_predictor(path, data: Dataset) -> ComplexEmbeddingTable:
    try:
        arrays, meta = ad.load_checkpoint(_existing(path, "predictor checkpoint"))
    except (ValueError, OSError) as exc:
        raise MismatchError(f"unreadable predictor checkpoint {path}: {exc}") from exc
    data.check(meta, "predictor checkpoint")
    return ComplexEmbeddingTable(arrays["entity_emb"], arrays["relation_emb"])


def _load_model(path, data: Dataset) -> CLMPT:
    try:
        model, meta = CLMPT.load(_existing(path, "model checkpoint"))
    except (ValueError, OSError, KeyError) as exc:
        raise MismatchError(f"unreadable model checkpoint {path}: {exc}") from exc
    data.check(meta, "model checkpoint")
    return model


# ----------------------------------------------------------------------------
# Subcommands


def cmd_synth(cfg: dict) -> int:
    out = _prepare_out(cfg)
    kg = latent_rotation_kg(cfg["entities"], cfg["relations"], cfg["phases"], cfg["fanout"], cfg["seed"])
    ents, rels = default_vocabularies(kg)
    write_triples(out / "triples.tsv", kg, ents, rels)
    print(f"wrote {len(kg.triples)} triples to {out / 'triples.tsv'}")
    return EXIT_OK


def cmd_ingest(cfg: dict) -> int:
    _require(cfg, "triples")
    ratios = cfg["ratios"]
    if isinstance(ratios, str):
        ratios = [float(x) for x in ratios.split(",")]
    cfg["ratios"] = list(ratios)
    kg, ents, rels = load_triples(_existing(cfg["triples"], "triple file"))
    parts = split_edges(kg, tuple(ratios), seed=cfg["seed"])
    out = _prepare_out(cfg)
    ents.save(out / "entities.txt")
    rels.save(out / "relations.txt")
    for name, part in zip(("train", "valid", "test"), parts):
        write_triples(out / f"{name}.tsv", part, ents, rels)
    sizes = {name: len(p.triples) for name, p in zip(("train", "valid", "test"), parts)}
    _write_json(out / "stats.json", {"entities": len(ents), "relations": len(rels), "triples": sizes})
    print(f"{len(ents)} entities, {len(rels)} relations; split sizes {sizes}")
    return EXIT_OK


def cmd_gen_queries(cfg: dict) -> int:
    _require(cfg, "data")
    data = Dataset(cfg["data"])
    split = cfg["split"]
    if split not in ("train", "valid", "test"):
        raise ConfigError(f"split must be train, valid or test, got {split!r}")
    shapes = cfg["shapes"] or (TRAIN_SHAPES if split == "train" else SHAPES)
    if isinstance(shapes, str):
        shapes = [s for s in shapes.split(",") if s]
    unknown = set(shapes) - set(SHAPES)
    if unknown:
        raise ConfigError(f"unknown shape(s): {sorted(unknown)}")
    cfg["shapes"] = list(shapes)
    if split == "train":
        full = observed = data.graph("train")
    elif split == "valid":
        full, observed = data.graph("train", "valid"), data.graph("train")
    else:
        full, observed = data.graph("train", "valid", "test"), data.graph("train", "valid")
    out = _prepare_out(cfg)
    instances = []
    for shape in shapes:
        seed = cfg["seed"] * len(SHAPES) + SHAPES.index(shape)
        instances += sample_instances(full, observed, shape, cfg["count"], seed, require_hard=split != "train")
    n = write_instances(out / "queries.jsonl", instances)
    write_stats(out / "stats.json", instances)
    print(f"wrote {n} {split} queries over {len(shapes)} shapes to {out / 'queries.jsonl'}")
    return EXIT_OK


def cmd_pretrain(cfg: dict) -> int:
    _require(cfg, "data")
    data = Dataset(cfg["data"])
    pc = PretrainConfig(rank=cfg["rank"], epochs=cfg["epochs"], lr=cfg["lr"], batch=cfg["batch"],
                        reg_weight=cfg["reg_weight"], seed=cfg["seed"])
    if pc.rank < 1 or pc.epochs < 0 or pc.lr <= 0 or pc.batch < 1 or pc.reg_weight < 0:
        raise ConfigError("rank >= 1, epochs >= 0, lr > 0, batch >= 1 and reg_weight >= 0 are required")
    out = _prepare_out(cfg)
    result = pretrain(data.graph("train"), pc)
    full = data.graph("train", "valid", "test")
    metrics = {"losses": result.losses}
    for split in ("valid", "test"):
        if data.splits[split].triples:
            metrics[f"{split}_mrr"] = link_prediction_mrr(result.table, data.splits[split], full)
    ad.save_checkpoint(out / "predictor.ckpt",
                       {"entity_emb": result.table.entity_emb, "relation_emb": result.table.relation_emb},
                       {"config": asdict(pc), **data.digests()})
    _write_json(out / "metrics.json", metrics)
    print("pretrained predictor: " + ", ".join(f"{k} {v:.4f}" for k, v in metrics.items() if k.endswith("mrr")))
    return EXIT_OK


def _read_queries(path) -> list:
    return read_instances(_existing(path, "query file"))


def cmd_train(cfg: dict) -> int:
    _require(cfg, "data", "predictor", "queries")
    data = Dataset(cfg["data"])
    mc, tc = _model_config(cfg), _train_config(cfg)
    table = _load_predictor(cfg["predictor"], data)
    _check_width(mc, table)
    instances = _read_queries(cfg["queries"])
    out = _prepare_out(cfg)
    model = CLMPT(table, mc)
    result = train(instances, model, tc)
    model.save(out / "model.ckpt", data.digests())
    _write_json(out / "losses.json", {"losses": result.losses})
    if result.losses:
        print(f"trained {tc.steps} steps; loss {result.losses[0]:.4f} -> {result.losses[-1]:.4f}")
    return EXIT_OK


def cmd_eval(cfg: dict) -> int:
    _require(cfg, "data", "queries")
    chosen = [k for k in ("model", "oracle", "random") if cfg[k]]
    if len(chosen) != 1:
        raise ConfigError("choose exactly one scorer: --model PATH, --oracle or --random")
    data = Dataset(cfg["data"])
    instances = _read_queries(cfg["queries"])
    if cfg["model"]:
        scorer = model_scorer(_load_model(cfg["model"], data))
    elif cfg["oracle"]:
        scorer = SymbolicScorer(data.graph("train", "valid", "test"))
    else:
        scorer = RandomScorer(len(data.entities), cfg["seed"])
    out = _prepare_out(cfg)
    report = evaluate(instances, scorer)
    (out / "report.json").write_text(report.dumps(), encoding="utf-8")
    (out / "report.txt").write_text(report.to_table(), encoding="utf-8")
    print(report.to_table(), end="")
    return EXIT_OK


def cmd_answer(cfg: dict) -> int:
    _require(cfg, "data", "model", "query")
    data = Dataset(cfg["data"])
    model = _load_model(cfg["model"], data)
    query = parse_query(cfg["query"], data.entities, data.relations)
    order, scores = model.answer(query)
    k = min(int(cfg["top_k"]), len(order))
    lines = [f"{'rank':>4}  {'entity':<24} {'score':>9}"]
    for i, e in enumerate(order[:k], start=1):
        lines.append(f"{i:>4}  {data.entities.name(int(e)):<24} {scores[e]:>9.4f}")
    text = "\n".join(lines) + "\n"
    out = _prepare_out(cfg)
    (out / "answer.txt").write_text(text, encoding="utf-8")
    print(text, end="")
    return EXIT_OK


def cmd_bench_conditional(cfg: dict) -> int:
    _require(cfg, "data", "predictor", "queries")
    data = Dataset(cfg["data"])
    mc, tc = _model_config(cfg), _train_config(cfg)
    table = _load_predictor(cfg["predictor"], data)
    _check_width(mc, table)
    instances = _read_queries(cfg["queries"])
    out = _prepare_out(cfg)
    report = cost_comparison(instances, table, mc, tc, repetitions=cfg["repetitions"])
    _write_json(out / "cost.json", report.to_json())
    print(f"memory reduction {100 * report.memory_reduction:.1f}%, time reduction {100 * report.time_reduction:.1f}%")
    print(f"{'shape':<6}{'with':>8}{'without':>9}")
    for shape, (c, u) in report.message_counts.items():
        print(f"{shape:<6}{c:>8}{u:>9}")
    return EXIT_OK


def cmd_selftest(cfg: dict) -> int:
    names = cfg["suite"]
    if isinstance(names, str):
        names = [names]
    try:
        results = run_selftest(names)
    except KeyError as exc:
        raise ConfigError(str(exc)) from exc
    out = _prepare_out(cfg)
    _write_json(out / "selftest.json", [asdict(r) for r in results])
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<24} {r.detail} ({r.seconds:.1f}s)")
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAILURE


COMMANDS = {
    "synth": cmd_synth,
    "ingest": cmd_ingest,
    "gen-queries": cmd_gen_queries,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "eval": cmd_eval,
    "answer": cmd_answer,
    "bench-conditional": cmd_bench_conditional,
    "selftest": cmd_selftest,
}


# ----------------------------------------------------------------------------
# Parser


def _add_model_args(p):
    p.add_argument("--layers", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--ffn-hidden", type=int)
    p.add_argument("--pooling", choices=("mean", "sum", "max"))
    p.add_argument("--conditional-passing", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--predictor-trainable", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--temperature", type=float)
    p.add_argument("--negatives", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--init-std", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--eps", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="clmpt", description="Answer first-order queries over an incomplete knowledge graph")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON config file (flags override it)")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="run directory")
        return p

    p = command("synth", "write a synthetic triple file")
    p.add_argument("--entities", type=int)
    p.add_argument("--relations", type=int)
    p.add_argument("--phases", type=int)
    p.add_argument("--fanout", type=int)

    p = command("ingest", "split a TSV triple file into train/valid/test graphs")
    p.add_argument("--triples", help="TAB-separated head, relation, tail file")
    p.add_argument("--ratios", help="train,valid,test fractions (default 0.9,0.05,0.05)")

    p = command("gen-queries", "sample query instances with easy/hard answers")
    p.add_argument("--data", help="ingested data directory")
    p.add_argument("--split", choices=("train", "valid", "test"))
    p.add_argument("--shapes", help="comma-separated shapes (default: training shapes or all 14)")
    p.add_argument("--count", type=int, help="instances per shape")

    p = command("pretrain", "fit the ComplEx link predictor")
    p.add_argument("--data")
    p.add_argument("--rank", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--reg-weight", type=float)

    p = command("train", "train the message-passing model")
    p.add_argument("--data")
    p.add_argument("--predictor", help="predictor checkpoint")
    p.add_argument("--queries", help="training queries (JSONL)")
    _add_model_args(p)

    p = command("eval", "filtered MRR / Hits@K report")
    p.add_argument("--data")
    p.add_argument("--queries")
    p.add_argument("--model", help="model checkpoint")
    p.add_argument("--oracle", action="store_true", default=None, help="score with exact symbolic answers")
    p.add_argument("--random", action="store_true", default=None, help="score uniformly at random")

    p = command("answer", "rank entities for one query")
    p.add_argument("--data")
    p.add_argument("--model")
    p.add_argument("--query", help='formula such as "r1(e3,x1) & r2(x1,y)"')
    p.add_argument("--top-k", type=int)

    p = command("bench-conditional", "time and memory saved by conditional passing")
    p.add_argument("--data")
    p.add_argument("--predictor")
    p.add_argument("--queries")
    p.add_argument("--repetitions", type=int)
    _add_model_args(p)

    p = command("selftest", "run the invariant suites")
    p.add_argument("--suite", action="append", choices=sorted(SUITES), help="run only this suite (repeatable)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args.command, args)
        return COMMANDS[args.command](cfg)
    except CLIError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except FileNotFoundError as exc:
        print(f"error: missing input: {exc}", file=sys.stderr)
        return EXIT_MISSING_INPUT
    except (KGError, QueryError, SamplingError) as exc:
        print(f"error: invalid data: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ValueError, RuntimeError, FloatingPointError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
