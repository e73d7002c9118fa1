"""Command-line driver: build-kb, train-retriever, retrieve, generate, evaluate, stats."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Optional

from . import evaluation, knowledge_base, llm, pipeline, retriever
from .config import RunConfig, load_config
from .dataset import Dataset, load_dataset
from .errors import LineageError, SqlkbError
from .knowledge_base import KbBuildConfig, KnowledgeBase
from .llm import LlmConfig, LlmClient
from .retriever import EmbeddingProvider, ProjectionHead, TrainConfig, TrainingPair

logger = logging.getLogger(__name__)

KB_FILE = "kb.jsonl"
HEAD_FILE = "head.json"
OUTPUTS_FILE = "outputs.jsonl"
REPORT_JSON = "report.json"
REPORT_TXT = "report.txt"
LEDGER_FILE = "llm_ledger.jsonl"


def _provider(cfg: RunConfig) -> EmbeddingProvider:
    rc = cfg["retriever"]
    return EmbeddingProvider(
        name=rc["backend"],
        dim=rc["dim"],
        backend="http" if rc["backend"] == "http" else "hash",
        endpoint=rc["endpoint"] or None,
    )


def _llm_client(cfg: RunConfig) -> LlmClient:
    lc = cfg["llm"]
    config = LlmConfig(
        backend=lc["backend"],
        model=lc["model"],
        endpoint=lc["endpoint"] or os.environ.get(llm.ENDPOINT_ENV, ""),
        api_key=os.environ.get(llm.API_KEY_ENV, ""),
        temperature=lc["temperature"],
        max_tokens=lc["max_tokens"],
        timeout=lc["timeout"],
    )
    if config.backend == "mock":
        if lc["fixture"]:
            return llm.replay_client(config, cfg.path(lc["fixture"]))
        return LlmClient(config, fallback=llm.synthetic_completer)
    return LlmClient(config)


def _train_dataset(cfg: RunConfig) -> Dataset:
    return load_dataset(
        cfg.path(cfg["dataset"]["train"]),
        db_dir=cfg.path(cfg["dataset"]["db_dir"]),
        split="train",
    )


def _test_dataset(cfg: RunConfig) -> Dataset:
    return load_dataset(
        cfg.path(cfg["dataset"]["test"]),
        db_dir=cfg.path(cfg["dataset"]["db_dir"]),
        split="test",
    )


def _load_head(cfg: RunConfig) -> Optional[ProjectionHead]:
    path = cfg.workdir / HEAD_FILE
    if not cfg["retriever"]["use_head"] or not path.exists():
        return None
    head, _ = ProjectionHead.load(path)
    return head


def _check_lineage(cfg: RunConfig, artifact_hash: Optional[str], what: str, force: bool) -> None:
    if artifact_hash is None:
        return
    if artifact_hash != cfg.config_hash:
        msg = (
            f"{what} was built under config hash {artifact_hash}, "
            f"current is {cfg.config_hash}"
        )
        if force:
            logger.warning("%s (continuing due to --force)", msg)
        else:
            raise LineageError(msg + " (use --force to override)")


def cmd_build_kb(cfg: RunConfig, args: argparse.Namespace) -> int:
    dataset = _train_dataset(cfg)
    kb_cfg = KbBuildConfig(
        few_shot_k=cfg["kb"]["few_shot_k"],
        iterations=cfg["kb"]["iterations"],
        seed=cfg.seed,
        prompt_budget=cfg["kb"]["prompt_budget"],
    )
    kb = knowledge_base.init_kb(dataset, kb_cfg)
    print(f"seeded {len(kb)} entries from dataset evidence")
    if kb_cfg.iterations > 0:
        client = _llm_client(cfg)
        kb = knowledge_base.expand_kb(kb, dataset, client, _provider(cfg), kb_cfg)
        client.ledger.save(cfg.workdir / LEDGER_FILE)
    out = cfg.workdir / KB_FILE
    knowledge_base.save_kb(kb, out, config_hash=cfg.config_hash)
    stats = knowledge_base.kb_stats(kb)
    print(f"knowledge base written to {out}: {stats.total} entries "
          f"({stats.by_source.get('dataset', 0)} dataset, "
          f"{stats.by_source.get('generated', 0)} generated)")
    return 0


def cmd_train_retriever(cfg: RunConfig, args: argparse.Namespace) -> int:
    dataset = _train_dataset(cfg)
    pairs = [
        TrainingPair(query=rec.query.text, positive=rec.knowledge)
        for rec in dataset.records
        if rec.knowledge is not None
    ]
    provider = _provider(cfg)
    rc = cfg["retriever"]
    train_cfg = TrainConfig(
        batch_size=rc["batch_size"],
        epochs=rc["epochs"],
        lr=rc["lr"],
        tau=rc["tau"],
        seed=cfg.seed,
        dim_out=rc["head_dim"] or None,
        holdout_fraction=rc["holdout_fraction"],
    )
    head = retriever.train_head(pairs, provider, train_cfg)
    out = cfg.workdir / HEAD_FILE
    head.save(out, provider.fingerprint, config_hash=cfg.config_hash)
    print(f"projection head ({head.dim_in}x{head.dim_out}, tau={head.tau}) "
          f"trained on {len(pairs)} pairs; written to {out}")
    return 0


def _load_kb(cfg: RunConfig, force: bool) -> KnowledgeBase:
    path = cfg.workdir / KB_FILE
    if not path.exists():
        raise SqlkbError(f"missing artifact: {path} (run build-kb first)")
    header = knowledge_base.kb_header(path)
    _check_lineage(cfg, header.get("config_hash"), "knowledge base", force)
    return knowledge_base.load_kb(path)


def cmd_retrieve(cfg: RunConfig, args: argparse.Namespace) -> int:
    kb = _load_kb(cfg, args.force)
    provider = _provider(cfg)
    head = _load_head(cfg)
    index = retriever.build_index(kb, provider, head)
    results = retriever.retrieve(
        args.query, index, cfg["pipeline"]["top_j"], provider, head
    )
    for entry, score in results:
        print(f"{score:.4f}  {entry.id}  {entry.text}")
    return 0


def cmd_generate(cfg: RunConfig, args: argparse.Namespace) -> int:
    kb = _load_kb(cfg, args.force)
    provider = _provider(cfg)
    head = _load_head(cfg)
    index = retriever.build_index(kb, provider, head)
    client = _llm_client(cfg)
    pc = cfg["pipeline"]
    pipe_cfg = pipeline.PipelineConfig(
        top_j=pc["top_j"],
        budget=pc["budget"],
        use_refinement=pc["use_refinement"],
        few_shot_k=pc["few_shot_k"],
        seed=cfg.seed,
    )
    outputs = pipeline.run_pipeline(
        _test_dataset(cfg), _train_dataset(cfg), index, client, provider, pipe_cfg, head
    )
    out = cfg.workdir / OUTPUTS_FILE
    pipeline.save_outputs(outputs, out, config_hash=cfg.config_hash)
    client.ledger.save(cfg.workdir / LEDGER_FILE)
    failed = sum(1 for o in outputs if o.error)
    print(f"{len(outputs)} outputs written to {out} ({failed} failed)")
    return 0


def cmd_evaluate(cfg: RunConfig, args: argparse.Namespace) -> int:
    out_path = cfg.workdir / OUTPUTS_FILE
    if not out_path.exists():
        raise SqlkbError(f"missing artifact: {out_path} (run generate first)")
    outputs, header = pipeline.load_outputs(out_path)
    _check_lineage(cfg, header.get("config_hash"), "outputs file", args.force)
    kb = _load_kb(cfg, args.force)
    provider = _provider(cfg)
    head = _load_head(cfg)
    test = _test_dataset(cfg)
    ec = cfg["eval"]
    eval_cfg = evaluation.EvalConfig(
        timeout=ec["timeout"],
        timing_runs=ec["timing_runs"],
        clip_max=ec["clip_max"],
        deterministic_timing=ec["deterministic_timing"],
    )
    report = evaluation.evaluate_run(outputs, test, eval_cfg, provider)
    report.config_hash = cfg.config_hash

    gold_knowledge = [r.knowledge for r in test.records if r.knowledge is not None]
    if gold_knowledge:
        coverage = evaluation.kb_coverage(kb, gold_knowledge, provider)
        report.coverage = {
            "exact_match_pct": coverage.exact_match_pct,
            "mean_best_similarity": coverage.mean_best_similarity,
        }

    index = retriever.build_index(kb, provider, head)
    labeled = []
    for rec in test.records:
        if rec.knowledge is None:
            continue
        eid = knowledge_base.entry_id(rec.knowledge)
        if eid in kb.entries:
            labeled.append((rec.query.text, [eid]))
    if labeled:
        metrics = retriever.eval_retrieval(index, labeled, provider, head)
        report.retrieval = {"mrr": metrics.mrr, "top_at": metrics.top_at}

    report.save(cfg.workdir / REPORT_JSON)
    table = report.render_table()
    (cfg.workdir / REPORT_TXT).write_text(table + "\n")
    print(table)
    return 0


def cmd_stats(cfg: RunConfig, args: argparse.Namespace) -> int:
    kb = _load_kb(cfg, args.force)
    stats = knowledge_base.kb_stats(kb)
    print(f"total entries:  {stats.total}")
    for source in sorted(stats.by_source):
        print(f"  source={source}: {stats.by_source[source]}")
    for db in sorted(stats.by_db):
        print(f"  db={db}: {stats.by_db[db]}")
    for it in sorted(stats.by_iteration):
        print(f"  iteration={it}: {stats.by_iteration[it]}")
    if stats.expansion_failures:
        print(f"  expansion failures: {stats.expansion_failures}")
    return 0


COMMANDS = {
    "build-kb": cmd_build_kb,
    "train-retriever": cmd_train_retriever,
    "retrieve": cmd_retrieve,
    "generate": cmd_generate,
    "evaluate": cmd_evaluate,
    "stats": cmd_stats,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sqlkb",
        description="Knowledge-base construction, retrieval, and evaluation "
        "for LLM text-to-SQL.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in [
        ("build-kb", "seed the knowledge base from dataset evidence and expand it"),
        ("train-retriever", "train the contrastive projection head"),
        ("retrieve", "inspect top-j knowledge entries for an ad-hoc query"),
        ("generate", "run retrieval + refinement + SQL generation on the test split"),
        ("evaluate", "score generated outputs and write the report"),
        ("stats", "print knowledge base statistics"),
    ]:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=Path, help="INI config file")
        p.add_argument("--workdir", type=Path, help="root for artifacts and relative paths")
        p.add_argument(
            "--set",
            dest="overrides",
            action="append",
            default=[],
            metavar="SECTION.KEY=VALUE",
            help="override a config value (repeatable)",
        )
        p.add_argument("--force", action="store_true", help="ignore artifact lineage mismatches")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "retrieve":
            p.add_argument("query", help="query text to retrieve knowledge for")
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = load_config(args.config, args.workdir, args.overrides)
        cfg.workdir.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](cfg, args)
    except SqlkbError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
