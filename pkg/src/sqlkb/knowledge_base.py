"""Knowledge base construction: seed from dataset evidence, expand via LLM.

Entries are deduplicated on a normalized-text identity so that the same
fact phrased with different casing or spacing is stored once.
"""

from __future__ import annotations

import hashlib
import json
import logging
import random
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Optional

from .dataset import Dataset, Query
from .errors import InsufficientExamplesError, LlmError, ParseError

if TYPE_CHECKING:
    from .dataset import ExampleTriplet
    from .llm import LlmClient
    from .retriever import EmbeddingProvider

logger = logging.getLogger(__name__)

KB_FORMAT = "sqlkb/kb/v1"

_LIST_MARKER = re.compile(r"^\s*(?:\d+[\.\)\:]?|[-*•])\s*")
_WS = re.compile(r"\s+")


def normalize_text(text: str) -> str:
    """Dedup identity: lowercase, collapse whitespace, strip terminal punctuation."""
    text = _WS.sub(" ", text.strip().lower())
    return text.rstrip(".!?;:,")


def entry_id(text: str) -> str:
    return hashlib.sha256(normalize_text(text).encode("utf-8")).hexdigest()[:16]


@dataclass(frozen=True)
class KnowledgeEntry:
    id: str
    text: str
    source: str  # "dataset" | "generated"
    db_id: str
    origin_query_id: Optional[str] = None
    iteration: Optional[int] = None

    @classmethod
    def from_text(
        cls,
        text: str,
        source: str,
        db_id: str,
        origin_query_id: Optional[str] = None,
        iteration: Optional[int] = None,
    ) -> "KnowledgeEntry":
        if not text.strip():
            raise ValueError("knowledge text must be non-empty")
        return cls(
            id=entry_id(text),
            text=text,
            source=source,
            db_id=db_id,
            origin_query_id=origin_query_id,
            iteration=iteration,
        )


@dataclass
class KbBuildConfig:
    few_shot_k: int = 10
    iterations: int = 5
    seed: int = 0
    prompt_budget: int = 12_000

    def __post_init__(self) -> None:
        if self.few_shot_k < 1:
            raise ValueError("few_shot_k must be >= 1")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")

    def to_dict(self) -> dict:
        return {
            "few_shot_k": self.few_shot_k,
            "iterations": self.iterations,
            "seed": self.seed,
            "prompt_budget": self.prompt_budget,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "KbBuildConfig":
        return cls(**d)


@dataclass
class KnowledgeBase:
    entries: dict[str, KnowledgeEntry] = field(default_factory=dict)
    build_config: KbBuildConfig = field(default_factory=KbBuildConfig)

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, text: str) -> bool:
        return entry_id(text) in self.entries

    def add(self, entry: KnowledgeEntry) -> bool:
        """Insert unless an entry with the same normalized text exists."""
        if entry.id in self.entries:
            return False
        self.entries[entry.id] = entry
        return True

    def sorted_entries(self) -> list[KnowledgeEntry]:
        return [self.entries[i] for i in sorted(self.entries)]


@dataclass
class StatsReport:
    total: int
    by_source: dict[str, int]
    by_db: dict[str, int]
    by_iteration: dict[int, int]
    expansion_failures: int = 0


def init_kb(dataset: Dataset, config: Optional[KbBuildConfig] = None) -> KnowledgeBase:
    """Seed the knowledge base with every distinct evidence text in the dataset."""
    kb = KnowledgeBase(build_config=config or KbBuildConfig())
    for rec in dataset.records:
        if rec.knowledge is None:
            continue
        kb.add(
            KnowledgeEntry.from_text(
                rec.knowledge,
                source="dataset",
                db_id=rec.schema_ref,
                origin_query_id=rec.query.id,
            )
        )
    return kb


def select_examples(
    query: Query,
    dataset: Dataset,
    k: int,
    embedder: "EmbeddingProvider",
    require_knowledge: bool = True,
    require_sql: bool = False,
) -> list["ExampleTriplet"]:
    """Rank dataset records by cosine similarity of their questions to the query.

    The query's own record (same id) is excluded; ties break by record id
    ascending. Returns at most k records, never padded.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    candidates = [
        rec
        for rec in dataset.records
        if rec.query.id != query.id
        and (not require_knowledge or rec.knowledge is not None)
        and (not require_sql or rec.gold_sql is not None)
    ]
    if not candidates:
        raise InsufficientExamplesError("no candidate examples available")
    qvec = embedder.embed(query.text)
    scored = [
        (float(qvec @ embedder.embed(rec.query.text)), rec) for rec in candidates
    ]
    scored.sort(key=lambda pair: (-pair[0], pair[1].query.id))
    return [rec for _, rec in scored[:k]]


def parse_knowledge_lines(completion: str) -> list[str]:
    """Split an LLM completion into candidate entries, one per line.

    List markers like "1)" or "-" are stripped; lines under 3 words dropped.
    """
    out = []
    for line in completion.splitlines():
        line = _LIST_MARKER.sub("", line).strip()
        if len(line.split()) >= 3:
            out.append(line)
    return out


def expand_kb(
    kb: KnowledgeBase,
    dataset: Dataset,
    llm: "LlmClient",
    embedder: "EmbeddingProvider",
    config: Optional[KbBuildConfig] = None,
) -> KnowledgeBase:
    """Iteratively grow the knowledge base with LLM-generated entries.

    For every record and each of the configured iterations, a fresh sample
    of few-shot examples is drawn (uniformly without replacement from the
    top-2k most similar candidates) and shuffled, both under a seeded RNG
    keyed by (seed, record id, iteration), so results do not depend on
    processing order. LLM failures are skipped and counted, never fatal.
    """
    from .pipeline import build_knowledge_prompt

    config = config or kb.build_config
    result = KnowledgeBase(entries=dict(kb.entries), build_config=config)
    failures = 0
    for rec in dataset.records:
        schema = dataset.schema_for(rec.schema_ref)
        try:
            pool = select_examples(
                rec.query, dataset, 2 * config.few_shot_k, embedder
            )
        except InsufficientExamplesError:
            continue
        for i in range(1, config.iterations + 1):
            rng = random.Random(f"{config.seed}:{rec.query.id}:{i}")
            chosen = rng.sample(pool, min(config.few_shot_k, len(pool)))
            rng.shuffle(chosen)
            prompt = build_knowledge_prompt(
                rec.query, schema, chosen, budget=config.prompt_budget
            )
            try:
                completion = llm.complete(prompt)
            except LlmError as exc:
                failures += 1
                logger.warning(
                    "knowledge generation failed for %s iteration %d: %s",
                    rec.query.id,
                    i,
                    exc,
                )
                continue
            for text in parse_knowledge_lines(completion):
                result.add(
                    KnowledgeEntry.from_text(
                        text,
                        source="generated",
                        db_id=rec.schema_ref,
                        origin_query_id=rec.query.id,
                        iteration=i,
                    )
                )
    if failures:
        logger.warning("expand_kb completed with %d failed generations", failures)
    result.expansion_failures = failures  # type: ignore[attr-defined]
    return result


def save_kb(kb: KnowledgeBase, path: Path | str, config_hash: Optional[str] = None) -> None:
    """Write a line-delimited KB file: one header line, then entries sorted by id."""
    header = {"format": KB_FORMAT, "build_config": kb.build_config.to_dict()}
    if config_hash is not None:
        header["config_hash"] = config_hash
    lines = [json.dumps(header, sort_keys=True)]
    for entry in kb.sorted_entries():
        obj = {
            "id": entry.id,
            "text": entry.text,
            "source": entry.source,
            "db_id": entry.db_id,
        }
        if entry.origin_query_id is not None:
            obj["origin_query_id"] = entry.origin_query_id
        if entry.iteration is not None:
            obj["iteration"] = entry.iteration
        lines.append(json.dumps(obj, sort_keys=True))
    Path(path).write_text("\n".join(lines) + "\n")


def load_kb(path: Path | str) -> KnowledgeBase:
    path = Path(path)
    lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    if not lines:
        return KnowledgeBase()
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: bad header: {exc}") from exc
    if header.get("format") != KB_FORMAT:
        raise ParseError(f"{path}: unrecognized KB format {header.get('format')!r}")
    kb = KnowledgeBase(build_config=KbBuildConfig.from_dict(header["build_config"]))
    for n, line in enumerate(lines[1:], start=2):
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}:{n}: {exc}") from exc
        entry = KnowledgeEntry(
            id=obj["id"],
            text=obj["text"],
            source=obj["source"],
            db_id=obj["db_id"],
            origin_query_id=obj.get("origin_query_id"),
            iteration=obj.get("iteration"),
        )
        if entry.id in kb.entries:
            raise ParseError(f"{path}:{n}: duplicate entry id {entry.id}")
        kb.entries[entry.id] = entry
    return kb


def kb_header(path: Path | str) -> dict:
    """Read only the header line of a persisted KB file."""
    with open(path) as fh:
        first = fh.readline()
    return json.loads(first) if first.strip() else {}


def kb_stats(kb: KnowledgeBase) -> StatsReport:
    by_source: dict[str, int] = {}
    by_db: dict[str, int] = {}
    by_iteration: dict[int, int] = {}
    for entry in kb.entries.values():
        by_source[entry.source] = by_source.get(entry.source, 0) + 1
        by_db[entry.db_id] = by_db.get(entry.db_id, 0) + 1
        if entry.iteration is not None:
            by_iteration[entry.iteration] = by_iteration.get(entry.iteration, 0) + 1
    return StatsReport(
        total=len(kb),
        by_source=by_source,
        by_db=by_db,
        by_iteration=by_iteration,
        expansion_failures=getattr(kb, "expansion_failures", 0),
    )
