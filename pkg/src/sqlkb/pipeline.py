"""Prompt construction, knowledge refinement, and SQL generation."""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Optional, Sequence

from .dataset import Dataset, DatabaseSchema, ExampleTriplet, Query, render_schema
from .errors import BudgetError, EmptySqlError, InsufficientExamplesError, LlmError
from .knowledge_base import select_examples

if TYPE_CHECKING:
    from .knowledge_base import KnowledgeEntry
    from .llm import LlmClient
    from .retriever import EmbeddingProvider, KnowledgeIndex, ProjectionHead

logger = logging.getLogger(__name__)

DEFAULT_BUDGET = 24_000

_FENCE = re.compile(r"```(?:sql)?\s*(.*?)```", re.DOTALL | re.IGNORECASE)


@dataclass(frozen=True)
class RefinedKnowledge:
    text: str
    query_id: str
    retrieved_ids: tuple[str, ...]
    schema_id: str


@dataclass(frozen=True)
class SqlStatement:
    text: str
    query_id: str
    knowledge: Optional[RefinedKnowledge] = None


@dataclass
class PipelineConfig:
    top_j: int = 5  # 0 disables retrieval (no-knowledge baseline)
    budget: int = DEFAULT_BUDGET
    use_refinement: bool = True
    few_shot_k: int = 10
    seed: int = 0


@dataclass
class PipelineOutput:
    query_id: str
    sql: Optional[str]
    knowledge: Optional[str]
    retrieved_ids: tuple[str, ...] = ()
    error: Optional[str] = None


def _assemble(schema_text: str, blocks: Sequence[str], target: str) -> str:
    return "\n\n".join(["DB Schema: " + schema_text, *blocks, target])


def _fit(
    schema: DatabaseSchema,
    blocks: list[str],
    target: str,
    budget: int,
) -> str:
    """Assemble within budget: drop tail examples first, then shrink the schema."""
    schema_text = render_schema(schema, budget)
    while True:
        prompt = _assemble(schema_text, blocks, target)
        if len(prompt) <= budget:
            return prompt
        if blocks:
            blocks = blocks[:-1]
            continue
        overhead = len(prompt) - len(schema_text)
        remaining = budget - overhead
        if remaining <= 0:
            raise BudgetError(
                f"prompt needs {overhead} chars without any schema; budget {budget}"
            )
        return _assemble(render_schema(schema, remaining), blocks, target)


def build_knowledge_prompt(
    query: Query,
    schema: DatabaseSchema,
    examples: Sequence[ExampleTriplet],
    budget: int = DEFAULT_BUDGET,
) -> str:
    """Few-shot knowledge-generation prompt ending with an open Evidence line."""
    blocks = [
        f"Question: {ex.query.text}\nEvidence: {ex.knowledge or ''}" for ex in examples
    ]
    target = f"Question: {query.text}\nEvidence: "
    return _fit(schema, blocks, target, budget)


def build_sql_prompt(
    query: Query,
    knowledge: str,
    schema: DatabaseSchema,
    examples: Sequence[ExampleTriplet],
    budget: int = DEFAULT_BUDGET,
) -> str:
    """Few-shot SQL-generation prompt ending with an open SQL line."""
    blocks = [
        f"Question: {ex.query.text}\nEvidence: {ex.knowledge or ''}\n"
        f"SQL: {ex.gold_sql or ''}"
        for ex in examples
    ]
    target = f"Question: {query.text}\nEvidence: {knowledge}\nSQL: "
    return _fit(schema, blocks, target, budget)


def build_refinement_prompt(
    query: Query,
    retrieved_texts: Sequence[str],
    schema: DatabaseSchema,
    budget: int = DEFAULT_BUDGET,
) -> str:
    """Refinement reuses the knowledge-generation layout: each retrieved entry
    appears as an Evidence candidate paired with the target question."""
    blocks = [f"Question: {query.text}\nEvidence: {text}" for text in retrieved_texts]
    target = f"Question: {query.text}\nEvidence: "
    return _fit(schema, blocks, target, budget)


def refine_knowledge(
    query: Query,
    retrieved: Sequence["KnowledgeEntry"],
    schema: DatabaseSchema,
    llm: "LlmClient",
    budget: int = DEFAULT_BUDGET,
) -> RefinedKnowledge:
    """Rewrite retrieved entries into query-specific knowledge via the LLM."""
    prompt = build_refinement_prompt(
        query, [e.text for e in retrieved], schema, budget
    )
    completion = llm.complete(prompt)
    return RefinedKnowledge(
        text=completion.strip(),
        query_id=query.id,
        retrieved_ids=tuple(e.id for e in retrieved),
        schema_id=schema.db_id,
    )


def postprocess_sql(completion: str) -> str:
    """Reduce a noisy completion to a single SQL statement.

    Strips markdown fences, then cuts at the first statement terminator or
    at the first blank line after content has started.
    """
    text = completion.strip()
    fenced = _FENCE.search(text)
    if fenced:
        text = fenced.group(1).strip()
    if ";" in text:
        text = text.split(";", 1)[0]
    lines = []
    for line in text.splitlines():
        if lines and not line.strip():
            break
        if line.strip():
            lines.append(line.rstrip())
    sql = "\n".join(lines).strip()
    if not sql:
        raise EmptySqlError("completion contained no SQL")
    return sql


def generate_sql(
    query: Query,
    schema: DatabaseSchema,
    index: "KnowledgeIndex",
    llm: "LlmClient",
    provider: "EmbeddingProvider",
    train_dataset: Dataset,
    config: Optional[PipelineConfig] = None,
    head: Optional["ProjectionHead"] = None,
) -> tuple[SqlStatement, Optional[RefinedKnowledge]]:
    """Retrieve top-j knowledge, optionally refine it, and generate the SQL.

    With use_refinement=False the retrieved entries are concatenated and
    used directly as the Evidence block; with top_j=0 the Evidence block
    is empty (no-knowledge baseline).
    """
    from .retriever import retrieve

    config = config or PipelineConfig()
    retrieved: list = []
    if config.top_j > 0:
        retrieved = [
            entry
            for entry, _ in retrieve(query.text, index, config.top_j, provider, head)
        ]
    refined = None
    if retrieved and config.use_refinement:
        refined = refine_knowledge(query, retrieved, schema, llm, config.budget)
        evidence = refined.text
    else:
        evidence = "; ".join(e.text for e in retrieved)

    try:
        examples = select_examples(
            query,
            train_dataset,
            config.few_shot_k,
            provider,
            require_sql=True,
        )
    except InsufficientExamplesError:
        examples = []
    prompt = build_sql_prompt(query, evidence, schema, examples, config.budget)
    sql_text = postprocess_sql(llm.complete(prompt))
    return (
        SqlStatement(text=sql_text, query_id=query.id, knowledge=refined),
        refined,
    )


def run_pipeline(
    test_dataset: Dataset,
    train_dataset: Dataset,
    index: "KnowledgeIndex",
    llm: "LlmClient",
    provider: "EmbeddingProvider",
    config: Optional[PipelineConfig] = None,
    head: Optional["ProjectionHead"] = None,
) -> list[PipelineOutput]:
    """Generate SQL for every test record; per-record failures are recorded."""
    config = config or PipelineConfig()
    outputs = []
    for rec in test_dataset.records:
        schema = test_dataset.schema_for(rec.schema_ref)
        try:
            stmt, refined = generate_sql(
                rec.query,
                schema,
                index,
                llm,
                provider,
                train_dataset,
                config,
                head,
            )
        except (LlmError, EmptySqlError) as exc:
            logger.warning("generation failed for %s: %s", rec.query.id, exc)
            outputs.append(
                PipelineOutput(
                    query_id=rec.query.id, sql=None, knowledge=None, error=str(exc)
                )
            )
            continue
        outputs.append(
            PipelineOutput(
                query_id=rec.query.id,
                sql=stmt.text,
                knowledge=refined.text if refined else None,
                retrieved_ids=refined.retrieved_ids if refined else (),
            )
        )
    return outputs


def save_outputs(
    outputs: Sequence[PipelineOutput],
    path: Path | str,
    config_hash: Optional[str] = None,
) -> None:
    """Line-delimited JSON: one header line, then one record per output."""
    header: dict = {"format": "sqlkb/outputs/v1"}
    if config_hash is not None:
        header["config_hash"] = config_hash
    lines = [json.dumps(header, sort_keys=True)]
    for out in outputs:
        lines.append(
            json.dumps(
                {
                    "query_id": out.query_id,
                    "sql": out.sql,
                    "knowledge": out.knowledge,
                    "retrieved_ids": list(out.retrieved_ids),
                    "error": out.error,
                },
                sort_keys=True,
            )
        )
    Path(path).write_text("\n".join(lines) + "\n")


def load_outputs(path: Path | str) -> tuple[list[PipelineOutput], dict]:
    lines = Path(path).read_text().splitlines()
    if not lines:
        return [], {}
    header = json.loads(lines[0])
    outputs = []
    for line in lines[1:]:
        if not line.strip():
            continue
        obj = json.loads(line)
        outputs.append(
            PipelineOutput(
                query_id=obj["query_id"],
                sql=obj["sql"],
                knowledge=obj["knowledge"],
                retrieved_ids=tuple(obj.get("retrieved_ids", ())),
                error=obj.get("error"),
            )
        )
    return outputs, header
