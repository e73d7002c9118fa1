"""Dataset loading and schema rendering.

A dataset is a JSON array of question records plus a directory of
single-file SQLite databases; see docs/formats.md for the exact layout.
"""

from __future__ import annotations

import json
import sqlite3
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional

from .errors import (
    DatabaseFileError,
    ParseError,
    SchemaRefError,
    UnsupportedEngineError,
)

SQLITE_MAGIC = b"SQLite format 3\x00"


@dataclass(frozen=True)
class Query:
    id: str
    text: str
    db_id: str


@dataclass(frozen=True)
class Column:
    name: str
    type: str
    description: Optional[str] = None


@dataclass(frozen=True)
class Table:
    name: str
    columns: tuple[Column, ...]


@dataclass(frozen=True)
class ForeignKey:
    table: str
    column: str
    ref_table: str
    ref_column: str


@dataclass(frozen=True)
class DatabaseSchema:
    db_id: str
    tables: tuple[Table, ...]
    foreign_keys: tuple[ForeignKey, ...] = ()
    db_file: Optional[Path] = None


@dataclass(frozen=True)
class ExampleTriplet:
    query: Query
    schema_ref: str
    knowledge: Optional[str] = None
    gold_sql: Optional[str] = None


@dataclass(frozen=True)
class Dataset:
    records: tuple[ExampleTriplet, ...]
    schemas: dict[str, DatabaseSchema] = field(default_factory=dict)
    split: str = "train"

    def schema_for(self, db_id: str) -> DatabaseSchema:
        try:
            return self.schemas[db_id]
        except KeyError:
            raise SchemaRefError(f"unknown db_id: {db_id!r}") from None


def load_schema(db_file: Path | str) -> DatabaseSchema:
    """Read tables, columns, and foreign keys from a SQLite file."""
    db_file = Path(db_file)
    if not db_file.exists():
        raise DatabaseFileError(f"no such database file: {db_file}")
    header = db_file.read_bytes()[: len(SQLITE_MAGIC)]
    if db_file.stat().st_size > 0 and header != SQLITE_MAGIC:
        raise UnsupportedEngineError(f"not a SQLite database: {db_file}")
    try:
        con = sqlite3.connect(f"file:{db_file}?mode=ro", uri=True)
        try:
            names = [
                r[0]
                for r in con.execute(
                    "SELECT name FROM sqlite_master WHERE type='table' "
                    "AND name NOT LIKE 'sqlite_%' ORDER BY name"
                )
            ]
            tables = []
            fks = []
            for name in names:
                cols = tuple(
                    Column(name=r[1], type=r[2] or "")
                    for r in con.execute(f'PRAGMA table_info("{name}")')
                )
                tables.append(Table(name=name, columns=cols))
                for r in con.execute(f'PRAGMA foreign_key_list("{name}")'):
                    # r: (id, seq, ref_table, from_col, to_col, ...)
                    to_col = r[4]
                    if to_col is None:
                        ref = next(t for t in tables if t.name == r[2])
                        to_col = ref.columns[0].name if ref.columns else ""
                    fks.append(
                        ForeignKey(table=name, column=r[3], ref_table=r[2], ref_column=to_col)
                    )
        finally:
            con.close()
    except sqlite3.Error as exc:
        raise DatabaseFileError(f"cannot read {db_file}: {exc}") from exc
    return DatabaseSchema(
        db_id=db_file.stem,
        tables=tuple(tables),
        foreign_keys=tuple(sorted(fks, key=lambda f: (f.table, f.column))),
        db_file=db_file,
    )


def discover_schemas(db_dir: Path | str) -> dict[str, DatabaseSchema]:
    """Load every *.sqlite file in a directory, keyed by file stem."""
    db_dir = Path(db_dir)
    schemas = {}
    for path in sorted(db_dir.glob("*.sqlite")):
        schema = load_schema(path)
        schemas[schema.db_id] = schema
    return schemas


def load_dataset(
    path: Path | str,
    db_dir: Optional[Path | str] = None,
    split: str = "train",
) -> Dataset:
    """Load a JSON record file plus its sibling database directory.

    Records keep the source knowledge text verbatim; a missing or null
    evidence field becomes None, never an empty string.
    """
    path = Path(path)
    if db_dir is None:
        db_dir = path.parent / "databases"
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    if not isinstance(raw, list):
        raise ParseError(f"{path}: expected a JSON array of records")

    schemas = discover_schemas(db_dir) if Path(db_dir).is_dir() else {}
    records = []
    seen_ids = set()
    for i, rec in enumerate(raw):
        if not isinstance(rec, dict) or "question" not in rec or "db_id" not in rec:
            raise ParseError(f"{path}: record {i} missing 'question' or 'db_id'")
        qid = str(rec.get("question_id", i))
        if qid in seen_ids:
            raise ParseError(f"{path}: duplicate record id {qid!r}")
        seen_ids.add(qid)
        text = rec["question"]
        if not isinstance(text, str) or not text.strip():
            raise ParseError(f"{path}: record {qid} has an empty question")
        db_id = str(rec["db_id"])
        if db_id not in schemas:
            raise SchemaRefError(f"{path}: record {qid} references unknown db_id {db_id!r}")
        evidence = rec.get("evidence")
        if evidence is not None and not isinstance(evidence, str):
            raise ParseError(f"{path}: record {qid} evidence must be a string")
        if evidence == "":
            evidence = None
        records.append(
            ExampleTriplet(
                query=Query(id=qid, text=text, db_id=db_id),
                schema_ref=db_id,
                knowledge=evidence,
                gold_sql=rec.get("SQL"),
            )
        )
    return Dataset(records=tuple(records), schemas=schemas, split=split)


def save_dataset(dataset: Dataset, path: Path | str) -> None:
    """Write records back to the JSON layout accepted by load_dataset."""
    out = []
    for rec in dataset.records:
        obj = {
            "question_id": rec.query.id,
            "question": rec.query.text,
            "db_id": rec.query.db_id,
        }
        if rec.knowledge is not None:
            obj["evidence"] = rec.knowledge
        if rec.gold_sql is not None:
            obj["SQL"] = rec.gold_sql
        out.append(obj)
    Path(path).write_text(json.dumps(out, indent=2) + "\n")


def _render_lines(
    schema: DatabaseSchema,
    with_descriptions: bool,
    with_fks: bool,
    keep_tables: Optional[set[str]],
) -> list[str]:
    lines = []
    for table in schema.tables:
        if keep_tables is not None and table.name not in keep_tables:
            lines.append(f"Table {table.name}")
            continue
        cols = []
        for col in table.columns:
            part = f"{col.name} {col.type}".rstrip()
            if with_descriptions and col.description:
                part += f" -- {col.description}"
            cols.append(part)
        lines.append(f"Table {table.name} ({', '.join(cols)})")
    if with_fks and schema.foreign_keys:
        lines.append("Foreign keys:")
        for fk in schema.foreign_keys:
            lines.append(f"  {fk.table}.{fk.column} -> {fk.ref_table}.{fk.ref_column}")
    return lines


def render_schema(
    schema: DatabaseSchema,
    budget: int = 1_000_000,
    keep_tables: Optional[Iterable[str]] = None,
) -> str:
    """Render a schema as deterministic prompt text within a character budget.

    When over budget, drops column descriptions first, then foreign-key
    lines, then (when keep_tables is given) the columns of tables outside
    that set; table names are never dropped. As a last resort the text is
    hard-truncated to the budget.
    """
    if budget < 0:
        raise ValueError("budget must be >= 0")
    if budget == 0:
        return ""
    keep = set(keep_tables) if keep_tables is not None else None
    attempts = [
        (True, True, None),
        (False, True, None),
        (False, False, None),
    ]
    if keep is not None:
        attempts.append((False, False, keep))
    text = ""
    for with_desc, with_fks, kt in attempts:
        text = "\n".join(_render_lines(schema, with_desc, with_fks, kt))
        if len(text) <= budget:
            return text
    return text[:budget]


def restrict_db_file(schema: DatabaseSchema, db_file: Optional[Path]) -> DatabaseSchema:
    """Return a copy of the schema pointing at a different database file."""
    return replace(schema, db_file=db_file)
