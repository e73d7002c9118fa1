import json
import math

import pytest

from sqlkb.dataset import Dataset, ExampleTriplet, Query
from sqlkb.errors import InsufficientExamplesError, LlmError, ParseError
from sqlkb.knowledge_base import (
    KbBuildConfig,
    KnowledgeBase,
    KnowledgeEntry,
    entry_id,
    expand_kb,
    init_kb,
    kb_stats,
    load_kb,
    normalize_text,
    parse_knowledge_lines,
    save_kb,
    select_examples,
)
from sqlkb.llm import LlmClient, LlmConfig


def mock_client(fallback):
    return LlmClient(LlmConfig(backend="mock"), fallback=fallback)


@pytest.mark.parametrize(
    "raw, expected",
    [
        ("New York refers to state = 'NY'", "new york refers to state = 'ny'"),
        ("  Spaced   out\ttext. ", "spaced out text"),
        ("Ends with punctuation!?", "ends with punctuation"),
        ("already normal", "already normal"),
    ],
)
def test_normalize_text(raw, expected):
    assert normalize_text(raw) == expected


def test_entry_id_collides_for_near_duplicates():
    assert entry_id("Albumin refers to ALB.") == entry_id("albumin  refers to ALB")


def test_init_kb_counts_distinct_knowledge(train_ds):
    kb = init_kb(train_ds)
    distinct = {normalize_text(r.knowledge) for r in train_ds.records if r.knowledge}
    assert len(kb) == len(distinct)
    assert all(e.source == "dataset" for e in kb.entries.values())


def _mini_dataset(records, schemas):
    return Dataset(records=tuple(records), schemas=schemas)


def test_init_kb_dedups_identical_evidence(train_ds):
    rec = train_ds.records[0]
    twin = ExampleTriplet(
        query=Query(id="twin", text="different question", db_id=rec.query.db_id),
        schema_ref=rec.schema_ref,
        knowledge=rec.knowledge,
    )
    ds = _mini_dataset([rec, twin], train_ds.schemas)
    assert len(init_kb(ds)) == 1


def test_init_kb_no_evidence(train_ds):
    rec = train_ds.records[0]
    bare = ExampleTriplet(query=rec.query, schema_ref=rec.schema_ref, knowledge=None)
    assert len(init_kb(_mini_dataset([bare], train_ds.schemas))) == 0


def test_select_examples_identical_question_first(train_ds, provider):
    target = train_ds.records[3]
    probe = Query(id="probe", text=target.query.text, db_id=target.query.db_id)
    chosen = select_examples(probe, train_ds, 3, provider)
    assert chosen[0].query.id == target.query.id


def test_select_examples_excludes_self(train_ds, provider):
    target = train_ds.records[3]
    chosen = select_examples(target.query, train_ds, 50, provider)
    assert target.query.id not in {c.query.id for c in chosen}


def test_select_examples_k_larger_than_pool(train_ds, provider):
    probe = Query(id="probe", text="anything at all", db_id="company")
    chosen = select_examples(probe, train_ds, 500, provider)
    assert len(chosen) == len([r for r in train_ds.records if r.knowledge])


def test_select_examples_empty_pool(train_ds, provider):
    rec = train_ds.records[0]
    bare = ExampleTriplet(query=rec.query, schema_ref=rec.schema_ref, knowledge=None)
    ds = _mini_dataset([bare], train_ds.schemas)
    with pytest.raises(InsufficientExamplesError):
        select_examples(Query(id="x", text="hello there", db_id="company"), ds, 3, provider)


def test_select_examples_matches_brute_force(train_ds, provider):
    # independent oracle: plain cosine over the same embeddings, full sort
    probe = Query(id="probe", text="good performance in New York offices", db_id="company")
    qv = provider.embed(probe.text)
    scored = []
    for rec in train_ds.records:
        if rec.knowledge is None:
            continue
        rv = provider.embed(rec.query.text)
        sim = sum(a * b for a, b in zip(qv, rv))
        scored.append((-sim, rec.query.id))
    oracle = [qid for _, qid in sorted(scored)][:10]
    chosen = select_examples(probe, train_ds, 10, provider)
    assert [c.query.id for c in chosen] == oracle


def test_parse_knowledge_lines_strips_markers():
    completion = "1) alpha refers to beta\n- gamma maps to delta five\n\nshort one\n2. zeta is the id column\n"
    assert parse_knowledge_lines(completion) == [
        "alpha refers to beta",
        "gamma maps to delta five",
        "zeta is the id column",
    ]


def test_expand_kb_zero_iterations_is_identity(train_ds, provider):
    cfg = KbBuildConfig(few_shot_k=5, iterations=0, seed=1)
    kb = init_kb(train_ds, cfg)
    out = expand_kb(kb, train_ds, mock_client(lambda p: "x y z"), provider, cfg)
    assert out.entries == kb.entries


def test_expand_kb_dedups_known_line(train_ds, provider):
    cfg = KbBuildConfig(few_shot_k=5, iterations=1, seed=1)
    kb = init_kb(train_ds, cfg)
    known = train_ds.records[0].knowledge
    out = expand_kb(kb, train_ds, mock_client(lambda p: known), provider, cfg)
    assert len(out) == len(kb)


def test_expand_kb_growth_matches_call_ledger(train_ds, provider):
    cfg = KbBuildConfig(few_shot_k=5, iterations=2, seed=1)
    ten = Dataset(records=train_ds.records[:10], schemas=train_ds.schemas)
    kb = init_kb(ten, cfg)
    calls = []

    def novel(prompt):
        calls.append(prompt)
        return f"novel fact number {len(calls)} for testing"

    out = expand_kb(kb, ten, mock_client(novel), provider, cfg)
    assert len(calls) == 10 * 2
    assert len(out) == len(kb) + len(calls)
    generated = [e for e in out.entries.values() if e.source == "generated"]
    assert {e.iteration for e in generated} == {1, 2}


def test_expand_kb_provenance_points_into_dataset(train_ds, provider):
    cfg = KbBuildConfig(few_shot_k=5, iterations=1, seed=1)
    kb = init_kb(train_ds, cfg)
    n = iter(range(10_000))

    def novel(prompt):
        return f"generated item {next(n)} for provenance"

    out = expand_kb(kb, train_ds, mock_client(novel), provider, cfg)
    ids = {r.query.id for r in train_ds.records}
    for e in out.entries.values():
        if e.source == "generated":
            assert e.origin_query_id in ids


def test_expand_kb_monotone(train_ds, provider):
    cfg = KbBuildConfig(few_shot_k=5, iterations=1, seed=1)
    kb = init_kb(train_ds, cfg)
    out = expand_kb(kb, train_ds, mock_client(lambda p: "a b c d"), provider, cfg)
    assert set(kb.entries) <= set(out.entries)


def test_expand_kb_skips_llm_failures(train_ds, provider):
    cfg = KbBuildConfig(few_shot_k=5, iterations=1, seed=1)
    kb = init_kb(train_ds, cfg)
    flips = iter(range(10_000))

    def flaky(prompt):
        i = next(flips)
        if i % 2 == 0:
            raise LlmError("transient")
        return f"survivor entry number {i} here"

    client = LlmClient(LlmConfig(backend="mock"), fallback=flaky)
    out = expand_kb(kb, train_ds, client, provider, cfg)
    assert len(out) > len(kb)  # run completed despite failures
    assert out.expansion_failures == 10


def test_dedup_soundness(train_ds, provider):
    cfg = KbBuildConfig(few_shot_k=5, iterations=1, seed=2)
    kb = init_kb(train_ds, cfg)

    def shouty(prompt):
        return train_ds.records[1].knowledge.upper()

    out = expand_kb(kb, train_ds, mock_client(shouty), provider, cfg)
    normals = [normalize_text(e.text) for e in out.entries.values()]
    assert len(normals) == len(set(normals))


def test_save_load_round_trip(train_ds, tmp_path):
    kb = init_kb(train_ds, KbBuildConfig(few_shot_k=3, iterations=1, seed=9))
    path = tmp_path / "kb.jsonl"
    save_kb(kb, path)
    again = load_kb(path)
    assert again.entries == kb.entries
    assert again.build_config == kb.build_config


def test_load_kb_duplicate_ids(tmp_path):
    kb = KnowledgeBase()
    kb.add(KnowledgeEntry.from_text("one two three", "dataset", "db"))
    path = tmp_path / "kb.jsonl"
    save_kb(kb, path)
    lines = path.read_text().splitlines()
    path.write_text("\n".join(lines + [lines[1]]) + "\n")
    with pytest.raises(ParseError):
        load_kb(path)


def test_load_kb_empty_file(tmp_path):
    path = tmp_path / "kb.jsonl"
    path.write_text("")
    assert len(load_kb(path)) == 0


def test_kb_stats_partition(train_ds, provider):
    cfg = KbBuildConfig(few_shot_k=5, iterations=1, seed=3)
    kb = init_kb(train_ds, cfg)
    assert kb_stats(kb).by_source.get("generated", 0) == 0
    n = iter(range(10_000))
    out = expand_kb(
        kb, train_ds, mock_client(lambda p: f"stat item {next(n)} x"), provider, cfg
    )
    stats = kb_stats(out)
    assert stats.by_source["dataset"] + stats.by_source["generated"] == stats.total
    assert sum(stats.by_db.values()) == stats.total


def test_expand_determinism_byte_identical(train_ds, provider, tmp_path):
    from sqlkb.llm import synthetic_completer

    cfg = KbBuildConfig(few_shot_k=5, iterations=2, seed=4)
    paths = []
    for name in ("a", "b"):
        kb = init_kb(train_ds, cfg)
        out = expand_kb(kb, train_ds, mock_client(synthetic_completer), provider, cfg)
        path = tmp_path / f"{name}.jsonl"
        save_kb(out, path)
        paths.append(path)
    assert paths[0].read_bytes() == paths[1].read_bytes()
