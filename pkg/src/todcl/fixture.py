"""Bundled 50-session fixture (synthetic, generated by :mod:`todcl.synth`)."""

from __future__ import annotations

from pathlib import Path

from .corpus import DialogSession, Schema, load_corpus, load_schema
from .dbkit import EntityDb

FIXTURE_DIR = Path(__file__).parent / "data" / "fixture"
SCHEMA_PATH = FIXTURE_DIR / "schema.json"
DB_PATH = FIXTURE_DIR / "db.json"
CORPUS_PATH = FIXTURE_DIR / "corpus.jsonl"


def load_fixture() -> tuple[list[DialogSession], EntityDb, Schema]:
    schema = load_schema(SCHEMA_PATH)
    db = EntityDb.from_file(DB_PATH, schema)
    return load_corpus(CORPUS_PATH, schema), db, schema


def regenerate(n: int = 50, seed: int = 0) -> None:
    import json

    from .corpus import write_corpus
    from .synth import make_corpus, make_db, make_schema

    FIXTURE_DIR.mkdir(parents=True, exist_ok=True)
    with open(SCHEMA_PATH, "w", encoding="utf-8") as f:
        json.dump(make_schema().to_dict(), f, indent=1)
    db = make_db(seed)
    db.to_file(DB_PATH)
    write_corpus(make_corpus(n, seed, db), CORPUS_PATH)
