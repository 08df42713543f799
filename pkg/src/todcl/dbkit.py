"""Entity database lookup and DB-state bucketing."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import TYPE_CHECKING

if TYPE_CHECKING:
    from .corpus import DialogState, Schema


@dataclass(frozen=True)
class DbBucket:
    bucket: int

    def __post_init__(self):
        if self.bucket not in (0, 1, 2, 3):
            raise ValueError(f"db bucket must be in 0..3, got {self.bucket}")

    @property
    def token(self) -> str:
        return f"[db_{self.bucket}]"

    @classmethod
    def from_token(cls, token: str) -> "DbBucket":
        if not (token.startswith("[db_") and token.endswith("]")):
            raise ValueError(f"not a db token: {token!r}")
        return cls(int(token[4:-1]))


def bucketize(count: int) -> DbBucket:
    """0 -> 0, 1 -> 1, 2..3 -> 2, >=4 -> 3."""
    if count < 0:
        raise ValueError("count must be non-negative")
    if count <= 1:
        return DbBucket(count)
    return DbBucket(2 if count <= 3 else 3)


def _norm(value) -> str:
    return " ".join(str(value).lower().split())


class EntityDb:
    """Per-domain entity lists; an entity is a flat slot -> value map."""

    def __init__(self, entities: dict[str, list[dict]], schema: "Schema | None" = None):
        self.entities = {d: [dict(e) for e in ents] for d, ents in entities.items()}
        self.schema = schema
        if schema is not None:
            for domain, ents in self.entities.items():
                if domain not in schema.domains:
                    raise ValueError(f"db domain [{domain}] not in schema")
                allowed = set(schema.domains[domain].all_slots)
                for e in ents:
                    extra = set(e) - allowed
                    if extra:
                        raise ValueError(f"db entity in [{domain}] has unknown slots {sorted(extra)}")

    @classmethod
    def from_file(cls, path, schema: "Schema | None" = None) -> "EntityDb":
        with open(path, encoding="utf-8") as f:
            return cls(json.load(f), schema)

    def to_file(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.entities, f, indent=1)

    def domains(self) -> list[str]:
        return list(self.entities)

    def _searchable(self, domain: str, constraints: dict[str, str]) -> dict[str, str]:
        if self.schema is None or domain not in self.schema.domains:
            return constraints
        book = set(self.schema.domains[domain].book)
        return {s: v for s, v in constraints.items() if s not in book}

    def matches(self, domain: str, constraints: dict[str, str]) -> list[dict]:
        if domain not in self.entities:
            raise KeyError(f"unknown db domain [{domain}]")
        cons = {s: _norm(v) for s, v in self._searchable(domain, constraints).items()}
        return [e for e in self.entities[domain] if all(s in e and _norm(e[s]) == v for s, v in cons.items())]


def query(db: EntityDb, state: "DialogState", domain: str) -> int:
    """Number of entities in ``domain`` satisfying every constraint of ``state[domain]``."""
    return len(db.matches(domain, state.constraints.get(domain, {})))


def active_domain(
    state: "DialogState",
    prev_state: "DialogState | None",
    schema: "Schema",
    prev_active: str | None = None,
) -> str | None:
    """Domain whose constraints changed this turn; latest in schema order on ties.

    With no change the previous active domain carries over, or the last
    state domain in schema order when there is none.
    """
    prev = prev_state.constraints if prev_state is not None else {}
    order = schema.domain_order
    changed = [d for d, slots in state.constraints.items() if prev.get(d) != slots]
    if changed:
        return max(changed, key=lambda d: order.get(d, -1))
    if prev_active is not None:
        return prev_active
    if state.constraints:
        return max(state.constraints, key=lambda d: order.get(d, -1))
    return None


def db_state_for(db: EntityDb, state: "DialogState", domain: str | None) -> DbBucket:
    if domain is None or domain not in db.entities:
        return DbBucket(0)
    return bucketize(query(db, state, domain))
