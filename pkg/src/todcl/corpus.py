"""Dialog corpus: schema, structured states, linearization and context assembly."""

from __future__ import annotations

import json
import logging
import random
import re
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .dbkit import DbBucket

logger = logging.getLogger(__name__)

USER, STATE, ACT, RESP = "<user>", "<state>", "<act>", "<resp>"
PLACEHOLDER_RE = re.compile(r"\[value_[a-z0-9_]+\]")

SUBSAMPLE_PRESETS = {"5%": (0.05, 400), "10%": (0.10, 800), "20%": (0.20, 1600), "50%": (0.50, 4000)}


class CorpusError(ValueError):
    """Malformed corpus input. Carries the location of the offending record."""

    def __init__(self, message, *, session_id=None, turn_index=None, field=None, line=None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if session_id is not None:
            where.append(f"session {session_id!r}")
        if turn_index is not None:
            where.append(f"turn {turn_index}")
        if field is not None:
            where.append(f"field {field!r}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.session_id = session_id
        self.turn_index = turn_index
        self.field = field
        self.line = line


class SchemaViolation(CorpusError):
    pass


def _bracket(name: str) -> str:
    return f"[{name}]"


def _unbracket(tok: str) -> str | None:
    if len(tok) > 2 and tok[0] == "[" and tok[-1] == "]":
        return tok[1:-1]
    return None


@dataclass(frozen=True)
class DomainSchema:
    informable: tuple[str, ...]
    requestable: tuple[str, ...] = ()
    # state-only slots (booking details); never matched against entities
    book: tuple[str, ...] = ()

    @property
    def state_slots(self) -> tuple[str, ...]:
        return self.informable + self.book

    @property
    def all_slots(self) -> tuple[str, ...]:
        return self.informable + self.book + self.requestable


@dataclass(frozen=True)
class Schema:
    domains: dict[str, DomainSchema]
    acts: tuple[str, ...]
    act_domains: tuple[str, ...] = ("general",)
    act_slots: tuple[str, ...] = ("choice",)
    placeholders: tuple[str, ...] = ()

    @classmethod
    def from_dict(cls, d: dict) -> "Schema":
        domains = {
            name: DomainSchema(
                informable=tuple(spec.get("informable", ())),
                requestable=tuple(spec.get("requestable", ())),
                book=tuple(spec.get("book", ())),
            )
            for name, spec in d["domains"].items()
        }
        return cls(
            domains=domains,
            acts=tuple(d["acts"]),
            act_domains=tuple(d.get("act_domains", ("general",))),
            act_slots=tuple(d.get("act_slots", ("choice",))),
            placeholders=tuple(d.get("placeholders", ())),
        )

    def to_dict(self) -> dict:
        return {
            "domains": {
                n: {"informable": list(s.informable), "requestable": list(s.requestable), "book": list(s.book)}
                for n, s in self.domains.items()
            },
            "acts": list(self.acts),
            "act_domains": list(self.act_domains),
            "act_slots": list(self.act_slots),
            "placeholders": list(self.placeholders),
        }

    @property
    def domain_order(self) -> dict[str, int]:
        return {d: i for i, d in enumerate(self.domains)}

    def special_tokens(self) -> list[str]:
        """Every bracketed token the schema can emit."""
        toks = [_bracket(d) for d in self.domains] + [_bracket(d) for d in self.act_domains]
        toks += [_bracket(a) for a in self.acts]
        toks += [f"[db_{k}]" for k in range(4)]
        toks += list(self.placeholders)
        return toks


def load_schema(path) -> Schema:
    with open(path, encoding="utf-8") as f:
        return Schema.from_dict(json.load(f))


@dataclass
class DialogState:
    """domain -> slot -> value. Insertion order is the linearization order."""

    constraints: dict[str, dict[str, str]] = field(default_factory=dict)

    def __post_init__(self):
        self.constraints = {d: dict(s) for d, s in self.constraints.items() if s}

    def triples(self) -> set[tuple[str, str, str]]:
        return {(d, s, v) for d, slots in self.constraints.items() for s, v in slots.items()}

    def __bool__(self):
        return bool(self.constraints)


@dataclass
class ActionState:
    """Ordered (domain, act, slots) entries."""

    acts: list[tuple[str, str, tuple[str, ...]]] = field(default_factory=list)

    def __post_init__(self):
        self.acts = [(d, a, tuple(s)) for d, a, s in self.acts]

    @property
    def domains(self) -> list[str]:
        seen = []
        for d, _, _ in self.acts:
            if d not in seen:
                seen.append(d)
        return seen


@dataclass(frozen=True)
class Goal:
    informable: dict[str, dict[str, str]]
    requestable: dict[str, tuple[str, ...]]

    def __post_init__(self):
        # every goal domain has a requestable entry (possibly empty); empty
        # informable blocks are dropped so both constructors agree
        req = {d: tuple(self.requestable.get(d, ())) for d in dict.fromkeys([*self.requestable, *self.informable])}
        object.__setattr__(self, "informable", {d: dict(c) for d, c in self.informable.items() if c})
        object.__setattr__(self, "requestable", req)

    @property
    def domains(self) -> list[str]:
        return list(self.requestable)


@dataclass
class DialogTurn:
    turn_index: int
    user_utterance: str
    dialog_state: DialogState
    db_state: DbBucket
    action_state: ActionState
    response: str


@dataclass
class DialogSession:
    session_id: str
    goal: Goal
    turns: list[DialogTurn]


@dataclass
class TurnPrediction:
    """Model outputs for one turn, as recorded during rollout."""

    state: DialogState
    db: DbBucket
    acts: ActionState
    response: str


@dataclass
class ContextSequence:
    tokens: list[str]
    kind: str


# --------------------------------------------------------------------------
# linearization


def normalize_text(text: str) -> str:
    return " ".join(text.lower().split())


def linearize_state(state: DialogState) -> str:
    out = []
    for domain, slots in state.constraints.items():
        out.append(_bracket(domain))
        for slot, value in slots.items():
            out.append(slot)
            out.append(normalize_text(value))
    return " ".join(out).lower()


def parse_state(text: str, schema: Schema) -> tuple[DialogState, list[str]]:
    """Best-effort inverse of :func:`linearize_state`. Never raises.

    Returns the parsed state and a list of warnings describing what was dropped.
    """
    warnings: list[str] = []
    constraints: dict[str, dict[str, str]] = {}
    domain = None
    slot = None
    value: list[str] = []
    skipping = False

    def flush():
        nonlocal slot, value
        if slot is not None:
            if value:
                if slot in constraints[domain]:
                    warnings.append(f"duplicate slot {domain}-{slot}")
                constraints[domain][slot] = " ".join(value)
            else:
                warnings.append(f"slot without value {domain}-{slot}")
        slot, value = None, []

    for tok in text.lower().split():
        name = _unbracket(tok)
        if name is not None:
            flush()
            if name in schema.domains:
                if name in constraints:
                    warnings.append(f"duplicate domain {name}")
                constraints.setdefault(name, {})
                domain, skipping = name, False
            else:
                warnings.append(f"unknown bracket token {tok}")
                domain, skipping = None, True
            continue
        if domain is None:
            if not skipping:
                warnings.append(f"token before first domain: {tok}")
            continue
        if tok in schema.domains[domain].state_slots:
            flush()
            slot = tok
        elif slot is None:
            warnings.append(f"unexpected token {tok} in {domain}")
        else:
            value.append(tok)
    flush()
    for d in [d for d, s in constraints.items() if not s]:
        warnings.append(f"empty domain {d}")
    return DialogState(constraints), warnings


def linearize_acts(acts: ActionState) -> str:
    out = []
    prev = None
    for domain, act, slots in acts.acts:
        if domain != prev:
            out.append(_bracket(domain))
            prev = domain
        out.append(_bracket(act))
        out.extend(slots)
    return " ".join(out)


def parse_acts(text: str, schema: Schema) -> tuple[ActionState, list[str]]:
    """Best-effort inverse of :func:`linearize_acts`. Never raises."""
    warnings: list[str] = []
    entries: list[tuple[str, str, list[str]]] = []
    act_domains = set(schema.domains) | set(schema.act_domains)
    acts = set(schema.acts)
    domain = None
    has_act = False

    for tok in text.lower().split():
        name = _unbracket(tok)
        if name is not None:
            if name in act_domains:
                if domain is not None and not has_act:
                    warnings.append(f"domain without act {domain}")
                domain, has_act = name, False
            elif name in acts:
                if domain is None:
                    warnings.append(f"act before domain: {tok}")
                    continue
                entries.append((domain, name, []))
                has_act = True
            else:
                warnings.append(f"unknown bracket token {tok}")
            continue
        if not has_act or domain is None:
            warnings.append(f"slot without act: {tok}")
            continue
        entries[-1][2].append(tok)
    if domain is not None and not has_act:
        warnings.append(f"domain without act {domain}")
    return ActionState(entries), warnings


# --------------------------------------------------------------------------
# loading / validation


def _validate_state(state: dict, schema: Schema, sid, tidx, fieldname="state") -> DialogState:
    if not isinstance(state, dict):
        raise SchemaViolation("state must be an object", session_id=sid, turn_index=tidx, field=fieldname)
    for domain, slots in state.items():
        if domain not in schema.domains:
            raise SchemaViolation(f"unknown domain [{domain}]", session_id=sid, turn_index=tidx, field=fieldname)
        if not slots:
            raise SchemaViolation(f"empty domain block [{domain}]", session_id=sid, turn_index=tidx, field=fieldname)
        allowed = schema.domains[domain].state_slots
        for slot, value in slots.items():
            if slot not in allowed:
                raise SchemaViolation(
                    f"unknown slot {domain}-{slot}", session_id=sid, turn_index=tidx, field=fieldname
                )
            if not isinstance(value, str) or not value.strip():
                raise SchemaViolation(
                    f"empty value for {domain}-{slot}", session_id=sid, turn_index=tidx, field=fieldname
                )
    return DialogState({d: {s: normalize_text(v) for s, v in sl.items()} for d, sl in state.items()})


def _validate_acts(acts: list, schema: Schema, sid, tidx) -> ActionState:
    act_domains = set(schema.domains) | set(schema.act_domains)
    out = []
    for entry in acts:
        if isinstance(entry, dict):
            domain, act, slots = entry.get("domain"), entry.get("act"), entry.get("slots", [])
        else:
            domain, act, slots = entry
        if domain not in act_domains:
            raise SchemaViolation(f"unknown domain [{domain}]", session_id=sid, turn_index=tidx, field="acts")
        if act not in schema.acts:
            raise SchemaViolation(f"unknown act [{act}]", session_id=sid, turn_index=tidx, field="acts")
        allowed = set(schema.act_slots)
        if domain in schema.domains:
            allowed |= set(schema.domains[domain].all_slots)
        for s in slots:
            if s not in allowed:
                raise SchemaViolation(
                    f"unknown act slot {domain}-{s}", session_id=sid, turn_index=tidx, field="acts"
                )
        out.append((domain, act, tuple(slots)))
    return ActionState(out)


def session_from_record(rec: dict, schema: Schema, line: int | None = None) -> DialogSession:
    sid = rec.get("session_id")
    if not isinstance(sid, str) or not sid:
        raise SchemaViolation("missing session_id", field="session_id", line=line)
    goal_rec = rec.get("goal", {})
    informable, requestable = {}, {}
    for domain, spec in goal_rec.items():
        if domain not in schema.domains:
            raise SchemaViolation(f"unknown domain [{domain}]", session_id=sid, field="goal")
        info = spec.get("informable", {})
        for slot in info:
            if slot not in schema.domains[domain].state_slots:
                raise SchemaViolation(f"unknown slot {domain}-{slot}", session_id=sid, field="goal")
        req = spec.get("requestable", [])
        for slot in req:
            if slot not in schema.domains[domain].all_slots:
                raise SchemaViolation(f"unknown requestable {domain}-{slot}", session_id=sid, field="goal")
        if info:
            informable[domain] = {s: normalize_text(v) for s, v in info.items()}
        requestable[domain] = tuple(req)
    turns_rec = rec.get("turns")
    if not turns_rec:
        raise SchemaViolation("session has no turns", session_id=sid, field="turns")
    placeholders = set(schema.placeholders)
    turns = []
    for i, t in enumerate(turns_rec):
        if "turn" in t and t["turn"] != i:
            raise SchemaViolation("turn index must increase by 1", session_id=sid, turn_index=i, field="turn")
        for key in ("user", "state", "db", "acts", "response"):
            if key not in t:
                raise SchemaViolation("missing field", session_id=sid, turn_index=i, field=key)
        db = t["db"]
        if not isinstance(db, int) or isinstance(db, bool) or not 0 <= db <= 3:
            raise SchemaViolation("db bucket must be 0..3", session_id=sid, turn_index=i, field="db")
        response = normalize_text(t["response"])
        for ph in PLACEHOLDER_RE.findall(response):
            if ph not in placeholders:
                raise SchemaViolation(
                    f"undeclared placeholder {ph}", session_id=sid, turn_index=i, field="response"
                )
        turns.append(
            DialogTurn(
                turn_index=i,
                user_utterance=normalize_text(t["user"]),
                dialog_state=_validate_state(t["state"], schema, sid, i),
                db_state=DbBucket(db),
                action_state=_validate_acts(t["acts"], schema, sid, i),
                response=response,
            )
        )
    return DialogSession(session_id=sid, goal=Goal(informable, requestable), turns=turns)


def session_to_record(session: DialogSession) -> dict:
    goal = {}
    for d in session.goal.domains:
        goal[d] = {
            "informable": dict(session.goal.informable.get(d, {})),
            "requestable": list(session.goal.requestable.get(d, ())),
        }
    return {
        "session_id": session.session_id,
        "goal": goal,
        "turns": [
            {
                "turn": t.turn_index,
                "user": t.user_utterance,
                "state": {d: dict(s) for d, s in t.dialog_state.constraints.items()},
                "db": t.db_state.bucket,
                "acts": [{"domain": d, "act": a, "slots": list(s)} for d, a, s in t.action_state.acts],
                "response": t.response,
            }
            for t in session.turns
        ],
    }


def load_corpus(path, schema: Schema) -> list[DialogSession]:
    """Read a JSON-lines corpus (one session per line) and validate every record."""
    sessions = []
    seen = set()
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            if not raw.strip():
                continue
            try:
                rec = json.loads(raw)
            except json.JSONDecodeError as e:
                raise CorpusError(f"malformed record: {e.msg}", line=lineno) from e
            if not isinstance(rec, dict):
                raise CorpusError("record is not an object", line=lineno)
            try:
                session = session_from_record(rec, schema)
            except CorpusError as e:
                if e.line is None:
                    e.line = lineno
                    e.args = (f"{e.args[0]} (line {lineno})",)
                raise
            if session.session_id in seen:
                raise SchemaViolation("duplicate session_id", session_id=session.session_id, line=lineno)
            seen.add(session.session_id)
            sessions.append(session)
    return sessions


def write_corpus(sessions: Iterable[DialogSession], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for s in sessions:
            f.write(json.dumps(session_to_record(s), sort_keys=False) + "\n")


# --------------------------------------------------------------------------
# context assembly


def turn_block(user: str, state: DialogState, db: DbBucket, acts: ActionState, response: str) -> list[str]:
    return (
        [USER, *user.split(), STATE, *linearize_state(state).split(), db.token, ACT]
        + linearize_acts(acts).split()
        + [RESP, *response.split()]
    )


def build_context(
    session: DialogSession,
    t: int,
    kind: str = "for_state",
    oracle: bool = True,
    history: Sequence[TurnPrediction] | None = None,
    current_db: DbBucket | None = None,
    max_tokens: int | None = None,
) -> ContextSequence:
    """Assemble the encoder input for turn ``t``.

    ``for_state`` yields (C_t, U_t); ``for_response`` appends the DB token.
    In non-oracle mode the previous turns' state/db/act/response blocks come
    from ``history`` and only user utterances are read from the session.
    ``max_tokens`` left-truncates (oldest history first).
    """
    if kind not in ("for_state", "for_response"):
        raise ValueError(f"unknown context kind {kind!r}")
    if not 0 <= t < len(session.turns):
        raise IndexError(f"turn {t} out of range for session {session.session_id}")
    tokens: list[str] = []
    if oracle:
        for k in range(t):
            turn = session.turns[k]
            tokens += turn_block(
                turn.user_utterance, turn.dialog_state, turn.db_state, turn.action_state, turn.response
            )
    else:
        if history is None or len(history) < t:
            got = 0 if history is None else len(history)
            raise ValueError(f"non-oracle context for turn {t} needs {t} generated turns, got {got}")
        for k in range(t):
            p = history[k]
            tokens += turn_block(session.turns[k].user_utterance, p.state, p.db, p.acts, p.response)
    tokens += [USER, *session.turns[t].user_utterance.split()]
    if kind == "for_response":
        if oracle:
            db = session.turns[t].db_state if current_db is None else current_db
        else:
            if current_db is None:
                raise ValueError("non-oracle response context needs the current db state")
            db = current_db
        tokens.append(db.token)
    if max_tokens is not None and len(tokens) > max_tokens:
        tokens = tokens[len(tokens) - max_tokens :]
    return ContextSequence(tokens=tokens, kind=kind)


# --------------------------------------------------------------------------
# sampling / splitting


def subsample(sessions: Sequence[DialogSession], amount, seed: int = 0) -> list[DialogSession]:
    """Uniform sample without replacement, returned in corpus order.

    ``amount`` is a preset ("5%", "10%", "20%", "50%") or a fraction in (0, 1].
    Presets take the fixed dialog counts 400/800/1600/4000 when the corpus
    is large enough and fall back to floor(fraction * size) otherwise.
    """
    n = len(sessions)
    if isinstance(amount, str) and amount in SUBSAMPLE_PRESETS:
        frac, count = SUBSAMPLE_PRESETS[amount]
        k = count if n >= count else int(frac * n)
    else:
        frac = float(amount)
        if not 0 < frac <= 1:
            raise ValueError(f"fraction must be in (0, 1], got {amount!r}")
        k = int(frac * n)
    if k <= 0:
        raise ValueError(f"subsample {amount!r} of {n} sessions is empty")
    if k >= n:
        return list(sessions)
    idx = sorted(random.Random(seed).sample(range(n), k))
    return [sessions[i] for i in idx]


def split_corpus(sessions: Sequence[DialogSession], val_every: int = 10, test_every: int = 10):
    """Deterministic train/validation/test split by position.

    Every ``val_every``-th session (offset 5) goes to validation and every
    ``test_every``-th (offset 0) to test; the rest is training data.
    """
    train, val, test = [], [], []
    for i, s in enumerate(sessions):
        if test_every and i % test_every == 0:
            test.append(s)
        elif val_every and i % val_every == 5 % val_every:
            val.append(s)
        else:
            train.append(s)
    return train, val, test
