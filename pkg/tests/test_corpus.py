import json
import random

import pytest

from todcl.corpus import (
    ActionState,
    CorpusError,
    DialogState,
    SchemaViolation,
    TurnPrediction,
    build_context,
    linearize_acts,
    linearize_state,
    load_corpus,
    parse_acts,
    parse_state,
    session_to_record,
    split_corpus,
    subsample,
    write_corpus,
)
from todcl.dbkit import DbBucket
from todcl.fixture import CORPUS_PATH
from todcl.synth import make_corpus

from .helpers import random_acts, random_state


def test_fixture_counts_are_stable(sessions):
    # frozen from an independent json/whitespace count of corpus.jsonl
    assert len(sessions) == 50
    assert sum(len(s.turns) for s in sessions) == 230
    assert sum(len(t.user_utterance.split()) for s in sessions for t in s.turns) == 1897
    assert sum(len(t.response.split()) for s in sessions for t in s.turns) == 2165


def test_write_load_roundtrip(sessions, schema, tmp_path):
    path = tmp_path / "c.jsonl"
    write_corpus(sessions, path)
    assert path.read_bytes() == CORPUS_PATH.read_bytes()
    again = load_corpus(path, schema)
    assert [session_to_record(s) for s in again] == [session_to_record(s) for s in sessions]


def _one_turn_record(**turn_overrides):
    turn = {"turn": 0, "user": "i need a train .", "state": {"train": {"day": "friday"}}, "db": 3,
            "acts": [{"domain": "train", "act": "request", "slots": ["departure"]}],
            "response": "where from ?"}
    turn.update(turn_overrides)
    return {"session_id": "s1", "goal": {"train": {"informable": {"day": "friday"}, "requestable": []}}, "turns": [turn]}


def _write(tmp_path, records, raw=None):
    path = tmp_path / "c.jsonl"
    path.write_text(raw if raw is not None else "".join(json.dumps(r) + "\n" for r in records))
    return path


def test_minimal_file_loads(schema, tmp_path):
    out = load_corpus(_write(tmp_path, [_one_turn_record()]), schema)
    assert len(out) == 1 and out[0].turns[0].db_state == DbBucket(3)


def test_unknown_domain_is_schema_violation(schema, tmp_path):
    with pytest.raises(SchemaViolation) as e:
        load_corpus(_write(tmp_path, [_one_turn_record(state={"spaceport": {"gate": "2"}})]), schema)
    assert e.value.session_id == "s1" and e.value.turn_index == 0 and e.value.field


@pytest.mark.parametrize("override", [
    {"acts": [{"domain": "train", "act": "teleport", "slots": []}]},
    {"response": "the id is [value_colour] ."},
    {"db": 9},
    {"turn": 3},
])
def test_turn_invariants_enforced(schema, tmp_path, override):
    with pytest.raises(CorpusError):
        load_corpus(_write(tmp_path, [_one_turn_record(**override)]), schema)


def test_malformed_line_reports_line_number(schema, tmp_path):
    raw = json.dumps(_one_turn_record()) + "\n{not json\n"
    with pytest.raises(CorpusError) as e:
        load_corpus(_write(tmp_path, None, raw), schema)
    assert e.value.line == 2


def test_duplicate_session_rejected(schema, tmp_path):
    with pytest.raises(SchemaViolation):
        load_corpus(_write(tmp_path, [_one_turn_record(), _one_turn_record()]), schema)


def test_session_needs_a_turn(schema, tmp_path):
    rec = _one_turn_record()
    rec["turns"] = []
    with pytest.raises(CorpusError):
        load_corpus(_write(tmp_path, [rec]), schema)


# --------------------------------------------------------------------------
# linearization


def test_linearize_state_examples():
    assert linearize_state(DialogState({"attraction": {"type": "theatre"}})) == "[attraction] type theatre"
    assert linearize_state(DialogState({})) == ""
    s = DialogState({"train": {"destination": "stansted airport", "day": "friday"}})
    assert linearize_state(s) == "[train] destination stansted airport day friday"


def test_parse_state_examples(schema):
    s, w = parse_state("[restaurant] food italian area east", schema)
    assert s.constraints == {"restaurant": {"food": "italian", "area": "east"}} and not w
    assert parse_state("", schema) == (DialogState({}), [])
    s, w = parse_state("[hotel] [hotel] stars 4", schema)
    assert s.constraints == {"hotel": {"stars": "4"}} and any("duplicate" in x for x in w)


def test_parse_state_degrades(schema):
    s, w = parse_state("hello there [train] day friday [spaceport] gate 4 [train] people", schema)
    assert s.constraints == {"train": {"day": "friday"}}
    assert len(w) >= 3


def test_act_examples(schema):
    a = ActionState([("restaurant", "inform", ["food", "price", "area"]), ("general", "reqmore", [])])
    text = "[restaurant] [inform] food price area [general] [reqmore]"
    assert linearize_acts(a) == text
    assert parse_acts(text, schema) == (a, [])
    assert linearize_acts(ActionState([])) == "" and parse_acts("", schema) == (ActionState([]), [])
    parsed, _ = parse_acts("[attraction] [select] area [inform] type choice", schema)
    assert parsed.acts == [("attraction", "select", ("area",)), ("attraction", "inform", ("type", "choice"))]


def test_parse_acts_degrades(schema):
    acts, w = parse_acts("[inform] name [hotel] [teleport] [hotel] [request] area [restaurant]", schema)
    assert acts.acts == [("hotel", "request", ("area",))]
    assert len(w) >= 3


@pytest.mark.parametrize("seed", range(3))
def test_random_roundtrips(schema, seed):
    rng = random.Random(seed)
    for _ in range(200):
        s = random_state(rng, schema)
        parsed, w = parse_state(linearize_state(s), schema)
        assert parsed == s and not w
        a = random_acts(rng, schema)
        parsed_a, w = parse_acts(linearize_acts(a), schema)
        assert parsed_a == a and not w


def test_fixture_annotations_roundtrip(sessions, schema):
    for s in sessions:
        for t in s.turns:
            assert parse_state(linearize_state(t.dialog_state), schema)[0] == t.dialog_state
            assert parse_acts(linearize_acts(t.action_state), schema)[0] == t.action_state


# --------------------------------------------------------------------------
# context assembly


def test_context_first_turn(sessions):
    s = sessions[0]
    ctx = build_context(s, 0, "for_state")
    assert ctx.tokens == ["<user>", *s.turns[0].user_utterance.split()]


def test_context_second_turn_order(sessions):
    s = sessions[0]
    t0, t1 = s.turns[0], s.turns[1]
    expected = (["<user>", *t0.user_utterance.split(), "<state>", *linearize_state(t0.dialog_state).split(),
                 t0.db_state.token, "<act>", *linearize_acts(t0.action_state).split(),
                 "<resp>", *t0.response.split(), "<user>", *t1.user_utterance.split()])
    assert build_context(s, 1, "for_state").tokens == expected
    assert build_context(s, 1, "for_response").tokens == expected + [t1.db_state.token]


def test_context_prefix_monotone(sessions):
    for s in sessions[:10]:
        prev = None
        for t in range(len(s.turns)):
            toks = build_context(s, t, "for_state").tokens
            if prev is not None:
                # the previous turn's context minus nothing is a prefix
                assert toks[: len(prev)] == prev
            prev = toks


def test_non_oracle_uses_history_only(sessions):
    s = sessions[0]
    fake = TurnPrediction(DialogState({"hotel": {"stars": "5"}}), DbBucket(0), ActionState([("general", "bye", [])]), "bye")
    with pytest.raises(ValueError):
        build_context(s, 1, "for_state", oracle=False, history=[])
    toks = build_context(s, 1, "for_state", oracle=False, history=[fake]).tokens
    assert "[hotel]" in toks and "[db_0]" in toks and "[train]" not in toks
    with pytest.raises(ValueError):
        build_context(s, 1, "for_response", oracle=False, history=[fake])
    toks = build_context(s, 1, "for_response", oracle=False, history=[fake], current_db=DbBucket(1)).tokens
    assert toks[-1] == "[db_1]"


def test_context_left_truncation(sessions):
    s = max(sessions, key=lambda x: len(x.turns))
    full = build_context(s, len(s.turns) - 1, "for_response").tokens
    cut = build_context(s, len(s.turns) - 1, "for_response", max_tokens=20).tokens
    assert cut == full[-20:]


def test_context_errors(sessions):
    with pytest.raises(IndexError):
        build_context(sessions[0], 99)
    with pytest.raises(ValueError):
        build_context(sessions[0], 0, "for_nothing")


# --------------------------------------------------------------------------
# subsampling


def test_preset_uses_fixed_counts(db):
    big = make_corpus(420, seed=3, db=db)
    assert len(subsample(big, "5%", seed=1)) == 400


def test_preset_falls_back_to_fraction(sessions):
    assert len(subsample(sessions, "10%", seed=0)) == 5
    assert len(subsample(sessions, "50%", seed=0)) == 25
    with pytest.raises(ValueError):
        subsample(sessions[:10], "5%", seed=0)


def test_subsample_properties(sessions):
    assert subsample(sessions, 1.0, seed=5) == list(sessions)
    a = subsample(sessions, 0.3, seed=7)
    b = subsample(sessions, 0.3, seed=7)
    assert [s.session_id for s in a] == [s.session_id for s in b]
    assert len({s.session_id for s in a}) == 15
    order = {s.session_id: i for i, s in enumerate(sessions)}
    assert [order[s.session_id] for s in a] == sorted(order[s.session_id] for s in a)
    assert subsample(a, 1.0, seed=7) == a
    for bad in (0, 1.5, "3%"):
        with pytest.raises(ValueError):
            subsample(sessions, bad, seed=0)


def test_split_is_partition(sessions):
    train, val, test = split_corpus(sessions)
    ids = [s.session_id for s in train + val + test]
    assert sorted(ids) == sorted(s.session_id for s in sessions)
    assert (len(train), len(val), len(test)) == (40, 5, 5)
