"""Dialog evaluation: Inform/Success, BLEU, combined score, JGA, Act F1,
turn-bucket breakdowns and a heuristic failure taxonomy."""

from __future__ import annotations

import json
import math
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

from .corpus import (
    PLACEHOLDER_RE,
    ActionState,
    DialogSession,
    DialogState,
    Goal,
    Schema,
    TurnPrediction,
    linearize_acts,
    linearize_state,
    parse_acts,
    parse_state,
)
from .dbkit import DbBucket, EntityDb

BLEU_EPSILON = 1e-9
TURN_BUCKETS = ((0, 4, "(0,4]"), (4, 8, "(4,8]"), (8, 12, "(8,12]"), (12, 19, "(12,20)"))
OFFER_PLACEHOLDERS = ("[value_name]", "[value_id]")
ERROR_LABELS = ("inaccurate_state", "inadequate_act", "annotation_or_script", "acceptable_or_other")
_ARTICLES = {"the", "a", "an"}


@dataclass
class MetricReport:
    inform: float = 0.0
    success: float = 0.0
    bleu: float = 0.0
    combined: float = 0.0
    act_f1: float = 0.0
    jga: float = 0.0
    success_f1: float | None = None
    per_bucket: dict = field(default_factory=dict)
    per_domain: dict = field(default_factory=dict)
    sessions: int = 0
    turns: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)


def combined(inform: float, success: float, bleu: float) -> float:
    return (inform + success) * 0.5 + bleu


def combined_f1(inform: float, success_f1: float, bleu: float) -> float:
    """CamRest-style combined score with Success F1 in place of Success."""
    return (inform + success_f1) * 0.5 + bleu


# --------------------------------------------------------------------------
# Inform / Success


def _placeholders(text: str) -> set[str]:
    return set(PLACEHOLDER_RE.findall(text))


def _entity_keys(db: EntityDb, domain: str, constraints: dict[str, str]) -> set[int]:
    ents = db.matches(domain, constraints)
    return {id(e) for e in ents}


@dataclass
class SessionOutcome:
    inform: bool
    success: bool
    failed_domains: list[str]
    missing_requestables: list[tuple[str, str]]


def session_outcome(preds: Sequence[TurnPrediction], goal: Goal, db: EntityDb, schema: Schema) -> SessionOutcome:
    for d in goal.domains:
        if d not in schema.domains:
            raise ValueError(f"goal references unknown domain [{d}]")
    failed = []
    for domain, cons in goal.informable.items():
        if not cons:
            continue
        goal_ents = _entity_keys(db, domain, cons)
        offered = False
        for p in preds:
            if not any(ph in p.response for ph in OFFER_PLACEHOLDERS):
                continue
            turn_domains = [d for d in p.acts.domains if d in schema.domains] or list(p.state.constraints)
            if domain not in turn_domains or domain not in p.state.constraints:
                continue
            if _entity_keys(db, domain, p.state.constraints[domain]) & goal_ents:
                offered = True
                break
        if not offered:
            failed.append(domain)
    provided = set()
    for p in preds:
        provided |= _placeholders(p.response)
    missing = [
        (d, slot) for d, slots in goal.requestable.items() for slot in slots if f"[value_{slot}]" not in provided
    ]
    inform = not failed
    return SessionOutcome(inform, inform and not missing, failed, missing)


def inform_success(
    predictions: Mapping[str, Sequence[TurnPrediction]],
    goals: Mapping[str, Goal],
    db: EntityDb,
    schema: Schema,
) -> tuple[float, float]:
    """Percent of sessions with an accurate offered entity / also all requests answered."""
    if not predictions:
        return 0.0, 0.0
    inf = suc = 0
    for sid, preds in predictions.items():
        if sid not in goals:
            raise KeyError(f"no goal for session {sid!r}")
        out = session_outcome(preds, goals[sid], db, schema)
        inf += out.inform
        suc += out.success
    n = len(predictions)
    return 100.0 * inf / n, 100.0 * suc / n


def success_f1(
    predictions: Mapping[str, Sequence[TurnPrediction]], goals: Mapping[str, Goal], schema: Schema
) -> float:
    """Micro F1 between requested slots and requestable placeholders offered."""
    requestable = {s for d in schema.domains.values() for s in d.requestable}
    tp = fp = fn = 0
    for sid, preds in predictions.items():
        wanted = {s for slots in goals[sid].requestable.values() for s in slots}
        given = set()
        for p in preds:
            for ph in _placeholders(p.response):
                slot = ph[len("[value_") : -1]
                if slot in requestable:
                    given.add(slot)
        tp += len(wanted & given)
        fp += len(given - wanted)
        fn += len(wanted - given)
    if tp == 0:
        return 100.0 if fp == fn == 0 else 0.0
    p, r = tp / (tp + fp), tp / (tp + fn)
    return 100.0 * 2 * p * r / (p + r)


# --------------------------------------------------------------------------
# BLEU


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(hypotheses: Sequence[str], references: Sequence[str], max_n: int = 4) -> float:
    """Corpus BLEU (single reference), brevity penalty, epsilon for empty matches, x100."""
    if len(hypotheses) != len(references):
        raise ValueError("hypotheses and references differ in length")
    if not hypotheses:
        raise ValueError("BLEU of an empty corpus is undefined")
    matches = [0] * max_n
    totals = [0] * max_n
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        h, r = hyp.split(), ref.split()
        hyp_len += len(h)
        ref_len += len(r)
        for n in range(1, max_n + 1):
            hc, rc = _ngrams(h, n), _ngrams(r, n)
            matches[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())
            totals[n - 1] += max(len(h) - n + 1, 0)
    if hyp_len == 0:
        return 0.0
    log_p = sum(math.log((m or BLEU_EPSILON) / (t or 1)) for m, t in zip(matches, totals)) / max_n
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(log_p)


# --------------------------------------------------------------------------
# state / act accuracy


def normalize_value(value: str) -> str:
    return " ".join(t for t in value.lower().split() if t not in _ARTICLES)


def _state_triples(state: DialogState) -> set[tuple[str, str, str]]:
    return {(d, s, normalize_value(v)) for d, s, v in state.triples()}


def joint_goal_accuracy(pred_states: Sequence[DialogState], gold_states: Sequence[DialogState]) -> float:
    if len(pred_states) != len(gold_states):
        raise ValueError("prediction and gold turn counts differ")
    if not gold_states:
        raise ValueError("no turns to score")
    hits = sum(_state_triples(p) == _state_triples(g) for p, g in zip(pred_states, gold_states))
    return 100.0 * hits / len(gold_states)


def act_triples(acts: ActionState) -> set[tuple[str, str, str | None]]:
    out = set()
    for d, a, slots in acts.acts:
        if slots:
            out.update((d, a, s) for s in slots)
        else:
            out.add((d, a, None))
    return out


def act_f1(pred_acts: Sequence[ActionState], gold_acts: Sequence[ActionState]) -> float:
    """Micro F1 over (domain, act, slot) triples; slot-less acts count as (domain, act, None)."""
    if len(pred_acts) != len(gold_acts):
        raise ValueError("prediction and gold turn counts differ")
    tp = fp = fn = 0
    for p, g in zip(pred_acts, gold_acts):
        pt, gt = act_triples(p), act_triples(g)
        tp += len(pt & gt)
        fp += len(pt - gt)
        fn += len(gt - pt)
    if tp == 0:
        return 100.0 if fp == fn == 0 else 0.0
    prec, rec = tp / (tp + fp), tp / (tp + fn)
    return 100.0 * 2 * prec * rec / (prec + rec)


# --------------------------------------------------------------------------
# breakdowns


def turn_bucket(n_turns: int) -> str:
    for lo, hi, label in TURN_BUCKETS:
        if lo < n_turns <= hi:
            return label
    return ">=20" if n_turns >= 20 else TURN_BUCKETS[0][2]


def turn_bucket_report(
    predictions: Mapping[str, Sequence[TurnPrediction]], goals: Mapping[str, Goal], db: EntityDb, schema: Schema
) -> dict[str, dict]:
    """Inform/Success per session-length bucket; only populated buckets appear."""
    groups: dict[str, dict] = {}
    for sid, preds in predictions.items():
        groups.setdefault(turn_bucket(len(preds)), {})[sid] = preds
    order = [label for *_, label in TURN_BUCKETS] + [">=20"]
    report = {}
    for label in order:
        if label in groups:
            inf, suc = inform_success(groups[label], goals, db, schema)
            report[label] = {"inform": inf, "success": suc, "sessions": len(groups[label])}
    return report


def _state_mismatch(pred: DialogState, gold: DialogState, goal: Goal) -> str | None:
    for domain, slots in goal.informable.items():
        g = gold.constraints.get(domain, {})
        p = pred.constraints.get(domain, {})
        for slot in slots:
            if slot in g and normalize_value(p.get(slot, "")) != normalize_value(g[slot]):
                return domain
    return None


def error_report(
    predictions: Mapping[str, Sequence[TurnPrediction]],
    goals: Mapping[str, Goal],
    db: EntityDb,
    schema: Schema,
    gold: Mapping[str, DialogSession],
) -> tuple[dict[str, dict], dict[str, dict[str, int]]]:
    """Heuristic pre-labeling of failed sessions.

    Returns ({session_id: {"label", "domain"}}, {domain: {label: count}}).
    Successful sessions are not labeled.
    """
    labels: dict[str, dict] = {}
    per_domain: dict[str, dict[str, int]] = defaultdict(lambda: dict.fromkeys(ERROR_LABELS, 0))
    for sid, preds in predictions.items():
        goal = goals[sid]
        out = session_outcome(preds, goal, db, schema)
        if out.success:
            continue
        turns = gold[sid].turns
        label = domain = None
        for p, t in zip(preds, turns):
            domain = _state_mismatch(p.state, t.dialog_state, goal)
            if domain:
                label = "inaccurate_state"
                break
        if label is None:
            for p, t in zip(preds, turns):
                missing = {x for x in act_triples(t.action_state) - act_triples(p.acts) if x[2] is not None}
                if missing:
                    label, domain = "inadequate_act", sorted(missing, key=str)[0][0]
                    break
        if label is None:
            same = all(_placeholders(p.response) == _placeholders(t.response) for p, t in zip(preds, turns))
            label = "annotation_or_script" if same and len(preds) == len(turns) else "acceptable_or_other"
        if domain is None or domain not in schema.domains:
            candidates = out.failed_domains + [d for d, _ in out.missing_requestables] + goal.domains
            domain = candidates[0] if candidates else "general"
        labels[sid] = {"label": label, "domain": domain}
        per_domain[domain][label] += 1
    return labels, {d: dict(c) for d, c in per_domain.items()}


# --------------------------------------------------------------------------
# predictions files / full evaluation


def prediction_record(session_id: str, turn: int, p: TurnPrediction, state_text=None, acts_text=None, warnings=()):
    return {
        "session_id": session_id,
        "turn": turn,
        "state": state_text if state_text is not None else linearize_state(p.state),
        "db": p.db.bucket,
        "acts": acts_text if acts_text is not None else linearize_acts(p.acts),
        "response": p.response,
        "warnings": list(warnings),
    }


def write_predictions(records: Sequence[dict], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps(r) + "\n")


def load_predictions(path, schema: Schema) -> dict[str, list[TurnPrediction]]:
    out: dict[str, list[TurnPrediction]] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            if not raw.strip():
                continue
            try:
                r = json.loads(raw)
            except json.JSONDecodeError as e:
                raise ValueError(f"malformed prediction record at line {lineno}: {e.msg}") from e
            records = out.setdefault(r["session_id"], [])
            if r["turn"] != len(records):
                raise ValueError(f"line {lineno}: turns of session {r['session_id']!r} out of order")
            records.append(predictions_from_record(r, schema))
    return out


def predictions_from_record(r: dict, schema: Schema) -> TurnPrediction:
    state, _ = parse_state(r["state"], schema)
    acts, _ = parse_acts(r["acts"], schema)
    return TurnPrediction(state=state, db=DbBucket(int(r["db"])), acts=acts, response=r["response"])


def evaluate(
    predictions: Mapping[str, Sequence[TurnPrediction]],
    sessions: Sequence[DialogSession],
    db: EntityDb,
    schema: Schema,
    with_success_f1: bool = False,
) -> MetricReport:
    gold = {s.session_id: s for s in sessions}
    missing = [sid for sid in predictions if sid not in gold]
    if missing:
        raise KeyError(f"predictions for unknown sessions: {missing[:3]}")
    goals = {sid: gold[sid].goal for sid in predictions}
    inf, suc = inform_success(predictions, goals, db, schema)
    hyps, refs, ps, gs, pa, ga = [], [], [], [], [], []
    for sid, preds in predictions.items():
        turns = gold[sid].turns
        if len(preds) != len(turns):
            raise ValueError(f"session {sid!r}: {len(preds)} predicted turns for {len(turns)} gold turns")
        for p, t in zip(preds, turns):
            hyps.append(p.response)
            refs.append(t.response)
            ps.append(p.state)
            gs.append(t.dialog_state)
            pa.append(p.acts)
            ga.append(t.action_state)
    b = bleu(hyps, refs) if hyps else 0.0
    _, per_domain = error_report(predictions, goals, db, schema, gold)
    return MetricReport(
        inform=inf,
        success=suc,
        bleu=b,
        combined=combined(inf, suc, b),
        act_f1=act_f1(pa, ga) if pa else 0.0,
        jga=joint_goal_accuracy(ps, gs) if gs else 0.0,
        success_f1=success_f1(predictions, goals, schema) if with_success_f1 else None,
        per_bucket=turn_bucket_report(predictions, goals, db, schema),
        per_domain=per_domain,
        sessions=len(predictions),
        turns=len(hyps),
    )
