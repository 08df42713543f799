"""Representation diagnostics and cross-attention export."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .corpus import DialogSession, Schema, build_context
from .dbkit import EntityDb
from .model import BOS_STATE, DialogModel
from .trainer import make_examples, rollout

FAMILIES = ("H_cd", "H_dd", "H_ca", "H_aa")


@dataclass
class RepDump:
    """Pooled encoder vectors per turn: contexts (cd, ca) and states (dd, aa)."""

    H_cd: np.ndarray
    H_dd: np.ndarray
    H_ca: np.ndarray
    H_aa: np.ndarray
    ids: list[tuple[str, int]]

    def __post_init__(self):
        shapes = {getattr(self, f).shape for f in FAMILIES}
        if len(shapes) != 1:
            raise ValueError(f"representation families disagree in shape: {shapes}")
        (shape,) = shapes
        if len(shape) != 2 or shape[0] != len(self.ids):
            raise ValueError("dump arrays must be (turns, dim) and match the id list")
        for f in FAMILIES:
            if not np.all(np.isfinite(getattr(self, f))):
                raise ValueError(f"{f} contains non-finite values")

    def __len__(self):
        return len(self.ids)

    def save(self, path) -> None:
        path = Path(path)
        np.savez(path, **{f: getattr(self, f) for f in FAMILIES})
        with open(_sidecar(path), "w", encoding="utf-8") as f:
            json.dump({"ids": [list(i) for i in self.ids], "families": list(FAMILIES)}, f)

    @classmethod
    def load(cls, path) -> "RepDump":
        path = Path(path)
        arrays = np.load(path if path.suffix == ".npz" else path.with_suffix(".npz"))
        with open(_sidecar(path), encoding="utf-8") as f:
            ids = [tuple(i) for i in json.load(f)["ids"]]
        return cls(**{f: arrays[f] for f in FAMILIES}, ids=ids)


def _sidecar(path: Path) -> Path:
    return path.with_suffix(".index.json")


@torch.no_grad()
def dump_representations(model: DialogModel, sessions: Sequence[DialogSession], batch_size: int = 32) -> RepDump:
    """Encode every turn's contexts and states with teacher-forced (gold) inputs."""
    model.eval()
    examples = make_examples(sessions, model.vocab, model.cfg.max_len)
    out = {f: [] for f in FAMILIES}
    for i in range(0, len(examples), batch_size):
        chunk = examples[i : i + batch_size]
        out["H_cd"].append(model.encode([e.ctx_state for e in chunk]).pooled)
        out["H_dd"].append(model.encode([e.state_seq for e in chunk]).pooled)
        out["H_ca"].append(model.encode([e.ctx_response for e in chunk]).pooled)
        out["H_aa"].append(model.encode([e.act_seq for e in chunk]).pooled)
    arrays = {f: torch.cat(v).double().numpy() if v else np.zeros((0, model.cfg.d_model)) for f, v in out.items()}
    return RepDump(**arrays, ids=[(e.session_id, e.turn) for e in examples])


def _cos_rows(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    return np.einsum("ij,ij->i", A, B) / (np.linalg.norm(A, axis=1) * np.linalg.norm(B, axis=1))


def paired_cosine_report(dump: RepDump) -> tuple[float, float]:
    """Mean cos(H_cd, H_dd) and mean cos(H_ca, H_aa) over turns."""
    if len(dump) == 0:
        raise ValueError("empty representation dump")
    return float(np.mean(_cos_rows(dump.H_cd, dump.H_dd))), float(np.mean(_cos_rows(dump.H_ca, dump.H_aa)))


def mean_cross_distance(C: np.ndarray, S: np.ndarray) -> float:
    """Mean Euclidean distance over every (context, state) pair, same-index pairs included."""
    sq = (C * C).sum(1)[:, None] + (S * S).sum(1)[None, :] - 2.0 * C @ S.T
    return float(np.mean(np.sqrt(np.maximum(sq, 0.0))))


def space_distance_report(dump: RepDump) -> tuple[float, float]:
    if len(dump) == 0:
        raise ValueError("empty representation dump")
    return mean_cross_distance(dump.H_cd, dump.H_dd), mean_cross_distance(dump.H_ca, dump.H_aa)


# --------------------------------------------------------------------------
# attention export


@dataclass
class AttentionExport:
    matrix: np.ndarray  # (generated state tokens, context tokens)
    rows: list[str]
    cols: list[str]
    session_id: str
    turn: int

    def save(self, out_prefix) -> tuple[Path, Path]:
        out_prefix = Path(out_prefix)
        out_prefix.parent.mkdir(parents=True, exist_ok=True)
        mat_path = out_prefix.with_suffix(".csv")
        lab_path = out_prefix.with_suffix(".labels.json")
        with open(mat_path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            for row in self.matrix:
                w.writerow([f"{x:.8g}" for x in row])
        with open(lab_path, "w", encoding="utf-8") as f:
            json.dump({"rows": self.rows, "cols": self.cols, "session_id": self.session_id, "turn": self.turn}, f)
        return mat_path, lab_path


@torch.no_grad()
def export_cross_attention(
    model: DialogModel,
    session: DialogSession,
    turn: int,
    db: EntityDb,
    schema: Schema,
    max_state_len: int = 64,
) -> AttentionExport:
    """Last-layer, head-averaged cross-attention of the state decoder at ``turn``.

    Earlier turns are rolled out by the model so the context matches inference.
    Row r is the distribution used while emitting generated token r.
    """
    if not 0 <= turn < len(session.turns):
        raise IndexError(f"turn {turn} out of range")
    model.eval()
    history = []
    if turn:
        prefix = DialogSession(session.session_id, session.goal, session.turns[:turn])
        preds, _ = rollout(model, [prefix], db, schema, max_state_len=max_state_len)
        history = preds[session.session_id]
    ctx = build_context(session, turn, "for_state", oracle=False, history=history, max_tokens=model.cfg.max_len)
    enc = model.encode([model.vocab.encode(ctx.tokens)])
    generated = model.decode_state(enc, max_length=max_state_len).tokens[0]
    vocab = model.vocab
    if not generated:
        return AttentionExport(np.zeros((0, len(ctx.tokens))), [], list(ctx.tokens), session.session_id, turn)
    tgt_in = [[vocab.id(BOS_STATE), *generated[:-1]]]
    out = model.decode("state", enc, tgt_in)
    matrix = out.cross_attention[-1][0].double().numpy()
    return AttentionExport(matrix, vocab.decode(generated), list(ctx.tokens), session.session_id, turn)


def _value_spans(rows: Sequence[str], schema: Schema) -> list[list[int]]:
    """Row indices of each slot value in a linearized state, following the parse rules."""
    spans: list[list[int]] = []
    slots: set[str] = set()
    current = None
    for r, tok in enumerate(rows):
        if tok.startswith("[") and tok.endswith("]"):
            dom = schema.domains.get(tok[1:-1])
            slots, current = (set(dom.state_slots) if dom else set()), None
        elif tok in slots:
            current = []
            spans.append(current)
        elif current is not None:
            current.append(r)
    return [s for s in spans if s]


def _occurrences(cols: Sequence[str], value: Sequence[str]) -> set[int]:
    n = len(value)
    return {i + k for i in range(len(cols) - n + 1) if list(cols[i : i + n]) == list(value) for k in range(n)}


def copy_alignment(export: AttentionExport, schema: Schema) -> tuple[int, int]:
    """(hits, total) over generated slot-value tokens whose whole value occurs in the context.

    A hit means the row's argmax column lies inside an occurrence of that value.
    """
    hits = total = 0
    for span in _value_spans(export.rows, schema):
        where = _occurrences(export.cols, [export.rows[r] for r in span])
        if not where:
            continue
        for r in span:
            total += 1
            hits += int(np.argmax(export.matrix[r])) in where
    return hits, total
