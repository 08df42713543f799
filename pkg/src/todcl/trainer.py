"""Training loop, checkpoint selection, cascaded rollout and hyper-parameter sweeps."""

from __future__ import annotations

import json
import logging
import math
import random
import shutil
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .corpus import (
    ACT,
    STATE,
    DialogSession,
    Schema,
    TurnPrediction,
    build_context,
    linearize_acts,
    linearize_state,
    parse_acts,
    parse_state,
)
from .dbkit import EntityDb, active_domain, db_state_for
from .losses import LossWeights, contrastive_loss, generation_loss, total_loss
from .metrics import evaluate, prediction_record
from .model import (
    BackboneConfig,
    DialogModel,
    Vocab,
    act_response_target,
    load_checkpoint,
    save_checkpoint,
    split_act_response,
    state_target,
)

logger = logging.getLogger(__name__)

DEFAULT_TEMPERATURE = {"mars_p": 0.1, "mars_g": 0.5}
PARAM_ALIASES = {"T": "temperature", "lambda1": "lambda_dst", "lambda2": "lambda_act", "lr": "learning_rate"}
LAMBDA_GRID = (0.01, 0.05, 0.1, 0.5, 1, 2, 5)
TEMPERATURE_GRID = (0.01, 0.1, 0.5, 1, 5, 10)


class DivergenceError(RuntimeError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value} at step {step}")
        self.step = step


@dataclass
class TrainConfig:
    mode: str = "baseline"
    lambda_dst: float = 1.0
    lambda_act: float = 0.1
    temperature: float | None = None  # None -> 0.1 for mars_p, 0.5 for mars_g
    batch_size: int = 8
    epochs: int = 10
    learning_rate: float = 5e-4
    warmup_ratio: float = 0.2
    weight_decay: float = 0.01
    seed: int = 1
    oracle_db: bool = True
    checkpoint_metric: str = "combined"
    grad_clip: float = 1.0
    positive_rule: str = "next"
    max_state_len: int = 64
    max_response_len: int = 96
    validate: bool = True
    keep_checkpoints: str = "best"  # "best" | "all"
    backbone: dict = field(default_factory=dict)

    def __post_init__(self):
        LossWeights(self.lambda_dst, self.lambda_act, self.mode)
        if self.temperature is not None and self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")
        if not 0 <= self.warmup_ratio <= 1:
            raise ValueError("warmup_ratio must be in [0, 1]")
        if self.checkpoint_metric not in ("combined", "jga"):
            raise ValueError("checkpoint_metric must be 'combined' or 'jga'")
        if self.keep_checkpoints not in ("best", "all"):
            raise ValueError("keep_checkpoints must be 'best' or 'all'")
        unknown = set(self.backbone) - {f.name for f in fields(BackboneConfig)}
        if unknown:
            raise ValueError(f"unknown backbone options {sorted(unknown)}")

    @property
    def effective_temperature(self) -> float:
        if self.temperature is not None:
            return self.temperature
        return DEFAULT_TEMPERATURE.get(self.mode, 0.5)

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_dst, self.lambda_act, self.mode)

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(**self.backbone)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        with open(path, encoding="utf-8") as f:
            return cls.from_dict(json.load(f))

    def with_param(self, name: str, value) -> "TrainConfig":
        name = PARAM_ALIASES.get(name, name)
        if name in {f.name for f in fields(BackboneConfig)}:
            return replace(self, backbone={**self.backbone, name: value})
        if name not in {f.name for f in fields(self)}:
            raise ValueError(f"unknown parameter {name!r}")
        return replace(self, **{name: value})


def lr_at(step: int | float, total_steps: int, warmup_ratio: float, peak: float) -> float:
    """Linear warm-up to ``peak`` at warmup_ratio * total_steps, then linear decay to 0."""
    warm = warmup_ratio * total_steps
    if step <= warm:
        return peak * step / warm if warm > 0 else peak
    if total_steps <= warm:
        return 0.0
    return peak * max(0.0, (total_steps - step) / (total_steps - warm))


# --------------------------------------------------------------------------
# data


@dataclass
class TurnExample:
    session_id: str
    turn: int
    ctx_state: list[int]
    ctx_response: list[int]
    state_target: list[int]
    act_target: list[int]
    state_seq: list[int]
    act_seq: list[int]


def build_vocab(sessions: Sequence[DialogSession], schema: Schema, db: EntityDb | None = None) -> Vocab:
    texts = []
    for s in sessions:
        for t in s.turns:
            texts += [t.user_utterance, linearize_state(t.dialog_state), linearize_acts(t.action_state), t.response]
    extra = list(schema.special_tokens())
    for d, spec in schema.domains.items():
        extra += list(spec.all_slots)
    if db is not None:
        for ents in db.entities.values():
            for e in ents:
                texts += [str(v) for v in e.values()]
    return Vocab.build(texts, extra)


def make_examples(
    sessions: Sequence[DialogSession],
    vocab: Vocab,
    max_len: int,
    db: EntityDb | None = None,
    schema: Schema | None = None,
    oracle_db: bool = True,
) -> list[TurnExample]:
    out = []
    for s in sessions:
        prev_state, active = None, None
        for t, turn in enumerate(s.turns):
            current_db = None
            if not oracle_db and db is not None and schema is not None:
                active = active_domain(turn.dialog_state, prev_state, schema, active)
                current_db = db_state_for(db, turn.dialog_state, active)
                prev_state = turn.dialog_state
            cs = build_context(s, t, "for_state", oracle=True, max_tokens=max_len)
            cr = build_context(s, t, "for_response", oracle=True, current_db=current_db, max_tokens=max_len)
            st = linearize_state(turn.dialog_state)
            at = linearize_acts(turn.action_state)
            out.append(
                TurnExample(
                    session_id=s.session_id,
                    turn=t,
                    ctx_state=vocab.encode(cs.tokens),
                    ctx_response=vocab.encode(cr.tokens),
                    state_target=vocab.encode(state_target(st)),
                    act_target=vocab.encode(act_response_target(at, turn.response)),
                    state_seq=vocab.encode([STATE, *st.split()]),
                    act_seq=vocab.encode([ACT, *at.split()]),
                )
            )
    return out


def epoch_batches(n: int, batch_size: int, seed: int, epoch: int) -> list[list[int]]:
    """Seeded shuffle; a trailing singleton batch is merged into its predecessor."""
    order = list(range(n))
    random.Random(seed * 1_000_003 + epoch).shuffle(order)
    batches = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) == 1:
        batches[-2].extend(batches.pop())
    return batches


def _shift(model: DialogModel, targets: Sequence[list[int]]):
    ids, mask = model.batch_ids(targets)
    return ids[:, :-1], mask[:, :-1], ids[:, 1:]


# --------------------------------------------------------------------------
# training


@dataclass
class RunArtifacts:
    run_dir: Path
    config: TrainConfig
    checkpoints: dict[int, Path] = field(default_factory=dict)
    loss_log: list[dict] = field(default_factory=list)
    val_metrics: list[dict] = field(default_factory=list)
    best_epoch: int | None = None

    @property
    def best_checkpoint(self) -> Path | None:
        return self.checkpoints.get(self.best_epoch) if self.best_epoch is not None else None


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


def compute_losses(model: DialogModel, batch: Sequence[TurnExample], cfg: TrainConfig, step: int, rng=None) -> dict:
    pad = model.pad_id
    enc_d = model.encode([e.ctx_state for e in batch])
    tin, tmask, tout = _shift(model, [e.state_target for e in batch])
    L_D = generation_loss(model.decode("state", enc_d, tin, tmask).logits, tout, pad)
    enc_a = model.encode([e.ctx_response for e in batch])
    ain, amask, aout = _shift(model, [e.act_target for e in batch])
    L_R = generation_loss(model.decode("act", enc_a, ain, amask).logits, aout, pad)
    zero = L_D.new_zeros(())
    L_dscl = L_ascl = zero
    if cfg.mode != "baseline":
        # separate RNG stream so the extra encoder passes never shift the
        # dropout masks of the generation passes
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed * 7_919 + step)
            H_dd = model.encode([e.state_seq for e in batch]).pooled
            H_aa = model.encode([e.act_seq for e in batch]).pooled
        T = cfg.effective_temperature
        L_dscl = contrastive_loss(cfg.mode, enc_d.pooled, H_dd, T, cfg.positive_rule, rng)
        L_ascl = contrastive_loss(cfg.mode, enc_a.pooled, H_aa, T, cfg.positive_rule, rng)
    total = total_loss(L_D, L_R, L_dscl, L_ascl, cfg.weights)
    return {"L_D": L_D, "L_R": L_R, "L_dscl": L_dscl, "L_ascl": L_ascl, "total": total}


def train(
    train_sessions: Sequence[DialogSession],
    val_sessions: Sequence[DialogSession],
    db: EntityDb,
    schema: Schema,
    cfg: TrainConfig,
    run_dir,
    vocab: Vocab | None = None,
    max_steps: int | None = None,
) -> RunArtifacts:
    """Train one model; validate, checkpoint and select the best epoch.

    ``max_steps`` stops early (the schedule still spans all epochs).
    """
    run_dir = Path(run_dir)
    ckpt_dir = run_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    seed_everything(cfg.seed)
    if vocab is None:
        vocab = build_vocab(list(train_sessions) + list(val_sessions), schema, db)
    model = DialogModel(cfg.backbone_config(), vocab)
    examples = make_examples(train_sessions, vocab, model.cfg.max_len, db, schema, cfg.oracle_db)
    if not examples:
        raise ValueError("no training turns")
    steps_per_epoch = len(epoch_batches(len(examples), cfg.batch_size, cfg.seed, 0))
    total_steps = steps_per_epoch * cfg.epochs
    optim = torch.optim.AdamW(model.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    art = RunArtifacts(run_dir=run_dir, config=cfg)
    log_path = run_dir / "loss_log.jsonl"
    step = 0
    with open(log_path, "w", encoding="utf-8") as log_f:
        for epoch in range(1, cfg.epochs + 1):
            model.train()
            t0 = time.time()
            for idx in epoch_batches(len(examples), cfg.batch_size, cfg.seed, epoch):
                lr = lr_at(step, total_steps, cfg.warmup_ratio, cfg.learning_rate)
                for g in optim.param_groups:
                    g["lr"] = lr
                losses = compute_losses(model, [examples[i] for i in idx], cfg, step, rng)
                total = losses["total"]
                if not torch.isfinite(total):
                    raise DivergenceError(step, float(total.detach()))
                optim.zero_grad()
                total.backward()
                if cfg.grad_clip:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
                optim.step()
                step += 1
                rec = {"step": step, "lr": lr, **{k: float(v.detach()) for k, v in losses.items()}}
                art.loss_log.append(rec)
                log_f.write(json.dumps(rec) + "\n")
                if max_steps is not None and step >= max_steps:
                    break
            log_f.flush()
            finished = epoch == cfg.epochs or (max_steps is not None and step >= max_steps)
            validating = cfg.validate and bool(val_sessions)
            if validating or cfg.keep_checkpoints == "all" or finished:
                ckpt = ckpt_dir / f"epoch_{epoch}.pt"
                save_checkpoint(model, ckpt, {"epoch": epoch, "step": step, "config": cfg.to_dict()})
                art.checkpoints[epoch] = ckpt
            record = {"epoch": epoch, "step": step, "train_loss": art.loss_log[-1]["total"]}
            if cfg.validate and val_sessions:
                report, _ = evaluate_model(model, val_sessions, db, schema, cfg)
                record.update(combined=report.combined, jga=report.jga, inform=report.inform,
                              success=report.success, bleu=report.bleu, act_f1=report.act_f1)
            art.val_metrics.append(record)
            logger.info("epoch %d done in %.1fs: %s", epoch, time.time() - t0, record)
            if max_steps is not None and step >= max_steps:
                break
    with open(run_dir / "val_metrics.json", "w", encoding="utf-8") as f:
        json.dump(art.val_metrics, f, indent=1)
    if cfg.validate and val_sessions:
        art.best_epoch = select_checkpoint(art, cfg.checkpoint_metric)
    else:
        art.best_epoch = max(art.checkpoints)
    if cfg.keep_checkpoints == "best":
        for ep, path in list(art.checkpoints.items()):
            if ep != art.best_epoch:
                path.unlink(missing_ok=True)
                del art.checkpoints[ep]
    shutil.copyfile(art.checkpoints[art.best_epoch], run_dir / "best.pt")
    return art


def select_checkpoint(run: RunArtifacts, metric: str = "combined") -> int:
    """Epoch with the highest validation ``metric``; ties go to the earliest epoch."""
    if not run.val_metrics:
        raise ValueError("no completed epochs")
    best_epoch, best = None, -math.inf
    for rec in run.val_metrics:
        if metric not in rec:
            raise KeyError(f"metric {metric!r} missing from validation log of epoch {rec.get('epoch')}")
        if rec[metric] > best:
            best_epoch, best = rec["epoch"], rec[metric]
    return best_epoch


# --------------------------------------------------------------------------
# inference


@torch.no_grad()
def rollout(
    model: DialogModel,
    sessions: Sequence[DialogSession],
    db: EntityDb,
    schema: Schema,
    max_state_len: int = 64,
    max_response_len: int = 96,
) -> tuple[dict[str, list[TurnPrediction]], list[dict]]:
    """Cascaded inference: generated state -> db lookup -> generated acts and response.

    Sessions advance turn-synchronously in a batch. Only user utterances are
    read from the sessions; every earlier block comes from the model.
    Returns predictions keyed by session id and the raw file records.
    """
    model.eval()
    vocab = model.vocab
    history: dict[str, list[TurnPrediction]] = {s.session_id: [] for s in sessions}
    records: dict[str, list[dict]] = {s.session_id: [] for s in sessions}
    tracking = {s.session_id: (None, None) for s in sessions}  # (prev_state, active domain)
    max_turns = max((len(s.turns) for s in sessions), default=0)
    for t in range(max_turns):
        live = [s for s in sessions if len(s.turns) > t]
        ctx = [
            vocab.encode(build_context(s, t, "for_state", oracle=False, history=history[s.session_id],
                                       max_tokens=model.cfg.max_len).tokens)
            for s in live
        ]
        gen = model.decode_state(model.encode(ctx), max_length=max_state_len).tokens
        states, dbs, raw_states, warns = [], [], [], []
        for s, ids in zip(live, gen):
            text = " ".join(vocab.decode(ids))
            state, w = parse_state(text, schema)
            prev_state, active = tracking[s.session_id]
            active = active_domain(state, prev_state, schema, active)
            tracking[s.session_id] = (state, active)
            states.append(state)
            dbs.append(db_state_for(db, state, active))
            raw_states.append(text)
            warns.append(w)
        ctx = [
            vocab.encode(build_context(s, t, "for_response", oracle=False, history=history[s.session_id],
                                       current_db=bucket, max_tokens=model.cfg.max_len).tokens)
            for s, bucket in zip(live, dbs)
        ]
        gen = model.decode_act_response(model.encode(ctx), max_length=max_response_len).tokens
        for i, (s, ids) in enumerate(zip(live, gen)):
            act_toks, resp_toks, w = split_act_response(vocab.decode(ids))
            acts_text = " ".join(act_toks)
            acts, w2 = parse_acts(acts_text, schema)
            pred = TurnPrediction(state=states[i], db=dbs[i], acts=acts, response=" ".join(resp_toks))
            history[s.session_id].append(pred)
            records[s.session_id].append(
                prediction_record(s.session_id, t, pred, raw_states[i], acts_text, warns[i] + w + w2)
            )
    flat = [r for s in sessions for r in records[s.session_id]]
    return history, flat


def evaluate_model(model, sessions, db, schema, cfg: TrainConfig | None = None):
    cfg = cfg or TrainConfig()
    preds, records = rollout(model, sessions, db, schema, cfg.max_state_len, cfg.max_response_len)
    return evaluate(preds, sessions, db, schema), records


# --------------------------------------------------------------------------
# sweeps


def sweep(
    base: TrainConfig,
    param: str,
    grid: Sequence,
    train_sessions,
    val_sessions,
    test_sessions,
    db: EntityDb,
    schema: Schema,
    run_dir,
    train_fn: Callable = train,
) -> list[dict]:
    """Train and evaluate once per grid value; rows come back in grid order."""
    if not grid:
        raise ValueError("empty grid")
    run_dir = Path(run_dir)
    rows = []
    eval_sessions = test_sessions or val_sessions
    for value in grid:
        cfg = base.with_param(param, value)
        sub = run_dir / f"{PARAM_ALIASES.get(param, param)}={value}"
        art = train_fn(train_sessions, val_sessions, db, schema, cfg, sub)
        model, _ = load_checkpoint(art.best_checkpoint)
        report, records = evaluate_model(model, eval_sessions, db, schema, cfg)
        report.save(sub / "report.json")
        rows.append({"param": PARAM_ALIASES.get(param, param), "value": value, "combined": report.combined,
                     "inform": report.inform, "success": report.success, "bleu": report.bleu,
                     "jga": report.jga, "act_f1": report.act_f1, "run_dir": str(sub)})
    with open(run_dir / "sweep.tsv", "w", encoding="utf-8") as f:
        cols = ["param", "value", "combined", "inform", "success", "bleu", "jga", "act_f1"]
        f.write("\t".join(cols) + "\n")
        for r in rows:
            f.write("\t".join(_fmt(r[c]) for c in cols) + "\n")
    return rows


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)
