"""Command-line entry point: ``todcl <command> [options]``.

Exit codes: 0 success, 2 invalid input or configuration, 1 runtime failure.
Every command that writes files leaves a manifest next to them (``manifest.json``
for run directories, ``manifest.<command>.json`` for per-run extras).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import statistics
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

from . import __version__
from .corpus import (
    DialogSession,
    Schema,
    load_corpus,
    load_schema,
    session_to_record,
    split_corpus,
    subsample,
    write_corpus,
)
from .dbkit import EntityDb
from .fixture import CORPUS_PATH, DB_PATH, SCHEMA_PATH
from .metrics import MetricReport, evaluate, load_predictions, write_predictions
from .model import load_checkpoint
from .trainer import PARAM_ALIASES, TrainConfig, evaluate_model, rollout, sweep, train

logger = logging.getLogger("todcl")

METRIC_COLUMNS = ("inform", "success", "bleu", "combined", "jga", "act_f1")
ABLATION_ROWS = ("baseline", "w/o DSC", "w/o ASC", "full")
NA = "n/a"
# commands that own their output directory; the others sit next to a run
# and get a command-specific manifest name so they never clobber it
RUN_COMMANDS = ("prepare", "train", "sweep", "lowres", "report")


class UsageError(ValueError):
    """Bad command-line input; maps to exit code 2."""


# --------------------------------------------------------------------------
# manifest


@dataclass
class RunManifest:
    command: str
    config: dict = field(default_factory=dict)
    seed: int | None = None
    corpus_checksum: str | None = None
    checkpoints: list[str] = field(default_factory=list)
    outputs: list[str] = field(default_factory=list)
    tool_version: str = __version__
    argv: list[str] = field(default_factory=list)
    created: float = field(default_factory=time.time)

    def write(self, run_dir) -> Path:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        name = "manifest.json" if self.command in RUN_COMMANDS else f"manifest.{self.command}.json"
        path = run_dir / name
        with open(path, "w", encoding="utf-8") as f:
            json.dump(asdict(self), f, indent=1)
        return path

    @classmethod
    def read(cls, path) -> "RunManifest":
        with open(path, encoding="utf-8") as f:
            return cls(**json.load(f))


def corpus_checksum(sessions: Sequence[DialogSession]) -> str:
    h = hashlib.sha256()
    for s in sessions:
        h.update(json.dumps(session_to_record(s), sort_keys=True).encode())
        h.update(b"\n")
    return h.hexdigest()


def _relative(paths, root: Path) -> list[str]:
    out = []
    for p in paths:
        p = Path(p)
        try:
            out.append(str(p.relative_to(root)))
        except ValueError:
            out.append(str(p))
    return sorted(set(out))


# --------------------------------------------------------------------------
# data loading


@dataclass
class Data:
    schema: Schema
    db: EntityDb
    train: list[DialogSession]
    val: list[DialogSession]
    test: list[DialogSession]

    @property
    def all(self) -> list[DialogSession]:
        return self.train + self.val + self.test

    def split(self, name: str) -> list[DialogSession]:
        if name not in ("train", "val", "test", "all"):
            raise UsageError(f"unknown split {name!r}")
        return self.all if name == "all" else getattr(self, name)


def load_data(data_dir=None) -> Data:
    """A directory written by ``prepare``; without one, the bundled fixture split by position."""
    if data_dir is None:
        schema = load_schema(SCHEMA_PATH)
        db = EntityDb.from_file(DB_PATH, schema)
        return Data(schema, db, *split_corpus(load_corpus(CORPUS_PATH, schema)))
    d = Path(data_dir)
    if not d.is_dir():
        raise FileNotFoundError(f"data directory {d} not found")
    schema = load_schema(d / "schema.json")
    db = EntityDb.from_file(d / "db.json", schema)
    return Data(schema, db, *(load_corpus(d / f"{n}.jsonl", schema) for n in ("train", "val", "test")))


def _load_config(args) -> TrainConfig:
    cfg = TrainConfig.from_file(args.config) if getattr(args, "config", None) else TrainConfig()
    overrides = {
        "mode": getattr(args, "mode", None),
        "seed": getattr(args, "seed", None),
        "epochs": getattr(args, "epochs", None),
        "lambda_dst": getattr(args, "lambda1", None),
        "lambda_act": getattr(args, "lambda2", None),
        "temperature": getattr(args, "temperature", None),
    }
    for k, v in overrides.items():
        if v is not None:
            cfg = cfg.with_param(k, v)
    if getattr(args, "no_validate", False):
        cfg = cfg.with_param("validate", False)
    return cfg


def _parse_list(text: str, cast=str) -> list:
    items = [x.strip() for x in text.split(",") if x.strip()]
    if not items:
        raise UsageError("empty list")
    try:
        return [cast(x) for x in items]
    except ValueError as e:
        raise UsageError(f"bad list {text!r}: {e}") from e


# --------------------------------------------------------------------------
# library-level operations


def train_and_evaluate(train_s, val_s, test_s, db, schema, cfg: TrainConfig, run_dir, max_steps=None) -> MetricReport:
    """Train, roll out the selected checkpoint on ``test_s`` and save predictions plus report."""
    run_dir = Path(run_dir)
    art = train(train_s, val_s, db, schema, cfg, run_dir, max_steps=max_steps)
    model, _ = load_checkpoint(art.best_checkpoint)
    report, records = evaluate_model(model, test_s, db, schema, cfg)
    write_predictions(records, run_dir / "predictions.jsonl")
    report.save(run_dir / "report.json")
    return report


def lowres(
    sessions: Sequence[DialogSession],
    db: EntityDb,
    schema: Schema,
    config: TrainConfig,
    presets: Sequence[str],
    seeds: Sequence[int],
    run_dir,
    run_fn: Callable | None = None,
) -> tuple[list[dict], list[dict]]:
    """Subsample the training pool per preset and seed, train, evaluate on the test split.

    ``run_fn(train, val, test, db, schema, cfg, run_dir)`` returns a MetricReport
    or a dict with the metric columns. Returns (per-run rows, per-preset means).
    """
    if not presets or not seeds:
        raise ValueError("lowres needs at least one preset and one seed")
    run_fn = run_fn or train_and_evaluate
    pool, val, test = split_corpus(sessions)
    run_dir = Path(run_dir)
    rows = []
    for preset in presets:
        for seed in seeds:
            sub = subsample(pool, preset, seed)
            cfg = config.with_param("seed", seed)
            rdir = run_dir / f"{preset.rstrip('%')}pct_seed{seed}"
            result = run_fn(sub, val, test, db, schema, cfg, rdir)
            metrics = result.to_dict() if isinstance(result, MetricReport) else dict(result)
            rows.append({"preset": preset, "seed": seed, "sessions": len(sub),
                         **{k: metrics.get(k) for k in METRIC_COLUMNS}})
    means = aggregate_runs(rows)
    run_dir.mkdir(parents=True, exist_ok=True)
    cols = ["preset", "seed", "sessions", *METRIC_COLUMNS]
    write_table(run_dir / "lowres_runs.tsv", cols, [[r[c] for c in cols] for r in rows])
    mcols = ["preset", "runs", *METRIC_COLUMNS]
    write_table(run_dir / "lowres_means.tsv", mcols, [[m[c] for c in mcols] for m in means])
    return rows, means


def aggregate_runs(rows: Sequence[dict], key: str = "preset") -> list[dict]:
    """Mean of each metric column over the rows sharing ``key``, in first-seen order."""
    groups: dict = {}
    for r in rows:
        groups.setdefault(r[key], []).append(r)
    out = []
    for k, rs in groups.items():
        m = {key: k, "runs": len(rs)}
        for c in METRIC_COLUMNS:
            vals = [r[c] for r in rs if r.get(c) is not None]
            m[c] = statistics.fmean(vals) if vals else None
        out.append(m)
    return out


def _fmt(v) -> str:
    if v is None:
        return NA
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def write_table(path, header: Sequence[str], rows: Sequence[Sequence]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        f.write("\t".join(header) + "\n")
        for r in rows:
            f.write("\t".join(_fmt(v) for v in r) + "\n")
    return path


def ablation_label(cfg: dict) -> str:
    if cfg.get("mode", "baseline") == "baseline":
        return "baseline"
    l1, l2 = cfg.get("lambda_dst", 1.0), cfg.get("lambda_act", 0.1)
    if l1 == 0 and l2 == 0:
        return "baseline"
    if l1 == 0:
        return "w/o DSC"
    if l2 == 0:
        return "w/o ASC"
    return "full"


def _read_json(path):
    try:
        with open(path, encoding="utf-8") as f:
            return json.load(f)
    except FileNotFoundError:
        return None


def report(run_dirs: Sequence, out_dir) -> dict[str, list[list]]:
    """Consolidate run directories into main/ablation/buckets/sweep/analysis TSV tables."""
    if not run_dirs:
        raise ValueError("no run directories given")
    tables: dict[str, tuple[list[str], list[list]]] = {}
    main_rows, bucket_rows, sweep_rows, analysis_rows = [], [], [], []
    ablation: dict[str, list[dict]] = {k: [] for k in ABLATION_ROWS}
    for rd in map(Path, run_dirs):
        if not rd.is_dir():
            raise FileNotFoundError(f"run directory {rd} not found")
        manifest = _read_json(rd / "manifest.json") or {}
        cfg = manifest.get("config") or {}
        metrics = _read_json(rd / "report.json") or {}
        main_rows.append([rd.name, cfg.get("mode", NA), manifest.get("seed"), *(metrics.get(c) for c in METRIC_COLUMNS)])
        if metrics:
            ablation[ablation_label(cfg)].append(metrics)
        for bucket, vals in (metrics.get("per_bucket") or {}).items():
            bucket_rows.append([rd.name, bucket, vals.get("inform"), vals.get("success"), vals.get("sessions")])
        if (rd / "sweep.tsv").exists():
            lines = (rd / "sweep.tsv").read_text(encoding="utf-8").splitlines()
            head = lines[0].split("\t")
            for line in lines[1:]:
                rec = dict(zip(head, line.split("\t")))
                sweep_rows.append([rd.name, rec.get("param"), rec.get("value"),
                                   *(rec.get(c) or None for c in METRIC_COLUMNS)])
        ana = _read_json(rd / "analysis.json")
        if ana:
            analysis_rows.append([rd.name, cfg.get("mode", NA), ana.get("cos_dst"), ana.get("cos_act"),
                                  ana.get("dist_dst"), ana.get("dist_act")])
    abl_rows = []
    for label in ABLATION_ROWS:
        ms = ablation[label]
        abl_rows.append([label, len(ms), *(
            statistics.fmean(m[c] for m in ms) if ms and all(m.get(c) is not None for m in ms) else None
            for c in METRIC_COLUMNS)])
    tables["main"] = (["run", "mode", "seed", *METRIC_COLUMNS], main_rows)
    tables["ablation"] = (["model", "runs", *METRIC_COLUMNS], abl_rows)
    tables["buckets"] = (["run", "bucket", "inform", "success", "sessions"], bucket_rows)
    tables["sweep"] = (["run", "param", "value", *METRIC_COLUMNS], sweep_rows)
    tables["analysis"] = (["run", "mode", "cos_dst", "cos_act", "dist_dst", "dist_act"], analysis_rows)
    out_dir = Path(out_dir)
    for name, (head, rows) in tables.items():
        write_table(out_dir / f"{name}.tsv", head, rows)
    return {name: rows for name, (_, rows) in tables.items()}


# --------------------------------------------------------------------------
# commands


def cmd_prepare(args) -> int:
    schema = load_schema(args.schema or SCHEMA_PATH)
    db = EntityDb.from_file(args.db or DB_PATH, schema)
    sessions = load_corpus(args.corpus or CORPUS_PATH, schema)
    if args.subsample:
        sessions = subsample(sessions, args.subsample, args.seed)
    train_s, val_s, test_s = split_corpus(sessions)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "schema.json", "w", encoding="utf-8") as f:
        json.dump(schema.to_dict(), f, indent=1)
    db.to_file(out / "db.json")
    outputs = [out / "schema.json", out / "db.json"]
    for name, part in (("train", train_s), ("val", val_s), ("test", test_s)):
        write_corpus(part, out / f"{name}.jsonl")
        outputs.append(out / f"{name}.jsonl")
    RunManifest("prepare", config={"subsample": args.subsample}, seed=args.seed,
                corpus_checksum=corpus_checksum(sessions), outputs=_relative(outputs, out),
                argv=sys.argv[1:]).write(out)
    print(f"prepared {len(train_s)}/{len(val_s)}/{len(test_s)} train/val/test sessions in {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    data = load_data(args.data)
    out = Path(args.out or f"runs/{cfg.mode}_seed{cfg.seed}")
    if args.no_eval:
        art = train(data.train, data.val, data.db, data.schema, cfg, out, max_steps=args.max_steps)
        best = art.best_checkpoint
    else:
        rep = train_and_evaluate(data.train, data.val, data.test, data.db, data.schema, cfg, out, args.max_steps)
        best = out / "best.pt"
        print(json.dumps({k: getattr(rep, k) for k in METRIC_COLUMNS}))
    outputs = [p for p in out.rglob("*") if p.is_file() and not p.name.startswith("manifest")]
    RunManifest("train", config=cfg.to_dict(), seed=cfg.seed, corpus_checksum=corpus_checksum(data.all),
                checkpoints=_relative(out.glob("checkpoints/*.pt"), out), outputs=_relative(outputs, out),
                argv=sys.argv[1:]).write(out)
    print(f"best checkpoint: {best}")
    return 0


def cmd_rollout(args) -> int:
    model, meta = load_checkpoint(args.ckpt)
    data = load_data(args.data)
    sessions = data.split(args.split)
    cfg = TrainConfig.from_dict(meta["config"]) if "config" in meta else TrainConfig()
    _, records = rollout(model, sessions, data.db, data.schema, cfg.max_state_len, cfg.max_response_len)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_predictions(records, out)
    RunManifest("rollout", config=cfg.to_dict(), seed=cfg.seed, corpus_checksum=corpus_checksum(sessions),
                checkpoints=[str(args.ckpt)], outputs=[out.name], argv=sys.argv[1:]).write(out.parent)
    print(f"wrote {len(records)} turn predictions to {out}")
    return 0


def cmd_evaluate(args) -> int:
    schema = load_schema(args.schema or SCHEMA_PATH)
    db = EntityDb.from_file(args.db, schema)
    gold = load_corpus(args.gold, schema)
    preds = load_predictions(args.preds, schema)
    rep = evaluate(preds, gold, db, schema, with_success_f1=args.success_f1)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    rep.save(out)
    RunManifest("evaluate", corpus_checksum=corpus_checksum(gold), outputs=[out.name],
                argv=sys.argv[1:]).write(out.parent)
    print(json.dumps({k: getattr(rep, k) for k in METRIC_COLUMNS}))
    return 0


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    grid = _parse_list(args.grid, float)
    data = load_data(args.data)
    out = Path(args.out or f"runs/sweep_{PARAM_ALIASES.get(args.param, args.param)}")
    rows = sweep(cfg, args.param, grid, data.train, data.val, data.test, data.db, data.schema, out)
    RunManifest("sweep", config=cfg.to_dict(), seed=cfg.seed, corpus_checksum=corpus_checksum(data.all),
                checkpoints=_relative(out.glob("*/best.pt"), out), outputs=_relative([out / "sweep.tsv"], out),
                argv=sys.argv[1:]).write(out)
    for r in rows:
        print(f"{r['param']}={r['value']}\tcombined={r['combined']:.2f}")
    return 0


def cmd_lowres(args) -> int:
    cfg = _load_config(args)
    if args.epochs is None:
        cfg = cfg.with_param("epochs", 20)
    presets = _parse_list(args.presets)
    seeds = _parse_list(args.seeds, int)
    data = load_data(args.data)
    out = Path(args.out or "runs/lowres")
    rows, means = lowres(data.all, data.db, data.schema, cfg, presets, seeds, out)
    RunManifest("lowres", config=cfg.to_dict(), seed=None, corpus_checksum=corpus_checksum(data.all),
                checkpoints=_relative(out.glob("*/best.pt"), out),
                outputs=_relative([out / "lowres_runs.tsv", out / "lowres_means.tsv"], out),
                argv=sys.argv[1:]).write(out)
    for m in means:
        print(f"{m['preset']}\truns={m['runs']}\tcombined={_fmt(m['combined'])}")
    return 0


def cmd_analyze(args) -> int:
    from .analysis import RepDump, dump_representations, paired_cosine_report, space_distance_report

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    outputs = [out.name]
    if args.dump and Path(args.dump).with_suffix(".npz").exists():
        dump = RepDump.load(args.dump)
    elif args.ckpt:
        model, _ = load_checkpoint(args.ckpt)
        data = load_data(args.data)
        dump = dump_representations(model, data.split(args.split))
        dump_path = Path(args.dump) if args.dump else out.with_name("reps.npz")
        dump.save(dump_path)
        outputs += [dump_path.with_suffix(".npz").name, dump_path.with_suffix(".index.json").name]
    else:
        raise UsageError("analyze needs an existing --dump or a --ckpt to create one")
    cos_d, cos_a = paired_cosine_report(dump)
    dist_d, dist_a = space_distance_report(dump)
    result = {"cos_dst": cos_d, "cos_act": cos_a, "dist_dst": dist_d, "dist_act": dist_a, "turns": len(dump)}
    with open(out, "w", encoding="utf-8") as f:
        json.dump(result, f, indent=1)
    RunManifest("analyze", checkpoints=[str(args.ckpt)] if args.ckpt else [], outputs=outputs,
                argv=sys.argv[1:]).write(out.parent)
    print(json.dumps(result))
    return 0


def cmd_attention(args) -> int:
    from .analysis import export_cross_attention

    model, _ = load_checkpoint(args.ckpt)
    data = load_data(args.data)
    by_id = {s.session_id: s for s in data.all}
    if args.session not in by_id:
        raise UsageError(f"unknown session {args.session!r}")
    session = by_id[args.session]
    if not 0 <= args.turn < len(session.turns):
        raise UsageError(f"turn {args.turn} out of range (session has {len(session.turns)} turns)")
    export = export_cross_attention(model, session, args.turn, data.db, data.schema)
    prefix = Path(args.out or f"attention/{args.session}_turn{args.turn}")
    mat, labels = export.save(prefix)
    RunManifest("attention", checkpoints=[str(args.ckpt)], outputs=[mat.name, labels.name],
                argv=sys.argv[1:]).write(prefix.parent)
    print(f"wrote {mat} and {labels}")
    return 0


def cmd_report(args) -> int:
    out = Path(args.out)
    tables = report(args.runs, out)
    RunManifest("report", outputs=[f"{n}.tsv" for n in tables], argv=sys.argv[1:]).write(out)
    print(f"wrote {len(tables)} tables to {out}")
    return 0


# --------------------------------------------------------------------------
# parser


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with TrainConfig fields")
    p.add_argument("--mode", choices=["baseline", "mars_p", "mars_g", "mars_variant"])
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lambda1", type=float, help="weight of the dialog-state contrastive term")
    p.add_argument("--lambda2", type=float, help="weight of the action-state contrastive term")
    p.add_argument("--temperature", "-T", type=float)
    p.add_argument("--no-validate", action="store_true", help="skip per-epoch validation; keep the last epoch")
    p.add_argument("--data", help="directory written by 'prepare' (default: bundled fixture)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="todcl", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="validate a corpus and write train/val/test splits")
    p.add_argument("--corpus", help="sessions jsonl (default: bundled fixture)")
    p.add_argument("--schema")
    p.add_argument("--db")
    p.add_argument("--subsample", help="preset (5%%, 10%%, 20%%, 50%%) or fraction")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train one model and evaluate it on the test split")
    _add_train_flags(p)
    p.add_argument("--out", help="run directory")
    p.add_argument("--max-steps", type=int)
    p.add_argument("--no-eval", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("rollout", help="generate predictions with a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True, help="predictions jsonl")
    p.add_argument("--data")
    p.add_argument("--split", default="test")
    p.set_defaults(func=cmd_rollout)

    p = sub.add_parser("evaluate", help="score a predictions file")
    p.add_argument("--preds", required=True)
    p.add_argument("--gold", required=True, help="gold sessions jsonl")
    p.add_argument("--db", required=True)
    p.add_argument("--schema")
    p.add_argument("--success-f1", action="store_true")
    p.add_argument("--out", required=True, help="report json")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="train once per grid value of one parameter")
    _add_train_flags(p)
    p.add_argument("--param", required=True, help="T, lambda1, lambda2, lr or any config field")
    p.add_argument("--grid", required=True, help="comma separated values")
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("lowres", help="subsampled training runs over presets and seeds")
    _add_train_flags(p)
    p.add_argument("--presets", default="5%,10%,20%,50%")
    p.add_argument("--seeds", default="1,2,3,4,5")
    p.add_argument("--out")
    p.set_defaults(func=cmd_lowres)

    p = sub.add_parser("analyze", help="paired cosine and cross-space distance of pooled representations")
    p.add_argument("--dump", help="representation dump (.npz); created from --ckpt when missing")
    p.add_argument("--ckpt")
    p.add_argument("--data")
    p.add_argument("--split", default="test")
    p.add_argument("--out", required=True, help="report json")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("attention", help="export state-decoder cross-attention for one turn")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--session", required=True)
    p.add_argument("--turn", type=int, required=True)
    p.add_argument("--data")
    p.add_argument("--out", help="output prefix (writes .csv and .labels.json)")
    p.set_defaults(func=cmd_attention)

    p = sub.add_parser("report", help="consolidate run directories into TSV tables")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ValueError, KeyError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001
        logger.debug("runtime failure", exc_info=True)
        print(f"failed: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
