import json

import pytest

from todcl.cli import (
    ABLATION_ROWS,
    RunManifest,
    ablation_label,
    aggregate_runs,
    build_parser,
    corpus_checksum,
    lowres,
    main,
    report,
)
from todcl.synth import make_corpus
from todcl.trainer import TrainConfig

from .conftest import TINY_BACKBONE

# Mars-G low-resource runs, five seeds per preset (inform, success, bleu, combined)
REFERENCE_RUNS = {
    "5%": [(55.8, 41.1, 14.0, 62.5), (57.0, 43.2, 12.9, 63.0), (62.2, 48.4, 13.3, 68.6),
           (55.9, 42.4, 14.3, 63.4), (57.3, 42.0, 14.9, 64.5)],
    "10%": [(68.7, 55.0, 16.7, 78.6), (69.8, 53.0, 16.0, 77.4), (67.8, 53.7, 14.6, 75.4),
            (73.0, 60.5, 16.6, 83.3), (67.6, 54.4, 14.3, 75.3)],
}


def test_parser_knows_every_command():
    sub = next(a for a in build_parser()._actions if a.dest == "command")
    assert set(sub.choices) == {"prepare", "train", "rollout", "evaluate", "sweep", "lowres", "analyze",
                                "attention", "report"}


def test_exit_codes(tmp_path, capsys):
    with pytest.raises(SystemExit) as e:
        main(["train", "--mode", "nope"])
    assert e.value.code == 2
    assert main(["train", "--config", str(tmp_path / "missing.json")]) == 2
    (tmp_path / "bad.json").write_text(json.dumps({"epochz": 1}))
    assert main(["train", "--config", str(tmp_path / "bad.json")]) == 2
    assert main(["evaluate", "--preds", "x", "--gold", "y", "--db", "z", "--out", str(tmp_path / "r")]) == 2
    assert main(["report", "--runs", str(tmp_path / "nowhere"), "--out", str(tmp_path / "rep")]) == 2


def test_runtime_failure_exit_code(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"backbone": TINY_BACKBONE, "learning_rate": float("inf"), "epochs": 2}))
    assert main(["train", "--config", str(cfg), "--no-validate", "--no-eval", "--out", str(tmp_path / "r")]) == 1


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """prepare -> train -> rollout -> evaluate -> analyze -> attention on a tiny model."""
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps({"backbone": TINY_BACKBONE, "max_state_len": 10, "max_response_len": 10}))
    data, run = root / "data", root / "run"
    codes = {
        "prepare": main(["prepare", "--out", str(data)]),
        "train": main(["train", "--config", str(cfg), "--mode", "mars_g", "--seed", "7", "--epochs", "1",
                       "--no-validate", "--data", str(data), "--out", str(run)]),
        "rollout": main(["rollout", "--ckpt", str(run / "best.pt"), "--out", str(run / "preds.jsonl"),
                         "--data", str(data)]),
        "evaluate": main(["evaluate", "--preds", str(run / "preds.jsonl"), "--gold", str(data / "test.jsonl"),
                          "--db", str(data / "db.json"), "--out", str(run / "eval.json")]),
        "analyze": main(["analyze", "--ckpt", str(run / "best.pt"), "--data", str(data),
                         "--out", str(run / "analysis.json")]),
    }
    first_test = json.loads((data / "test.jsonl").read_text().splitlines()[0])["session_id"]
    codes["attention"] = main(["attention", "--ckpt", str(run / "best.pt"), "--session", first_test, "--turn", "1",
                               "--data", str(data), "--out", str(run / "att" / "t1")])
    return root, data, run, codes


def test_pipeline_commands_succeed(pipeline):
    _, _, _, codes = pipeline
    assert codes == dict.fromkeys(codes, 0)


def test_prepare_outputs(pipeline):
    _, data, _, _ = pipeline
    m = RunManifest.read(data / "manifest.json")
    assert m.command == "prepare" and set(m.outputs) == {"schema.json", "db.json", "train.jsonl", "val.jsonl",
                                                          "test.jsonl"}
    assert len((data / "test.jsonl").read_text().splitlines()) == 5


def test_train_manifest(pipeline, sessions):
    _, _, run, _ = pipeline
    m = RunManifest.read(run / "manifest.json")
    assert m.command == "train" and m.seed == 7 and m.config["mode"] == "mars_g"
    assert m.corpus_checksum == corpus_checksum(sessions[i] for i in _prepared_order(sessions))
    assert m.checkpoints == ["checkpoints/epoch_1.pt"]
    for out in m.outputs:
        assert (run / out).exists()
    assert {"loss_log.jsonl", "report.json", "predictions.jsonl", "best.pt"} <= set(m.outputs)
    # the stored config round-trips
    assert TrainConfig.from_dict(m.config).seed == 7


def _prepared_order(sessions):
    idx = list(range(len(sessions)))
    test = [i for i in idx if i % 10 == 0]
    val = [i for i in idx if i % 10 == 5]
    train = [i for i in idx if i % 10 not in (0, 5)]
    return train + val + test


def test_train_is_reproducible(pipeline, tmp_path):
    root, data, run, _ = pipeline
    again = tmp_path / "again"
    assert main(["train", "--config", str(root / "cfg.json"), "--mode", "mars_g", "--seed", "7", "--epochs", "1",
                 "--no-validate", "--data", str(data), "--out", str(again)]) == 0
    assert (again / "loss_log.jsonl").read_bytes() == (run / "loss_log.jsonl").read_bytes()
    assert (again / "predictions.jsonl").read_bytes() == (run / "predictions.jsonl").read_bytes()


def test_rollout_and_evaluate_agree(pipeline):
    _, _, run, _ = pipeline
    assert (run / "preds.jsonl").read_bytes() == (run / "predictions.jsonl").read_bytes()
    a, b = json.loads((run / "eval.json").read_text()), json.loads((run / "report.json").read_text())
    assert a["combined"] == b["combined"] and a["jga"] == b["jga"]
    assert (run / "manifest.rollout.json").exists() and (run / "manifest.evaluate.json").exists()


def test_analyze_outputs(pipeline):
    _, _, run, _ = pipeline
    res = json.loads((run / "analysis.json").read_text())
    assert set(res) == {"cos_dst", "cos_act", "dist_dst", "dist_act", "turns"}
    assert (run / "reps.npz").exists() and (run / "reps.index.json").exists()
    assert main(["analyze", "--dump", str(run / "reps.npz"), "--out", str(run / "analysis2.json")]) == 0
    assert json.loads((run / "analysis2.json").read_text()) == res
    assert main(["analyze", "--out", str(run / "x.json")]) == 2


def test_attention_outputs(pipeline):
    _, _, run, _ = pipeline
    assert (run / "att" / "t1.csv").exists() and (run / "att" / "t1.labels.json").exists()
    assert main(["attention", "--ckpt", str(run / "best.pt"), "--session", "nobody", "--turn", "0"]) == 2


def test_report_tables(pipeline, tmp_path):
    _, _, run, _ = pipeline
    assert main(["report", "--runs", str(run), "--out", str(tmp_path / "rep")]) == 0
    main_tsv = (tmp_path / "rep" / "main.tsv").read_text().splitlines()
    assert len(main_tsv) == 2 and main_tsv[1].split("\t")[1:3] == ["mars_g", "7"]
    abl = [line.split("\t") for line in (tmp_path / "rep" / "ablation.tsv").read_text().splitlines()[1:]]
    assert [r[0] for r in abl] == list(ABLATION_ROWS)
    assert abl[0][2:] == ["n/a"] * 6 and abl[3][1] == "1"
    for name in ("buckets", "sweep", "analysis"):
        assert (tmp_path / "rep" / f"{name}.tsv").exists()


def test_report_missing_metric_is_na(tmp_path):
    run = tmp_path / "r1"
    run.mkdir()
    RunManifest("train", config={"mode": "baseline"}, seed=1).write(run)
    (run / "report.json").write_text(json.dumps({"inform": 50.0, "success": 40.0, "bleu": 10.0, "combined": 55.0}))
    tables = report([run], tmp_path / "out")
    assert len(tables["main"]) == 1
    row = (tmp_path / "out" / "main.tsv").read_text().splitlines()[1].split("\t")
    assert row[-2:] == ["n/a", "n/a"]


def test_ablation_labels():
    assert ablation_label({"mode": "baseline"}) == "baseline"
    assert ablation_label({"mode": "mars_g", "lambda_dst": 0.0, "lambda_act": 0.1}) == "w/o DSC"
    assert ablation_label({"mode": "mars_g", "lambda_dst": 1.0, "lambda_act": 0.0}) == "w/o ASC"
    assert ablation_label({"mode": "mars_p", "lambda_dst": 1.0, "lambda_act": 0.1}) == "full"


def fake_runs(table):
    def run_fn(train_s, val_s, test_s, db, schema, cfg, run_dir):
        preset = next(p for p, n in (("5%", 400), ("10%", 800)) if len(train_s) == n)
        inf, suc, bleu, comb = table[preset][cfg.seed - 1]
        return {"inform": inf, "success": suc, "bleu": bleu, "combined": comb}
    return run_fn


def test_lowres_rows_and_means(db, schema, tmp_path):
    corpus = make_corpus(1250, seed=5, db=db)  # 1000 training sessions after the split
    rows, means = lowres(corpus, db, schema, TrainConfig(), ["5%", "10%"], [1, 2, 3, 4, 5], tmp_path,
                         run_fn=fake_runs(REFERENCE_RUNS))
    assert len(rows) == 10 and [m["runs"] for m in means] == [5, 5]
    assert [r["sessions"] for r in rows] == [400] * 5 + [800] * 5
    assert [m["preset"] for m in means] == ["5%", "10%"]
    assert round(means[0]["combined"], 1) == 64.4 and round(means[1]["combined"], 1) == 78.0
    assert round(means[0]["inform"], 1) == 57.6 and round(means[1]["success"], 1) == 55.3
    assert len((tmp_path / "lowres_runs.tsv").read_text().splitlines()) == 11
    means_tsv = (tmp_path / "lowres_means.tsv").read_text().splitlines()
    assert len(means_tsv) == 3 and means_tsv[1].split("\t")[-2:] == ["n/a", "n/a"]


def test_lowres_single_run_mean_equals_run(sessions, db, schema, tmp_path):
    rows, means = lowres(sessions, db, schema, TrainConfig(), ["50%"], [1], tmp_path,
                         run_fn=lambda *a: {"inform": 1.0, "success": 2.0, "bleu": 3.0, "combined": 4.5})
    assert len(rows) == 1 and means[0]["combined"] == rows[0]["combined"] == 4.5
    with pytest.raises(ValueError):
        lowres(sessions, db, schema, TrainConfig(), [], [1], tmp_path)


def test_aggregate_reference_averages():
    table = {
        "20%": [84.4, 85.8, 87.2, 89.4, 88.2],
        "50%": [95.2, 91.4, 96.1, 95.9, 98.1],
    }
    rows = [{"preset": p, "combined": c} for p, cs in table.items() for c in cs]
    means = aggregate_runs(rows)
    assert [round(m["combined"], 1) for m in means] == [87.0, 95.3]
