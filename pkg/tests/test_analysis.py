import csv
import json
import math

import numpy as np
import pytest

from todcl.analysis import (
    RepDump,
    copy_alignment,
    dump_representations,
    export_cross_attention,
    mean_cross_distance,
    paired_cosine_report,
    space_distance_report,
)
from todcl.model import load_checkpoint
from todcl.trainer import train


def make_dump(cd, dd, ca=None, aa=None):
    cd, dd = np.asarray(cd, float), np.asarray(dd, float)
    ca = cd if ca is None else np.asarray(ca, float)
    aa = dd if aa is None else np.asarray(aa, float)
    return RepDump(cd, dd, ca, aa, [("s", i) for i in range(len(cd))])


def test_cosine_examples():
    v = np.random.default_rng(0).normal(size=(4, 3))
    assert paired_cosine_report(make_dump(v, v)) == pytest.approx((1.0, 1.0))
    e1, e2 = np.eye(2)
    assert paired_cosine_report(make_dump([e1, e2], [e2, e1])) == pytest.approx((0.0, 0.0), abs=1e-12)


def test_distance_examples():
    v = np.ones((3, 4))
    assert space_distance_report(make_dump(v, v)) == pytest.approx((0.0, 0.0), abs=1e-6)
    e1, e2 = np.eye(2)
    assert space_distance_report(make_dump([e1], [e2])) == pytest.approx((math.sqrt(2), math.sqrt(2)))


def test_distance_is_full_cross_product():
    rng = np.random.default_rng(1)
    C, S = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
    brute = np.mean([np.linalg.norm(c - s) for c in C for s in S])
    assert mean_cross_distance(C, S) == pytest.approx(brute, abs=1e-12)


def test_scaling_and_order_properties():
    rng = np.random.default_rng(2)
    C, S = rng.normal(size=(6, 4)), rng.normal(size=(6, 4))
    base = make_dump(C, S)
    scaled = make_dump(C * rng.uniform(0.5, 3, (6, 1)), S * rng.uniform(0.5, 3, (6, 1)))
    assert paired_cosine_report(scaled) == pytest.approx(paired_cosine_report(base), abs=1e-12)
    assert space_distance_report(scaled) != pytest.approx(space_distance_report(base), abs=1e-3)
    perm = rng.permutation(6)
    shuffled = make_dump(C[perm], S[perm])
    assert paired_cosine_report(shuffled) == pytest.approx(paired_cosine_report(base), abs=1e-12)
    assert space_distance_report(shuffled) == pytest.approx(space_distance_report(base), abs=1e-12)


def test_dump_validation_and_empty():
    with pytest.raises(ValueError):
        RepDump(np.zeros((2, 3)), np.zeros((2, 4)), np.zeros((2, 3)), np.zeros((2, 3)), [("s", 0), ("s", 1)])
    with pytest.raises(ValueError):
        make_dump([[np.nan, 1.0]], [[1.0, 1.0]])
    empty = make_dump(np.zeros((0, 3)), np.zeros((0, 3)))
    with pytest.raises(ValueError):
        space_distance_report(empty)
    with pytest.raises(ValueError):
        paired_cosine_report(empty)


def test_dump_file_roundtrip(tmp_path):
    d = make_dump(np.eye(3), np.ones((3, 3)))
    d.save(tmp_path / "reps.npz")
    assert (tmp_path / "reps.index.json").exists()
    back = RepDump.load(tmp_path / "reps.npz")
    assert back.ids == d.ids and np.array_equal(back.H_dd, d.H_dd)


@pytest.fixture(scope="module")
def tiny_model(sessions, db, schema, tmp_path_factory):
    from todcl.trainer import TrainConfig

    from .conftest import TINY_BACKBONE

    cfg = TrainConfig(epochs=1, validate=False, backbone=dict(TINY_BACKBONE), max_state_len=12, max_response_len=12)
    art = train(sessions[:3], [], db, schema, cfg, tmp_path_factory.mktemp("tiny"))
    return load_checkpoint(art.best_checkpoint)[0]


def test_dump_representations(tiny_model, sessions):
    d = dump_representations(tiny_model, sessions[:3], batch_size=4)
    assert len(d) == sum(len(s.turns) for s in sessions[:3])
    assert d.H_cd.shape == (len(d), tiny_model.cfg.d_model)
    assert d.ids[0] == (sessions[0].session_id, 0)
    again = dump_representations(tiny_model, sessions[:3], batch_size=2)
    assert np.allclose(d.H_aa, again.H_aa, atol=1e-5)


def test_attention_export(tiny_model, sessions, db, schema, tmp_path):
    s = sessions[0]
    exp = export_cross_attention(tiny_model, s, 1, db, schema, max_state_len=12)
    assert exp.matrix.shape == (len(exp.rows), len(exp.cols))
    if len(exp.rows):
        assert np.allclose(exp.matrix.sum(1), 1.0, atol=1e-5) and np.all(exp.matrix >= 0)
    assert exp.cols[-len(s.turns[1].user_utterance.split()):] == s.turns[1].user_utterance.split()
    mat, labels = exp.save(tmp_path / "att")
    rows = list(csv.reader(open(mat)))
    meta = json.loads(labels.read_text())
    assert len(rows) == len(meta["rows"]) and meta["cols"] == exp.cols and meta["turn"] == 1
    with pytest.raises(IndexError):
        export_cross_attention(tiny_model, s, 99, db, schema)


def test_copy_alignment_counts(schema):
    from todcl.analysis import AttentionExport

    cols = ["<user>", "a", "train", "to", "london", "kings", "cross", "on", "monday"]
    rows = ["[train]", "destination", "london", "kings", "cross", "day", "monday", "people", "4"]
    m = np.full((9, 9), 0.1)
    m[2, 4] = m[3, 4] = 0.5  # both inside the "london kings cross" occurrence
    m[4, 2] = 0.5  # "cross" looks at "train": miss
    m[6, 1] = 0.5  # "monday" looks at "a": miss
    m[8, 8] = 0.5  # "4" never occurs in the context: not counted
    hits, total = copy_alignment(AttentionExport(m / m.sum(1, keepdims=True), rows, cols, "s", 0), schema)
    assert (hits, total) == (2, 4)
