import json
import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cosoco_forge.metrics import Confusion, EngineTable, confusion, ensemble_vote, f1_score, metrics


def test_confusion_examples():
    c = confusion([1, 0, 1, 0], [1, 1, 0, 0])
    assert (c.tp, c.fn, c.fp, c.tn) == (1, 1, 1, 1)
    assert confusion([1, 1], [1, 1]).fp == 0
    wrong = confusion([0, 1], [1, 0])
    assert wrong.tp == wrong.tn == 0
    with pytest.raises(ValueError):
        confusion([1], [1, 0])


def test_metric_values():
    m = metrics(Confusion(tp=5))
    assert (m["accuracy"], m["precision"], m["recall"], m["f1"]) == (1.0, 1.0, 1.0, 1.0)
    m = metrics(Confusion(tp=2, fp=1, fn=3, tn=4))
    assert m["accuracy"] == pytest.approx(6 / 10)
    assert m["precision"] == pytest.approx(2 / 3)
    assert m["recall"] == pytest.approx(2 / 5)
    with pytest.raises(ValueError):
        metrics(Confusion())


def test_zero_division_flag():
    m = metrics(Confusion(tn=4))
    assert m["precision"] == m["recall"] == m["f1"] == 0.0
    assert set(m["zero_division"]) == {"precision", "recall", "f1"}


@given(st.integers(0, 50), st.integers(0, 50), st.integers(0, 50), st.integers(0, 50))
def test_f1_is_harmonic_mean(tp, fp, fn, tn):
    if tp + fp + fn + tn == 0:
        return
    m = metrics(Confusion(tp, fp, fn, tn))
    p, r = m["precision"], m["recall"]
    expect = 0.0 if p + r == 0 else 2 / (1 / p + 1 / r)
    assert m["f1"] == pytest.approx(expect, rel=1e-15, abs=1e-15)


def test_ensemble_examples():
    t = EngineTable(["a", "b"], ["e1"], np.array([[1], [0]]))
    assert ensemble_vote(t, 1) == {"a": 1, "b": 0}
    t = EngineTable(["r"], ["x", "y", "z"], np.array([[1, 0, 1]]))
    assert ensemble_vote(t, 2) == {"r": 1}
    assert ensemble_vote(t, 3) == {"r": 0}  # AND
    with pytest.warns(UserWarning):
        assert ensemble_vote(t, 4) == {"r": 0}
    with pytest.raises(ValueError):
        ensemble_vote(t, 0)


def test_recall_non_increasing_in_a(rng):
    v = rng.integers(0, 2, size=(60, 7))
    labels = rng.integers(0, 2, size=60)
    t = EngineTable([str(i) for i in range(60)], [f"e{j}" for j in range(7)], v)
    rec = []
    for a in range(1, 8):
        votes = ensemble_vote(t, a)
        rec.append(metrics(confusion([votes[i] for i in t.ids], labels))["recall"])
    assert all(x >= y for x, y in zip(rec, rec[1:]))


def test_engine_table_io(tmp_path):
    p = tmp_path / "e.csv"
    p.write_text("id,engine,verdict\na,x,1\na,y,0\nb,x,0\nb,y,0\n")
    t = EngineTable.read(p)
    assert t.ids == ["a", "b"] and t.engines == ["x", "y"]
    j = tmp_path / "e.json"
    j.write_text(json.dumps({"rows": [{"id": "a", "engine": "x", "verdict": 1}]}))
    assert EngineTable.read(j).verdicts.tolist() == [[1]]
    bad = tmp_path / "bad.csv"
    bad.write_text("id,engine,verdict\na,x,1\nb,y,0\n")
    with pytest.raises(ValueError, match="missing"):
        EngineTable.read(bad)
