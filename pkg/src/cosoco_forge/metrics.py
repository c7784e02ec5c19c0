"""Confusion counts, detection metrics and engine-ensemble voting."""
from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence

import numpy as np


@dataclass(frozen=True)
class Confusion:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __post_init__(self):
        for k in ("tp", "fp", "fn", "tn"):
            if getattr(self, k) < 0:
                raise ValueError(f"{k} must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def to_json(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn}


def confusion(preds: Sequence[int], labels: Sequence[int]) -> Confusion:
    """Counts with 1 (malevolent) as the positive class."""
    p = np.asarray(preds).astype(np.int64).ravel()
    y = np.asarray(labels).astype(np.int64).ravel()
    if p.shape != y.shape:
        raise ValueError(f"got {p.size} predictions for {y.size} labels")
    if not (np.isin(p, (0, 1)).all() and np.isin(y, (0, 1)).all()):
        raise ValueError("predictions and labels must be 0 or 1")
    return Confusion(
        tp=int(np.sum((p == 1) & (y == 1))),
        fp=int(np.sum((p == 1) & (y == 0))),
        fn=int(np.sum((p == 0) & (y == 1))),
        tn=int(np.sum((p == 0) & (y == 0))),
    )


def _ratio(num: float, den: float):
    return (num / den, False) if den else (0.0, True)


def f1_score(precision: float, recall: float) -> float:
    s = precision + recall
    return 2 * precision * recall / s if s else 0.0


def metrics(c: Confusion) -> dict:
    """Accuracy, precision, recall and F1. Undefined ratios are 0 and listed under ``zero_division``."""
    if c.total == 0:
        raise ValueError("empty confusion")
    precision, zp = _ratio(c.tp, c.tp + c.fp)
    recall, zr = _ratio(c.tp, c.tp + c.fn)
    f1 = f1_score(precision, recall)
    undefined = [k for k, z in (("precision", zp), ("recall", zr), ("f1", precision + recall == 0)) if z]
    return {
        "accuracy": (c.tp + c.tn) / c.total,
        "precision": precision,
        "recall": recall,
        "f1": f1,
        "zero_division": undefined,
    }


@dataclass
class EngineTable:
    ids: List[str]
    engines: List[str]
    verdicts: np.ndarray  # (n_ids, n_engines) of 0/1

    def __post_init__(self):
        v = np.asarray(self.verdicts)
        if v.shape != (len(self.ids), len(self.engines)):
            raise ValueError(f"verdicts shape {v.shape} does not match {len(self.ids)} ids x {len(self.engines)} engines")
        if not np.isin(v, (0, 1)).all():
            raise ValueError("engine verdicts must be 0 or 1")
        if len(set(self.ids)) != len(self.ids) or len(set(self.engines)) != len(self.engines):
            raise ValueError("duplicate record ids or engine names")
        self.verdicts = v.astype(np.int8)

    @classmethod
    def from_rows(cls, rows: Sequence[dict]) -> "EngineTable":
        """Long rows ``{id, engine, verdict}``; every id needs a verdict from every engine."""
        ids, engines, cell = [], [], {}
        for r in rows:
            i, e = str(r["id"]), str(r["engine"])
            if i not in cell:
                ids.append(i)
                cell[i] = {}
            if e not in engines:
                engines.append(e)
            if e in cell[i]:
                raise ValueError(f"duplicate verdict for {i}/{e}")
            cell[i][e] = int(r["verdict"])
        missing = [f"{i}/{e}" for i in ids for e in engines if e not in cell[i]]
        if missing:
            raise ValueError(f"missing verdicts: {', '.join(missing[:10])}")
        v = np.array([[cell[i][e] for e in engines] for i in ids], dtype=np.int8).reshape(len(ids), len(engines))
        return cls(ids, engines, v)

    @classmethod
    def read(cls, path) -> "EngineTable":
        """CSV with columns id,engine,verdict, or JSON ``{"rows": [...]}`` / a list of such rows."""
        path = Path(path)
        text = path.read_text()
        if path.suffix.lower() == ".json":
            data = json.loads(text)
            rows = data["rows"] if isinstance(data, dict) else data
        else:
            rows = list(csv.DictReader(text.splitlines()))
        return cls.from_rows(rows)


def ensemble_vote(table: EngineTable, a: int) -> Dict[str, int]:
    """Record is malevolent iff at least ``a`` engines flag it."""
    if a < 1:
        raise ValueError("ensemble threshold must be at least 1")
    n = len(table.engines)
    if a > n:
        warnings.warn(f"threshold {a} exceeds the {n} engines; every record votes benign", stacklevel=2)
    votes = table.verdicts.sum(axis=1) >= a
    return {i: int(v) for i, v in zip(table.ids, votes)}
