"""Filesystem-level difference between a benign and a compromised archive."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Tuple

import numpy as np

from .layout import merge_ranges
from .tar import FileEntry, TarStream

Range = Tuple[int, int]


@dataclass
class DiffReport:
    added: List[Tuple[str, Range]] = field(default_factory=list)
    modified: List[Tuple[str, List[Range]]] = field(default_factory=list)
    deleted: List[str] = field(default_factory=list)

    def is_empty(self) -> bool:
        return not (self.added or self.modified or self.deleted)

    def affected_ranges(self) -> List[Range]:
        """Merged byte ranges of the compromised archive touched by the change."""
        ranges = [r for _, r in self.added]
        for _, rs in self.modified:
            ranges.extend(rs)
        return merge_ranges(ranges)

    def to_json(self) -> dict:
        return {
            "added": [{"path": p, "range": list(r)} for p, r in self.added],
            "modified": [{"path": p, "ranges": [list(r) for r in rs]} for p, rs in self.modified],
            "deleted": list(self.deleted),
            "affected_ranges": [list(r) for r in self.affected_ranges()],
        }


def _by_path(stream: TarStream) -> Dict[str, FileEntry]:
    # Later members shadow earlier ones with the same path, as on extraction.
    return {e.path: e for e in stream.entries}


def differing_runs(a: bytes, b: bytes) -> List[Range]:
    """Maximal runs of ``b`` that differ from ``a``, relative to ``b``.

    Bytes of ``b`` beyond the end of ``a`` all count as differing.
    """
    n = min(len(a), len(b))
    diff = np.zeros(len(b), dtype=bool)
    if n:
        diff[:n] = np.frombuffer(a, np.uint8, n) != np.frombuffer(b, np.uint8, n)
    diff[n:] = True
    if not diff.any():
        return []
    edges = np.flatnonzero(np.diff(np.concatenate(([0], diff.view(np.int8), [0]))))
    return [(int(s), int(e - s)) for s, e in zip(edges[::2], edges[1::2])]


def diff_tarballs(benign: TarStream, compromised: TarStream) -> DiffReport:
    before = _by_path(benign)
    after = _by_path(compromised)
    report = DiffReport()
    for path, e in after.items():
        old = before.get(path)
        if old is None:
            start = e.header_span[0]
            report.added.append((path, (start, e.content_end - start)))
            continue
        ranges: List[Range] = []
        h_old = benign.raw_bytes[old.start:old.content_span[0]]
        h_new = compromised.raw_bytes[e.start:e.content_span[0]]
        if h_old != h_new:
            ranges.append(e.header_span)
        c_off = e.content_span[0]
        a = benign.raw_bytes[old.content_span[0]:old.content_end]
        b = compromised.raw_bytes[c_off:e.content_end]
        for off, n in differing_runs(a, b):
            ranges.append((c_off + off, n))
        if ranges:
            report.modified.append((path, ranges))
    report.deleted = [p for p in before if p not in after]
    report.added.sort(key=lambda t: t[1][0])
    report.modified.sort(key=lambda t: t[1][0][0])
    return report


def admit_record(report: DiffReport) -> bool:
    """Keep a record only if it added or modified something."""
    return bool(report.added or report.modified)
