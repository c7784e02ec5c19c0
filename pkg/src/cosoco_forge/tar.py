"""Tar archive ingestion over the raw byte stream.

The parser keeps byte-exact spans for every member so that images built from
the archive can be mapped back to headers, contents and padding.
"""
from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence, Tuple

BLOCK = 512

Span = Tuple[int, int]

REGULAR = "regular"
DIRECTORY = "directory"
LINK = "link"
OTHER = "other"

HEADER = "header"
CONTENT = "content"
PADDING = "padding"
TRAILER = "trailer"

# Type flags whose data blocks are skipped but never carry content of their own.
_NO_CONTENT = {b"1": LINK, b"2": LINK, b"3": OTHER, b"4": OTHER, b"5": DIRECTORY, b"6": OTHER}
# Extension headers that describe the member that follows them.
_EXTENSION = {b"x", b"g", b"L", b"K"}


class TarError(ValueError):
    """Raised for malformed or truncated archives."""


@dataclass(frozen=True)
class FileEntry:
    path: str
    header_span: Span
    content_span: Span
    declared_size: int
    kind: str

    @property
    def start(self) -> int:
        return self.header_span[0]

    @property
    def content_end(self) -> int:
        return self.content_span[0] + self.content_span[1]

    @property
    def end(self) -> int:
        """Offset one past the padding that closes this member."""
        return _round_up(self.content_end)

    @property
    def padding_span(self) -> Span:
        return (self.content_end, self.end - self.content_end)

    def to_json(self) -> dict:
        return {
            "path": self.path,
            "header_span": list(self.header_span),
            "content_span": list(self.content_span),
            "size": self.declared_size,
            "kind": self.kind,
        }


@dataclass(frozen=True)
class TarStream:
    raw_bytes: bytes
    entries: Tuple[FileEntry, ...]
    _starts: Tuple[int, ...] = field(default=(), repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "_starts", tuple(e.start for e in self.entries))

    @property
    def total_len(self) -> int:
        return len(self.raw_bytes)

    @property
    def trailer_start(self) -> int:
        return self.entries[-1].end if self.entries else 0

    def paths(self) -> List[str]:
        return [e.path for e in self.entries]

    def entry_bytes(self, index: int) -> bytes:
        e = self.entries[index]
        return self.raw_bytes[e.start:e.end]

    def content(self, index: int) -> bytes:
        off, n = self.entries[index].content_span
        return self.raw_bytes[off:off + n]


def _round_up(n: int) -> int:
    return -(-n // BLOCK) * BLOCK


def _nts(field_bytes: bytes) -> str:
    return field_bytes.split(b"\0", 1)[0].decode("utf-8", "surrogateescape")


def _octal(field_bytes: bytes, offset: int) -> int:
    # GNU base-256 for sizes beyond the octal range.
    if field_bytes[0] & 0x80:
        value = 0
        for b in field_bytes[1:]:
            value = (value << 8) | b
        if field_bytes[0] == 0xFF:
            value -= 256 ** (len(field_bytes) - 1)
        return value
    text = field_bytes.replace(b"\0", b" ").strip()
    if not text:
        return 0
    try:
        return int(text, 8)
    except ValueError:
        raise TarError(f"invalid numeric field {field_bytes!r} in header at offset {offset}") from None


def _checksum_ok(block: bytes, offset: int) -> bool:
    stored = _octal(block[148:156], offset)
    unsigned = sum(block[:148]) + 256 + sum(block[156:])
    signed = sum((b - 256 if b > 127 else b) for b in block[:148] + block[156:]) + 256
    return stored in (unsigned, signed)


def _pax_records(data: bytes) -> dict:
    records = {}
    pos = 0
    while pos < len(data):
        space = data.find(b" ", pos)
        if space < 0:
            break
        try:
            length = int(data[pos:space])
        except ValueError:
            break
        if length <= 0:
            break
        record = data[space + 1:pos + length - 1]
        key, _, value = record.partition(b"=")
        records[key.decode("utf-8", "replace")] = value.decode("utf-8", "surrogateescape")
        pos += length
    return records


def parse_tar(data: bytes) -> TarStream:
    """Parse an uncompressed ustar/GNU/PAX archive into ordered members.

    Extension headers (PAX ``x``/``g``, GNU ``L``/``K``) are folded into the
    header span of the member they describe.
    """
    data = bytes(data)
    total = len(data)
    if total % BLOCK:
        raise TarError(
            f"truncated archive: length {total} is not a multiple of {BLOCK} "
            f"(expected {_round_up(total)} bytes)"
        )
    entries: List[FileEntry] = []
    pos = 0
    member_start: Optional[int] = None
    long_name: Optional[str] = None
    pax_path: Optional[str] = None
    pax_size: Optional[int] = None

    while pos + BLOCK <= total:
        block = data[pos:pos + BLOCK]
        if block == bytes(BLOCK):
            break
        if not _checksum_ok(block, pos):
            raise TarError(f"header checksum mismatch in block at offset {pos}")
        if member_start is None:
            member_start = pos
        typeflag = block[156:157]
        size = _octal(block[124:136], pos)
        data_start = pos + BLOCK

        if typeflag in _EXTENSION:
            end = data_start + size
            if end > total:
                raise TarError(f"truncated archive: expected at least {end} bytes, got {total}")
            payload = data[data_start:end]
            if typeflag == b"L":
                long_name = _nts(payload)
            elif typeflag == b"x":
                recs = _pax_records(payload)
                pax_path = recs.get("path", pax_path)
                if "size" in recs:
                    pax_size = int(recs["size"])
            pos = data_start + _round_up(size)
            continue

        if pax_size is not None:
            size = pax_size
        name = _nts(block[0:100])
        if block[257:263] in (b"ustar\x00", b"ustar "):
            prefix = _nts(block[345:500]) if block[257:263] == b"ustar\x00" else ""
            if prefix:
                name = prefix + "/" + name
        path = pax_path or long_name or name

        kind = _NO_CONTENT.get(typeflag, REGULAR if typeflag in (b"0", b"\0", b"7") else OTHER)
        content_len = 0 if typeflag in _NO_CONTENT else size
        end = data_start + content_len
        if end > total:
            raise TarError(
                f"truncated archive: member {path!r} needs {end} bytes, archive has {total}"
            )
        entries.append(
            FileEntry(
                path=path,
                header_span=(member_start, data_start - member_start),
                content_span=(data_start, content_len),
                declared_size=content_len,
                kind=kind,
            )
        )
        pos = data_start + _round_up(content_len)
        member_start = long_name = pax_path = pax_size = None

    if member_start is not None:
        raise TarError(f"truncated archive: extension header at offset {member_start} has no member")
    return TarStream(raw_bytes=data, entries=tuple(entries))


def locate_offset(stream: TarStream, offset: int) -> Tuple[Optional[str], str]:
    """Return ``(path, region)`` for the byte at ``offset``.

    Padding after a member's content is reported with that member's path;
    the end-of-archive trailer has no path.
    """
    if not 0 <= offset < stream.total_len:
        raise IndexError(f"offset {offset} outside archive of {stream.total_len} bytes")
    i = bisect.bisect_right(stream._starts, offset) - 1
    if i < 0:
        return None, TRAILER
    e = stream.entries[i]
    if offset < e.content_span[0]:
        return e.path, HEADER
    if offset < e.content_end:
        return e.path, CONTENT
    if offset < e.end:
        return e.path, PADDING
    return None, TRAILER


def region_counts(stream: TarStream, start: int, stop: int) -> dict:
    """Bytes per path in ``[start, stop)``; trailer bytes are keyed by None."""
    counts: dict = {}
    i = max(bisect.bisect_right(stream._starts, start) - 1, 0)
    while i < len(stream.entries) and stream.entries[i].start < stop:
        e = stream.entries[i]
        n = min(stop, e.end) - max(start, e.start)
        if n > 0:
            counts[e.path] = counts.get(e.path, 0) + n
        i += 1
    tail = min(stop, stream.total_len) - max(start, stream.trailer_start)
    if tail > 0:
        counts[None] = counts.get(None, 0) + tail
    return counts


def permute_files(stream: TarStream, perm: Sequence[int]) -> bytes:
    """Reserialize the archive with members in ``perm`` order.

    Member blocks are moved verbatim, so the identity permutation returns the
    original bytes.
    """
    k = len(stream.entries)
    perm = [int(p) for p in perm]
    if sorted(perm) != list(range(k)):
        raise ValueError(f"not a permutation of {k} entries: {perm}")
    parts = [stream.entry_bytes(i) for i in perm]
    parts.append(stream.raw_bytes[stream.trailer_start:])
    return b"".join(parts)


def coverage(stream: TarStream) -> Iterable[Tuple[str, Span]]:
    """Yield every (region, span) partitioning the archive, in order."""
    for e in stream.entries:
        yield HEADER, e.header_span
        yield CONTENT, e.content_span
        yield PADDING, e.padding_span
    t = stream.trailer_start
    yield TRAILER, (t, stream.total_len - t)
