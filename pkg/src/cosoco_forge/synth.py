"""Synthetic benign/compromised archive pairs and labelled dataset manifests."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import tarfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .diff import diff_tarballs
from .layout import merge_ranges
from .tar import BLOCK, REGULAR, TarStream, parse_tar

MB = 1024 * 1024
KB = 1024
MTIME = 1_700_000_000
MANIFEST_SCHEMA = "cosoco-forge/manifest"
MANIFEST_VERSION = 1
BENIGN = "benign"
SPLITS = ("train", "val", "test")
SPLIT_RATIO = (0.7, 0.1, 0.2)

# Average bytes affected per malware family and family frequencies (record counts).
FAMILY_BYTES = {
    "Mirai": 58 * KB,
    "Gafgyt": 132 * KB,
    "CoinMiner": 451 * KB,
    "XorDDos": 18 * KB,
    "Kaiji": int(4.7 * MB),
    "Tsunami": 1024,
    "GoBrut": 512,
    "BPFDoor": 20 * KB,
    "RotaJakiro": 134 * KB,
    "Unknown": 678 * KB,
}
FAMILY_COUNTS = {
    "Mirai": 494, "Gafgyt": 284, "CoinMiner": 72, "XorDDos": 50, "Kaiji": 53,
    "Tsunami": 43, "GoBrut": 34, "BPFDoor": 16, "RotaJakiro": 14, "Unknown": 79,
}

_WORDS = (
    "the config server user path true false error warning info debug value set "
    "enable disable port host name version package install service start stop "
    "export include return function local data file read write open close "
    "=/usr/lib /etc/default # -- {} [] ; : 0 1 2 3 4 5 6 7 8 9"
).split()
_MAGICS = (b"\x7fELF\x02\x01\x01\x00", b"\x89PNG\r\n\x1a\n", b"PK\x03\x04", b"\xca\xfe\xba\xbe", b"SQLite format 3\x00")
# Low-entropy body alphabet. It has no 0xFF, so long 0xFF runs only come from payloads.
_OPCODES = np.array([0x00, 0x01, 0x02, 0x04, 0x08, 0x0F, 0x1F, 0x40, 0x44, 0x48, 0x4C,
                     0x83, 0x89, 0x8B, 0x90, 0xC3], dtype=np.uint8)
_DIRS = ("usr/bin", "usr/lib", "usr/share/doc", "etc", "var/lib", "opt/app")


class SynthError(ValueError):
    pass


@dataclass
class BenignParams:
    n_files: int = 12
    min_size: int = 256
    max_size: int = 64 * KB
    mix: Tuple[float, float, float] = (0.4, 0.4, 0.2)  # ascii, binary, high-entropy
    total_size: Optional[int] = None  # rescale file sizes to roughly this many bytes
    max_total: int = 200 * MB


@dataclass
class PayloadSpec:
    mode: str = "add_file"  # add_file | modify_bytes | mixed
    size: int = 512
    family: str = "Unknown"


@dataclass
class DatasetParams:
    n_records: int = 100
    compromised_fraction: float = 0.34
    family_mix: Optional[Dict[str, float]] = None
    target_mask_ratio: float = 0.0032
    tile_width: int = 256
    tiles: Tuple[int, int] = (3, 6)
    files: Tuple[int, int] = (6, 16)
    content_mix: Tuple[float, float, float] = (0.4, 0.4, 0.2)


# -- archive writing -------------------------------------------------------

def _header(path: str, size: int, kind: str = REGULAR) -> bytes:
    info = tarfile.TarInfo(path)
    info.size = size if kind == REGULAR else 0
    info.mtime = MTIME
    info.mode = 0o755 if kind != REGULAR else 0o644
    info.uname = info.gname = "root"
    info.type = tarfile.DIRTYPE if kind != REGULAR else tarfile.REGTYPE
    return info.tobuf(format=tarfile.GNU_FORMAT, encoding="utf-8", errors="surrogateescape")


def _member(path: str, content: bytes = b"", kind: str = REGULAR) -> bytes:
    pad = -len(content) % BLOCK
    return _header(path, len(content), kind) + content + bytes(pad)


def write_tar(members: Sequence[Tuple[str, Optional[bytes]]]) -> bytes:
    """Build an archive; ``None`` content marks a directory."""
    parts = [_member(p, b"", "directory") if c is None else _member(p, c) for p, c in members]
    parts.append(bytes(2 * BLOCK))
    return b"".join(parts)


# -- content generators ----------------------------------------------------

def _ascii(rng: np.random.Generator, n: int) -> bytes:
    out = bytearray()
    while len(out) < n:
        k = int(rng.integers(3, 12))
        words = rng.choice(len(_WORDS), size=k)
        out += (" ".join(_WORDS[i] for i in words) + "\n").encode()
    return bytes(out[:n])


def _binary(rng: np.random.Generator, n: int) -> bytes:
    magic = _MAGICS[int(rng.integers(len(_MAGICS)))]
    body = np.empty(max(n - len(magic), 0), dtype=np.uint8)
    pos = 0
    while pos < body.size:
        run = int(rng.integers(8, 256))
        kind = rng.random()
        if kind < 0.35:
            body[pos:pos + run] = 0
        elif kind < 0.8:
            body[pos:pos + run] = rng.choice(_OPCODES, size=min(run, body.size - pos))
        else:
            # little-endian table of small integers
            vals = rng.integers(0, 64, size=min(run, body.size - pos), dtype=np.uint8)
            vals[1::4] = 0
            vals[2::4] = 0
            vals[3::4] = 0
            body[pos:pos + run] = vals
        pos += run
    return (magic + body.tobytes())[:n]


def _entropy(rng: np.random.Generator, n: int) -> bytes:
    return rng.integers(0, 256, size=n, dtype=np.uint8).tobytes()


_GENERATORS = (_ascii, _binary, _entropy)


def make_payload(rng: np.random.Generator, n: int) -> bytes:
    """ELF-like stub: magic, then 0xFF fill broken by short bright filler runs."""
    body = np.full(n, 0xFF, dtype=np.uint8)
    pos = int(rng.integers(32, 128))
    while pos < n:
        run = int(rng.integers(4, 16))
        body[pos:pos + run] = rng.integers(0xF0, 0xFF)
        pos += run + int(rng.integers(64, 192))
    head = b"\x7fELF"[:n]
    return head + body[len(head):].tobytes()


def synth_benign(seed: int, params: Optional[BenignParams] = None) -> bytes:
    """Deterministic benign archive of text, structured-binary and random files."""
    p = params or BenignParams()
    if p.n_files < 0 or p.min_size <= 0 or p.max_size < p.min_size:
        raise SynthError(f"invalid benign parameters: {p}")
    mix = np.asarray(p.mix, dtype=float)
    if mix.shape != (3,) or mix.min() < 0 or mix.sum() <= 0:
        raise SynthError(f"invalid content mix {p.mix}")
    rng = np.random.default_rng(seed)
    sizes = np.exp(rng.uniform(np.log(p.min_size), np.log(p.max_size), size=p.n_files))
    if p.total_size is not None and p.n_files:
        sizes *= p.total_size / sizes.sum()
    sizes = np.maximum(sizes.round().astype(np.int64), 1)
    if int(sizes.sum()) > p.max_total:
        raise SynthError(f"requested {int(sizes.sum())} bytes exceeds cap {p.max_total}")
    kinds = rng.choice(3, size=p.n_files, p=mix / mix.sum())
    dirs = rng.choice(len(_DIRS), size=p.n_files)
    members: List[Tuple[str, Optional[bytes]]] = []
    seen = set()
    for i in range(p.n_files):
        d = _DIRS[dirs[i]]
        parts = d.split("/")
        for j in range(1, len(parts) + 1):
            sub = "/".join(parts[:j]) + "/"
            if sub not in seen:
                seen.add(sub)
                members.append((sub, None))
        ext = (".conf", ".so", ".bin")[kinds[i]]
        members.append((f"{d}/f{i:04d}{ext}", _GENERATORS[kinds[i]](rng, int(sizes[i]))))
    return write_tar(members)


# -- injection -------------------------------------------------------------

def _modify(stream: TarStream, rng, size: int) -> Tuple[bytes, str, int]:
    eligible = [i for i, e in enumerate(stream.entries) if e.kind == REGULAR and e.declared_size >= size]
    if not eligible:
        largest = max((e.declared_size for e in stream.entries if e.kind == REGULAR), default=0)
        raise SynthError(f"payload of {size} bytes larger than any target file (largest {largest})")
    idx = eligible[int(rng.integers(len(eligible)))]
    e = stream.entries[idx]
    start = int(rng.integers(0, e.declared_size - size + 1))
    at = e.content_span[0] + start
    orig = np.frombuffer(stream.raw_bytes, np.uint8, size, at)
    new = np.frombuffer(make_payload(rng, size), np.uint8).copy()
    same = new == orig
    new[same] ^= 0x01
    data = stream.raw_bytes[:at] + new.tobytes() + stream.raw_bytes[at + size:]
    return data, e.path, start


def _add(stream: TarStream, rng, size: int, family: str) -> Tuple[bytes, str]:
    existing = set(stream.paths())
    while True:
        path = f"tmp/.{family.lower()}-{int(rng.integers(1 << 32)):08x}"
        if path not in existing:
            break
    pos = int(rng.integers(0, len(stream.entries) + 1))
    blocks = [stream.entry_bytes(i) for i in range(len(stream.entries))]
    blocks.insert(pos, _member(path, make_payload(rng, size)))
    blocks.append(stream.raw_bytes[stream.trailer_start:])
    return b"".join(blocks), path


def inject_payload(benign: bytes, spec: PayloadSpec, seed: int) -> Tuple[bytes, List[Tuple[int, int]]]:
    """Return the compromised archive and the exact byte ranges that changed.

    The ranges are checked against :func:`diff_tarballs` before returning.
    """
    if spec.size < 1:
        raise SynthError("payload size must be positive")
    rng = np.random.default_rng(seed)
    stream = parse_tar(benign)
    modified: Optional[Tuple[str, int, int]] = None
    added: Optional[str] = None
    if spec.mode == "add_file":
        data, added = _add(stream, rng, spec.size, spec.family)
    elif spec.mode == "modify_bytes":
        data, path, start = _modify(stream, rng, spec.size)
        modified = (path, start, spec.size)
    elif spec.mode == "mixed":
        if spec.size < 2:
            raise SynthError("mixed mode needs at least 2 payload bytes")
        n_add = spec.size // 2
        data, path, start = _modify(stream, rng, spec.size - n_add)
        modified = (path, start, spec.size - n_add)
        data, added = _add(parse_tar(data), rng, n_add, spec.family)
    else:
        raise SynthError(f"unknown injection mode {spec.mode!r}")

    out = parse_tar(data)
    ranges = []
    for e in out.entries:
        if e.path == added:
            ranges.append((e.start, e.content_end - e.start))
        elif modified and e.path == modified[0]:
            ranges.append((e.content_span[0] + modified[1], modified[2]))
    ranges = merge_ranges(ranges)
    recovered = diff_tarballs(stream, out).affected_ranges()
    if recovered != ranges:
        raise AssertionError(f"injected ranges {ranges} disagree with diff {recovered}")
    return data, ranges


# -- storage and manifests -------------------------------------------------

class ArchiveStore:
    """Content-addressed archive storage, on disk or in memory."""

    def __init__(self, root=None):
        self.root = Path(root) if root is not None else None
        self._mem: Dict[str, bytes] = {}

    def path(self, digest: str) -> Path:
        return self.root / "archives" / f"{digest}.tar"

    def put(self, data: bytes) -> str:
        digest = hashlib.sha256(data).hexdigest()
        if self.root is None:
            self._mem[digest] = data
        else:
            p = self.path(digest)
            if not p.exists():
                p.parent.mkdir(parents=True, exist_ok=True)
                p.write_bytes(data)
        return digest

    def get(self, digest: str) -> bytes:
        if self.root is None:
            return self._mem[digest]
        return self.path(digest).read_bytes()

    def __contains__(self, digest: str) -> bool:
        if self.root is None:
            return digest in self._mem
        return self.path(digest).exists()


@dataclass
class ManifestRecord:
    id: str
    benign: str
    compromised: Optional[str]
    family: str
    affected_ranges: List[Tuple[int, int]]
    split: str
    mode: Optional[str] = None

    @property
    def label(self) -> int:
        return int(self.compromised is not None)

    @property
    def image_ref(self) -> str:
        return self.compromised or self.benign

    def to_json(self) -> dict:
        d = asdict(self)
        d["affected_ranges"] = [list(r) for r in self.affected_ranges]
        d["label"] = self.label
        return d


@dataclass
class DatasetManifest:
    records: List[ManifestRecord]
    seed: int
    params: dict
    store: ArchiveStore = field(default_factory=ArchiveStore, repr=False, compare=False)

    def split(self, tag: str) -> List[ManifestRecord]:
        return sorted((r for r in self.records if r.split == tag), key=lambda r: r.id)

    def archive(self, record: ManifestRecord) -> bytes:
        return self.store.get(record.image_ref)

    def to_jsonl(self) -> str:
        head = {"schema": MANIFEST_SCHEMA, "version": MANIFEST_VERSION, "seed": self.seed, "params": self.params}
        lines = [json.dumps(head, sort_keys=True)]
        lines += [json.dumps(r.to_json(), sort_keys=True) for r in self.records]
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.to_jsonl().encode()).hexdigest()

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_jsonl())
        return path

    @classmethod
    def load(cls, path, store_root=None) -> "DatasetManifest":
        path = Path(path)
        lines = path.read_text().splitlines()
        head = json.loads(lines[0])
        if head.get("schema") != MANIFEST_SCHEMA:
            raise ValueError(f"{path} is not a manifest")
        if head.get("version") != MANIFEST_VERSION:
            raise ValueError(f"unsupported manifest version {head.get('version')}")
        records = []
        for line in lines[1:]:
            if not line.strip():
                continue
            d = json.loads(line)
            d.pop("label", None)
            d["affected_ranges"] = [tuple(r) for r in d["affected_ranges"]]
            records.append(ManifestRecord(**d))
        store = ArchiveStore(store_root if store_root is not None else path.parent)
        return cls(records, head["seed"], head["params"], store)


def _allocate(total: int, weights: Sequence[float], minimum: int = 0) -> List[int]:
    """Largest-remainder apportionment of ``total`` with a per-bucket floor."""
    w = np.asarray(weights, dtype=float)
    w = w / w.sum()
    counts = np.maximum(np.floor(w * total).astype(int), minimum)
    while counts.sum() > total:
        i = int(np.argmax(counts - w * total))
        counts[i] -= 1
    rem = w * total - counts
    for i in np.argsort(-rem, kind="stable")[: total - counts.sum()]:
        counts[i] += 1
    return counts.tolist()


def stratified_splits(strata: Dict[str, List[str]], rng: np.random.Generator) -> Dict[str, str]:
    out = {}
    for name in sorted(strata):
        ids = list(strata[name])
        if len(ids) < len(SPLITS):
            raise SynthError(f"stratum {name!r} has {len(ids)} records; need one per split")
        counts = _allocate(len(ids), SPLIT_RATIO, minimum=1)
        order = rng.permutation(len(ids))
        pos = 0
        for tag, c in zip(SPLITS, counts):
            for j in order[pos:pos + c]:
                out[ids[j]] = tag
            pos += c
    return out


def _family_factors(families: Sequence[str]) -> Dict[str, float]:
    # Presets span four orders of magnitude; a fourth root keeps them near the ratio target.
    logs = {f: np.log(FAMILY_BYTES.get(f, FAMILY_BYTES["Unknown"])) for f in families}
    gm = np.mean([logs[f] for f in families]) if families else 0.0
    raw = {f: float(np.exp((logs[f] - gm) / 4)) for f in set(families)}
    mean = np.mean([raw[f] for f in families]) if families else 1.0
    return {f: v / mean for f, v in raw.items()}


def _plan_payload(rng, stream: TarStream, ratio: float, w2: int) -> PayloadSpec:
    cap = lambda n: -(-n // w2) * w2  # noqa: E731
    n = stream.total_len
    budget = max(int(round(ratio * cap(n))), 1)
    largest = max((e.declared_size for e in stream.entries if e.kind == REGULAR), default=0)
    if budget >= 1024:
        mode = str(rng.choice(["add_file", "modify_bytes", "mixed"], p=[0.3, 0.4, 0.3]))
    else:
        mode = "modify_bytes"
    if mode == "modify_bytes" and budget > largest:
        mode = "add_file"
    if mode == "modify_bytes":
        return PayloadSpec(mode, budget)
    content = budget - BLOCK
    for _ in range(3):
        grown = n + BLOCK + -(-max(content, 1) // BLOCK) * BLOCK
        content = int(round(ratio * cap(grown))) - BLOCK
    content = max(content, 2)
    if mode == "mixed" and content - content // 2 > largest:
        mode = "add_file"
    return PayloadSpec(mode, content)


def build_dataset(params: Optional[DatasetParams] = None, seed: int = 0,
                  store: Optional[ArchiveStore] = None) -> DatasetManifest:
    """Generate a stratified benign/compromised manifest as a pure function of ``(params, seed)``."""
    p = params or DatasetParams()
    if not 0 < p.compromised_fraction < 1:
        raise SynthError("compromised_fraction must be in (0, 1)")
    if not 0 < p.target_mask_ratio < 1:
        raise SynthError("target_mask_ratio must be in (0, 1)")
    mix = dict(p.family_mix or {k: v / sum(FAMILY_COUNTS.values()) for k, v in FAMILY_COUNTS.items()})
    if abs(sum(mix.values()) - 1.0) > 1e-6 or min(mix.values()) <= 0:
        raise SynthError(f"family mix must be positive and sum to 1, got {mix}")
    store = store if store is not None else ArchiveStore()
    master = np.random.default_rng(seed)

    n_comp = int(round(p.n_records * p.compromised_fraction))
    fams = sorted(mix)
    fam_counts = _allocate(n_comp, [mix[f] for f in fams])
    if n_comp < len(SPLITS) or p.n_records - n_comp < len(SPLITS):
        raise SynthError(f"need at least {len(SPLITS)} benign and compromised records to stratify")
    # families too small to split three ways share one stratum; if even that
    # is short it joins the largest family
    stratum = {f: f for f, c in zip(fams, fam_counts) if c >= len(SPLITS)}
    rare = [f for f, c in zip(fams, fam_counts) if 0 < c < len(SPLITS)]
    if rare:
        n_rare = sum(c for f, c in zip(fams, fam_counts) if f in rare)
        big = max(zip(fam_counts, fams))[1]
        for f in rare:
            stratum[f] = "rare" if n_rare >= len(SPLITS) else big
    stratum[BENIGN] = BENIGN
    labels = [f for f, c in zip(fams, fam_counts) for _ in range(c)] + [BENIGN] * (p.n_records - n_comp)
    labels = [labels[i] for i in master.permutation(len(labels))]
    factors = _family_factors([f for f in labels if f != BENIGN])
    w2 = p.tile_width * p.tile_width

    records = []
    strata: Dict[str, List[str]] = {}
    for i, family in enumerate(labels):
        rid = f"rec-{i:05d}"
        rng = np.random.default_rng([seed, i])
        tiles = int(rng.integers(p.tiles[0], p.tiles[1] + 1))
        bp = BenignParams(
            n_files=int(rng.integers(p.files[0], p.files[1] + 1)),
            min_size=512, max_size=64 * KB, mix=p.content_mix,
            total_size=int(tiles * w2 * rng.uniform(0.55, 0.85)),
        )
        benign = synth_benign(int(rng.integers(1 << 63)), bp)
        benign_ref = store.put(benign)
        comp_ref, ranges, mode = None, [], None
        if family != BENIGN:
            spec = _plan_payload(rng, parse_tar(benign), p.target_mask_ratio * factors[family], w2)
            spec.family = family
            comp, ranges = inject_payload(benign, spec, int(rng.integers(1 << 63)))
            comp_ref = store.put(comp)
            mode = spec.mode
        strata.setdefault(stratum[family], []).append(rid)
        records.append(ManifestRecord(rid, benign_ref, comp_ref, family, ranges, "", mode))

    tags = stratified_splits(strata, master)
    for r in records:
        r.split = tags[r.id]
    params_json = json.loads(json.dumps(asdict(p)))
    params_json["family_mix"] = mix
    return DatasetManifest(records, seed, params_json, store)


def mask_ratio(record: ManifestRecord, n_bytes: int, tile_width: int) -> float:
    w2 = tile_width * tile_width
    cap = max(1, -(-n_bytes // w2)) * w2
    return sum(n for _, n in record.affected_ranges) / cap


def read_split_file(path) -> List[Tuple[str, str, str]]:
    """Read published ``(id, label, split)`` rows from CSV/TSV or JSON lines."""
    text = Path(path).read_text()
    rows: List[Tuple[str, str, str]] = []
    stripped = text.lstrip()
    if stripped.startswith("{"):
        for line in text.splitlines():
            if line.strip():
                d = json.loads(line)
                rows.append((str(d["id"]), str(d["label"]), str(d["split"])))
        return rows
    dialect = csv.Sniffer().sniff(text.splitlines()[0], delimiters=",\t;")
    reader = csv.DictReader(io.StringIO(text), dialect=dialect)
    norm = {k.strip().lower(): k for k in reader.fieldnames or []}
    try:
        kid, klab, ksp = (norm[k] for k in ("id", "label", "split"))
    except KeyError:
        raise ValueError(f"split file needs id,label,split columns, got {reader.fieldnames}") from None
    for d in reader:
        rows.append((d[kid].strip(), d[klab].strip(), d[ksp].strip().lower()))
    return rows


def iter_split(manifest: DatasetManifest, tag: str) -> Iterator[ManifestRecord]:
    if tag not in SPLITS:
        raise ValueError(f"unknown split {tag!r}")
    yield from manifest.split(tag)
