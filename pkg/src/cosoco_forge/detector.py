"""Streaming multiple-instance scan of image patches with byte attribution."""
from __future__ import annotations

import logging
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from .layout import EncodedImage, TileLayout, merge_ranges, pixels_to_offsets
from .tar import TarStream, region_counts

log = logging.getLogger(__name__)

BENIGN = "benign"
MALEVOLENT = "malevolent"
FULL = "full"
EARLY_EXIT = "early_exit"
REPORT_VERSION = 1


class ScanError(RuntimeError):
    pass


# -- patches ---------------------------------------------------------------

def _grid_shape(h: int, w: int, patch: int) -> Tuple[int, int]:
    if patch < 1:
        raise ValueError("patch size must be positive")
    if patch > w or (patch > h and h == 0):
        raise ValueError(f"patch {patch} larger than image {h}x{w}")
    if w % patch:
        raise ValueError(f"image width {w} not divisible by patch {patch}")
    return -(-h // patch), w // patch


def patch_grid(pixels: np.ndarray, patch: int) -> np.ndarray:
    """Row-major ``(P, patch, patch, C)`` stack; height is zero-padded to a multiple of ``patch``."""
    h, w = pixels.shape[:2]
    rows, cols = _grid_shape(h, w, patch)
    if rows * patch != h:
        pad = [(0, rows * patch - h), (0, 0)] + [(0, 0)] * (pixels.ndim - 2)
        pixels = np.pad(pixels, pad)
    c = pixels.shape[2:]
    g = pixels.reshape((rows, patch, cols, patch) + c).swapaxes(1, 2)
    return g.reshape((rows * cols, patch, patch) + c)


def patchify(image: EncodedImage, patch: int = 256) -> np.ndarray:
    """Patch grid of shape ``(rows, cols, patch, patch, 3)``."""
    rows, cols = _grid_shape(image.height, image.width, patch)
    return patch_grid(image.pixels, patch).reshape(rows, cols, patch, patch, 3)


def iter_patches(pixels: np.ndarray, patch: int) -> Iterator[Tuple[int, int, np.ndarray]]:
    """Lazily yield ``(grid_row, grid_col, patch)`` in row-major order."""
    h, w = pixels.shape[:2]
    rows, cols = _grid_shape(h, w, patch)
    for r in range(rows):
        for c in range(cols):
            block = pixels[r * patch:(r + 1) * patch, c * patch:(c + 1) * patch]
            if block.shape[0] != patch:
                block = np.pad(block, [(0, patch - block.shape[0]), (0, 0), (0, 0)])
            yield r, c, block


def aggregate(patch_labels: Sequence[int]) -> int:
    """Bag label: positive iff any instance is positive."""
    labels = list(patch_labels)
    if not labels:
        raise ValueError("cannot aggregate an empty bag")
    return int(any(int(v) for v in labels))


# -- scanning --------------------------------------------------------------

@dataclass
class PatchScore:
    row: int
    col: int
    probability: float
    label: int


@dataclass
class Verdict:
    image_label: str
    patch_scores: List[PatchScore]
    scan_mode: str
    patches_evaluated: int
    total_patches: int
    threshold: float
    patch: int
    image_shape: Tuple[int, int]

    @property
    def malevolent(self) -> bool:
        return self.image_label == MALEVOLENT

    def flagged(self) -> List[PatchScore]:
        return [s for s in self.patch_scores if s.label]

    def to_json(self, image_id: Optional[str] = None) -> dict:
        return {
            "schema": "cosoco-forge/verdict",
            "version": REPORT_VERSION,
            "image_id": image_id,
            "label": self.image_label,
            "scan_mode": self.scan_mode,
            "threshold": self.threshold,
            "patch": self.patch,
            "image_shape": list(self.image_shape),
            "patches_evaluated": self.patches_evaluated,
            "total_patches": self.total_patches,
            "patch_scores": [
                {"row": s.row, "col": s.col, "probability": round(float(s.probability), 8), "label": s.label}
                for s in self.patch_scores
            ],
            "flagged_rects": [
                [s.row * self.patch, s.col * self.patch, self.patch, self.patch] for s in self.flagged()
            ],
        }


def _to_batch(blocks: List[np.ndarray]) -> np.ndarray:
    return np.stack(blocks).astype(np.float32).transpose(0, 3, 1, 2) / np.float32(255.0)


def _call(scorer, batch: np.ndarray, coords) -> np.ndarray:
    fn = getattr(scorer, "forward", scorer)
    try:
        probs = np.asarray(fn(batch), dtype=np.float64).reshape(-1)
    except Exception as exc:
        raise ScanError(f"scorer failed on patches {coords}: {exc}") from exc
    if probs.shape != (len(coords),):
        raise ScanError(f"scorer returned {probs.shape} scores for patches {coords}")
    if not np.all(np.isfinite(probs)):
        raise ScanError(f"scorer returned non-finite scores for patches {coords}")
    return probs


def _batches(pixels, patch, batch_size):
    coords, blocks = [], []
    for r, c, block in iter_patches(pixels, patch):
        coords.append((r, c))
        blocks.append(block)
        if len(blocks) == batch_size:
            yield coords, blocks
            coords, blocks = [], []
    if blocks:
        yield coords, blocks


def scan(image, scorer, mode: str = FULL, threshold: float = 0.5, patch: int = 256,
         batch_size: int = 16, workers: int = 1) -> Verdict:
    """Score patches in row-major order and apply the OR rule.

    In ``early_exit`` mode scanning stops at the first patch scoring at or
    above ``threshold``; later patches of the same batch are discarded, so the
    reported scores end with that patch. At most ``workers`` batches are in
    flight at once.
    """
    if mode not in (FULL, EARLY_EXIT):
        raise ValueError(f"unknown scan mode {mode!r}")
    pixels = image.pixels if isinstance(image, EncodedImage) else np.asarray(image)
    rows, cols = _grid_shape(pixels.shape[0], pixels.shape[1], patch)
    scores: List[PatchScore] = []
    hit = False

    def consume(coords, probs) -> bool:
        for (r, c), p in zip(coords, probs):
            lab = int(p >= threshold)
            scores.append(PatchScore(r, c, float(p), lab))
            if lab and mode == EARLY_EXIT:
                return True
        return False

    batches = _batches(pixels, patch, max(1, batch_size))
    if workers <= 1:
        for coords, blocks in batches:
            if consume(coords, _call(scorer, _to_batch(blocks), coords)):
                hit = True
                break
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            pending: deque = deque()
            for coords, blocks in batches:
                pending.append((coords, pool.submit(_call, scorer, _to_batch(blocks), coords)))
                if len(pending) >= workers:
                    coords0, fut = pending.popleft()
                    if consume(coords0, fut.result()):
                        hit = True
                        break
            while pending and not hit:
                coords0, fut = pending.popleft()
                hit = consume(coords0, fut.result())
            for _, fut in pending:
                fut.cancel()
    label = MALEVOLENT if any(s.label for s in scores) else BENIGN
    return Verdict(label, scores, mode, len(scores), rows * cols, threshold, patch,
                   (pixels.shape[0], pixels.shape[1]))


# -- attribution -----------------------------------------------------------

@dataclass
class PatchAttribution:
    rect: Tuple[int, int, int, int]
    probability: float
    byte_ranges: List[Tuple[int, int]]
    files: List[Tuple[Optional[str], int]]

    @property
    def n_bytes(self) -> int:
        return sum(n for _, n in self.byte_ranges)

    def to_json(self) -> dict:
        return {
            "rect": list(self.rect),
            "probability": round(float(self.probability), 8),
            "byte_ranges": [list(r) for r in self.byte_ranges],
            "bytes": self.n_bytes,
            "files": [{"path": p, "bytes": n} for p, n in self.files],
        }


@dataclass
class Attribution:
    patches: List[PatchAttribution] = field(default_factory=list)

    def byte_ranges(self) -> List[Tuple[int, int]]:
        return merge_ranges(r for p in self.patches for r in p.byte_ranges)

    def paths(self) -> List[Optional[str]]:
        seen = []
        for p in self.patches:
            for path, _ in p.files:
                if path not in seen:
                    seen.append(path)
        return seen

    def to_json(self) -> dict:
        return {"schema": "cosoco-forge/attribution", "version": REPORT_VERSION,
                "patches": [p.to_json() for p in self.patches]}


def rect_byte_ranges(layout: TileLayout, row: int, col: int, h: int, w: int) -> List[Tuple[int, int]]:
    """Offsets behind a pixel rectangle as merged ranges, clipped to the data."""
    H, W = layout.shape
    r1, c1 = min(row + h, H), min(col + w, W)
    if row >= r1 or col >= c1:
        return []
    rr, cc = np.meshgrid(np.arange(row, r1), np.arange(col, c1), indexing="ij")
    offs = np.sort(pixels_to_offsets(layout, rr.ravel(), cc.ravel()))
    offs = offs[offs < layout.n_bytes]
    if not offs.size:
        return []
    breaks = np.flatnonzero(np.diff(offs) != 1) + 1
    starts = np.concatenate(([0], breaks))
    ends = np.concatenate((breaks, [offs.size]))
    return [(int(offs[s]), int(e - s)) for s, e in zip(starts, ends)]


def explain(verdict: Verdict, layout: TileLayout, stream: TarStream) -> Attribution:
    """Map flagged patches to archive byte ranges and the members they cover."""
    if tuple(verdict.image_shape) != layout.shape:
        raise ValueError(
            f"verdict image {verdict.image_shape} does not match layout {layout.shape}; "
            "attribution needs the full-resolution image"
        )
    if layout.n_bytes != stream.total_len:
        raise ValueError(f"layout covers {layout.n_bytes} bytes, archive has {stream.total_len}")
    out = []
    p = verdict.patch
    for s in verdict.flagged():
        ranges = rect_byte_ranges(layout, s.row * p, s.col * p, p, p)
        counts: dict = {}
        for off, n in ranges:
            for path, k in region_counts(stream, off, off + n).items():
                counts[path] = counts.get(path, 0) + k
        files = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0] is None, kv[0] or ""))
        out.append(PatchAttribution((s.row * p, s.col * p, p, p), s.probability, ranges, files))
    out.sort(key=lambda a: -a.n_bytes)
    return Attribution(out)


# -- evaluation ------------------------------------------------------------

@dataclass
class Prediction:
    id: str
    label: int
    predicted: int
    flagged: int


def evaluate_split(manifest, scorer, split: str, threshold: float = 0.5, patch: int = 256,
                   tile_width: Optional[int] = None, mode: str = FULL) -> List[Prediction]:
    from .layout import encode_image
    from .tar import parse_tar

    records = manifest.split(split)
    if not records:
        raise ValueError(f"split {split!r} has no records")
    missing = [r.id for r in records if r.image_ref not in manifest.store]
    if missing:
        raise FileNotFoundError(f"missing archives for records: {', '.join(missing)}")
    w = tile_width or manifest.params.get("tile_width", patch)
    preds = []
    for r in records:
        image = encode_image(parse_tar(manifest.archive(r)), w)
        v = scan(image, scorer, mode=mode, threshold=threshold, patch=patch)
        preds.append(Prediction(r.id, r.label, int(v.malevolent), len(v.flagged())))
    return preds


class MILDetector(ClassifierMixin, BaseEstimator):
    """Image-level classifier: a bag of patches is malevolent iff any patch is.

    ``scorer`` is any object with ``forward(batch) -> probabilities`` (or a
    plain callable). If it also has ``fit``, :meth:`fit` trains it on patches
    labelled from masks.
    """

    def __init__(self, scorer=None, patch=256, threshold=0.5, mode=FULL, batch_size=16, workers=1):
        self.scorer = scorer
        self.patch = patch
        self.threshold = threshold
        self.mode = mode
        self.batch_size = batch_size
        self.workers = workers

    def fit(self, X, y=None, masks=None):
        if masks is None:
            raise ValueError("fit needs one mask per image to label patches")
        xs, ys = [], []
        for image, mask in zip(X, masks):
            xs.append(patch_grid(image.pixels, self.patch))
            bits = mask.bits if hasattr(mask, "bits") else np.asarray(mask)
            ys.extend(int(b.any()) for b in patch_grid(bits[..., None], self.patch))
        self.scorer.fit(np.concatenate(xs), np.asarray(ys))
        self.classes_ = np.array([0, 1])
        return self

    def scan_all(self, X) -> List[Verdict]:
        return [scan(im, self.scorer, self.mode, self.threshold, self.patch, self.batch_size, self.workers)
                for im in X]

    def predict(self, X) -> np.ndarray:
        return np.array([int(v.malevolent) for v in self.scan_all(X)])

    def predict_proba(self, X) -> np.ndarray:
        """Bag probability as the maximum patch probability (full scan)."""
        p = []
        for im in X:
            v = scan(im, self.scorer, FULL, self.threshold, self.patch, self.batch_size, self.workers)
            p.append(max(s.probability for s in v.patch_scores))
        p = np.asarray(p)
        return np.stack([1 - p, p], axis=1)
