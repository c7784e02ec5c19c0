"""On-disk formats for encoded images and masks."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Tuple, Union

import numpy as np
from PIL import Image

from .layout import EncodedImage, Mask, TileLayout, HILBERT_ORIENTATION

FORMAT_VERSION = 1
PathLike = Union[str, Path]


def _sidecar(image: EncodedImage, fmt: str) -> dict:
    meta = image.metadata()
    meta.update({"schema": "cosoco-forge/image", "version": FORMAT_VERSION, "format": fmt})
    if fmt == "raw":
        meta["layout"] = "planar-chw-uint8"
    return meta


def save_image(image: EncodedImage, stem: PathLike, fmt: str = "png") -> Tuple[Path, Path]:
    """Write ``<stem>.png`` or ``<stem>.raw`` plus ``<stem>.json``."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "png":
        data_path = stem.with_suffix(".png")
        Image.fromarray(image.pixels).save(data_path, optimize=False)
    elif fmt == "raw":
        data_path = stem.with_suffix(".raw")
        data_path.write_bytes(np.ascontiguousarray(image.pixels.transpose(2, 0, 1)).tobytes())
    else:
        raise ValueError(f"unknown image format {fmt!r}")
    meta_path = stem.with_suffix(".json")
    meta_path.write_text(json.dumps(_sidecar(image, fmt), indent=2, sort_keys=True) + "\n")
    return data_path, meta_path


def load_image(path: PathLike) -> EncodedImage:
    """Load from the data file or the sidecar path; the sidecar must exist."""
    path = Path(path)
    meta_path = path.with_suffix(".json")
    meta = json.loads(meta_path.read_text())
    if meta.get("orientation") != HILBERT_ORIENTATION:
        raise ValueError(f"unsupported curve orientation {meta.get('orientation')!r}")
    h, w = meta["height"], meta["width"]
    if meta["format"] == "png":
        pixels = np.asarray(Image.open(path.with_suffix(".png")).convert("RGB"))
    else:
        raw = np.frombuffer(path.with_suffix(".raw").read_bytes(), dtype=np.uint8)
        pixels = raw.reshape(3, h, w).transpose(1, 2, 0)
    if pixels.shape != (h, w, 3):
        raise ValueError(f"image data {pixels.shape} disagrees with sidecar {h}x{w}")
    layout = TileLayout(meta["tile_width"], meta["n_bytes"])
    return EncodedImage(np.ascontiguousarray(pixels), layout, meta.get("source_sha256", ""))


def save_mask(mask: Mask, stem: PathLike) -> Tuple[Path, Path]:
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    png = stem.with_suffix(".mask.png")
    Image.fromarray((mask.bits > 0).astype(np.uint8) * 255).convert("1").save(png)
    meta = {
        "schema": "cosoco-forge/mask",
        "version": FORMAT_VERSION,
        "height": mask.height,
        "width": mask.width,
        "tile_width": mask.layout.tile_width,
        "n_bytes": mask.layout.n_bytes,
        "affected_ranges": [list(r) for r in mask.ranges],
        "affected_bytes": int(sum(n for _, n in mask.ranges)),
    }
    js = stem.with_suffix(".mask.json")
    js.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return png, js


def load_mask(png: PathLike) -> Mask:
    png = Path(png)
    meta = json.loads(Path(str(png)[: -len(".png")] + ".json").read_text())
    bits = (np.asarray(Image.open(png).convert("L")) > 0).astype(np.uint8)
    layout = TileLayout(meta["tile_width"], meta["n_bytes"])
    return Mask(bits, layout, tuple(tuple(r) for r in meta["affected_ranges"]))


def annotate(image: EncodedImage, rects, colour=(255, 0, 0)) -> np.ndarray:
    """Value channel as greyscale RGB with ``(row, col, h, w)`` boxes drawn."""
    v = image.value
    out = np.stack([v, v, v], axis=-1).copy()
    for r, c, h, w in rects:
        r2 = min(r + h, out.shape[0]) - 1
        c2 = min(c + w, out.shape[1]) - 1
        out[r, c:c2 + 1] = colour
        out[r2, c:c2 + 1] = colour
        out[r:r2 + 1, c] = colour
        out[r:r2 + 1, c2] = colour
    return out
