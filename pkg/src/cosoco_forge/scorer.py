"""Estimator wrapper, training loop and checkpoint format for the patch CNN."""
from __future__ import annotations

import csv
import io
import json
import logging
import os
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted
from threadpoolctl import threadpool_limits

from .nn import ConvNet, batch_loss_and_grads
from .optim import AdamState, adam_step, cosine_lr
from .validation import check_patch_batch, check_binary_labels

log = logging.getLogger(__name__)

CKPT_MAGIC = b"CSFCKPT\x00"
CKPT_VERSION = 1


def normalize_patch(patch) -> np.ndarray:
    """uint8 ``(..., h, w, c)`` pixels to float ``(..., c, h, w)`` in [0, 1]."""
    a = np.asarray(patch)
    if a.size and (a.min() < 0 or a.max() > 255):
        raise ValueError("pixel values must lie in [0, 255]")
    out = a.astype(np.float32) / np.float32(255.0)
    if out.ndim >= 3:
        out = np.moveaxis(out, -1, -3)
    return out


@dataclass
class TrainConfig:
    lr_max: float = 1e-4
    lr_min: float = 1e-6
    epochs: int = 20
    batch_size: int = 256
    patch: int = 256
    w_pos: float = 256.0
    w_neg: float = 1.0
    seed: int = 0
    channels: Tuple[int, ...] = (8, 16, 32)
    pooling: str = "avg"
    threshold: float = 0.5
    chunk: int = 16
    calibrate: bool = True

    def __post_init__(self):
        if not self.lr_max > self.lr_min > 0:
            raise ValueError("need lr_max > lr_min > 0")
        if self.w_pos <= 0 or self.w_neg <= 0:
            raise ValueError("loss weights must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")


def _threads() -> Optional[int]:
    v = os.environ.get("COSOCO_FORGE_THREADS")
    return int(v) if v else None


class PatchScorer(ClassifierMixin, BaseEstimator):
    """Per-patch malware probability from a small CNN trained with weighted BCE.

    ``X`` is a stack of uint8 patches ``(n, h, w, 3)``; ``y`` holds one 0/1
    label per patch. ``forward`` accepts already-normalised ``(n, 3, h, w)``
    batches and is what the detector calls.
    """

    def __init__(self, channels=(8, 16, 32), pooling="avg", patch=256, lr_max=1e-4,
                 lr_min=1e-6, epochs=20, batch_size=256, w_pos=256.0, w_neg=1.0,
                 threshold=0.5, chunk=16, seed=0, deterministic=True):
        self.channels = channels
        self.pooling = pooling
        self.patch = patch
        self.lr_max = lr_max
        self.lr_min = lr_min
        self.epochs = epochs
        self.batch_size = batch_size
        self.w_pos = w_pos
        self.w_neg = w_neg
        self.threshold = threshold
        self.chunk = chunk
        self.seed = seed
        self.deterministic = deterministic

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> "PatchScorer":
        return cls(channels=tuple(cfg.channels), pooling=cfg.pooling, patch=cfg.patch,
                   lr_max=cfg.lr_max, lr_min=cfg.lr_min, epochs=cfg.epochs,
                   batch_size=cfg.batch_size, w_pos=cfg.w_pos, w_neg=cfg.w_neg,
                   threshold=cfg.threshold, chunk=cfg.chunk, seed=cfg.seed)

    def _init_net(self):
        self.net_ = ConvNet(self.channels, pooling=self.pooling, seed=self.seed)
        self.classes_ = np.array([0, 1])
        return self.net_

    def fit(self, X, y, callback=None):
        """Train from scratch. ``callback(epoch, scorer, record)`` runs after each epoch."""
        X = check_patch_batch(X, self.patch)
        y = check_binary_labels(y, len(X))
        net = self._init_net()
        state = AdamState()
        rng = np.random.default_rng(self.seed)
        per_epoch = -(-len(X) // self.batch_size)
        total = self.epochs * per_epoch
        self.history_ = []
        step = 0
        with threadpool_limits(limits=1 if self.deterministic else _threads()):
            for epoch in range(1, self.epochs + 1):
                order = rng.permutation(len(X))
                running = 0.0
                for s in range(0, len(X), self.batch_size):
                    idx = np.sort(order[s:s + self.batch_size])
                    xb = normalize_patch(X[idx])
                    lr = cosine_lr(step, total, self.lr_max, self.lr_min)
                    loss, grads = batch_loss_and_grads(net, xb, y[idx], self.w_pos, self.w_neg, self.chunk)
                    adam_step(net.params, grads, state, lr)
                    running += loss * len(idx)
                    step += 1
                record = {"epoch": epoch, "lr": lr, "train_loss": running / len(X)}
                if callback is not None:
                    record.update(callback(epoch, self, record) or {})
                self.history_.append(record)
                log.info("epoch %d loss %.4f", epoch, record["train_loss"])
        return self

    def forward(self, batch) -> np.ndarray:
        check_is_fitted(self, "net_")
        return self.net_.forward(batch)

    __call__ = forward

    def predict_proba(self, X) -> np.ndarray:
        X = check_patch_batch(X, self.patch)
        p = np.concatenate([self.forward(normalize_patch(X[s:s + 64])) for s in range(0, len(X), 64)]) \
            if len(X) else np.zeros(0)
        return np.stack([1 - p, p], axis=1)

    def decision_function(self, X) -> np.ndarray:
        X = check_patch_batch(X, self.patch)
        return np.concatenate([self.net_.logits(normalize_patch(X[s:s + 64])) for s in range(0, len(X), 64)])

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X)[:, 1] >= self.threshold).astype(int)

    # -- persistence --------------------------------------------------------

    def save(self, path) -> Path:
        check_is_fitted(self, "net_")
        return save_checkpoint(path, self.net_, {"estimator": self.get_params()})

    @classmethod
    def load(cls, path) -> "PatchScorer":
        net, header = load_checkpoint(path)
        params = dict(header.get("config", {}).get("estimator", {}))
        params["channels"] = tuple(params.get("channels", net.channels))
        scorer = cls(**params)
        scorer.net_ = net
        scorer.classes_ = np.array([0, 1])
        return scorer


def save_checkpoint(path, net: ConvNet, config: dict) -> Path:
    """Magic, u32 version, u32 header length, JSON header, float32 LE tensors."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = []
    blobs = []
    offset = 0
    for name, p in net.params.items():
        data = np.ascontiguousarray(p, dtype="<f4").tobytes()
        tensors.append({"name": name, "shape": list(p.shape), "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    cfg = json.loads(json.dumps(config, default=list))
    header = {"arch": net.arch, "model": net.config(), "config": cfg,
              "seed": cfg.get("estimator", {}).get("seed"), "tensors": tensors, "dtype": "float32-le"}
    hb = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(hb)) + hb)
        for b in blobs:
            fh.write(b)
    return path


def load_checkpoint(path) -> Tuple[ConvNet, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise ValueError(f"{path} is not a checkpoint")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    header = json.loads(raw[16:16 + hlen])
    if header.get("arch") != ConvNet.arch:
        raise ValueError(f"unknown architecture {header.get('arch')!r}")
    m = header["model"]
    net = ConvNet(m["channels"], m["in_channels"], m["pooling"])
    base = 16 + hlen
    for t in header["tensors"]:
        a = np.frombuffer(raw, "<f4", int(np.prod(t["shape"], dtype=np.int64)), base + t["offset"])
        if t["name"] not in net.params:
            raise ValueError(f"unexpected tensor {t['name']!r}")
        net.params[t["name"]] = a.reshape(t["shape"]).astype(np.float32)
    return net, header


def history_csv(history: Sequence[dict]) -> str:
    cols = ["epoch", "lr", "train_loss", "threshold", "val_precision", "val_recall", "val_f1"]
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=cols, extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for rec in history:
        w.writerow({k: rec.get(k, "") for k in cols})
    return buf.getvalue()


def patches_from_manifest(manifest, split: str, cfg: TrainConfig, tile_width: Optional[int] = None):
    """Stack ``(patches, labels)`` for a split; a patch is positive iff any mask pixel is set."""
    from .detector import patch_grid
    from .layout import build_mask, encode_image
    from .tar import parse_tar

    w = tile_width or manifest.params.get("tile_width", cfg.patch)
    records = manifest.split(split)
    if not records:
        raise ValueError(f"split {split!r} is empty")
    xs: List[np.ndarray] = []
    ys: List[int] = []
    for r in records:
        image = encode_image(parse_tar(manifest.archive(r)), w)
        mask = build_mask(image.layout, r.affected_ranges)
        pix, bits = patch_grid(image.pixels, cfg.patch), patch_grid(mask.bits[..., None], cfg.patch)
        xs.append(pix)
        ys.extend(int(b.any()) for b in bits)
    return np.concatenate(xs), np.asarray(ys, dtype=np.int64)


def image_scores(manifest, scorer, split: str, patch: int, tile_width: Optional[int] = None):
    """``(ids, labels, max patch probability)`` per record of a split, ordered by id."""
    from .detector import scan
    from .layout import encode_image
    from .tar import parse_tar

    w = tile_width or manifest.params.get("tile_width", patch)
    ids, labels, scores = [], [], []
    for r in manifest.split(split):
        image = encode_image(parse_tar(manifest.archive(r)), w)
        v = scan(image, scorer, threshold=np.inf, patch=patch)
        ids.append(r.id)
        labels.append(r.label)
        scores.append(max(p.probability for p in v.patch_scores))
    return ids, np.asarray(labels), np.asarray(scores)


def _logit(p):
    p = np.clip(p, 1e-12, 1 - 1e-12)
    return np.log(p) - np.log1p(-p)


def calibrate_threshold(labels, scores) -> Tuple[float, float]:
    """Threshold maximising image-level F1, placed midway (in logit space) inside the best gap.

    Returns ``(threshold, f1)``.
    """
    from .metrics import confusion, metrics

    s = np.unique(scores)
    best = (-1.0, 0.5)
    for k, cut in enumerate(s):  # predict positive iff score >= cut
        f1 = metrics(confusion((scores >= cut).astype(int), labels))["f1"]
        if f1 > best[0]:
            if k == 0:
                t = float(cut) / 2
            else:
                z = 0.5 * (_logit(s[k - 1]) + _logit(cut))
                t = float(1 / (1 + np.exp(-z)))
            best = (f1, t)
    return best[1], best[0]


def train(manifest, config: Optional[TrainConfig] = None, tile_width: Optional[int] = None):
    """Fit on the train split, score image-level F1 on val each epoch, keep the best epoch.

    With ``config.calibrate`` the decision threshold is re-fitted on val after
    every epoch and stored with the model. Returns ``(scorer, history)``.
    """
    from .metrics import confusion, metrics

    cfg = config or TrainConfig()
    X, y = patches_from_manifest(manifest, "train", cfg, tile_width)
    if not manifest.split("val"):
        raise ValueError("split 'val' is empty")
    best = {"f1": -1.0, "params": None, "epoch": 0, "threshold": cfg.threshold}

    def on_epoch(epoch, scorer, record):
        _, labels, scores = image_scores(manifest, scorer, "val", cfg.patch, tile_width)
        t = calibrate_threshold(labels, scores)[0] if cfg.calibrate else cfg.threshold
        m = metrics(confusion((scores >= t).astype(int), labels))
        if m["f1"] >= best["f1"]:
            best.update(f1=m["f1"], epoch=epoch, threshold=t,
                        params={k: v.copy() for k, v in scorer.net_.params.items()})
        return {"threshold": t, "val_precision": m["precision"], "val_recall": m["recall"], "val_f1": m["f1"]}

    scorer = PatchScorer.from_config(cfg)
    scorer.fit(X, y, callback=on_epoch)
    scorer.net_.params.update(best["params"])
    scorer.best_epoch_ = best["epoch"]
    scorer.threshold = float(best["threshold"])
    return scorer, scorer.history_
