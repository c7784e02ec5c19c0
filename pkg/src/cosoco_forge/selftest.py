"""Embedded invariant checks run by ``cosoco-forge selftest``."""
from __future__ import annotations

import math
import time
from typing import Callable, List, Tuple

import numpy as np


def check_hilbert(max_order: int = 8) -> str:
    from .layout import hilbert_d2xy, hilbert_inverse_table, hilbert_table, hilbert_xy2d

    for order in range(1, max_order + 1):
        xs, ys = hilbert_table(order)
        n = 1 << order
        if not np.array_equal(hilbert_inverse_table(order)[ys, xs], np.arange(n * n)):
            raise AssertionError(f"xy2d(d2xy(d)) != d at order {order}")
        step = np.abs(np.diff(xs.astype(int))) + np.abs(np.diff(ys.astype(int)))
        if step.size and not (step == 1).all():
            raise AssertionError(f"non-adjacent consecutive cells at order {order}")
    # the scalar routines must agree with the tables
    for d in (0, 17, 63):
        if hilbert_xy2d(3, *hilbert_d2xy(3, d)) != d:
            raise AssertionError("scalar round trip failed")
    return f"orders 1..{max_order}"


def check_round_trip(n: int = 5) -> str:
    from .layout import decode_bytes, encode_image
    from .synth import BenignParams, synth_benign
    from .tar import parse_tar

    for seed in range(n):
        data = synth_benign(seed, BenignParams(n_files=6, max_size=20000))
        if decode_bytes(encode_image(parse_tar(data), 64)) != data:
            raise AssertionError(f"byte round trip failed for seed {seed}")
    return f"{n} archives"


def check_mask(n: int = 5) -> str:
    from .diff import diff_tarballs
    from .layout import TileLayout, build_mask, pixels_to_offsets
    from .synth import BenignParams, PayloadSpec, inject_payload, synth_benign
    from .tar import parse_tar

    for seed in range(n):
        benign = synth_benign(seed, BenignParams(n_files=6, max_size=20000))
        mode = ("add_file", "modify_bytes", "mixed")[seed % 3]
        comp, ranges = inject_payload(benign, PayloadSpec(mode, 700, "Mirai"), seed)
        rec = diff_tarballs(parse_tar(benign), parse_tar(comp)).affected_ranges()
        if rec != ranges:
            raise AssertionError(f"diff disagrees with injected ranges for seed {seed}")
        mask = build_mask(TileLayout(64, len(comp)), ranges)
        rows, cols = np.nonzero(mask.bits)
        offs = pixels_to_offsets(mask.layout, rows, cols)
        inside = np.zeros(offs.shape, bool)
        for o, k in ranges:
            inside |= (offs >= o) & (offs < o + k)
        if offs.size != sum(k for _, k in ranges) or not inside.all():
            raise AssertionError(f"mask does not match affected bytes for seed {seed}")
    return f"{n} injected pairs"


def check_gradients(patch: int = 32) -> str:
    from .nn import ConvNet, LogisticModel, grad_check

    rng = np.random.default_rng(0)
    x = rng.random((1, 3, 8, 8))
    lin = LogisticModel(3 * 8 * 8, seed=0)
    e_lin = grad_check(lin, x, np.array([1]))
    if not e_lin < 1e-8:
        raise AssertionError(f"logistic gradient error {e_lin:.2e}")
    net = ConvNet(seed=0, dtype=np.float64)
    xb = rng.random((4, 3, patch, patch))
    e = grad_check(net, xb, np.array([1, 0, 1, 0]), w_pos=256.0)
    if not e < 1e-4:
        raise AssertionError(f"network gradient error {e:.2e}")
    return f"logistic {e_lin:.1e}, network {e:.1e} (patch {patch})"


def check_anchors() -> str:
    from .nn import weighted_bce
    from .optim import cosine_lr

    if abs(weighted_bce(np.array([0.5]), np.array([1]), 1.0, 1.0) - math.log(2)) > 1e-12:
        raise AssertionError("weighted_bce(0.5, 1) != ln 2")
    if cosine_lr(0, 100) != 1e-4 or cosine_lr(100, 100) != 1e-6:
        raise AssertionError("cosine schedule endpoints")
    return "ln 2, lr endpoints"


def run_all(quick: bool = True) -> List[dict]:
    checks: List[Tuple[str, Callable[[], str]]] = [
        ("hilbert_bijection", check_hilbert),
        ("byte_round_trip", check_round_trip),
        ("mask_exactness", check_mask),
        ("gradient_check", lambda: check_gradients(32 if quick else 64)),
        ("loss_schedule_anchors", check_anchors),
    ]
    out = []
    for name, fn in checks:
        t0 = time.perf_counter()
        try:
            detail, ok = fn(), True
        except Exception as exc:  # report, don't crash the suite
            detail, ok = f"{type(exc).__name__}: {exc}", False
        out.append({"name": name, "passed": ok, "detail": detail,
                    "seconds": round(time.perf_counter() - t0, 3)})
    return out
