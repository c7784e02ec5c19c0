"""Command-line entry point: ``cosoco-forge <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

log = logging.getLogger("cosoco_forge")

REPORT_VERSION = 1


class UsageError(Exception):
    pass


def _emit(obj, out: Optional[str] = None):
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _read_stream(path):
    from .tar import parse_tar
    return parse_tar(Path(path).read_bytes())


def _load_image_arg(args):
    """Image from ``--image`` (png/raw with sidecar) or encoded on the fly from ``--in``."""
    from .imageio import load_image
    from .layout import encode_image

    if args.image:
        return load_image(args.image), None
    if args.input:
        stream = _read_stream(args.input)
        return encode_image(stream, args.w), stream
    raise UsageError("need --image or --in")


def _load_scorer(path):
    from .scorer import PatchScorer
    return PatchScorer.load(path)


def _mode(args) -> str:
    if getattr(args, "early_exit", False):
        return "early_exit"
    return args.mode.replace("-", "_")


# -- subcommands -----------------------------------------------------------

def cmd_convert(args):
    from .imageio import save_image
    from .layout import downsample, encode_image

    stream = _read_stream(args.input)
    image = encode_image(stream, args.w)
    if args.size:
        image = downsample(image, *args.size)
    out = Path(args.out)
    stem = out / Path(args.input).stem if out.suffix == "" else out.with_suffix("")
    data, meta = save_image(image, stem, args.format)
    _emit({"schema": "cosoco-forge/convert", "version": REPORT_VERSION, "image": str(data),
           "sidecar": str(meta), "shape": list(image.pixels.shape), "n_bytes": image.layout.n_bytes})


def cmd_diff(args):
    from .diff import admit_record, diff_tarballs

    report = diff_tarballs(_read_stream(args.benign), _read_stream(args.compromised))
    d = report.to_json()
    d.update({"schema": "cosoco-forge/diff", "version": REPORT_VERSION, "admitted": admit_record(report)})
    _emit(d, args.out)


def cmd_mask(args):
    from .diff import diff_tarballs
    from .imageio import save_mask
    from .layout import TileLayout, build_mask

    comp = _read_stream(args.compromised)
    ranges = diff_tarballs(_read_stream(args.benign), comp).affected_ranges()
    mask = build_mask(TileLayout(args.w, comp.total_len), ranges)
    out = Path(args.out)
    stem = out / Path(args.compromised).stem if out.suffix == "" else out.with_suffix("")
    png, meta = save_mask(mask, stem)
    _emit({"schema": "cosoco-forge/mask", "version": REPORT_VERSION, "mask": str(png), "sidecar": str(meta),
           "ratio": mask.ratio(), "affected_bytes": sum(n for _, n in ranges)})


def cmd_synth(args):
    from .synth import ArchiveStore, DatasetParams, build_dataset

    out = Path(args.out)
    params = DatasetParams(n_records=args.n_records, compromised_fraction=args.compromised_fraction,
                           target_mask_ratio=args.mask_ratio, tile_width=args.w)
    manifest = build_dataset(params, args.seed, ArchiveStore(out))
    path = manifest.save(out / "manifest.jsonl")
    counts = {}
    for r in manifest.records:
        counts[r.split] = counts.get(r.split, 0) + 1
    _emit({"schema": "cosoco-forge/synth", "version": REPORT_VERSION, "manifest": str(path),
           "digest": manifest.digest(), "records": len(manifest.records), "splits": counts})


def cmd_train(args):
    from .scorer import TrainConfig, history_csv, train
    from .synth import DatasetManifest

    manifest = DatasetManifest.load(_need(args.manifest, "--manifest"))
    cfg = TrainConfig(lr_max=args.lr_max, lr_min=args.lr_min, epochs=args.epochs, batch_size=args.batch_size,
                      patch=args.patch, w_pos=args.w_pos, w_neg=args.w_neg, seed=args.seed,
                      pooling=args.pooling, threshold=args.threshold)
    scorer, history = train(manifest, cfg)
    ckpt = scorer.save(args.out)
    hist = Path(args.history) if args.history else ckpt.with_suffix(".history.csv")
    hist.write_text(history_csv(history))
    _emit({"schema": "cosoco-forge/train", "version": REPORT_VERSION, "checkpoint": str(ckpt),
           "history": str(hist), "best_epoch": scorer.best_epoch_, "threshold": scorer.threshold,
           "n_params": scorer.net_.n_params()})


def _verdict_report(args, image, verdict):
    rep = verdict.to_json(image.source_digest or None)
    if args.annotate:
        from PIL import Image
        from .imageio import annotate

        rects = [r for r in rep["flagged_rects"]]
        Image.fromarray(annotate(image, rects)).save(args.annotate)
        rep["annotated"] = str(args.annotate)
    return rep


def cmd_scan(args):
    from .detector import scan

    image, _ = _load_image_arg(args)
    scorer = _load_scorer(_need(args.model, "--model"))
    threshold = args.threshold if args.threshold is not None else scorer.threshold
    v = scan(image, scorer, mode=_mode(args), threshold=threshold, patch=args.patch,
             batch_size=args.batch_size, workers=_workers(args))
    _emit(_verdict_report(args, image, v), args.out)


def cmd_explain(args):
    from .detector import explain, scan

    if not args.input:
        raise UsageError("explain needs --in <archive> to resolve file paths")
    image, stream = _load_image_arg(args)
    if stream is None:
        stream = _read_stream(args.input)
    scorer = _load_scorer(_need(args.model, "--model"))
    threshold = args.threshold if args.threshold is not None else scorer.threshold
    v = scan(image, scorer, mode="full", threshold=threshold, patch=args.patch, batch_size=args.batch_size)
    rep = _verdict_report(args, image, v)
    rep["attribution"] = explain(v, image.layout, stream).to_json()
    _emit(rep, args.out)


def cmd_eval(args):
    from .metrics import EngineTable, confusion, ensemble_vote, metrics

    if args.engines:
        table = EngineTable.read(args.engines)
        labels = _labels(_need(args.labels, "--labels"), args.split)
        missing = [i for i in table.ids if i not in labels]
        if missing:
            raise ValueError(f"no label for records: {', '.join(missing[:10])}")
        rows = []
        for a in args.a or [1]:
            votes = ensemble_vote(table, a)
            c = confusion([votes[i] for i in table.ids], [labels[i] for i in table.ids])
            rows.append({"a": a, "confusion": c.to_json(), **metrics(c)})
        _emit({"schema": "cosoco-forge/eval", "version": REPORT_VERSION, "engines": table.engines,
               "ensembles": rows}, args.out)
        return
    from .detector import evaluate_split
    from .synth import DatasetManifest

    manifest = DatasetManifest.load(_need(args.manifest, "--manifest"))
    scorer = _load_scorer(_need(args.model, "--model"))
    threshold = args.threshold if args.threshold is not None else scorer.threshold
    preds = evaluate_split(manifest, scorer, args.split, threshold, patch=args.patch, mode=_mode(args))
    c = confusion([p.predicted for p in preds], [p.label for p in preds])
    _emit({"schema": "cosoco-forge/eval", "version": REPORT_VERSION, "split": args.split,
           "threshold": threshold, "confusion": c.to_json(), **metrics(c),
           "predictions": [vars(p) for p in preds]}, args.out)


def cmd_selftest(args):
    from .selftest import run_all

    results = run_all(quick=not args.full)
    ok = all(r["passed"] for r in results)
    _emit({"schema": "cosoco-forge/selftest", "version": REPORT_VERSION, "passed": ok, "checks": results})
    return 0 if ok else 1


def _labels(path, split: Optional[str]):
    from .synth import read_split_file
    names = {"0": 0, "1": 1, "benign": 0, "malevolent": 1, "compromised": 1}
    out = {}
    for i, lab, tag in read_split_file(path):
        if split is None or tag == split:
            if lab.lower() not in names:
                raise ValueError(f"unknown label {lab!r} for {i}")
            out[i] = names[lab.lower()]
    return out


def _need(value, flag):
    if not value:
        raise UsageError(f"{flag} is required")
    return value


def _workers(args) -> int:
    import os
    cap = os.environ.get("COSOCO_FORGE_THREADS")
    n = args.workers
    return max(1, min(n, int(cap)) if cap else n)


# -- parser ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cosoco-forge", description="Tarball-to-image malware localisation toolkit")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging to stderr")
    sub = p.add_subparsers(dest="command", metavar="command")
    sub.required = True

    def common(sp, seed=False, w=False, patch=False, threshold=False):
        if seed:
            sp.add_argument("--seed", type=int, default=0)
        if w:
            sp.add_argument("--w", type=int, default=256, help="tile width (power of two)")
        if patch:
            sp.add_argument("--patch", type=int, default=256)
        if threshold:
            sp.add_argument("--threshold", type=float, default=None,
                            help="patch probability threshold (default: the checkpoint's)")

    s = sub.add_parser("convert", help="tarball to image + sidecar")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True, help="output directory or file stem")
    s.add_argument("--format", choices=("png", "raw"), default="png")
    s.add_argument("--size", type=int, nargs=2, metavar=("H", "W"), help="downsample to H x W")
    common(s, w=True)
    s.set_defaults(fn=cmd_convert)

    s = sub.add_parser("diff", help="diff benign and compromised tarballs")
    s.add_argument("--benign", required=True)
    s.add_argument("--compromised", required=True)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_diff)

    s = sub.add_parser("mask", help="bitmask of affected bytes")
    s.add_argument("--benign", required=True)
    s.add_argument("--compromised", required=True)
    s.add_argument("--out", required=True)
    common(s, w=True)
    s.set_defaults(fn=cmd_mask)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--n-records", type=int, default=100)
    s.add_argument("--compromised-fraction", type=float, default=0.34)
    s.add_argument("--mask-ratio", type=float, default=0.0032)
    common(s, seed=True, w=True)
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("train", help="train the patch scorer")
    s.add_argument("--manifest")
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--history")
    s.add_argument("--epochs", type=int, default=20)
    s.add_argument("--batch-size", type=int, default=256)
    s.add_argument("--lr-max", type=float, default=1e-4)
    s.add_argument("--lr-min", type=float, default=1e-6)
    s.add_argument("--w-pos", type=float, default=256.0)
    s.add_argument("--w-neg", type=float, default=1.0)
    s.add_argument("--pooling", choices=("avg", "max"), default="avg")
    s.add_argument("--threshold", type=float, default=0.5)
    common(s, seed=True, patch=True)
    s.set_defaults(fn=cmd_train)

    for name, fn in (("scan", cmd_scan), ("explain", cmd_explain)):
        s = sub.add_parser(name, help="scan an image" if name == "scan" else "scan and attribute flagged bytes")
        s.add_argument("--image")
        s.add_argument("--in", dest="input")
        s.add_argument("--model")
        s.add_argument("--out")
        s.add_argument("--annotate", help="write a PNG with flagged patches boxed")
        s.add_argument("--batch-size", type=int, default=16)
        common(s, w=True, patch=True, threshold=True)
        if name == "scan":
            s.add_argument("--mode", choices=("full", "early-exit", "early_exit"), default="full")
            s.add_argument("--early-exit", action="store_true")
            s.add_argument("--workers", type=int, default=1)
        s.set_defaults(fn=fn)

    s = sub.add_parser("eval", help="metrics for a split or an engine table")
    s.add_argument("--manifest")
    s.add_argument("--model")
    s.add_argument("--split", default=None)
    s.add_argument("--engines", help="CSV/JSON engine verdict table")
    s.add_argument("--labels", help="split file with id,label,split")
    s.add_argument("--a", type=int, nargs="+", help="ensemble thresholds")
    s.add_argument("--mode", choices=("full", "early-exit", "early_exit"), default="full")
    s.add_argument("--out")
    common(s, patch=True, threshold=True)
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("selftest", help="run the embedded invariant checks")
    s.add_argument("--full", action="store_true", help="full-size gradient check")
    s.set_defaults(fn=cmd_selftest)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "eval" and args.split is None and not args.engines:
        args.split = "test"
    try:
        rc = args.fn(args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"cosoco-forge {args.command}: error: {e}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError, KeyError, IndexError, AssertionError) as e:
        print(f"cosoco-forge {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    return int(rc or 0)


if __name__ == "__main__":
    sys.exit(main())
