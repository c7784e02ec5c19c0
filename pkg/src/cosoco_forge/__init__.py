"""Tarball-to-image conversion, synthetic datasets and patch-level malware localisation."""
from .tar import FileEntry, TarError, TarStream, locate_offset, parse_tar, permute_files
from .layout import (EncodedImage, Mask, TileLayout, build_mask, decode_bytes, downsample,
                     downsample_mask, encode_image, hilbert_d2xy, hilbert_xy2d, offset_to_pixel,
                     pixel_to_offset)
from .diff import DiffReport, admit_record, diff_tarballs
from .synth import DatasetManifest, DatasetParams, build_dataset, inject_payload, synth_benign
from .detector import MILDetector, Verdict, aggregate, evaluate_split, explain, patchify, scan
from .metrics import Confusion, EngineTable, confusion, ensemble_vote, metrics

__version__ = "0.1.0"
