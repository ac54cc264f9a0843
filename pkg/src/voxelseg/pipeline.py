"""Glue between the on-disk phantom manifest and in-memory training records."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .harmonize import fit_scanner_map, harmonize_exam, make_model_input
from .inference import predict_volume, threshold_slice
from .models import CrfParams, apply_crf
from .phantom import load_manifest
from .trainer import ExamRecord
from .volio import Volume, read_exam, read_mask


def manifest_entries(manifest, partitions=None, label=None) -> list:
    if isinstance(manifest, (str, Path)):
        manifest = load_manifest(manifest)
    parts = None if partitions is None else ({partitions} if isinstance(partitions, str) else set(partitions))
    return [e for e in manifest["exams"]
            if (parts is None or e["partition"] in parts) and (label is None or e["label"] == label)]


def fit_maps(manifest, partitions=("train",)) -> dict:
    """Per-scanner intensity maps from pooled T1 and T1c breast voxels."""
    if isinstance(manifest, (str, Path)):
        manifest = load_manifest(manifest)
    root = Path(manifest["root"])
    pools = {}
    for e in manifest_entries(manifest, partitions):
        exam = read_exam(root / e["path"])
        breast = read_mask(root / e["path"] / "breast").data.astype(bool)
        vols = [exam.t1] + [v for v, _ in exam.t1c_series]
        pools.setdefault(exam.scanner_id, []).extend((v, breast) for v in vols)
    return {sid: fit_scanner_map(vs, sid) for sid, vs in pools.items()}


def load_records(manifest, partitions=None, label=None, style: str = "exam", maps=None,
                 dce: bool = True, use_t2: bool = False) -> list:
    """Harmonize and stack the input channels of every selected exam."""
    if isinstance(manifest, (str, Path)):
        manifest = load_manifest(manifest)
    root = Path(manifest["root"])
    out = []
    for e in manifest_entries(manifest, partitions, label):
        d = root / e["path"]
        exam = harmonize_exam(read_exam(d), style=style, maps=maps)
        inputs = make_model_input(exam, dce=dce, use_t2=use_t2).array()
        breast = read_mask(d / "breast").data.astype(bool)
        gt = read_mask(d / "gt").data.astype(bool) if e["label"] == "malignant" else None
        raters = [read_mask(d / f"rater_{r}") for r in e.get("raters", [])]
        out.append(ExamRecord(e["exam_id"], inputs, breast, gt, e.get("slice_index"), raters,
                              exam.spacing, dict(e)))
    return out


def predict_record(spec, graph, record, prior, slice_index=None, rel_threshold=0.60, keep_all=False):
    """Probability plane and thresholded mask on one slice of one record."""
    k = slice_index
    prob = predict_volume(graph, record.inputs, slices=None if k is None else [k], prior=prior)
    if k is None:
        k = int(np.argmax(prob.data.reshape(prob.dims[0], -1).max(axis=1)))
    if spec.get("crf"):
        plane = Volume(prob.data[k : k + 1], prob.spacing)
        ref = Volume(record.inputs[0][k : k + 1], prob.spacing)
        data = prob.data.copy()
        data[k] = apply_crf(plane, ref, CrfParams()).data[0]
        prob = prob.with_data(data)
    return prob, threshold_slice(prob, k, rel_threshold, keep_all), k
