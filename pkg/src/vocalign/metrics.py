"""Evaluation metrics: exact-match accuracy, permutation-maximized clustering
accuracy, label-set IoU, and soft accuracy over a precomputed word-similarity
matrix."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from . import FormatError, ValidationError
from .align import max_weight_assignment
from .store import EmbeddingMatrix, load_matrix


def _as_labels(v) -> np.ndarray:
    arr = np.asarray(v, dtype=np.int64)
    if arr.ndim != 1:
        raise ValidationError("label vector must be 1-D")
    if arr.size and arr.min() < 0:
        raise ValidationError("label ids must be non-negative")
    return arr


def top1_accuracy(pred, gt) -> float:
    pred, gt = _as_labels(pred), _as_labels(gt)
    if pred.shape != gt.shape:
        raise ValidationError(f"length mismatch: {pred.shape[0]} vs {gt.shape[0]}")
    return float((pred == gt).mean())


def clustering_accuracy(pred, gt) -> float:
    """Exact-match accuracy maximized over injective relabelings of the
    predictions, solved as maximum-weight assignment on the confusion matrix.
    Surplus predicted labels map to zero-weight padding columns."""
    pred, gt = _as_labels(pred), _as_labels(gt)
    if pred.shape != gt.shape:
        raise ValidationError(f"length mismatch: {pred.shape[0]} vs {gt.shape[0]}")
    p_ids, p_inv = np.unique(pred, return_inverse=True)
    g_ids, g_inv = np.unique(gt, return_inverse=True)
    confusion = np.zeros((p_ids.size, max(p_ids.size, g_ids.size)))
    np.add.at(confusion, (p_inv, g_inv), 1.0)
    _, matched = max_weight_assignment(confusion)
    return float(matched / pred.size)


def label_set_iou(pred_set, gt_set) -> float:
    pred_set, gt_set = set(pred_set), set(gt_set)
    union = pred_set | gt_set
    if not union:
        return 1.0
    return len(pred_set & gt_set) / len(union)


def soft_accuracy(pred, gt, sim: np.ndarray) -> float:
    """Mean sim[pred_i, gt_i]; ids must index the similarity matrix."""
    pred, gt = _as_labels(pred), _as_labels(gt)
    if pred.shape != gt.shape:
        raise ValidationError(f"length mismatch: {pred.shape[0]} vs {gt.shape[0]}")
    sim = np.asarray(sim, dtype=np.float64)
    if pred.max() >= sim.shape[0] or gt.max() >= sim.shape[1]:
        raise ValidationError(
            f"label id out of range for {sim.shape[0]}x{sim.shape[1]} similarity matrix"
        )
    return float(sim[pred, gt].mean())


def similarity_from_banks(a: EmbeddingMatrix, b: EmbeddingMatrix) -> np.ndarray:
    """Cosine similarity matrix between two unit-norm banks."""
    if not (a.normalized and b.normalized):
        raise ValidationError("similarity banks must be normalized")
    if a.d != b.d:
        raise ValidationError(f"dimension mismatch {a.d} vs {b.d}")
    sim = np.clip(a.data @ b.data.T, -1.0, 1.0)
    return sim


def load_similarity(emb_path, sidecar_path=None):
    """Similarity matrices travel as EMB1 payloads (normalized flag 0) plus a
    JSON sidecar {"rows": [...], "cols": [...]} naming the axes."""
    m = load_matrix(emb_path, normalize=False)
    sim = m.data
    if sim.min() < -1.0 - 1e-5 or sim.max() > 1.0 + 1e-5:
        raise FormatError(f"{emb_path}: similarity entries outside [-1, 1]")
    rows = cols = None
    if sidecar_path is not None:
        meta = json.loads(Path(sidecar_path).read_text(encoding="utf-8"))
        rows, cols = meta.get("rows"), meta.get("cols")
        if rows is not None and len(rows) != sim.shape[0]:
            raise FormatError(f"{sidecar_path}: {len(rows)} row ids for {sim.shape[0]} rows")
        if cols is not None and len(cols) != sim.shape[1]:
            raise FormatError(f"{sidecar_path}: {len(cols)} col ids for {sim.shape[1]} cols")
        if rows == cols and sim.shape[0] == sim.shape[1]:
            if np.abs(np.diag(sim) - 1.0).max() > 1e-5:
                raise FormatError(f"{emb_path}: self-similarity diagonal is not 1")
    return np.clip(sim, -1.0, 1.0), rows, cols


def metric_record(metric: str, value: float, n: int, config: dict | None = None) -> dict:
    cfg = json.dumps(config or {}, sort_keys=True)
    return {
        "metric": metric,
        "value": value,
        "n": n,
        "config_hash": hashlib.sha256(cfg.encode("utf-8")).hexdigest()[:16],
    }
