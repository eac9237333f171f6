"""The four export operations: image embeddings, vocabulary prompt-ensemble
embeddings, augmented sentence embeddings, and word-similarity matrices.

All outputs are EMB1 files plus a manifest; every file is re-read through the
vocalign loader before the manifest is written (round-trip gate).
"""

from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from vocalign.store import load_vocabulary

from . import ExportError
from .encoders import get_encoder
from .formats import validate_roundtrip, write_emb1, write_manifest

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".webp"}

# handcrafted ensemble applied to every vocabulary word; recorded per-run in
# the manifest since downstream scores depend on it
DEFAULT_VOCAB_TEMPLATES = [
    "a photo of a {}.",
    "a photo of the {}.",
    "a blurry photo of a {}.",
]

IMAGE_SIZE = 224


def _load_image(path: Path):
    """Deterministic weak transform: resize the short side, center crop."""
    img = Image.open(path)
    img.load()
    img = img.convert("RGB")
    w, h = img.size
    scale = IMAGE_SIZE / min(w, h)
    img = img.resize((max(IMAGE_SIZE, round(w * scale)), max(IMAGE_SIZE, round(h * scale))))
    w, h = img.size
    left, top = (w - IMAGE_SIZE) // 2, (h - IMAGE_SIZE) // 2
    return img.crop((left, top, left + IMAGE_SIZE, top + IMAGE_SIZE))


def export_image_embeddings(dataset_dir, model: str, out_dir, batch_size: int = 32,
                            device: str = "cpu") -> dict:
    """Embed an ImageFolder-style tree (class subdirectories of images).

    Writes images.emb, labels.txt (one class index per line), classes.json,
    and manifest.json. Corrupt images are skipped with a warning count.
    """
    dataset_dir = Path(dataset_dir)
    if not dataset_dir.is_dir():
        raise ExportError(f"dataset directory not found: {dataset_dir}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    encoder = get_encoder(model, batch_size=batch_size, device=device)

    classes = sorted(p.name for p in dataset_dir.iterdir() if p.is_dir())
    if not classes:
        raise ExportError(f"{dataset_dir}: no class subdirectories")
    images, labels, skipped = [], [], 0
    for class_idx, cls in enumerate(classes):
        for path in sorted((dataset_dir / cls).iterdir()):
            if path.suffix.lower() not in IMAGE_SUFFIXES:
                continue
            try:
                images.append(_load_image(path))
            except (OSError, UnidentifiedImageError) as e:
                skipped += 1
                log.warning("skipping unreadable image %s (%s)", path, e)
                continue
            labels.append(class_idx)
    if not images:
        raise ExportError(f"{dataset_dir}: no readable images")
    rows = encoder.encode_images(images)

    emb_path = out_dir / "images.emb"
    write_emb1(rows, emb_path)
    validate_roundtrip(emb_path, rows.shape[0], rows.shape[1])
    labels_path = out_dir / "labels.txt"
    labels_path.write_text("".join(f"{c}\n" for c in labels), encoding="utf-8")
    classes_path = out_dir / "classes.json"
    classes_path.write_text(json.dumps(classes, indent=2) + "\n", encoding="utf-8")
    write_manifest(
        out_dir, model, str(dataset_dir),
        {"n": rows.shape[0], "d": rows.shape[1], "skipped": skipped},
        [emb_path, labels_path, classes_path],
    )
    return {"n": rows.shape[0], "d": rows.shape[1], "skipped": skipped}


def export_vocab_embeddings(vocab_path, model: str, out_dir, templates=None,
                            batch_size: int = 64, device: str = "cpu") -> dict:
    """Prompt-ensemble embeddings per vocabulary word: each template filled
    with the word name, encoded, averaged, renormalized. Row j is word_id j."""
    vocab = load_vocabulary(vocab_path)  # enforces contiguous ids, unique names
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    templates = list(templates) if templates else list(DEFAULT_VOCAB_TEMPLATES)
    encoder = get_encoder(model, batch_size=batch_size, device=device)

    sentences = [t.format(w.name) for w in vocab.words for t in templates]
    rows = encoder.encode_texts(sentences)
    per_word = rows.reshape(len(vocab), len(templates), -1).mean(axis=1)
    norms = np.linalg.norm(per_word, axis=1, keepdims=True)
    if (norms < 1e-12).any():
        raise ExportError("template ensemble mean vanished for some word")
    per_word = per_word / norms

    emb_path = out_dir / "vocab.emb"
    write_emb1(per_word, emb_path)
    validate_roundtrip(emb_path, len(vocab), per_word.shape[1])
    write_manifest(
        out_dir, model, str(vocab_path),
        {"n": len(vocab), "d": per_word.shape[1], "vocab_size": len(vocab)},
        [emb_path], templates=templates,
    )
    return {"n": len(vocab), "d": per_word.shape[1]}


def export_augmented_embeddings(sentences_path, model: str, out_dir,
                                batch_size: int = 64, device: str = "cpu") -> dict:
    """Embed a sentence list one row per line, row-aligned with the input."""
    sentences_path = Path(sentences_path)
    if not sentences_path.exists():
        raise ExportError(f"sentence file not found: {sentences_path}")
    sentences = sentences_path.read_text(encoding="utf-8").splitlines()
    if not sentences:
        raise ExportError(f"{sentences_path}: no sentences")
    for i, s in enumerate(sentences):
        if not s.strip():
            raise ExportError(f"{sentences_path}:{i + 1}: empty sentence")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    encoder = get_encoder(model, batch_size=batch_size, device=device)
    rows = encoder.encode_texts(sentences)

    emb_path = out_dir / "augmented.emb"
    write_emb1(rows, emb_path)
    validate_roundtrip(emb_path, len(sentences), rows.shape[1])
    copy_path = out_dir / "augmented_sentences.txt"
    copy_path.write_text("".join(s + "\n" for s in sentences), encoding="utf-8")
    write_manifest(
        out_dir, model, str(sentences_path),
        {"n": len(sentences), "d": rows.shape[1]},
        [emb_path, copy_path],
    )
    return {"n": len(sentences), "d": rows.shape[1]}


def export_similarity_matrix(pred_vocab_path, gt_labels_path, model: str, out_dir,
                             batch_size: int = 64, device: str = "cpu") -> dict:
    """Similarity matrix between vocabulary word names (rows) and ground-truth
    label names (columns, one per line), written as an EMB1 payload with a
    row/col id sidecar."""
    vocab = load_vocabulary(pred_vocab_path)
    gt_names = [
        line.strip()
        for line in Path(gt_labels_path).read_text(encoding="utf-8").splitlines()
        if line.strip()
    ]
    if not gt_names:
        raise ExportError(f"{gt_labels_path}: no label names")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    encoder = get_encoder(model, batch_size=batch_size, device=device)

    row_names = [w.name for w in vocab.words]
    pred_rows = encoder.encode_texts(row_names)
    gt_rows = encoder.encode_texts(gt_names)
    sim = np.clip(pred_rows @ gt_rows.T, -1.0, 1.0)

    emb_path = out_dir / "similarity.emb"
    write_emb1(sim, emb_path, normalized=False)
    validate_roundtrip(emb_path, sim.shape[0], sim.shape[1], normalized=False)
    sidecar = out_dir / "similarity.json"
    sidecar.write_text(
        json.dumps({"rows": row_names, "cols": gt_names}, indent=2) + "\n", encoding="utf-8"
    )
    write_manifest(
        out_dir, model, f"{pred_vocab_path}|{gt_labels_path}",
        {"n": sim.shape[0], "d": sim.shape[1]},
        [emb_path, sidecar],
    )
    return {"shape": list(sim.shape)}
