"""Embedding matrices, the EMB1 binary format, vocabularies, and exact nearest-neighbor queries.

EMB1 layout (little-endian):

    bytes 0-3    magic b"EMB1"
    byte  4      version, currently 1
    byte  5      normalized flag (0 or 1)
    bytes 6-7    reserved, must be zero
    bytes 8-15   n as uint64
    bytes 16-23  d as uint64
    then n*d IEEE-754 float32 values, row-major

Vocabulary files are line-delimited JSON, one word per line:
``{"word_id": j, "name": "...", "synsets": [{"definition": "..."}]}``
where word_id must equal the 0-based line number.

Payloads are float32 on disk; in memory everything is float64 so that dot
products accumulate at 64-bit precision (large word banks make float32
summation error visible).
"""

from __future__ import annotations

import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import FormatError, ValidationError

_MAGIC = b"EMB1"
_VERSION = 1
_HEADER = struct.Struct("<4sBBHQQ")  # magic, version, normalized, reserved, n, d

# Rows are processed in fixed-size chunks so that threaded and sequential
# execution issue bit-identical BLAS calls. 2048 rows x 20K words keeps the
# per-chunk score block around 300 MB at float64.
_CHUNK = 2048


@dataclass
class EmbeddingMatrix:
    """Dense row-major matrix of embedding vectors."""

    data: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 2:
            raise ValidationError(f"embedding matrix must be 2-D, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValidationError(f"embedding matrix needs n >= 1 and d >= 1, got {arr.shape}")
        if not np.isfinite(arr).all():
            bad = int(np.argwhere(~np.isfinite(arr))[0][0])
            raise ValidationError(f"embedding matrix contains NaN/Inf (first bad row {bad})")
        self.data = arr

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def d(self) -> int:
        return self.data.shape[1]


def l2_normalize(m: EmbeddingMatrix) -> EmbeddingMatrix:
    """Scale every row to unit L2 norm. Errors on zero rows."""
    norms = np.linalg.norm(m.data, axis=1)
    bad = np.flatnonzero(norms < 1e-30)
    if bad.size:
        raise ValidationError(f"cannot normalize zero-norm row {int(bad[0])}")
    return EmbeddingMatrix(m.data / norms[:, None], normalized=True)


def save_matrix(m: EmbeddingMatrix, path) -> None:
    path = Path(path)
    header = _HEADER.pack(_MAGIC, _VERSION, 1 if m.normalized else 0, 0, m.n, m.d)
    payload = np.ascontiguousarray(m.data, dtype="<f4")
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(payload.tobytes())
    tmp.replace(path)


def load_matrix(path, normalize: str | bool = "auto") -> EmbeddingMatrix:
    """Load an EMB1 file.

    normalize="auto" normalizes only when the header flag says the payload is
    not yet unit-norm, so already-normalized files are never touched twice.
    normalize=False returns the stored payload bit-exactly.
    """
    path = Path(path)
    if not path.exists():
        raise FormatError(f"embedding file not found: {path}")
    blob = path.read_bytes()
    if len(blob) < _HEADER.size:
        raise FormatError(f"{path}: too short for an EMB1 header")
    magic, version, flag, reserved, n, d = _HEADER.unpack_from(blob)
    if magic != _MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {_MAGIC!r}")
    if version != _VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if reserved != 0:
        raise FormatError(f"{path}: reserved header bytes must be zero")
    if flag not in (0, 1):
        raise FormatError(f"{path}: normalized flag must be 0 or 1, got {flag}")
    if n < 1 or d < 1:
        raise FormatError(f"{path}: header declares empty matrix ({n}x{d})")
    expected = _HEADER.size + 4 * n * d
    if len(blob) != expected:
        raise FormatError(
            f"{path}: declared size {n}x{d} needs {expected} bytes, file has {len(blob)}"
        )
    raw = np.frombuffer(blob, dtype="<f4", offset=_HEADER.size)
    if not np.isfinite(raw).all():
        raise FormatError(f"{path}: payload contains NaN/Inf")
    m = EmbeddingMatrix(raw.reshape(n, d), normalized=bool(flag))
    if normalize is True or (normalize == "auto" and not m.normalized):
        m = l2_normalize(m)
    return m


@dataclass
class Word:
    word_id: int
    name: str
    synsets: list[str] = field(default_factory=list)  # definitions


class Vocabulary:
    """Ordered word list; row j of the word embedding bank corresponds to word_id j."""

    def __init__(self, words: list[Word]):
        seen = {}
        for i, w in enumerate(words):
            if w.word_id != i:
                raise ValidationError(f"word_id {w.word_id} at position {i}: ids must be contiguous")
            key = w.name.strip().casefold()
            if key in seen:
                raise ValidationError(f"duplicate word name {w.name!r} (ids {seen[key]} and {i})")
            seen[key] = i
        self.words = words

    def __len__(self) -> int:
        return len(self.words)

    def __getitem__(self, word_id: int) -> Word:
        return self.words[word_id]

    def name(self, word_id: int) -> str:
        return self.words[word_id].name


def load_vocabulary(path) -> Vocabulary:
    path = Path(path)
    if not path.exists():
        raise FormatError(f"vocabulary file not found: {path}")
    words = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh):
            line = line.strip()
            if not line:
                raise FormatError(f"{path}:{lineno + 1}: blank line in vocabulary")
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise FormatError(f"{path}:{lineno + 1}: {e}") from e
            try:
                word = Word(
                    word_id=int(rec["word_id"]),
                    name=str(rec["name"]),
                    synsets=[str(s["definition"]) for s in rec.get("synsets", [])],
                )
            except (KeyError, TypeError) as e:
                raise FormatError(f"{path}:{lineno + 1}: malformed record ({e})") from e
            if word.word_id != lineno:
                raise FormatError(
                    f"{path}:{lineno + 1}: word_id {word.word_id} != line number {lineno}"
                )
            words.append(word)
    if not words:
        raise FormatError(f"{path}: empty vocabulary")
    return Vocabulary(words)


def save_vocabulary(vocab: Vocabulary, path) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        for w in vocab.words:
            rec = {
                "word_id": w.word_id,
                "name": w.name,
                "synsets": [{"definition": s} for s in w.synsets],
            }
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
    tmp.replace(path)


def _topk_rows(sims: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Top-k per row in non-increasing similarity, ties broken by lowest index."""
    n, c = sims.shape
    idx_out = np.empty((n, k), dtype=np.int64)
    sim_out = np.empty((n, k), dtype=np.float64)
    if k == 1:
        best = sims.argmax(axis=1)  # argmax takes the first maximum
        idx_out[:, 0] = best
        sim_out[:, 0] = sims[np.arange(n), best]
        return idx_out, sim_out
    for i in range(n):
        row = sims[i]
        if k >= c:
            cand = np.arange(c)
        else:
            part = np.argpartition(-row, k - 1)[:k]
            thresh = row[part].min()
            cand = np.flatnonzero(row >= thresh)
        order = cand[np.lexsort((cand, -row[cand]))][:k]
        idx_out[i] = order
        sim_out[i] = row[order]
    return idx_out, sim_out


def nearest(
    query: EmbeddingMatrix,
    bank: EmbeddingMatrix,
    k: int = 1,
    threads: int = 1,
) -> tuple[np.ndarray, np.ndarray]:
    """Exact top-k cosine neighbors of each query row in the bank.

    Returns (indices, similarities), both shaped (query.n, k), similarities
    non-increasing along each row with ties broken by lowest bank index.
    Threaded execution processes the same fixed-size chunks as sequential
    execution, so results are identical for any thread count.
    """
    if not (query.normalized and bank.normalized):
        raise ValidationError("nearest requires normalized query and bank matrices")
    if query.d != bank.d:
        raise ValidationError(f"dimension mismatch: query d={query.d}, bank d={bank.d}")
    if not 1 <= k <= bank.n:
        raise ValidationError(f"k={k} out of range [1, {bank.n}]")

    bank_t = np.ascontiguousarray(bank.data.T)
    idx = np.empty((query.n, k), dtype=np.int64)
    sim = np.empty((query.n, k), dtype=np.float64)

    def work(start: int) -> None:
        stop = min(start + _CHUNK, query.n)
        scores = query.data[start:stop] @ bank_t
        idx[start:stop], sim[start:stop] = _topk_rows(scores, k)

    starts = range(0, query.n, _CHUNK)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(work, starts))
    else:
        for s in starts:
            work(s)
    return idx, sim


def text_knn_similarity_stats(bank: EmbeddingMatrix, k: int = 3) -> np.ndarray:
    """Per-row mean cosine similarity to the k nearest other rows (self excluded)."""
    if not bank.normalized:
        raise ValidationError("text_knn_similarity_stats requires a normalized bank")
    if bank.n <= k:
        raise ValidationError(f"bank has {bank.n} rows, need more than k={k}")
    out = np.empty(bank.n, dtype=np.float64)
    bank_t = np.ascontiguousarray(bank.data.T)
    for start in range(0, bank.n, _CHUNK):
        stop = min(start + _CHUNK, bank.n)
        scores = bank.data[start:stop] @ bank_t
        scores[np.arange(stop - start), np.arange(start, stop)] = -np.inf
        _, sims = _topk_rows(scores, k)
        out[start:stop] = sims.mean(axis=1)
    return out
