"""Encoder registry.

Real backends (CLIP via transformers, Sentence-BERT via sentence-transformers)
import their frameworks lazily so the exporter works without them installed.
The toy backends are deterministic, dependency-free stand-ins used by the
test suite: images embed through a seeded projection of downsampled pixels,
texts through a hashed bag-of-words projection, so identical inputs always
produce identical embeddings.
"""

from __future__ import annotations

import hashlib

import numpy as np

from . import ExportError


def _unit(rows: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(rows, axis=1, keepdims=True)
    if (norms < 1e-30).any():
        raise ExportError("encoder produced a zero embedding")
    return rows / norms


class ToyEncoder:
    """Deterministic hash/projection encoder for offline tests."""

    def __init__(self, dim: int):
        self.dim = dim
        self._rng_proj = np.random.default_rng(np.random.PCG64(1234))
        self._image_proj = self._rng_proj.standard_normal((64, dim))

    def encode_images(self, images) -> np.ndarray:
        rows = np.empty((len(images), self.dim))
        for i, img in enumerate(images):
            small = np.asarray(img.convert("L").resize((8, 8)), dtype=np.float64)
            feats = (small.reshape(-1) - small.mean()) / (small.std() + 1e-6)
            rows[i] = feats @ self._image_proj
        return _unit(rows)

    def _token_vector(self, token: str) -> np.ndarray:
        seed = int.from_bytes(hashlib.sha256(token.encode("utf-8")).digest()[:8], "little")
        return np.random.default_rng(np.random.PCG64(seed)).standard_normal(self.dim)

    def encode_texts(self, texts) -> np.ndarray:
        rows = np.empty((len(texts), self.dim))
        for i, text in enumerate(texts):
            tokens = text.lower().split()
            if not tokens:
                raise ExportError(f"empty sentence at row {i}")
            rows[i] = np.sum([self._token_vector(t) for t in tokens], axis=0)
        return _unit(rows)


class ClipEncoder:
    """CLIP image/text encoder backed by transformers."""

    def __init__(self, checkpoint: str, dim: int, batch_size: int = 32, device: str = "cpu"):
        self.checkpoint = checkpoint
        self.dim = dim
        self.batch_size = batch_size
        self.device = device
        self._model = None
        self._processor = None

    def _load(self):
        if self._model is None:
            try:
                import torch  # noqa: F401
                from transformers import CLIPModel, CLIPProcessor
            except ImportError as e:
                raise ExportError(f"CLIP backend needs torch+transformers: {e}") from e
            try:
                self._model = CLIPModel.from_pretrained(self.checkpoint).to(self.device).eval()
                self._processor = CLIPProcessor.from_pretrained(self.checkpoint)
            except Exception as e:
                raise ExportError(f"cannot load checkpoint {self.checkpoint}: {e}") from e

    def encode_images(self, images) -> np.ndarray:
        self._load()
        import torch

        rows = []
        with torch.no_grad():
            for start in range(0, len(images), self.batch_size):
                batch = images[start : start + self.batch_size]
                inputs = self._processor(images=batch, return_tensors="pt").to(self.device)
                feats = self._model.get_image_features(**inputs)
                rows.append(feats.cpu().numpy().astype(np.float64))
        return _unit(np.vstack(rows))

    def encode_texts(self, texts) -> np.ndarray:
        self._load()
        import torch

        rows = []
        with torch.no_grad():
            for start in range(0, len(texts), self.batch_size):
                batch = list(texts[start : start + self.batch_size])
                inputs = self._processor(
                    text=batch, return_tensors="pt", padding=True, truncation=True
                ).to(self.device)
                feats = self._model.get_text_features(**inputs)
                rows.append(feats.cpu().numpy().astype(np.float64))
        return _unit(np.vstack(rows))


class SbertEncoder:
    """Sentence-BERT text encoder for word-similarity matrices."""

    def __init__(self, checkpoint: str, dim: int, batch_size: int = 64, device: str = "cpu"):
        self.checkpoint = checkpoint
        self.dim = dim
        self.batch_size = batch_size
        self.device = device
        self._model = None

    def _load(self):
        if self._model is None:
            try:
                from sentence_transformers import SentenceTransformer
            except ImportError as e:
                raise ExportError(f"SBERT backend needs sentence-transformers: {e}") from e
            try:
                self._model = SentenceTransformer(self.checkpoint, device=self.device)
            except Exception as e:
                raise ExportError(f"cannot load checkpoint {self.checkpoint}: {e}") from e

    def encode_images(self, images):
        raise ExportError("sentence encoders cannot embed images")

    def encode_texts(self, texts) -> np.ndarray:
        self._load()
        rows = self._model.encode(
            list(texts), batch_size=self.batch_size, convert_to_numpy=True,
            normalize_embeddings=False, show_progress_bar=False,
        ).astype(np.float64)
        return _unit(rows)


_REGISTRY = {
    "clip-vit-b16": lambda **kw: ClipEncoder("openai/clip-vit-base-patch16", dim=512, **kw),
    "clip-vit-l14": lambda **kw: ClipEncoder("openai/clip-vit-large-patch14", dim=768, **kw),
    "sbert-minilm": lambda **kw: SbertEncoder("sentence-transformers/all-MiniLM-L6-v2", dim=384, **kw),
    "toy-64": lambda **kw: ToyEncoder(dim=64),
    "toy-512": lambda **kw: ToyEncoder(dim=512),
}


def encoder_dim(name: str) -> int:
    return {"clip-vit-b16": 512, "clip-vit-l14": 768, "sbert-minilm": 384,
            "toy-64": 64, "toy-512": 512}[name]


def get_encoder(name: str, **kwargs):
    if name not in _REGISTRY:
        raise ExportError(f"unknown model {name!r}; known: {sorted(_REGISTRY)}")
    return _REGISTRY[name](**kwargs)
