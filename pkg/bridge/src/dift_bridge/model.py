"""Masked-LM backends for the bridge.

A backend is anything that can score every masked position of a partially
committed sequence under two condition modes: the full input, or the input
with its visual segment removed. The reference backend here is a compact
deterministic numpy model so the server runs (and is testable) without any
heavyweight checkpoint; real checkpoints plug in by implementing the same
`LogitBackend` protocol.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

MASK_TOKEN = "[M]"

_BASE_WORDS = [
    "Answer:", "A", "B", "C", "D",
    "the", "a", "is", "are", "was", "of", "in", "on", "and", "so",
    "because", "therefore", "first", "then", "next", "finally",
    "image", "shows", "object", "color", "left", "right", "count",
    "reason", "step", "we", "see", "it", "this", "that", "there",
]


def default_vocabulary(size: int = 64) -> list[str]:
    words = [MASK_TOKEN] + _BASE_WORDS
    words += [f"w{i:02d}" for i in range(len(words), size)]
    return words[:size]


class LogitBackend(Protocol):
    """Per-position logits for the masked slots of a sequence."""

    vocab: Sequence[str]
    mask_token_id: int

    def logits(
        self,
        tokens: Sequence[int],
        masked: Sequence[bool],
        positions: Sequence[int],
        visual: bool,
    ) -> np.ndarray:
        """(len(positions), vocab_size) float64 logits."""


def _seeded_rng(*parts: str) -> np.random.Generator:
    digest = hashlib.blake2b("|".join(parts).encode(), digest_size=16).digest()
    words = [int.from_bytes(digest[i : i + 8], "little") for i in (0, 8)]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(words)))


@dataclass
class ReferenceDiffusionModel:
    """Tiny deterministic bilinear masked-token scorer.

    Each position's context mixes its position embedding, the mean prompt
    embedding, the mean embedding of already-committed tokens, and (in
    full mode only) a projection of the image features. Logits are the
    token-embedding table applied to the squashed context. Dropping the
    visual segment removes exactly that one term.
    """

    identifier: str = "builtin:demo"
    vocab: list[str] = field(default_factory=default_vocabulary)
    dim: int = 32
    max_positions: int = 512
    image_dim: int = 16
    logit_scale: float = 4.0

    def __post_init__(self) -> None:
        if self.vocab[0] != MASK_TOKEN:
            raise ValueError(f"vocabulary must start with the mask token {MASK_TOKEN!r}")
        rng = _seeded_rng("reference-model", self.identifier)
        v, d = len(self.vocab), self.dim
        self.token_embeddings = rng.normal(0.0, 1.0, (v, d)) / np.sqrt(d)
        self.position_embeddings = rng.normal(0.0, 1.0, (self.max_positions, d)) / np.sqrt(d)
        self.visual_projection = rng.normal(0.0, 1.0, (self.image_dim, d)) / np.sqrt(self.image_dim)
        self._prompt_vec = np.zeros(d)
        self._visual_vec = np.zeros(d)
        self._has_image = False

    @property
    def mask_token_id(self) -> int:
        return 0

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def condition_on(self, prompt: str, image_features: np.ndarray | None) -> None:
        """Fix the session's condition assets: text prompt and optional image."""
        ids = self.tokenize(prompt)
        if ids:
            self._prompt_vec = self.token_embeddings[ids].mean(axis=0)
        else:
            self._prompt_vec = np.zeros(self.dim)
        if image_features is None:
            self._visual_vec = np.zeros(self.dim)
            self._has_image = False
        else:
            features = np.asarray(image_features, dtype=np.float64)
            if features.shape != (self.image_dim,):
                raise ValueError(
                    f"image features must have shape ({self.image_dim},), got {features.shape}"
                )
            self._visual_vec = np.tanh(features @ self.visual_projection)
            self._has_image = True

    @property
    def has_image(self) -> bool:
        return self._has_image

    def tokenize(self, text: str) -> list[int]:
        lookup = {w: i for i, w in enumerate(self.vocab)}
        ids = []
        for word in text.split():
            if word in lookup:
                ids.append(lookup[word])
            else:
                # Out-of-vocabulary words hash to a stable filler id.
                bucket = int.from_bytes(
                    hashlib.blake2b(word.encode(), digest_size=4).digest(), "little"
                )
                ids.append(1 + bucket % (self.vocab_size - 1))
        return ids

    def logits(self, tokens, masked, positions, visual):
        if len(tokens) > self.max_positions:
            raise ValueError(
                f"sequence length {len(tokens)} exceeds the model maximum {self.max_positions}"
            )
        committed = [t for t, m in zip(tokens, masked) if not m]
        if committed:
            visible_vec = self.token_embeddings[committed].mean(axis=0)
        else:
            visible_vec = np.zeros(self.dim)
        base = self._prompt_vec + visible_vec
        if visual and self._has_image:
            base = base + self._visual_vec
        out = np.empty((len(positions), self.vocab_size))
        for row, position in enumerate(positions):
            context = np.tanh(self.position_embeddings[position] + base)
            scores = self.logit_scale * (self.token_embeddings @ context)
            scores[self.mask_token_id] = scores.min() - 10.0
            out[row] = scores
        return out

    def save(self, path: Path | str) -> None:
        np.savez(
            path,
            token_embeddings=self.token_embeddings,
            position_embeddings=self.position_embeddings,
            visual_projection=self.visual_projection,
            vocab=json.dumps(self.vocab),
            logit_scale=self.logit_scale,
        )

    @classmethod
    def load(cls, path: Path | str) -> "ReferenceDiffusionModel":
        data = np.load(path, allow_pickle=False)
        vocab = json.loads(str(data["vocab"]))
        model = cls.__new__(cls)
        model.identifier = str(path)
        model.vocab = vocab
        model.token_embeddings = data["token_embeddings"]
        model.position_embeddings = data["position_embeddings"]
        model.visual_projection = data["visual_projection"]
        model.dim = model.token_embeddings.shape[1]
        model.max_positions = model.position_embeddings.shape[0]
        model.image_dim = model.visual_projection.shape[0]
        model.logit_scale = float(data["logit_scale"])
        model._prompt_vec = np.zeros(model.dim)
        model._visual_vec = np.zeros(model.dim)
        model._has_image = False
        return model


def synthetic_image(seed: str, image_dim: int = 16) -> np.ndarray:
    """A deterministic stand-in for real image features."""
    return _seeded_rng("synthetic-image", seed).normal(0.0, 1.0, image_dim)


def load_model(spec: str) -> ReferenceDiffusionModel:
    """Resolve a model spec: 'builtin:<name>' or a path to a saved .npz."""
    if spec.startswith("builtin:"):
        return ReferenceDiffusionModel(identifier=spec)
    path = Path(spec)
    if not path.exists():
        raise FileNotFoundError(f"model checkpoint {spec!r} not found")
    return ReferenceDiffusionModel.load(path)


def load_image(spec: str | None, image_dim: int = 16) -> np.ndarray | None:
    """Resolve an image spec: None, 'synthetic:<seed>', or a JSON float list."""
    if spec is None:
        return None
    if spec.startswith("synthetic:"):
        return synthetic_image(spec.split(":", 1)[1], image_dim)
    features = json.loads(Path(spec).read_text(encoding="utf-8"))
    return np.asarray(features, dtype=np.float64)
