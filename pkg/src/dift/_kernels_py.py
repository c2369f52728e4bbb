"""Pure-numpy kernels: the fallback backend for `dift.kernels`.

Signatures and semantics mirror the compiled extension exactly. All inputs
are float64 C-contiguous arrays; rows index positions, columns index the
vocabulary.
"""

from __future__ import annotations

import math

import numpy as np

KIND_LOW_CONFIDENCE = 0
KIND_ENTROPY = 1
KIND_MARGIN = 2


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max-shift for stability."""
    logits = np.ascontiguousarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=1, keepdims=True)
    ex = np.exp(shifted)
    return ex / ex.sum(axis=1, keepdims=True)


def score_rows(probs: np.ndarray, kind: int) -> tuple[np.ndarray, np.ndarray]:
    """Greedy token and strategy score per row.

    Returns (tokens, scores): the argmax token id (first maximum wins) and
    the [0, 1] score. kind 0: max probability; kind 1: 1 - H(p)/ln(V);
    kind 2: top-1 minus top-2 probability.
    """
    probs = np.ascontiguousarray(probs, dtype=np.float64)
    n, vocab = probs.shape
    if kind == KIND_ENTROPY and vocab < 2:
        raise ValueError("entropy scoring needs a vocabulary of at least 2")
    tokens = probs.argmax(axis=1)
    top1 = probs[np.arange(n), tokens]
    if kind == KIND_LOW_CONFIDENCE:
        scores = top1.copy()
    elif kind == KIND_ENTROPY:
        with np.errstate(divide="ignore", invalid="ignore"):
            contrib = np.where(probs > 0.0, probs * np.log(probs), 0.0)
        scores = 1.0 - (-contrib.sum(axis=1)) / math.log(vocab)
        np.clip(scores, 0.0, 1.0, out=scores)
    elif kind == KIND_MARGIN:
        if vocab == 1:
            scores = top1.copy()
        else:
            masked = probs.copy()
            masked[np.arange(n), tokens] = -np.inf
            scores = top1 - masked.max(axis=1)
        np.clip(scores, 0.0, 1.0, out=scores)
    else:
        raise ValueError(f"unknown score kind {kind}")
    return tokens.astype(np.int64), scores


def vrg_rows(cond: np.ndarray, uncond: np.ndarray, scale: float) -> np.ndarray:
    """u + (s+1)(c - u) per element; scale 0 returns an exact copy of cond.

    The short-circuit matters: u + 1*(c - u) is not bit-stable in floating
    point, and the scale-0 identity must be exact.
    """
    cond = np.ascontiguousarray(cond, dtype=np.float64)
    if scale == 0.0:
        return cond.copy()
    uncond = np.ascontiguousarray(uncond, dtype=np.float64)
    return uncond + (scale + 1.0) * (cond - uncond)


def hellinger_rows(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Hellinger distance per row, normalized to [0, 1] by 1/sqrt(2)."""
    p = np.ascontiguousarray(p, dtype=np.float64)
    q = np.ascontiguousarray(q, dtype=np.float64)
    diff = np.sqrt(p) - np.sqrt(q)
    return np.sqrt((diff * diff).sum(axis=1)) / math.sqrt(2.0)
