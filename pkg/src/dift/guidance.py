"""Condition guidance: extrapolate conditional past unconditional logits.

The combined row is logits_u + (s + 1) * (logits_c - logits_u); both the
greedy token choice and the confidence are taken from the guided row after
softmax. Scale 0 is the exact identity on the conditional row.
"""

from __future__ import annotations

from . import kernels
from .oracle import LogitRow

# Above this scale the textual condition tends to get drowned out; the CLI
# warns but nothing here forbids it.
SCALE_WARN_THRESHOLD = 2.0


def apply_vrg(cond: LogitRow, uncond: LogitRow, s_vrg: float) -> LogitRow:
    """Combine aligned conditional/unconditional rows at guidance scale `s_vrg`.

    Rows must share position and support (both dense of equal width, or
    sparse over identical token ids). Guided sparse rows inherit the
    conditional row's tail-mass bound; only dense mode is exact.
    """
    if s_vrg < 0.0:
        raise ValueError("guidance scale must be non-negative")
    if cond.position != uncond.position:
        raise ValueError(
            f"row positions differ: {cond.position} != {uncond.position}"
        )
    if cond.is_sparse != uncond.is_sparse:
        raise ValueError("cannot mix dense and sparse rows")
    if cond.is_sparse:
        if len(cond.token_ids) != len(uncond.token_ids) or (
            cond.token_ids != uncond.token_ids
        ).any():
            raise ValueError("sparse rows must share an identical support")
    elif len(cond.logits) != len(uncond.logits):
        raise ValueError("dense rows must share the vocabulary width")
    combined = kernels.vrg_rows(cond.logits[None, :], uncond.logits[None, :], s_vrg)[0]
    return LogitRow(
        position=cond.position,
        logits=combined,
        token_ids=None if cond.token_ids is None else cond.token_ids.copy(),
        tail_mass=cond.tail_mass,
    )
