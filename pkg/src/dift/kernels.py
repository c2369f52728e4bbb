"""Kernel backend selection: compiled extension if built, numpy otherwise.

Import the functions from here; `backend_name()` reports which one is
active. Set DIFT_KERNELS=python (or =compiled) to force a backend instead
of auto-detecting. Both backends agree to float64 round-off (the compiled
loops sum sequentially, numpy pairwise), so results are deterministic per
backend but not bit-identical across backends.
"""

from __future__ import annotations

import os

_FORCED = os.environ.get("DIFT_KERNELS")

if _FORCED == "python":
    from . import _kernels_py as _impl

    _BACKEND = "python"
elif _FORCED == "compiled":
    from . import _kernels as _impl

    _BACKEND = "compiled"
elif _FORCED:
    raise ImportError(f"DIFT_KERNELS must be 'python' or 'compiled', not {_FORCED!r}")
else:
    try:
        from . import _kernels as _impl

        _BACKEND = "compiled"
    except ImportError:  # extension not built on this platform
        from . import _kernels_py as _impl

        _BACKEND = "python"

KIND_LOW_CONFIDENCE = _impl.KIND_LOW_CONFIDENCE
KIND_ENTROPY = _impl.KIND_ENTROPY
KIND_MARGIN = _impl.KIND_MARGIN

softmax_rows = _impl.softmax_rows
score_rows = _impl.score_rows
vrg_rows = _impl.vrg_rows
hellinger_rows = _impl.hellinger_rows


def backend_name() -> str:
    return _BACKEND


def available_backends() -> dict[str, object]:
    """Importable kernel modules keyed by backend name (for benchmarks/tests)."""
    from . import _kernels_py

    backends: dict[str, object] = {"python": _kernels_py}
    try:
        from . import _kernels

        backends["compiled"] = _kernels
    except ImportError:
        pass
    return backends
