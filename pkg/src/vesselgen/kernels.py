"""Kernel dispatch: compiled extension when available, numpy fallback otherwise.

Set ``VESSELGEN_PURE_PYTHON=1`` to force the fallback.
"""
from __future__ import annotations

import os

from vesselgen import _pykernels

if os.environ.get("VESSELGEN_PURE_PYTHON", "") not in ("", "0"):
    _impl = _pykernels
else:
    try:
        from vesselgen import _ckernels as _impl
    except ImportError:  # extension not built
        _impl = _pykernels

BACKEND = "cython" if _impl is not _pykernels else "python"

is_simple_point = _impl.is_simple_point
thin_subiteration = _impl.thin_subiteration
capsule_field = _impl.capsule_field
min_sqdist = _impl.min_sqdist
sinkhorn_log = _impl.sinkhorn_log
tql_eigenvalues = _impl.tql_eigenvalues


def backends():
    """Available kernel modules keyed by name (for tests and benchmarks)."""
    out = {"python": _pykernels}
    try:
        from vesselgen import _ckernels
    except ImportError:
        pass
    else:
        out["cython"] = _ckernels
    return out
