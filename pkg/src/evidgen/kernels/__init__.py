"""Numeric kernels with a compiled core and a pure-numpy fallback.

The backend is chosen once at import time. Set EVIDGEN_KERNELS to
control it: "py" forces the numpy fallback, "c" requires the compiled
extension (ImportError if it is missing), "auto" (the default) prefers
the compiled extension when available.

Matrix products always go through numpy/BLAS; these kernels cover the
bandwidth-bound elementwise and reduction passes around them. The
compiled backend binds only the kernels where single-pass fusion beats
numpy's temporaries (layer norm, attention softmax, cross-entropy
backward); the map-style kernels dominated by transcendentals (GELU,
cross-entropy forward) stay on numpy in both backends because its
vectorized tanh/exp outruns a scalar libm loop. Both implementations of
every kernel remain importable via ``available_backends`` for parity
tests and benchmarks.
"""

from __future__ import annotations

import os

from . import _numpy

_KERNEL_NAMES = (
    "layer_norm_fwd",
    "layer_norm_bwd",
    "attn_softmax_fwd",
    "attn_softmax_bwd",
    "gelu_fwd",
    "gelu_bwd",
    "softmax_xent_fwd",
    "softmax_xent_bwd",
)

_choice = os.environ.get("EVIDGEN_KERNELS", "auto").lower()
if _choice not in ("auto", "c", "py"):
    raise ValueError(
        f"EVIDGEN_KERNELS must be 'auto', 'c', or 'py', got {_choice!r}"
    )

if _choice == "py":
    _impl = _numpy
    BACKEND = "python"
else:
    try:
        from . import _core as _impl  # type: ignore[no-redef]

        BACKEND = "compiled"
    except ImportError:
        if _choice == "c":
            raise
        _impl = _numpy
        BACKEND = "python"

layer_norm_fwd = _impl.layer_norm_fwd
layer_norm_bwd = _impl.layer_norm_bwd
attn_softmax_fwd = _impl.attn_softmax_fwd
attn_softmax_bwd = _impl.attn_softmax_bwd
gelu_fwd = _numpy.gelu_fwd
gelu_bwd = _numpy.gelu_bwd
softmax_xent_fwd = _numpy.softmax_xent_fwd
softmax_xent_bwd = _impl.softmax_xent_bwd


def available_backends():
    """Map of backend name to kernel module, for parity tests and benchmarks."""
    found = {"python": _numpy}
    try:
        from . import _core

        found["compiled"] = _core
    except ImportError:
        pass
    return found


__all__ = list(_KERNEL_NAMES) + ["BACKEND", "available_backends"]
