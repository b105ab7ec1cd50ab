"""Kernel dispatch: numba-accelerated hot loops with a pure-numpy fallback.

Set GLYPHFLOW_NO_NUMBA=1 to force the numpy reference path; otherwise the
numba twins are used whenever numba imports cleanly. `USING_NUMBA` reports
the active path. Both paths are importable directly (`kernels.reference`,
`kernels.accelerated`) for the comparison benchmark and the parity tests.
"""

from __future__ import annotations

import os

from . import reference

_FORCE_REFERENCE = os.environ.get("GLYPHFLOW_NO_NUMBA", "").strip().lower() in ("1", "true", "yes")

if not _FORCE_REFERENCE:
    # omp avoids the noisy TBB-version warning and is present in this stack
    os.environ.setdefault("NUMBA_THREADING_LAYER", "omp")
    try:
        from . import accelerated as _impl
        USING_NUMBA = True
    except ImportError:
        _impl = reference
        USING_NUMBA = False
else:
    _impl = reference
    USING_NUMBA = False

LN_EPS = reference.LN_EPS

# numpy's SIMD transcendentals beat numba's scalar libm loops, so the
# exp/tanh-bound forward kernels stay on the reference path even when
# numba is active; the fused reduction/polynomial kernels go to numba.
# benchmarks/kernel_bench.py reproduces the measurements behind this.
layernorm_forward = _impl.layernorm_forward
layernorm_backward = _impl.layernorm_backward
masked_softmax = reference.masked_softmax
softmax_backward = _impl.softmax_backward
gelu_forward = reference.gelu_forward
gelu_backward = _impl.gelu_backward
silu_forward = reference.silu_forward
silu_backward = reference.silu_backward
adamw_update = _impl.adamw_update
scale_bitmap = _impl.scale_bitmap
dilate_mask = _impl.dilate_mask
shear_mask = _impl.shear_mask
jitter_mask = _impl.jitter_mask
composite_ink = _impl.composite_ink
decode_labels = _impl.decode_labels
paint_ellipse = _impl.paint_ellipse

__all__ = [
    "USING_NUMBA", "LN_EPS", "reference",
    "layernorm_forward", "layernorm_backward", "masked_softmax", "softmax_backward",
    "gelu_forward", "gelu_backward", "silu_forward", "silu_backward", "adamw_update",
    "scale_bitmap", "dilate_mask", "shear_mask", "jitter_mask", "composite_ink",
    "decode_labels", "paint_ellipse",
]
