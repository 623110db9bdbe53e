"""Kernel backend selection.

The numerical hot spots (teacher forward/backward, group-relative reward
normalization) exist twice: a compiled Cython core and a pure-numpy
reference. By default the compiled core is used when its extension module
imported successfully, otherwise the reference takes over. Set
``GOLDILOCKS_BACKEND=python`` or ``=cython`` to force one explicitly
(forcing ``cython`` raises if the extension is missing).

Within one process the backend is fixed, so seeded runs are exactly
reproducible; across backends results may differ in the last few ulps
because summation order differs.
"""

import os

from goldilocks.backends import reference

_requested = os.environ.get("GOLDILOCKS_BACKEND", "auto").strip().lower()
if _requested not in {"auto", "cython", "python"}:
    raise RuntimeError(
        f"GOLDILOCKS_BACKEND={_requested!r} is not one of auto, cython, python"
    )

if _requested == "python":
    _impl = reference
else:
    try:
        from goldilocks.backends import _core as _impl
    except ImportError:
        if _requested == "cython":
            raise RuntimeError(
                "GOLDILOCKS_BACKEND=cython but the compiled extension is not "
                "available; build it with `pip install -e . --no-build-isolation`"
            ) from None
        _impl = reference

BACKEND = _impl.NAME

teacher_predict = _impl.teacher_predict
teacher_batch_grads = _impl.teacher_batch_grads
group_normalize = _impl.group_normalize
