"""Hot-loop kernel dispatch.

The compiled ``_ckernels`` extension is used when it was built; otherwise the
numpy implementation in ``_pykernels`` is used. Set ``IVTUNE_PURE_PYTHON=1``
to force the fallback.
"""

import os

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("IVTUNE_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _pykernels

dwconv3x3_forward = _impl.dwconv3x3_forward
dwconv3x3_backward = _impl.dwconv3x3_backward

__all__ = ["BACKEND", "dwconv3x3_forward", "dwconv3x3_backward"]
