"""Hot-kernel dispatch: compiled extension when available, numpy otherwise.

Set NRTRACK_FORCE_NUMPY=1 to skip the compiled backend (used by the
benchmark and the parity tests).
"""

import os

if os.environ.get("NRTRACK_FORCE_NUMPY"):
    from . import numpy_backend as _impl

    BACKEND = "numpy"
else:
    try:
        from . import _core as _impl

        BACKEND = "cython"
    except ImportError:
        from . import numpy_backend as _impl

        BACKEND = "numpy"

accumulate_normal = _impl.accumulate_normal
warp_points = _impl.warp_points
