"""Backend selection for the hot kernels.

The compiled extension is used when it imports; setting the environment
variable ``WFANOVA_PURE_PYTHON=1`` forces the NumPy fallback.
"""

import os

from . import _pykernels

if os.environ.get("WFANOVA_PURE_PYTHON", "") not in ("", "0"):
    _impl = _pykernels
else:
    try:
        from . import _ckernels as _impl
    except ImportError:  # extension not built
        _impl = _pykernels

BACKEND = _impl.BACKEND

bspline_design = _impl.bspline_design
jupp_inverse = _impl.jupp_inverse
fc_slopes = _impl.fc_slopes
hermite_eval = _impl.hermite_eval
hermite_invert = _impl.hermite_invert
warped_times = _impl.warped_times
group_logliks = _impl.group_logliks
group_moments = _impl.group_moments
group_chain = _impl.group_chain


def available_backends():
    """Return ``{name: module}`` for every importable backend."""
    out = {"python": _pykernels}
    try:
        from . import _ckernels
    except ImportError:
        pass
    else:
        out["cython"] = _ckernels
    return out
