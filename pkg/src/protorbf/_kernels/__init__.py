"""Hot numeric kernels with a compiled core and a pure-numpy fallback.

The compiled Cython modules are preferred when importable; setting
``PROTORBF_FORCE_PYTHON=1`` forces the numpy fallback.  ``BACKEND`` names
whichever implementation is active.  Both backends expose the same two entry
points:

``slic_assign(lab, cy, cx, ccol, win, alpha, labels, dist)``
    One superpixel assignment sweep, writing into ``labels``/``dist``.
``pam(D, k)``
    PAM (BUILD + SWAP) medoid selection over a distance matrix.
"""

import os

from . import _pam_py, _slic_py

_FORCE_PY = os.environ.get("PROTORBF_FORCE_PYTHON", "") == "1"

if not _FORCE_PY:
    try:
        from ._pam_cy import pam
        from ._slic_cy import slic_assign
        BACKEND = "compiled"
    except ImportError:
        pam = _pam_py.pam
        slic_assign = _slic_py.slic_assign
        BACKEND = "python"
else:
    pam = _pam_py.pam
    slic_assign = _slic_py.slic_assign
    BACKEND = "python"


def implementations(name: str):
    """Return (slic_assign, pam) for an explicit backend, for benchmarks."""
    if name == "python":
        return _slic_py.slic_assign, _pam_py.pam
    if name == "compiled":
        from ._pam_cy import pam as pam_c
        from ._slic_cy import slic_assign as slic_c
        return slic_c, pam_c
    raise ValueError(f"unknown backend '{name}'")
