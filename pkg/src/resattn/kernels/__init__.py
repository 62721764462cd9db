"""Kernel backend selection.

The compiled core is preferred; the pure-numpy backend is the fallback.
RESATTN_KERNELS=numpy|cython forces a backend (cython raises if the
extension is missing). ``benchmarks/bench_kernels.py`` compares the two.
"""

import os

from . import _numpy

_choice = os.environ.get("RESATTN_KERNELS", "auto").lower()

if _choice == "numpy":
    _impl = _numpy
elif _choice in ("auto", "cython"):
    try:
        from . import _core as _impl
    except ImportError:
        if _choice == "cython":
            raise ImportError(
                "RESATTN_KERNELS=cython but the compiled extension is not built; "
                "run `pip install -e .` or `python setup.py build_ext --inplace`"
            )
        _impl = _numpy
else:
    raise ValueError(f"RESATTN_KERNELS must be auto|cython|numpy, got {_choice!r}")

BACKEND = _impl.BACKEND
im2col = _impl.im2col
col2im = _impl.col2im
maxpool_forward = _impl.maxpool_forward
maxpool_backward = _impl.maxpool_backward


def get_backend(name):
    """Return a specific backend module (for parity tests/benchmarks)."""
    if name == "numpy":
        return _numpy
    if name == "cython":
        from . import _core

        return _core
    raise ValueError(name)
