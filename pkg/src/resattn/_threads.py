"""Thread-cap plumbing. Must be imported before numpy.

RESATTN_THREADS caps the BLAS thread pools; unset leaves the library
defaults alone. Kernel loops and the training loop itself are always
single-threaded, so this is the only parallelism knob.
"""

import os

_CAP = os.environ.get("RESATTN_THREADS")
if _CAP:
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, _CAP)
