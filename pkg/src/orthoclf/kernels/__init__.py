"""Hot inner-loop kernels with two interchangeable lanes.

``reference`` is pure numpy; ``jitted`` carries numba ``@njit`` versions of
the same functions. The active lane is picked once at import time from the
``ORTHOCLF_BACKEND`` environment variable:

  ORTHOCLF_BACKEND=numpy   force the pure-numpy lane
  ORTHOCLF_BACKEND=numba   require numba (ImportError if unavailable)
  unset                    numba when importable, numpy otherwise

Both lanes implement identical arithmetic (same accumulation order wherever
it affects bits); ``benchmarks/bench_kernels.py`` compares their speed.
Matrix products are deliberately not here: BLAS already owns them.
"""

import os

__all__ = [
    "BACKEND",
    "prelu_fwd",
    "prelu_bwd",
    "sgd_update",
    "linf_step",
    "l1_project_rows",
    "topq_sign_step",
]

_requested = os.environ.get("ORTHOCLF_BACKEND", "").strip().lower()
if _requested not in ("", "numpy", "numba"):
    raise ValueError(
        f"ORTHOCLF_BACKEND must be 'numpy' or 'numba', got {_requested!r}"
    )

if _requested == "numpy":
    from . import reference as _impl

    BACKEND = "numpy"
else:
    try:
        from . import jitted as _impl

        BACKEND = "numba"
    except ImportError:
        if _requested == "numba":
            raise
        from . import reference as _impl

        BACKEND = "numpy"

prelu_fwd = _impl.prelu_fwd
prelu_bwd = _impl.prelu_bwd
sgd_update = _impl.sgd_update
linf_step = _impl.linf_step
l1_project_rows = _impl.l1_project_rows
topq_sign_step = _impl.topq_sign_step
