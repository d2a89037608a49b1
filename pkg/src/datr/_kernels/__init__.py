"""Hot scoring kernels: compiled extension when available, numpy otherwise.

Set DATR_FORCE_SLOW_KERNEL=1 to force the fallback (benchmarking, debugging).
"""

import os

from datr._kernels import topk_slow

if os.environ.get("DATR_FORCE_SLOW_KERNEL") == "1":
    _impl = topk_slow
    HAVE_FAST_KERNEL = False
else:
    try:
        from datr._kernels import topk_fast as _impl
        HAVE_FAST_KERNEL = True
    except ImportError:
        _impl = topk_slow
        HAVE_FAST_KERNEL = False

topk_dot = _impl.topk_dot
KERNEL_NAME = "cython" if HAVE_FAST_KERNEL else "numpy"
